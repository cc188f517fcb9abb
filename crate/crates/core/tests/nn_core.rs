use dlt_core::nn::{self, gradcheck, LossKind, Mlp, Sgd};
use ndarray::Array2;
use rand::Rng;

#[test]
fn analytic_gradients_match_finite_differences() {
    let report = gradcheck::run_suite(50, 2024, gradcheck::DEFAULT_STEP).unwrap();
    assert_eq!(report.models, 50);
    assert!(report.checked > 1000);
    assert!(report.max_param_rel_error < 1e-4, "{report:?}");
    assert!(report.max_input_rel_error < 1e-4, "{report:?}");
}

#[test]
fn input_gradient_has_input_dimension() {
    let model = Mlp::init(&[7, 5, 3], 1).unwrap();
    let g = model.input_gradient(&[0.1; 7], 2).unwrap();
    assert_eq!(g.len(), 7);
}

#[test]
fn separable_points_are_fitted() {
    let mut r = dlt_core::rng::stream(17, 0);
    let mut xs = Vec::new();
    let mut labels = Vec::new();
    while labels.len() < 200 {
        let (a, b) = (r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
        let margin: f64 = a - 0.5 * b;
        if margin.abs() < 0.05 {
            continue;
        }
        xs.extend([a, b]);
        labels.push(usize::from(margin > 0.0));
    }
    let x = Array2::from_shape_vec((200, 2), xs).unwrap();
    let mut y = Array2::zeros((200, 2));
    for (i, &l) in labels.iter().enumerate() {
        y[[i, l]] = 1.0;
    }
    let mut model = Mlp::init(&[2, 16, 2], 3).unwrap();
    let mut opt = Sgd::new(&model, 0.1, 0.9, 0.0);
    let w = vec![1.0; 20];
    for _ in 0..200 {
        for start in (0..200).step_by(20) {
            let xb = x.slice(ndarray::s![start..start + 20, ..]);
            let yb = y.slice(ndarray::s![start..start + 20, ..]);
            let (_, g) = nn::backward(&model, xb, yb, LossKind::CrossEntropy, &w).unwrap();
            opt.step(&mut model, &g).unwrap();
        }
    }
    let correct = (0..200)
        .filter(|&i| model.predict(x.row(i).as_slice().unwrap()).unwrap() == labels[i])
        .count();
    assert!(correct >= 198, "{correct} of 200");
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let model = Mlp::init(&[4, 6, 3], 9).unwrap();
    let mut bytes = Vec::new();
    nn::write_checkpoint(&model, &mut bytes).unwrap();
    let back = nn::read_checkpoint(bytes.as_slice()).unwrap();
    let x = [0.3, -0.2, 1.5, 0.0];
    assert_eq!(model.forward(&x).unwrap(), back.forward(&x).unwrap());
}
