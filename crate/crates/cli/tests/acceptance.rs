//! Acceptance suite: one PASS/FAIL line per criterion. Tolerances and time
//! limits are fixed here. Pass a substring to run only matching criteria.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use dlt_core::data::{generate_blobs, inject_symmetric_noise, NoiseSpec};
use dlt_core::estimator::{fit_gmm2, EmConfig};
use dlt_core::ledger::{quantile, ThresholdMode, ThresholdPolicy};
use dlt_core::nn::{self, gradcheck};
use dlt_core::rng;
use dlt_core::ssl::{reg_loss, sharpen};
use dlt_core::trainer::{self, DataConfig, HardSampleKind, Mode, TrainConfig};
use rand::Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

struct Criterion {
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn gradients() -> Outcome {
    let r = gradcheck::run_suite(50, 0, 1e-5)?;
    let ok = r.models == 50 && r.max_param_rel_error < 1e-4 && r.max_input_rel_error < 1e-4;
    Ok((
        ok,
        format!(
            "{} coordinates, max rel error params {:.2e} inputs {:.2e} (< 1e-4)",
            r.checked, r.max_param_rel_error, r.max_input_rel_error
        ),
    ))
}

fn sort_oracle(values: &[f64], q: f64) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    // Smallest rank k with k >= q·n, up to the same 1e-9 slack.
    let k = (1..=n)
        .find(|&k| k as f64 >= q * n as f64 - 1e-9)
        .unwrap_or(n);
    s[k - 1]
}

fn quantile_oracle() -> Outcome {
    let mut r = rng::stream(1, 0);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = r.random_range(1..=500);
        let values: Vec<f64> = (0..n).map(|_| r.random_range(-10.0..10.0)).collect();
        let q: f64 = r.random_range(0.0..=1.0);
        if quantile(&values, q)? != sort_oracle(&values, q) {
            mismatches += 1;
        }
    }
    Ok((
        mismatches == 0,
        format!("{mismatches} mismatches in 1000 vectors"),
    ))
}

fn noise_statistics() -> Outcome {
    let clean = generate_blobs(1000, 10, 4, 1.0, 1.0, 2)?;
    let mut ok = true;
    let mut detail = Vec::new();
    for w in [0.2, 0.5] {
        let noisy = inject_symmetric_noise(&clean, w, 3)?;
        let expected = w * 9.0 / 10.0;
        let sigma = (expected * (1.0 - expected) / noisy.len() as f64).sqrt();
        let measured = noisy.noise_fraction();
        ok &= (measured - expected).abs() <= 3.0 * sigma;
        detail.push(format!(
            "w={w}: {measured:.4} vs {expected:.3} ± {:.4}",
            3.0 * sigma
        ));
    }
    Ok((ok, detail.join("; ")))
}

fn em_recovery() -> Outcome {
    let mut r = rng::stream(4, 0);
    let a = Normal::new(0.2, 0.1)?;
    let b = Normal::new(2.0, 0.3)?;
    let values: Vec<f64> = (0..5000)
        .map(|_| {
            if r.random::<f64>() < 0.7 {
                a.sample(&mut r)
            } else {
                b.sample(&mut r)
            }
        })
        .collect();
    let fit = fit_gmm2(&values, &EmConfig::default())?;
    let g = fit.mixture;
    let monotone = fit.log_likelihoods.windows(2).all(|p| p[1] >= p[0] - 1e-9);
    let ok = (g.weights[0] - 0.7).abs() <= 0.03
        && (g.means[0] - 0.2).abs() <= 0.05
        && (g.means[1] - 2.0).abs() <= 0.05
        && monotone;
    Ok((
        ok,
        format!(
            "weight {:.4}, means {:.4}/{:.4}, {} iterations, log-likelihood monotone: {monotone}",
            g.weights[0],
            g.means[0],
            g.means[1],
            fit.log_likelihoods.len() - 1
        ),
    ))
}

/// Ten-class blobs: the symmetric redraw flips `0.9·w` of the labels, close
/// to the nominal rate the estimate is compared against.
fn estimation_config(w: f64) -> TrainConfig {
    let mut c = TrainConfig {
        mode: Mode::PlainCe,
        data: DataConfig::Blobs {
            n_per_class: 400,
            classes: 10,
            dim: 16,
            center_spread: 2.0,
            cluster_std: 1.0,
            test_fraction: 0.2,
        },
        noise: Some(NoiseSpec::Symmetric { rate: w }),
        ..TrainConfig::default()
    };
    c.model.hidden = vec![128, 128];
    c.estimator.epochs = Some(200);
    c.optimizer.lr_drop_epoch = Some(100);
    c
}

fn noise_rate_estimation() -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for w in [0.2, 0.4] {
        let est = trainer::estimate_noise(&estimation_config(w))?;
        let r = est.result.rate;
        ok &= (r - w).abs() <= 0.05;
        detail.push(format!(
            "w={w}: r={r:.4} (observed≠true {:.4})",
            est.true_noise_fraction
        ));
    }
    Ok((ok, detail.join("; ")))
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn selection_quality() -> Outcome {
    let (mut p, mut rc) = (0.0, 0.0);
    for seed in SEEDS {
        let mut c = TrainConfig {
            seed,
            mode: Mode::DltSlideWindow,
            ..TrainConfig::default()
        };
        c.epochs = c.threshold.warmup_epochs + c.threshold.ramp_epochs;
        let run = trainer::train(&c)?;
        let m = run.metrics.last().ok_or("no epochs")?;
        p += m.precision().ok_or("no selection")?;
        rc += m.recall().ok_or("no selection")?;
    }
    p /= SEEDS.len() as f64;
    rc /= SEEDS.len() as f64;
    Ok((
        p >= 0.85 && rc >= 0.85,
        format!("mean precision {p:.4}, recall {rc:.4} (>= 0.85)"),
    ))
}

fn memorization_contrast() -> Outcome {
    let (mut plain_drop, mut dlt_gap, mut margin) = (0.0, 0.0, 0.0);
    for seed in SEEDS {
        let plain = trainer::train(&TrainConfig {
            seed,
            mode: Mode::PlainCe,
            ..TrainConfig::default()
        })?;
        let dlt = trainer::train(&TrainConfig {
            seed,
            mode: Mode::DltSlideWindow,
            ..TrainConfig::default()
        })?;
        plain_drop += plain.best().1 - plain.final_accuracy();
        dlt_gap += dlt.best().1 - dlt.final_accuracy();
        margin += dlt.final_accuracy() - plain.final_accuracy();
    }
    let k = 100.0 / SEEDS.len() as f64;
    let (plain_drop, dlt_gap, margin) = (plain_drop * k, dlt_gap * k, margin * k);
    Ok((
        plain_drop >= 5.0 && dlt_gap <= 2.0 && margin >= 5.0,
        format!(
            "plain-ce drop {plain_drop:.2} pts (>= 5), dlt gap to best {dlt_gap:.2} (<= 2), dlt over plain {margin:.2} (>= 5)"
        ),
    ))
}

fn schedule_and_sharpening() -> Outcome {
    let mut failures = Vec::new();
    for w in [0.0, 0.1, 0.2, 0.25, 0.4, 0.5, 0.8] {
        for warm in [1, 5, 10, 30] {
            for ramp in [1, 3, 40, 150] {
                let p = ThresholdPolicy {
                    mode: ThresholdMode::LastEpoch,
                    window: 1,
                    noise_rate: w,
                    warmup_epochs: warm,
                    ramp_epochs: ramp,
                };
                if p.selection_proportion(warm) != 1.0
                    || p.selection_proportion(warm + ramp) != 1.0 - w
                {
                    failures.push(format!("schedule w={w} warm={warm} ramp={ramp}"));
                }
            }
        }
    }
    // Dyadic entries sum to exactly 1, so the T = 1 identity can be checked bitwise.
    let mut dists: Vec<Vec<f64>> = Vec::new();
    for a in 1..16 {
        for b in 1..(16 - a) {
            let c = 16 - a - b;
            dists.push(vec![a as f64 / 16.0, b as f64 / 16.0, c as f64 / 16.0]);
        }
    }
    dists.push(vec![0.5, 0.25, 0.125, 0.0625, 0.0625]);
    for p in &dists {
        if sharpen(p, 1.0)? != *p {
            failures.push(format!("identity {p:?}"));
        }
        for t in [0.1, 0.25, 0.5, 0.9, 2.0, 10.0] {
            let s = sharpen(p, t)?;
            if nn::argmax(&s) != nn::argmax(p) {
                failures.push(format!("argmax {p:?} T={t}"));
            }
        }
    }
    for c in 2..=10 {
        let uniform = vec![1.0 / c as f64; c];
        if reg_loss(&uniform) != 0.0 {
            failures.push(format!("reg uniform C={c}"));
        }
        for k in 0..c {
            let mut p = uniform.clone();
            p[k] += 0.05 / c as f64;
            p[(k + 1) % c] -= 0.05 / c as f64;
            if reg_loss(&p) <= 0.0 {
                failures.push(format!("reg non-uniform C={c} k={k}"));
            }
        }
    }
    let n = dists.len();
    Ok((
        failures.is_empty(),
        if failures.is_empty() {
            format!("112 schedules, {n} distributions × 6 temperatures, 9 class counts")
        } else {
            failures.join(", ")
        },
    ))
}

fn hard_sample_study() -> Outcome {
    let config = TrainConfig::default();
    let r = trainer::run_hard_sample_study(&config, HardSampleKind::Erasure, 1.0, None)?;
    let (to_clean, to_noisy) = (
        r.hard_to_clean_l2.ok_or("no hard trajectory")?,
        r.hard_to_noisy_l2.ok_or("no hard trajectory")?,
    );
    let routed = r.hard_clean_fraction.ok_or("no routing")?;
    Ok((
        to_clean < to_noisy && routed >= 0.7,
        format!(
            "{} hard samples, L2 to clean {to_clean:.3} vs noisy {to_noisy:.3}, routed clean {routed:.4} (>= 0.7)",
            r.hard_count
        ),
    ))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir()?;
    let config = dir.path().join("run.toml");
    std::fs::write(&config, TrainConfig::default().to_toml()?)?;
    let mut outputs = Vec::new();
    for i in 0..2 {
        let metrics = dir.path().join(format!("metrics{i}.csv"));
        let status = Command::new(env!("CARGO_BIN_EXE_dlt"))
            .arg("train")
            .arg("--config")
            .arg(&config)
            .args(["--seed", "7", "--metrics"])
            .arg(&metrics)
            .env_remove("DLT_SEED")
            .status()?;
        if !status.success() {
            return Ok((false, format!("train exited with {status}")));
        }
        outputs.push(std::fs::read(&metrics)?);
    }
    let same = outputs[0] == outputs[1] && !outputs[0].is_empty();
    Ok((
        same,
        format!("{} bytes, identical: {same}", outputs[0].len()),
    ))
}

fn main() -> ExitCode {
    let criteria = [
        Criterion {
            name: "gradient-correctness",
            limit: Duration::from_secs(30),
            run: gradients,
        },
        Criterion {
            name: "quantile-oracle",
            limit: Duration::from_secs(5),
            run: quantile_oracle,
        },
        Criterion {
            name: "noise-injection-statistics",
            limit: Duration::from_secs(5),
            run: noise_statistics,
        },
        Criterion {
            name: "em-correctness",
            limit: Duration::from_secs(10),
            run: em_recovery,
        },
        Criterion {
            name: "noise-rate-estimation",
            limit: Duration::from_secs(300),
            run: noise_rate_estimation,
        },
        Criterion {
            name: "selection-quality",
            limit: Duration::from_secs(600),
            run: selection_quality,
        },
        Criterion {
            name: "memorization-contrast",
            limit: Duration::from_secs(900),
            run: memorization_contrast,
        },
        Criterion {
            name: "schedule-and-sharpening",
            limit: Duration::from_secs(5),
            run: schedule_and_sharpening,
        },
        Criterion {
            name: "hard-sample-study",
            limit: Duration::from_secs(600),
            run: hard_sample_study,
        },
        Criterion {
            name: "determinism",
            limit: Duration::from_secs(300),
            run: determinism,
        },
    ];
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for c in &criteria {
        if !filters.is_empty() && !filters.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let (ok, detail) = match outcome {
            Ok((ok, detail)) => (ok && elapsed < c.limit, detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "{} {} [{:.1}s / {}s] {}",
            if ok { "PASS" } else { "FAIL" },
            c.name,
            elapsed.as_secs_f64(),
            c.limit.as_secs(),
            detail
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
