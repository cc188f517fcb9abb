//! Synthetic datasets with recorded ground truth.
//!
//! Labels are stored as class indices, so every observed and true label is a
//! one-hot vector by construction ([`Dataset::observed_one_hot`]).

use std::fmt;
use std::io::{BufRead, Read, Write};
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, shape, Error, Result};
use crate::nn::{self, Mlp};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Clean,
    Noisy,
    HardErasure,
    HardAdversarial,
}

impl Provenance {
    pub fn is_hard(self) -> bool {
        matches!(self, Provenance::HardErasure | Provenance::HardAdversarial)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Clean => "clean",
            Provenance::Noisy => "noisy",
            Provenance::HardErasure => "hard-erasure",
            Provenance::HardAdversarial => "hard-adversarial",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "clean" => Provenance::Clean,
            "noisy" => Provenance::Noisy,
            "hard-erasure" => Provenance::HardErasure,
            "hard-adversarial" => Provenance::HardAdversarial,
            other => return Err(Error::Format(format!("unknown provenance {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    observed: Vec<usize>,
    truth: Vec<usize>,
    provenance: Vec<Provenance>,
    class_count: usize,
}

impl Dataset {
    pub fn new(
        features: Array2<f64>,
        observed: Vec<usize>,
        truth: Vec<usize>,
        provenance: Vec<Provenance>,
        class_count: usize,
    ) -> Result<Self> {
        let n = features.nrows();
        if observed.len() != n || truth.len() != n || provenance.len() != n {
            return Err(shape(format!(
                "{n} feature rows but {} observed, {} true labels, {} provenance tags",
                observed.len(),
                truth.len(),
                provenance.len()
            )));
        }
        if class_count < 2 {
            return Err(contract("dataset needs at least two classes"));
        }
        for i in 0..n {
            if observed[i] >= class_count || truth[i] >= class_count {
                return Err(contract(format!(
                    "sample {i} has a label outside 0..{class_count}"
                )));
            }
            let disagrees = observed[i] != truth[i];
            let consistent = match provenance[i] {
                Provenance::Noisy => disagrees,
                _ => !disagrees,
            };
            if !consistent {
                return Err(contract(format!(
                    "sample {i} tagged {} but observed={} true={}",
                    provenance[i], observed[i], truth[i]
                )));
            }
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(contract("features must be finite"));
        }
        Ok(Dataset {
            features,
            observed,
            truth,
            provenance,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.observed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn observed_labels(&self) -> &[usize] {
        &self.observed
    }

    pub fn true_labels(&self) -> &[usize] {
        &self.truth
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn observed_one_hot(&self, i: usize) -> Vec<f64> {
        nn::one_hot(self.observed[i], self.class_count)
    }

    pub fn true_one_hot(&self, i: usize) -> Vec<f64> {
        nn::one_hot(self.truth[i], self.class_count)
    }

    /// Fraction of samples whose observed label differs from the true one.
    pub fn noise_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let flipped = self
            .observed
            .iter()
            .zip(&self.truth)
            .filter(|(a, b)| a != b)
            .count();
        flipped as f64 / self.len() as f64
    }

    pub fn count(&self, tag: Provenance) -> usize {
        self.provenance.iter().filter(|&&p| p == tag).count()
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            observed: indices.iter().map(|&i| self.observed[i]).collect(),
            truth: indices.iter().map(|&i| self.truth[i]).collect(),
            provenance: indices.iter().map(|&i| self.provenance[i]).collect(),
            class_count: self.class_count,
        }
    }

    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if other.dim() != self.dim() || other.class_count != self.class_count {
            return Err(shape("datasets differ in dimension or class count"));
        }
        let features =
            ndarray::concatenate(Axis(0), &[self.features.view(), other.features.view()])
                .map_err(|e| shape(e.to_string()))?;
        Ok(Dataset {
            features,
            observed: [self.observed.as_slice(), &other.observed].concat(),
            truth: [self.truth.as_slice(), &other.truth].concat(),
            provenance: [self.provenance.as_slice(), &other.provenance].concat(),
            class_count: self.class_count,
        })
    }

    fn with_observed(&self, observed: Vec<usize>) -> Dataset {
        let provenance = observed
            .iter()
            .zip(&self.truth)
            .zip(&self.provenance)
            .map(|((o, t), &p)| match (o != t, p) {
                (true, _) => Provenance::Noisy,
                (false, Provenance::Noisy) => Provenance::Clean,
                (false, p) => p,
            })
            .collect();
        Dataset {
            features: self.features.clone(),
            observed,
            truth: self.truth.clone(),
            provenance,
            class_count: self.class_count,
        }
    }
}

/// Isotropic Gaussian clusters around seeded random centers.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobGenerator {
    centers: Array2<f64>,
    cluster_std: f64,
}

impl BlobGenerator {
    /// Centers are drawn per coordinate from `N(0, center_spread²)`.
    pub fn new(
        class_count: usize,
        dim: usize,
        center_spread: f64,
        cluster_std: f64,
        seed: u64,
    ) -> Result<Self> {
        if class_count < 2 {
            return Err(contract("blobs need at least two classes"));
        }
        if dim == 0 || !(cluster_std > 0.0) || !(center_spread >= 0.0) {
            return Err(contract(
                "blobs need dim > 0, cluster_std > 0, center_spread >= 0",
            ));
        }
        let mut r = rng::stream(seed, rng::TAG_CENTERS);
        let centers = Array2::from_shape_fn((class_count, dim), |_| {
            center_spread * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r)
        });
        Ok(BlobGenerator {
            centers,
            cluster_std,
        })
    }

    pub fn centers(&self) -> ArrayView2<'_, f64> {
        self.centers.view()
    }

    /// `n_per_class` clean samples of every class, class-major order.
    pub fn sample(&self, n_per_class: usize, seed: u64) -> Result<Dataset> {
        if n_per_class == 0 {
            return Err(contract("n_per_class must be positive"));
        }
        let (c, dim) = self.centers.dim();
        let n = c * n_per_class;
        let normal = Normal::new(0.0, self.cluster_std).map_err(|e| contract(e.to_string()))?;
        let mut r = rng::stream(seed, rng::TAG_SAMPLES);
        let mut features = Array2::zeros((n, dim));
        let mut labels = Vec::with_capacity(n);
        for (i, mut row) in features.rows_mut().into_iter().enumerate() {
            let class = i / n_per_class;
            for (v, &center) in row.iter_mut().zip(self.centers.row(class)) {
                *v = center + normal.sample(&mut r);
            }
            labels.push(class);
        }
        Dataset::new(
            features,
            labels.clone(),
            labels,
            vec![Provenance::Clean; n],
            c,
        )
    }
}

pub fn generate_blobs(
    n_per_class: usize,
    class_count: usize,
    dim: usize,
    center_spread: f64,
    cluster_std: f64,
    seed: u64,
) -> Result<Dataset> {
    BlobGenerator::new(class_count, dim, center_spread, cluster_std, seed)?
        .sample(n_per_class, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum NoiseSpec {
    Symmetric { rate: f64 },
    Asymmetric { rate: f64, class_map: Vec<usize> },
}

impl NoiseSpec {
    pub fn rate(&self) -> f64 {
        match self {
            NoiseSpec::Symmetric { rate } | NoiseSpec::Asymmetric { rate, .. } => *rate,
        }
    }

    pub fn apply(&self, data: &Dataset, seed: u64) -> Result<Dataset> {
        match self {
            NoiseSpec::Symmetric { rate } => inject_symmetric_noise(data, *rate, seed),
            NoiseSpec::Asymmetric { rate, class_map } => {
                inject_asymmetric_noise(data, *rate, class_map, seed)
            }
        }
    }
}

/// `c → c + 1 mod C`.
pub fn cyclic_class_map(class_count: usize) -> Vec<usize> {
    (0..class_count).map(|c| (c + 1) % class_count).collect()
}

fn check_rate(w: f64) -> Result<()> {
    if !(0.0..1.0).contains(&w) {
        return Err(contract(format!("noise rate {w} outside [0, 1)")));
    }
    Ok(())
}

/// Redraws the labels of `round(w·N)` samples uniformly over all classes. The
/// redraw may land on the true class, so the expected flip rate is `w·(C−1)/C`.
pub fn inject_symmetric_noise(data: &Dataset, w: f64, seed: u64) -> Result<Dataset> {
    check_rate(w)?;
    let n = data.len();
    let n_redraw = (w * n as f64).round() as usize;
    let mut r = rng::stream(seed, rng::TAG_NOISE);
    let mut observed = data.observed.clone();
    for i in index::sample(&mut r, n, n_redraw).into_vec() {
        observed[i] = r.random_range(0..data.class_count);
    }
    Ok(data.with_observed(observed))
}

/// For `round(w·n_c)` samples of each true class `c`, sets the observed label
/// to `class_map[c]`.
pub fn inject_asymmetric_noise(
    data: &Dataset,
    w: f64,
    class_map: &[usize],
    seed: u64,
) -> Result<Dataset> {
    check_rate(w)?;
    if class_map.len() != data.class_count {
        return Err(contract(format!(
            "class map has {} entries for {} classes",
            class_map.len(),
            data.class_count
        )));
    }
    for (c, &target) in class_map.iter().enumerate() {
        if target == c {
            return Err(contract(format!("class map sends class {c} to itself")));
        }
        if target >= data.class_count {
            return Err(contract(format!("class map target {target} out of range")));
        }
    }
    let mut r = rng::stream(seed, rng::TAG_NOISE);
    let mut observed = data.observed.clone();
    for (c, &target) in class_map.iter().enumerate() {
        let members: Vec<usize> = (0..data.len()).filter(|&i| data.truth[i] == c).collect();
        let n_flip = (w * members.len() as f64).round() as usize;
        for k in index::sample(&mut r, members.len(), n_flip).into_vec() {
            observed[members[k]] = target;
        }
    }
    Ok(data.with_observed(observed))
}

/// `k` jittered copies of `x`, each coordinate perturbed by `N(0, strength²)`.
pub fn augment(x: &[f64], k: usize, strength: f64, seed: u64) -> Result<Vec<Vec<f64>>> {
    if k == 0 {
        return Err(contract("augmentation count must be at least 1"));
    }
    let mut r = rng::stream(seed, rng::TAG_AUGMENT);
    Ok((0..k)
        .map(|_| {
            x.iter()
                .map(|&v| {
                    v + strength
                        * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r)
                })
                .collect()
        })
        .collect())
}

/// Zeroes a seeded subset of `⌈erase_fraction·dim⌉` coordinates.
pub fn make_hard_erasure(x: &[f64], erase_fraction: f64, seed: u64) -> Result<Vec<f64>> {
    if !(erase_fraction > 0.0 && erase_fraction < 1.0) {
        return Err(contract(format!(
            "erase fraction {erase_fraction} outside (0, 1)"
        )));
    }
    let dim = x.len();
    // Guard against products like 0.3·10 = 3.0000000000000004.
    let k = ((erase_fraction * dim as f64 - 1e-9).ceil() as usize).clamp(1, dim);
    let mut r = rng::stream(seed, rng::TAG_HARD);
    let mut out = x.to_vec();
    for j in index::sample(&mut r, dim, k).into_vec() {
        out[j] = 0.0;
    }
    Ok(out)
}

/// Fast-gradient-sign perturbation `x + ε·sign(∇ₓ CE(x, y))`, with `sign(0) = 0`.
pub fn make_hard_fgsm(model: &Mlp, x: &[f64], label: usize, epsilon: f64) -> Result<Vec<f64>> {
    if !(epsilon >= 0.0) {
        return Err(contract("epsilon must be nonnegative"));
    }
    let grad = model.input_gradient(x, label)?;
    Ok(x.iter()
        .zip(grad)
        .map(|(&v, g)| {
            let s = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            v + epsilon * s
        })
        .collect())
}

#[derive(Debug, Clone, Copy)]
pub enum HardKind<'a> {
    Erasure { erase_fraction: f64 },
    Fgsm { model: &'a Mlp, epsilon: f64 },
}

/// Appends hard samples derived from a seeded subset of clean samples.
///
/// The subset holds `round(subset_fraction·N)` clean samples; `round(ratio·subset)`
/// hard samples are generated, cycling through the subset when `ratio > 1`.
/// Every hard sample keeps its source's true label as its observed label.
pub fn append_hard_samples(
    data: &Dataset,
    kind: HardKind<'_>,
    subset_fraction: f64,
    ratio: f64,
    seed: u64,
) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&subset_fraction) || !(ratio >= 0.0) {
        return Err(contract(
            "subset fraction must be in [0, 1] and ratio nonnegative",
        ));
    }
    let clean: Vec<usize> = (0..data.len())
        .filter(|&i| data.provenance[i] == Provenance::Clean)
        .collect();
    let n_subset = ((subset_fraction * data.len() as f64).round() as usize).min(clean.len());
    let n_hard = (ratio * n_subset as f64).round() as usize;
    if n_hard == 0 {
        return Ok(data.clone());
    }
    let mut r = rng::stream(seed, rng::TAG_HARD);
    let subset: Vec<usize> = index::sample(&mut r, clean.len(), n_subset)
        .into_iter()
        .map(|k| clean[k])
        .collect();
    let mut features = Array2::zeros((n_hard, data.dim()));
    let mut labels = Vec::with_capacity(n_hard);
    for h in 0..n_hard {
        let src = subset[h % n_subset];
        let x = data.row(src).to_vec();
        let label = data.truth[src];
        let hard = match kind {
            HardKind::Erasure { erase_fraction } => {
                make_hard_erasure(&x, erase_fraction, rng::derive(seed, h as u64))?
            }
            HardKind::Fgsm { model, epsilon } => make_hard_fgsm(model, &x, label, epsilon)?,
        };
        features.row_mut(h).assign(&ArrayView1::from(&hard));
        labels.push(label);
    }
    let tag = match kind {
        HardKind::Erasure { .. } => Provenance::HardErasure,
        HardKind::Fgsm { .. } => Provenance::HardAdversarial,
    };
    let hard = Dataset::new(
        features,
        labels.clone(),
        labels,
        vec![tag; n_hard],
        data.class_count,
    )?;
    data.concat(&hard)
}

// Serialization.

const CLASSES_PREFIX: &str = "#classes=";

/// CSV with a `#classes=C` comment line, then a header
/// `f0,…,f{dim-1},observed_label,true_label,provenance` and one row per sample.
/// Floats use the shortest representation that parses back exactly.
pub fn write_csv<W: Write>(data: &Dataset, mut out: W) -> Result<()> {
    writeln!(out, "{CLASSES_PREFIX}{}", data.class_count)?;
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..data.dim()).map(|j| format!("f{j}")).collect();
    header.extend(["observed_label", "true_label", "provenance"].map(String::from));
    w.write_record(&header)?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(data.observed[i].to_string());
        rec.push(data.truth[i].to_string());
        rec.push(data.provenance[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: BufRead>(mut input: R) -> Result<Dataset> {
    let mut first = String::new();
    input.read_line(&mut first)?;
    let class_count: usize = first
        .trim()
        .strip_prefix(CLASSES_PREFIX)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("missing #classes= line".into()))?;
    let mut rdr = csv::Reader::from_reader(input);
    let cols = rdr.headers()?.len();
    if cols < 4 {
        return Err(Error::Format(
            "dataset CSV needs at least one feature column".into(),
        ));
    }
    let dim = cols - 3;
    let (mut feats, mut observed, mut truth, mut prov) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let parse_err = |e: &dyn fmt::Display| Error::Format(e.to_string());
    for rec in rdr.records() {
        let rec = rec?;
        for j in 0..dim {
            feats.push(rec[j].parse::<f64>().map_err(|e| parse_err(&e))?);
        }
        observed.push(rec[dim].parse::<usize>().map_err(|e| parse_err(&e))?);
        truth.push(rec[dim + 1].parse::<usize>().map_err(|e| parse_err(&e))?);
        prov.push(rec[dim + 2].parse::<Provenance>()?);
    }
    let features =
        Array2::from_shape_vec((observed.len(), dim), feats).map_err(|e| parse_err(&e))?;
    Dataset::new(features, observed, truth, prov, class_count)
}

const BIN_MAGIC: &[u8; 6] = b"DLTSET";
const BIN_VERSION: u32 = 1;

/// Little-endian binary: magic, version, `N`, `dim`, `C` (`u64`), features
/// row-major `f64`, observed and true labels `u32`, provenance `u8`.
pub fn write_binary<W: Write>(data: &Dataset, mut out: W) -> Result<()> {
    out.write_all(BIN_MAGIC)?;
    out.write_all(&BIN_VERSION.to_le_bytes())?;
    for v in [data.len(), data.dim(), data.class_count] {
        out.write_all(&(v as u64).to_le_bytes())?;
    }
    for v in data.features.iter() {
        out.write_all(&v.to_le_bytes())?;
    }
    for &l in data.observed.iter().chain(&data.truth) {
        out.write_all(&(l as u32).to_le_bytes())?;
    }
    for p in &data.provenance {
        out.write_all(&[*p as u8])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_binary<R: Read>(mut input: R) -> Result<Dataset> {
    let mut magic = [0u8; 6];
    input.read_exact(&mut magic)?;
    if &magic != BIN_MAGIC {
        return Err(Error::Format("not a binary dataset".into()));
    }
    let mut b4 = [0u8; 4];
    input.read_exact(&mut b4)?;
    if u32::from_le_bytes(b4) != BIN_VERSION {
        return Err(Error::Format("unsupported dataset version".into()));
    }
    let mut b8 = [0u8; 8];
    let mut header = [0usize; 3];
    for h in &mut header {
        input.read_exact(&mut b8)?;
        *h = u64::from_le_bytes(b8) as usize;
    }
    let [n, dim, class_count] = header;
    let mut feats = Vec::with_capacity(n * dim);
    for _ in 0..n * dim {
        input.read_exact(&mut b8)?;
        feats.push(f64::from_le_bytes(b8));
    }
    let mut labels = Vec::with_capacity(2 * n);
    for _ in 0..2 * n {
        input.read_exact(&mut b4)?;
        labels.push(u32::from_le_bytes(b4) as usize);
    }
    let mut tags = vec![0u8; n];
    input.read_exact(&mut tags)?;
    let provenance = tags
        .into_iter()
        .map(|t| match t {
            0 => Ok(Provenance::Clean),
            1 => Ok(Provenance::Noisy),
            2 => Ok(Provenance::HardErasure),
            3 => Ok(Provenance::HardAdversarial),
            other => Err(Error::Format(format!("bad provenance byte {other}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let truth = labels.split_off(n);
    let features =
        Array2::from_shape_vec((n, dim), feats).map_err(|e| Error::Format(e.to_string()))?;
    Dataset::new(features, labels, truth, provenance, class_count)
}
