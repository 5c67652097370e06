//! Synthetic datasets with inputs in the unit ball, and Gaussian teacher
//! distributions that generate labels through the infinite-width network.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{Error, Result};
use crate::model::GaussianPrior;
use crate::rng::{self, Domain};

/// Cosine threshold above which two inputs count as parallel.
pub const PARALLEL_COS: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub mode: String,
    /// Fraction of raw teacher values with |y| > 1 (teacher modes only).
    pub label_clip_rate: f64,
}

/// `n` labelled points in `ℝ^d`, inputs stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    d: usize,
    inputs: Vec<f64>,
    labels: Vec<f64>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(d: usize, inputs: Vec<f64>, labels: Vec<f64>, meta: DatasetMeta) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidInput("input dimension must be positive".into()));
        }
        if inputs.len() != labels.len() * d {
            return Err(Error::DimensionMismatch { expected: labels.len() * d, got: inputs.len() });
        }
        let ds = Dataset { d, inputs, labels, meta };
        for i in 0..ds.n() {
            let norm = norm(ds.x(i));
            if !(norm <= 1.0) {
                return Err(Error::InvalidInput(format!("row {i}: |x| = {norm} exceeds 1")));
            }
            if !ds.labels[i].is_finite() {
                return Err(Error::InvalidInput(format!("row {i}: non-finite label")));
            }
        }
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn x(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.d..(i + 1) * self.d]
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn is_classification(&self) -> bool {
        self.labels.iter().all(|&y| y == 1.0 || y == -1.0)
    }

    /// Append a copy of point `i`; used by the degenerate-input checks.
    pub fn with_duplicate(&self, i: usize) -> Dataset {
        let mut out = self.clone();
        out.inputs.extend_from_slice(self.x(i));
        out.labels.push(self.labels[i]);
        out
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..self.d).map(|k| format!("x{k}")).collect();
        header.push("y".into());
        wr.write_record(&header)?;
        for i in 0..self.n() {
            let row = self.x(i).iter().chain(std::iter::once(&self.labels[i])).map(|v| v.to_string());
            wr.write_record(row)?;
        }
        wr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        let d = header.len().checked_sub(1).filter(|&d| d > 0).ok_or_else(|| {
            Error::InvalidInput("dataset CSV needs at least one input column and `y`".into())
        })?;
        for (k, name) in header.iter().enumerate().take(d) {
            if name != format!("x{k}") {
                return Err(Error::InvalidInput(format!("column {k}: expected `x{k}`, found `{name}`")));
            }
        }
        if &header[d] != "y" {
            return Err(Error::InvalidInput("last column must be `y`".into()));
        }
        let (mut inputs, mut labels) = (Vec::new(), Vec::new());
        for (row, rec) in rd.records().enumerate() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidInput(format!("row {row}: {e}")))?;
            inputs.extend_from_slice(&vals[..d]);
            labels.push(vals[d]);
        }
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let meta = DatasetMeta { seed: 0, mode: "csv".into(), label_clip_rate: 0.0 };
        Dataset::new(d, inputs, labels, meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Dataset::read_csv(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gaussian parameter distribution with mean `(μ_θ, μ_u)` and the same
/// per-coordinate scales as the initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianTeacher {
    /// θ-block followed by the `u` entry; length `d + 1`.
    pub mean: Vec<f64>,
    pub sigma_theta: f64,
    pub sigma_u: f64,
}

impl GaussianTeacher {
    pub fn new(mean: Vec<f64>, prior: GaussianPrior) -> Result<Self> {
        if mean.len() < 2 {
            return Err(Error::InvalidInput("teacher mean needs d + 1 >= 2 entries".into()));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("teacher mean must be finite".into()));
        }
        Ok(GaussianTeacher { mean, sigma_theta: prior.sigma_theta, sigma_u: prior.sigma_u })
    }

    pub fn d(&self) -> usize {
        self.mean.len() - 1
    }

    pub fn mean_theta(&self) -> &[f64] {
        &self.mean[..self.d()]
    }

    pub fn mean_u(&self) -> f64 {
        self.mean[self.d()]
    }

    fn check_prior(&self, prior: &GaussianPrior) -> Result<()> {
        if self.sigma_theta != prior.sigma_theta || self.sigma_u != prior.sigma_u {
            return Err(Error::InvalidInput(format!(
                "teacher covariance (σ_θ={}, σ_u={}) differs from initialization (σ_θ={}, σ_u={})",
                self.sigma_theta, self.sigma_u, prior.sigma_theta, prior.sigma_u
            )));
        }
        Ok(())
    }

    /// `μᵀ Σ₀⁻¹ μ`.
    fn mahalanobis_sq(&self) -> f64 {
        let st2 = self.sigma_theta * self.sigma_theta;
        let su2 = self.sigma_u * self.sigma_u;
        self.mean_theta().iter().map(|m| m * m / st2).sum::<f64>() + self.mean_u().powi(2) / su2
    }

    /// χ²(p_true ‖ p0) = exp(μᵀΣ₀⁻¹μ) − 1 for equal covariances.
    pub fn chi2_to_init(&self, prior: &GaussianPrior) -> Result<f64> {
        self.check_prior(prior)?;
        Ok(self.mahalanobis_sq().exp_m1())
    }

    /// KL(p_true ‖ p0) = μᵀΣ₀⁻¹μ / 2 for equal covariances.
    pub fn kl_to_init(&self, prior: &GaussianPrior) -> Result<f64> {
        self.check_prior(prior)?;
        Ok(0.5 * self.mahalanobis_sq())
    }

    /// `E_{p_true}[u h̃(θᵀx)]`: exact for the identity activation, Monte Carlo
    /// otherwise.
    pub fn label(&self, act: Activation, x: &[f64], mc_samples: usize, seed: u64) -> Result<f64> {
        if x.len() != self.d() {
            return Err(Error::DimensionMismatch { expected: self.d(), got: x.len() });
        }
        if act == Activation::Identity {
            return Ok(self.mean_u() * dot(self.mean_theta(), x));
        }
        self.label_mc(act, x, mc_samples, seed)
    }

    /// Monte Carlo path. `u` and `θ` are independent, so the expectation
    /// factors as `μ_u · E[h̃(μ_θᵀx + σ_θ‖x‖ z)]` with `z ~ N(0, 1)`.
    /// Draws come in antithetic pairs `±z`, so for odd activations the
    /// estimate has the exact sign of `μ_u μ_θᵀx`.
    pub fn label_mc(&self, act: Activation, x: &[f64], mc_samples: usize, seed: u64) -> Result<f64> {
        if mc_samples < 10_000 {
            return Err(Error::InvalidInput(format!("mc_samples {mc_samples} < 10^4")));
        }
        if x.len() != self.d() {
            return Err(Error::DimensionMismatch { expected: self.d(), got: x.len() });
        }
        let loc = dot(self.mean_theta(), x);
        let scale = self.sigma_theta * norm(x);
        let mut rng = rng::chacha(seed, Domain::Teacher, 0);
        let pairs = mc_samples / 2;
        let mut acc = 0.0;
        for _ in 0..pairs {
            let z: f64 = StandardNormal.sample(&mut rng);
            acc += act.value(loc + scale * z) + act.value(loc - scale * z);
        }
        Ok(self.mean_u() * acc / (2 * pairs) as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LabelMode {
    /// Independent uniform ±1 labels.
    Rademacher,
    /// Labels from a teacher network; `classify` maps them to their sign.
    Teacher { teacher: GaussianTeacher, activation: Activation, mc_samples: usize, classify: bool },
}

impl LabelMode {
    fn name(&self) -> &'static str {
        match self {
            LabelMode::Rademacher => "rademacher_labels",
            LabelMode::Teacher { classify: true, .. } => "teacher_labels_sign",
            LabelMode::Teacher { classify: false, .. } => "teacher_labels",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub mode: LabelMode,
    /// Reject inputs that are (nearly) parallel to an earlier one.
    pub distinct: bool,
}

fn sample_ball<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let mut x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let len = norm(&x);
        if len == 0.0 {
            continue;
        }
        let radius = rng.random::<f64>().powf(1.0 / d as f64);
        x.iter_mut().for_each(|v| *v *= radius / len);
        while norm(&x) > 1.0 {
            let s = norm(&x);
            x.iter_mut().for_each(|v| *v /= s);
        }
        return x;
    }
}

fn is_parallel(a: &[f64], b: &[f64]) -> bool {
    let (na, nb) = (norm(a), norm(b));
    na == 0.0 || nb == 0.0 || (dot(a, b) / (na * nb)).abs() >= PARALLEL_COS
}

/// Uniform-in-ball inputs (direction uniform on the sphere, radius `U^{1/d}`)
/// with labels per `spec.mode`.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let SyntheticSpec { n, d, seed, .. } = *spec;
    if n == 0 || d == 0 {
        return Err(Error::InvalidInput(format!("n = {n}, d = {d}: both must be positive")));
    }
    if spec.distinct && d == 1 && n > 2 {
        return Err(Error::InvalidInput("at most two non-parallel inputs exist in d = 1".into()));
    }
    let mut rng = rng::chacha(seed, Domain::Data, 0);
    let mut inputs: Vec<f64> = Vec::with_capacity(n * d);
    let mut accepted = 0;
    while accepted < n {
        let x = sample_ball(&mut rng, d);
        if spec.distinct && (0..accepted).any(|i| is_parallel(&inputs[i * d..(i + 1) * d], &x)) {
            continue;
        }
        inputs.extend_from_slice(&x);
        accepted += 1;
    }

    let mut clip = 0usize;
    let labels: Vec<f64> = match &spec.mode {
        LabelMode::Rademacher => {
            let mut lrng = rng::chacha(seed, Domain::Data, 1);
            (0..n).map(|_| if lrng.random::<bool>() { 1.0 } else { -1.0 }).collect()
        }
        LabelMode::Teacher { teacher, activation, mc_samples, classify } => {
            if teacher.d() != d {
                return Err(Error::DimensionMismatch { expected: d, got: teacher.d() });
            }
            let raw = (0..n)
                .map(|i| teacher.label(*activation, &inputs[i * d..(i + 1) * d], *mc_samples, seed))
                .collect::<Result<Vec<f64>>>()?;
            clip = raw.iter().filter(|v| v.abs() > 1.0).count();
            if *classify {
                if raw.iter().all(|&v| v == 0.0) {
                    return Err(Error::DegenerateLabels(
                        "teacher output is identically zero; sign labels are undefined".into(),
                    ));
                }
                raw.iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        if v == 0.0 {
                            Err(Error::DegenerateLabels(format!("row {i}: teacher output is exactly 0")))
                        } else {
                            Ok(v.signum())
                        }
                    })
                    .collect::<Result<Vec<f64>>>()?
            } else {
                raw
            }
        }
    };
    let meta = DatasetMeta {
        seed,
        mode: spec.mode.name().into(),
        label_clip_rate: clip as f64 / n as f64,
    };
    Dataset::new(d, inputs, labels, meta)
}
