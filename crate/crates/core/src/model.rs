//! Finite-width network `f_m(x) = (α/m) Σ_j u_j h̃(θ_jᵀx)`, the square loss,
//! the weight-decay objective `Q̂`, and exact per-particle gradients.
//!
//! All reductions over particles go through [`PARTICLE_CHUNK`]-sized blocks
//! that are summed in index order, so results are bit-identical whatever
//! the rayon pool size.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::data::{dot, Dataset};
use crate::eigen::{cholesky, solve_lower};
use crate::error::{Error, Result};
use crate::rng::{CounterRng, Domain};

/// Particle block size for deterministic reductions.
pub const PARTICLE_CHUNK: usize = 256;

/// Per-coordinate scales of the Gaussian initialization `p0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub sigma_u: f64,
    pub sigma_theta: f64,
}

impl GaussianPrior {
    pub fn max_sigma(&self) -> f64 {
        self.sigma_u.max(self.sigma_theta)
    }

    /// Standard deviations of the `d + 1` coordinates, θ-block first.
    pub fn scales(&self, d: usize) -> Vec<f64> {
        let mut s = vec![self.sigma_theta; d];
        s.push(self.sigma_u);
        s
    }
}

/// How the per-particle update is scaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradScaling {
    /// `m · ∇Q̂`: the drift of the limiting PDE, O(1) per particle.
    #[default]
    Meanfield,
    /// `∇Q̂` as written, which carries an implicit `1/m`.
    Raw,
}

impl std::str::FromStr for GradScaling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "meanfield" => Ok(GradScaling::Meanfield),
            "raw" => Ok(GradScaling::Raw),
            _ => Err(Error::InvalidInput(format!("unknown grad scaling `{s}`"))),
        }
    }
}

/// Reading of the noise law `N(0, √(2η))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseConvention {
    /// `√(2η)` is the standard deviation: per-step variance `2λη`.
    #[default]
    StdDev,
    /// `√(2η)` is the variance: per-step variance `λ√(2η)`.
    LiteralVariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    /// Independent draws from `p0`.
    #[default]
    Iid,
    /// Sign-symmetric quadruples `(±θ, ±u)` rescaled so every coordinate has
    /// exact sample mean 0 and second moment `σ²`. The network output at
    /// initialization is then exactly zero.
    Antithetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub alpha: f64,
    pub lambda: f64,
    pub sigma_u: f64,
    pub sigma_theta: f64,
    pub eta: f64,
    pub d: usize,
    pub m: usize,
    pub n: usize,
    pub seed: u64,
    pub activation: Activation,
    pub grad_scaling: GradScaling,
    pub noise: NoiseConvention,
    pub init: InitScheme,
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidInput(format!("{name} must be positive and finite, got {v}")))
            }
        };
        pos("alpha", self.alpha)?;
        pos("sigma_u", self.sigma_u)?;
        pos("sigma_theta", self.sigma_theta)?;
        pos("eta", self.eta)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidInput(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.d == 0 || self.m == 0 || self.n == 0 {
            return Err(Error::InvalidInput("d, m and n must be positive".into()));
        }
        if self.init == InitScheme::Antithetic && self.m % 4 != 0 {
            return Err(Error::InvalidInput(format!(
                "antithetic init needs m divisible by 4, got {}",
                self.m
            )));
        }
        Ok(())
    }

    pub fn prior(&self) -> GaussianPrior {
        GaussianPrior { sigma_u: self.sigma_u, sigma_theta: self.sigma_theta }
    }

    /// Multiplier applied to the mean-field gradient in one update.
    pub fn drift_step(&self) -> f64 {
        match self.grad_scaling {
            GradScaling::Meanfield => self.eta,
            GradScaling::Raw => self.eta / self.m as f64,
        }
    }

    /// Standard deviation of the per-coordinate noise in one update.
    pub fn noise_std(&self) -> f64 {
        match self.noise {
            NoiseConvention::StdDev => (2.0 * self.lambda * self.eta).sqrt(),
            NoiseConvention::LiteralVariance => (self.lambda * (2.0 * self.eta).sqrt()).sqrt(),
        }
    }

    fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        if ds.n() == 0 {
            return Err(Error::EmptyDataset);
        }
        if ds.d() != self.d {
            return Err(Error::DimensionMismatch { expected: self.d, got: ds.d() });
        }
        Ok(())
    }
}

/// `m` particles `(θ_j, u_j)`; θ's stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    d: usize,
    thetas: Vec<f64>,
    us: Vec<f64>,
    pub generation: u64,
}

impl Ensemble {
    pub fn new(d: usize, thetas: Vec<f64>, us: Vec<f64>) -> Result<Self> {
        if us.is_empty() {
            return Err(Error::InvalidInput("ensemble needs at least one particle".into()));
        }
        if d == 0 || thetas.len() != us.len() * d {
            return Err(Error::DimensionMismatch { expected: us.len() * d, got: thetas.len() });
        }
        if thetas.iter().chain(&us).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("ensemble entries must be finite".into()));
        }
        Ok(Ensemble { d, thetas, us, generation: 0 })
    }

    pub fn m(&self) -> usize {
        self.us.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn theta(&self, j: usize) -> &[f64] {
        &self.thetas[j * self.d..(j + 1) * self.d]
    }

    pub fn thetas(&self) -> &[f64] {
        &self.thetas
    }

    pub fn us(&self) -> &[f64] {
        &self.us
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.thetas, &mut self.us)
    }

    /// Particle `j` as a point `(θ, u)` in `ℝ^{d+1}`.
    pub fn point(&self, j: usize) -> Vec<f64> {
        let mut p = self.theta(j).to_vec();
        p.push(self.us[j]);
        p
    }

    /// All particles as `(d+1)`-dimensional points, row-major.
    pub fn points(&self) -> Vec<f64> {
        (0..self.m()).flat_map(|j| self.point(j)).collect()
    }

    /// Binary snapshot: little-endian f64 values `m, d`, the θ rows, then the u's.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header = [self.m() as f64, self.d as f64];
        for v in header.iter().chain(&self.thetas).chain(&self.us) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::io("<snapshot>", e))?;
        if bytes.len() % 8 != 0 || bytes.len() < 16 {
            return Err(Error::InvalidInput("truncated ensemble snapshot".into()));
        }
        let vals: Vec<f64> =
            bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let (m, d) = (vals[0] as usize, vals[1] as usize);
        if vals[0] != m as f64 || vals[1] != d as f64 || vals.len() != 2 + m * (d + 1) {
            return Err(Error::InvalidInput("snapshot header does not match payload".into()));
        }
        Ensemble::new(d, vals[2..2 + m * d].to_vec(), vals[2 + m * d..].to_vec())
    }

    pub fn save_snapshot(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_snapshot(std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..self.d).map(|k| format!("theta{k}")).collect();
        header.push("u".into());
        wr.write_record(&header)?;
        for j in 0..self.m() {
            wr.write_record(self.point(j).iter().map(|v| v.to_string()))?;
        }
        wr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Draw the initial ensemble from `p0` using the counter-based stream
/// `(seed, Init)`; particle `j` always receives the same draws.
pub fn init_ensemble(hp: &HyperParams) -> Result<Ensemble> {
    hp.validate()?;
    let (m, d) = (hp.m, hp.d);
    let rng = CounterRng::new(hp.seed, Domain::Init);
    let mut thetas = vec![0.0; m * d];
    let mut us = vec![0.0; m];
    let mut buf = vec![0.0; d + 1];
    match hp.init {
        InitScheme::Iid => {
            for j in 0..m {
                rng.fill_normals(0, j as u64, &mut buf);
                for k in 0..d {
                    thetas[j * d + k] = hp.sigma_theta * buf[k];
                }
                us[j] = hp.sigma_u * buf[d];
            }
        }
        InitScheme::Antithetic => {
            for q in 0..m / 4 {
                rng.fill_normals(0, q as u64, &mut buf);
                for (s, (st, su)) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)].iter().enumerate() {
                    let j = 4 * q + s;
                    for k in 0..d {
                        thetas[j * d + k] = st * buf[k];
                    }
                    us[j] = su * buf[d];
                }
            }
            // Whiten the θ's so their sample second-moment matrix is exactly
            // σ_θ² I; the sign pattern already zeroes the means and the
            // θ–u cross moments.
            let mut second = vec![0.0; d * d];
            for th in thetas.chunks(d) {
                for a in 0..d {
                    for b in 0..=a {
                        second[a * d + b] += th[a] * th[b];
                    }
                }
            }
            second.iter_mut().for_each(|v| *v /= m as f64);
            let chol = cholesky(&second, d).ok_or_else(|| {
                Error::InvalidInput(format!("antithetic init needs m/4 >= d so the θ sample has full rank (m={m}, d={d})"))
            })?;
            for th in thetas.chunks_mut(d) {
                let z = solve_lower(&chol, d, th);
                th.iter_mut().zip(&z).for_each(|(t, v)| *t = hp.sigma_theta * v);
            }
            let su = (us.iter().map(|u| u * u).sum::<f64>() / m as f64).sqrt();
            us.iter_mut().for_each(|u| *u *= hp.sigma_u / su);
        }
    }
    Ensemble::new(d, thetas, us)
}

/// Pre-activation passes over a dataset: `h̃(θ_jᵀx_i)` and `h̃′(θ_jᵀx_i)`
/// stored particle-major (`j * n + i`).
pub(crate) struct Activations {
    pub n: usize,
    pub h: Vec<f64>,
    pub h1: Vec<f64>,
}

impl Activations {
    pub fn compute(e: &Ensemble, act: Activation, ds: &Dataset) -> Self {
        let (n, d) = (ds.n(), ds.d());
        let mut h = vec![0.0; e.m() * n];
        let mut h1 = vec![0.0; e.m() * n];
        h.par_chunks_mut(PARTICLE_CHUNK * n)
            .zip(h1.par_chunks_mut(PARTICLE_CHUNK * n))
            .enumerate()
            .for_each(|(c, (hc, h1c))| {
                let j0 = c * PARTICLE_CHUNK;
                for (jj, (hr, h1r)) in hc.chunks_mut(n).zip(h1c.chunks_mut(n)).enumerate() {
                    let th = &e.thetas[(j0 + jj) * d..(j0 + jj + 1) * d];
                    for i in 0..n {
                        let (v, dv) = act.eval01(dot(th, ds.x(i)));
                        hr[i] = v;
                        h1r[i] = dv;
                    }
                }
            });
        Activations { n, h, h1 }
    }

    /// `f_i = (α/m) Σ_j u_j h_ji`, blockwise in index order.
    pub fn outputs(&self, us: &[f64], alpha: f64) -> Vec<f64> {
        let n = self.n;
        let partials: Vec<Vec<f64>> = self
            .h
            .par_chunks(PARTICLE_CHUNK * n)
            .zip(us.par_chunks(PARTICLE_CHUNK))
            .map(|(hc, uc)| {
                let mut acc = vec![0.0; n];
                for (hr, u) in hc.chunks(n).zip(uc) {
                    for i in 0..n {
                        acc[i] += u * hr[i];
                    }
                }
                acc
            })
            .collect();
        let mut f = vec![0.0; n];
        for p in &partials {
            for i in 0..n {
                f[i] += p[i];
            }
        }
        let scale = alpha / us.len() as f64;
        f.iter_mut().for_each(|v| *v *= scale);
        f
    }
}

/// Mean-field gradients `m · ∇Q̂` for every particle.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub du: Vec<f64>,
    /// Row-major, same layout as the ensemble θ's.
    pub dtheta: Vec<f64>,
}

pub fn forward(e: &Ensemble, hp: &HyperParams, x: &[f64]) -> Result<f64> {
    if x.len() != e.d() {
        return Err(Error::DimensionMismatch { expected: e.d(), got: x.len() });
    }
    let partials: Vec<f64> = e
        .us
        .par_chunks(PARTICLE_CHUNK)
        .enumerate()
        .map(|(c, uc)| {
            let j0 = c * PARTICLE_CHUNK;
            uc.iter()
                .enumerate()
                .map(|(jj, u)| u * hp.activation.value(dot(e.theta(j0 + jj), x)))
                .sum::<f64>()
        })
        .collect();
    Ok(hp.alpha / e.m() as f64 * partials.iter().sum::<f64>())
}

/// Network outputs on every training input.
pub fn outputs(e: &Ensemble, hp: &HyperParams, ds: &Dataset) -> Result<Vec<f64>> {
    if ds.d() != e.d() {
        return Err(Error::DimensionMismatch { expected: e.d(), got: ds.d() });
    }
    Ok(Activations::compute(e, hp.activation, ds).outputs(&e.us, hp.alpha))
}

pub(crate) fn mean_sq_residual(f: &[f64], y: &[f64]) -> f64 {
    f.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64
}

/// `(1/n) Σ_i (f_m(x_i) − y_i)²`.
pub fn loss(e: &Ensemble, hp: &HyperParams, ds: &Dataset) -> Result<f64> {
    hp.check_dataset(ds)?;
    Ok(mean_sq_residual(&outputs(e, hp, ds)?, ds.labels()))
}

/// `(λ/m) Σ_j (u_j²/2σ_u² + ‖θ_j‖²/2σ_θ²)`.
pub fn regularizer(e: &Ensemble, hp: &HyperParams) -> f64 {
    let su2 = 2.0 * hp.sigma_u * hp.sigma_u;
    let st2 = 2.0 * hp.sigma_theta * hp.sigma_theta;
    let partials: Vec<f64> = e
        .us
        .par_chunks(PARTICLE_CHUNK)
        .zip(e.thetas.par_chunks(PARTICLE_CHUNK * e.d))
        .map(|(uc, tc)| {
            uc.iter().map(|u| u * u).sum::<f64>() / su2 + tc.iter().map(|t| t * t).sum::<f64>() / st2
        })
        .collect();
    hp.lambda / e.m() as f64 * partials.iter().sum::<f64>()
}

/// `Q̂ = L + (λ/m) Σ_j (u_j²/2σ_u² + ‖θ_j‖²/2σ_θ²)`.
pub fn objective(e: &Ensemble, hp: &HyperParams, ds: &Dataset) -> Result<f64> {
    Ok(loss(e, hp, ds)? + regularizer(e, hp))
}

pub(crate) fn grads_from(
    e: &Ensemble,
    hp: &HyperParams,
    ds: &Dataset,
    acts: &Activations,
    residual: &[f64],
) -> Grads {
    let (n, d) = (ds.n(), ds.d());
    let coef: Vec<f64> = residual.iter().map(|r| 2.0 * hp.alpha * r / n as f64).collect();
    let wd_u = hp.lambda / (hp.sigma_u * hp.sigma_u);
    let wd_t = hp.lambda / (hp.sigma_theta * hp.sigma_theta);
    let mut du = vec![0.0; e.m()];
    let mut dtheta = vec![0.0; e.m() * d];
    du.par_chunks_mut(PARTICLE_CHUNK)
        .zip(dtheta.par_chunks_mut(PARTICLE_CHUNK * d))
        .enumerate()
        .for_each(|(c, (duc, dtc))| {
            let j0 = c * PARTICLE_CHUNK;
            for (jj, (g_u, g_t)) in duc.iter_mut().zip(dtc.chunks_mut(d)).enumerate() {
                let j = j0 + jj;
                let hr = &acts.h[j * n..(j + 1) * n];
                let h1r = &acts.h1[j * n..(j + 1) * n];
                let u = e.us[j];
                let mut acc_u = 0.0;
                g_t.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..n {
                    acc_u += coef[i] * hr[i];
                    let w = coef[i] * u * h1r[i];
                    for (gk, xk) in g_t.iter_mut().zip(ds.x(i)) {
                        *gk += w * xk;
                    }
                }
                *g_u = acc_u + wd_u * u;
                for (gk, tk) in g_t.iter_mut().zip(e.theta(j)) {
                    *gk += wd_t * tk;
                }
            }
        });
    Grads { du, dtheta }
}

/// Mean-field gradients: `du_j = 2α E_S[(f − y) h] + λu_j/σ_u²` and
/// `dθ_j = 2α E_S[(f − y) u_j h̃′ x] + λθ_j/σ_θ²`, i.e. `m · ∇_{(θ_j,u_j)} Q̂`.
pub fn grads(e: &Ensemble, hp: &HyperParams, ds: &Dataset) -> Result<Grads> {
    hp.check_dataset(ds)?;
    let acts = Activations::compute(e, hp.activation, ds);
    let f = acts.outputs(&e.us, hp.alpha);
    let r: Vec<f64> = f.iter().zip(ds.labels()).map(|(a, b)| a - b).collect();
    Ok(grads_from(e, hp, ds, &acts, &r))
}
