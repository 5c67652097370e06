//! Empirical NTK Gram matrices `H1`, `H2`, `H = H1 + H2` under a particle
//! ensemble, their spectra, kernel drift, and the regularization-drift
//! vector `I(t)` that enters the residual dynamics.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::data::{dot, Dataset};
use crate::eigen::{self, SymmetricEigen};
use crate::error::{Error, Result};
use crate::model::{Activations, Ensemble, HyperParams, PARTICLE_CHUNK};

/// Largest `n` accepted by the dense eigensolver.
pub const MAX_DENSE_N: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "step")]
pub enum GramSource {
    Init,
    Step(u64),
}

/// Symmetric `n × n` matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub n: usize,
    entries: Vec<f64>,
    pub source: GramSource,
    pub m_used: usize,
}

impl GramMatrix {
    /// Build from raw entries, symmetrizing `(A + Aᵀ)/2`.
    pub fn from_entries(n: usize, mut entries: Vec<f64>, source: GramSource, m_used: usize) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::DimensionMismatch { expected: n * n, got: entries.len() });
        }
        for i in 0..n {
            for j in 0..i {
                let s = 0.5 * (entries[i * n + j] + entries[j * n + i]);
                entries[i * n + j] = s;
                entries[j * n + i] = s;
            }
        }
        Ok(GramMatrix { n, entries, source, m_used })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn add(&self, other: &GramMatrix) -> Result<GramMatrix> {
        if self.n != other.n {
            return Err(Error::DimensionMismatch { expected: self.n, got: other.n });
        }
        let entries = self.entries.iter().zip(&other.entries).map(|(a, b)| a + b).collect();
        Ok(GramMatrix { n: self.n, entries, source: self.source, m_used: self.m_used })
    }

    pub fn eigen(&self) -> Result<SymmetricEigen> {
        if self.n > MAX_DENSE_N {
            return Err(Error::SizeCap { size: self.n, cap: MAX_DENSE_N, hint: "dense eigensolver only" });
        }
        eigen::symmetric_eigen(&self.entries, self.n)
    }

    /// PSD up to Monte Carlo noise: `λ_min ≥ −1e-8 · trace / n`.
    pub fn is_psd_up_to_noise(&self) -> Result<bool> {
        Ok(min_eigenvalue(self)? >= -1e-8 * self.trace() / self.n as f64)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for i in 0..self.n {
            let row: Vec<String> = (0..self.n).map(|j| self.get(i, j).to_string()).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        w.flush()
    }

    pub fn summary(&self) -> Result<GramSummary> {
        Ok(GramSummary { n: self.n, lambda_min: min_eigenvalue(self)?, trace: self.trace() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GramSummary {
    pub n: usize,
    pub lambda_min: f64,
    pub trace: f64,
}

/// `H1`, `H2` and their sum from one activation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GramSet {
    pub h1: GramMatrix,
    pub h2: GramMatrix,
    pub h: GramMatrix,
}

fn check_dims(e: &Ensemble, ds: &Dataset) -> Result<()> {
    if e.d() != ds.d() {
        return Err(Error::DimensionMismatch { expected: e.d(), got: ds.d() });
    }
    if ds.n() == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

/// Sum over particle blocks of per-block upper-triangle accumulations,
/// combined in block order.
fn blocked_gram<F>(m: usize, n: usize, per_particle: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let blocks = m.div_ceil(PARTICLE_CHUNK);
    let partials: Vec<Vec<f64>> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut acc = vec![0.0; n * n];
            for j in b * PARTICLE_CHUNK..((b + 1) * PARTICLE_CHUNK).min(m) {
                per_particle(j, &mut acc);
            }
            acc
        })
        .collect();
    let mut out = vec![0.0; n * n];
    for p in &partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    for i in 0..n {
        for j in 0..i {
            out[i * n + j] = out[j * n + i];
        }
    }
    let inv_m = 1.0 / m as f64;
    out.iter_mut().for_each(|v| *v *= inv_m);
    out
}

pub fn gram_set(e: &Ensemble, act: Activation, ds: &Dataset, source: GramSource) -> Result<GramSet> {
    check_dims(e, ds)?;
    let n = ds.n();
    let acts = Activations::compute(e, act, ds);
    let xx: Vec<f64> = (0..n * n).map(|k| dot(ds.x(k / n), ds.x(k % n))).collect();
    let us = e.us();
    let h1 = blocked_gram(e.m(), n, |j, acc| {
        let row = &acts.h1[j * n..(j + 1) * n];
        let u2 = us[j] * us[j];
        for a in 0..n {
            let wa = u2 * row[a];
            for b in a..n {
                acc[a * n + b] += wa * row[b] * xx[a * n + b];
            }
        }
    });
    let h2 = blocked_gram(e.m(), n, |j, acc| {
        let row = &acts.h[j * n..(j + 1) * n];
        for a in 0..n {
            for b in a..n {
                acc[a * n + b] += row[a] * row[b];
            }
        }
    });
    let h: Vec<f64> = h1.iter().zip(&h2).map(|(a, b)| a + b).collect();
    let m = e.m();
    Ok(GramSet {
        h1: GramMatrix { n, entries: h1, source, m_used: m },
        h2: GramMatrix { n, entries: h2, source, m_used: m },
        h: GramMatrix { n, entries: h, source, m_used: m },
    })
}

/// `H1_ij = (1/m) Σ_k u_k² h̃′(θ_kᵀx_i) h̃′(θ_kᵀx_j) ⟨x_i, x_j⟩`.
pub fn gram_h1(e: &Ensemble, act: Activation, ds: &Dataset) -> Result<GramMatrix> {
    Ok(gram_set(e, act, ds, GramSource::Init)?.h1)
}

/// `H2_ij = (1/m) Σ_k h̃(θ_kᵀx_i) h̃(θ_kᵀx_j)`.
pub fn gram_h2(e: &Ensemble, act: Activation, ds: &Dataset) -> Result<GramMatrix> {
    Ok(gram_set(e, act, ds, GramSource::Init)?.h2)
}

pub fn gram_h(e: &Ensemble, act: Activation, ds: &Dataset) -> Result<GramMatrix> {
    Ok(gram_set(e, act, ds, GramSource::Init)?.h)
}

pub fn min_eigenvalue(g: &GramMatrix) -> Result<f64> {
    Ok(g.eigen()?.min())
}

/// `λ0 = √(Λ/n)` with `Λ = λ_min(H)`; an error when `Λ ≤ tol`.
pub fn lambda0(g: &GramMatrix, tol: f64) -> Result<f64> {
    let lam = min_eigenvalue(g)?;
    if lam <= tol {
        return Err(Error::AssumptionViolated(format!(
            "λ_min(H(p0)) = {lam:e} is not positive (tolerance {tol:e})"
        )));
    }
    Ok((lam / g.n as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelDrift {
    /// Max entrywise `|H_t − H_0|`.
    pub inf_inf: f64,
    /// `n · inf_inf`, an upper bound on the spectral norm of the difference.
    pub spectral_upper: f64,
}

pub fn kernel_drift(h_t: &GramMatrix, h_0: &GramMatrix) -> Result<KernelDrift> {
    if h_t.n != h_0.n {
        return Err(Error::DimensionMismatch { expected: h_0.n, got: h_t.n });
    }
    let inf_inf = h_t.entries.iter().zip(&h_0.entries).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(KernelDrift { inf_inf, spectral_upper: h_t.n as f64 * inf_inf })
}

/// `I_i = E_p[u h/σ_u² + u h̃′(θᵀx)(θᵀx)/σ_θ² − u h̃″(θᵀx)‖x‖²]`.
pub fn reg_drift(e: &Ensemble, hp: &HyperParams, ds: &Dataset) -> Result<Vec<f64>> {
    check_dims(e, ds)?;
    let n = ds.n();
    let su2 = hp.sigma_u * hp.sigma_u;
    let st2 = hp.sigma_theta * hp.sigma_theta;
    let norms2: Vec<f64> = (0..n).map(|i| dot(ds.x(i), ds.x(i))).collect();
    let partials: Vec<Vec<f64>> = e
        .us()
        .par_chunks(PARTICLE_CHUNK)
        .enumerate()
        .map(|(c, uc)| {
            let mut acc = vec![0.0; n];
            for (jj, &u) in uc.iter().enumerate() {
                let th = e.theta(c * PARTICLE_CHUNK + jj);
                for i in 0..n {
                    let z = dot(th, ds.x(i));
                    let dv = hp.activation.eval(z);
                    acc[i] += u * (dv.h / su2 + dv.h1 * z / st2 - dv.h2 * norms2[i]);
                }
            }
            acc
        })
        .collect();
    let mut out = vec![0.0; n];
    for p in &partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    let inv_m = 1.0 / e.m() as f64;
    out.iter_mut().for_each(|v| *v *= inv_m);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, DatasetMeta, LabelMode, SyntheticSpec};
    use crate::model::{init_ensemble, GradScaling, InitScheme, NoiseConvention};

    fn hp(m: usize, d: usize, n: usize, act: Activation) -> HyperParams {
        HyperParams {
            alpha: 1.0,
            lambda: 0.0,
            sigma_u: 1.0,
            sigma_theta: 1.0,
            eta: 0.01,
            d,
            m,
            n,
            seed: 5,
            activation: act,
            grad_scaling: GradScaling::Meanfield,
            noise: NoiseConvention::StdDev,
            init: InitScheme::Iid,
        }
    }

    fn meta() -> DatasetMeta {
        DatasetMeta { seed: 0, mode: "test".into(), label_clip_rate: 0.0 }
    }

    fn data(n: usize, d: usize, seed: u64) -> Dataset {
        make_synthetic(&SyntheticSpec { n, d, seed, mode: LabelMode::Rademacher, distinct: true }).unwrap()
    }

    #[test]
    fn single_particle_examples() {
        let ds = Dataset::new(2, vec![1.0, 0.0], vec![1.0], meta()).unwrap();
        let e = Ensemble::new(2, vec![0.3, -0.7], vec![2.0]).unwrap();
        let g1 = gram_h1(&e, Activation::Identity, &ds).unwrap();
        assert_eq!(g1.entries(), &[4.0]);
        let g2 = gram_h2(&e, Activation::Tanh, &ds).unwrap();
        assert!((g2.get(0, 0) - 0.3f64.tanh().powi(2)).abs() < 1e-15);

        let zero = Ensemble::new(2, vec![0.3, -0.7, 1.0, 1.0], vec![0.0, 0.0]).unwrap();
        let ds2 = data(3, 2, 1);
        assert!(gram_h1(&zero, Activation::Tanh, &ds2).unwrap().entries().iter().all(|&v| v == 0.0));
        assert!(reg_drift(&zero, &hp(2, 2, 3, Activation::Tanh), &ds2).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn h_is_sum_and_symmetric() {
        let ds = data(6, 3, 2);
        let e = init_ensemble(&hp(700, 3, 6, Activation::Tanh)).unwrap();
        let set = gram_set(&e, Activation::Tanh, &ds, GramSource::Init).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(set.h.get(i, j), set.h1.get(i, j) + set.h2.get(i, j));
                assert_eq!(set.h.get(i, j), set.h.get(j, i));
            }
        }
        assert!(set.h1.is_psd_up_to_noise().unwrap());
        assert!(set.h2.is_psd_up_to_noise().unwrap());
    }

    #[test]
    fn orthogonal_inputs_decorrelate_for_identity() {
        let ds = Dataset::new(2, vec![1.0, 0.0, 0.0, 1.0], vec![1.0, -1.0], meta()).unwrap();
        let e = init_ensemble(&hp(200_000, 2, 2, Activation::Identity)).unwrap();
        let g2 = gram_h2(&e, Activation::Identity, &ds).unwrap();
        // sd of θ1θ2 is 1 under p0.
        assert!(g2.get(0, 1).abs() <= 3.0 / (200_000f64).sqrt());
        let g1 = gram_h1(&e, Activation::Identity, &ds).unwrap();
        assert_eq!(g1.get(0, 1), 0.0);
    }

    #[test]
    fn reg_drift_vanishes_at_init_in_expectation() {
        let ds = data(4, 3, 8);
        let m = 200_000;
        let p = hp(m, 3, 4, Activation::Tanh);
        let e = init_ensemble(&p).unwrap();
        let drift = reg_drift(&e, &p, &ds).unwrap();
        // Per-particle terms have sd below 3 here (|h| ≤ 1, |h′z| ≤ 0.45 + ..., |h″| ≤ 0.77).
        for v in drift {
            assert!(v.abs() <= 3.0 * 3.0 / (m as f64).sqrt(), "{v}");
        }
    }

    #[test]
    fn drift_examples() {
        let a = GramMatrix::from_entries(2, vec![1.0, 0.2, 0.2, 1.0], GramSource::Init, 1).unwrap();
        let same = kernel_drift(&a, &a).unwrap();
        assert_eq!((same.inf_inf, same.spectral_upper), (0.0, 0.0));
        let b = GramMatrix::from_entries(2, vec![1.0, 0.7, 0.7, 1.0], GramSource::Step(3), 1).unwrap();
        let d = kernel_drift(&b, &a).unwrap();
        assert!((d.inf_inf - 0.5).abs() < 1e-15 && (d.spectral_upper - 1.0).abs() < 1e-15);
        let c = GramMatrix::from_entries(1, vec![1.0], GramSource::Init, 1).unwrap();
        assert!(kernel_drift(&c, &a).is_err());
    }

    #[test]
    fn duplicate_point_collapses_lambda_min() {
        let ds = data(5, 3, 4);
        let p = hp(2000, 3, 5, Activation::Tanh);
        let e = init_ensemble(&p).unwrap();
        let lam = min_eigenvalue(&gram_h(&e, Activation::Tanh, &ds).unwrap()).unwrap();
        let dup = ds.with_duplicate(2);
        let g = gram_h(&e, Activation::Tanh, &dup).unwrap();
        let lam_dup = min_eigenvalue(&g).unwrap();
        assert!(lam > 0.0);
        assert!(lam_dup <= lam);
        assert!(lam_dup.abs() < 1e-12);
        assert!(matches!(lambda0(&g, 1e-10), Err(Error::AssumptionViolated(_))));
    }

    #[test]
    fn summary_and_csv() {
        let g = GramMatrix::from_entries(2, vec![2.0, 1.0, 1.0, 2.0], GramSource::Init, 4).unwrap();
        let s = g.summary().unwrap();
        assert!((s.lambda_min - 1.0).abs() < 1e-14);
        assert_eq!(s.trace, 4.0);
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "2,1\n1,2\n");
    }
}
