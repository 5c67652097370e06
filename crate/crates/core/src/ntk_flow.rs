//! Linearized NTK training flow
//! `d(f − y)/dt = −(2α²/n) H0 (f − y)`, `f(0) = 0`, solved exactly through
//! the eigendecomposition of `H0`, plus its forward-Euler discretization.

use std::io::Write;

use crate::eigen::SymmetricEigen;
use crate::error::{Error, Result};
use crate::kernel::GramMatrix;

#[derive(Debug, Clone)]
pub struct NtkFlow {
    pub h0: GramMatrix,
    pub eig: SymmetricEigen,
    pub y: Vec<f64>,
    pub alpha: f64,
    /// `y` expressed in the eigenbasis.
    y_coeffs: Vec<f64>,
}

impl NtkFlow {
    pub fn new(h0: GramMatrix, y: Vec<f64>, alpha: f64) -> Result<Self> {
        if y.len() != h0.n {
            return Err(Error::DimensionMismatch { expected: h0.n, got: y.len() });
        }
        if !(alpha > 0.0) {
            return Err(Error::InvalidInput(format!("alpha must be positive, got {alpha}")));
        }
        let eig = h0.eigen()?;
        let y_coeffs = (0..h0.n).map(|k| eig.vector(k).iter().zip(&y).map(|(v, y)| v * y).sum()).collect();
        Ok(NtkFlow { h0, eig, y, alpha, y_coeffs })
    }

    pub fn n(&self) -> usize {
        self.h0.n
    }

    /// `2α²/n`.
    pub fn rate(&self) -> f64 {
        2.0 * self.alpha * self.alpha / self.n() as f64
    }

    /// Largest forward-Euler step that is stable, `2 / (rate · λ_max)`.
    pub fn max_stable_eta(&self) -> f64 {
        2.0 / (self.rate() * self.eig.max())
    }

    /// `f = Σ_k (1 − decay_k) ⟨v_k, y⟩ v_k`.
    fn from_decays(&self, decay: impl Fn(f64) -> f64) -> Vec<f64> {
        let n = self.n();
        let mut f = vec![0.0; n];
        for k in 0..n {
            let w = (1.0 - decay(self.eig.values[k])) * self.y_coeffs[k];
            for (fi, vi) in f.iter_mut().zip(self.eig.vector(k)) {
                *fi += w * vi;
            }
        }
        f
    }

    /// `f_NTK(t) = (I − exp(−(2α²/n) H0 t)) y`.
    pub fn closed_form(&self, t: f64) -> Result<Vec<f64>> {
        if !(t >= 0.0) {
            return Err(Error::InvalidInput(format!("time must be nonnegative, got {t}")));
        }
        let r = self.rate();
        Ok(self.from_decays(|lam| (-r * lam * t).exp()))
    }

    /// Forward-Euler iterate `k` with step `eta`, evaluated directly:
    /// `f_k = (I − (I − η (2α²/n) H0)^k) y`.
    pub fn euler_at(&self, eta: f64, k: u64) -> Result<Vec<f64>> {
        self.check_eta(eta)?;
        let r = self.rate();
        Ok(self.from_decays(|lam| (1.0 - eta * r * lam).powf(k as f64)))
    }

    fn check_eta(&self, eta: f64) -> Result<()> {
        let max_eta = self.max_stable_eta();
        if !(eta > 0.0) || eta >= max_eta {
            return Err(Error::Unstable { eta, max_eta });
        }
        Ok(())
    }

    /// Forward-Euler trajectory `f_0 = 0, …, f_steps`.
    pub fn euler(&self, eta: f64, steps: usize) -> Result<Vec<Vec<f64>>> {
        self.check_eta(eta)?;
        let n = self.n();
        let c = eta * self.rate();
        let mut f = vec![0.0; n];
        let mut out = Vec::with_capacity(steps + 1);
        out.push(f.clone());
        for _ in 0..steps {
            let r: Vec<f64> = f.iter().zip(&self.y).map(|(a, b)| a - b).collect();
            for i in 0..n {
                let hr: f64 = (0..n).map(|j| self.h0.get(i, j) * r[j]).sum();
                f[i] -= c * hr;
            }
            out.push(f.clone());
        }
        Ok(out)
    }

    /// `ntk_flow.csv`: `t, f_1..f_n, residual_norm`.
    pub fn write_csv<W: Write>(&self, mut w: W, times: &[f64], header: &str) -> Result<()> {
        let io = |e| Error::io("ntk_flow.csv", e);
        w.write_all(header.as_bytes()).map_err(io)?;
        let cols: Vec<String> = (1..=self.n()).map(|i| format!("f_{i}")).collect();
        writeln!(w, "t,{},residual_norm", cols.join(",")).map_err(io)?;
        for &t in times {
            let f = self.closed_form(t)?;
            let res = f.iter().zip(&self.y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let vals: Vec<String> = f.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{t},{},{res}", vals.join(",")).map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// `(1/n) ‖f − g‖²`.
pub fn residual_gap(f: &[f64], g: &[f64]) -> Result<f64> {
    if f.len() != g.len() {
        return Err(Error::DimensionMismatch { expected: g.len(), got: f.len() });
    }
    if f.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(f.iter().zip(g).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / f.len() as f64)
}
