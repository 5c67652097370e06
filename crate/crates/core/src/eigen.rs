//! Dense symmetric eigendecomposition by the cyclic Jacobi method.

use crate::error::{Error, Result};

/// Sweep cap for the cyclic Jacobi iteration.
pub const MAX_SWEEPS: usize = 100;

/// Tolerance used when checking that an input is symmetric.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Eigenvalues in ascending order with matching unit eigenvectors stored
/// column-major (`vectors[k * n + i]` is entry `i` of eigenvector `k`).
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricEigen {
    pub n: usize,
    pub values: Vec<f64>,
    pub vectors: Vec<f64>,
    pub sweeps: usize,
}

impl SymmetricEigen {
    pub fn vector(&self, k: usize) -> &[f64] {
        &self.vectors[k * self.n..(k + 1) * self.n]
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.n - 1]
    }
}

/// Largest `|a_ij − a_ji|` relative to the largest entry.
pub fn asymmetry(a: &[f64], n: usize) -> f64 {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((a[i * n + j] - a[j * n + i]).abs());
        }
    }
    worst / scale
}

/// Eigendecomposition of the row-major symmetric `n × n` matrix `a`.
pub fn symmetric_eigen(a: &[f64], n: usize) -> Result<SymmetricEigen> {
    if n == 0 || a.len() != n * n {
        return Err(Error::DimensionMismatch { expected: n * n, got: a.len() });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("matrix has non-finite entries".into()));
    }
    let asym = asymmetry(a, n);
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric(asym));
    }
    let mut m = a.to_vec();
    // Row-major accumulator; column k of `v` is eigenvector k.
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let total: f64 = m.iter().map(|x| x * x).sum();
    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        if off <= (f64::EPSILON * f64::EPSILON) * total || off == 0.0 {
            break;
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| m[x * n + x].total_cmp(&m[y * n + y]));
    let values = order.iter().map(|&k| m[k * n + k]).collect();
    let mut vectors = vec![0.0; n * n];
    for (slot, &k) in order.iter().enumerate() {
        for i in 0..n {
            vectors[slot * n + i] = v[i * n + k];
        }
    }
    Ok(SymmetricEigen { n, values, vectors, sweeps })
}

/// Lower Cholesky factor of a symmetric positive definite matrix (only the
/// lower triangle of `a` is read); `None` when not positive definite.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = a[i * n + j] - (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum::<f64>();
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Solve `L z = b` for lower-triangular `L`.
pub fn solve_lower(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut z = vec![0.0; n];
    for i in 0..n {
        let s: f64 = b[i] - (0..i).map(|k| l[i * n + k] * z[k]).sum::<f64>();
        z[i] = s / l[i * n + i];
    }
    z
}
