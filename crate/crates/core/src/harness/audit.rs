use rand::Rng;
use serde::Serialize;

use super::ExperimentConfig;
use crate::activation::{audit_constants, Activation, AuditReport};
use crate::data::{Dataset, DatasetMeta};
use crate::dynamics;
use crate::error::Result;
use crate::metrics::{self, TailAudit};
use crate::model::{Ensemble, GaussianPrior, HyperParams, InitScheme, NoiseConvention};
use crate::rng::{self, CounterRng, Domain};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TalagrandSummary {
    pub cases: usize,
    pub failures: usize,
    /// Largest `W2 / (2 max σ √KL)` over the cases.
    pub worst_ratio: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseCalibration {
    pub convention: NoiseConvention,
    pub steps: u64,
    pub expected_variance: f64,
    /// Per coordinate.
    pub measured_variance: Vec<f64>,
    pub worst_rel_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditSummary {
    pub activations: Vec<AuditReport>,
    pub talagrand: TalagrandSummary,
    pub tail: TailAudit,
    /// Corrected constant `2σ_u²` holds at every radius.
    pub tail_corrected_pass: bool,
    /// Radii where the `σ_u²/2` constant fails.
    pub tail_quarter_violations: Vec<f64>,
    pub noise: Vec<NoiseCalibration>,
    pub pass: bool,
}

/// Empirical per-step increment variance of a single particle under zero
/// drift: zero inputs remove the data term, and a huge prior scale removes
/// the weight decay.
pub fn noise_calibration(
    lambda: f64,
    eta: f64,
    convention: NoiseConvention,
    steps: u64,
    seed: u64,
    tol: f64,
) -> Result<NoiseCalibration> {
    let d = 2;
    let hp = HyperParams {
        alpha: 1.0,
        lambda,
        sigma_u: 1e12,
        sigma_theta: 1e12,
        eta,
        d,
        m: 1,
        n: 1,
        seed,
        activation: Activation::Identity,
        grad_scaling: Default::default(),
        noise: convention,
        init: InitScheme::Iid,
    };
    let meta = DatasetMeta { seed: 0, mode: "zero_drift".into(), label_clip_rate: 0.0 };
    let ds = Dataset::new(d, vec![0.0; d], vec![0.0], meta)?;
    let mut e = Ensemble::new(d, vec![0.0; d], vec![0.0])?;
    let noise = CounterRng::new(seed, Domain::Audit);
    let mut prev = e.point(0);
    let mut sq = vec![0.0; d + 1];
    for _ in 0..steps {
        dynamics::step(&mut e, &hp, &ds, &noise)?;
        let p = e.point(0);
        for c in 0..=d {
            sq[c] += (p[c] - prev[c]).powi(2);
        }
        prev = p;
    }
    let expected = hp.noise_std().powi(2);
    let measured: Vec<f64> = sq.iter().map(|s| s / steps as f64).collect();
    let worst = measured.iter().map(|v| (v / expected - 1.0).abs()).fold(0.0, f64::max);
    Ok(NoiseCalibration {
        convention,
        steps,
        expected_variance: expected,
        measured_variance: measured,
        worst_rel_error: worst,
        pass: worst <= tol,
    })
}

fn talagrand(cases: usize, dim: usize, prior: &GaussianPrior, seed: u64) -> Result<TalagrandSummary> {
    let mut r = rng::chacha(seed, Domain::Audit, 1);
    let scales = prior.scales(dim - 1);
    let mut failures = 0;
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let mean: Vec<f64> = scales.iter().map(|s| s * r.random_range(-3.0..3.0)).collect();
        let var: Vec<f64> = scales.iter().map(|s| s * s * r.random_range(0.01..4.0)).collect();
        let a = metrics::talagrand_audit(&mean, &var, prior)?;
        if !a.pass {
            failures += 1;
        }
        worst = worst.max(a.lhs / a.rhs);
    }
    Ok(TalagrandSummary { cases, failures, worst_ratio: worst, pass: failures == 0 })
}

/// Activation constants on a grid, the Gaussian Talagrand inequality on
/// random diagonal Gaussians, the second-moment tail bound, and the noise
/// variance of the update.
pub fn run_audit(cfg: &ExperimentConfig) -> Result<AuditSummary> {
    cfg.validate()?;
    let a = &cfg.audit;
    let activations = Activation::ALL
        .into_iter()
        .map(|act| audit_constants(act, &act.constants(), a.constants_grid))
        .collect::<Result<Vec<_>>>()?;
    let prior = cfg.prior();
    let talagrand = talagrand(a.talagrand_cases, cfg.model.d + 1, &prior, cfg.seed)?;
    let grid: Vec<f64> = (0..a.tail_points)
        .map(|k| a.tail_r_max * k as f64 / (a.tail_points.max(2) - 1) as f64)
        .collect();
    let tail = metrics::tail_bound_audit(prior.sigma_u, &grid, a.tail_samples, rng::derive_seed(cfg.seed, Domain::Audit, 2))?;
    let tail_corrected_pass = tail.corrected_pass();
    let tail_quarter_violations = tail.quarter_violations();

    // λ = 0 has no noise to calibrate; the audit then uses λ = 1e-3.
    let lambda = if cfg.model.lambda > 0.0 { cfg.model.lambda } else { 1e-3 };
    let eta = cfg.eta_at(cfg.model.alpha);
    let noise = [NoiseConvention::StdDev, NoiseConvention::LiteralVariance]
        .into_iter()
        .map(|c| noise_calibration(lambda, eta, c, a.noise_steps, cfg.seed, cfg.tolerances.noise_rel))
        .collect::<Result<Vec<_>>>()?;

    let pass = activations.iter().all(|r| r.pass)
        && talagrand.pass
        && tail_corrected_pass
        && noise.iter().all(|n| n.pass);
    Ok(AuditSummary { activations, talagrand, tail, tail_corrected_pass, tail_quarter_violations, noise, pass })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_variance_matches_both_conventions() {
        let c = noise_calibration(0.2, 0.01, NoiseConvention::StdDev, 50_000, 3, 0.05).unwrap();
        assert!((c.expected_variance - 2.0 * 0.2 * 0.01).abs() < 1e-15);
        assert!(c.pass, "{c:?}");
        let c = noise_calibration(0.2, 0.01, NoiseConvention::LiteralVariance, 50_000, 3, 0.05).unwrap();
        assert!((c.expected_variance - 0.2 * 0.02f64.sqrt()).abs() < 1e-15);
        assert!(c.pass, "{c:?}");
    }

    #[test]
    fn talagrand_summary_passes() {
        let prior = GaussianPrior { sigma_u: 1.5, sigma_theta: 0.5 };
        let s = talagrand(500, 4, &prior, 1).unwrap();
        assert!(s.pass && s.worst_ratio <= 1.0 && s.worst_ratio > 0.0);
    }
}
