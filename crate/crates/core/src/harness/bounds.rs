use serde::Serialize;

use super::{build_dataset, ExperimentConfig};
use crate::error::{Error, Result};
use crate::kernel::{self, GramSource};
use crate::model;
use crate::theory::{self, PremisedBound, TheoryConstants, TheoryInputs};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsReport {
    pub alpha: f64,
    pub lambda: f64,
    pub n: usize,
    pub d: usize,
    pub lambda_min: f64,
    pub l0: f64,
    pub constants: TheoryConstants,
    pub condition_holds: bool,
    /// `t → ∞` limit of the loss bound.
    pub loss_floor: f64,
    pub kl_bound: f64,
    /// Large-α generalization bound with `M` set to `kl_bound`.
    pub gen_large_alpha: f64,
    /// Small-α bound with `M = kl_bound`; absent for unbounded activations
    /// or when `kl_bound > 1/2`.
    pub gen_small_alpha: Option<f64>,
    pub gen_chi2_teacher: Option<PremisedBound>,
    pub gen_kl_teacher: Option<PremisedBound>,
    /// `α⁻¹λ0⁻²` and `α⁻²λ0⁻⁸`: shapes only, the prefactors are unknown.
    pub kernel_drift_template: f64,
    pub residual_gap_template: f64,
}

/// Every constant and bound at `model.alpha`, with `λ_min(H(p0))` and
/// `L(p0)` measured on the initial ensemble.
pub fn run_bounds(cfg: &ExperimentConfig) -> Result<BoundsReport> {
    cfg.validate()?;
    let ds = build_dataset(cfg)?;
    let hp = cfg.hyper(cfg.model.alpha, ds.n(), cfg.seed);
    let e = model::init_ensemble(&hp)?;
    let h0 = kernel::gram_set(&e, hp.activation, &ds, GramSource::Init)?.h;
    let lambda_min = kernel::min_eigenvalue(&h0)?;
    let l0 = model::loss(&e, &hp, &ds)?;
    let g = hp.activation.constants();
    let c = TheoryInputs {
        g,
        sigma_u: hp.sigma_u,
        sigma_theta: hp.sigma_theta,
        d: hp.d,
        n: ds.n(),
        alpha: hp.alpha,
        lambda: hp.lambda,
        lambda_min,
        l0,
    }
    .constants()?;
    let loss = theory::loss_bound(f64::INFINITY, hp.alpha, hp.lambda, c.lambda0, c.a1, l0)?;
    let kl = theory::kl_bound(hp.alpha, hp.lambda, c.lambda0, c.a1, c.a2, l0)?;
    let delta = cfg.generalize.delta;
    let gen_large_alpha = theory::gen_bound_large_alpha(kl, hp.alpha, ds.n(), delta, c.b1, c.b2)?;
    let gen_small_alpha = match theory::gen_bound_small_alpha(kl, hp.alpha, ds.n(), delta, g.g7, hp.sigma_u) {
        Ok(v) => Some(v),
        Err(Error::UnboundedActivation(_) | Error::AssumptionViolated(_)) => None,
        Err(e) => return Err(e),
    };
    let (gen_chi2_teacher, gen_kl_teacher) = match cfg.teacher()? {
        Some(t) => {
            let prior = cfg.prior();
            let chi2 = theory::gen_bound_chi2(
                &g,
                hp.sigma_u,
                hp.sigma_theta,
                hp.d,
                t.chi2_to_init(&prior)?,
                hp.alpha,
                hp.lambda,
                ds.n(),
                delta,
            )?;
            let klt = theory::gen_bound_kl_teacher(t.kl_to_init(&prior)?, hp.alpha, ds.n(), delta, g.g7, hp.sigma_u, hp.lambda)
                .ok();
            (Some(chi2), klt)
        }
        None => (None, None),
    };
    Ok(BoundsReport {
        alpha: hp.alpha,
        lambda: hp.lambda,
        n: ds.n(),
        d: hp.d,
        lambda_min,
        l0,
        condition_holds: hp.alpha >= c.alpha_min,
        constants: c,
        loss_floor: loss.floor,
        kl_bound: kl,
        gen_large_alpha,
        gen_small_alpha,
        gen_chi2_teacher,
        gen_kl_teacher,
        kernel_drift_template: theory::kernel_drift_template(hp.alpha, c.lambda0),
        residual_gap_template: theory::residual_gap_template(hp.alpha, c.lambda0),
    })
}
