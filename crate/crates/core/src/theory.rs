//! Closed-form constants and bounds: convergence of the loss and KL along
//! training, the stability radius and width condition, and the
//! generalization bounds for large and small output scale.

use serde::{Deserialize, Serialize};

use crate::activation::GConstants;
use crate::error::{Error, Result};

fn max_sigma(sigma_u: f64, sigma_theta: f64) -> f64 {
    sigma_u.max(sigma_theta)
}

/// `A1 = 2(G1/σ_u² + G3/σ_θ²)(σ_θ²d + σ_u²) + 2(G2/σ_u² + G4)√(σ_θ²d + σ_u²)`.
pub fn const_a1(g: &GConstants, sigma_u: f64, sigma_theta: f64, d: usize) -> f64 {
    let (su2, st2) = (sigma_u * sigma_u, sigma_theta * sigma_theta);
    let spread = st2 * d as f64 + su2;
    2.0 * (g.g1 / su2 + g.g3 / st2) * spread + 2.0 * (g.g2 / su2 + g.g4) * spread.sqrt()
}

/// `A2 = 2[((G1+G3)/σ_u² + (G3+G5)/σ_θ² + G6)·2√(σ_u² + σ_θ²d) + G2/σ_u² + G4]·max{σ_u, σ_θ}`.
pub fn const_a2(g: &GConstants, sigma_u: f64, sigma_theta: f64, d: usize) -> f64 {
    let (su2, st2) = (sigma_u * sigma_u, sigma_theta * sigma_theta);
    let spread = (su2 + st2 * d as f64).sqrt();
    let inner = ((g.g1 + g.g3) / su2 + (g.g3 + g.g5) / st2 + g.g6) * 2.0 * spread + g.g2 / su2 + g.g4;
    2.0 * inner * max_sigma(sigma_u, sigma_theta)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Radius {
    pub value: f64,
    /// The log argument was below `e` and was raised to it.
    pub log_clamped: bool,
    /// The `√(σ_θ²d + σ_u²)` branch of the minimum was active.
    pub saturated: bool,
}

/// `R = min{√(σ_θ²d+σ_u²), Λ / (n·(8G3²√(8σ_θ²d+10σ_u²) + 64G3G4·log(8nG3²σ_u²/Λ)
/// + 16G1G3√(σ_u²+σ_θ²d) + 8G2G3))}`, the log argument clamped below at `e`.
pub fn const_r(g: &GConstants, sigma_u: f64, sigma_theta: f64, d: usize, n: usize, big_lambda: f64) -> Result<Radius> {
    if !(big_lambda > 0.0) {
        return Err(Error::AssumptionViolated(format!("λ_min(H(p0)) must be positive, got {big_lambda:e}")));
    }
    let (su2, st2, df, nf) = (sigma_u * sigma_u, sigma_theta * sigma_theta, d as f64, n as f64);
    let arg = 8.0 * nf * g.g3 * g.g3 * su2 / big_lambda;
    let log_clamped = !(arg >= std::f64::consts::E);
    let log = if log_clamped { 1.0 } else { arg.ln() };
    let denom = 8.0 * g.g3 * g.g3 * (8.0 * st2 * df + 10.0 * su2).sqrt()
        + 64.0 * g.g3 * g.g4 * log
        + 16.0 * g.g1 * g.g3 * (su2 + st2 * df).sqrt()
        + 8.0 * g.g2 * g.g3;
    let cap = (st2 * df + su2).sqrt();
    let second = big_lambda / (denom * nf);
    Ok(Radius { value: cap.min(second), log_clamped, saturated: cap <= second })
}

/// `B1 = [4√(2G1²σ_θ²d + G2²) + 2√2·G3σ_u]·max σ + 8G3σ_u·max σ·√(log n)`.
pub fn const_b1(g: &GConstants, sigma_u: f64, sigma_theta: f64, d: usize, n: usize) -> f64 {
    let ms = max_sigma(sigma_u, sigma_theta);
    let st2 = sigma_theta * sigma_theta;
    (4.0 * (2.0 * g.g1 * g.g1 * st2 * d as f64 + g.g2 * g.g2).sqrt() + 2.0 * 2f64.sqrt() * g.g3 * sigma_u) * ms
        + 8.0 * g.g3 * sigma_u * ms * (n as f64).ln().max(0.0).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct B2 {
    pub value: f64,
    /// The log argument was below 1 and the log term was set to 0.
    pub log_clamped: bool,
}

/// `B2 = 40G3·max σ² + 16G5σ_u·max σ²·√(log(σ_u / (8·max σ²·M)))`.
/// Infinite at `M = 0`; [`gen_bound_large_alpha`] handles that limit.
pub fn const_b2(g: &GConstants, sigma_u: f64, sigma_theta: f64, m_kl: f64) -> B2 {
    let ms2 = max_sigma(sigma_u, sigma_theta).powi(2);
    let arg = sigma_u / (8.0 * ms2 * m_kl);
    let log_clamped = !(arg >= 1.0);
    let log = if log_clamped { 0.0 } else { arg.ln() };
    B2 { value: 40.0 * g.g3 * ms2 + 16.0 * g.g5 * sigma_u * ms2 * log.sqrt(), log_clamped }
}

/// Width condition `α ≥ 8√(L0·A2² + λA1²)·λ0⁻²·R⁻¹·max σ`.
pub fn alpha_threshold(l0: f64, a1: f64, a2: f64, lambda: f64, lambda0: f64, r: f64, max_sigma: f64) -> Result<f64> {
    if !(lambda0 > 0.0) || !(r > 0.0) {
        return Err(Error::AssumptionViolated(format!("λ0 = {lambda0:e} and R = {r:e} must be positive")));
    }
    Ok(8.0 * (l0 * a2 * a2 + lambda * a1 * a1).sqrt() / (lambda0 * lambda0) / r * max_sigma)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBound {
    pub value: f64,
    /// `2 e^{−2α²λ0²t} L0`.
    pub transient: f64,
    /// `2A1²λ²α⁻²λ0⁻⁴`.
    pub floor: f64,
}

pub fn loss_bound(t: f64, alpha: f64, lambda: f64, lambda0: f64, a1: f64, l0: f64) -> Result<LossBound> {
    if !(lambda0 > 0.0) {
        return Err(Error::AssumptionViolated(format!("λ0 must be positive, got {lambda0:e}")));
    }
    if !(t >= 0.0) {
        return Err(Error::InvalidInput(format!("time must be nonnegative, got {t}")));
    }
    let l04 = lambda0.powi(4);
    let transient = 2.0 * (-2.0 * alpha * alpha * lambda0 * lambda0 * t).exp() * l0;
    let floor = 2.0 * a1 * a1 * lambda * lambda / (alpha * alpha) / l04;
    Ok(LossBound { value: transient + floor, transient, floor })
}

/// `4A2²α⁻²λ0⁻⁴L0 + 4A1²λα⁻²λ0⁻⁴`.
pub fn kl_bound(alpha: f64, lambda: f64, lambda0: f64, a1: f64, a2: f64, l0: f64) -> Result<f64> {
    if !(lambda0 > 0.0) {
        return Err(Error::AssumptionViolated(format!("λ0 must be positive, got {lambda0:e}")));
    }
    let l04 = lambda0.powi(4);
    Ok((4.0 * a2 * a2 * l0 + 4.0 * a1 * a1 * lambda) / (alpha * alpha) / l04)
}

fn check_confidence(n: usize, delta: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidInput("n must be at least 1".into()));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::InvalidInput(format!("δ must lie in (0, 1], got {delta}")));
    }
    Ok(((2.0 / delta).ln() / (2.0 * n as f64)).sqrt())
}

/// `B1·√M·α/√n + B2·M·α + 3√(log(2/δ)/2n)`; the `B2·M` term is taken as 0
/// at `M = 0`, its limit.
pub fn gen_bound_large_alpha(m_kl: f64, alpha: f64, n: usize, delta: f64, b1: f64, b2: f64) -> Result<f64> {
    let conf = check_confidence(n, delta)?;
    if !(m_kl >= 0.0) {
        return Err(Error::InvalidInput(format!("M must be nonnegative, got {m_kl}")));
    }
    let b2_term = if m_kl == 0.0 { 0.0 } else { b2 * m_kl * alpha };
    Ok(b1 * m_kl.sqrt() * alpha / (n as f64).sqrt() + b2_term + 3.0 * conf)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PremisedBound {
    pub value: f64,
    /// Every premise of the statement holds.
    pub premises_hold: bool,
    /// `α ≥ √(nχ²)·max{2√λ, 1}` (large-α χ² bound only).
    pub alpha_premise: bool,
    /// The regularization premise of the statement.
    pub lambda_premise: bool,
    /// The bound exceeds 1 and says nothing about a 0-1 error.
    pub vacuous: bool,
    pub b1: f64,
    pub b2: f64,
    pub b2_log_clamped: bool,
}

/// `2(B1 + B2)·√(χ²/n) + 6√(log(2/δ)/2n)` with `B2` evaluated at
/// `M = χ²/α²`. Premises are reported, not enforced.
#[allow(clippy::too_many_arguments)]
pub fn gen_bound_chi2(
    g: &GConstants,
    sigma_u: f64,
    sigma_theta: f64,
    d: usize,
    chi2: f64,
    alpha: f64,
    lambda: f64,
    n: usize,
    delta: f64,
) -> Result<PremisedBound> {
    let conf = check_confidence(n, delta)?;
    if !(chi2 >= 0.0) {
        return Err(Error::InvalidInput(format!("χ² must be nonnegative, got {chi2}")));
    }
    let nf = n as f64;
    let b1 = const_b1(g, sigma_u, sigma_theta, d, n);
    let b2 = if chi2 == 0.0 { B2 { value: 0.0, log_clamped: false } } else { const_b2(g, sigma_u, sigma_theta, chi2 / (alpha * alpha)) };
    let value = 2.0 * (b1 + b2.value) * (chi2 / nf).sqrt() + 6.0 * conf;
    let alpha_premise = alpha >= (nf * chi2).sqrt() * (2.0 * lambda.sqrt()).max(1.0);
    let lambda_premise = 4.0 * nf * lambda * chi2 <= alpha * alpha;
    Ok(PremisedBound {
        value,
        premises_hold: alpha_premise && lambda_premise,
        alpha_premise,
        lambda_premise,
        vacuous: value > 1.0,
        b1,
        b2: b2.value,
        b2_log_clamped: b2.log_clamped,
    })
}

fn bounded_g7(g7: Option<f64>) -> Result<f64> {
    g7.ok_or(Error::UnboundedActivation("this bound needs |h| <= G7 for a finite G7"))
}

/// `4αG7σ_u√(M/n) + 3√(log(2/δ)/2n)`, valid for `M ≤ 1/2`.
pub fn gen_bound_small_alpha(m_kl: f64, alpha: f64, n: usize, delta: f64, g7: Option<f64>, sigma_u: f64) -> Result<f64> {
    let g7 = bounded_g7(g7)?;
    let conf = check_confidence(n, delta)?;
    if !(0.0..=0.5).contains(&m_kl) {
        return Err(Error::AssumptionViolated(format!("the small-α bound needs 0 <= M <= 1/2, got {m_kl}")));
    }
    Ok(4.0 * alpha * g7 * sigma_u * (m_kl / n as f64).sqrt() + 3.0 * conf)
}

/// `8G7σ_u√(α·KL/n) + 6√(log(2/δ)/2n)`, premise `λ ≤ α/(4n·KL)` reported.
pub fn gen_bound_kl_teacher(
    kl: f64,
    alpha: f64,
    n: usize,
    delta: f64,
    g7: Option<f64>,
    sigma_u: f64,
    lambda: f64,
) -> Result<PremisedBound> {
    let g7 = bounded_g7(g7)?;
    let conf = check_confidence(n, delta)?;
    if !(kl >= 0.0) {
        return Err(Error::InvalidInput(format!("KL must be nonnegative, got {kl}")));
    }
    let value = 8.0 * g7 * sigma_u * (alpha * kl / n as f64).sqrt() + 6.0 * conf;
    let lambda_premise = 4.0 * n as f64 * kl * lambda <= alpha;
    Ok(PremisedBound {
        value,
        premises_hold: lambda_premise,
        alpha_premise: true,
        lambda_premise,
        vacuous: value > 1.0,
        b1: f64::NAN,
        b2: f64::NAN,
        b2_log_clamped: false,
    })
}

/// 0 if `y′y ≥ 1/2`, `1 − 2y′y` if `0 ≤ y′y < 1/2`, and 1 if `y′y < 0`.
pub fn ramp_loss(y_pred: f64, y: f64) -> f64 {
    let margin = y_pred * y;
    if margin >= 0.5 {
        0.0
    } else if margin >= 0.0 {
        1.0 - 2.0 * margin
    } else {
        1.0
    }
}

pub fn zero_one_loss(y_pred: f64, y: f64) -> f64 {
    if y_pred * y < 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Shape `α⁻¹λ0⁻²` of the kernel-drift bound, constant unknown.
pub fn kernel_drift_template(alpha: f64, lambda0: f64) -> f64 {
    1.0 / (alpha * lambda0 * lambda0)
}

/// Shape `α⁻²λ0⁻⁸` of the NTK residual-gap bound, constant unknown.
pub fn residual_gap_template(alpha: f64, lambda0: f64) -> f64 {
    1.0 / (alpha * alpha * lambda0.powi(8))
}

/// Every constant for one configuration, plus the clamp flags.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryConstants {
    pub a1: f64,
    pub a2: f64,
    pub b1: f64,
    /// `B2` at `M = kl_bound`, the plug-in used for the large-α bound.
    pub b2: f64,
    pub r: f64,
    pub lambda_min: f64,
    pub lambda0: f64,
    pub alpha_min: f64,
    pub r_log_clamped: bool,
    pub b2_log_clamped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryInputs {
    pub g: GConstants,
    pub sigma_u: f64,
    pub sigma_theta: f64,
    pub d: usize,
    pub n: usize,
    pub alpha: f64,
    pub lambda: f64,
    /// `λ_min(H(p0))`.
    pub lambda_min: f64,
    /// `L(p0)`.
    pub l0: f64,
}

impl TheoryInputs {
    pub fn constants(&self) -> Result<TheoryConstants> {
        let (g, su, st, d) = (&self.g, self.sigma_u, self.sigma_theta, self.d);
        if !(self.lambda_min > 0.0) {
            return Err(Error::AssumptionViolated(format!(
                "λ_min(H(p0)) must be positive, got {:e}",
                self.lambda_min
            )));
        }
        let a1 = const_a1(g, su, st, d);
        let a2 = const_a2(g, su, st, d);
        let lambda0 = (self.lambda_min / self.n as f64).sqrt();
        let r = const_r(g, su, st, d, self.n, self.lambda_min)?;
        let m_kl = kl_bound(self.alpha, self.lambda, lambda0, a1, a2, self.l0)?;
        let b2 = const_b2(g, su, st, m_kl);
        Ok(TheoryConstants {
            a1,
            a2,
            b1: const_b1(g, su, st, d, self.n),
            b2: b2.value,
            r: r.value,
            lambda_min: self.lambda_min,
            lambda0,
            alpha_min: alpha_threshold(self.l0, a1, a2, self.lambda, lambda0, r.value, max_sigma(su, st))?,
            r_log_clamped: r.log_clamped,
            b2_log_clamped: b2.log_clamped,
        })
    }
}
