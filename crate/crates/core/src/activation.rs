//! Smooth scalar activations `h̃(z)` with derivatives up to third order, and
//! the smoothness constants `G1..G7` that the theory evaluators consume.
//!
//! Every activation is applied to the pre-activation `z = θᵀx`, so the
//! neuron is `h(θ, x) = h̃(θᵀx)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Half-width of the interval the constants are certified on.
pub const AUDIT_HALF_WIDTH: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Sigmoid,
    Identity,
    Softplus,
}

/// Value and first three derivatives of `h̃` at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Derivs {
    pub h: f64,
    pub h1: f64,
    pub h2: f64,
    pub h3: f64,
}

/// Bounds of the form
/// `|h̃(z)| ≤ g1|z| + g2`, `|h̃′| ≤ g3`, `|h̃″| ≤ g4`, `|(z h̃′)′| ≤ g5`,
/// `|h̃‴| ≤ g6`, and `|h̃| ≤ g7` for bounded activations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GConstants {
    pub g1: f64,
    pub g2: f64,
    pub g3: f64,
    pub g4: f64,
    pub g5: f64,
    pub g6: f64,
    pub g7: Option<f64>,
}

impl GConstants {
    pub const ZERO: GConstants =
        GConstants { g1: 0.0, g2: 0.0, g3: 0.0, g4: 0.0, g5: 0.0, g6: 0.0, g7: None };
}

#[inline]
fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub const ALL: [Activation; 4] =
        [Activation::Tanh, Activation::Sigmoid, Activation::Identity, Activation::Softplus];

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
            Activation::Softplus => "softplus",
        }
    }

    pub fn eval(self, z: f64) -> Derivs {
        match self {
            Activation::Tanh => {
                let t = tanh(z);
                let s = 1.0 - t * t;
                Derivs { h: t, h1: s, h2: -2.0 * t * s, h3: -2.0 * s * (1.0 - 3.0 * t * t) }
            }
            Activation::Sigmoid => {
                let s = logistic(z);
                let p = s * (1.0 - s);
                Derivs { h: s, h1: p, h2: p * (1.0 - 2.0 * s), h3: p * (1.0 - 6.0 * p) }
            }
            Activation::Identity => Derivs { h: z, h1: 1.0, h2: 0.0, h3: 0.0 },
            Activation::Softplus => {
                let s = logistic(z);
                let p = s * (1.0 - s);
                let h = z.max(0.0) + (-z.abs()).exp().ln_1p();
                Derivs { h, h1: s, h2: p, h3: p * (1.0 - 2.0 * s) }
            }
        }
    }

    /// Value and first derivative only; this is the training hot path.
    #[inline]
    pub fn eval01(self, z: f64) -> (f64, f64) {
        match self {
            Activation::Tanh => {
                let t = tanh(z);
                (t, 1.0 - t * t)
            }
            Activation::Sigmoid => {
                let s = logistic(z);
                (s, s * (1.0 - s))
            }
            Activation::Identity => (z, 1.0),
            Activation::Softplus => (z.max(0.0) + (-z.abs()).exp().ln_1p(), logistic(z)),
        }
    }

    #[inline]
    pub fn value(self, z: f64) -> f64 {
        self.eval01(z).0
    }

    pub fn is_bounded(self) -> bool {
        self.constants().g7.is_some()
    }

    /// Shipped constants. Non-trivial entries come from dense grid
    /// maximization on `|z| ≤ 20`, rounded up at the fourth decimal.
    pub fn constants(self) -> GConstants {
        match self {
            // g4 = 4/(3√3); g5 attained at z = 0.
            Activation::Tanh => GConstants {
                g1: 0.0,
                g2: 1.0,
                g3: 1.0,
                g4: 0.7699,
                g5: 1.0,
                g6: 2.0,
                g7: Some(1.0),
            },
            // g4 = √3/18.
            Activation::Sigmoid => GConstants {
                g1: 0.0,
                g2: 1.0,
                g3: 0.25,
                g4: 0.0963,
                g5: 0.25,
                g6: 0.125,
                g7: Some(1.0),
            },
            Activation::Identity => GConstants {
                g1: 1.0,
                g2: 0.0,
                g3: 1.0,
                g4: 0.0,
                g5: 1.0,
                g6: 0.0,
                g7: None,
            },
            // softplus(z) ≤ |z| + ln 2.
            Activation::Softplus => GConstants {
                g1: 1.0,
                g2: 0.6932,
                g3: 1.0,
                g4: 0.25,
                g5: 1.0999,
                g6: 0.0963,
                g7: None,
            },
        }
    }

    /// `g7`, or an error for activations without a uniform bound.
    pub fn g7(self) -> Result<f64, Error> {
        self.constants().g7.ok_or(Error::UnboundedActivation(self.name()))
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Activation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown activation `{s}`")))
    }
}

/// Worst margin (lhs − rhs) of one inequality over the audit grid, and the
/// grid point where it occurs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InequalityMargin {
    pub name: &'static str,
    pub margin: f64,
    pub at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub activation: Activation,
    pub grid_size: usize,
    pub margins: Vec<InequalityMargin>,
    pub pass: bool,
}

impl AuditReport {
    pub fn failures(&self) -> impl Iterator<Item = &InequalityMargin> {
        self.margins.iter().filter(|m| m.margin > 0.0)
    }
}

/// Check every bound in `g` on a uniform grid over `[-20, 20]`.
pub fn audit_constants(
    act: Activation,
    g: &GConstants,
    grid_size: usize,
) -> Result<AuditReport, Error> {
    if grid_size < 1000 {
        return Err(Error::InvalidInput(format!("grid_size {grid_size} < 1000")));
    }
    let mut names: Vec<&'static str> =
        vec!["|h| <= g1|z| + g2", "|h'| <= g3", "|h''| <= g4", "|(z h')'| <= g5", "|h'''| <= g6"];
    if g.g7.is_some() {
        names.push("|h| <= g7");
    }
    let mut margins: Vec<InequalityMargin> =
        names.iter().map(|&name| InequalityMargin { name, margin: f64::NEG_INFINITY, at: 0.0 }).collect();

    let step = 2.0 * AUDIT_HALF_WIDTH / (grid_size - 1) as f64;
    for k in 0..grid_size {
        let z = -AUDIT_HALF_WIDTH + step * k as f64;
        let d = act.eval(z);
        let mut vals = [
            d.h.abs() - (g.g1 * z.abs() + g.g2),
            d.h1.abs() - g.g3,
            d.h2.abs() - g.g4,
            (d.h1 + z * d.h2).abs() - g.g5,
            d.h3.abs() - g.g6,
            0.0,
        ];
        if let Some(g7) = g.g7 {
            vals[5] = d.h.abs() - g7;
        }
        for (m, &v) in margins.iter_mut().zip(vals.iter()) {
            if v > m.margin {
                m.margin = v;
                m.at = z;
            }
        }
    }
    let pass = margins.iter().all(|m| m.margin <= 0.0);
    Ok(AuditReport { activation: act, grid_size, margins, pass })
}

/// `tanh` through a single `exp`, several times faster than the libm
/// routine. Relative error stays below about 1e-13; a Taylor branch covers
/// the cancellation region near 0.
#[inline]
pub fn tanh(z: f64) -> f64 {
    let a = z.abs();
    let t = if a < 1e-3 {
        let a2 = a * a;
        a * (1.0 - a2 * (1.0 / 3.0 - a2 * (2.0 / 15.0)))
    } else {
        let e2 = (-2.0 * a).exp();
        (1.0 - e2) / (1.0 + e2)
    };
    t.copysign(z)
}
