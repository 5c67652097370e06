//! Experiment configuration, loaded from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::activation::Activation;
use crate::data::{GaussianTeacher, LabelMode};
use crate::dynamics::Recorders;
use crate::error::{Error, Result};
use crate::model::{GaussianPrior, GradScaling, HyperParams, InitScheme, NoiseConvention};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Train,
    Sweep,
    Generalize,
    Audit,
    Bounds,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Train => "train",
            ExperimentKind::Sweep => "sweep",
            ExperimentKind::Generalize => "generalize",
            ExperimentKind::Audit => "audit",
            ExperimentKind::Bounds => "bounds",
        }
    }
}

/// How the step size depends on `α`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaScaling {
    /// `η = eta / α²`, so one step covers the same effective time at every `α`.
    #[default]
    InverseAlphaSq,
    Constant,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub activation: Activation,
    pub d: usize,
    pub m: usize,
    #[serde(default = "one")]
    pub sigma_u: f64,
    #[serde(default = "one")]
    pub sigma_theta: f64,
    pub lambda: f64,
    /// Output scale for single runs; sweeps take theirs from `[sweep]`.
    #[serde(default = "one")]
    pub alpha: f64,
    /// Base step size, see `eta_scaling`.
    pub eta: f64,
    #[serde(default)]
    pub eta_scaling: EtaScaling,
    #[serde(default)]
    pub grad_scaling: GradScaling,
    #[serde(default)]
    pub noise: NoiseConvention,
    #[serde(default)]
    pub init: InitScheme,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    #[default]
    Rademacher,
    Teacher,
}

fn default_mc() -> usize {
    20_000
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub mean_theta: Vec<f64>,
    pub mean_u: f64,
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Training-set size for train, sweep and bounds.
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    /// Reject nearly parallel inputs so the Gram matrix stays well posed.
    #[serde(default = "yes")]
    pub distinct: bool,
    #[serde(default)]
    pub labels: LabelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<TeacherConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Fixed number of updates. Exclusive with `horizon`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
    /// Training time in units of `1/(α²λ0²)`, with `λ0` measured at
    /// initialization for each run. Exclusive with `steps`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    /// Approximate number of trajectory records.
    pub records: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { steps: None, horizon: Some(2.0), records: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
    pub seeds: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { alphas: vec![2.0, 8.0, 32.0, 128.0], seeds: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneralizeConfig {
    pub n_grid: Vec<usize>,
    pub seeds: u64,
    pub test_n: usize,
    pub delta: f64,
}

impl Default for GeneralizeConfig {
    fn default() -> Self {
        GeneralizeConfig { n_grid: vec![50, 200, 800], seeds: 5, test_n: 4000, delta: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditConfig {
    pub constants_grid: usize,
    pub talagrand_cases: usize,
    pub tail_points: usize,
    pub tail_r_max: f64,
    pub tail_samples: usize,
    pub noise_steps: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            constants_grid: 200_001,
            talagrand_cases: 10_000,
            tail_points: 100,
            tail_r_max: 6.0,
            tail_samples: 1_000_000,
            noise_steps: 100_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Allowed energy increase between records, relative to `L(p0)`.
    pub energy_rel: f64,
    /// Slack factor on the loss bound when it is checked.
    pub loss_bound_factor: f64,
    /// Allowed relative error of the measured noise variance.
    pub noise_rel: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { energy_rel: 1e-3, loss_bound_factor: 1.5, noise_rel: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    /// Not part of the config hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub recorders: Recorders,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub generalize: GeneralizeConfig,
    #[serde(default)]
    pub audit: AuditConfig,
    #[serde(default)]
    pub tolerances: Tolerances,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    /// Desk-scale preset: `n = 8`, `d = 4`, `m = 4096`, tanh, `λ = 1e-3`,
    /// `η = 0.5/α²`, horizon of two time constants, `α ∈ {2, 8, 32, 128}`.
    pub fn preset(kind: ExperimentKind) -> Self {
        ExperimentConfig {
            experiment: kind,
            seed: 0,
            out_dir: None,
            model: ModelConfig {
                activation: Activation::Tanh,
                d: 4,
                m: 4096,
                sigma_u: 1.0,
                sigma_theta: 1.0,
                lambda: 1e-3,
                alpha: 32.0,
                eta: 0.5,
                eta_scaling: EtaScaling::InverseAlphaSq,
                grad_scaling: GradScaling::Meanfield,
                noise: NoiseConvention::StdDev,
                init: InitScheme::Antithetic,
            },
            data: DataConfig { n: 8, seed: 0, distinct: true, labels: LabelKind::Rademacher, teacher: None },
            schedule: ScheduleConfig::default(),
            recorders: Recorders::default(),
            sweep: SweepConfig::default(),
            generalize: GeneralizeConfig::default(),
            audit: AuditConfig::default(),
            tolerances: Tolerances::default(),
        }
    }

    /// Teacher-student preset: teacher mean `θ = 0.5·e1`, `u = 1`; `α = 64`,
    /// `m = 512`, 1000 steps.
    pub fn generalize_preset() -> Self {
        let mut cfg = Self::preset(ExperimentKind::Generalize);
        cfg.model.m = 512;
        cfg.model.alpha = 64.0;
        cfg.data.labels = LabelKind::Teacher;
        cfg.data.teacher = Some(TeacherConfig { mean_theta: vec![0.5, 0.0, 0.0, 0.0], mean_u: 1.0, mc_samples: 20_000 });
        cfg.schedule = ScheduleConfig { steps: Some(1000), horizon: None, records: 10 };
        cfg.recorders = Recorders::minimal();
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| invalid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the canonical TOML form, excluding the output directory.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = None;
        Ok(hex::encode(Sha256::digest(c.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(invalid(format!("{name} must be positive and finite, got {v}")))
            }
        };
        pos("model.sigma_u", m.sigma_u)?;
        pos("model.sigma_theta", m.sigma_theta)?;
        pos("model.alpha", m.alpha)?;
        pos("model.eta", m.eta)?;
        if !(m.lambda >= 0.0 && m.lambda.is_finite()) {
            return Err(invalid(format!("model.lambda must be >= 0, got {}", m.lambda)));
        }
        if m.d == 0 || m.m == 0 {
            return Err(invalid("model.d and model.m must be positive"));
        }
        if m.init == InitScheme::Antithetic && (m.m % 4 != 0 || m.m / 4 < m.d) {
            return Err(invalid(format!("antithetic init needs m divisible by 4 and m/4 >= d, got m = {}", m.m)));
        }
        if self.data.n == 0 {
            return Err(invalid("data.n must be positive"));
        }
        match (self.data.labels, &self.data.teacher) {
            (LabelKind::Teacher, None) => return Err(invalid("data.labels = \"teacher\" needs a [data.teacher] table")),
            (LabelKind::Teacher, Some(t)) if t.mean_theta.len() != m.d => {
                return Err(invalid(format!(
                    "data.teacher.mean_theta has {} entries, model.d = {}",
                    t.mean_theta.len(),
                    m.d
                )))
            }
            _ => {}
        }
        let s = &self.schedule;
        match (s.steps, s.horizon) {
            (Some(0), _) => return Err(invalid("schedule.steps must be positive")),
            (Some(_), None) => {}
            (None, Some(h)) => pos("schedule.horizon", h)?,
            _ => return Err(invalid("set exactly one of schedule.steps and schedule.horizon")),
        }
        if s.records == 0 {
            return Err(invalid("schedule.records must be positive"));
        }
        if self.experiment == ExperimentKind::Sweep {
            let a = &self.sweep.alphas;
            if a.len() < 4 {
                return Err(invalid(format!("sweep.alphas needs at least 4 values, got {}", a.len())));
            }
            for &v in a {
                pos("sweep.alphas entry", v)?;
            }
            let (lo, hi) = a.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &v| (l.min(v), h.max(v)));
            if hi / lo < 16.0 {
                return Err(invalid(format!("sweep.alphas must span at least 16x, got {:.3}x", hi / lo)));
            }
        }
        if self.sweep.seeds == 0 || self.generalize.seeds == 0 {
            return Err(invalid("seed counts must be positive"));
        }
        if self.experiment == ExperimentKind::Generalize {
            let g = &self.generalize;
            if self.data.labels != LabelKind::Teacher {
                return Err(invalid("generalize needs data.labels = \"teacher\""));
            }
            if g.n_grid.is_empty() || g.n_grid.contains(&0) || g.test_n == 0 {
                return Err(invalid("generalize.n_grid and generalize.test_n must be positive"));
            }
            if !(g.delta > 0.0 && g.delta <= 1.0) {
                return Err(invalid(format!("generalize.delta must lie in (0, 1], got {}", g.delta)));
            }
        }
        let t = &self.tolerances;
        pos("tolerances.energy_rel", t.energy_rel)?;
        pos("tolerances.loss_bound_factor", t.loss_bound_factor)?;
        pos("tolerances.noise_rel", t.noise_rel)?;
        Ok(())
    }

    pub fn prior(&self) -> GaussianPrior {
        GaussianPrior { sigma_u: self.model.sigma_u, sigma_theta: self.model.sigma_theta }
    }

    pub fn eta_at(&self, alpha: f64) -> f64 {
        match self.model.eta_scaling {
            EtaScaling::InverseAlphaSq => self.model.eta / (alpha * alpha),
            EtaScaling::Constant => self.model.eta,
        }
    }

    pub fn hyper(&self, alpha: f64, n: usize, seed: u64) -> HyperParams {
        let m = &self.model;
        HyperParams {
            alpha,
            lambda: m.lambda,
            sigma_u: m.sigma_u,
            sigma_theta: m.sigma_theta,
            eta: self.eta_at(alpha),
            d: m.d,
            m: m.m,
            n,
            seed,
            activation: m.activation,
            grad_scaling: m.grad_scaling,
            noise: m.noise,
            init: m.init,
        }
    }

    pub fn teacher(&self) -> Result<Option<GaussianTeacher>> {
        match (&self.data.labels, &self.data.teacher) {
            (LabelKind::Teacher, Some(t)) => {
                let mut mean = t.mean_theta.clone();
                mean.push(t.mean_u);
                Ok(Some(GaussianTeacher::new(mean, self.prior())?))
            }
            _ => Ok(None),
        }
    }

    pub fn label_mode(&self) -> Result<LabelMode> {
        Ok(match self.teacher()? {
            Some(teacher) => LabelMode::Teacher {
                teacher,
                activation: self.model.activation,
                mc_samples: self.data.teacher.as_ref().map_or(default_mc(), |t| t.mc_samples),
                classify: true,
            },
            None => LabelMode::Rademacher,
        })
    }
}
