//! Experiment orchestration: single training runs with a bound comparison,
//! α sweeps with log-log slope fits, teacher-student generalization runs,
//! inequality audits, and bound tables. Every artifact carries the config
//! hash and master seed, and reruns reproduce it byte for byte.

mod audit;
mod bounds;
pub mod config;
mod generalize;
pub mod plot;
mod sweep;
mod train;

use std::path::{Path, PathBuf};

use serde::Serialize;

pub use audit::{noise_calibration, run_audit, AuditSummary, NoiseCalibration, TalagrandSummary};
pub use bounds::{run_bounds, BoundsReport};
pub use config::{ExperimentConfig, ExperimentKind};
pub use generalize::{run_generalize, GenCell, GenReport, GenRow};
pub use sweep::{run_sweep, SweepCell, SweepReport, SweepRow, SweepRun, SweepSlopes};
pub use train::{run_train, TrainReport, TrainRun};

use crate::data::{make_synthetic, Dataset, SyntheticSpec};
use crate::dynamics::{self, Recorders, Schedule, TrainOutcome};
use crate::error::{Error, Result};
use crate::kernel::{self, GramMatrix, GramSource};
use crate::model::{self, HyperParams};

/// Identifies the run an artifact came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub experiment: &'static str,
    pub config_sha256: String,
    pub seed: u64,
}

impl Provenance {
    pub fn of(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Provenance { experiment: cfg.experiment.name(), config_sha256: cfg.hash()?, seed: cfg.seed })
    }

    /// Comment lines that open every CSV artifact.
    pub fn csv_header(&self) -> String {
        format!(
            "# mflab {}\n# config_sha256: {}\n# seed: {}\n",
            self.experiment, self.config_sha256, self.seed
        )
    }
}

#[derive(Serialize)]
struct Document<'a, T: Serialize> {
    provenance: &'a Provenance,
    #[serde(flatten)]
    body: &'a T,
}

pub(crate) fn json_bytes<T: Serialize>(prov: &Provenance, body: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(&Document { provenance: prov, body })?;
    out.push(b'\n');
    Ok(out)
}

pub(crate) fn write_file(dir: &Path, name: &str, bytes: &[u8], written: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(())
}

/// The training set for train, sweep and bounds runs.
pub fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    make_synthetic(&SyntheticSpec {
        n: cfg.data.n,
        d: cfg.model.d,
        seed: cfg.data.seed,
        mode: cfg.label_mode()?,
        distinct: cfg.data.distinct,
    })
}

/// One run that starts by measuring `H(p0)`, so the schedule can be set in
/// units of the time constant `1/(α²λ0²)`.
pub(crate) struct MeasuredRun {
    pub outcome: TrainOutcome,
    pub h0: GramMatrix,
    pub lambda_min: f64,
    pub schedule: Schedule,
}

pub(crate) fn schedule_for(cfg: &ExperimentConfig, hp: &HyperParams, lambda_min: f64) -> Result<Schedule> {
    let steps = match (cfg.schedule.steps, cfg.schedule.horizon) {
        (Some(s), _) => s,
        (None, Some(c)) => {
            let lambda0_sq = lambda_min / hp.n as f64;
            if !(lambda0_sq > 0.0) {
                return Err(Error::AssumptionViolated(format!("λ_min(H(p0)) = {lambda_min:e} is not positive")));
            }
            let tau = c / (hp.alpha * hp.alpha * lambda0_sq);
            (tau / hp.eta).ceil().max(1.0) as u64
        }
        (None, None) => return Err(Error::Config("schedule needs steps or horizon".into())),
    };
    Ok(Schedule { steps, record_every: (steps / cfg.schedule.records).max(1) })
}

pub(crate) fn measured_run(cfg: &ExperimentConfig, hp: &HyperParams, ds: &Dataset, rec: Recorders) -> Result<MeasuredRun> {
    let e = model::init_ensemble(hp)?;
    let h0 = kernel::gram_set(&e, hp.activation, ds, GramSource::Init)?.h;
    let lambda_min = kernel::min_eigenvalue(&h0)?;
    if lambda_min <= rec.lambda_tol {
        return Err(Error::AssumptionViolated(format!(
            "λ_min(H(p0)) = {lambda_min:e} is not positive (tolerance {:e})",
            rec.lambda_tol
        )));
    }
    let schedule = schedule_for(cfg, hp, lambda_min)?;
    let outcome = dynamics::train_from(e, hp, ds, schedule, rec)?;
    Ok(MeasuredRun { outcome, h0, lambda_min, schedule })
}

/// Largest increase of the recorded energy between consecutive records.
pub fn max_energy_increase(log: &dynamics::TrajectoryLog) -> f64 {
    log.records.windows(2).map(|w| w[1].energy - w[0].energy).fold(f64::NEG_INFINITY, f64::max)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Least-squares fit of `log y = a + b log x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Slope {
    pub slope: f64,
    pub stderr: f64,
    pub intercept: f64,
    pub points: usize,
}

/// `None` unless at least two points with positive finite coordinates exist.
pub fn loglog_fit(xs: &[f64], ys: &[f64]) -> Option<Slope> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|(x, y)| **x > 0.0 && **y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    let k = pts.len();
    if k < 2 {
        return None;
    }
    let kf = k as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / kf;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / kf;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let stderr = if k > 2 {
        let ssr: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
        (ssr / (kf - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    Some(Slope { slope, stderr, intercept, points: k })
}

/// Run `cfg.experiment` and write its artifacts into `out`. Returns the
/// paths written, in order.
pub fn execute(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let prov = Provenance::of(cfg)?;
    let mut written = Vec::new();
    match cfg.experiment {
        ExperimentKind::Train => train::write(&run_train(cfg)?, &prov, out, &mut written)?,
        ExperimentKind::Sweep => sweep::write(&run_sweep(cfg)?, &prov, out, &mut written)?,
        ExperimentKind::Generalize => generalize::write(&run_generalize(cfg)?, &prov, out, &mut written)?,
        ExperimentKind::Audit => write_file(out, "audits.json", &json_bytes(&prov, &run_audit(cfg)?)?, &mut written)?,
        ExperimentKind::Bounds => write_file(out, "bounds.json", &json_bytes(&prov, &run_bounds(cfg)?)?, &mut written)?,
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[f64::NAN, 1.0]), 1.0);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn loglog_fit_recovers_power_laws() {
        let xs = [2.0, 8.0, 32.0, 128.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-1.5)).collect();
        let fit = loglog_fit(&xs, &ys).unwrap();
        assert!((fit.slope + 1.5).abs() < 1e-12 && fit.stderr < 1e-12);
        assert!((fit.intercept - 3f64.ln()).abs() < 1e-12);
        let noisy = [0.5, 0.13, 0.031, 0.0079];
        let fit = loglog_fit(&xs, &noisy).unwrap();
        assert!(fit.stderr > 0.0 && fit.points == 4);
        assert!(loglog_fit(&[1.0], &[1.0]).is_none());
        assert_eq!(loglog_fit(&xs, &[1.0, -1.0, f64::NAN, 2.0]).unwrap().points, 2);
    }

    #[test]
    fn csv_header_lines() {
        let p = Provenance { experiment: "train", config_sha256: "ab".into(), seed: 7 };
        assert_eq!(p.csv_header(), "# mflab train\n# config_sha256: ab\n# seed: 7\n");
        let bytes = json_bytes(&p, &serde_json::json!({"x": 1})).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(v["provenance"]["seed"], 7);
        assert_eq!(v["x"], 1);
    }
}
