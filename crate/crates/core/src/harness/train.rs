use std::path::{Path, PathBuf};

use serde::Serialize;

use super::plot::{Plot, Series, Style};
use super::{build_dataset, json_bytes, max_energy_increase, measured_run, write_file, ExperimentConfig, Provenance};
use crate::dynamics::TrainOutcome;
use crate::error::Result;
use crate::ntk_flow::NtkFlow;
use crate::theory::{self, TheoryConstants, TheoryInputs};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub alpha: f64,
    pub lambda: f64,
    pub eta: f64,
    pub steps: u64,
    pub record_every: u64,
    pub lambda_min: f64,
    pub l0: f64,
    pub constants: TheoryConstants,
    /// The width condition `α ≥ alpha_min` holds, so the bounds below are
    /// guaranteed and checking them is meaningful.
    pub condition_holds: bool,
    /// Largest ratio of measured loss to `2e^{−2α²λ0²t}L0 + floor`.
    pub worst_loss_ratio: f64,
    /// Largest ratio of the Gaussian KL surrogate to its bound.
    pub worst_kl_ratio: f64,
    /// `None` when the condition fails and nothing is asserted.
    pub loss_bound_respected: Option<bool>,
    pub kl_bound_respected: Option<bool>,
    pub max_energy_increase: f64,
    pub energy_monotone: bool,
    pub final_loss: f64,
    pub final_kl: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub report: TrainReport,
    pub outcome: TrainOutcome,
    pub flow: NtkFlow,
}

/// Train at `model.alpha` and compare the measured loss and KL with the
/// convergence bounds evaluated at the measured `λ_min(H(p0))`.
pub fn run_train(cfg: &ExperimentConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let ds = build_dataset(cfg)?;
    let hp = cfg.hyper(cfg.model.alpha, ds.n(), cfg.seed);
    let run = measured_run(cfg, &hp, &ds, cfg.recorders)?;
    let l0 = run.outcome.init.loss;
    let constants = TheoryInputs {
        g: hp.activation.constants(),
        sigma_u: hp.sigma_u,
        sigma_theta: hp.sigma_theta,
        d: hp.d,
        n: ds.n(),
        alpha: hp.alpha,
        lambda: hp.lambda,
        lambda_min: run.lambda_min,
        l0,
    }
    .constants()?;
    let kl_bound = theory::kl_bound(hp.alpha, hp.lambda, constants.lambda0, constants.a1, constants.a2, l0)?;
    let log = &run.outcome.log;
    let mut worst_loss_ratio = 0.0f64;
    let mut worst_kl_ratio = 0.0f64;
    for r in &log.records {
        let b = theory::loss_bound(r.t, hp.alpha, hp.lambda, constants.lambda0, constants.a1, l0)?;
        worst_loss_ratio = worst_loss_ratio.max(r.loss / b.value);
        worst_kl_ratio = worst_kl_ratio.max(r.kl_surrogate / kl_bound);
    }
    let condition_holds = hp.alpha >= constants.alpha_min;
    let assert = |ok: bool| condition_holds.then_some(ok);
    let max_inc = max_energy_increase(log);
    let (final_loss, final_kl) = log.last().map_or((f64::NAN, f64::NAN), |r| (r.loss, r.kl_surrogate));
    let flow = match run.outcome.init.ntk.clone() {
        Some(f) => f,
        None => NtkFlow::new(run.h0.clone(), ds.labels().to_vec(), hp.alpha)?,
    };
    let report = TrainReport {
        alpha: hp.alpha,
        lambda: hp.lambda,
        eta: hp.eta,
        steps: run.schedule.steps,
        record_every: run.schedule.record_every,
        lambda_min: run.lambda_min,
        l0,
        constants,
        condition_holds,
        worst_loss_ratio,
        worst_kl_ratio,
        loss_bound_respected: assert(worst_loss_ratio <= 1.0),
        kl_bound_respected: assert(worst_kl_ratio <= 1.0),
        max_energy_increase: max_inc,
        energy_monotone: max_inc <= cfg.tolerances.energy_rel * l0,
        final_loss,
        final_kl,
    };
    Ok(TrainRun { report, outcome: run.outcome, flow })
}

pub(super) fn write(run: &TrainRun, prov: &Provenance, out: &Path, written: &mut Vec<PathBuf>) -> Result<()> {
    let header = prov.csv_header();
    let log = &run.outcome.log;

    let mut buf = Vec::new();
    log.write_csv(&mut buf, &header)?;
    write_file(out, "trajectory.csv", &buf, written)?;

    let times: Vec<f64> = log.records.iter().map(|r| r.t).collect();
    let mut buf = Vec::new();
    run.flow.write_csv(&mut buf, &times, &header)?;
    write_file(out, "ntk_flow.csv", &buf, written)?;

    let mut buf = Vec::new();
    run.outcome.ensemble.write_snapshot(&mut buf).map_err(|e| crate::Error::io("ensemble.bin", e))?;
    write_file(out, "ensemble.bin", &buf, written)?;

    write_file(out, "train_report.json", &json_bytes(prov, &run.report)?, written)?;

    let r = &run.report;
    let bound: Vec<(f64, f64)> = log
        .records
        .iter()
        .filter_map(|rec| {
            theory::loss_bound(rec.t, r.alpha, r.lambda, r.constants.lambda0, r.constants.a1, r.l0)
                .ok()
                .map(|b| (rec.t, b.value))
        })
        .collect();
    let loss = Plot {
        title: format!("training loss, α = {}", r.alpha),
        x_label: "t".into(),
        y_label: "L(p_t)".into(),
        log_x: false,
        log_y: true,
        series: vec![
            Series::new("measured", log.records.iter().map(|rec| (rec.t, rec.loss)).collect(), Style::Line),
            Series::new("bound", bound, Style::Dashed),
        ],
    };
    write_file(out, "loss.svg", loss.render()?.as_bytes(), written)?;

    let kl = Plot {
        title: format!("Gaussian KL surrogate, α = {}", r.alpha),
        x_label: "t".into(),
        y_label: "KL(p_t ‖ p0)".into(),
        log_x: false,
        log_y: false,
        series: vec![Series::new("measured", log.records.iter().map(|rec| (rec.t, rec.kl_surrogate)).collect(), Style::Line)],
    };
    write_file(out, "kl.svg", kl.render()?.as_bytes(), written)?;
    Ok(())
}
