use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::plot::{Plot, Series, Style};
use super::{
    build_dataset, json_bytes, loglog_fit, max_energy_increase, measured_run, median, write_file, ExperimentConfig,
    Provenance, Slope,
};
use crate::dynamics::TrajectoryLog;
use crate::error::Result;

/// Terminal metrics of one (α, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub alpha: f64,
    pub seed: u64,
    pub steps: u64,
    pub lambda_min: f64,
    pub l0: f64,
    pub loss: f64,
    pub kernel_drift_inf: f64,
    pub residual_gap: f64,
    pub kl_surrogate: f64,
    pub w2_estimate: f64,
    pub max_energy_increase: f64,
    pub error: Option<String>,
}

/// Medians over seeds at one α.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub completed: usize,
    pub loss: f64,
    pub kernel_drift_inf: f64,
    pub residual_gap: f64,
    pub kl_surrogate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSlopes {
    pub kernel_drift_inf: Option<Slope>,
    pub residual_gap: Option<Slope>,
    pub kl_surrogate: Option<Slope>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub horizon: Option<f64>,
    pub rows: Vec<SweepRow>,
    pub slopes: SweepSlopes,
    pub failures: usize,
}

#[derive(Debug, Clone)]
pub struct SweepRun {
    pub report: SweepReport,
    pub cells: Vec<SweepCell>,
    /// Trajectory of each cell, `None` for failed cells.
    pub logs: Vec<Option<TrajectoryLog>>,
}

const CSV_COLUMNS: [&str; 12] = [
    "alpha",
    "seed",
    "steps",
    "lambda_min",
    "l0",
    "loss",
    "kernel_drift_inf",
    "residual_gap",
    "kl_surrogate",
    "w2_estimate",
    "max_energy_increase",
    "error",
];

/// Train every (α, seed) cell on one shared dataset to the configured
/// horizon and fit log-log slopes of the seed medians against α. A failed
/// cell is recorded with its error and left out of the medians.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepRun> {
    cfg.validate()?;
    let ds = build_dataset(cfg)?;
    let jobs: Vec<(f64, u64)> = cfg
        .sweep
        .alphas
        .iter()
        .flat_map(|&a| (0..cfg.sweep.seeds).map(move |s| (a, cfg.seed.wrapping_add(s))))
        .collect();
    let results: Vec<(SweepCell, Option<TrajectoryLog>)> = jobs
        .par_iter()
        .map(|&(alpha, seed)| {
            let hp = cfg.hyper(alpha, ds.n(), seed);
            let mut cell = SweepCell {
                alpha,
                seed,
                steps: 0,
                lambda_min: f64::NAN,
                l0: f64::NAN,
                loss: f64::NAN,
                kernel_drift_inf: f64::NAN,
                residual_gap: f64::NAN,
                kl_surrogate: f64::NAN,
                w2_estimate: f64::NAN,
                max_energy_increase: f64::NAN,
                error: None,
            };
            match measured_run(cfg, &hp, &ds, cfg.recorders) {
                Ok(run) => {
                    let log = run.outcome.log;
                    if let Some(last) = log.last() {
                        cell.loss = last.loss;
                        cell.kernel_drift_inf = last.kernel_drift_inf;
                        cell.residual_gap = last.residual_gap;
                        cell.kl_surrogate = last.kl_surrogate;
                        cell.w2_estimate = last.w2_estimate;
                    }
                    cell.steps = run.schedule.steps;
                    cell.lambda_min = run.lambda_min;
                    cell.l0 = run.outcome.init.loss;
                    cell.max_energy_increase = max_energy_increase(&log);
                    (cell, Some(log))
                }
                Err(e) => {
                    cell.error = Some(e.to_string());
                    (cell, None)
                }
            }
        })
        .collect();
    let (cells, logs): (Vec<_>, Vec<_>) = results.into_iter().unzip();

    let rows: Vec<SweepRow> = cfg
        .sweep
        .alphas
        .iter()
        .map(|&alpha| {
            let ok: Vec<&SweepCell> = cells.iter().filter(|c| c.alpha == alpha && c.error.is_none()).collect();
            let med = |f: fn(&SweepCell) -> f64| median(&ok.iter().map(|c| f(c)).collect::<Vec<_>>());
            SweepRow {
                alpha,
                completed: ok.len(),
                loss: med(|c| c.loss),
                kernel_drift_inf: med(|c| c.kernel_drift_inf),
                residual_gap: med(|c| c.residual_gap),
                kl_surrogate: med(|c| c.kl_surrogate),
            }
        })
        .collect();
    let alphas: Vec<f64> = rows.iter().map(|r| r.alpha).collect();
    let fit = |f: fn(&SweepRow) -> f64| loglog_fit(&alphas, &rows.iter().map(f).collect::<Vec<_>>());
    let slopes = SweepSlopes {
        kernel_drift_inf: fit(|r| r.kernel_drift_inf),
        residual_gap: fit(|r| r.residual_gap),
        kl_surrogate: fit(|r| r.kl_surrogate),
    };
    let failures = cells.iter().filter(|c| c.error.is_some()).count();
    Ok(SweepRun { report: SweepReport { horizon: cfg.schedule.horizon, rows, slopes, failures }, cells, logs })
}

fn slope_plot(run: &SweepRun, name: &str, metric: fn(&SweepCell) -> f64, fit: Option<Slope>) -> Plot {
    let mut series: Vec<Series> = run
        .report
        .rows
        .iter()
        .map(|row| {
            let pts = run.cells.iter().filter(|c| c.alpha == row.alpha).map(|c| (c.alpha, metric(c))).collect();
            Series::new(format!("α = {}", row.alpha), pts, Style::Markers)
        })
        .collect();
    let title = match fit {
        Some(f) => {
            let (lo, hi) = (run.report.rows[0].alpha, run.report.rows[run.report.rows.len() - 1].alpha);
            let line = |a: f64| (a, (f.intercept + f.slope * a.ln()).exp());
            series.push(Series::new(format!("fit, slope {:.3}", f.slope), vec![line(lo), line(hi)], Style::Dashed));
            format!("{name} vs α (slope {:.3} ± {:.3})", f.slope, f.stderr)
        }
        None => format!("{name} vs α"),
    };
    Plot { title, x_label: "α".into(), y_label: name.into(), log_x: true, log_y: true, series }
}

pub(super) fn write(
    run: &SweepRun,
    prov: &Provenance,
    out: &Path,
    written: &mut Vec<PathBuf>,
) -> Result<()> {
    let mut buf = prov.csv_header().into_bytes();
    {
        let mut wr = csv::Writer::from_writer(&mut buf);
        wr.write_record(CSV_COLUMNS)?;
        for c in &run.cells {
            let nums = [
                c.lambda_min,
                c.l0,
                c.loss,
                c.kernel_drift_inf,
                c.residual_gap,
                c.kl_surrogate,
                c.w2_estimate,
                c.max_energy_increase,
            ];
            let mut rec = vec![c.alpha.to_string(), c.seed.to_string(), c.steps.to_string()];
            rec.extend(nums.iter().map(|v| v.to_string()));
            rec.push(c.error.clone().unwrap_or_default());
            wr.write_record(&rec)?;
        }
        wr.flush().map_err(|e| crate::Error::io("sweep.csv", e))?;
    }
    write_file(out, "sweep.csv", &buf, written)?;
    write_file(out, "sweep_summary.json", &json_bytes(prov, &run.report)?, written)?;
    let s = &run.report.slopes;
    let plots = [
        ("sweep_kernel_drift.svg", slope_plot(run, "kernel drift", |c| c.kernel_drift_inf, s.kernel_drift_inf)),
        ("sweep_residual_gap.svg", slope_plot(run, "residual gap", |c| c.residual_gap, s.residual_gap)),
        ("sweep_kl.svg", slope_plot(run, "KL surrogate", |c| c.kl_surrogate, s.kl_surrogate)),
    ];
    for (file, plot) in plots {
        // A metric with no positive values (e.g. recorders disabled) has
        // nothing to plot on log axes.
        if let Ok(svg) = plot.render() {
            write_file(out, file, svg.as_bytes(), written)?;
        }
    }
    Ok(())
}
