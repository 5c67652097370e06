use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use super::plot::{Plot, Series, Style};
use super::{json_bytes, median, write_file, ExperimentConfig, Provenance};
use crate::data::{make_synthetic, Dataset, SyntheticSpec};
use crate::dynamics::{self, Schedule};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model;
use crate::rng::{self, Domain};
use crate::theory::{self, PremisedBound};

/// One (n, seed) run: errors on its own training set and the shared test set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenCell {
    pub n: usize,
    pub seed: u64,
    pub train_ramp: f64,
    pub train_01: f64,
    pub test_ramp: f64,
    pub test_01: f64,
    pub final_loss: f64,
    pub kl_surrogate: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenRow {
    pub n: usize,
    pub completed: usize,
    pub train_01: f64,
    pub test_ramp: f64,
    pub test_01: f64,
    /// χ²-teacher bound for large α.
    pub chi2_bound: PremisedBound,
    /// KL-teacher bound; `None` for unbounded activations.
    pub kl_teacher_bound: Option<PremisedBound>,
    /// Median test 0-1 error within the χ² bound; `None` when its premises
    /// fail and nothing is claimed.
    pub within_chi2_bound: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenReport {
    pub alpha: f64,
    pub steps: u64,
    pub test_n: usize,
    pub teacher_chi2: f64,
    pub teacher_kl: f64,
    pub rows: Vec<GenRow>,
    pub cells: Vec<GenCell>,
    /// Median test 0-1 error strictly decreases along the n grid.
    pub test_error_decreasing: bool,
}

fn errors(outputs: &[f64], ds: &Dataset) -> (f64, f64) {
    let n = ds.n() as f64;
    let ramp = outputs.iter().zip(ds.labels()).map(|(f, y)| theory::ramp_loss(*f, *y)).sum::<f64>() / n;
    let zo = outputs.iter().zip(ds.labels()).map(|(f, y)| theory::zero_one_loss(*f, *y)).sum::<f64>() / n;
    (ramp, zo)
}

/// Teacher-student runs over the n grid. Seed `s` draws its own training
/// inputs, nested across n; all runs share one test set.
pub fn run_generalize(cfg: &ExperimentConfig) -> Result<GenReport> {
    cfg.validate()?;
    let teacher = cfg.teacher()?.ok_or_else(|| Error::Config("generalize needs a teacher".into()))?;
    let prior = cfg.prior();
    let (chi2, kl) = (teacher.chi2_to_init(&prior)?, teacher.kl_to_init(&prior)?);
    let mode = cfg.label_mode()?;
    let g = &cfg.generalize;
    let d = cfg.model.d;
    let test = make_synthetic(&SyntheticSpec {
        n: g.test_n,
        d,
        seed: rng::derive_seed(cfg.data.seed, Domain::Test, 0),
        mode: mode.clone(),
        distinct: false,
    })?;
    let alpha = cfg.model.alpha;
    let steps = cfg
        .schedule
        .steps
        .ok_or_else(|| Error::Config("generalize needs schedule.steps; a horizon depends on λ_min at large n".into()))?;
    let schedule = Schedule { steps, record_every: (steps / cfg.schedule.records).max(1) };

    let mut rec = cfg.recorders;
    // The Gram matrix and its eigendecomposition are O(n²m) and O(n³) at
    // every record; the generalization runs do not need them.
    rec.kernel = false;
    rec.w2_projections = 0;
    rec.reg_drift = false;

    let jobs: Vec<(usize, u64)> =
        g.n_grid.iter().flat_map(|&n| (0..g.seeds).map(move |s| (n, s))).collect();
    let cells: Vec<GenCell> = jobs
        .par_iter()
        .map(|&(n, s)| {
            let seed = cfg.seed.wrapping_add(s);
            let mut cell = GenCell {
                n,
                seed,
                train_ramp: f64::NAN,
                train_01: f64::NAN,
                test_ramp: f64::NAN,
                test_01: f64::NAN,
                final_loss: f64::NAN,
                kl_surrogate: f64::NAN,
                error: None,
            };
            let mut run = || -> Result<()> {
                let ds = make_synthetic(&SyntheticSpec {
                    n,
                    d,
                    seed: rng::derive_seed(cfg.data.seed, Domain::Data, s),
                    mode: mode.clone(),
                    distinct: cfg.data.distinct,
                })?;
                let hp = cfg.hyper(alpha, n, seed);
                let out = dynamics::train(&hp, &ds, schedule, rec)?;
                (cell.train_ramp, cell.train_01) = errors(&out.outputs, &ds);
                let f_test = model::outputs(&out.ensemble, &hp, &test)?;
                (cell.test_ramp, cell.test_01) = errors(&f_test, &test);
                cell.final_loss = model::loss(&out.ensemble, &hp, &ds)?;
                cell.kl_surrogate = metrics::kl_gaussian_full(&out.ensemble, &hp)?;
                Ok(())
            };
            if let Err(e) = run() {
                cell.error = Some(e.to_string());
            }
            cell
        })
        .collect();

    let act = cfg.model.activation;
    let gc = act.constants();
    let mut rows = Vec::new();
    for &n in &g.n_grid {
        let ok: Vec<&GenCell> = cells.iter().filter(|c| c.n == n && c.error.is_none()).collect();
        let med = |f: fn(&GenCell) -> f64| median(&ok.iter().map(|c| f(c)).collect::<Vec<_>>());
        let chi2_bound = theory::gen_bound_chi2(
            &gc,
            prior.sigma_u,
            prior.sigma_theta,
            d,
            chi2,
            alpha,
            cfg.model.lambda,
            n,
            g.delta,
        )?;
        let kl_teacher_bound = match theory::gen_bound_kl_teacher(kl, alpha, n, g.delta, gc.g7, prior.sigma_u, cfg.model.lambda) {
            Ok(b) => Some(b),
            Err(Error::UnboundedActivation(_)) => None,
            Err(e) => return Err(e),
        };
        let test_01 = med(|c| c.test_01);
        rows.push(GenRow {
            n,
            completed: ok.len(),
            train_01: med(|c| c.train_01),
            test_ramp: med(|c| c.test_ramp),
            test_01,
            within_chi2_bound: chi2_bound.premises_hold.then_some(test_01 <= chi2_bound.value),
            chi2_bound,
            kl_teacher_bound,
        });
    }
    let test_error_decreasing = rows.windows(2).all(|w| w[1].test_01 < w[0].test_01);
    Ok(GenReport { alpha, steps, test_n: g.test_n, teacher_chi2: chi2, teacher_kl: kl, rows, cells, test_error_decreasing })
}

pub(super) fn write(report: &GenReport, prov: &Provenance, out: &Path, written: &mut Vec<PathBuf>) -> Result<()> {
    let mut buf = prov.csv_header().into_bytes();
    {
        let mut wr = csv::Writer::from_writer(&mut buf);
        wr.write_record(["n", "seed", "train_ramp", "train_01", "test_ramp", "test_01", "final_loss", "kl_surrogate", "error"])?;
        for c in &report.cells {
            let mut rec = vec![c.n.to_string(), c.seed.to_string()];
            rec.extend(
                [c.train_ramp, c.train_01, c.test_ramp, c.test_01, c.final_loss, c.kl_surrogate].iter().map(|v| v.to_string()),
            );
            rec.push(c.error.clone().unwrap_or_default());
            wr.write_record(&rec)?;
        }
        wr.flush().map_err(|e| Error::io("generalize.csv", e))?;
    }
    write_file(out, "generalize.csv", &buf, written)?;
    write_file(out, "generalize.json", &json_bytes(prov, report)?, written)?;

    let pts = |f: fn(&GenRow) -> f64| report.rows.iter().map(|r| (r.n as f64, f(r))).collect::<Vec<_>>();
    let plot = Plot {
        title: format!("teacher-student errors, α = {}", report.alpha),
        x_label: "n".into(),
        y_label: "error".into(),
        log_x: true,
        log_y: false,
        series: vec![
            Series::new("test 0-1 (median)", pts(|r| r.test_01), Style::Line),
            Series::new("test ramp (median)", pts(|r| r.test_ramp), Style::Line),
            Series::new("train 0-1 (median)", pts(|r| r.train_01), Style::Dashed),
        ],
    };
    write_file(out, "generalize.svg", plot.render()?.as_bytes(), written)?;
    Ok(())
}
