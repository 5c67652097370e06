//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 3 9`.

use std::cell::OnceCell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use mflab_core::activation::Activation;
use mflab_core::data::{make_synthetic, Dataset, LabelMode, SyntheticSpec};
use mflab_core::eigen::symmetric_eigen;
use mflab_core::harness::{self, ExperimentConfig, ExperimentKind, SweepRun};
use mflab_core::kernel::{gram_set, GramSource};
use mflab_core::metrics::{talagrand_audit, tail_bound_audit};
use mflab_core::model::{self, Ensemble, GaussianPrior, GradScaling, HyperParams, InitScheme, NoiseConvention};
use mflab_core::ntk_flow::NtkFlow;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

#[derive(Default)]
struct Ctx {
    /// Preset sweep with weight decay, `λ = 1e-3`.
    noisy: OnceCell<SweepRun>,
    /// Preset sweep without weight decay or noise, `λ = 0`.
    plain: OnceCell<SweepRun>,
}

fn preset_sweep(lambda: f64) -> SweepRun {
    let mut cfg = ExperimentConfig::preset(ExperimentKind::Sweep);
    cfg.model.lambda = lambda;
    harness::run_sweep(&cfg).expect("preset sweep")
}

impl Ctx {
    fn noisy(&self) -> &SweepRun {
        self.noisy.get_or_init(|| preset_sweep(1e-3))
    }

    fn plain(&self) -> &SweepRun {
        self.plain.get_or_init(|| preset_sweep(0.0))
    }
}

fn hyper(act: Activation, d: usize, m: usize, n: usize, alpha: f64, lambda: f64) -> HyperParams {
    HyperParams {
        alpha,
        lambda,
        sigma_u: 1.0,
        sigma_theta: 1.0,
        eta: 0.01,
        d,
        m,
        n,
        seed: 0,
        activation: act,
        grad_scaling: GradScaling::Meanfield,
        noise: NoiseConvention::StdDev,
        init: InitScheme::Iid,
    }
}

fn dataset(n: usize, d: usize, seed: u64) -> Dataset {
    make_synthetic(&SyntheticSpec { n, d, seed, mode: LabelMode::Rademacher, distinct: true }).unwrap()
}

fn c1_gradients(_: &Ctx) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (d, m, n) = (3, 6, 5);
    let mut worst = 0.0f64;
    for state in 0..100 {
        let act = [Activation::Tanh, Activation::Sigmoid, Activation::Softplus, Activation::Identity][state % 4];
        let hp = hyper(act, d, m, n, rng.random_range(0.5..4.0), rng.random_range(0.0..0.5));
        let ds = dataset(n, d, state as u64);
        let thetas: Vec<f64> = (0..m * d).map(|_| rng.sample(StandardNormal)).collect();
        let us: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
        let e = Ensemble::new(d, thetas.clone(), us.clone()).unwrap();
        let g = model::grads(&e, &hp, &ds).unwrap();
        let q = |t: &[f64], u: &[f64]| model::objective(&Ensemble::new(d, t.to_vec(), u.to_vec()).unwrap(), &hp, &ds).unwrap();
        let h = 1e-5;
        for j in 0..m {
            // Analytic gradients are m·∇Q̂.
            let mut analytic: Vec<f64> = g.dtheta[j * d..(j + 1) * d].to_vec();
            analytic.push(g.du[j]);
            let mut numeric = Vec::with_capacity(d + 1);
            for k in 0..=d {
                let (mut tp, mut tm, mut up, mut um) = (thetas.clone(), thetas.clone(), us.clone(), us.clone());
                if k < d {
                    tp[j * d + k] += h;
                    tm[j * d + k] -= h;
                } else {
                    up[j] += h;
                    um[j] -= h;
                }
                numeric.push(m as f64 * (q(&tp, &up) - q(&tm, &um)) / (2.0 * h));
            }
            let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-8);
            worst = worst.max(diff / norm);
        }
    }
    check(worst <= 1e-5, format!("worst relative error {worst:.2e} over 100 states (limit 1e-5)"))
}

fn c2_gram_oracle(_: &Ctx) -> Outcome {
    let (d, n, m) = (3, 4, 1_000_000);
    let mut hp = hyper(Activation::Identity, d, m, n, 1.0, 0.0);
    hp.seed = 1;
    let ds = dataset(n, d, 5);
    let e = model::init_ensemble(&hp).unwrap();
    let g = gram_set(&e, Activation::Identity, &ds, GramSource::Init).unwrap();
    let dot = |i: usize, j: usize| ds.x(i).iter().zip(ds.x(j)).map(|(a, b)| a * b).sum::<f64>();
    let sq = |i: usize| dot(i, i);
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..=i {
            let c = dot(i, j);
            // u² has variance 2σ⁴; (θᵀx_i)(θᵀx_j) has variance ‖x_i‖²‖x_j‖² + ⟨x_i, x_j⟩².
            let se1 = (2.0f64).sqrt() * c.abs() / (m as f64).sqrt();
            let se2 = ((sq(i) * sq(j) + c * c) / m as f64).sqrt();
            if se1 > 0.0 {
                worst = worst.max((g.h1.get(i, j) - c).abs() / se1);
            }
            worst = worst.max((g.h2.get(i, j) - c).abs() / se2);
        }
    }
    check(worst <= 3.0, format!("largest deviation {worst:.2} standard errors over H1 and H2 entries, m = 10^6"))
}

/// Smallest root of the characteristic polynomial, independent of the solver.
fn closed_form_min(a: &[f64], n: usize) -> f64 {
    if n == 2 {
        let (p, q, r) = (a[0], a[1], a[3]);
        return 0.5 * (p + r) - (0.25 * (p - r) * (p - r) + q * q).sqrt();
    }
    let p1 = a[1] * a[1] + a[2] * a[2] + a[5] * a[5];
    let q = (a[0] + a[4] + a[8]) / 3.0;
    if p1 == 0.0 {
        return a[0].min(a[4]).min(a[8]);
    }
    let p2 = (a[0] - q).powi(2) + (a[4] - q).powi(2) + (a[8] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let b: Vec<f64> = (0..9).map(|k| (a[k] - if k % 4 == 0 { q } else { 0.0 }) / p).collect();
    let det = b[0] * (b[4] * b[8] - b[5] * b[7]) - b[1] * (b[3] * b[8] - b[5] * b[6]) + b[2] * (b[3] * b[7] - b[4] * b[6]);
    let phi = (det / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
    q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos()
}

fn c3_eigensolver(_: &Ctx) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for k in 0..1000 {
        let n = 2 + k % 2;
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v: f64 = rng.random_range(-1.0..1.0);
                a[i * n + j] = v;
                a[j * n + i] = v;
            }
        }
        let got = symmetric_eigen(&a, n).unwrap().min();
        let want = closed_form_min(&a, n);
        let scale = a.iter().map(|v| v.abs()).fold(0.0, f64::max);
        worst = worst.max((got - want).abs() / want.abs().max(scale * 1e-6));
    }
    check(worst <= 1e-10, format!("worst relative error {worst:.2e} over 1000 matrices"))
}

fn c4_ntk_flow(_: &Ctx) -> Outcome {
    let (d, n) = (3, 6);
    let hp = hyper(Activation::Tanh, d, 2048, n, 1.5, 0.0);
    let ds = dataset(n, d, 7);
    let e = model::init_ensemble(&hp).unwrap();
    let h0 = gram_set(&e, hp.activation, &ds, GramSource::Init).unwrap().h;
    let flow = NtkFlow::new(h0.clone(), ds.labels().to_vec(), hp.alpha).unwrap();
    let mut ode = 0.0f64;
    let dt = 1e-5;
    for &t in &[0.05, 0.3, 1.0, 3.0] {
        let (fp, fm, f) = (flow.closed_form(t + dt).unwrap(), flow.closed_form(t - dt).unwrap(), flow.closed_form(t).unwrap());
        let deriv: Vec<f64> = fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * dt)).collect();
        let rhs: Vec<f64> = (0..n)
            .map(|i| -flow.rate() * (0..n).map(|j| h0.get(i, j) * (f[j] - ds.labels()[j])).sum::<f64>())
            .collect();
        let err = deriv.iter().zip(&rhs).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        ode = ode.max(err / rhs.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    let horizon = 1.0;
    let gap = |eta: f64| {
        let steps = (horizon / eta).round() as usize;
        flow.euler(eta, steps)
            .unwrap()
            .iter()
            .enumerate()
            .map(|(k, f)| {
                let g = flow.closed_form(k as f64 * eta).unwrap();
                f.iter().zip(&g).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    };
    let eta = 0.2 * flow.max_stable_eta();
    let ratio = gap(eta) / gap(eta / 2.0);
    check(
        ode <= 1e-5 && (ratio - 2.0).abs() <= 0.4,
        format!("ODE residual {ode:.2e} (limit 1e-5), Euler gap ratio on halving η {ratio:.3} (target 2 ± 0.4)"),
    )
}

fn c5_linear_convergence(ctx: &Ctx) -> Outcome {
    let run = ctx.plain();
    let alpha = 32.0;
    let mut worst = 0.0f64;
    let mut seeds = 0;
    for (cell, log) in run.cells.iter().zip(&run.logs) {
        if cell.alpha != alpha {
            continue;
        }
        let log = log.as_ref().ok_or_else(|| format!("seed {} failed: {:?}", cell.seed, cell.error))?;
        let lambda0_sq = cell.lambda_min / 8.0;
        for r in &log.records {
            let bound = 2.0 * (-2.0 * alpha * alpha * lambda0_sq * r.t).exp() * cell.l0;
            worst = worst.max(r.loss / (1.5 * bound));
        }
        seeds += 1;
    }
    check(
        seeds == 5 && worst <= 1.0,
        format!("λ = 0, α = 32, {seeds} seeds: max loss / (1.5·2e^(-2α²λ0²t)L0) = {worst:.3}"),
    )
}

fn slope_line(run: &SweepRun, name: &str, slope: Option<harness::Slope>, lo: f64, hi: f64, metric: fn(&harness::SweepRow) -> f64) -> Outcome {
    let medians: Vec<String> = run.report.rows.iter().map(|r| format!("{}:{:.3e}", r.alpha, metric(r))).collect();
    match slope {
        Some(s) => check(
            (lo..=hi).contains(&s.slope),
            format!("{name} slope {:.3} ± {:.3} (band [{lo}, {hi}]); medians {}", s.slope, s.stderr, medians.join(" ")),
        ),
        None => Err(format!("{name}: no slope could be fitted; medians {}", medians.join(" "))),
    }
}

fn c6_kernel_drift(ctx: &Ctx) -> Outcome {
    let run = ctx.noisy();
    slope_line(run, "kernel drift", run.report.slopes.kernel_drift_inf, -1.3, -0.7, |r| r.kernel_drift_inf)
}

fn c7_residual_gap(ctx: &Ctx) -> Outcome {
    let run = ctx.plain();
    slope_line(run, "residual gap (λ = 0)", run.report.slopes.residual_gap, -2.5, -1.5, |r| r.residual_gap)
}

fn c8_kl(ctx: &Ctx) -> Outcome {
    let run = ctx.noisy();
    slope_line(run, "KL surrogate (λ = 1e-3)", run.report.slopes.kl_surrogate, -2.5, -1.5, |r| r.kl_surrogate)
}

fn c9_noise(_: &Ctx) -> Outcome {
    let c = harness::noise_calibration(1e-3, 5e-4, NoiseConvention::StdDev, 100_000, 9, 0.05).map_err(|e| e.to_string())?;
    check(
        c.pass,
        format!(
            "expected 2λη = {:.3e}, measured {:?}, worst relative error {:.2}%",
            c.expected_variance,
            c.measured_variance.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>(),
            100.0 * c.worst_rel_error
        ),
    )
}

fn c10_talagrand(_: &Ctx) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut failures = 0;
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let prior = GaussianPrior { sigma_u: rng.random_range(0.2..3.0), sigma_theta: rng.random_range(0.2..3.0) };
        let dim = rng.random_range(2..8);
        let scales = prior.scales(dim - 1);
        let mean: Vec<f64> = scales.iter().map(|s| s * rng.random_range(-2.0..2.0)).collect();
        let var: Vec<f64> = scales.iter().map(|s| s * s * rng.random_range(0.05..3.0)).collect();
        let a = talagrand_audit(&mean, &var, &prior).map_err(|e| e.to_string())?;
        failures += usize::from(!a.pass);
        worst = worst.max(a.lhs / a.rhs);
    }
    check(failures == 0, format!("{failures} failures in 10^4 cases; worst W2 / (2 max σ √KL) = {worst:.3}"))
}

fn c11_tail(_: &Ctx) -> Outcome {
    let sigma = 1.3;
    let grid: Vec<f64> = (0..100).map(|k| 8.0 * k as f64 / 99.0).collect();
    let audit = tail_bound_audit(sigma, &grid, 1_000_000, 11).map_err(|e| e.to_string())?;
    let r0 = &audit.rows[0];
    let exact_at_zero = r0.lhs_exact == sigma * sigma;
    check(
        audit.corrected_pass() && r0.quarter_violated && exact_at_zero,
        format!(
            "corrected 2σ² constant passes on {} radii: {}; σ²/2 constant violated at r = 0: {} (LHS = {} = σ²: {})",
            grid.len(),
            audit.corrected_pass(),
            r0.quarter_violated,
            r0.lhs_exact,
            exact_at_zero
        ),
    )
}

fn c12_energy(ctx: &Ctx) -> Outcome {
    let mut worst = f64::NEG_INFINITY;
    let mut count = 0;
    for run in [ctx.noisy(), ctx.plain()] {
        for (cell, log) in run.cells.iter().zip(&run.logs) {
            let log = log.as_ref().ok_or_else(|| format!("α = {} seed {} failed", cell.alpha, cell.seed))?;
            worst = worst.max(harness::max_energy_increase(log) / (1e-3 * cell.l0));
            count += 1;
        }
    }
    check(worst <= 1.0, format!("{count} trajectories; largest increase / (1e-3·L0) = {worst:.3}"))
}

fn c13_generalization(_: &Ctx) -> Outcome {
    let report = harness::run_generalize(&ExperimentConfig::generalize_preset()).map_err(|e| e.to_string())?;
    let rows: Vec<String> = report
        .rows
        .iter()
        .map(|r| {
            format!(
                "n={} test0-1={:.4} bound={:.2}{}",
                r.n,
                r.test_01,
                r.chi2_bound.value,
                if r.chi2_bound.vacuous { " (vacuous)" } else { "" }
            )
        })
        .collect();
    let bounds_ok = report.rows.iter().all(|r| r.chi2_bound.value.is_finite() && r.within_chi2_bound != Some(false));
    check(report.test_error_decreasing && bounds_ok, rows.join(", "))
}

fn tiny(kind: ExperimentKind) -> ExperimentConfig {
    let mut cfg = if kind == ExperimentKind::Generalize {
        ExperimentConfig::generalize_preset()
    } else {
        ExperimentConfig::preset(kind)
    };
    cfg.model.m = 1024;
    cfg.schedule.steps = Some(60);
    cfg.schedule.horizon = None;
    cfg.schedule.records = 6;
    cfg.sweep.seeds = 2;
    cfg.generalize.n_grid = vec![20, 60];
    cfg.generalize.seeds = 2;
    cfg.generalize.test_n = 300;
    cfg.audit.talagrand_cases = 500;
    cfg.audit.tail_points = 20;
    cfg.audit.noise_steps = 20_000;
    cfg
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn c14_determinism(_: &Ctx) -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let kinds = [ExperimentKind::Train, ExperimentKind::Sweep, ExperimentKind::Generalize, ExperimentKind::Audit, ExperimentKind::Bounds];
    let mut compared = 0;
    for kind in kinds {
        let cfg = tiny(kind);
        let mut runs = Vec::new();
        for (k, threads) in [1usize, 4, 1].into_iter().enumerate() {
            let out = root.path().join(format!("{}-{k}", kind.name()));
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| harness::execute(&cfg, &out)).map_err(|e| format!("{}: {e}", kind.name()))?;
            runs.push(snapshot(&out));
        }
        for other in &runs[1..] {
            if *other != runs[0] {
                return Err(format!("{} artifacts differ between runs", kind.name()));
            }
        }
        compared += runs[0].len();
    }
    Ok(format!("{compared} artifacts byte-identical across 3 runs (1, 4 and 1 worker threads)"))
}

type Criterion = (u32, &'static str, fn(&Ctx) -> Outcome);

const CRITERIA: [Criterion; 14] = [
    (1, "gradient correctness", c1_gradients),
    (2, "Gram-matrix oracle", c2_gram_oracle),
    (3, "eigensolver", c3_eigensolver),
    (4, "NTK flow consistency", c4_ntk_flow),
    (5, "linear-convergence shape", c5_linear_convergence),
    (6, "alpha-scaling of kernel drift", c6_kernel_drift),
    (7, "alpha-scaling of NTK gap", c7_residual_gap),
    (8, "alpha-scaling of KL surrogate", c8_kl),
    (9, "noise calibration", c9_noise),
    (10, "Talagrand audit", c10_talagrand),
    (11, "tail-bound audit", c11_tail),
    (12, "energy monotonicity", c12_energy),
    (13, "generalization trend", c13_generalization),
    (14, "determinism", c14_determinism),
];

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let ctx = Ctx::default();
    let mut failed = Vec::new();
    for (id, name, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| run(&ctx))).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                println!("criterion {id:>2} FAIL  {name}: {detail} [{secs:.1}s]");
                failed.push(id);
            }
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
