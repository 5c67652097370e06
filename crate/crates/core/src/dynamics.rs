//! Noisy gradient descent with weight decay, and trajectory recording.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernel::{self, GramMatrix, GramSource};
use crate::metrics;
use crate::model::{self, Activations, Ensemble, HyperParams, InitScheme, PARTICLE_CHUNK};
use crate::ntk_flow::{self, NtkFlow};
use crate::rng::{self, CounterRng, Domain};

/// Runs are aborted once any `|u_j|` or `‖θ_j‖` exceeds this.
pub const DIVERGENCE_LIMIT: f64 = 1e8;

/// Advance the ensemble by one update, in place:
/// `u ← u − η·du + s·ξ_u`, `θ ← θ − η·dθ + s·ξ_θ` with `s` the noise
/// standard deviation. Draws come from `noise` addressed by
/// `(generation, particle, coordinate)`. Returns the outputs and the loss
/// evaluated before the update.
pub fn step(e: &mut Ensemble, hp: &HyperParams, ds: &Dataset, noise: &CounterRng) -> Result<(Vec<f64>, f64)> {
    if ds.d() != e.d() {
        return Err(Error::DimensionMismatch { expected: e.d(), got: ds.d() });
    }
    let acts = Activations::compute(e, hp.activation, ds);
    let f = acts.outputs(e.us(), hp.alpha);
    let r: Vec<f64> = f.iter().zip(ds.labels()).map(|(a, b)| a - b).collect();
    let loss = model::mean_sq_residual(&f, ds.labels());
    let g = model::grads_from(e, hp, ds, &acts, &r);
    let gen = e.generation;
    if g.du.iter().chain(&g.dtheta).any(|v| !v.is_finite()) {
        return Err(Error::Diverged { step: gen, reason: "non-finite gradient".into() });
    }
    let (lr, s, d) = (hp.drift_step(), hp.noise_std(), e.d());
    let (thetas, us) = e.parts_mut();
    let blew_up = thetas
        .par_chunks_mut(PARTICLE_CHUNK * d)
        .zip(us.par_chunks_mut(PARTICLE_CHUNK))
        .zip(g.dtheta.par_chunks(PARTICLE_CHUNK * d).zip(g.du.par_chunks(PARTICLE_CHUNK)))
        .enumerate()
        .map(|(c, ((tc, uc), (gtc, guc)))| {
            let mut xi = vec![0.0; d + 1];
            let mut bad = false;
            for (jj, (th, u)) in tc.chunks_mut(d).zip(uc.iter_mut()).enumerate() {
                let gt = &gtc[jj * d..(jj + 1) * d];
                if s > 0.0 {
                    noise.fill_normals(gen, (c * PARTICLE_CHUNK + jj) as u64, &mut xi);
                }
                let mut norm2 = 0.0;
                for k in 0..d {
                    th[k] += -lr * gt[k] + s * xi[k];
                    norm2 += th[k] * th[k];
                }
                *u += -lr * guc[jj] + s * xi[d];
                bad |= !(u.abs() <= DIVERGENCE_LIMIT && norm2 <= DIVERGENCE_LIMIT * DIVERGENCE_LIMIT);
            }
            bad
        })
        .reduce(|| false, |a, b| a || b);
    e.generation += 1;
    if blew_up {
        return Err(Error::Diverged { step: gen, reason: format!("a particle left the ball of radius {DIVERGENCE_LIMIT:e}") });
    }
    Ok((f, loss))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub steps: u64,
    pub record_every: u64,
}

/// Which per-record metrics to evaluate; disabled columns are written as NaN.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Recorders {
    /// Kernel drift and NTK residual gap; both need the Gram matrix at init.
    pub kernel: bool,
    /// Directions for the sliced W2 estimate; 0 disables it.
    pub w2_projections: usize,
    pub reg_drift: bool,
    /// Tolerance below which `λ_min(H(p0))` counts as zero.
    pub lambda_tol: f64,
}

impl Default for Recorders {
    fn default() -> Self {
        Recorders { kernel: true, w2_projections: 64, reg_drift: true, lambda_tol: 1e-10 }
    }
}

impl Recorders {
    pub fn minimal() -> Self {
        Recorders { kernel: false, w2_projections: 0, reg_drift: false, lambda_tol: 1e-10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: u64,
    pub t: f64,
    pub loss: f64,
    pub objective: f64,
    pub kl_surrogate: f64,
    pub w2_estimate: f64,
    pub kernel_drift_inf: f64,
    pub residual_gap: f64,
    pub energy: f64,
    pub reg_drift_norm: f64,
}

pub const TRAJECTORY_COLUMNS: [&str; 10] = [
    "step",
    "t",
    "loss",
    "objective",
    "kl_surrogate",
    "w2_estimate",
    "kernel_drift_inf",
    "residual_gap",
    "energy",
    "reg_drift_norm",
];

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub eta: f64,
    pub records: Vec<TrajectoryRecord>,
}

impl TrajectoryLog {
    pub fn last(&self) -> Option<&TrajectoryRecord> {
        self.records.last()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// CSV with the column order of [`TRAJECTORY_COLUMNS`], preceded by
    /// `header` (comment lines) verbatim.
    pub fn write_csv<W: Write>(&self, mut w: W, header: &str) -> Result<()> {
        w.write_all(header.as_bytes()).map_err(|e| Error::io("trajectory.csv", e))?;
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(TRAJECTORY_COLUMNS)?;
        for r in &self.records {
            let vals = [
                r.t,
                r.loss,
                r.objective,
                r.kl_surrogate,
                r.w2_estimate,
                r.kernel_drift_inf,
                r.residual_gap,
                r.energy,
                r.reg_drift_norm,
            ];
            wr.write_record(std::iter::once(r.step.to_string()).chain(vals.iter().map(|v| v.to_string())))?;
        }
        wr.flush().map_err(|e| Error::io("trajectory.csv", e))?;
        Ok(())
    }
}

/// Quantities fixed at initialization that the recorders compare against.
#[derive(Debug, Clone)]
pub struct InitState {
    pub loss: f64,
    pub h0: Option<GramMatrix>,
    /// `λ_min(H(p0))` of the initial ensemble.
    pub lambda_min: Option<f64>,
    pub ntk: Option<NtkFlow>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: TrajectoryLog,
    pub init: InitState,
    pub ensemble: Ensemble,
    /// Network outputs on the training inputs after the last step.
    pub outputs: Vec<f64>,
}

/// The fixed draw from `p0` that W2-to-init is measured against. It depends
/// only on the seed and the ensemble shape.
pub fn reference_sample(hp: &HyperParams) -> Result<Ensemble> {
    let mut h = hp.clone();
    h.seed = rng::derive_seed(hp.seed, Domain::Reference, 0);
    h.init = InitScheme::Iid;
    model::init_ensemble(&h)
}

struct Recording<'a> {
    hp: &'a HyperParams,
    ds: &'a Dataset,
    rec: Recorders,
    init: InitState,
    reference: Option<Vec<f64>>,
}

impl Recording<'_> {
    fn record(&self, e: &Ensemble) -> Result<TrajectoryRecord> {
        let (hp, ds) = (self.hp, self.ds);
        let f = model::outputs(e, hp, ds)?;
        let loss = model::mean_sq_residual(&f, ds.labels());
        let step = e.generation;
        let kl = metrics::kl_gaussian_full(e, hp)?;
        let w2 = match &self.reference {
            Some(r) => metrics::w2_sliced(&e.points(), r, e.d() + 1, self.rec.w2_projections, hp.seed)?,
            None => f64::NAN,
        };
        let (drift, gap) = match (&self.init.h0, &self.init.ntk) {
            (Some(h0), Some(flow)) => {
                let ht = kernel::gram_set(e, hp.activation, ds, GramSource::Step(step))?.h;
                let drift = kernel::kernel_drift(&ht, h0)?.inf_inf;
                // Beyond the Euler stability limit the linearized iterates
                // blow up and the gap is not meaningful.
                let gap = match flow.euler_at(hp.drift_step(), step) {
                    Ok(f_lin) => ntk_flow::residual_gap(&f, &f_lin)?,
                    Err(_) => f64::NAN,
                };
                (drift, gap)
            }
            _ => (f64::NAN, f64::NAN),
        };
        let reg = if self.rec.reg_drift {
            kernel::reg_drift(e, hp, ds)?.iter().map(|v| v * v).sum::<f64>().sqrt()
        } else {
            f64::NAN
        };
        let energy = if hp.lambda == 0.0 { loss } else { loss + hp.lambda * kl };
        Ok(TrajectoryRecord {
            step,
            t: step as f64 * hp.eta,
            loss,
            objective: loss + model::regularizer(e, hp),
            kl_surrogate: kl,
            w2_estimate: w2,
            kernel_drift_inf: drift,
            residual_gap: gap,
            energy,
            reg_drift_norm: reg,
        })
    }
}

/// Train from a fresh initial ensemble for `schedule.steps` updates,
/// recording at step 0, every `record_every` steps, and at the end.
///
/// The residual gap compares against the forward-Euler discretization of
/// the linearized flow at the same step size, which is what the particle
/// update linearizes to; both coincide with the continuous flow as `η → 0`.
pub fn train(hp: &HyperParams, ds: &Dataset, schedule: Schedule, rec: Recorders) -> Result<TrainOutcome> {
    hp.validate()?;
    train_from(model::init_ensemble(hp)?, hp, ds, schedule, rec)
}

pub fn train_from(
    mut e: Ensemble,
    hp: &HyperParams,
    ds: &Dataset,
    schedule: Schedule,
    rec: Recorders,
) -> Result<TrainOutcome> {
    hp.validate()?;
    if schedule.steps == 0 || schedule.record_every == 0 {
        return Err(Error::InvalidInput("steps and record_every must be at least 1".into()));
    }
    if ds.n() == 0 {
        return Err(Error::EmptyDataset);
    }
    if ds.d() != hp.d || e.d() != hp.d {
        return Err(Error::DimensionMismatch { expected: hp.d, got: ds.d() });
    }
    let loss0 = model::loss(&e, hp, ds)?;
    let (h0, lambda_min, ntk) = if rec.kernel {
        let h0 = kernel::gram_set(&e, hp.activation, ds, GramSource::Init)?.h;
        let flow = NtkFlow::new(h0.clone(), ds.labels().to_vec(), hp.alpha)?;
        let lam = flow.eig.min();
        if lam <= rec.lambda_tol {
            return Err(Error::AssumptionViolated(format!(
                "λ_min(H(p0)) = {lam:e} is not positive (tolerance {:e})",
                rec.lambda_tol
            )));
        }
        (Some(h0), Some(lam), Some(flow))
    } else {
        (None, None, None)
    };
    let reference = if rec.w2_projections > 0 { Some(reference_sample(hp)?.points()) } else { None };
    let recording = Recording { hp, ds, rec, init: InitState { loss: loss0, h0, lambda_min, ntk }, reference };

    let noise = CounterRng::new(hp.seed, Domain::Noise);
    let mut records = Vec::new();
    for k in 0..schedule.steps {
        if k % schedule.record_every == 0 {
            records.push(recording.record(&e)?);
        }
        step(&mut e, hp, ds, &noise)?;
    }
    let last = recording.record(&e)?;
    records.push(last);
    let outputs = model::outputs(&e, hp, ds)?;
    Ok(TrainOutcome { log: TrajectoryLog { eta: hp.eta, records }, init: recording.init, ensemble: e, outputs })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    /// Median loss over the last 10% of records.
    pub plateau: f64,
    /// First recorded step whose loss is within twice the plateau.
    pub entry_step: u64,
}

pub fn stationarity_diagnostic(log: &TrajectoryLog) -> Result<StationarityReport> {
    let n = log.records.len();
    if n < 20 {
        return Err(Error::InvalidInput(format!("stationarity diagnostic needs at least 20 records, got {n}")));
    }
    let tail = (n / 10).max(1);
    let mut last: Vec<f64> = log.records[n - tail..].iter().map(|r| r.loss).collect();
    last.sort_by(f64::total_cmp);
    let plateau = if tail % 2 == 1 { last[tail / 2] } else { 0.5 * (last[tail / 2 - 1] + last[tail / 2]) };
    let entry_step = log.records.iter().find(|r| r.loss <= 2.0 * plateau).map_or(log.records[n - 1].step, |r| r.step);
    Ok(StationarityReport { plateau, entry_step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::Activation;
    use crate::data::{make_synthetic, DatasetMeta, LabelMode, SyntheticSpec};
    use crate::model::{init_ensemble, GradScaling, NoiseConvention};

    fn hp(m: usize, d: usize, n: usize) -> HyperParams {
        crate::model::tests::hp(m, d, n)
    }

    fn dataset(n: usize, d: usize, seed: u64) -> Dataset {
        make_synthetic(&SyntheticSpec { n, d, seed, mode: LabelMode::Rademacher, distinct: true }).unwrap()
    }

    fn meta() -> DatasetMeta {
        DatasetMeta { seed: 0, mode: "manual".into(), label_clip_rate: 0.0 }
    }

    #[test]
    fn zero_gradient_fixed_point() {
        // Outputs equal to labels and no weight decay: nothing moves.
        let h = hp(8, 2, 3);
        let e0 = init_ensemble(&h).unwrap();
        let f = model::outputs(&e0, &h, &dataset(3, 2, 1)).unwrap();
        let xs = dataset(3, 2, 1).inputs().to_vec();
        let ds = Dataset::new(2, xs, f, meta()).unwrap();
        let mut e = e0.clone();
        step(&mut e, &h, &ds, &CounterRng::new(1, Domain::Noise)).unwrap();
        assert_eq!(e.thetas(), e0.thetas());
        assert_eq!(e.us(), e0.us());
        assert_eq!(e.generation, 1);
    }

    #[test]
    fn noiseless_step_is_gradient_descent() {
        let mut h = hp(16, 3, 4);
        h.alpha = 2.0;
        let ds = dataset(4, 3, 2);
        let e0 = init_ensemble(&h).unwrap();
        let g = model::grads(&e0, &h, &ds).unwrap();
        let mut e = e0.clone();
        step(&mut e, &h, &ds, &CounterRng::new(9, Domain::Noise)).unwrap();
        for j in 0..16 {
            assert_eq!(e.us()[j], e0.us()[j] - h.eta * g.du[j]);
        }
        for k in 0..16 * 3 {
            assert_eq!(e.thetas()[k], e0.thetas()[k] - h.eta * g.dtheta[k]);
        }
    }

    #[test]
    fn raw_scaling_divides_the_drift_by_m() {
        let mut h = hp(16, 2, 3);
        h.grad_scaling = GradScaling::Raw;
        let ds = dataset(3, 2, 3);
        let e0 = init_ensemble(&h).unwrap();
        let g = model::grads(&e0, &h, &ds).unwrap();
        let mut e = e0.clone();
        step(&mut e, &h, &ds, &CounterRng::new(9, Domain::Noise)).unwrap();
        assert_eq!(e.us()[5], e0.us()[5] - h.eta / 16.0 * g.du[5]);
    }

    #[test]
    fn noise_increments_have_variance_two_lambda_eta() {
        // Identity activation, zero inputs: the data gradient vanishes; the
        // weight decay drift is removed by taking σ huge.
        let k = 100_000u64;
        for (conv, want) in [(NoiseConvention::StdDev, 2.0 * 0.3 * 0.01), (NoiseConvention::LiteralVariance, 0.3 * (0.02f64).sqrt())] {
            let mut h = hp(1, 2, 1);
            h.activation = Activation::Identity;
            h.lambda = 0.3;
            h.sigma_u = 1e12;
            h.sigma_theta = 1e12;
            h.noise = conv;
            let ds = Dataset::new(2, vec![0.0, 0.0], vec![0.0], meta()).unwrap();
            let mut e = Ensemble::new(2, vec![0.0, 0.0], vec![0.0]).unwrap();
            let rng = CounterRng::new(4, Domain::Noise);
            let mut prev = e.point(0);
            let mut sq = [0.0; 3];
            for _ in 0..k {
                step(&mut e, &h, &ds, &rng).unwrap();
                let p = e.point(0);
                for c in 0..3 {
                    sq[c] += (p[c] - prev[c]).powi(2);
                }
                prev = p;
            }
            for c in 0..3 {
                let v = sq[c] / k as f64;
                assert!((v / want - 1.0).abs() <= 0.05, "coordinate {c}: {v} vs {want}");
            }
        }
    }

    #[test]
    fn linear_regression_oracle() {
        // f = α·mean(u θ x) at x = 1; in the large-m, small-η limit the
        // residual decays at rate 2α²(σ_u² + σ_θ²).
        let mut h = hp(4096, 1, 1);
        h.activation = Activation::Identity;
        h.init = InitScheme::Antithetic;
        h.alpha = 1.0;
        h.eta = 0.01;
        let ds = Dataset::new(1, vec![1.0], vec![1.0], meta()).unwrap();
        let rate = 2.0 * (h.sigma_u.powi(2) + h.sigma_theta.powi(2));
        let horizon = 14.0 / rate;
        let steps = (horizon / h.eta).ceil() as u64;
        let out = train(&h, &ds, Schedule { steps, record_every: 1 }, Recorders::minimal()).unwrap();
        let losses = out.log.losses();
        assert!(losses.windows(2).all(|w| w[1] < w[0]));
        assert!(*losses.last().unwrap() < 1e-6, "{}", losses.last().unwrap());
        // Early decay matches the predicted rate (loss decays at twice it).
        let r = &out.log.records[10];
        let predicted = (-2.0 * rate * r.t).exp();
        assert!((r.loss / predicted - 1.0).abs() < 0.05, "{} vs {predicted}", r.loss);
    }

    #[test]
    fn train_is_deterministic_and_rejects_zero_steps() {
        let mut h = hp(512, 3, 5);
        h.activation = Activation::Tanh;
        h.lambda = 1e-2;
        h.alpha = 4.0;
        h.eta = 0.01;
        let ds = dataset(5, 3, 4);
        let sched = Schedule { steps: 30, record_every: 10 };
        let a = train(&h, &ds, sched, Recorders::default()).unwrap();
        let b = train(&h, &ds, sched, Recorders::default()).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.ensemble, b.ensemble);
        let steps: Vec<u64> = a.log.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 10, 20, 30]);
        for r in &a.log.records {
            assert_eq!(r.t, r.step as f64 * h.eta);
        }
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let c = pool.install(|| train(&h, &ds, sched, Recorders::default()).unwrap());
        assert_eq!(a.log, c.log);
        assert!(train(&h, &ds, Schedule { steps: 0, record_every: 1 }, Recorders::default()).is_err());
        let mut csv = Vec::new();
        a.log.write_csv(&mut csv, "# test\n").unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("# test\nstep,t,loss,objective,kl_surrogate,w2_estimate,kernel_drift_inf,residual_gap,energy,reg_drift_norm\n"));
    }

    #[test]
    fn divergence_is_reported_with_its_step() {
        let mut h = hp(8, 2, 3);
        h.alpha = 50.0;
        h.eta = 1e3;
        let ds = dataset(3, 2, 5);
        match train(&h, &ds, Schedule { steps: 100, record_every: 1 }, Recorders::minimal()) {
            Err(Error::Diverged { step, .. }) => assert!(step < 100),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn init_records_are_consistent() {
        let mut h = hp(1024, 3, 4);
        h.activation = Activation::Tanh;
        h.init = InitScheme::Antithetic;
        h.alpha = 8.0;
        h.eta = 0.002;
        let ds = dataset(4, 3, 6);
        let out = train(&h, &ds, Schedule { steps: 5, record_every: 5 }, Recorders::default()).unwrap();
        let r0 = out.log.records[0];
        assert_eq!(r0.kernel_drift_inf, 0.0);
        assert!(r0.residual_gap < 1e-28);
        assert!(r0.kl_surrogate < 1e-12);
        assert!((r0.loss - 1.0).abs() < 1e-12);
        assert!(out.init.lambda_min.unwrap() > 0.0);
        assert!(r0.w2_estimate > 0.0 && r0.w2_estimate.is_finite());
    }

    fn log_of(losses: &[f64]) -> TrajectoryLog {
        TrajectoryLog {
            eta: 1.0,
            records: losses
                .iter()
                .enumerate()
                .map(|(k, &loss)| TrajectoryRecord {
                    step: k as u64,
                    t: k as f64,
                    loss,
                    objective: loss,
                    kl_surrogate: 0.0,
                    w2_estimate: 0.0,
                    kernel_drift_inf: 0.0,
                    residual_gap: 0.0,
                    energy: loss,
                    reg_drift_norm: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn stationarity_examples() {
        let flat = stationarity_diagnostic(&log_of(&[0.7; 40])).unwrap();
        assert_eq!((flat.plateau, flat.entry_step), (0.7, 0));
        let decaying: Vec<f64> = (0..200).map(|k| (-0.2 * k as f64).exp()).collect();
        assert!(stationarity_diagnostic(&log_of(&decaying)).unwrap().plateau < 1e-15);
        let floor = 3e-3;
        let seq: Vec<f64> = (0..300).map(|k| 2.0 * (-0.1 * k as f64).exp() + floor).collect();
        let rep = stationarity_diagnostic(&log_of(&seq)).unwrap();
        assert!((rep.plateau / floor - 1.0).abs() < 0.1);
        assert!(seq[rep.entry_step as usize] <= 2.0 * rep.plateau);
        assert!(stationarity_diagnostic(&log_of(&[1.0; 10])).is_err());
    }
}
