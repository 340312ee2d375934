//! End-to-end training through the filter recursion, evaluation metrics and
//! cross-validation.
//!
//! Each training sample is a window of `bptt_window` consecutive frames. The
//! ensemble starts at the normalized ground truth of the frame before the
//! window plus `N(0, init_sigma²)` noise and is pushed through predict and
//! update for every frame. The per-step loss is
//!
//! ```text
//! λ_e2e·MSE(x̄⁺, x̂) + λ_f·MSE(x̄⁻, x̂) + λ_s·MSE(ỹ̄, x̂)
//! ```
//!
//! in normalized units, averaged over the window. Gradients flow through the
//! Kalman gain unless `stop_gain` is set.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Frame, TrajectoryDataset};
use crate::error::{invalid, Error, Result};
use crate::filter::{kalman_update, run_sequence_masked, FilterConfig, KalmanTrace, StateSpaceModels, StepRecord};
use crate::models::{ChannelStats, Denkf, NoiseTape, Normalizer};
use crate::nn::{Adam, GradientTape, Mode, NetworkGrads};
use crate::seed::{self, Stream};
use crate::types::{
    column_mean, Ensemble, PlacementSet, RobotState, SamplingFrequency, ACTION_DIM, RAW_OBS_DIM,
    STATE_DIM,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub ensemble_size: usize,
    pub bptt_window: usize,
    pub lambda_e2e: f64,
    pub lambda_f: f64,
    pub lambda_s: f64,
    /// Standard deviation of the initial ensemble around the truth, in
    /// normalized units.
    pub init_sigma: f64,
    /// Treat the Kalman gain as a constant in the reverse pass.
    pub stop_gain: bool,
    /// Upper bound on samples drawn per epoch; 0 uses every window.
    pub samples_per_epoch: usize,
    pub jitter: f64,
    pub max_jitter: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            lr: 1e-5,
            ensemble_size: 32,
            bptt_window: 1,
            lambda_e2e: 1.0,
            lambda_f: 1.0,
            lambda_s: 1.0,
            init_sigma: 0.1,
            stop_gain: false,
            samples_per_epoch: 0,
            jitter: 1e-6,
            max_jitter: 1e-2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.bptt_window == 0 {
            return bad("epochs, batch_size and bptt_window must be positive");
        }
        if self.ensemble_size < 2 {
            return bad("ensemble_size must be at least 2");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and nonnegative");
        }
        for v in [self.lambda_e2e, self.lambda_f, self.lambda_s] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad("loss weights must be finite and nonnegative");
            }
        }
        if !(self.init_sigma >= 0.0 && self.init_sigma.is_finite()) {
            return bad("init_sigma must be finite and nonnegative");
        }
        if !(self.jitter >= 0.0 && self.max_jitter >= self.jitter) {
            return bad("jitter must satisfy 0 <= jitter <= max_jitter");
        }
        Ok(())
    }
}

/// Mean loss terms of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub e2e: f64,
    pub transition: f64,
    pub sensor: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub pipeline: Denkf,
    pub optimizer: Vec<Adam>,
    pub curve: Vec<EpochLoss>,
}

/// z-score statistics over every frame of the training data.
pub fn fit_normalizer(datasets: &[TrajectoryDataset]) -> Result<Normalizer> {
    let frames = || datasets.iter().flat_map(|d| d.frames.iter());
    let truths: Vec<[f64; STATE_DIM]> = frames().map(|f| f.truth.to_array()).collect();
    Ok(Normalizer {
        state: ChannelStats::fit(STATE_DIM, truths.iter().map(|t| t.as_slice()))?,
        action: ChannelStats::fit(ACTION_DIM, frames().map(|f| f.action.as_slice()))?,
        raw: ChannelStats::fit(RAW_OBS_DIM, frames().map(|f| f.raw.as_slice()))?,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub e2e: f64,
    pub transition: f64,
    pub sensor: f64,
}

/// A training window: `frames[0]` supplies the initial truth, the remaining
/// frames are filtered.
#[derive(Debug, Clone, Copy)]
pub struct Window<'a> {
    pub frames: &'a [Frame],
    pub frequency: SamplingFrequency,
}

struct StepPass {
    transition: GradientTape,
    observation: GradientTape,
    sensor: GradientTape,
    noise: NoiseTape,
    kalman: KalmanTrace,
    target: DVector<f64>,
    prior_mean: DVector<f64>,
    post_mean: DVector<f64>,
    learned_mean: DVector<f64>,
}

/// Recorded forward pass over one window.
pub struct WindowPass {
    pub loss: LossParts,
    steps: Vec<StepPass>,
    ensemble: usize,
}

fn mse(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm_squared() / a.len() as f64
}

fn broadcast(v: &DVector<f64>, rows: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, v.len(), |_, j| v[j])
}

fn encode(p: &Denkf, s: &RobotState) -> DVector<f64> {
    p.encode_state(&s.to_vector())
}

/// Forward pass of one window. `sample_seed` fixes the initial noise and every
/// dropout mask, so repeated calls with perturbed parameters are comparable.
pub fn forward_window(
    p: &Denkf,
    w: &Window<'_>,
    cfg: &TrainConfig,
    sample_seed: u64,
) -> Result<WindowPass> {
    if w.frames.len() < 2 {
        return Err(invalid("a training window needs at least two frames"));
    }
    let e = cfg.ensemble_size;
    let steps = w.frames.len() - 1;
    let mut rng = seed::rng(seed::derive(sample_seed, Stream::Init, 0, 0));
    let z0 = encode(p, &w.frames[0].truth);
    let mut x = DMatrix::from_fn(e, STATE_DIM, |_, j| {
        let n: f64 = StandardNormal.sample(&mut rng);
        z0[j] + cfg.init_sigma * n
    });
    let models = &p.models;
    let mut out = Vec::with_capacity(steps);
    let mut loss = LossParts::default();
    for (k, frame) in w.frames[1..].iter().enumerate() {
        let k = k as u64;
        let a = p.normalizer.action.encode(frame.action.as_slice());
        let tseeds = seed::member_seeds(sample_seed, Stream::Transition, k, e);
        let (prior, ttape) = models
            .transition
            .forward_batch(&x, &a, w.frequency, Mode::Stochastic(&tseeds))?;
        let (hx, otape) = models.observation.forward_batch(&prior)?;
        let raw = p.normalizer.raw.encode(frame.raw.as_slice());
        let sseeds = seed::member_seeds(sample_seed, Stream::Sensor, k, e);
        let (learned, stape) = models.sensor.forward_batch(&raw, &frame.placement, &sseeds)?;
        let learned_mean = column_mean(&learned);
        let (noise, ntape) = models.noise.forward(&learned_mean)?;
        let (post, ktrace) =
            kalman_update(&prior, &hx, &learned, &noise, cfg.jitter, cfg.max_jitter, k)?;
        let target = encode(p, &frame.truth);
        let prior_mean = column_mean(&prior);
        let post_mean = column_mean(&post);
        let le = mse(&post_mean, &target);
        let lf = mse(&prior_mean, &target);
        let ls = mse(&learned_mean, &target);
        loss.e2e += le / steps as f64;
        loss.transition += lf / steps as f64;
        loss.sensor += ls / steps as f64;
        out.push(StepPass {
            transition: ttape,
            observation: otape,
            sensor: stape,
            noise: ntape,
            kalman: ktrace,
            target,
            prior_mean,
            post_mean,
            learned_mean,
        });
        x = post;
    }
    loss.total = cfg.lambda_e2e * loss.e2e + cfg.lambda_f * loss.transition + cfg.lambda_s * loss.sensor;
    Ok(WindowPass {
        loss,
        steps: out,
        ensemble: e,
    })
}

impl WindowPass {
    /// Concatenated ReLU sign patterns of every recorded network pass.
    pub fn relu_pattern(&self, p: &Denkf) -> Vec<bool> {
        let m = &p.models;
        let mut out = Vec::new();
        for s in &self.steps {
            out.extend(s.transition.relu_pattern(&m.transition.net));
            out.extend(s.observation.relu_pattern(&m.observation.net));
            out.extend(s.sensor.relu_pattern(&m.sensor.net));
            out.extend(s.noise.relu_pattern(&m.noise.net));
        }
        out
    }

    /// Gradients of the total loss for the transition, observation, sensor
    /// and noise networks, in that order.
    pub fn backward(self, p: &Denkf, cfg: &TrainConfig) -> Result<[NetworkGrads; 4]> {
        let m = &p.models;
        let e = self.ensemble;
        let ef = e as f64;
        let w = self.steps.len() as f64;
        let scale = 2.0 / STATE_DIM as f64 / w;
        let mut gt = NetworkGrads::zeros_like(&m.transition.net);
        let mut go = NetworkGrads::zeros_like(&m.observation.net);
        let mut gs = NetworkGrads::zeros_like(&m.sensor.net);
        let mut gn = NetworkGrads::zeros_like(&m.noise.net);
        let mut carry = DMatrix::zeros(e, STATE_DIM);
        for s in self.steps.into_iter().rev() {
            let g_post = (&s.post_mean - &s.target) * (cfg.lambda_e2e * scale / ef);
            let d_post = carry + broadcast(&g_post, e);
            let kg = s.kalman.backward(&d_post, cfg.stop_gain);

            let g_prior = (&s.prior_mean - &s.target) * (cfg.lambda_f * scale / ef);
            let mut d_prior = kg.prior + broadcast(&g_prior, e);
            let (g, d_from_obs) = m.observation.backward(s.observation, &kg.hx)?;
            go.add_assign(&g);
            d_prior += d_from_obs;

            let (g, d_mean) = m.noise.backward(s.noise, &kg.noise)?;
            gn.add_assign(&g);
            let g_learned = (&s.learned_mean - &s.target) * (cfg.lambda_s * scale) + d_mean;
            let d_learned = kg.learned + broadcast(&(g_learned / ef), e);
            gs.add_assign(&m.sensor.backward(s.sensor, &d_learned)?);

            let (g, d_prev) = m.transition.backward(s.transition, &d_prior)?;
            gt.add_assign(&g);
            carry = d_prev;
        }
        Ok([gt, go, gs, gn])
    }
}

/// All training windows as `(dataset, start frame)` pairs.
fn windows(datasets: &[TrajectoryDataset], len: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (d, ds) in datasets.iter().enumerate() {
        if ds.len() > len {
            out.extend((0..ds.len() - len).map(|t| (d, t)));
        }
    }
    out
}

fn sample_seed(run_seed: u64, epoch: usize, d: usize, t: usize) -> u64 {
    seed::derive(run_seed, Stream::Shuffle, epoch as u64, ((d as u64) << 40) | t as u64)
}

/// Trains all four networks jointly. `on_epoch` sees every completed epoch
/// (for checkpointing); an error from it stops training.
pub fn train_with<F>(
    mut pipeline: Denkf,
    datasets: &[TrajectoryDataset],
    cfg: &TrainConfig,
    optimizer: Option<Vec<Adam>>,
    start_epoch: usize,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochLoss, &Denkf, &[Adam]) -> Result<()>,
{
    cfg.validate()?;
    let all = windows(datasets, cfg.bptt_window);
    if all.is_empty() {
        return Err(invalid(format!(
            "no dataset is longer than the training window of {} frames",
            cfg.bptt_window + 1
        )));
    }
    let mut opt = match optimizer {
        Some(o) if o.len() == 4 => o,
        Some(_) => return Err(invalid("expected one optimizer state per network")),
        None => pipeline.models.networks().iter().map(|n| Adam::new(n)).collect(),
    };
    let mut curve = Vec::with_capacity(cfg.epochs.saturating_sub(start_epoch));
    for epoch in start_epoch..cfg.epochs {
        let mut order = all.clone();
        order.shuffle(&mut seed::rng(seed::derive(cfg.seed, Stream::Shuffle, epoch as u64, u64::MAX)));
        if cfg.samples_per_epoch > 0 {
            order.truncate(cfg.samples_per_epoch);
        }
        let mut sum = LossParts::default();
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let nets = pipeline.models.networks();
            let mut acc: Vec<NetworkGrads> = nets.iter().map(|n| NetworkGrads::zeros_like(n)).collect();
            for &(d, t) in batch {
                let ds = &datasets[d];
                let w = Window {
                    frames: &ds.frames[t..=t + cfg.bptt_window],
                    frequency: ds.frequency(),
                };
                let pass = forward_window(&pipeline, &w, cfg, sample_seed(cfg.seed, epoch, d, t))
                    .map_err(|e| Error::Training(format!("epoch {epoch}, batch {b}: {e}")))?;
                if !pass.loss.total.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite loss at epoch {epoch}, batch {b}"
                    )));
                }
                sum.total += pass.loss.total;
                sum.e2e += pass.loss.e2e;
                sum.transition += pass.loss.transition;
                sum.sensor += pass.loss.sensor;
                for (a, g) in acc.iter_mut().zip(pass.backward(&pipeline, cfg)?) {
                    a.add_assign(&g);
                }
            }
            let mut next = Vec::with_capacity(4);
            for ((g, o), net) in acc.iter_mut().zip(opt.iter_mut()).zip(pipeline.models.networks()) {
                g.scale(1.0 / batch.len() as f64);
                next.push(o.step(net, g, cfg.lr)?);
            }
            for (slot, net) in pipeline.models.networks_mut().into_iter().zip(next) {
                *slot = net;
            }
        }
        let n = order.len() as f64;
        let rec = EpochLoss {
            epoch,
            total: sum.total / n,
            e2e: sum.e2e / n,
            transition: sum.transition / n,
            sensor: sum.sensor / n,
        };
        on_epoch(&rec, &pipeline, &opt)?;
        curve.push(rec);
    }
    Ok(TrainOutcome {
        pipeline,
        optimizer: opt,
        curve,
    })
}

pub fn train(pipeline: Denkf, datasets: &[TrajectoryDataset], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(pipeline, datasets, cfg, None, 0, |_, _, _| Ok(()))
}

/// Settings for running the filter over a labelled dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub filter: FilterConfig,
    /// Initial spread around the first ground-truth state, normalized units.
    pub init_sigma: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            filter: FilterConfig::default(),
            init_sigma: 0.1,
        }
    }
}

/// Ensemble in physical units scattered around `truth` in model coordinates.
pub fn initial_ensemble<M: StateSpaceModels + ?Sized>(
    models: &M,
    truth: &RobotState,
    size: usize,
    sigma: f64,
    seed: u64,
) -> Result<Ensemble> {
    let z = models.encode_state(&truth.to_vector());
    let mut rng = seed::rng(seed::derive(seed, Stream::Init, u64::MAX, 0));
    let mut m = DMatrix::zeros(size, z.len());
    for i in 0..size {
        let noisy = DVector::from_fn(z.len(), |j, _| {
            let n: f64 = StandardNormal.sample(&mut rng);
            z[j] + sigma * n
        });
        m.set_row(i, &models.decode_state(&noisy).transpose());
    }
    Ensemble::new(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub name: String,
    pub placement: PlacementSet,
    pub frequency: SamplingFrequency,
    pub steps: usize,
    pub mae_position: f64,
    pub rmse_position: f64,
    pub mae_quaternion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean absolute error over x, y, z, mm.
    pub mae_position: f64,
    pub rmse_position: f64,
    /// Mean absolute error over the 4 quaternion components, after aligning
    /// the estimate's sign with the truth.
    pub mae_quaternion: f64,
    pub steps: usize,
    pub wall_clock_per_step: f64,
    pub per_condition: Vec<ConditionReport>,
}

#[derive(Debug, Default, Clone, Copy)]
struct ErrorSums {
    abs_pos: f64,
    sq_pos: f64,
    abs_q: f64,
    steps: usize,
}

impl ErrorSums {
    fn add(&mut self, est: &RobotState, truth: &RobotState) {
        for c in 0..3 {
            let d = est.position[c] - truth.position[c];
            self.abs_pos += d.abs();
            self.sq_pos += d * d;
        }
        let dot: f64 = (0..4).map(|c| est.orientation[c] * truth.orientation[c]).sum();
        let sign = if dot < 0.0 { -1.0 } else { 1.0 };
        for c in 0..4 {
            self.abs_q += (sign * est.orientation[c] - truth.orientation[c]).abs();
        }
        self.steps += 1;
    }

    fn merge(&mut self, o: &ErrorSums) {
        self.abs_pos += o.abs_pos;
        self.sq_pos += o.sq_pos;
        self.abs_q += o.abs_q;
        self.steps += o.steps;
    }

    fn metrics(&self) -> (f64, f64, f64) {
        let n = self.steps.max(1) as f64;
        (
            self.abs_pos / (3.0 * n),
            (self.sq_pos / (3.0 * n)).sqrt(),
            self.abs_q / (4.0 * n),
        )
    }
}

/// Filters every dataset from its first ground-truth state and scores the
/// updated means. Returns the report and the per-dataset trajectories.
pub fn evaluate_detailed<M: StateSpaceModels + ?Sized>(
    models: &M,
    datasets: &[TrajectoryDataset],
    cfg: &EvalConfig,
) -> Result<(EvalReport, Vec<Vec<StepRecord>>)> {
    evaluate_masked(models, datasets, &[], cfg)
}

/// Like [`evaluate_detailed`], with an optional missing-observation mask per
/// dataset (`masks[i]`, absent entries mean fully observed). Errors are still
/// scored on every frame.
pub fn evaluate_masked<M: StateSpaceModels + ?Sized>(
    models: &M,
    datasets: &[TrajectoryDataset],
    masks: &[Option<Vec<bool>>],
    cfg: &EvalConfig,
) -> Result<(EvalReport, Vec<Vec<StepRecord>>)> {
    if masks.len() > datasets.len() {
        return Err(invalid(format!(
            "{} masks for {} datasets",
            masks.len(),
            datasets.len()
        )));
    }
    let mut total = ErrorSums::default();
    let mut elapsed = 0.0;
    let mut per_condition = Vec::with_capacity(datasets.len());
    let mut records = Vec::with_capacity(datasets.len());
    for (i, ds) in datasets.iter().enumerate() {
        if ds.is_empty() {
            continue;
        }
        let init = initial_ensemble(
            models,
            &ds.frames[0].truth,
            cfg.filter.ensemble_size,
            cfg.init_sigma,
            seed::derive(cfg.filter.seed, Stream::Init, i as u64, 0),
        )?;
        let fcfg = FilterConfig {
            seed: seed::derive(cfg.filter.seed, Stream::Init, i as u64, 1),
            ..cfg.filter
        };
        let mask = masks.get(i).and_then(|m| m.as_deref());
        let recs = run_sequence_masked(&init, &ds.frame_refs(), mask, models, &fcfg)?;
        let mut sums = ErrorSums::default();
        for (r, f) in recs.iter().zip(&ds.frames) {
            sums.add(&r.updated_state()?, &f.truth);
            elapsed += r.elapsed_s;
        }
        total.merge(&sums);
        let (mae, rmse, mq) = sums.metrics();
        per_condition.push(ConditionReport {
            name: ds.metadata.name.clone(),
            placement: ds.placement(),
            frequency: ds.frequency(),
            steps: sums.steps,
            mae_position: mae,
            rmse_position: rmse,
            mae_quaternion: mq,
        });
        records.push(recs);
    }
    if total.steps == 0 {
        return Err(invalid("nothing to evaluate"));
    }
    let (mae, rmse, mq) = total.metrics();
    Ok((
        EvalReport {
            mae_position: mae,
            rmse_position: rmse,
            mae_quaternion: mq,
            steps: total.steps,
            wall_clock_per_step: elapsed / total.steps as f64,
            per_condition,
        },
        records,
    ))
}

pub fn evaluate<M: StateSpaceModels + ?Sized>(
    models: &M,
    datasets: &[TrajectoryDataset],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    Ok(evaluate_detailed(models, datasets, cfg)?.0)
}

/// Mean and standard error of one metric over folds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStderr {
    pub mean: f64,
    pub stderr: f64,
}

impl MeanStderr {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let stderr = if values.len() < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        };
        Self { mean, stderr }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<EvalReport>,
    pub mae_position: MeanStderr,
    pub rmse_position: MeanStderr,
    pub mae_quaternion: MeanStderr,
}

impl CvReport {
    pub fn from_folds(folds: Vec<EvalReport>) -> Result<Self> {
        if folds.is_empty() {
            return Err(invalid("no folds to aggregate"));
        }
        let pick = |f: fn(&EvalReport) -> f64| MeanStderr::of(&folds.iter().map(f).collect::<Vec<_>>());
        Ok(Self {
            mae_position: pick(|r| r.mae_position),
            rmse_position: pick(|r| r.rmse_position),
            mae_quaternion: pick(|r| r.mae_quaternion),
            folds,
        })
    }
}

/// Train/test split of fold `k`: with at least `folds` datasets, whole
/// datasets are held out in contiguous groups; otherwise every dataset is cut
/// into `folds` contiguous time blocks and block `k` of each is held out.
pub fn fold_split(
    datasets: &[TrajectoryDataset],
    folds: usize,
    k: usize,
) -> Result<(Vec<TrajectoryDataset>, Vec<TrajectoryDataset>)> {
    if folds < 2 || k >= folds {
        return Err(invalid(format!("fold {k} of {folds} is not a valid split")));
    }
    if datasets.len() >= folds {
        let n = datasets.len();
        let range = (k * n / folds)..((k + 1) * n / folds);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, d) in datasets.iter().enumerate() {
            if range.contains(&i) {
                test.push(d.clone());
            } else {
                train.push(d.clone());
            }
        }
        return Ok((train, test));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for ds in datasets {
        let n = ds.len();
        if n < 2 * folds {
            return Err(invalid(format!(
                "dataset {} has {n} frames, too few for {folds} folds",
                ds.metadata.name
            )));
        }
        let lo = k * n / folds;
        let hi = (k + 1) * n / folds;
        test.push(ds.slice(lo..hi, &format!("{}[fold {k}]", ds.metadata.name))?);
        if lo > 0 {
            train.push(ds.slice(0..lo, &format!("{}[..{lo}]", ds.metadata.name))?);
        }
        if hi < n {
            train.push(ds.slice(hi..n, &format!("{}[{hi}..]", ds.metadata.name))?);
        }
    }
    Ok((train, test))
}

/// Contiguous-block cross-validation; `factory` trains a pipeline on the
/// training part of each fold.
pub fn crossvalidate<F>(
    mut factory: F,
    datasets: &[TrajectoryDataset],
    folds: usize,
    cfg: &EvalConfig,
) -> Result<CvReport>
where
    F: FnMut(usize, &[TrajectoryDataset]) -> Result<Denkf>,
{
    let mut reports = Vec::with_capacity(folds);
    for k in 0..folds {
        let (train, test) = fold_split(datasets, folds, k)?;
        let model = factory(k, &train)?;
        reports.push(evaluate(&model, &test, cfg)?);
    }
    CvReport::from_folds(reports)
}

/// Text table of mean±stderr results: one row per model, one position and one
/// quaternion column per condition.
pub fn format_table(conditions: &[&str], rows: &[(String, Vec<CvReport>)]) -> String {
    let mut header = vec!["Model".to_string()];
    for c in conditions {
        header.push(format!("{c} EE (mm)"));
        header.push(format!("{c} q"));
    }
    let mut lines = vec![header];
    for (name, reports) in rows {
        let mut line = vec![name.clone()];
        for r in reports {
            line.push(format!("{:.2}±{:.2}", r.mae_position.mean, r.mae_position.stderr));
            line.push(format!("{:.4}±{:.4}", r.mae_quaternion.mean, r.mae_quaternion.stderr));
        }
        lines.push(line);
    }
    let cols = lines.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| lines.iter().filter_map(|l| l.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, l) in lines.iter().enumerate() {
        let cells: Vec<String> = l
            .iter()
            .zip(&widths)
            .map(|(s, w)| format!("{s:<w$}"))
            .collect();
        out.push_str(&format!("| {} |\n", cells.join(" | ")));
        if i == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            out.push_str(&format!("|-{}-|\n", rule.join("-|-")));
        }
    }
    out
}

/// Wall-clock helper for callers that time whole runs.
pub fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let t = Instant::now();
    let v = f()?;
    Ok((v, t.elapsed().as_secs_f64()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::EmbeddingConfig;
    use crate::models::{ModelSet, Variant};
    use crate::sim::{canonical_datasets, SyntheticArmConfig};

    fn data(seconds: f64) -> Vec<TrajectoryDataset> {
        canonical_datasets(&SyntheticArmConfig::default(), SamplingFrequency::Hz10, seconds, 3)
            .unwrap()
    }

    fn pipeline(variant: Variant, data: &[TrajectoryDataset]) -> Denkf {
        let models = ModelSet::new(variant, EmbeddingConfig::default(), 0.1, 5).unwrap();
        Denkf::new(models, fit_normalizer(data).unwrap())
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            lr: 1e-3,
            ensemble_size: 8,
            samples_per_epoch: 16,
            ..Default::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let d = data(4.0);
        let p = pipeline(Variant::Fix, &d[..1]);
        let cfg = TrainConfig { lr: 0.0, ..small_cfg() };
        let out = train(p.clone(), &d[..1], &cfg).unwrap();
        assert_eq!(out.pipeline, p);
        assert_eq!(out.curve.len(), 2);
    }

    #[test]
    fn training_is_deterministic() {
        let d = data(4.0);
        let p = pipeline(Variant::Pe, &d[..2]);
        let a = train(p.clone(), &d[..2], &small_cfg()).unwrap();
        let b = train(p, &d[..2], &small_cfg()).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.pipeline, b.pipeline);
    }

    #[test]
    fn window_gradient_matches_finite_differences() {
        let d = data(3.0);
        let mut p = pipeline(Variant::PeTe, &d[..1]);
        for cfg in [
            TrainConfig { ensemble_size: 6, bptt_window: 1, ..Default::default() },
            TrainConfig { ensemble_size: 5, bptt_window: 3, lambda_f: 0.5, lambda_s: 2.0, ..Default::default() },
        ] {
            let w = Window {
                frames: &d[0].frames[4..5 + cfg.bptt_window],
                frequency: d[0].frequency(),
            };
            let grads = forward_window(&p, &w, &cfg, 77).unwrap().backward(&p, &cfg).unwrap();
            let mut rng = seed::rng(19);
            let mut checked = 0;
            for net_idx in 0..4 {
                let flat = grads[net_idx].flat();
                for _ in 0..6 {
                    let i = rand::Rng::random_range(&mut rng, 0..flat.len());
                    let h = 1e-5;
                    let orig = *p.models.networks_mut()[net_idx].param_mut(i).unwrap();
                    let eval = |v: f64, p: &mut Denkf| {
                        *p.models.networks_mut()[net_idx].param_mut(i).unwrap() = v;
                        let pass = forward_window(p, &w, &cfg, 77).unwrap();
                        (pass.loss.total, pass.relu_pattern(p))
                    };
                    let (lp, pp) = eval(orig + h, &mut p);
                    let (lm, pm) = eval(orig - h, &mut p);
                    *p.models.networks_mut()[net_idx].param_mut(i).unwrap() = orig;
                    if pp != pm {
                        continue;
                    }
                    let fd = (lp - lm) / (2.0 * h);
                    let an = flat[i];
                    let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                    assert!(err < 1e-3, "net {net_idx} param {i}: fd {fd} analytic {an}");
                    checked += 1;
                }
            }
            assert!(checked >= 20, "only {checked} parameters checked");
        }
    }

    #[test]
    fn stop_gain_drops_noise_gradient() {
        let d = data(3.0);
        let p = pipeline(Variant::Fix, &d[..1]);
        let cfg = TrainConfig {
            ensemble_size: 6,
            stop_gain: true,
            lambda_s: 0.0,
            ..Default::default()
        };
        let w = Window {
            frames: &d[0].frames[2..4],
            frequency: d[0].frequency(),
        };
        let g = forward_window(&p, &w, &cfg, 1).unwrap().backward(&p, &cfg).unwrap();
        assert!(g[3].flat().iter().all(|v| *v == 0.0));
        assert!(g[0].flat().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn perfect_models_track_truth() {
        // Frame index k is smuggled through action and raw channel 0.
        struct Oracle<'a>(&'a TrajectoryDataset);
        impl Oracle<'_> {
            fn truth(&self, k: f64, rows: usize) -> DMatrix<f64> {
                let t = self.0.frames[k as usize].truth.to_array();
                DMatrix::from_fn(rows, STATE_DIM, |_, j| t[j])
            }
        }
        impl StateSpaceModels for Oracle<'_> {
            fn state_dim(&self) -> usize {
                STATE_DIM
            }
            fn propagate(&self, m: &DMatrix<f64>, a: &[f64], _: SamplingFrequency, _: &[u64]) -> Result<DMatrix<f64>> {
                Ok(self.truth(a[0], m.nrows()))
            }
            fn observe(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
                Ok(m.clone())
            }
            fn sense(&self, raw: &[f64], _: &PlacementSet, seeds: &[u64]) -> Result<DMatrix<f64>> {
                Ok(self.truth(raw[0], seeds.len()))
            }
            fn noise_diag(&self, _: &DVector<f64>) -> Result<DVector<f64>> {
                Ok(DVector::from_element(STATE_DIM, 1e-12))
            }
        }
        let mut ds = data(3.0).remove(0);
        for (k, f) in ds.frames.iter_mut().enumerate() {
            let mut raw = f.raw.as_slice().to_vec();
            raw[0] = k as f64;
            f.raw = crate::types::RawObservation::new(raw).unwrap();
            let mut a = f.action.as_slice().to_vec();
            a[0] = k as f64;
            f.action = crate::types::Action::new(a).unwrap();
        }
        let report = evaluate(&Oracle(&ds), std::slice::from_ref(&ds), &EvalConfig::default()).unwrap();
        assert!(report.mae_position < 1e-6, "{}", report.mae_position);
        assert!(report.mae_quaternion < 1e-6);
        assert_eq!(report.steps, ds.len());
    }

    #[test]
    fn fold_partition_holds_out_each_dataset_once() {
        let d = data(2.0);
        let mut seen = vec![0; d.len()];
        for k in 0..10 {
            let (train, test) = fold_split(&d, 10, k).unwrap();
            assert_eq!(train.len() + test.len(), 10);
            for t in &test {
                let i = d.iter().position(|x| x.metadata.name == t.metadata.name).unwrap();
                seen[i] += 1;
            }
        }
        assert_eq!(seen, vec![1; 10]);
        assert!(fold_split(&data(1.0)[..1], 10, 0).is_err());
        let long = data(5.0);
        let (train, test) = fold_split(&long[..2], 5, 2).unwrap();
        assert_eq!(test.len(), 2);
        assert_eq!(train.len(), 4);
        assert_eq!(test[0].len(), 10);
    }

    #[test]
    fn identical_folds_have_zero_stderr() {
        let r = EvalReport {
            mae_position: 3.0,
            rmse_position: 4.0,
            mae_quaternion: 0.1,
            steps: 5,
            wall_clock_per_step: 0.0,
            per_condition: vec![],
        };
        let cv = CvReport::from_folds(vec![r.clone(), r.clone(), r]).unwrap();
        assert_eq!(cv.mae_position, MeanStderr { mean: 3.0, stderr: 0.0 });
        let m = MeanStderr::of(&[1.0, 2.0, 3.0, 4.0]);
        assert!((m.stderr - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn table_formatting() {
        let r = EvalReport {
            mae_position: 25.77,
            rmse_position: 30.0,
            mae_quaternion: 0.0123,
            steps: 5,
            wall_clock_per_step: 0.0,
            per_condition: vec![],
        };
        let mut r2 = r.clone();
        r2.mae_position = 27.77;
        let cv = CvReport::from_folds(vec![r, r2]).unwrap();
        let t = format_table(&["Fixed Z"], &[("DEnKF-Fix".into(), vec![cv])]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].contains("Fixed Z EE (mm)"));
        assert!(lines[2].contains("26.77±1.00"), "{t}");
        assert!(lines[2].contains("0.0123±0.0000"));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr: f64::NAN, ..Default::default() }.validate().is_err());
        let parsed: TrainConfig = toml::from_str("epochs = 3\nlr = 0.001").unwrap();
        assert_eq!(parsed.epochs, 3);
        assert_eq!(parsed.batch_size, 64);
        assert!(toml::from_str::<TrainConfig>("epoch = 3").is_err());
    }
}
