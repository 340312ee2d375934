//! Ensemble Kalman recursion with learned sub-modules.
//!
//! Members live in the row space of an `E x d` matrix. Prediction pushes every
//! member through a stochastic transition sample; the update maps members to
//! observation space, draws `E` learned observations from the sensor model and
//! applies
//!
//! ```text
//! S  = HAᵀ HA / (E-1) + diag(r) + jitter I
//! K  = Aᵀ HA S⁻¹ / (E-1)
//! X⁺ = X⁻ + (Ỹ - HX) Kᵀ
//! ```
//!
//! where `A` and `HA` are the column-centred ensembles. The filter algebra is
//! dimension-generic; the learned pipeline uses `d = m = 7`.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::seed::{self, Stream};
use crate::types::{
    center_rows, column_mean, Action, Ensemble, PlacementSet, RawObservation, RobotState,
    SamplingFrequency, STATE_DIM,
};

/// Learned (or stub) components the recursion is built from.
///
/// All matrices hold one ensemble member per row, in the models' own
/// coordinates. `encode_state`/`decode_state` convert between those
/// coordinates and physical state units.
pub trait StateSpaceModels {
    fn state_dim(&self) -> usize;

    /// One stochastic transition sample per member; `seeds[i]` drives member `i`.
    fn propagate(
        &self,
        members: &DMatrix<f64>,
        action: &[f64],
        frequency: SamplingFrequency,
        seeds: &[u64],
    ) -> Result<DMatrix<f64>>;

    /// Deterministic state-to-observation map.
    fn observe(&self, members: &DMatrix<f64>) -> Result<DMatrix<f64>>;

    /// One learned observation sample per seed.
    fn sense(&self, raw: &[f64], placement: &PlacementSet, seeds: &[u64]) -> Result<DMatrix<f64>>;

    /// Diagonal of the measurement noise covariance, strictly positive.
    fn noise_diag(&self, learned_mean: &DVector<f64>) -> Result<DVector<f64>>;

    fn encode_state(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }

    fn decode_state(&self, z: &DVector<f64>) -> DVector<f64> {
        z.clone()
    }

    /// Maps a spread (standard deviation) vector to physical units.
    fn decode_spread(&self, s: &DVector<f64>) -> DVector<f64> {
        s.clone()
    }
}

/// Inputs consumed by one predict/update cycle.
pub trait FilterInput {
    fn timestamp(&self) -> f64;
    fn action(&self) -> &[f64];
    fn raw(&self) -> &[f64];
    fn placement(&self) -> PlacementSet;
    fn frequency(&self) -> SamplingFrequency;
}

/// Raw sensor frame without ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationFrame {
    pub timestamp: f64,
    pub action: Action,
    pub raw: RawObservation,
    pub placement: PlacementSet,
    pub frequency: SamplingFrequency,
}

impl FilterInput for ObservationFrame {
    fn timestamp(&self) -> f64 {
        self.timestamp
    }
    fn action(&self) -> &[f64] {
        self.action.as_slice()
    }
    fn raw(&self) -> &[f64] {
        self.raw.as_slice()
    }
    fn placement(&self) -> PlacementSet {
        self.placement
    }
    fn frequency(&self) -> SamplingFrequency {
        self.frequency
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub ensemble_size: usize,
    /// Added to the innovation covariance diagonal.
    pub jitter: f64,
    /// Jitter is escalated tenfold up to this bound before giving up.
    pub max_jitter: f64,
    pub seed: u64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            ensemble_size: 32,
            jitter: 1e-6,
            max_jitter: 1e-2,
            seed: 0,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size < 2 {
            return Err(invalid("ensemble size must be at least 2"));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(invalid("jitter must be finite and non-negative"));
        }
        if self.max_jitter < self.jitter {
            return Err(invalid("max_jitter below jitter"));
        }
        Ok(())
    }
}

/// Snapshot of the filter belief, in model coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    ensemble: Ensemble,
    step_index: u64,
    last_innovation: DVector<f64>,
    predicted_mean: DVector<f64>,
    updated_mean: DVector<f64>,
    awaiting_update: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDiagnostics {
    pub innovation_covariance: DMatrix<f64>,
    pub kalman_gain: DMatrix<f64>,
    pub predicted_obs_mean: DVector<f64>,
    pub noise_diag: DVector<f64>,
    pub jitter_used: f64,
}

impl FilterState {
    /// Starts from an ensemble already expressed in model coordinates.
    pub fn new(ensemble: Ensemble) -> Self {
        let mean = ensemble.raw_mean();
        Self {
            last_innovation: DVector::zeros(ensemble.dim()),
            predicted_mean: mean.clone(),
            updated_mean: mean,
            ensemble,
            step_index: 0,
            awaiting_update: false,
        }
    }

    /// Encodes a physical-unit ensemble into model coordinates.
    pub fn from_physical<M: StateSpaceModels + ?Sized>(init: &Ensemble, models: &M) -> Result<Self> {
        if init.dim() != models.state_dim() {
            return Err(invalid(format!(
                "initial ensemble has dimension {}, models expect {}",
                init.dim(),
                models.state_dim()
            )));
        }
        let mut m = init.members().clone();
        for i in 0..m.nrows() {
            let row = models.encode_state(&m.row(i).transpose());
            m.set_row(i, &row.transpose());
        }
        Ok(Self::new(Ensemble::new(m)?))
    }

    pub fn ensemble(&self) -> &Ensemble {
        &self.ensemble
    }

    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    pub fn last_innovation(&self) -> &DVector<f64> {
        &self.last_innovation
    }

    pub fn predicted_mean(&self) -> &DVector<f64> {
        &self.predicted_mean
    }

    pub fn updated_mean(&self) -> &DVector<f64> {
        &self.updated_mean
    }

    /// Completes the current step without an observation: the prediction
    /// becomes the estimate.
    pub fn skip_update(&self) -> Result<FilterState> {
        if !self.awaiting_update {
            return Err(Error::State("skip_update called before predict".into()));
        }
        let mut next = self.clone();
        next.updated_mean = next.predicted_mean.clone();
        next.last_innovation = DVector::zeros(next.ensemble.dim());
        next.step_index += 1;
        next.awaiting_update = false;
        Ok(next)
    }
}

/// Everything the update computed, kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct KalmanTrace {
    pub prior: DMatrix<f64>,
    pub anomalies: DMatrix<f64>,
    pub obs_anomalies: DMatrix<f64>,
    /// `Ỹ - HX`
    pub innovations: DMatrix<f64>,
    pub innovation_covariance: DMatrix<f64>,
    /// `d x m`
    pub gain: DMatrix<f64>,
    pub jitter_used: f64,
    chol: Cholesky<f64, Dyn>,
}

/// Kalman correction of `prior` given predicted observations `hx`, learned
/// observation samples `learned` and noise diagonal `noise`.
pub fn kalman_update(
    prior: &DMatrix<f64>,
    hx: &DMatrix<f64>,
    learned: &DMatrix<f64>,
    noise: &DVector<f64>,
    jitter: f64,
    max_jitter: f64,
    step: u64,
) -> Result<(DMatrix<f64>, KalmanTrace)> {
    let e = prior.nrows();
    let m = hx.ncols();
    if e < 2 {
        return Err(invalid("ensemble needs at least 2 members"));
    }
    if hx.nrows() != e || learned.shape() != hx.shape() || noise.len() != m {
        return Err(invalid(format!(
            "update shapes disagree: prior {:?}, hx {:?}, learned {:?}, noise {}",
            prior.shape(),
            hx.shape(),
            learned.shape(),
            noise.len()
        )));
    }
    let c = 1.0 / (e as f64 - 1.0);
    let a = center_rows(prior);
    let ha = center_rows(hx);
    let mut base = ha.tr_mul(&ha) * c;
    base = (&base + base.transpose()) * 0.5;
    for i in 0..m {
        base[(i, i)] += noise[i];
    }
    let diverged = |jitter: f64, reason: &str, s: &DMatrix<f64>| Error::Divergence {
        step,
        jitter,
        reason: reason.to_string(),
        innovation_covariance: s.iter().copied().collect(),
    };
    if !base.iter().all(|v| v.is_finite()) {
        return Err(diverged(jitter, "non-finite innovation covariance", &base));
    }
    let mut j = jitter;
    let (s, chol) = loop {
        let mut s = base.clone();
        for i in 0..m {
            s[(i, i)] += j;
        }
        if let Some(chol) = Cholesky::new(s.clone()) {
            break (s, chol);
        }
        j = if j == 0.0 { 1e-9 } else { j * 10.0 };
        if j > max_jitter {
            return Err(diverged(j / 10.0, "innovation covariance not positive definite", &s));
        }
    };
    let p = a.tr_mul(&ha) * c;
    let gain_t = chol.solve(&p.transpose());
    let gain = gain_t.transpose();
    let innovations = learned - hx;
    let posterior = prior + &innovations * &gain_t;
    Ok((
        posterior,
        KalmanTrace {
            prior: prior.clone(),
            anomalies: a,
            obs_anomalies: ha,
            innovations,
            innovation_covariance: s,
            gain,
            jitter_used: j,
            chol,
        },
    ))
}

/// Gradients of a scalar loss with respect to the inputs of [`kalman_update`].
#[derive(Debug, Clone)]
pub struct KalmanGrads {
    pub prior: DMatrix<f64>,
    pub hx: DMatrix<f64>,
    pub learned: DMatrix<f64>,
    pub noise: DVector<f64>,
}

impl KalmanTrace {
    /// Reverse pass given `dL/dX⁺`. With `stop_gain` the gain is treated as a
    /// constant, so no gradient reaches the covariance terms.
    pub fn backward(&self, d_post: &DMatrix<f64>, stop_gain: bool) -> KalmanGrads {
        let e = self.prior.nrows();
        let m = self.obs_anomalies.ncols();
        let c = 1.0 / (e as f64 - 1.0);
        let d_innov = d_post * &self.gain;
        let mut d_prior = d_post.clone();
        let mut d_hx = -&d_innov;
        let d_learned = d_innov;
        let mut d_noise = DVector::zeros(m);
        if !stop_gain {
            let d_gain = d_post.tr_mul(&self.innovations);
            // dP = dK S⁻¹ = (S⁻¹ dKᵀ)ᵀ
            let d_p = self.chol.solve(&d_gain.transpose()).transpose();
            // dS = -Kᵀ dK S⁻¹ = -Kᵀ dP
            let d_s = -self.gain.tr_mul(&d_p);
            let d_a = &self.obs_anomalies * d_p.transpose() * c;
            let mut d_ha = &self.anomalies * &d_p * c;
            d_ha += &self.obs_anomalies * (&d_s + d_s.transpose()) * c;
            d_noise = d_s.diagonal();
            d_prior += center_rows(&d_a);
            d_hx += center_rows(&d_ha);
        }
        KalmanGrads {
            prior: d_prior,
            hx: d_hx,
            learned: d_learned,
            noise: d_noise,
        }
    }
}

/// Stochastic prediction of every member.
pub fn predict<M: StateSpaceModels + ?Sized>(
    fs: &FilterState,
    action: &[f64],
    frequency: SamplingFrequency,
    models: &M,
    cfg: &FilterConfig,
) -> Result<FilterState> {
    if fs.awaiting_update {
        return Err(Error::State("predict called twice without update".into()));
    }
    let e = fs.ensemble.size();
    let seeds = seed::member_seeds(cfg.seed, Stream::Transition, fs.step_index, e);
    let next = models.propagate(fs.ensemble.members(), action, frequency, &seeds)?;
    if next.shape() != fs.ensemble.members().shape() {
        return Err(invalid(format!(
            "transition returned shape {:?}, expected {:?}",
            next.shape(),
            fs.ensemble.members().shape()
        )));
    }
    let ensemble = Ensemble::new(next)?;
    let predicted_mean = ensemble.raw_mean();
    Ok(FilterState {
        ensemble,
        step_index: fs.step_index,
        last_innovation: fs.last_innovation.clone(),
        predicted_mean,
        updated_mean: fs.updated_mean.clone(),
        awaiting_update: true,
    })
}

/// Kalman correction with learned observations drawn from `raw`.
pub fn update<M: StateSpaceModels + ?Sized>(
    fs: &FilterState,
    raw: &[f64],
    placement: &PlacementSet,
    models: &M,
    cfg: &FilterConfig,
) -> Result<(FilterState, UpdateDiagnostics)> {
    if !fs.awaiting_update {
        return Err(Error::State("update called before predict".into()));
    }
    let e = fs.ensemble.size();
    let prior = fs.ensemble.members();
    let hx = models.observe(prior)?;
    let seeds = seed::member_seeds(cfg.seed, Stream::Sensor, fs.step_index, e);
    let learned = models.sense(raw, placement, &seeds)?;
    let learned_mean = column_mean(&learned);
    let noise = models.noise_diag(&learned_mean)?;
    let (posterior, trace) =
        kalman_update(prior, &hx, &learned, &noise, cfg.jitter, cfg.max_jitter, fs.step_index)?;
    let predicted_obs_mean = column_mean(&hx);
    let ensemble = Ensemble::new(posterior)?;
    let updated_mean = ensemble.raw_mean();
    if !updated_mean.iter().all(|v| v.is_finite()) {
        return Err(Error::Divergence {
            step: fs.step_index,
            jitter: trace.jitter_used,
            reason: "non-finite posterior mean".into(),
            innovation_covariance: trace.innovation_covariance.iter().copied().collect(),
        });
    }
    let next = FilterState {
        ensemble,
        step_index: fs.step_index + 1,
        last_innovation: &learned_mean - &predicted_obs_mean,
        predicted_mean: fs.predicted_mean.clone(),
        updated_mean,
        awaiting_update: false,
    };
    Ok((
        next,
        UpdateDiagnostics {
            innovation_covariance: trace.innovation_covariance,
            kalman_gain: trace.gain,
            predicted_obs_mean,
            noise_diag: noise,
            jitter_used: trace.jitter_used,
        },
    ))
}

/// One row of a filtered trajectory, in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub timestamp: f64,
    pub predicted_mean: DVector<f64>,
    pub updated_mean: DVector<f64>,
    pub ensemble_std: DVector<f64>,
    pub innovation: DVector<f64>,
    pub observed: bool,
    pub diagnostics: Option<UpdateDiagnostics>,
    pub elapsed_s: f64,
}

impl StepRecord {
    pub fn predicted_state(&self) -> Result<RobotState> {
        RobotState::from_slice(self.predicted_mean.as_slice())
    }

    pub fn updated_state(&self) -> Result<RobotState> {
        RobotState::from_slice(self.updated_mean.as_slice())
    }

    pub fn is_robot_state(&self) -> bool {
        self.updated_mean.len() == STATE_DIM
    }
}

/// Alternates predict and update over `frames`. Frames whose `missing` flag is
/// set are predicted only.
pub fn run_sequence_masked<M, F>(
    init: &Ensemble,
    frames: &[F],
    missing: Option<&[bool]>,
    models: &M,
    cfg: &FilterConfig,
) -> Result<Vec<StepRecord>>
where
    M: StateSpaceModels + ?Sized,
    F: FilterInput,
{
    cfg.validate()?;
    if let Some(mask) = missing {
        if mask.len() != frames.len() {
            return Err(invalid(format!(
                "missing mask has {} entries for {} frames",
                mask.len(),
                frames.len()
            )));
        }
    }
    if let Some(k) = frames
        .windows(2)
        .position(|w| w[1].timestamp() <= w[0].timestamp())
    {
        return Err(invalid(format!(
            "frame {} timestamp {} does not follow {}",
            k + 1,
            frames[k + 1].timestamp(),
            frames[k].timestamp()
        )));
    }
    if init.size() != cfg.ensemble_size {
        return Err(invalid(format!(
            "initial ensemble has {} members, config expects {}",
            init.size(),
            cfg.ensemble_size
        )));
    }
    let n = frames.len();
    let mut state = FilterState::from_physical(init, models)?;
    let mut means = Packed::default();
    let mut spread = Packed::default();
    let mut diag = Packed::default();
    let mut diag_rows = Vec::with_capacity(n);
    let mut shapes = ((0, 0), (0, 0));
    let mut meta = Vec::with_capacity(n);
    for (k, frame) in frames.iter().enumerate() {
        let started = Instant::now();
        let predicted = predict(&state, frame.action(), frame.frequency(), models, cfg)?;
        let skip = missing.is_some_and(|m| m[k]);
        let next = if skip {
            diag_rows.push(None);
            predicted.skip_update()?
        } else {
            let (s, d) = update(&predicted, frame.raw(), &frame.placement(), models, cfg)?;
            shapes = (d.innovation_covariance.shape(), d.kalman_gain.shape());
            diag_rows.push(Some(d.jitter_used));
            diag.push(
                n,
                &[
                    d.innovation_covariance.as_slice(),
                    d.kalman_gain.as_slice(),
                    d.predicted_obs_mean.as_slice(),
                    d.noise_diag.as_slice(),
                ],
            );
            s
        };
        let elapsed_s = started.elapsed().as_secs_f64();
        means.push(
            n,
            &[
                models.decode_state(next.predicted_mean()).as_slice(),
                models.decode_state(next.updated_mean()).as_slice(),
            ],
        );
        spread.push(
            n,
            &[
                models.decode_spread(&next.ensemble().std()).as_slice(),
                models.decode_spread(next.last_innovation()).as_slice(),
            ],
        );
        meta.push((frame.timestamp(), elapsed_s));
        state = next;
    }

    let mut out = Vec::with_capacity(n);
    let mut d = 0;
    for (k, ((timestamp, elapsed_s), jitter)) in meta.into_iter().zip(diag_rows).enumerate() {
        let [pred, upd] = means.row(k);
        let [std, innov] = spread.row(k);
        let diagnostics = jitter.map(|jitter_used| {
            let [s, g, po, nd] = diag.row(d);
            d += 1;
            let ((sr, sc), (gr, gc)) = shapes;
            UpdateDiagnostics {
                innovation_covariance: DMatrix::from_column_slice(sr, sc, s),
                kalman_gain: DMatrix::from_column_slice(gr, gc, g),
                predicted_obs_mean: DVector::from_column_slice(po),
                noise_diag: DVector::from_column_slice(nd),
                jitter_used,
            }
        });
        out.push(StepRecord {
            step: k as u64,
            timestamp,
            predicted_mean: DVector::from_column_slice(pred),
            updated_mean: DVector::from_column_slice(upd),
            ensemble_std: DVector::from_column_slice(std),
            innovation: DVector::from_column_slice(innov),
            observed: jitter.is_some(),
            diagnostics,
            elapsed_s,
        });
    }
    Ok(out)
}

/// Fixed-layout rows of several vectors in one buffer, reserved for the whole
/// run on first use. Keeping a long run's outputs out of the allocator until
/// the end stops them from fragmenting the heap between the large per-step
/// temporaries.
struct Packed<const K: usize> {
    widths: [usize; K],
    data: Vec<f64>,
}

impl<const K: usize> Default for Packed<K> {
    fn default() -> Self {
        Self {
            widths: [0; K],
            data: Vec::new(),
        }
    }
}

impl<const K: usize> Packed<K> {
    fn push(&mut self, rows: usize, parts: &[&[f64]; K]) {
        if self.data.capacity() == 0 {
            for (w, p) in self.widths.iter_mut().zip(parts) {
                *w = p.len();
            }
            self.data.reserve_exact(rows * self.widths.iter().sum::<usize>());
        }
        for (w, p) in self.widths.iter().zip(parts) {
            debug_assert_eq!(*w, p.len());
            self.data.extend_from_slice(p);
        }
    }

    fn row(&self, i: usize) -> [&[f64]; K] {
        let stride: usize = self.widths.iter().sum();
        let mut at = i * stride;
        self.widths.map(|w| {
            let part = &self.data[at..at + w];
            at += w;
            part
        })
    }
}

pub fn run_sequence<M, F>(
    init: &Ensemble,
    frames: &[F],
    models: &M,
    cfg: &FilterConfig,
) -> Result<Vec<StepRecord>>
where
    M: StateSpaceModels + ?Sized,
    F: FilterInput,
{
    run_sequence_masked(init, frames, None, models, cfg)
}

/// Writes `step,timestamp,pred_*,upd_*,std_*,innov_*,observed` rows. Means are
/// exported with unit quaternions.
pub fn write_trajectory_csv<W: std::io::Write>(records: &[StepRecord], out: W) -> Result<()> {
    const NAMES: [&str; STATE_DIM] = ["x", "y", "z", "qx", "qy", "qz", "qw"];
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["step".to_string(), "timestamp".to_string()];
    for prefix in ["pred", "upd", "std", "innov"] {
        header.extend(NAMES.iter().map(|n| format!("{prefix}_{n}")));
    }
    header.push("observed".to_string());
    w.write_record(&header).map_err(csv_io)?;
    for r in records {
        if !r.is_robot_state() {
            return Err(invalid("trajectory export requires 7-dimensional states"));
        }
        let mut row = vec![r.step.to_string(), r.timestamp.to_string()];
        row.extend(r.predicted_state()?.to_array().iter().map(f64::to_string));
        row.extend(r.updated_state()?.to_array().iter().map(f64::to_string));
        row.extend(r.ensemble_std.iter().map(f64::to_string));
        row.extend(r.innovation.iter().map(f64::to_string));
        row.push(u8::from(r.observed).to_string());
        w.write_record(&row).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
