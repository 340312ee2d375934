//! The four learnable sub-modules and the normalized pipeline that plugs them
//! into the filter.
//!
//! | module      | layers                                                       |
//! |-------------|--------------------------------------------------------------|
//! | transition  | 2×SNN(64, ReLU), 2×SNN(128, ReLU), SNN(7)                     |
//! | observation | 2×fc(32, ReLU), 2×fc(64, ReLU), fc(7)                        |
//! | noise       | 2×fc(16, ReLU), fc(7)                                        |
//! | sensor      | fc(128, ReLU), 2×SNN(512, ReLU), SNN(256), SNN(128), SNN(7)  |
//!
//! The transition network predicts a state increment. With the temporal
//! embedding enabled, the frequency embedding is added to its 64-wide latent
//! (the output of the first layer). With the positional embedding enabled,
//! each IMU's six channels are concatenated with the embedding of its mounting
//! label before entering the sensor network.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::embed::{embed_frequency, embed_placement, EmbeddingConfig};
use crate::error::{invalid, Result};
use crate::filter::StateSpaceModels;
use crate::nn::{Activation, GradientTape, LayerSpec, Mode, Network, NetworkGrads};
use crate::seed::{self, Stream};
use crate::types::{
    Action, LearnedObservation, PlacementSet, RawObservation, RobotState, SamplingFrequency,
    ACTION_DIM, IMU_CHANNELS, IMU_COUNT, RAW_OBS_DIM, STATE_DIM,
};

pub const DEFAULT_DROPOUT: f64 = 0.1;
pub const NOISE_FLOOR: f64 = 1e-6;
/// Width of the transition latent the temporal embedding is added to.
pub const TRANSITION_LATENT: usize = 64;

/// Embedding configuration of a trained pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// No embeddings; trained on a single placement and rate.
    #[serde(rename = "fix")]
    Fix,
    /// Positional embedding of sensor placement.
    #[serde(rename = "pe")]
    Pe,
    /// Positional and temporal embeddings.
    #[serde(rename = "pe+te")]
    PeTe,
}

impl Variant {
    pub fn positional(self) -> bool {
        !matches!(self, Variant::Fix)
    }

    pub fn temporal(self) -> bool {
        matches!(self, Variant::PeTe)
    }
}

impl FromStr for Variant {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fix" => Ok(Variant::Fix),
            "pe" => Ok(Variant::Pe),
            "pe+te" | "pe-te" | "pete" => Ok(Variant::PeTe),
            _ => Err(invalid(format!("unknown variant {s:?} (fix, pe, pe+te)"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Fix => "fix",
            Variant::Pe => "pe",
            Variant::PeTe => "pe+te",
        })
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_width(name: &str, m: &DMatrix<f64>, cols: usize) -> Result<()> {
    if m.ncols() != cols {
        return Err(invalid(format!(
            "{name} has {} columns, expected {cols}",
            m.ncols()
        )));
    }
    Ok(())
}

fn row(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(1, v.len(), v)
}

fn first_row(m: &DMatrix<f64>) -> [f64; STATE_DIM] {
    std::array::from_fn(|j| m[(0, j)])
}

/// Stochastic state transition `x' = x + f(x, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionModel {
    pub net: Network,
    pub temporal: Option<EmbeddingConfig>,
}

impl TransitionModel {
    pub fn architecture() -> Vec<LayerSpec> {
        vec![
            LayerSpec::snn(STATE_DIM + ACTION_DIM, 64, Activation::Relu),
            LayerSpec::snn(64, 64, Activation::Relu),
            LayerSpec::snn(64, 128, Activation::Relu),
            LayerSpec::snn(128, 128, Activation::Relu),
            LayerSpec::snn(128, STATE_DIM, Activation::None),
        ]
    }

    pub fn new(dropout: f64, temporal: Option<EmbeddingConfig>, seed: u64) -> Result<Self> {
        Self::from_network(Network::init(Self::architecture(), dropout, seed)?, temporal)
    }

    pub fn from_network(net: Network, temporal: Option<EmbeddingConfig>) -> Result<Self> {
        if net.input_dim() != STATE_DIM + ACTION_DIM || net.output_dim() != STATE_DIM {
            return Err(invalid("transition network must map 47 inputs to 7 outputs"));
        }
        if let Some(cfg) = temporal {
            if net.specs().len() < 2 || net.specs()[1].in_dim != cfg.d_model {
                return Err(invalid(format!(
                    "temporal embedding width {} does not match the transition latent",
                    cfg.d_model
                )));
            }
        }
        Ok(Self { net, temporal })
    }

    /// Batched sample; returns next states and the tape for the reverse pass.
    pub fn forward_batch(
        &self,
        states: &DMatrix<f64>,
        action: &[f64],
        frequency: SamplingFrequency,
        mode: Mode<'_>,
    ) -> Result<(DMatrix<f64>, GradientTape)> {
        check_width("transition states", states, STATE_DIM)?;
        if action.len() != ACTION_DIM {
            return Err(invalid(format!("action has length {}", action.len())));
        }
        let n = states.nrows();
        let mut input = DMatrix::zeros(n, STATE_DIM + ACTION_DIM);
        input.columns_mut(0, STATE_DIM).copy_from(states);
        for (j, a) in action.iter().enumerate() {
            input.column_mut(STATE_DIM + j).fill(*a);
        }
        let te = self.temporal.map(|cfg| embed_frequency(frequency, &cfg));
        let (delta, tape) = self
            .net
            .forward_batch_with_offset(&input, mode, te.as_ref().map(|v| (1, v)))?;
        Ok((states + delta, tape))
    }

    /// Returns parameter gradients and `dL/dstates`.
    pub fn backward(
        &self,
        tape: GradientTape,
        d_next: &DMatrix<f64>,
    ) -> Result<(NetworkGrads, DMatrix<f64>)> {
        let (grads, d_input) = tape.backward(&self.net, d_next)?;
        let d_states = d_next + d_input.columns(0, STATE_DIM);
        Ok((grads, d_states))
    }

    /// Single stochastic sample in model units; the returned quaternion is
    /// renormalized.
    pub fn transition_sample(
        &self,
        state: &RobotState,
        action: &Action,
        frequency: SamplingFrequency,
        seed: u64,
    ) -> Result<RobotState> {
        let (next, _) = self.forward_batch(
            &row(&state.to_array()),
            action.as_slice(),
            frequency,
            Mode::Stochastic(&[seed]),
        )?;
        RobotState::from_slice(&first_row(&next))
    }
}

/// Deterministic state-to-observation map.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationModel {
    pub net: Network,
}

impl ObservationModel {
    pub fn architecture() -> Vec<LayerSpec> {
        vec![
            LayerSpec::fc(STATE_DIM, 32, Activation::Relu),
            LayerSpec::fc(32, 32, Activation::Relu),
            LayerSpec::fc(32, 64, Activation::Relu),
            LayerSpec::fc(64, 64, Activation::Relu),
            LayerSpec::fc(64, STATE_DIM, Activation::None),
        ]
    }

    pub fn new(seed: u64) -> Result<Self> {
        Self::from_network(Network::init(Self::architecture(), 0.0, seed)?)
    }

    pub fn from_network(net: Network) -> Result<Self> {
        if net.input_dim() != STATE_DIM || net.output_dim() != STATE_DIM {
            return Err(invalid("observation network must map 7 inputs to 7 outputs"));
        }
        if net.specs().iter().any(|s| s.stochastic) {
            return Err(invalid("observation network must be deterministic"));
        }
        Ok(Self { net })
    }

    /// The standard architecture wired to compute the identity exactly, by
    /// carrying `relu(x)` and `relu(-x)` through the hidden layers.
    pub fn identity() -> Self {
        let mut net = Network::zeros(Self::architecture(), 0.0).expect("static architecture");
        let d = STATE_DIM;
        let w = net.weights_mut();
        for i in 0..d {
            w[0][(i, i)] = 1.0;
            w[0][(i, d + i)] = -1.0;
            w[4][(i, i)] = 1.0;
            w[4][(d + i, i)] = -1.0;
        }
        for layer in &mut w[1..4] {
            for i in 0..2 * d {
                layer[(i, i)] = 1.0;
            }
        }
        Self { net }
    }

    pub fn forward_batch(&self, states: &DMatrix<f64>) -> Result<(DMatrix<f64>, GradientTape)> {
        check_width("observation states", states, STATE_DIM)?;
        self.net.forward_batch(states, Mode::Deterministic)
    }

    pub fn backward(
        &self,
        tape: GradientTape,
        d_obs: &DMatrix<f64>,
    ) -> Result<(NetworkGrads, DMatrix<f64>)> {
        tape.backward(&self.net, d_obs)
    }

    pub fn observe(&self, state: &RobotState) -> Result<LearnedObservation> {
        let (y, _) = self.forward_batch(&row(&state.to_array()))?;
        LearnedObservation::new(first_row(&y))
    }
}

/// Stochastic map from raw IMU readings (plus placement embedding) to a
/// learned observation.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorModel {
    pub net: Network,
    pub positional: Option<EmbeddingConfig>,
}

impl SensorModel {
    pub fn input_dim(positional: Option<&EmbeddingConfig>) -> usize {
        match positional {
            Some(cfg) => IMU_COUNT * (IMU_CHANNELS + cfg.d_model),
            None => RAW_OBS_DIM,
        }
    }

    pub fn architecture(input_dim: usize) -> Vec<LayerSpec> {
        vec![
            LayerSpec::fc(input_dim, 128, Activation::Relu),
            LayerSpec::snn(128, 512, Activation::Relu),
            LayerSpec::snn(512, 512, Activation::Relu),
            LayerSpec::snn(512, 256, Activation::Relu),
            LayerSpec::snn(256, 128, Activation::Relu),
            LayerSpec::snn(128, STATE_DIM, Activation::None),
        ]
    }

    pub fn new(dropout: f64, positional: Option<EmbeddingConfig>, seed: u64) -> Result<Self> {
        let arch = Self::architecture(Self::input_dim(positional.as_ref()));
        Self::from_network(Network::init(arch, dropout, seed)?, positional)
    }

    pub fn from_network(net: Network, positional: Option<EmbeddingConfig>) -> Result<Self> {
        let expect = Self::input_dim(positional.as_ref());
        if net.input_dim() != expect || net.output_dim() != STATE_DIM {
            return Err(invalid(format!(
                "sensor network must map {expect} inputs to 7 outputs"
            )));
        }
        Ok(Self { net, positional })
    }

    /// Flat network input: each IMU's channels followed by its label embedding.
    pub fn build_input(&self, raw: &[f64], placement: &PlacementSet) -> Result<DVector<f64>> {
        if raw.len() != RAW_OBS_DIM {
            return Err(invalid(format!("raw observation has length {}", raw.len())));
        }
        let Some(cfg) = &self.positional else {
            return Ok(DVector::from_row_slice(raw));
        };
        let pe = embed_placement(placement, cfg);
        let width = IMU_CHANNELS + cfg.d_model;
        let mut v = DVector::zeros(IMU_COUNT * width);
        for k in 0..IMU_COUNT {
            let base = k * width;
            v.rows_mut(base, IMU_CHANNELS)
                .copy_from_slice(&raw[k * IMU_CHANNELS..(k + 1) * IMU_CHANNELS]);
            v.rows_mut(base + IMU_CHANNELS, cfg.d_model)
                .copy_from(&pe.row(k).transpose());
        }
        Ok(v)
    }

    /// One stochastic sample per seed.
    pub fn forward_batch(
        &self,
        raw: &[f64],
        placement: &PlacementSet,
        seeds: &[u64],
    ) -> Result<(DMatrix<f64>, GradientTape)> {
        let x = self.build_input(raw, placement)?;
        let input = DMatrix::from_fn(seeds.len(), x.len(), |_, j| x[j]);
        self.net.forward_batch(&input, Mode::Stochastic(seeds))
    }

    pub fn backward(&self, tape: GradientTape, d_obs: &DMatrix<f64>) -> Result<NetworkGrads> {
        Ok(tape.backward(&self.net, d_obs)?.0)
    }

    pub fn sense(
        &self,
        raw: &RawObservation,
        placement: &PlacementSet,
        seed: u64,
    ) -> Result<LearnedObservation> {
        let (y, _) = self.forward_batch(raw.as_slice(), placement, &[seed])?;
        LearnedObservation::new(first_row(&y))
    }
}

/// Diagonal measurement noise, `softplus(g(ỹ)) + 1e-6`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub net: Network,
}

/// Tape of a noise evaluation: network tape plus the pre-softplus output.
#[derive(Debug, Clone)]
pub struct NoiseTape {
    tape: GradientTape,
    raw_out: DVector<f64>,
}

impl NoiseTape {
    pub fn relu_pattern(&self, net: &Network) -> Vec<bool> {
        self.tape.relu_pattern(net)
    }
}

impl NoiseModel {
    pub fn architecture() -> Vec<LayerSpec> {
        vec![
            LayerSpec::fc(STATE_DIM, 16, Activation::Relu),
            LayerSpec::fc(16, 16, Activation::Relu),
            LayerSpec::fc(16, STATE_DIM, Activation::None),
        ]
    }

    pub fn new(seed: u64) -> Result<Self> {
        Self::from_network(Network::init(Self::architecture(), 0.0, seed)?)
    }

    pub fn from_network(net: Network) -> Result<Self> {
        if net.input_dim() != STATE_DIM || net.output_dim() != STATE_DIM {
            return Err(invalid("noise network must map 7 inputs to 7 outputs"));
        }
        Ok(Self { net })
    }

    pub fn forward(&self, learned_mean: &DVector<f64>) -> Result<(DVector<f64>, NoiseTape)> {
        if learned_mean.len() != STATE_DIM {
            return Err(invalid(format!(
                "noise input has length {}",
                learned_mean.len()
            )));
        }
        let (out, tape) = self.net.forward(learned_mean.as_slice(), None)?;
        let diag = out.map(|v| softplus(v) + NOISE_FLOOR);
        Ok((diag, NoiseTape { tape, raw_out: out }))
    }

    /// Returns parameter gradients and `dL/dỹ̄`.
    pub fn backward(
        &self,
        tape: NoiseTape,
        d_diag: &DVector<f64>,
    ) -> Result<(NetworkGrads, DVector<f64>)> {
        let d_out = d_diag.zip_map(&tape.raw_out, |g, z| g * sigmoid(z));
        let (grads, d_in) = tape.tape.backward(&self.net, &row(d_out.as_slice()))?;
        Ok((grads, d_in.row(0).transpose()))
    }

    pub fn noise_diag(&self, learned_mean: &LearnedObservation) -> Result<DVector<f64>> {
        Ok(self.forward(&DVector::from_row_slice(&learned_mean.0))?.0)
    }
}

/// The four sub-modules of one pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSet {
    pub variant: Variant,
    pub embedding: EmbeddingConfig,
    pub transition: TransitionModel,
    pub observation: ObservationModel,
    pub sensor: SensorModel,
    pub noise: NoiseModel,
}

impl ModelSet {
    pub fn new(variant: Variant, embedding: EmbeddingConfig, dropout: f64, seed: u64) -> Result<Self> {
        if variant.temporal() && embedding.d_model != TRANSITION_LATENT {
            return Err(invalid(format!(
                "temporal embedding needs d_model = {TRANSITION_LATENT}"
            )));
        }
        let s = |k| seed::derive(seed, Stream::Weights, 0, k);
        Ok(Self {
            variant,
            embedding,
            transition: TransitionModel::new(
                dropout,
                variant.temporal().then_some(embedding),
                s(0),
            )?,
            // The observation space shares the state layout, so hψ starts as
            // the identity; a random start leaves the early gain near zero.
            observation: ObservationModel::identity(),
            sensor: SensorModel::new(dropout, variant.positional().then_some(embedding), s(2))?,
            noise: NoiseModel::new(s(3))?,
        })
    }

    pub fn networks(&self) -> [&Network; 4] {
        [
            &self.transition.net,
            &self.observation.net,
            &self.sensor.net,
            &self.noise.net,
        ]
    }

    pub fn networks_mut(&mut self) -> [&mut Network; 4] {
        [
            &mut self.transition.net,
            &mut self.observation.net,
            &mut self.sensor.net,
            &mut self.noise.net,
        ]
    }
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Channels with (near) zero spread get unit scale.
    pub fn fit<'a>(dim: usize, rows: impl Iterator<Item = &'a [f64]>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for r in rows {
            if r.len() != dim {
                return Err(invalid(format!("row of length {} when fitting {dim} channels", r.len())));
            }
            n += 1;
            for j in 0..dim {
                sum[j] += r[j];
                sq[j] += r[j] * r[j];
            }
        }
        if n == 0 {
            return Err(invalid("cannot fit normalization on zero rows"));
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = (0..dim)
            .map(|j| {
                let var = (sq[j] / nf - mean[j] * mean[j]).max(0.0);
                let s = var.sqrt();
                if s > 1e-9 * mean[j].abs().max(1.0) {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn encode(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    pub fn decode(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| x * s + m)
            .collect()
    }
}

/// z-score statistics of states, actions and raw observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub state: ChannelStats,
    pub action: ChannelStats,
    pub raw: ChannelStats,
}

impl Normalizer {
    pub fn identity() -> Self {
        Self {
            state: ChannelStats::identity(STATE_DIM),
            action: ChannelStats::identity(ACTION_DIM),
            raw: ChannelStats::identity(RAW_OBS_DIM),
        }
    }
}

/// A model set operating in normalized coordinates, usable by the filter.
#[derive(Debug, Clone, PartialEq)]
pub struct Denkf {
    pub models: ModelSet,
    pub normalizer: Normalizer,
}

impl Denkf {
    pub fn new(models: ModelSet, normalizer: Normalizer) -> Self {
        Self { models, normalizer }
    }

    pub fn variant(&self) -> Variant {
        self.models.variant
    }
}

impl StateSpaceModels for Denkf {
    fn state_dim(&self) -> usize {
        STATE_DIM
    }

    fn propagate(
        &self,
        members: &DMatrix<f64>,
        action: &[f64],
        frequency: SamplingFrequency,
        seeds: &[u64],
    ) -> Result<DMatrix<f64>> {
        let a = self.normalizer.action.encode(action);
        Ok(self
            .models
            .transition
            .forward_batch(members, &a, frequency, Mode::Stochastic(seeds))?
            .0)
    }

    fn observe(&self, members: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.models.observation.forward_batch(members)?.0)
    }

    fn sense(&self, raw: &[f64], placement: &PlacementSet, seeds: &[u64]) -> Result<DMatrix<f64>> {
        let r = self.normalizer.raw.encode(raw);
        Ok(self.models.sensor.forward_batch(&r, placement, seeds)?.0)
    }

    fn noise_diag(&self, learned_mean: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.models.noise.forward(learned_mean)?.0)
    }

    fn encode_state(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(self.normalizer.state.encode(x.as_slice()))
    }

    fn decode_state(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(self.normalizer.state.decode(z.as_slice()))
    }

    fn decode_spread(&self, s: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            s.len(),
            s.iter().zip(&self.normalizer.state.std).map(|(v, k)| v * k),
        )
    }
}
