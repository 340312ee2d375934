//! Small feed-forward network engine with dropout sampling and reverse-mode
//! gradients.
//!
//! Networks evaluate a whole batch at once: inputs are `n x in_dim` matrices,
//! one sample per row. In stochastic mode every row gets its own seed, and each
//! stochastic layer (other than the first) masks its input with inverted
//! dropout drawn from that row's generator. The network input itself is never
//! masked.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    /// Dropout stays active at inference for stochastic layers.
    pub stochastic: bool,
}

impl LayerSpec {
    pub fn fc(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
            stochastic: false,
        }
    }

    pub fn snn(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            stochastic: true,
            ..Self::fc(in_dim, out_dim, activation)
        }
    }
}

/// Evaluation mode of a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Mode<'a> {
    Deterministic,
    /// One seed per input row.
    Stochastic(&'a [u64]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    specs: Vec<LayerSpec>,
    /// `in_dim x out_dim` per layer.
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
    dropout_rate: f64,
}

/// Gradients (or any other per-parameter quantity) shaped like a network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGrads {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

/// Intermediate values of one forward pass, consumed by [`GradientTape::backward`].
///
/// ```compile_fail
/// # use denkf_core::nn::*;
/// # use nalgebra::DMatrix;
/// let net = Network::zeros(vec![LayerSpec::fc(2, 2, Activation::None)], 0.0).unwrap();
/// let (y, tape) = net.forward_batch(&DMatrix::zeros(1, 2), Mode::Deterministic).unwrap();
/// tape.backward(&net, &y).unwrap();
/// tape.backward(&net, &y).unwrap(); // the tape was moved by the first call
/// ```
#[derive(Debug, Clone)]
pub struct GradientTape {
    /// Input of each layer after masking.
    inputs: Vec<DMatrix<f64>>,
    masks: Vec<Option<DMatrix<f64>>>,
    preacts: Vec<DMatrix<f64>>,
}

fn check_specs(specs: &[LayerSpec], dropout_rate: f64) -> Result<()> {
    if specs.is_empty() {
        return Err(invalid("network needs at least one layer"));
    }
    if !(0.0..1.0).contains(&dropout_rate) {
        return Err(invalid(format!("dropout rate {dropout_rate} not in [0, 1)")));
    }
    for (k, s) in specs.iter().enumerate() {
        if s.in_dim == 0 || s.out_dim == 0 {
            return Err(invalid(format!("layer {k} has a zero dimension")));
        }
        if k > 0 && specs[k - 1].out_dim != s.in_dim {
            return Err(invalid(format!(
                "layer {k} expects {} inputs but layer {} produces {}",
                s.in_dim,
                k - 1,
                specs[k - 1].out_dim
            )));
        }
    }
    Ok(())
}

impl Network {
    /// All-zero parameters.
    pub fn zeros(specs: Vec<LayerSpec>, dropout_rate: f64) -> Result<Self> {
        check_specs(&specs, dropout_rate)?;
        let weights = specs
            .iter()
            .map(|s| DMatrix::zeros(s.in_dim, s.out_dim))
            .collect();
        let biases = specs.iter().map(|s| DVector::zeros(s.out_dim)).collect();
        Ok(Self {
            specs,
            weights,
            biases,
            dropout_rate,
        })
    }

    /// He-uniform weights for ReLU layers, Xavier-uniform for linear layers, zero biases.
    pub fn init(specs: Vec<LayerSpec>, dropout_rate: f64, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(specs, dropout_rate)?;
        let mut rng = seed::rng(seed);
        for (s, w) in net.specs.iter().zip(net.weights.iter_mut()) {
            let limit = match s.activation {
                Activation::Relu => (6.0 / s.in_dim as f64).sqrt(),
                Activation::None => (6.0 / (s.in_dim + s.out_dim) as f64).sqrt(),
            };
            w.iter_mut()
                .for_each(|v| *v = rng.random_range(-limit..limit));
        }
        Ok(net)
    }

    pub fn from_parts(
        specs: Vec<LayerSpec>,
        dropout_rate: f64,
        weights: Vec<DMatrix<f64>>,
        biases: Vec<DVector<f64>>,
    ) -> Result<Self> {
        check_specs(&specs, dropout_rate)?;
        if weights.len() != specs.len() || biases.len() != specs.len() {
            return Err(invalid("parameter count does not match layer count"));
        }
        for (k, s) in specs.iter().enumerate() {
            if weights[k].shape() != (s.in_dim, s.out_dim) || biases[k].len() != s.out_dim {
                return Err(invalid(format!("layer {k} parameter shape mismatch")));
            }
        }
        Ok(Self {
            specs,
            weights,
            biases,
            dropout_rate,
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [DMatrix<f64>] {
        &mut self.weights
    }

    pub fn biases(&self) -> &[DVector<f64>] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [DVector<f64>] {
        &mut self.biases
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn set_dropout_rate(&mut self, rate: f64) -> Result<()> {
        check_specs(&self.specs, rate)?;
        self.dropout_rate = rate;
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.specs[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.specs[self.specs.len() - 1].out_dim
    }

    pub fn param_count(&self) -> usize {
        self.specs.iter().map(|s| (s.in_dim + 1) * s.out_dim).sum()
    }

    /// Parameters flattened layer by layer: weights (column-major), then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b.as_slice());
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(invalid(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut off = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let n = w.len();
            w.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
            let n = b.len();
            b.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Mutable access to a single parameter in [`Network::params`] order.
    pub fn param_mut(&mut self, mut index: usize) -> Option<&mut f64> {
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            if index < w.len() {
                return w.as_mut_slice().get_mut(index);
            }
            index -= w.len();
            if index < b.len() {
                return b.as_mut_slice().get_mut(index);
            }
            index -= b.len();
        }
        None
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn sample_masks(&self, rows: usize, seeds: &[u64]) -> Vec<Option<DMatrix<f64>>> {
        let p = self.dropout_rate;
        let keep_scale = 1.0 / (1.0 - p);
        let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| seed::rng(s)).collect();
        self.specs
            .iter()
            .enumerate()
            .map(|(k, s)| {
                if k == 0 || !s.stochastic || p == 0.0 {
                    return None;
                }
                let mut m = DMatrix::zeros(rows, s.in_dim);
                for (r, rng) in rngs.iter_mut().enumerate() {
                    for c in 0..s.in_dim {
                        if rng.random::<f64>() >= p {
                            m[(r, c)] = keep_scale;
                        }
                    }
                }
                Some(m)
            })
            .collect()
    }

    /// Forward pass over a batch of row vectors.
    pub fn forward_batch(
        &self,
        input: &DMatrix<f64>,
        mode: Mode<'_>,
    ) -> Result<(DMatrix<f64>, GradientTape)> {
        self.forward_batch_with_offset(input, mode, None)
    }

    /// Like [`Network::forward_batch`], additionally adding a constant vector
    /// to the input of layer `offset.0` (before its dropout mask).
    pub fn forward_batch_with_offset(
        &self,
        input: &DMatrix<f64>,
        mode: Mode<'_>,
        offset: Option<(usize, &DVector<f64>)>,
    ) -> Result<(DMatrix<f64>, GradientTape)> {
        if let Some((layer, v)) = offset {
            if layer >= self.specs.len() || v.len() != self.specs[layer].in_dim {
                return Err(invalid(format!(
                    "latent offset of length {} does not fit layer {layer}",
                    v.len()
                )));
            }
        }
        if input.ncols() != self.input_dim() {
            return Err(invalid(format!(
                "network input has {} columns, expected {}",
                input.ncols(),
                self.input_dim()
            )));
        }
        let masks = match mode {
            Mode::Deterministic => vec![None; self.specs.len()],
            Mode::Stochastic(seeds) => {
                if seeds.len() != input.nrows() {
                    return Err(invalid(format!(
                        "{} seeds for {} input rows",
                        seeds.len(),
                        input.nrows()
                    )));
                }
                self.sample_masks(input.nrows(), seeds)
            }
        };
        let n = self.specs.len();
        let mut inputs = Vec::with_capacity(n);
        let mut preacts = Vec::with_capacity(n);
        let mut x = input.clone();
        for k in 0..n {
            if let Some((layer, v)) = offset {
                if layer == k {
                    for (j, mut col) in x.column_iter_mut().enumerate() {
                        col.add_scalar_mut(v[j]);
                    }
                }
            }
            if let Some(m) = &masks[k] {
                x.component_mul_assign(m);
            }
            let mut z = &x * &self.weights[k];
            for (j, mut col) in z.column_iter_mut().enumerate() {
                col.add_scalar_mut(self.biases[k][j]);
            }
            let a = match self.specs[k].activation {
                Activation::Relu => z.map(|v| v.max(0.0)),
                Activation::None => z.clone(),
            };
            inputs.push(x);
            preacts.push(z);
            x = a;
        }
        Ok((
            x,
            GradientTape {
                inputs,
                masks,
                preacts,
            },
        ))
    }

    /// Single-sample forward pass; `seed` is used only in stochastic mode.
    pub fn forward(
        &self,
        input: &[f64],
        stochastic: Option<u64>,
    ) -> Result<(DVector<f64>, GradientTape)> {
        let x = DMatrix::from_row_slice(1, input.len(), input);
        let seeds;
        let mode = match stochastic {
            Some(s) => {
                seeds = [s];
                Mode::Stochastic(&seeds)
            }
            None => Mode::Deterministic,
        };
        let (y, tape) = self.forward_batch(&x, mode)?;
        Ok((DVector::from_iterator(y.ncols(), y.iter().copied()), tape))
    }
}

impl GradientTape {
    /// Reverse pass. Returns parameter gradients summed over the batch and
    /// the gradient with respect to the network input.
    pub fn backward(
        self,
        net: &Network,
        output_grad: &DMatrix<f64>,
    ) -> Result<(NetworkGrads, DMatrix<f64>)> {
        let n = net.specs.len();
        if self.inputs.len() != n {
            return Err(Error::State("tape was recorded on a different network".into()));
        }
        let rows = self.inputs[0].nrows();
        if output_grad.shape() != (rows, net.output_dim()) {
            return Err(invalid(format!(
                "output gradient has shape {:?}, expected ({rows}, {})",
                output_grad.shape(),
                net.output_dim()
            )));
        }
        let mut wg = Vec::with_capacity(n);
        let mut bg = Vec::with_capacity(n);
        let mut g = output_grad.clone();
        for k in (0..n).rev() {
            if net.specs[k].activation == Activation::Relu {
                g.zip_apply(&self.preacts[k], |gv, z| {
                    if z <= 0.0 {
                        *gv = 0.0
                    }
                });
            }
            wg.push(self.inputs[k].transpose() * &g);
            bg.push(DVector::from_iterator(
                g.ncols(),
                g.column_iter().map(|c| c.sum()),
            ));
            let mut gin = &g * net.weights[k].transpose();
            if let Some(m) = &self.masks[k] {
                gin.component_mul_assign(m);
            }
            g = gin;
        }
        wg.reverse();
        bg.reverse();
        Ok((
            NetworkGrads {
                weights: wg,
                biases: bg,
            },
            g,
        ))
    }

    /// Sign pattern of every ReLU pre-activation, used to detect when a
    /// finite-difference probe crosses a kink.
    pub fn relu_pattern(&self, net: &Network) -> Vec<bool> {
        self.preacts
            .iter()
            .zip(&net.specs)
            .filter(|(_, s)| s.activation == Activation::Relu)
            .flat_map(|(z, _)| z.iter().map(|v| *v > 0.0).collect::<Vec<_>>())
            .collect()
    }
}

impl NetworkGrads {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            weights: net
                .weights
                .iter()
                .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
                .collect(),
            biases: net.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &NetworkGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.weights.iter_mut().for_each(|w| *w *= s);
        self.biases.iter_mut().for_each(|b| *b *= s);
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b.as_slice());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn matches(&self, net: &Network) -> bool {
        self.weights.len() == net.weights.len()
            && self
                .weights
                .iter()
                .zip(&net.weights)
                .all(|(a, b)| a.shape() == b.shape())
            && self
                .biases
                .iter()
                .zip(&net.biases)
                .all(|(a, b)| a.len() == b.len())
    }
}

/// Adam with the usual coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(net: &Network) -> Self {
        let n = net.param_count();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    pub fn restore(step: u64, m: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if m.len() != v.len() {
            return Err(invalid("adam moment vectors differ in length"));
        }
        Ok(Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step,
            m,
            v,
        })
    }

    /// Applies one update and returns the new parameter snapshot.
    pub fn step(&mut self, net: &Network, grads: &NetworkGrads, lr: f64) -> Result<Network> {
        if !grads.matches(net) || self.m.len() != net.param_count() {
            return Err(invalid("gradient shape does not match network"));
        }
        if !grads.is_finite() {
            return Err(Error::Training("non-finite gradient".into()));
        }
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(invalid(format!("learning rate {lr} must be finite and >= 0")));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut params = net.params();
        for (i, g) in grads.flat().into_iter().enumerate() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
        let mut out = net.clone();
        out.set_params(&params)?;
        if !out.is_finite() {
            return Err(Error::Training("optimizer produced non-finite parameters".into()));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn relu_net(dims: &[usize], seed: u64) -> Network {
        let specs = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let act = if k + 2 == dims.len() {
                    Activation::None
                } else {
                    Activation::Relu
                };
                LayerSpec::snn(w[0], w[1], act)
            })
            .collect();
        Network::init(specs, 0.2, seed).unwrap()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Network::zeros(
            vec![
                LayerSpec::fc(4, 8, Activation::Relu),
                LayerSpec::fc(8, 3, Activation::None),
            ],
            0.0,
        )
        .unwrap();
        let (y, _) = net.forward(&[1.0, -2.0, 3.0, 0.5], None).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_layer_passes_input() {
        let mut net = Network::zeros(vec![LayerSpec::fc(3, 3, Activation::None)], 0.0).unwrap();
        net.weights_mut()[0] = DMatrix::identity(3, 3);
        let (y, _) = net.forward(&[1.5, -2.0, 0.25], None).unwrap();
        assert_eq!(y.as_slice(), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn dimension_checks() {
        assert!(Network::zeros(
            vec![
                LayerSpec::fc(4, 8, Activation::Relu),
                LayerSpec::fc(7, 3, Activation::None)
            ],
            0.0
        )
        .is_err());
        let net = relu_net(&[4, 8, 2], 1);
        assert!(net.forward(&[1.0; 5], None).is_err());
        let x = DMatrix::zeros(3, 4);
        assert!(net.forward_batch(&x, Mode::Stochastic(&[1, 2])).is_err());
    }

    #[test]
    fn stochastic_mode_is_seeded() {
        let net = relu_net(&[16, 64, 64, 4], 5);
        let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let (a, _) = net.forward(&x, Some(42)).unwrap();
        let (b, _) = net.forward(&x, Some(42)).unwrap();
        assert_eq!(a, b);
        let mut differing = 0;
        for s in 0..100 {
            let (c, _) = net.forward(&x, Some(1000 + s)).unwrap();
            let (d, _) = net.forward(&x, Some(2000 + s)).unwrap();
            if c != d {
                differing += 1;
            }
        }
        assert!(differing >= 99, "{differing}");
    }

    #[test]
    fn zero_dropout_matches_deterministic() {
        let mut net = relu_net(&[6, 32, 32, 3], 9);
        net.set_dropout_rate(0.0).unwrap();
        let x: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        let (a, _) = net.forward(&x, Some(77)).unwrap();
        let (b, _) = net.forward(&x, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn linear_layer_weight_gradient_is_outer_product() {
        let mut net = Network::zeros(vec![LayerSpec::fc(3, 2, Activation::None)], 0.0).unwrap();
        net.weights_mut()[0] = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x = [0.5, -1.0, 2.0];
        let (_, tape) = net.forward(&x, None).unwrap();
        let g = DMatrix::from_row_slice(1, 2, &[3.0, -2.0]);
        let (grads, _) = tape.backward(&net, &g).unwrap();
        // dL/dW[i][j] = x_i g_j with W stored in x out
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(grads.weights[0][(i, j)], x[i] * g[(0, j)]);
            }
        }
        assert_eq!(grads.biases[0].as_slice(), &[3.0, -2.0]);
    }

    #[test]
    fn zero_output_grad_gives_zero_gradients() {
        let net = relu_net(&[5, 16, 4], 2);
        let (_, tape) = net.forward(&[0.3; 5], Some(4)).unwrap();
        let (grads, gin) = tape.backward(&net, &DMatrix::zeros(1, 4)).unwrap();
        assert!(grads.flat().iter().all(|v| *v == 0.0));
        assert!(gin.iter().all(|v| *v == 0.0));
    }

    /// Central differences on a 3-layer ReLU net with masks held fixed.
    #[test]
    fn gradients_match_finite_differences() {
        let net = relu_net(&[6, 12, 10, 3], 21);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = DMatrix::from_fn(4, 6, |_, _| StandardNormal.sample(&mut rng));
        let proj = DMatrix::from_fn(4, 3, |_, _| StandardNormal.sample(&mut rng));
        let seeds = [1u64, 2, 3, 4];
        let loss = |n: &Network| -> (f64, Vec<bool>) {
            let (y, tape) = n.forward_batch(&x, Mode::Stochastic(&seeds)).unwrap();
            (y.component_mul(&proj).sum(), tape.relu_pattern(n))
        };
        let (y, tape) = net.forward_batch(&x, Mode::Stochastic(&seeds)).unwrap();
        let _ = y;
        let (grads, _) = tape.backward(&net, &proj).unwrap();
        let analytic = grads.flat();
        let (_, base_pattern) = loss(&net);
        let eps = 1e-5;
        let mut checked = 0;
        for i in 0..net.param_count() {
            let mut plus = net.clone();
            *plus.param_mut(i).unwrap() += eps;
            let mut minus = net.clone();
            *minus.param_mut(i).unwrap() -= eps;
            let (lp, pp) = loss(&plus);
            let (lm, pm) = loss(&minus);
            if pp != base_pattern || pm != base_pattern {
                continue;
            }
            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic[i];
            let scale = a.abs().max(numeric.abs());
            assert!(
                (a - numeric).abs() <= 1e-4 * scale + 1e-9,
                "param {i}: analytic {a} numeric {numeric}"
            );
            checked += 1;
        }
        assert!(checked > net.param_count() * 9 / 10);
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let net = relu_net(&[3, 4, 2], 3);
        let mut opt = Adam::new(&net);
        let next = opt.step(&net, &NetworkGrads::zeros_like(&net), 1e-3).unwrap();
        assert_eq!(next.params(), net.params());
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut net = Network::zeros(vec![LayerSpec::fc(1, 1, Activation::None)], 0.0).unwrap();
        net.weights_mut()[0][(0, 0)] = 0.5;
        let mut opt = Adam::new(&net);
        let mut g = NetworkGrads::zeros_like(&net);
        g.weights[0][(0, 0)] = 1.0;
        let next = opt.step(&net, &g, 1e-3).unwrap();
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
        let moved = 0.5 - next.weights()[0][(0, 0)];
        assert!((moved - 1e-3).abs() < 1e-10, "{moved}");
    }

    #[test]
    fn adam_decreases_convex_quadratic() {
        // loss = 0.5 * ||W - T||^2 over a 4x3 linear layer
        let mut net = Network::zeros(vec![LayerSpec::fc(4, 3, Activation::None)], 0.0).unwrap();
        let target = DMatrix::from_fn(4, 3, |i, j| (i as f64) - (j as f64) * 0.5);
        let loss = |n: &Network| 0.5 * (&n.weights()[0] - &target).norm_squared();
        let start = loss(&net);
        let mut opt = Adam::new(&net);
        for _ in 0..100 {
            let mut g = NetworkGrads::zeros_like(&net);
            g.weights[0] = &net.weights()[0] - &target;
            net = opt.step(&net, &g, 1e-2).unwrap();
        }
        assert!(loss(&net) < start);
    }

    #[test]
    fn adam_rejects_nan_gradient() {
        let net = relu_net(&[2, 2], 1);
        let mut opt = Adam::new(&net);
        let mut g = NetworkGrads::zeros_like(&net);
        g.biases[0][0] = f64::NAN;
        assert!(matches!(opt.step(&net, &g, 1e-3), Err(Error::Training(_))));
    }
}
