//! Central-difference checks of every sub-module's reverse pass, with dropout
//! masks held fixed by reusing the member seeds.

use denkf_core::embed::EmbeddingConfig;
use denkf_core::models::{NoiseModel, ObservationModel, SensorModel, TransitionModel};
use denkf_core::nn::{Mode, Network};
use denkf_core::{seed, PlacementSet, SamplingFrequency};
use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;
const PROBES: usize = 300;

fn normal(rows: usize, cols: usize, s: u64) -> DMatrix<f64> {
    let mut rng = seed::rng(s);
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= TOL * analytic.abs().max(numeric.abs()) + 1e-9
}

/// Checks a random subset of parameters. `eval` returns the loss and the
/// ReLU sign pattern; probes that flip any sign are skipped.
fn check_params<F>(net: &Network, analytic: &[f64], eval: F, tag: &str)
where
    F: Fn(&Network) -> (f64, Vec<bool>),
{
    let (_, base) = eval(net);
    let n = net.param_count();
    let mut rng = seed::rng(n as u64);
    let picks = sample(&mut rng, n, PROBES.min(n));
    let mut checked = 0;
    for i in picks.iter() {
        let mut plus = net.clone();
        *plus.param_mut(i).unwrap() += EPS;
        let mut minus = net.clone();
        *minus.param_mut(i).unwrap() -= EPS;
        let (lp, pp) = eval(&plus);
        let (lm, pm) = eval(&minus);
        if pp != base || pm != base {
            continue;
        }
        let numeric = (lp - lm) / (2.0 * EPS);
        assert!(
            close(analytic[i], numeric),
            "{tag} param {i}: analytic {} numeric {numeric}",
            analytic[i]
        );
        checked += 1;
    }
    assert!(
        checked * 10 >= picks.len() * 9,
        "{tag}: only {checked} of {} probes away from kinks",
        picks.len()
    );
}

fn check_inputs<F>(x: &DMatrix<f64>, analytic: &DMatrix<f64>, eval: F, tag: &str)
where
    F: Fn(&DMatrix<f64>) -> (f64, Vec<bool>),
{
    let (_, base) = eval(x);
    let mut checked = 0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus[i] += EPS;
        let mut minus = x.clone();
        minus[i] -= EPS;
        let (lp, pp) = eval(&plus);
        let (lm, pm) = eval(&minus);
        if pp != base || pm != base {
            continue;
        }
        let numeric = (lp - lm) / (2.0 * EPS);
        assert!(
            close(analytic[i], numeric),
            "{tag} input {i}: analytic {} numeric {numeric}",
            analytic[i]
        );
        checked += 1;
    }
    assert!(checked * 10 >= x.len() * 9, "{tag}: {checked} inputs checked");
}

#[test]
fn transition_gradients() {
    let model = TransitionModel::new(0.1, Some(EmbeddingConfig::default()), 11).unwrap();
    let states = normal(6, 7, 1);
    let action: Vec<f64> = normal(1, 40, 2).iter().copied().collect();
    let proj = normal(6, 7, 3);
    let seeds = seed::member_seeds(4, seed::Stream::Transition, 0, 6);
    let f = SamplingFrequency::Hz30;
    let run = |m: &TransitionModel, s: &DMatrix<f64>| {
        let (y, tape) = m.forward_batch(s, &action, f, Mode::Stochastic(&seeds)).unwrap();
        (y.component_mul(&proj).sum(), tape.relu_pattern(&m.net))
    };
    let (_, tape) = model
        .forward_batch(&states, &action, f, Mode::Stochastic(&seeds))
        .unwrap();
    let (grads, d_states) = model.backward(tape, &proj).unwrap();
    check_params(
        &model.net,
        &grads.flat(),
        |n| run(&TransitionModel::from_network(n.clone(), model.temporal).unwrap(), &states),
        "transition",
    );
    check_inputs(&states, &d_states, |s| run(&model, s), "transition");
}

#[test]
fn observation_gradients() {
    let model = ObservationModel::new(12).unwrap();
    let states = normal(5, 7, 5);
    let proj = normal(5, 7, 6);
    let run = |m: &ObservationModel, s: &DMatrix<f64>| {
        let (y, tape) = m.forward_batch(s).unwrap();
        (y.component_mul(&proj).sum(), tape.relu_pattern(&m.net))
    };
    let (_, tape) = model.forward_batch(&states).unwrap();
    let (grads, d_states) = model.backward(tape, &proj).unwrap();
    check_params(
        &model.net,
        &grads.flat(),
        |n| run(&ObservationModel::from_network(n.clone()).unwrap(), &states),
        "observation",
    );
    check_inputs(&states, &d_states, |s| run(&model, s), "observation");
}

#[test]
fn sensor_gradients() {
    let placement = PlacementSet::new([2, 6, 10, 15, 19]).unwrap();
    let raw: Vec<f64> = normal(1, 30, 7).iter().copied().collect();
    let seeds = seed::member_seeds(8, seed::Stream::Sensor, 2, 4);
    let proj = normal(4, 7, 9);
    for pe in [None, Some(EmbeddingConfig::default())] {
        let model = SensorModel::new(0.1, pe, 13).unwrap();
        let run = |m: &SensorModel| {
            let (y, tape) = m.forward_batch(&raw, &placement, &seeds).unwrap();
            (y.component_mul(&proj).sum(), tape.relu_pattern(&m.net))
        };
        let (_, tape) = model.forward_batch(&raw, &placement, &seeds).unwrap();
        let grads = model.backward(tape, &proj).unwrap();
        check_params(
            &model.net,
            &grads.flat(),
            |n| run(&SensorModel::from_network(n.clone(), pe).unwrap()),
            "sensor",
        );
    }
}

#[test]
fn noise_gradients() {
    let model = NoiseModel::new(14).unwrap();
    let mean = DVector::from_iterator(7, normal(1, 7, 10).iter().copied());
    let proj = DVector::from_iterator(7, normal(1, 7, 11).iter().copied());
    let run = |m: &NoiseModel, x: &DVector<f64>| {
        let (d, tape) = m.forward(x).unwrap();
        (d.dot(&proj), tape.relu_pattern(&m.net))
    };
    let (_, tape) = model.forward(&mean).unwrap();
    let (grads, d_mean) = model.backward(tape, &proj).unwrap();
    check_params(
        &model.net,
        &grads.flat(),
        |n| run(&NoiseModel::from_network(n.clone()).unwrap(), &mean),
        "noise",
    );
    let x = DMatrix::from_row_slice(1, 7, mean.as_slice());
    let d = DMatrix::from_row_slice(1, 7, d_mean.as_slice());
    check_inputs(
        &x,
        &d,
        |v| run(&model, &DVector::from_row_slice(v.as_slice())),
        "noise",
    );
}
