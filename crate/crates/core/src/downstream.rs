//! Missing-observation rollouts and virtual-force detection.

use std::io::Write;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::TrajectoryDataset;
use crate::error::{invalid, Error, Result};
use crate::filter::{csv_io, run_sequence_masked, FilterConfig, FilterInput, StateSpaceModels, StepRecord};
use crate::seed;
use crate::types::{Ensemble, RawObservation, RobotState, RAW_OBS_DIM};

/// Window sizes used for sensor-failure experiments, as fractions of the run.
pub const WINDOW_FRACTIONS: [f64; 2] = [0.125, 0.0625];
pub const DEFAULT_P: f64 = 10.0;
pub const DEFAULT_PERCENTILE: f64 = 0.99;

/// Per-frame flag, `true` where the observation is unavailable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingMask(Vec<bool>);

impl MissingMask {
    pub fn new(flags: Vec<bool>) -> Self {
        Self(flags)
    }

    pub fn none(len: usize) -> Self {
        Self(vec![false; len])
    }

    pub fn all(len: usize) -> Self {
        Self(vec![true; len])
    }

    /// One contiguous window of `round(fraction·len)` frames starting at `start`.
    pub fn window(len: usize, start: usize, fraction: f64) -> Result<Self> {
        let w = Self::window_len(len, fraction)?;
        if start + w > len {
            return Err(invalid(format!(
                "window of {w} frames at {start} overruns {len} frames"
            )));
        }
        let mut flags = vec![false; len];
        flags[start..start + w].iter_mut().for_each(|f| *f = true);
        Ok(Self(flags))
    }

    /// Window at a random start, leaving at least `margin` observed frames on
    /// either side.
    pub fn random_window(len: usize, fraction: f64, margin: usize, seed: u64) -> Result<Self> {
        let w = Self::window_len(len, fraction)?;
        if len < w + 2 * margin {
            return Err(invalid(format!(
                "{len} frames cannot hold a {w}-frame window with margin {margin}"
            )));
        }
        let start = seed::rng(seed).random_range(margin..=len - w - margin);
        Self::window(len, start, fraction)
    }

    fn window_len(len: usize, fraction: f64) -> Result<usize> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(invalid(format!("window fraction {fraction} outside (0, 1]")));
        }
        Ok(((fraction * len as f64).round() as usize).max(1))
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Maximal runs of missing frames.
    pub fn windows(&self) -> Vec<Range<usize>> {
        intervals(&self.0)
    }
}

fn intervals(flags: &[bool]) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, f) in flags.iter().enumerate() {
        match (f, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push(s..i);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(s..flags.len());
    }
    out
}

/// Filters `frames`, running the transition alone wherever the mask is set.
pub fn run_with_missing<M, F>(
    init: &Ensemble,
    frames: &[F],
    mask: &MissingMask,
    models: &M,
    cfg: &FilterConfig,
) -> Result<Vec<StepRecord>>
where
    M: StateSpaceModels + ?Sized,
    F: FilterInput,
{
    run_sequence_masked(init, frames, Some(mask.as_slice()), models, cfg)
}

/// Mean over `range` of the per-step ensemble standard deviation, averaged
/// over state channels in physical units.
pub fn mean_spread(records: &[StepRecord], range: Range<usize>) -> f64 {
    let n = range.len().max(1) as f64;
    records[range].iter().map(|r| r.ensemble_std.mean()).sum::<f64>() / n
}

/// Steps after `from` until the spread is back within `factor·reference`.
pub fn recovery_steps(records: &[StepRecord], from: usize, reference: f64, factor: f64) -> Option<usize> {
    records[from..]
        .iter()
        .position(|r| r.ensemble_std.mean() <= factor * reference)
        .map(|k| k + 1)
}

/// Minkowski-p distance of two equally long vectors, optionally weighted per
/// channel. Evaluated as `m·(Σ (|d_i|/m)^p)^(1/p)` with `m = max |d_i|` so
/// large `p` cannot overflow.
pub fn minkowski(a: &[f64], b: &[f64], p: f64, weights: Option<&[f64]>) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(invalid(format!("Minkowski order must be at least 1, got {p}")));
    }
    if a.len() != b.len() || weights.is_some_and(|w| w.len() != a.len()) {
        return Err(invalid("Minkowski operands differ in length"));
    }
    let d: Vec<f64> = (0..a.len())
        .map(|i| weights.map_or(1.0, |w| w[i]) * (a[i] - b[i]).abs())
        .collect();
    let m = d.iter().copied().fold(0.0, f64::max);
    if m == 0.0 {
        return Ok(0.0);
    }
    if p.is_infinite() {
        return Ok(m);
    }
    Ok(m * d.iter().map(|v| (v / m).powf(p)).sum::<f64>().powf(1.0 / p))
}

/// Virtual force `δ = ‖x̄⁺ − x̄⁻‖_p` over the raw 7-vector.
pub fn minkowski_delta(updated: &RobotState, predicted: &RobotState, p: f64) -> Result<f64> {
    minkowski(&updated.to_array(), &predicted.to_array(), p, None)
}

#[derive(Debug, Clone, Copy)]
pub enum ThresholdPolicy<'a> {
    Fixed(f64),
    /// `percentile` of δ over a force-free calibration run.
    Calibrated {
        calibration: &'a [StepRecord],
        percentile: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForceTrace {
    pub delta: Vec<f64>,
    pub threshold: f64,
    /// Maximal step intervals with `δ > threshold`.
    pub alarms: Vec<Range<usize>>,
}

impl ForceTrace {
    pub fn alarm_flags(&self) -> Vec<bool> {
        self.delta.iter().map(|d| *d > self.threshold).collect()
    }

    pub fn alarm_rate(&self) -> f64 {
        let n = self.delta.len().max(1) as f64;
        self.alarm_flags().iter().filter(|f| **f).count() as f64 / n
    }

    pub fn peak(&self, range: Range<usize>) -> f64 {
        self.delta[range].iter().copied().fold(0.0, f64::max)
    }

    /// `step,delta,alarm` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "delta", "alarm"]).map_err(csv_io)?;
        for (i, (d, a)) in self.delta.iter().zip(self.alarm_flags()).enumerate() {
            w.write_record([i.to_string(), d.to_string(), u8::from(a).to_string()])
                .map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// δ for every step of a trajectory, from its raw predicted and updated means.
pub fn deltas(trajectory: &[StepRecord], p: f64, weights: Option<&[f64]>) -> Result<Vec<f64>> {
    trajectory
        .iter()
        .map(|r| {
            minkowski(
                r.updated_mean.as_slice(),
                r.predicted_mean.as_slice(),
                p,
                weights,
            )
        })
        .collect()
}

/// Linear-interpolated percentile, `q` in `[0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(invalid("percentile of an empty sample"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(invalid(format!("percentile {q} outside [0, 1]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

pub fn detect_forces(
    trajectory: &[StepRecord],
    p: f64,
    policy: ThresholdPolicy<'_>,
) -> Result<ForceTrace> {
    let delta = deltas(trajectory, p, None)?;
    let threshold = match policy {
        ThresholdPolicy::Fixed(t) => t,
        ThresholdPolicy::Calibrated {
            calibration,
            percentile: q,
        } => {
            if calibration.is_empty() {
                return Err(Error::Config(
                    "force detection needs a force-free calibration run".into(),
                ));
            }
            percentile(&deltas(calibration, p, None)?, q)?
        }
    };
    let flags: Vec<bool> = delta.iter().map(|d| *d > threshold).collect();
    Ok(ForceTrace {
        alarms: intervals(&flags),
        delta,
        threshold,
    })
}

/// Copy of `ds` with `bias` added to the raw observations of `range`, a
/// stand-in for an external push on the arm.
pub fn inject_bias(ds: &TrajectoryDataset, range: Range<usize>, bias: &[f64]) -> Result<TrajectoryDataset> {
    if bias.len() != RAW_OBS_DIM {
        return Err(invalid(format!("bias has length {}", bias.len())));
    }
    if range.end > ds.len() {
        return Err(invalid(format!("bias range {range:?} exceeds {} frames", ds.len())));
    }
    let mut out = ds.clone();
    for f in &mut out.frames[range] {
        let v: Vec<f64> = f.raw.as_slice().iter().zip(bias).map(|(a, b)| a + b).collect();
        f.raw = RawObservation::new(v)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn minkowski_examples() {
        let zero = RobotState::new([1.0, 2.0, 3.0], [0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(minkowski_delta(&zero, &zero, 10.0).unwrap(), 0.0);
        let a = [3.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let b = [0.0; 7];
        assert!((minkowski(&a, &b, 2.0, None).unwrap() - 5.0).abs() < 1e-12);
        let ones = [1.0; 7];
        let d = minkowski(&ones, &b, 10.0, None).unwrap();
        assert!((d - 7f64.powf(0.1)).abs() < 1e-12);
        assert!((d - 1.2148).abs() < 1e-4);
        assert!(minkowski(&ones, &b, 0.5, None).is_err());
        let w = [2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(minkowski(&ones, &b, 3.0, Some(&w)).unwrap(), 2.0);
    }

    #[test]
    fn huge_order_does_not_overflow() {
        let a = [1e30, 5e29, 0.0];
        let d = minkowski(&a, &[0.0; 3], 10.0, None).unwrap();
        assert!(d.is_finite() && d >= 1e30);
    }

    #[test]
    fn masks() {
        let m = MissingMask::window(80, 10, 0.125).unwrap();
        assert_eq!(m.windows(), vec![10..20]);
        assert_eq!(MissingMask::window(160, 0, 0.0625).unwrap().windows(), vec![0..10]);
        assert!(MissingMask::window(80, 75, 0.125).is_err());
        assert!(MissingMask::window(80, 0, 0.0).is_err());
        let r = MissingMask::random_window(200, 0.125, 30, 4).unwrap();
        let w = &r.windows()[0];
        assert_eq!(w.len(), 25);
        assert!(w.start >= 30 && w.end <= 170);
        assert_eq!(MissingMask::all(3).windows(), vec![0..3]);
        assert!(MissingMask::none(3).windows().is_empty());
    }

    #[test]
    fn percentile_interpolates() {
        let v: Vec<f64> = (0..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.99).unwrap(), 99.0);
        assert_eq!(percentile(&[1.0, 3.0], 0.5).unwrap(), 2.0);
        assert!(percentile(&[], 0.5).is_err());
    }

    fn record(pred: f64, upd: f64) -> StepRecord {
        use nalgebra::DVector;
        let v = |x: f64| DVector::from_vec(vec![x, 0.0, 500.0, 0.0, 0.0, 0.0, 1.0]);
        StepRecord {
            step: 0,
            timestamp: 0.0,
            predicted_mean: v(pred),
            updated_mean: v(upd),
            ensemble_std: DVector::zeros(7),
            innovation: DVector::zeros(7),
            observed: true,
            diagnostics: None,
            elapsed_s: 0.0,
        }
    }

    #[test]
    fn alarms_are_maximal_intervals() {
        let traj: Vec<StepRecord> = [0.0, 5.0, 6.0, 0.5, 7.0, 0.0]
            .iter()
            .map(|d| record(0.0, *d))
            .collect();
        let t = detect_forces(&traj, 10.0, ThresholdPolicy::Fixed(1.0)).unwrap();
        assert_eq!(t.alarms, vec![1..3, 4..5]);
        assert!(t.delta.iter().all(|d| *d >= 0.0));
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().nth(2).unwrap(), "1,5,1");
        let err = detect_forces(
            &traj,
            10.0,
            ThresholdPolicy::Calibrated {
                calibration: &[],
                percentile: 0.99,
            },
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn calibrated_threshold_limits_false_alarms() {
        let calib: Vec<StepRecord> = (0..500)
            .map(|i| record(0.0, ((i * 7919) % 500) as f64 / 100.0))
            .collect();
        let t = detect_forces(
            &calib,
            10.0,
            ThresholdPolicy::Calibrated {
                calibration: &calib,
                percentile: DEFAULT_PERCENTILE,
            },
        )
        .unwrap();
        assert!(t.alarm_rate() <= 0.01);
    }

    proptest! {
        #[test]
        fn minkowski_is_symmetric_and_definite(
            a in proptest::array::uniform7(-1e3f64..1e3),
            b in proptest::array::uniform7(-1e3f64..1e3),
        ) {
            let ab = minkowski(&a, &b, 10.0, None).unwrap();
            prop_assert_eq!(ab, minkowski(&b, &a, 10.0, None).unwrap());
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab == 0.0, a == b);
        }

        #[test]
        fn norm_order_monotone(
            v in proptest::array::uniform7(-1e3f64..1e3),
            q in 1.0f64..20.0,
            extra in 0.0f64..20.0,
        ) {
            let p = q + extra;
            let zero = [0.0; 7];
            let np = minkowski(&v, &zero, p, None).unwrap();
            let nq = minkowski(&v, &zero, q, None).unwrap();
            prop_assert!(np <= nq * (1.0 + 1e-12));
        }
    }
}
