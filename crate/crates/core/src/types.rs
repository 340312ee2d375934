//! Domain vocabulary shared by every other module: robot poses, actuator
//! commands, raw IMU readings, sensor placements, sampling rates and the
//! ensemble that carries the filter belief.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const STATE_DIM: usize = 7;
pub const ACTION_DIM: usize = 40;
pub const IMU_COUNT: usize = 5;
pub const IMU_CHANNELS: usize = 6;
pub const RAW_OBS_DIM: usize = IMU_COUNT * IMU_CHANNELS;
pub const PLACEMENT_SLOTS: usize = 20;

/// End-effector pose: position in millimetres and an `(x, y, z, w)` quaternion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub position: [f64; 3],
    pub orientation: [f64; 4],
}

impl RobotState {
    pub const REST_ORIENTATION: [f64; 4] = [0.0, 0.0, 0.0, 1.0];

    pub fn new(position: [f64; 3], orientation: [f64; 4]) -> Result<Self> {
        let s = Self {
            position,
            orientation,
        };
        if !s.to_array().iter().all(|v| v.is_finite()) {
            return Err(invalid("robot state has non-finite entries"));
        }
        Ok(s)
    }

    /// Builds a state from a raw 7-vector and renormalizes the quaternion.
    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != STATE_DIM {
            return Err(invalid(format!(
                "state vector has length {}, expected {STATE_DIM}",
                v.len()
            )));
        }
        let s = Self::new([v[0], v[1], v[2]], [v[3], v[4], v[5], v[6]])?;
        Ok(s.normalized())
    }

    pub fn to_array(&self) -> [f64; STATE_DIM] {
        let [x, y, z] = self.position;
        let [qx, qy, qz, qw] = self.orientation;
        [x, y, z, qx, qy, qz, qw]
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_row_slice(&self.to_array())
    }

    /// Returns the state with a unit quaternion. A zero quaternion maps to identity.
    pub fn normalized(mut self) -> Self {
        let n = self.orientation.iter().map(|q| q * q).sum::<f64>().sqrt();
        if n > 0.0 && n.is_finite() {
            self.orientation.iter_mut().for_each(|q| *q /= n);
        } else {
            self.orientation = Self::REST_ORIENTATION;
        }
        self
    }

    pub fn quaternion_norm(&self) -> f64 {
        self.orientation.iter().map(|q| q * q).sum::<f64>().sqrt()
    }
}

fn check_vector(name: &str, values: &[f64], len: usize) -> Result<()> {
    if values.len() != len {
        return Err(invalid(format!(
            "{name} has length {}, expected {len}",
            values.len()
        )));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(invalid(format!("{name}[{i}] is not finite")));
    }
    Ok(())
}

/// Pressure command for the 40 pneumatic actuators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Action(Vec<f64>);

impl Action {
    pub fn new(pressures: Vec<f64>) -> Result<Self> {
        check_vector("action", &pressures, ACTION_DIM)?;
        Ok(Self(pressures))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Action {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Action> for Vec<f64> {
    fn from(a: Action) -> Self {
        a.0
    }
}

/// Five IMUs, each contributing three accelerations and three angular rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct RawObservation(Vec<f64>);

impl RawObservation {
    pub fn new(imu: Vec<f64>) -> Result<Self> {
        check_vector("raw observation", &imu, RAW_OBS_DIM)?;
        Ok(Self(imu))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// The six channels of the `k`-th mounted IMU.
    pub fn imu(&self, k: usize) -> &[f64] {
        &self.0[k * IMU_CHANNELS..(k + 1) * IMU_CHANNELS]
    }
}

impl TryFrom<Vec<f64>> for RawObservation {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<RawObservation> for Vec<f64> {
    fn from(o: RawObservation) -> Self {
        o.0
    }
}

/// Mounting locations of the five IMUs, stored sorted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct PlacementSet([u8; IMU_COUNT]);

impl PlacementSet {
    /// Accepts labels in any order; they are sorted into canonical form.
    pub fn new(labels: [u8; IMU_COUNT]) -> Result<Self> {
        let mut sorted = labels;
        sorted.sort_unstable();
        for &l in &sorted {
            if !(1..=PLACEMENT_SLOTS as u8).contains(&l) {
                return Err(invalid(format!(
                    "placement label {l} outside 1..={PLACEMENT_SLOTS}"
                )));
            }
        }
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid(format!("duplicate placement label in {labels:?}")));
        }
        Ok(Self(sorted))
    }

    pub fn labels(&self) -> [u8; IMU_COUNT] {
        self.0
    }
}

impl TryFrom<Vec<u8>> for PlacementSet {
    type Error = Error;
    fn try_from(v: Vec<u8>) -> Result<Self> {
        let arr: [u8; IMU_COUNT] = v
            .as_slice()
            .try_into()
            .map_err(|_| invalid(format!("placement needs {IMU_COUNT} labels, got {}", v.len())))?;
        Self::new(arr)
    }
}

impl From<PlacementSet> for Vec<u8> {
    fn from(p: PlacementSet) -> Self {
        p.0.to_vec()
    }
}

impl fmt::Display for PlacementSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let l = self.0;
        write!(f, "[{},{},{},{},{}]", l[0], l[1], l[2], l[3], l[4])
    }
}

/// The placement sets of the ten canonical recordings D1..D10.
pub const CANONICAL_PLACEMENTS: [[u8; IMU_COUNT]; 10] = [
    [1, 4, 9, 14, 18],
    [1, 5, 9, 15, 19],
    [2, 6, 10, 15, 19],
    [2, 6, 10, 16, 20],
    [2, 6, 10, 13, 17],
    [3, 7, 11, 14, 18],
    [3, 7, 11, 16, 20],
    [4, 8, 12, 16, 20],
    [4, 8, 12, 14, 18],
    [4, 8, 12, 15, 19],
];

pub fn canonical_placements() -> Vec<PlacementSet> {
    CANONICAL_PLACEMENTS
        .iter()
        .map(|l| PlacementSet::new(*l).expect("canonical placements are valid"))
        .collect()
}

/// The four supported sampling rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum SamplingFrequency {
    Hz5,
    Hz10,
    Hz30,
    Hz50,
}

impl SamplingFrequency {
    pub const ALL: [SamplingFrequency; 4] = [Self::Hz5, Self::Hz10, Self::Hz30, Self::Hz50];

    pub fn from_hz(hz: u32) -> Result<Self> {
        match hz {
            5 => Ok(Self::Hz5),
            10 => Ok(Self::Hz10),
            30 => Ok(Self::Hz30),
            50 => Ok(Self::Hz50),
            _ => Err(invalid(format!(
                "unsupported sampling frequency {hz} Hz (expected 5, 10, 30 or 50)"
            ))),
        }
    }

    pub fn hz(self) -> u32 {
        match self {
            Self::Hz5 => 5,
            Self::Hz10 => 10,
            Self::Hz30 => 30,
            Self::Hz50 => 50,
        }
    }

    /// Position in the enumerated set, used as the temporal embedding index.
    pub fn ordinal(self) -> usize {
        match self {
            Self::Hz5 => 0,
            Self::Hz10 => 1,
            Self::Hz30 => 2,
            Self::Hz50 => 3,
        }
    }

    pub fn period(self) -> f64 {
        1.0 / self.hz() as f64
    }
}

impl TryFrom<u32> for SamplingFrequency {
    type Error = Error;
    fn try_from(hz: u32) -> Result<Self> {
        Self::from_hz(hz)
    }
}

impl From<SamplingFrequency> for u32 {
    fn from(f: SamplingFrequency) -> Self {
        f.hz()
    }
}

impl fmt::Display for SamplingFrequency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}Hz", self.hz())
    }
}

/// Learned observation: same layout as [`RobotState`] but not renormalized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnedObservation(pub [f64; STATE_DIM]);

impl LearnedObservation {
    pub fn new(values: [f64; STATE_DIM]) -> Result<Self> {
        check_vector("learned observation", &values, STATE_DIM)?;
        Ok(Self(values))
    }
}

/// Ensemble of state hypotheses, one member per row.
///
/// The state dimension is not fixed to 7 so the same algebra can be checked
/// against scalar and small linear systems.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: DMatrix<f64>,
}

impl Ensemble {
    pub fn new(members: DMatrix<f64>) -> Result<Self> {
        if members.nrows() < 2 {
            return Err(invalid(format!(
                "ensemble needs at least 2 members, got {}",
                members.nrows()
            )));
        }
        if members.ncols() == 0 {
            return Err(invalid("ensemble members have zero dimension"));
        }
        Ok(Self { members })
    }

    pub fn from_states(states: &[RobotState]) -> Result<Self> {
        let rows: Vec<f64> = states.iter().flat_map(|s| s.to_array()).collect();
        Self::new(DMatrix::from_row_slice(states.len(), STATE_DIM, &rows))
    }

    pub fn size(&self) -> usize {
        self.members.nrows()
    }

    pub fn dim(&self) -> usize {
        self.members.ncols()
    }

    pub fn members(&self) -> &DMatrix<f64> {
        &self.members
    }

    pub fn into_members(self) -> DMatrix<f64> {
        self.members
    }

    /// Column-wise arithmetic mean, without quaternion renormalization.
    pub fn raw_mean(&self) -> DVector<f64> {
        column_mean(&self.members)
    }

    /// Rows are member minus the raw mean; columns sum to zero.
    pub fn anomalies(&self) -> DMatrix<f64> {
        center_rows(&self.members)
    }

    /// Per-dimension sample standard deviation (divides by E-1).
    pub fn std(&self) -> DVector<f64> {
        let a = self.anomalies();
        let e = self.size() as f64;
        DVector::from_iterator(
            self.dim(),
            a.column_iter().map(|c| (c.norm_squared() / (e - 1.0)).sqrt()),
        )
    }
}

/// Ensemble mean as a pose with a unit quaternion.
pub fn ensemble_mean(ens: &Ensemble) -> Result<RobotState> {
    if ens.dim() != STATE_DIM {
        return Err(invalid(format!(
            "ensemble dimension {} is not a robot state",
            ens.dim()
        )));
    }
    RobotState::from_slice(ens.raw_mean().as_slice())
}

pub fn anomaly_matrix(ens: &Ensemble) -> DMatrix<f64> {
    ens.anomalies()
}

pub(crate) fn column_mean(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

pub(crate) fn center_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = column_mean(m);
    let mut out = m.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mean[j]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn member(x: f64) -> RobotState {
        RobotState::new([x, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]).unwrap()
    }

    #[test]
    fn mean_of_two_members() {
        let ens = Ensemble::from_states(&[member(1.0), member(3.0)]).unwrap();
        let m = ensemble_mean(&ens).unwrap();
        assert_eq!(m.position, [2.0, 0.0, 0.0]);
        assert_eq!(m.orientation, [0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn mean_of_identical_members_is_that_member() {
        let s = RobotState::new([4.0, -2.0, 300.0], [0.0, 0.6, 0.0, 0.8]).unwrap();
        let ens = Ensemble::from_states(&[s; 5]).unwrap();
        let m = ensemble_mean(&ens).unwrap();
        for (a, b) in m.to_array().iter().zip(s.to_array()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn gaussian_ensemble_mean_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let states: Vec<RobotState> = (0..32)
            .map(|_| {
                let p: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
                RobotState::new(p, [0.0, 0.0, 0.0, 1.0]).unwrap()
            })
            .collect();
        let m = ensemble_mean(&Ensemble::from_states(&states).unwrap()).unwrap();
        for p in m.position {
            assert!(p.abs() < 4.0 / 32f64.sqrt(), "{p}");
        }
    }

    #[test]
    fn single_member_ensemble_rejected() {
        assert!(Ensemble::from_states(&[member(1.0)]).is_err());
        assert!(Ensemble::from_states(&[]).is_err());
    }

    #[test]
    fn two_point_anomaly() {
        let ens = Ensemble::from_states(&[member(1.0), member(3.0)]).unwrap();
        let a = anomaly_matrix(&ens);
        assert_eq!(a[(0, 0)], -1.0);
        assert_eq!(a[(1, 0)], 1.0);
        assert!(a.columns(1, 6).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identical_members_have_zero_anomaly() {
        let ens = Ensemble::from_states(&[member(7.5); 4]).unwrap();
        assert!(anomaly_matrix(&ens).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn random_anomaly_columns_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = DMatrix::from_fn(32, 7, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            100.0 * v
        });
        let a = anomaly_matrix(&Ensemble::new(m).unwrap());
        for c in a.column_iter() {
            assert!(c.sum().abs() < 1e-10);
        }
    }

    #[test]
    fn placement_is_sorted_and_validated() {
        let p = PlacementSet::new([18, 1, 14, 9, 5]).unwrap();
        assert_eq!(p.labels(), [1, 5, 9, 14, 18]);
        assert!(PlacementSet::new([0, 1, 2, 3, 4]).is_err());
        assert!(PlacementSet::new([1, 2, 3, 4, 21]).is_err());
        assert!(PlacementSet::new([1, 1, 2, 3, 4]).is_err());
        assert!(PlacementSet::try_from(vec![1u8, 2, 3]).is_err());
    }

    #[test]
    fn frequency_membership() {
        assert!(SamplingFrequency::from_hz(20).is_err());
        for f in SamplingFrequency::ALL {
            assert_eq!(SamplingFrequency::from_hz(f.hz()).unwrap(), f);
        }
    }

    #[test]
    fn vector_types_check_length_and_finiteness() {
        assert!(Action::new(vec![0.5; 39]).is_err());
        assert!(Action::new(vec![0.5; 40]).is_ok());
        let mut bad = vec![0.0; 30];
        bad[4] = f64::NAN;
        assert!(RawObservation::new(bad).is_err());
        assert!(RobotState::new([f64::INFINITY, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn ensemble_strategy() -> impl Strategy<Value = DMatrix<f64>> {
            (2usize..40).prop_flat_map(|e| {
                proptest::collection::vec(-1e3f64..1e3, e * STATE_DIM)
                    .prop_map(move |v| DMatrix::from_row_slice(e, STATE_DIM, &v))
            })
        }

        proptest! {
            #[test]
            fn anomaly_rows_sum_to_zero(m in ensemble_strategy()) {
                let a = Ensemble::new(m).unwrap().anomalies();
                for c in a.column_iter() {
                    prop_assert!(c.sum().abs() < 1e-10);
                }
            }

            #[test]
            fn mean_is_translation_equivariant(
                m in ensemble_strategy(),
                shift in proptest::array::uniform3(-500f64..500.0),
            ) {
                let base = Ensemble::new(m.clone()).unwrap().raw_mean();
                let mut shifted = m;
                for mut row in shifted.row_iter_mut() {
                    for k in 0..3 {
                        row[k] += shift[k];
                    }
                }
                let moved = Ensemble::new(shifted).unwrap().raw_mean();
                for k in 0..3 {
                    let expect = base[k] + shift[k];
                    // entries are bounded by 1.5e3 in magnitude
                    prop_assert!((moved[k] - expect).abs() <= 1e-12 * 2e3);
                }
            }

            #[test]
            fn placement_serialization_round_trips(
                labels in proptest::sample::subsequence((1u8..=20).collect::<Vec<_>>(), 5)
            ) {
                let p = PlacementSet::try_from(labels).unwrap();
                let json = serde_json::to_string(&p).unwrap();
                let back: PlacementSet = serde_json::from_str(&json).unwrap();
                prop_assert_eq!(p, back);
            }
        }
    }
}
