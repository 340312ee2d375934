//! TOML settings for each verb. Every field has a default; unknown keys are
//! rejected.

use std::path::Path;

use denkf_core::models::{Variant, DEFAULT_DROPOUT};
use denkf_core::sim::SyntheticArmConfig;
use denkf_core::train::{EvalConfig, TrainConfig};
use denkf_core::SamplingFrequency;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::usage(format!("config {}: {e}", p.display())))?;
            toml::from_str(&text)
                .map_err(|e| CliError::usage(format!("config {}: {e}", p.display())))
        }
    }
}

pub fn render<T: Serialize>(settings: &T) -> CliResult<String> {
    toml::to_string_pretty(settings).map_err(|e| CliError::Failed(e.to_string()))
}

fn field(name: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::usage(format!("config field `{name}`: {msg}"))
}

pub fn frequencies(hz: &[u32]) -> CliResult<Vec<SamplingFrequency>> {
    let all: Vec<u32> = SamplingFrequency::ALL.iter().map(|f| f.hz()).collect();
    if hz.is_empty() {
        return Ok(SamplingFrequency::ALL.to_vec());
    }
    hz.iter()
        .map(|h| {
            SamplingFrequency::from_hz(*h)
                .map_err(|_| field("frequencies", format!("{h} Hz is not one of {all:?}")))
        })
        .collect()
}

fn check_holdout(h: f64) -> CliResult<()> {
    if !(0.0..1.0).contains(&h) {
        return Err(field("holdout", format!("{h} outside [0, 1)")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSettings {
    pub seed: u64,
    pub duration_s: f64,
    /// Sampling rates in Hz; every canonical dataset is written at each.
    pub frequencies: Vec<u32>,
    pub arm: SyntheticArmConfig,
}

impl Default for SimulateSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            duration_s: 60.0,
            frequencies: vec![5, 10, 30, 50],
            arm: SyntheticArmConfig::default(),
        }
    }
}

impl SimulateSettings {
    pub fn validate(&self) -> CliResult<()> {
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(field("duration_s", "must be positive"));
        }
        frequencies(&self.frequencies)?;
        self.arm
            .validate()
            .map_err(|e| field("arm", e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub variant: Variant,
    pub dropout: f64,
    /// Fraction at the end of every recording kept out of training.
    pub holdout: f64,
    /// Dataset names to train on; empty means all.
    pub datasets: Vec<String>,
    pub frequencies: Vec<u32>,
    pub train: TrainConfig,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            variant: Variant::Fix,
            dropout: DEFAULT_DROPOUT,
            holdout: 0.2,
            datasets: Vec::new(),
            frequencies: Vec::new(),
            train: TrainConfig::default(),
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> CliResult<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(field("dropout", "must lie in [0, 1)"));
        }
        check_holdout(self.holdout)?;
        frequencies(&self.frequencies)?;
        self.train.validate().map_err(|e| field("train", e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Evaluate the trailing `holdout` fraction of every recording; 0 uses
    /// whole recordings.
    pub holdout: f64,
    pub datasets: Vec<String>,
    pub frequencies: Vec<u32>,
    /// Cross-validation folds; 0 or 1 reports a single pass.
    pub folds: usize,
    /// Length of one randomly placed missing-observation window, as a
    /// fraction of each recording; 0 disables masking.
    pub missing_fraction: f64,
    pub detect_forces: bool,
    pub force_p: f64,
    /// Percentile of the force-free δ distribution used as the alarm
    /// threshold.
    pub force_percentile: f64,
    /// Fixed alarm threshold; 0 selects the calibrated threshold.
    pub force_threshold: f64,
    pub eval: EvalConfig,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            holdout: 0.2,
            datasets: Vec::new(),
            frequencies: Vec::new(),
            folds: 0,
            missing_fraction: 0.0,
            detect_forces: false,
            force_p: denkf_core::downstream::DEFAULT_P,
            force_percentile: denkf_core::downstream::DEFAULT_PERCENTILE,
            force_threshold: 0.0,
            eval: EvalConfig::default(),
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> CliResult<()> {
        if self.holdout != 0.0 {
            check_holdout(self.holdout)?;
        }
        frequencies(&self.frequencies)?;
        if !(0.0..1.0).contains(&self.missing_fraction) {
            return Err(field("missing_fraction", "must lie in [0, 1)"));
        }
        if !(self.force_p >= 1.0) {
            return Err(field("force_p", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.force_percentile) {
            return Err(field("force_percentile", "must lie in [0, 1]"));
        }
        if !(self.force_threshold >= 0.0) {
            return Err(field("force_threshold", "must be nonnegative"));
        }
        self.eval.filter.validate().map_err(|e| field("eval.filter", e))?;
        if !(self.eval.init_sigma >= 0.0) {
            return Err(field("eval.init_sigma", "must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channels {
    Accel,
    Gyro,
    All,
}

impl Channels {
    /// Whether IMU channel `c` (0..6) receives the bias.
    pub fn includes(self, c: usize) -> bool {
        match self {
            Self::Accel => c < 3,
            Self::Gyro => c >= 3,
            Self::All => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForcesSettings {
    pub dataset: String,
    pub frequency: u32,
    pub holdout: f64,
    /// Bias sizes in units of each raw channel's training standard deviation.
    pub magnitudes: Vec<f64>,
    /// Bias window start and length, as fractions of the evaluated recording.
    pub start_fraction: f64,
    pub length_fraction: f64,
    pub channels: Channels,
    pub p: f64,
    pub percentile: f64,
    pub eval: EvalConfig,
}

impl Default for ForcesSettings {
    fn default() -> Self {
        Self {
            dataset: "D1".into(),
            frequency: 50,
            holdout: 0.0,
            magnitudes: vec![2.0, 4.0, 8.0],
            start_fraction: 0.4,
            length_fraction: 0.1,
            channels: Channels::Accel,
            p: denkf_core::downstream::DEFAULT_P,
            percentile: denkf_core::downstream::DEFAULT_PERCENTILE,
            eval: EvalConfig::default(),
        }
    }
}

impl ForcesSettings {
    pub fn validate(&self) -> CliResult<()> {
        frequencies(&[self.frequency])?;
        if self.holdout != 0.0 {
            check_holdout(self.holdout)?;
        }
        if self.magnitudes.is_empty() || self.magnitudes.iter().any(|m| !m.is_finite()) {
            return Err(field("magnitudes", "needs at least one finite value"));
        }
        let window_ok = self.start_fraction >= 0.0
            && self.length_fraction > 0.0
            && self.start_fraction + self.length_fraction <= 1.0;
        if !window_ok {
            return Err(field(
                "start_fraction",
                "bias window must lie inside the recording",
            ));
        }
        if !(self.p >= 1.0) {
            return Err(field("p", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.percentile) {
            return Err(field("percentile", "must lie in [0, 1]"));
        }
        self.eval.filter.validate().map_err(|e| field("eval.filter", e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let s = render(&TrainSettings::default()).unwrap();
        let back: TrainSettings = toml::from_str(&s).unwrap();
        assert_eq!(back, TrainSettings::default());
        let s = render(&EvalSettings::default()).unwrap();
        let back: EvalSettings = toml::from_str(&s).unwrap();
        assert_eq!(back, EvalSettings::default());
        let s = render(&SimulateSettings::default()).unwrap();
        let back: SimulateSettings = toml::from_str(&s).unwrap();
        assert_eq!(back, SimulateSettings::default());
        let s = render(&ForcesSettings::default()).unwrap();
        let back: ForcesSettings = toml::from_str(&s).unwrap();
        assert_eq!(back, ForcesSettings::default());
    }

    #[test]
    fn unknown_keys_and_bad_values_name_the_field() {
        assert!(toml::from_str::<SimulateSettings>("durration_s = 3.0").is_err());
        let s: SimulateSettings = toml::from_str("duration_s = -1.0").unwrap();
        assert!(s.validate().unwrap_err().to_string().contains("duration_s"));
        let s: SimulateSettings = toml::from_str("frequencies = [7]").unwrap();
        assert!(s.validate().unwrap_err().to_string().contains("frequencies"));
        let t: TrainSettings = toml::from_str("variant = \"pe+te\"\n[train]\nepochs = 0").unwrap();
        assert_eq!(t.variant, Variant::PeTe);
        assert!(t.validate().unwrap_err().to_string().contains("train"));
    }
}
