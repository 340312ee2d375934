//! Trajectory datasets and their on-disk format.
//!
//! A dataset is a headered CSV with columns
//! `t, a_0..a_39, y_0..y_29, z_0..z_4, x, y, z, qx, qy, qz, qw` plus a TOML
//! sidecar (same stem, `.toml`) holding the metadata. Floats are written in
//! shortest round-trip form, so save/load is bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::filter::{csv_io, FilterInput, ObservationFrame};
use crate::types::{
    Action, PlacementSet, RawObservation, RobotState, SamplingFrequency, ACTION_DIM, IMU_COUNT,
    RAW_OBS_DIM, STATE_DIM,
};

pub const GENERATOR_VERSION: &str = concat!("denkf-sim/", env!("CARGO_PKG_VERSION"));
const SPACING_TOL: f64 = 1e-9;
const STATE_NAMES: [&str; STATE_DIM] = ["x", "y", "z", "qx", "qy", "qz", "qw"];

/// One synchronized sample with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub timestamp: f64,
    pub action: Action,
    pub raw: RawObservation,
    pub placement: PlacementSet,
    pub truth: RobotState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub name: String,
    pub seed: u64,
    pub generator_version: String,
    pub frequency: SamplingFrequency,
    pub placement: PlacementSet,
    /// Frame indices where a new equilibrium target starts.
    #[serde(default)]
    pub segments: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub frames: Vec<Frame>,
    pub metadata: DatasetMetadata,
}

/// Frame view that also carries the dataset frequency, for the filter.
#[derive(Debug, Clone, Copy)]
pub struct FrameRef<'a> {
    pub frame: &'a Frame,
    pub frequency: SamplingFrequency,
}

impl FilterInput for FrameRef<'_> {
    fn timestamp(&self) -> f64 {
        self.frame.timestamp
    }
    fn action(&self) -> &[f64] {
        self.frame.action.as_slice()
    }
    fn raw(&self) -> &[f64] {
        self.frame.raw.as_slice()
    }
    fn placement(&self) -> PlacementSet {
        self.frame.placement
    }
    fn frequency(&self) -> SamplingFrequency {
        self.frequency
    }
}

impl TrajectoryDataset {
    /// Builds and validates a dataset.
    pub fn new(frames: Vec<Frame>, metadata: DatasetMetadata) -> Result<Self> {
        let ds = Self { frames, metadata };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frequency(&self) -> SamplingFrequency {
        self.metadata.frequency
    }

    pub fn placement(&self) -> PlacementSet {
        self.metadata.placement
    }

    /// Checks time ordering, spacing, placement consistency and unit
    /// quaternions; the error names the offending frame.
    pub fn validate(&self) -> Result<()> {
        let period = self.frequency().period();
        for (i, f) in self.frames.iter().enumerate() {
            if f.placement != self.metadata.placement {
                return Err(Error::Invariant(format!(
                    "frame {i}: placement {} differs from dataset placement {}",
                    f.placement, self.metadata.placement
                )));
            }
            if (f.truth.quaternion_norm() - 1.0).abs() > 1e-9 {
                return Err(Error::Invariant(format!(
                    "frame {i}: ground-truth quaternion is not unit norm"
                )));
            }
            if !f.timestamp.is_finite() {
                return Err(Error::Invariant(format!("frame {i}: non-finite timestamp")));
            }
            if i > 0 {
                let dt = f.timestamp - self.frames[i - 1].timestamp;
                if dt <= 0.0 {
                    return Err(Error::Invariant(format!(
                        "frame {i}: timestamp {} is not after {}",
                        f.timestamp,
                        self.frames[i - 1].timestamp
                    )));
                }
                if (dt - period).abs() > SPACING_TOL {
                    return Err(Error::Invariant(format!(
                        "frame {i}: spacing {dt} s does not match {}",
                        self.frequency()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn frame_refs(&self) -> Vec<FrameRef<'_>> {
        self.frames
            .iter()
            .map(|frame| FrameRef {
                frame,
                frequency: self.frequency(),
            })
            .collect()
    }

    /// Frames without ground truth, as fed to the filter at run time.
    pub fn observation_frames(&self) -> Vec<ObservationFrame> {
        self.frames
            .iter()
            .map(|f| ObservationFrame {
                timestamp: f.timestamp,
                action: f.action.clone(),
                raw: f.raw.clone(),
                placement: f.placement,
                frequency: self.frequency(),
            })
            .collect()
    }

    /// Contiguous sub-range of frames, re-timed to start at zero.
    pub fn slice(&self, range: std::ops::Range<usize>, name: &str) -> Result<Self> {
        if range.start >= range.end || range.end > self.len() {
            return Err(invalid(format!(
                "frame range {range:?} is outside 0..{}",
                self.len()
            )));
        }
        let f = self.frequency().hz() as f64;
        let frames = self.frames[range.clone()]
            .iter()
            .enumerate()
            .map(|(k, fr)| Frame {
                timestamp: k as f64 / f,
                ..fr.clone()
            })
            .collect();
        let segments = self
            .metadata
            .segments
            .iter()
            .filter(|s| range.contains(s))
            .map(|s| s - range.start)
            .collect();
        Self::new(
            frames,
            DatasetMetadata {
                name: name.to_string(),
                segments,
                ..self.metadata.clone()
            },
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
        w.write_record(header()).map_err(csv_io)?;
        for f in &self.frames {
            let mut row = Vec::with_capacity(1 + ACTION_DIM + RAW_OBS_DIM + IMU_COUNT + STATE_DIM);
            row.push(f.timestamp.to_string());
            row.extend(f.action.as_slice().iter().map(f64::to_string));
            row.extend(f.raw.as_slice().iter().map(f64::to_string));
            row.extend(f.placement.labels().iter().map(u8::to_string));
            row.extend(f.truth.to_array().iter().map(f64::to_string));
            w.write_record(&row).map_err(csv_io)?;
        }
        w.flush()?;
        let meta = toml::to_string(&self.metadata)
            .map_err(|e| Error::Config(format!("metadata serialization: {e}")))?;
        fs::write(sidecar_path(path), meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sidecar = sidecar_path(path);
        let text = fs::read_to_string(&sidecar).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", sidecar.display()),
            ))
        })?;
        let metadata: DatasetMetadata = toml::from_str(&text).map_err(|e| Error::Parse {
            path: sidecar.clone(),
            line: e
                .span()
                .map(|s| text[..s.start].lines().count().max(1) as u64)
                .unwrap_or(0),
            field: "metadata".into(),
            message: e.message().to_string(),
        })?;

        let parse_err = |line: u64, field: &str, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            field: field.to_string(),
            message,
        };
        let mut rdr = csv::Reader::from_path(path).map_err(csv_io)?;
        let expected = header();
        let got = rdr.headers().map_err(csv_io)?.clone();
        if got.iter().ne(expected.iter().map(String::as_str)) {
            return Err(parse_err(1, "header", "unexpected column layout".into()));
        }
        let mut frames = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i as u64 + 2;
            let rec = rec.map_err(|e| parse_err(line, "record", e.to_string()))?;
            if rec.len() != expected.len() {
                return Err(parse_err(
                    line,
                    "record",
                    format!("{} fields, expected {}", rec.len(), expected.len()),
                ));
            }
            let num = |j: usize| -> Result<f64> {
                let v: f64 = rec[j]
                    .trim()
                    .parse()
                    .map_err(|e| parse_err(line, &expected[j], format!("{e}")))?;
                if !v.is_finite() {
                    return Err(parse_err(line, &expected[j], "non-finite value".into()));
                }
                Ok(v)
            };
            let nums = |start: usize, n: usize| -> Result<Vec<f64>> {
                (start..start + n).map(num).collect()
            };
            let mut col = 0;
            let timestamp = num(col)?;
            col += 1;
            let action = Action::new(nums(col, ACTION_DIM)?)?;
            col += ACTION_DIM;
            let raw = RawObservation::new(nums(col, RAW_OBS_DIM)?)?;
            col += RAW_OBS_DIM;
            let mut labels = [0u8; IMU_COUNT];
            for (k, l) in labels.iter_mut().enumerate() {
                *l = rec[col + k]
                    .trim()
                    .parse()
                    .map_err(|e| parse_err(line, &expected[col + k], format!("{e}")))?;
            }
            let placement =
                PlacementSet::new(labels).map_err(|e| parse_err(line, "z", e.to_string()))?;
            col += IMU_COUNT;
            let s = nums(col, STATE_DIM)?;
            let truth = RobotState::new([s[0], s[1], s[2]], [s[3], s[4], s[5], s[6]])?;
            frames.push(Frame {
                timestamp,
                action,
                raw,
                placement,
                truth,
            });
        }
        Self::new(frames, metadata)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("toml")
}

fn header() -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((0..ACTION_DIM).map(|i| format!("a_{i}")));
    h.extend((0..RAW_OBS_DIM).map(|i| format!("y_{i}")));
    h.extend((0..IMU_COUNT).map(|i| format!("z_{i}")));
    h.extend(STATE_NAMES.iter().map(|s| s.to_string()));
    h
}

/// Picks, for each point of the target grid, the source frame nearest in
/// time. Output timestamps sit exactly on the target grid.
pub fn resample(ds: &TrajectoryDataset, target: SamplingFrequency) -> Result<TrajectoryDataset> {
    let src = ds.frequency();
    if target.hz() > src.hz() {
        return Err(invalid(format!("cannot resample {src} up to {target}")));
    }
    if ds.is_empty() {
        return Ok(TrajectoryDataset {
            frames: Vec::new(),
            metadata: DatasetMetadata {
                frequency: target,
                ..ds.metadata.clone()
            },
        });
    }
    let t0 = ds.frames[0].timestamp;
    let last = ds.frames[ds.len() - 1].timestamp;
    let fs = src.hz() as f64;
    let ft = target.hz() as f64;
    let mut frames = Vec::new();
    let mut picked = Vec::new();
    let mut j = 0usize;
    loop {
        let t = t0 + j as f64 / ft;
        if t > last + SPACING_TOL {
            break;
        }
        let k = (((t - t0) * fs).round() as usize).min(ds.len() - 1);
        picked.push(k);
        frames.push(Frame {
            timestamp: t,
            ..ds.frames[k].clone()
        });
        j += 1;
    }
    let segments = ds
        .metadata
        .segments
        .iter()
        .filter_map(|s| picked.iter().position(|k| k >= s))
        .fold(Vec::new(), |mut acc: Vec<usize>, i| {
            if acc.last() != Some(&i) {
                acc.push(i);
            }
            acc
        });
    TrajectoryDataset::new(
        frames,
        DatasetMetadata {
            frequency: target,
            segments,
            ..ds.metadata.clone()
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, f: SamplingFrequency) -> TrajectoryDataset {
        let placement = PlacementSet::new([1, 4, 9, 14, 18]).unwrap();
        let frames = (0..n)
            .map(|k| {
                let t = k as f64 / f.hz() as f64;
                Frame {
                    timestamp: t,
                    action: Action::new((0..ACTION_DIM).map(|i| (t + i as f64 * 0.1).sin()).collect())
                        .unwrap(),
                    raw: RawObservation::new((0..RAW_OBS_DIM).map(|i| 1.0 / (1.0 + i as f64 + t)).collect())
                        .unwrap(),
                    placement,
                    truth: RobotState::new([t, -t / 3.0, 500.0 + t], [0.0, 0.0, 0.0, 1.0]).unwrap(),
                }
            })
            .collect();
        TrajectoryDataset::new(
            frames,
            DatasetMetadata {
                name: "toy".into(),
                seed: 1,
                generator_version: GENERATOR_VERSION.into(),
                frequency: f,
                placement,
                segments: vec![0, n / 2],
            },
        )
        .unwrap()
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d1.csv");
        let ds = toy(37, SamplingFrequency::Hz30);
        ds.save(&path).unwrap();
        assert_eq!(TrajectoryDataset::load(&path).unwrap(), ds);
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d1.csv");
        toy(10, SamplingFrequency::Hz50).save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        fs::write(&path, &text[..text.len() - 40]).unwrap();
        match TrajectoryDataset::load(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 11),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_number_names_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d1.csv");
        toy(3, SamplingFrequency::Hz50).save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut fields: Vec<&str> = lines[2].split(',').collect();
        fields[3] = "abc";
        lines[2] = fields.join(",");
        fs::write(&path, lines.join("\n")).unwrap();
        match TrajectoryDataset::load(&path) {
            Err(Error::Parse { line, field, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(field, "a_2");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_timestamp_names_frame() {
        let mut ds = toy(6, SamplingFrequency::Hz10);
        ds.frames[4].timestamp = ds.frames[3].timestamp;
        let err = ds.validate().unwrap_err().to_string();
        assert!(err.contains("frame 4"), "{err}");
    }

    #[test]
    fn resample_identity_and_counts() {
        let ds = toy(500, SamplingFrequency::Hz50);
        assert_eq!(resample(&ds, SamplingFrequency::Hz50).unwrap(), ds);
        let r = resample(&ds, SamplingFrequency::Hz10).unwrap();
        assert_eq!(r.len(), 100);
        assert_eq!(r.frequency(), SamplingFrequency::Hz10);
        assert!(resample(&r, SamplingFrequency::Hz50).is_err());
    }

    #[test]
    fn resample_deviation_is_within_half_period() {
        let ds = toy(300, SamplingFrequency::Hz30);
        let r = resample(&ds, SamplingFrequency::Hz5).unwrap();
        for f in &r.frames {
            // the source timestamp is recoverable from the truth x coordinate
            assert!((f.truth.position[0] - f.timestamp).abs() <= 0.5 / 30.0 + 1e-12);
        }
        let r = resample(&toy(100, SamplingFrequency::Hz50), SamplingFrequency::Hz30).unwrap();
        for f in &r.frames {
            assert!((f.truth.position[0] - f.timestamp).abs() <= 0.5 / 50.0 + 1e-12);
        }
    }

    #[test]
    fn slice_retimes_frames() {
        let ds = toy(40, SamplingFrequency::Hz10);
        let s = ds.slice(10..30, "mid").unwrap();
        assert_eq!(s.len(), 20);
        assert_eq!(s.frames[0].timestamp, 0.0);
        assert_eq!(s.metadata.segments, vec![10]);
        assert!(ds.slice(30..30, "x").is_err());
    }
}
