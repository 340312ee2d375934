use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use denkf_core::checkpoint::Checkpoint;
use denkf_core::dataset::{sidecar_path, TrajectoryDataset};
use denkf_core::downstream::{
    deltas, detect_forces, inject_bias, percentile, ForceTrace, MissingMask, ThresholdPolicy,
};
use denkf_core::embed::EmbeddingConfig;
use denkf_core::filter::{run_sequence, write_trajectory_csv, StepRecord};
use denkf_core::models::{Denkf, ModelSet};
use denkf_core::seed::{self, Stream};
use denkf_core::sim::canonical_datasets;
use denkf_core::train::{
    evaluate, evaluate_masked, fit_normalizer, fold_split, initial_ensemble, train_with,
    ConditionReport, CvReport, EpochLoss, MeanStderr,
};
use denkf_core::{IMU_CHANNELS, RAW_OBS_DIM};
use serde::{Deserialize, Serialize};

use crate::config::{self, EvalSettings, ForcesSettings, SimulateSettings, TrainSettings};
use crate::error::{CliError, CliResult};
use crate::manifest::{unix_now, write_atomic, FileDigest, RunManifest, TOOL_VERSION};

/// A fully resolved command: paths, settings and seeds. Stored in the run
/// manifest and sufficient to re-execute the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Invocation {
    Simulate(SimulateRun),
    Train(TrainRun),
    Eval(EvalRun),
    Forces(ForcesRun),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateRun {
    pub out: PathBuf,
    pub manifest: PathBuf,
    pub settings: SimulateSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub data: PathBuf,
    pub out: PathBuf,
    pub manifest: PathBuf,
    /// Continue from the checkpoint at `out`.
    pub resume: bool,
    pub settings: TrainSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub manifest: PathBuf,
    pub settings: EvalSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcesRun {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub manifest: PathBuf,
    pub settings: ForcesSettings,
}

/// Files read and written by a run, in order.
#[derive(Default)]
struct Files {
    inputs: Vec<FileDigest>,
    outputs: Vec<PathBuf>,
}

impl Files {
    fn input(&mut self, p: &Path) -> CliResult<()> {
        self.inputs.push(FileDigest::of(p)?);
        Ok(())
    }

    fn output(&mut self, p: PathBuf) {
        if !self.outputs.contains(&p) {
            self.outputs.push(p);
        }
    }
}

fn relocated(dir: &Path, p: &Path) -> PathBuf {
    dir.join(p.file_name().unwrap_or(p.as_os_str()))
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Simulate(_) => "simulate",
            Self::Train(_) => "train",
            Self::Eval(_) => "eval",
            Self::Forces(_) => "forces",
        }
    }

    pub fn manifest_path(&self) -> &Path {
        match self {
            Self::Simulate(r) => &r.manifest,
            Self::Train(r) => &r.manifest,
            Self::Eval(r) => &r.manifest,
            Self::Forces(r) => &r.manifest,
        }
    }

    fn seeds(&self) -> BTreeMap<String, u64> {
        let mut m = BTreeMap::new();
        match self {
            Self::Simulate(r) => {
                m.insert("simulation".into(), r.settings.seed);
                m.insert("placement_response".into(), r.settings.arm.seed);
            }
            Self::Train(r) => {
                m.insert("train".into(), r.settings.train.seed);
            }
            Self::Eval(r) => {
                m.insert("filter".into(), r.settings.eval.filter.seed);
            }
            Self::Forces(r) => {
                m.insert("filter".into(), r.settings.eval.filter.seed);
            }
        }
        m
    }

    /// Redirects every output (and the manifest) into `dir`, keeping file
    /// names. Inputs are left untouched.
    pub fn relocate(&mut self, dir: &Path) {
        match self {
            Self::Simulate(r) => {
                r.out = relocated(dir, &r.out);
                r.manifest = relocated(dir, &r.manifest);
            }
            Self::Train(r) => {
                r.out = relocated(dir, &r.out);
                r.manifest = relocated(dir, &r.manifest);
            }
            Self::Eval(r) => {
                r.out = relocated(dir, &r.out);
                r.manifest = relocated(dir, &r.manifest);
            }
            Self::Forces(r) => {
                r.out = relocated(dir, &r.out);
                r.manifest = relocated(dir, &r.manifest);
            }
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        match self {
            Self::Simulate(r) => r.settings.validate(),
            Self::Train(r) => r.settings.validate(),
            Self::Eval(r) => r.settings.validate(),
            Self::Forces(r) => r.settings.validate(),
        }
    }

    /// Runs the command and writes its manifest, also when the run fails.
    pub fn execute(&self) -> CliResult<RunManifest> {
        self.validate()?;
        let started = unix_now();
        let mut files = Files::default();
        let result = match self {
            Self::Simulate(r) => simulate(r, &mut files),
            Self::Train(r) => train(r, &mut files),
            Self::Eval(r) => eval(r, &mut files),
            Self::Forces(r) => forces(r, &mut files),
        };
        let mut outputs = Vec::new();
        for p in files.outputs.iter().filter(|p| p.is_file()) {
            outputs.push(FileDigest::of(p)?);
        }
        let manifest = RunManifest {
            tool_version: TOOL_VERSION.to_string(),
            command: self.name().to_string(),
            invocation: self.clone(),
            seeds: self.seeds(),
            inputs: files.inputs,
            outputs,
            started_unix_s: started,
            finished_unix_s: unix_now(),
            status: match &result {
                Ok(()) => "ok".to_string(),
                Err(e) => e.to_string(),
            },
        };
        manifest.save(self.manifest_path())?;
        result.map(|()| manifest)
    }
}

fn simulate(r: &SimulateRun, files: &mut Files) -> CliResult<()> {
    let s = &r.settings;
    fs::create_dir_all(&r.out)?;
    for f in config::frequencies(&s.frequencies)? {
        let sets = canonical_datasets(&s.arm, f, s.duration_s, s.seed)?;
        let frames = sets.first().map_or(0, |d| d.len());
        for ds in &sets {
            let path = r.out.join(format!("{}_{}hz.csv", ds.metadata.name, f.hz()));
            ds.save(&path)?;
            files.output(path.clone());
            files.output(sidecar_path(&path));
        }
        println!("{} datasets at {:>2} Hz, {frames} frames each", sets.len(), f.hz());
    }
    println!("wrote {}", r.out.display());
    Ok(())
}

/// Loads every dataset in `dir` that passes the name and frequency filters,
/// ordered by name and rate.
fn load_datasets(
    dir: &Path,
    names: &[String],
    hz: &[u32],
    files: &mut Files,
) -> CliResult<Vec<TrajectoryDataset>> {
    if !dir.is_dir() {
        return Err(CliError::usage(format!(
            "data directory {} does not exist",
            dir.display()
        )));
    }
    let freqs = config::frequencies(hz)?;
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv") && sidecar_path(p).is_file())
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let ds = TrajectoryDataset::load(&p)?;
        let wanted = names.is_empty() || names.contains(&ds.metadata.name);
        if !wanted || !freqs.contains(&ds.frequency()) {
            continue;
        }
        files.input(&p)?;
        files.input(&sidecar_path(&p))?;
        out.push(ds);
    }
    if out.is_empty() {
        return Err(CliError::usage(format!(
            "no dataset in {} matches names {names:?} at {hz:?} Hz",
            dir.display()
        )));
    }
    out.sort_by(|a, b| {
        let key = |d: &TrajectoryDataset| (d.metadata.name.len(), d.metadata.name.clone(), d.frequency());
        key(a).cmp(&key(b))
    });
    Ok(out)
}

fn label(ds: &TrajectoryDataset) -> String {
    format!("{}_{}hz", ds.metadata.name, ds.frequency().hz())
}

/// Leading `1 - holdout` of a recording.
fn head(ds: &TrajectoryDataset, holdout: f64) -> CliResult<TrajectoryDataset> {
    let n = ds.len();
    let cut = n - (holdout * n as f64).round() as usize;
    Ok(ds.slice(0..cut, &label(ds))?)
}

/// Trailing `holdout` of a recording, or all of it when `holdout` is 0.
fn tail(ds: &TrajectoryDataset, holdout: f64) -> CliResult<TrajectoryDataset> {
    let n = ds.len();
    let cut = if holdout == 0.0 {
        0
    } else {
        n - (holdout * n as f64).round() as usize
    };
    if cut >= n {
        return Err(CliError::usage(format!("{} has no held-out frames", label(ds))));
    }
    Ok(ds.slice(cut..n, &label(ds))?)
}

fn loss_path(out: &Path) -> PathBuf {
    out.with_extension("loss.csv")
}

fn loss_row(rec: &EpochLoss) -> String {
    format!(
        "{},{},{},{},{}\n",
        rec.epoch, rec.total, rec.e2e, rec.transition, rec.sensor
    )
}

fn train(r: &TrainRun, files: &mut Files) -> CliResult<()> {
    let s = &r.settings;
    let sets = load_datasets(&r.data, &s.datasets, &s.frequencies, files)?;
    let train_sets = sets
        .iter()
        .map(|d| head(d, s.holdout))
        .collect::<CliResult<Vec<_>>>()?;
    let losses = loss_path(&r.out);
    if let Some(parent) = r.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    files.output(r.out.clone());
    files.output(losses.clone());
    let (pipeline, optimizer, start) = if r.resume {
        files.input(&r.out)?;
        let ck = Checkpoint::load(&r.out)?;
        if ck.pipeline.variant() != s.variant {
            return Err(CliError::usage(format!(
                "checkpoint holds a {} model, settings ask for {}",
                ck.pipeline.variant(),
                s.variant
            )));
        }
        if !losses.is_file() {
            write_atomic(&losses, b"epoch,total,e2e,transition,sensor\n")?;
        }
        (ck.pipeline, ck.optimizer, ck.epoch)
    } else {
        let models = ModelSet::new(s.variant, EmbeddingConfig::default(), s.dropout, s.train.seed)?;
        let pipeline = Denkf::new(models, fit_normalizer(&train_sets)?);
        Checkpoint::new(pipeline.clone(), s.train.seed).save(&r.out)?;
        write_atomic(&losses, b"epoch,total,e2e,transition,sensor\n")?;
        (pipeline, None, 0)
    };
    let frames: usize = train_sets.iter().map(|d| d.len()).sum();
    println!(
        "training {} on {} recordings ({frames} frames), epochs {}..{}",
        s.variant,
        train_sets.len(),
        start,
        s.train.epochs
    );
    let seed = s.train.seed;
    let out = r.out.clone();
    let outcome = train_with(pipeline, &train_sets, &s.train, optimizer, start, |rec, p, opt| {
        Checkpoint {
            pipeline: p.clone(),
            seed,
            epoch: rec.epoch + 1,
            optimizer: Some(opt.to_vec()),
        }
        .save(&out)?;
        fs::OpenOptions::new()
            .append(true)
            .open(&losses)?
            .write_all(loss_row(rec).as_bytes())?;
        println!(
            "epoch {:>3}  loss {:.6}  (e2e {:.6}, transition {:.6}, sensor {:.6})",
            rec.epoch + 1,
            rec.total,
            rec.e2e,
            rec.transition,
            rec.sensor
        );
        Ok(())
    });
    outcome?;
    println!("checkpoint {}", r.out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct ForceSummary {
    threshold: f64,
    alarm_rate: f64,
    alarms: usize,
}

#[derive(Debug, Serialize)]
struct EvalSummary {
    variant: String,
    mae_position: f64,
    rmse_position: f64,
    mae_quaternion: f64,
    steps: usize,
    /// Spread of per-condition MAE.
    condition_mae: MeanStderr,
    per_condition: Vec<ConditionReport>,
    missing_windows: BTreeMap<String, Vec<[usize; 2]>>,
    forces: BTreeMap<String, ForceSummary>,
    folds: Option<CvSummary>,
}

#[derive(Debug, Serialize)]
struct CvSummary {
    folds: usize,
    mae_position: MeanStderr,
    rmse_position: MeanStderr,
    mae_quaternion: MeanStderr,
    fold_mae_position: Vec<f64>,
}

fn eval(r: &EvalRun, files: &mut Files) -> CliResult<()> {
    let s = &r.settings;
    files.input(&r.checkpoint)?;
    let ck = Checkpoint::load(&r.checkpoint)?;
    let p = &ck.pipeline;
    let sets = load_datasets(&r.data, &s.datasets, &s.frequencies, files)?;
    let test = sets
        .iter()
        .map(|d| tail(d, s.holdout))
        .collect::<CliResult<Vec<_>>>()?;
    fs::create_dir_all(&r.out)?;

    let mut masks = Vec::with_capacity(test.len());
    let mut missing_windows = BTreeMap::new();
    if s.missing_fraction > 0.0 {
        for (i, ds) in test.iter().enumerate() {
            let n = ds.len();
            let margin = ((s.missing_fraction * n as f64).round() as usize).max(1);
            let mask = MissingMask::random_window(
                n,
                s.missing_fraction,
                margin,
                seed::derive(s.eval.filter.seed, Stream::Init, i as u64, 2),
            )?;
            missing_windows.insert(
                ds.metadata.name.clone(),
                mask.windows().iter().map(|w| [w.start, w.end]).collect(),
            );
            masks.push(Some(mask.as_slice().to_vec()));
        }
    }
    let (report, records) = evaluate_masked(p, &test, &masks, &s.eval)?;

    let mut forces = BTreeMap::new();
    for (ds, recs) in test.iter().zip(&records) {
        let path = r.out.join(format!("{}.trajectory.csv", ds.metadata.name));
        write_trajectory_csv(recs, fs::File::create(&path)?)?;
        files.output(path);
        if s.detect_forces {
            let policy = if s.force_threshold > 0.0 {
                ThresholdPolicy::Fixed(s.force_threshold)
            } else {
                ThresholdPolicy::Calibrated {
                    calibration: recs,
                    percentile: s.force_percentile,
                }
            };
            let trace = detect_forces(recs, s.force_p, policy)?;
            let path = r.out.join(format!("{}.forces.csv", ds.metadata.name));
            trace.write_csv(fs::File::create(&path)?)?;
            files.output(path);
            forces.insert(
                ds.metadata.name.clone(),
                ForceSummary {
                    threshold: trace.threshold,
                    alarm_rate: trace.alarm_rate(),
                    alarms: trace.alarms.len(),
                },
            );
        }
    }

    let folds = if s.folds >= 2 {
        let mut reports = Vec::with_capacity(s.folds);
        for k in 0..s.folds {
            let (_, held) = fold_split(&test, s.folds, k)?;
            reports.push(evaluate(p, &held, &s.eval)?);
        }
        let cv = CvReport::from_folds(reports)?;
        Some(CvSummary {
            folds: s.folds,
            mae_position: cv.mae_position,
            rmse_position: cv.rmse_position,
            mae_quaternion: cv.mae_quaternion,
            fold_mae_position: cv.folds.iter().map(|f| f.mae_position).collect(),
        })
    } else {
        None
    };

    let maes: Vec<f64> = report.per_condition.iter().map(|c| c.mae_position).collect();
    let summary = EvalSummary {
        variant: p.variant().to_string(),
        mae_position: report.mae_position,
        rmse_position: report.rmse_position,
        mae_quaternion: report.mae_quaternion,
        steps: report.steps,
        condition_mae: MeanStderr::of(&maes),
        per_condition: report.per_condition.clone(),
        missing_windows,
        forces,
        folds,
    };
    let path = r.out.join("report.json");
    let json = serde_json::to_vec_pretty(&summary).map_err(|e| CliError::Failed(e.to_string()))?;
    write_atomic(&path, &json)?;
    files.output(path);
    print!("{}", eval_table(&summary));
    println!(
        "{} steps, {:.3} ms per filter step (E = {})",
        report.steps,
        report.wall_clock_per_step * 1e3,
        s.eval.filter.ensemble_size
    );
    Ok(())
}

fn eval_table(s: &EvalSummary) -> String {
    let mut t = String::new();
    let _ = writeln!(t, "{:<16} {:>7} {:>10} {:>10} {:>8}", "condition", "steps", "MAE mm", "RMSE mm", "MAE q");
    for c in &s.per_condition {
        let _ = writeln!(
            t,
            "{:<16} {:>7} {:>10.2} {:>10.2} {:>8.4}",
            c.name, c.steps, c.mae_position, c.rmse_position, c.mae_quaternion
        );
    }
    let _ = writeln!(
        t,
        "{:<16} {:>7} {:>10.2} {:>10.2} {:>8.4}",
        "all", s.steps, s.mae_position, s.rmse_position, s.mae_quaternion
    );
    let _ = writeln!(
        t,
        "per-condition MAE {:.2}±{:.2} mm",
        s.condition_mae.mean, s.condition_mae.stderr
    );
    if let Some(cv) = &s.folds {
        let _ = writeln!(
            t,
            "{}-fold MAE {:.2}±{:.2} mm, RMSE {:.2}±{:.2} mm, q {:.4}±{:.4}",
            cv.folds,
            cv.mae_position.mean,
            cv.mae_position.stderr,
            cv.rmse_position.mean,
            cv.rmse_position.stderr,
            cv.mae_quaternion.mean,
            cv.mae_quaternion.stderr
        );
    }
    t
}

#[derive(Debug, Serialize)]
struct ForceRunSummary {
    dataset: String,
    bias_window: [usize; 2],
    threshold: f64,
    free_median: f64,
    magnitudes: Vec<f64>,
    peaks: Vec<f64>,
    false_alarm_rates: Vec<f64>,
}

/// Filters `ds` once per seed setting; shared by the clean and pushed runs so
/// they differ only in the observations.
fn filter_run(p: &Denkf, ds: &TrajectoryDataset, s: &ForcesSettings) -> CliResult<Vec<StepRecord>> {
    let init = initial_ensemble(
        p,
        &ds.frames[0].truth,
        s.eval.filter.ensemble_size,
        s.eval.init_sigma,
        seed::derive(s.eval.filter.seed, Stream::Init, 0, 0),
    )?;
    Ok(run_sequence(&init, &ds.frame_refs(), p, &s.eval.filter)?)
}

fn write_trace(trace: &ForceTrace, path: PathBuf, files: &mut Files) -> CliResult<()> {
    trace.write_csv(fs::File::create(&path)?)?;
    files.output(path);
    Ok(())
}

fn forces(r: &ForcesRun, files: &mut Files) -> CliResult<()> {
    let s = &r.settings;
    files.input(&r.checkpoint)?;
    let ck = Checkpoint::load(&r.checkpoint)?;
    let p = &ck.pipeline;
    let sets = load_datasets(&r.data, &[s.dataset.clone()], &[s.frequency], files)?;
    let ds = tail(&sets[0], s.holdout)?;
    let n = ds.len();
    let start = (s.start_fraction * n as f64).round() as usize;
    let len = ((s.length_fraction * n as f64).round() as usize).max(1);
    let window = start..(start + len).min(n);
    fs::create_dir_all(&r.out)?;

    let clean = filter_run(p, &ds, s)?;
    let free = deltas(&clean, s.p, None)?;
    let free_median = percentile(&free, 0.5)?;
    let policy = || ThresholdPolicy::Calibrated {
        calibration: &clean,
        percentile: s.percentile,
    };
    let free_trace = detect_forces(&clean, s.p, policy())?;
    write_trace(&free_trace, r.out.join("force_free.csv"), files)?;

    let std = &p.normalizer.raw.std;
    let mut peaks = Vec::new();
    let mut rates = Vec::new();
    for (k, m) in s.magnitudes.iter().enumerate() {
        let bias: Vec<f64> = (0..RAW_OBS_DIM)
            .map(|i| if s.channels.includes(i % IMU_CHANNELS) { m * std[i] } else { 0.0 })
            .collect();
        let pushed = inject_bias(&ds, window.clone(), &bias)?;
        let recs = filter_run(p, &pushed, s)?;
        let trace = detect_forces(&recs, s.p, policy())?;
        let outside = trace
            .alarm_flags()
            .iter()
            .enumerate()
            .filter(|(i, a)| **a && !window.contains(i))
            .count();
        let rate = outside as f64 / (n - window.len()).max(1) as f64;
        let peak = trace.peak(window.clone());
        println!(
            "bias {m:>6.2} std: peak δ {peak:.4}, {} alarm interval(s), false-alarm rate {:.4}",
            trace.alarms.len(),
            rate
        );
        write_trace(&trace, r.out.join(format!("force_{k}.csv")), files)?;
        peaks.push(peak);
        rates.push(rate);
    }
    println!(
        "threshold {:.4} (p{:.0} of force-free δ), force-free median {free_median:.4}",
        free_trace.threshold,
        s.percentile * 100.0
    );
    let summary = ForceRunSummary {
        dataset: label(&sets[0]),
        bias_window: [window.start, window.end],
        threshold: free_trace.threshold,
        free_median,
        magnitudes: s.magnitudes.clone(),
        peaks,
        false_alarm_rates: rates,
    };
    let path = r.out.join("summary.json");
    let json = serde_json::to_vec_pretty(&summary).map_err(|e| CliError::Failed(e.to_string()))?;
    write_atomic(&path, &json)?;
    files.output(path);
    Ok(())
}

/// Re-executes the run recorded in `manifest`, with outputs redirected into
/// `into` when given, and compares output digests.
pub fn replay(manifest: &Path, into: Option<&Path>) -> CliResult<()> {
    let old = RunManifest::load(manifest)?;
    for input in &old.inputs {
        let now = FileDigest::of(&input.path)
            .map_err(|e| CliError::usage(format!("input {}: {e}", input.path.display())))?;
        if now.sha256 != input.sha256 {
            return Err(CliError::usage(format!(
                "input {} changed since the recorded run",
                input.path.display()
            )));
        }
    }
    let mut inv = old.invocation.clone();
    if let Some(dir) = into {
        fs::create_dir_all(dir)?;
        inv.relocate(dir);
    }
    let new = inv.execute()?;
    if new.outputs.len() != old.outputs.len() {
        return Err(CliError::Failed(format!(
            "replay wrote {} files, the recorded run wrote {}",
            new.outputs.len(),
            old.outputs.len()
        )));
    }
    let mut differing = 0;
    for (a, b) in old.outputs.iter().zip(&new.outputs) {
        let same = a.sha256 == b.sha256;
        if !same {
            differing += 1;
        }
        println!(
            "{} {}",
            if same { "identical" } else { "DIFFERS  " },
            b.path.display()
        );
    }
    if differing > 0 {
        return Err(CliError::Failed(format!("{differing} output(s) differ from the recorded run")));
    }
    println!("replay reproduced all {} outputs", new.outputs.len());
    Ok(())
}
