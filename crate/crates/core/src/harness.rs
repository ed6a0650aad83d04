//! Experiment orchestration: configuration files, schedule replay in the
//! ablation modes, random-schedule baselines, expected best-of-n curves and
//! report generation. The `pba` binary is a thin wrapper over the `cmd_*`
//! functions here.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::OpKind;
use crate::data::{self, DataError, DatasetSplits, SyntheticSpec};
use crate::image::Image;
use crate::pbt::{
    self, SearchConfig, SearchError, SearchResult, Trainable, TrainableError, SEARCH_LOG_HEADER,
};
use crate::policy::{slot_op, PolicyParams, Schedule, ScheduleError, COPIES_PER_OP};
use crate::rng::{self, Domain};
use crate::trainer::{
    ClassifierTrial, EpochStats, FixedPolicy, NoPolicy, PolicySource, ScheduledPolicy,
    ToyClassifier, TrainError, TrainerConfig,
};

pub const SCHEDULE_FILE: &str = "schedule.json";
pub const SEARCH_LOG_FILE: &str = "search_log.csv";
pub const BASELINE_SCORES_FILE: &str = "baseline_scores.csv";
pub const BEST_OF_N_FILE: &str = "best_of_n.csv";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schedule {path}: {message}")]
    ScheduleFile { path: PathBuf, message: String },
    #[error("{path}, line {line}: {message}")]
    LogRow {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

impl HarnessError {
    /// 2 for configuration problems, 3 for everything that fails at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config { .. } | HarnessError::Search(SearchError::Config { .. }) => 2,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReplayMode {
    /// The schedule as searched.
    FullSchedule,
    /// The final policy for every epoch.
    FixedLast,
    /// Segments permuted, durations kept.
    OrderShuffled,
    /// One policy per batch, drawn with probability proportional to its duration.
    CollapsedStationary,
    /// Baseline pipeline only.
    None,
}

impl ReplayMode {
    pub const ALL: [ReplayMode; 5] = [
        ReplayMode::FullSchedule,
        ReplayMode::FixedLast,
        ReplayMode::OrderShuffled,
        ReplayMode::CollapsedStationary,
        ReplayMode::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ReplayMode::FullSchedule => "full-schedule",
            ReplayMode::FixedLast => "fixed-last",
            ReplayMode::OrderShuffled => "order-shuffled",
            ReplayMode::CollapsedStationary => "collapsed-stationary",
            ReplayMode::None => "none",
        }
    }
}

impl FromStr for ReplayMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ReplayMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = ReplayMode::ALL.iter().map(|m| m.name()).collect();
                format!("unknown mode `{s}`, expected one of {}", names.join(", "))
            })
    }
}

impl std::fmt::Display for ReplayMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomScheduleSpec {
    pub interval_len_min: usize,
    pub interval_len_max: usize,
    pub epochs: usize,
}

impl RandomScheduleSpec {
    pub fn new(epochs: usize) -> Self {
        Self {
            interval_len_min: 1,
            interval_len_max: 40,
            epochs,
        }
    }
}

/// Random segments with lengths uniform on `[min, max]` (the last one cut
/// to fit), each with a policy whose levels are uniform on their domains.
pub fn random_schedule<R: Rng + ?Sized>(
    spec: &RandomScheduleSpec,
    rng: &mut R,
) -> Result<Schedule, ScheduleError> {
    if spec.interval_len_min == 0 || spec.interval_len_min > spec.interval_len_max {
        return Err(ScheduleError::NonPositiveLength);
    }
    let mut segments = vec![];
    let mut covered = 0;
    while covered < spec.epochs {
        let len = rng
            .gen_range(spec.interval_len_min..=spec.interval_len_max)
            .min(spec.epochs - covered);
        segments.push((len, PolicyParams::random(rng)));
        covered += len;
    }
    Schedule::from_segments(segments)
}

/// Expected maximum of `n` draws with replacement from the empirical score
/// distribution, for `n = 1..=n_max`:
/// `E_n = sum_i s_(i) * ((i/N)^n - ((i-1)/N)^n)` with `s` sorted ascending.
pub fn best_of_n_curve(scores: &[f64], n_max: usize) -> Result<Vec<(usize, f64)>, HarnessError> {
    if scores.is_empty() {
        return Err(HarnessError::Invalid(
            "best-of-n curve needs at least one score".into(),
        ));
    }
    if n_max == 0 {
        return Err(HarnessError::Invalid("n_max must be at least 1".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let big_n = sorted.len() as f64;
    Ok((1..=n_max)
        .map(|n| {
            let e = sorted
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let hi = ((i + 1) as f64 / big_n).powi(n as i32);
                    let lo = (i as f64 / big_n).powi(n as i32);
                    s * (hi - lo)
                })
                .sum();
            (n, e)
        })
        .collect())
}

/// Where the experiment's images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// Path to a raw-dataset manifest, relative to the config file.
    Manifest(PathBuf),
}

/// Top-level config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub search: SearchConfig,
    pub trainer: TrainerConfig,
    pub data: DataSource,
    /// Stratified subsample of the train split used for search and replay.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduce_train: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduce_seed: Option<u64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let cfg_err = |message: String| HarnessError::Config {
            path: path.into(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| cfg_err(e.to_string()))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| cfg_err(e.to_string()))?;
        if let DataSource::Manifest(p) = &mut cfg.data {
            if p.is_relative() {
                *p = path.parent().unwrap_or(Path::new(".")).join(&*p);
            }
        }
        cfg.validate().map_err(cfg_err)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.search.validate().map_err(|e| format!("search: {e}"))?;
        self.trainer
            .validate()
            .map_err(|e| format!("trainer: {e}"))?;
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate().map_err(|e| format!("data: {e}"))?;
        }
        Ok(())
    }

    pub fn dataset(&self) -> Result<DatasetSplits, HarnessError> {
        let splits = match &self.data {
            DataSource::Synthetic(spec) => data::generate_synthetic(spec)?,
            DataSource::Manifest(path) => data::load_manifest(path)?,
        };
        Ok(match self.reduce_train {
            Some(n) => data::reduce_split(
                &splits,
                n,
                self.reduce_seed.unwrap_or(self.search.master_seed),
            )?,
            None => splits,
        })
    }
}

/// Runs the search with [`ClassifierTrial`] children on `data`.
pub fn search_classifier(
    search: &SearchConfig,
    trainer: &TrainerConfig,
    data: Arc<DatasetSplits>,
) -> Result<SearchResult, HarnessError> {
    let trainer = TrainerConfig {
        epochs: search.epochs,
        ..trainer.clone()
    };
    let factory = move |_id: usize, seed: u64| -> Result<Box<dyn Trainable>, TrainableError> {
        Ok(Box::new(ClassifierTrial::new(
            Arc::clone(&data),
            trainer.clone(),
            seed,
        )))
    };
    Ok(pbt::run_search(search, &factory)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayOutcome {
    pub mode: ReplayMode,
    pub seed: u64,
    /// Seed of the segment permutation in order-shuffled mode.
    pub shuffle_seed: Option<u64>,
    /// Original length when the schedule had to be stretched.
    pub stretched_from: Option<usize>,
    pub epochs: Vec<EpochRecord>,
}

impl ReplayOutcome {
    pub fn final_test_accuracy(&self) -> f64 {
        self.epochs.last().map_or(0.0, |r| r.test_accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("epoch,mode,train_loss,train_accuracy,val_accuracy,test_accuracy\n");
        for r in &self.epochs {
            writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6}",
                r.epoch, self.mode, r.train_loss, r.train_accuracy, r.val_accuracy, r.test_accuracy
            )
            .expect("write to string");
        }
        out
    }
}

/// Options that trade fidelity for speed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplayOptions {
    /// Evaluate val/test after every epoch instead of only the last one.
    pub per_epoch_eval: bool,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        Self {
            per_epoch_eval: true,
        }
    }
}

/// Trains a fresh model for `trainer.epochs` epochs with the schedule
/// transformed according to `mode`. Seeds derive from `trainer.seed`.
pub fn replay(
    schedule: &Schedule,
    mode: ReplayMode,
    trainer: &TrainerConfig,
    data: &DatasetSplits,
    opts: ReplayOptions,
) -> Result<ReplayOutcome, HarnessError> {
    trainer.validate()?;
    let stretched_from = (schedule.epochs() != trainer.epochs).then_some(schedule.epochs());
    let schedule = match stretched_from {
        Some(old) => {
            log::info!(
                "stretching schedule from {old} to {} epochs",
                trainer.epochs
            );
            schedule.stretch(trainer.epochs)?
        }
        None => schedule.clone(),
    };
    let seed = trainer.seed;
    let shuffle_seed =
        (mode == ReplayMode::OrderShuffled).then(|| rng::derive_seed(seed, Domain::Replay, 1));
    let schedule = match shuffle_seed {
        Some(s) => {
            log::info!("order-shuffled replay with shuffle seed {s}");
            schedule.shuffle_order(&mut rng::stream(s, Domain::Replay, 2))
        }
        None => schedule,
    };
    let mut sampler = schedule.collapse();
    let last = schedule.last_policy().clone();
    let records = fit(trainer, data, opts, |epoch, model, rng| {
        let mut scheduled = ScheduledPolicy {
            schedule: &schedule,
            epoch,
        };
        let mut fixed = FixedPolicy(&last);
        let source: &mut dyn PolicySource = match mode {
            ReplayMode::FullSchedule | ReplayMode::OrderShuffled => &mut scheduled,
            ReplayMode::FixedLast => &mut fixed,
            ReplayMode::CollapsedStationary => &mut sampler,
            ReplayMode::None => &mut NoPolicy,
        };
        model.train_epoch(
            &data.train,
            &data.normalization,
            data.kind,
            source,
            trainer,
            rng,
        )
    })?;
    Ok(ReplayOutcome {
        mode,
        seed,
        shuffle_seed,
        stretched_from,
        epochs: records,
    })
}

/// Fresh model and training stream from `trainer.seed`, then one `step` per
/// epoch with val/test evaluation.
fn fit(
    trainer: &TrainerConfig,
    data: &DatasetSplits,
    opts: ReplayOptions,
    mut step: impl FnMut(usize, &mut ToyClassifier, &mut rng::Rng) -> Result<EpochStats, TrainError>,
) -> Result<Vec<EpochRecord>, HarnessError> {
    let seed = trainer.seed;
    let mut model = ToyClassifier::new(
        data.input_dim(),
        trainer.hidden_units,
        data.class_count,
        rng::derive_seed(seed, Domain::ModelInit, 0),
    );
    let mut rng = rng::stream(seed, Domain::Replay, 0);
    let mut records = Vec::with_capacity(trainer.epochs);
    for epoch in 0..trainer.epochs {
        let stats = step(epoch, &mut model, &mut rng)?;
        let evaluate = opts.per_epoch_eval || epoch + 1 == trainer.epochs;
        let (val, test) = if evaluate {
            (
                model.evaluate(&data.val, &data.normalization)?,
                model.evaluate(&data.test, &data.normalization)?,
            )
        } else {
            (f64::NAN, f64::NAN)
        };
        records.push(EpochRecord {
            epoch,
            train_loss: stats.loss,
            train_accuracy: stats.train_accuracy,
            val_accuracy: val,
            test_accuracy: test,
        });
    }
    Ok(records)
}

/// Augments every training image with a fresh draw from the synthetic
/// nuisance distribution.
pub struct NuisanceAugment<'a>(pub &'a SyntheticSpec);

impl PolicySource for NuisanceAugment<'_> {
    fn next_policy(&mut self, _rng: &mut rng::Rng) -> Option<&PolicyParams> {
        None
    }

    fn augment(&mut self, img: Image, rng: &mut rng::Rng) -> Image {
        self.0.apply_nuisance(&img, rng)
    }
}

/// Baseline pipeline plus oracle augmentation that samples the exact
/// val/test nuisance distribution of `spec`. Seeds as in [`replay`].
pub fn oracle_run(
    spec: &SyntheticSpec,
    trainer: &TrainerConfig,
    data: &DatasetSplits,
    opts: ReplayOptions,
) -> Result<Vec<EpochRecord>, HarnessError> {
    trainer.validate()?;
    fit(trainer, data, opts, |_, model, rng| {
        model.train_epoch(
            &data.train,
            &data.normalization,
            data.kind,
            &mut NuisanceAugment(spec),
            trainer,
            rng,
        )
    })
}

/// Final test accuracy with oracle augmentation minus that with the
/// baseline pipeline alone, for each seed. Seed `s` renders the dataset and
/// trains with seed `s`.
pub fn oracle_gaps(
    spec: &SyntheticSpec,
    trainer: &TrainerConfig,
    seeds: &[u64],
) -> Result<Vec<f64>, HarnessError> {
    let opts = ReplayOptions {
        per_epoch_eval: false,
    };
    seeds
        .iter()
        .map(|&s| {
            let spec = SyntheticSpec {
                seed: s,
                ..spec.clone()
            };
            let data = data::generate_synthetic(&spec)?;
            let trainer = TrainerConfig {
                seed: s,
                ..trainer.clone()
            };
            let none = Schedule::constant(trainer.epochs, PolicyParams::zero())?;
            let base =
                replay(&none, ReplayMode::None, &trainer, &data, opts)?.final_test_accuracy();
            let oracle = oracle_run(&spec, &trainer, &data, opts)?;
            Ok(oracle.last().map_or(0.0, |r| r.test_accuracy) - base)
        })
        .collect()
}

/// Mean levels of one op at one epoch, averaged over its two copies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OpEpochStat {
    pub epoch: usize,
    pub op: OpKind,
    pub mean_prob: f64,
    pub mean_mag: f64,
    /// `mean_prob` over the sum of all ops' `mean_prob`; zero when all are zero.
    pub prob_share: f64,
}

pub fn policy_op_stats(p: &PolicyParams) -> Vec<(OpKind, f64, f64)> {
    let mut acc = vec![(0.0, 0.0); OpKind::COUNT];
    for (slot, s) in p.slots().iter().enumerate() {
        let k = slot_op(slot).index();
        acc[k].0 += s.prob.get() as f64 / COPIES_PER_OP as f64;
        acc[k].1 += s.mag.get() as f64 / COPIES_PER_OP as f64;
    }
    OpKind::ALL
        .iter()
        .zip(acc)
        .map(|(&op, (p, m))| (op, p, m))
        .collect()
}

pub fn schedule_evolution(schedule: &Schedule) -> Vec<OpEpochStat> {
    let mut out = Vec::with_capacity(schedule.epochs() * OpKind::COUNT);
    for (epoch, p) in schedule.expand().iter().enumerate() {
        let stats = policy_op_stats(p);
        let total: f64 = stats.iter().map(|s| s.1).sum();
        for (op, mean_prob, mean_mag) in stats {
            let prob_share = if total > 0.0 { mean_prob / total } else { 0.0 };
            out.push(OpEpochStat {
                epoch,
                op,
                mean_prob,
                mean_mag,
                prob_share,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub interval: usize,
    pub trial_id: usize,
    pub epoch: usize,
    pub score: f64,
    pub cloned_from: Option<usize>,
    pub params_digest: String,
}

/// Parses a search log; errors name the 1-based line.
pub fn parse_search_log(text: &str, path: &Path) -> Result<Vec<LogRow>, HarnessError> {
    let err = |line: usize, message: String| HarnessError::LogRow {
        path: path.into(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == SEARCH_LOG_HEADER => {}
        Some((_, h)) => return Err(err(1, format!("unexpected header `{h}`"))),
        None => return Err(err(1, "empty log".into())),
    }
    let mut rows = vec![];
    for (i, line) in lines {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(err(n, format!("expected 6 fields, found {}", f.len())));
        }
        let int = |s: &str, name: &str| {
            s.parse::<usize>()
                .map_err(|e| err(n, format!("{name}: {e}")))
        };
        let score: f64 = f[3].parse().map_err(|e| err(n, format!("score: {e}")))?;
        rows.push(LogRow {
            interval: int(f[0], "interval")?,
            trial_id: int(f[1], "trial_id")?,
            epoch: int(f[2], "epoch")?,
            score,
            cloned_from: if f[4].is_empty() {
                None
            } else {
                Some(int(f[4], "cloned_from")?)
            },
            params_digest: f[5].to_string(),
        });
    }
    Ok(rows)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let io = |source| HarnessError::Io {
        path: path.into(),
        source,
    };
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(io)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io)
}

pub fn read_schedule(path: &Path) -> Result<Schedule, HarnessError> {
    let text = fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.into(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| HarnessError::ScheduleFile {
        path: path.into(),
        message: e.to_string(),
    })
}

pub fn schedule_json(schedule: &Schedule) -> String {
    let mut s = serde_json::to_string_pretty(schedule).expect("schedule serialises");
    s.push('\n');
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchArtifacts {
    pub result: SearchResult,
    pub schedule_path: PathBuf,
    pub log_path: PathBuf,
}

/// `search --config <path> --out <dir>`
pub fn cmd_search(config: &Path, out: &Path) -> Result<SearchArtifacts, HarnessError> {
    let cfg = ExperimentConfig::load(config)?;
    let data = Arc::new(cfg.dataset()?);
    let result = search_classifier(&cfg.search, &cfg.trainer, data)?;
    let schedule_path = out.join(SCHEDULE_FILE);
    let log_path = out.join(SEARCH_LOG_FILE);
    atomic_write(&schedule_path, schedule_json(&result.schedule).as_bytes())?;
    atomic_write(&log_path, result.log_csv().as_bytes())?;
    log::info!(
        "search done: best trial {} score {:.4}, {} segments",
        result.best_trial,
        result.best_score,
        result.schedule.entries().len()
    );
    Ok(SearchArtifacts {
        result,
        schedule_path,
        log_path,
    })
}

/// `train --schedule <path> --mode <mode> --config <path> --out <dir>`
///
/// Writes `train_<mode>.csv` and `train_<mode>.json` (seeds, stretching).
pub fn cmd_train(
    schedule: &Path,
    mode: ReplayMode,
    config: &Path,
    out: &Path,
) -> Result<ReplayOutcome, HarnessError> {
    let cfg = ExperimentConfig::load(config)?;
    let schedule = read_schedule(schedule)?;
    let data = cfg.dataset()?;
    let outcome = replay(
        &schedule,
        mode,
        &cfg.trainer,
        &data,
        ReplayOptions::default(),
    )?;
    atomic_write(
        &out.join(format!("train_{mode}.csv")),
        outcome.to_csv().as_bytes(),
    )?;
    let meta = serde_json::json!({
        "mode": mode,
        "seed": outcome.seed,
        "shuffle_seed": outcome.shuffle_seed,
        "stretched_from": outcome.stretched_from,
        "final_test_accuracy": outcome.final_test_accuracy(),
    });
    atomic_write(
        &out.join(format!("train_{mode}.json")),
        serde_json::to_string_pretty(&meta)
            .expect("json")
            .as_bytes(),
    )?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineTrial {
    pub trial: usize,
    pub seed: u64,
    pub test_accuracy: f64,
}

/// Trains `trials` models, each under its own random schedule, and returns
/// their final test accuracies. Trials run on `workers` threads.
pub fn random_baseline(
    trainer: &TrainerConfig,
    data: &DatasetSplits,
    trials: usize,
    master_seed: u64,
    workers: usize,
) -> Result<Vec<BaselineTrial>, HarnessError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarnessError::Invalid(e.to_string()))?;
    pool.install(|| {
        (0..trials)
            .into_par_iter()
            .map(|trial| {
                let seed = rng::derive_seed(master_seed, Domain::Baseline, trial as u32);
                let spec = RandomScheduleSpec::new(trainer.epochs);
                let schedule = random_schedule(&spec, &mut rng::stream(seed, Domain::Baseline, 0))?;
                let cfg = TrainerConfig {
                    seed,
                    ..trainer.clone()
                };
                let outcome = replay(
                    &schedule,
                    ReplayMode::FullSchedule,
                    &cfg,
                    data,
                    ReplayOptions {
                        per_epoch_eval: false,
                    },
                )?;
                Ok(BaselineTrial {
                    trial,
                    seed,
                    test_accuracy: outcome.final_test_accuracy(),
                })
            })
            .collect()
    })
}

/// `baseline --config <path> --trials <n> --out <dir>`
pub fn cmd_baseline(
    config: &Path,
    trials: usize,
    out: &Path,
) -> Result<Vec<(usize, f64)>, HarnessError> {
    if trials == 0 {
        return Err(HarnessError::Config {
            path: config.into(),
            message: "--trials must be at least 1".into(),
        });
    }
    let cfg = ExperimentConfig::load(config)?;
    let data = cfg.dataset()?;
    let results = random_baseline(
        &cfg.trainer,
        &data,
        trials,
        cfg.search.master_seed,
        cfg.search.workers,
    )?;
    let mut csv = String::from("trial,seed,test_accuracy\n");
    for r in &results {
        writeln!(csv, "{},{},{:.6}", r.trial, r.seed, r.test_accuracy).expect("write to string");
    }
    atomic_write(&out.join(BASELINE_SCORES_FILE), csv.as_bytes())?;
    let scores: Vec<f64> = results.iter().map(|r| r.test_accuracy).collect();
    let curve = best_of_n_curve(&scores, trials)?;
    let mut csv = String::from("n,expected_best\n");
    for (n, e) in &curve {
        writeln!(csv, "{n},{e:.6}").expect("write to string");
    }
    atomic_write(&out.join(BEST_OF_N_FILE), csv.as_bytes())?;
    Ok(curve)
}

/// Per-interval aggregate of a search log.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalSummary {
    pub interval: usize,
    pub epoch: usize,
    pub best_score: f64,
    pub mean_score: f64,
    pub clones: usize,
}

pub fn summarize_log(rows: &[LogRow]) -> Vec<IntervalSummary> {
    let mut out: Vec<IntervalSummary> = vec![];
    let mut counts: Vec<usize> = vec![];
    for r in rows {
        if out.last().map(|s| s.interval) != Some(r.interval) {
            out.push(IntervalSummary {
                interval: r.interval,
                epoch: r.epoch,
                best_score: f64::MIN,
                mean_score: 0.0,
                clones: 0,
            });
            counts.push(0);
        }
        let s = out.last_mut().expect("pushed above");
        s.best_score = s.best_score.max(r.score);
        s.mean_score += r.score;
        s.clones += r.cloned_from.is_some() as usize;
        *counts.last_mut().expect("pushed above") += 1;
    }
    for (s, n) in out.iter_mut().zip(counts) {
        s.mean_score /= n as f64;
    }
    out
}

/// Path of the interval summary written next to the report at `out`.
pub fn summary_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "report".into());
    out.with_file_name(format!("{stem}_summary.csv"))
}

/// `report --in <dir> --out <path>`
///
/// Writes per-epoch op statistics of `<dir>/schedule.json` to `out` and, when
/// `<dir>/search_log.csv` exists, a per-interval score summary next to it.
pub fn cmd_report(input: &Path, out: &Path) -> Result<Vec<OpEpochStat>, HarnessError> {
    let schedule = read_schedule(&input.join(SCHEDULE_FILE))?;
    let stats = schedule_evolution(&schedule);
    let mut csv = String::from("epoch,op,mean_prob,mean_mag,prob_share\n");
    for s in &stats {
        writeln!(
            csv,
            "{},{},{:.4},{:.4},{:.6}",
            s.epoch, s.op, s.mean_prob, s.mean_mag, s.prob_share
        )
        .expect("write to string");
    }
    atomic_write(out, csv.as_bytes())?;

    let log_path = input.join(SEARCH_LOG_FILE);
    if log_path.exists() {
        let text = fs::read_to_string(&log_path).map_err(|source| HarnessError::Io {
            path: log_path.clone(),
            source,
        })?;
        let rows = parse_search_log(&text, &log_path)?;
        let mut csv = String::from("interval,epoch,best_score,mean_score,clones\n");
        for s in summarize_log(&rows) {
            writeln!(
                csv,
                "{},{},{:.6},{:.6},{}",
                s.interval, s.epoch, s.best_score, s.mean_score, s.clones
            )
            .expect("write to string");
        }
        atomic_write(&summary_path(out), csv.as_bytes())?;
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn mode_names_round_trip() {
        assert_eq!(ReplayMode::ALL.len(), 5);
        for m in ReplayMode::ALL {
            assert_eq!(m.name().parse::<ReplayMode>().unwrap(), m);
            assert_eq!(
                serde_json::to_string(&m).unwrap(),
                format!("\"{}\"", m.name())
            );
        }
        assert!("shuffled".parse::<ReplayMode>().is_err());
    }

    fn tiny_task() -> (DatasetSplits, TrainerConfig) {
        let spec = SyntheticSpec {
            image_size: 8,
            train_samples: 24,
            val_samples: 8,
            test_samples: 16,
            ..Default::default()
        };
        let trainer = TrainerConfig {
            epochs: 6,
            batch_size: 8,
            hidden_units: 4,
            seed: 2,
            ..Default::default()
        };
        (data::generate_synthetic(&spec).unwrap(), trainer)
    }

    #[test]
    fn mode_none_is_the_bare_baseline_run() {
        let (data, trainer) = tiny_task();
        let random = random_schedule(
            &RandomScheduleSpec::new(6),
            &mut stream(1, Domain::Baseline, 0),
        )
        .unwrap();
        let zero = Schedule::constant(6, PolicyParams::zero()).unwrap();
        let none = replay(
            &random,
            ReplayMode::None,
            &trainer,
            &data,
            ReplayOptions::default(),
        )
        .unwrap();
        let bare = replay(
            &zero,
            ReplayMode::FullSchedule,
            &trainer,
            &data,
            ReplayOptions::default(),
        )
        .unwrap();
        assert_eq!(none.epochs, bare.epochs);
    }

    #[test]
    fn single_segment_modes_coincide() {
        let (data, trainer) = tiny_task();
        let p = PolicyParams::random(&mut stream(3, Domain::Controller, 0));
        let schedule = Schedule::constant(6, p).unwrap();
        let runs: Vec<Vec<EpochRecord>> = ReplayMode::ALL[..4]
            .iter()
            .map(|&m| {
                replay(&schedule, m, &trainer, &data, ReplayOptions::default())
                    .unwrap()
                    .epochs
            })
            .collect();
        assert!(runs.windows(2).all(|w| w[0] == w[1]));
        let none = replay(
            &schedule,
            ReplayMode::None,
            &trainer,
            &data,
            ReplayOptions::default(),
        )
        .unwrap();
        assert_ne!(none.epochs, runs[0]);
    }

    #[test]
    fn sixteen_by_two_hundred_search_on_synthetic_data() {
        let spec = SyntheticSpec {
            image_size: 4,
            class_count: 2,
            train_samples: 4,
            val_samples: 4,
            test_samples: 4,
            ..Default::default()
        };
        let data = Arc::new(data::generate_synthetic(&spec).unwrap());
        let trainer = TrainerConfig {
            batch_size: 4,
            hidden_units: 0,
            baseline_cutout: false,
            ..Default::default()
        };
        let res = search_classifier(&SearchConfig::new(16, 200, 1), &trainer, data).unwrap();
        assert_eq!(res.schedule.epochs(), 200);
        assert_eq!(res.total_epochs_trained, 3200);
        assert!(res.schedule.entries().iter().all(|e| e.start % 3 == 0));
    }

    #[test]
    fn oracle_augmentation_matches_the_test_distribution() {
        let spec = SyntheticSpec {
            image_size: 8,
            rotation_deg: 0.0,
            ..Default::default()
        };
        let img = Image::new(8, 8, 1, (0..64).collect()).unwrap();
        let mut rng = stream(0, Domain::Replay, 0);
        assert_eq!(spec.apply_nuisance(&img, &mut rng), img);
        let mut src = NuisanceAugment(&SyntheticSpec {
            rotation_deg: 30.0,
            ..spec
        });
        assert!(src.next_policy(&mut rng).is_none());
        assert!((0..20).any(|_| src.augment(img.clone(), &mut rng) != img));
    }

    #[test]
    fn random_schedule_segments() {
        let mut rng = stream(0, Domain::Baseline, 0);
        let one = random_schedule(&RandomScheduleSpec::new(1), &mut rng).unwrap();
        assert_eq!(one.epochs(), 1);
        assert_eq!(one.entries().len(), 1);
        for _ in 0..200 {
            let s = random_schedule(&RandomScheduleSpec::new(200), &mut rng).unwrap();
            assert_eq!(s.epochs(), 200);
            assert!(s.segments().all(|(d, _)| (1..=40).contains(&d)));
        }
    }

    #[test]
    fn random_schedule_levels_are_uniform() {
        let mut rng = stream(1, Domain::Baseline, 0);
        let mut counts = [0usize; 11];
        let mut n = 0;
        while n < 100_000 {
            let s = random_schedule(&RandomScheduleSpec::new(40), &mut rng).unwrap();
            for (_, p) in s.segments() {
                counts[p.slots()[0].prob.get() as usize] += 1;
                n += 1;
            }
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((f - 1.0 / 11.0).abs() < 0.01, "{f}");
        }
    }

    #[test]
    fn best_of_n_endpoints() {
        let scores = [0.2, 0.5, 0.9, 0.4];
        let curve = best_of_n_curve(&scores, 200).unwrap();
        assert!((curve[0].1 - 0.5).abs() < 1e-12);
        assert!((curve[199].1 - 0.9).abs() < 1e-9);
        assert!(curve.windows(2).all(|w| w[1].1 >= w[0].1 - 1e-15));
        assert!(best_of_n_curve(&[], 3).is_err());
        assert!(best_of_n_curve(&scores, 0).is_err());
    }

    #[test]
    fn report_means_average_copies() {
        let mut levels = vec![(0u8, 0u8); 30];
        levels[0] = (4, 2);
        levels[1] = (6, 8);
        let p = PolicyParams::from_levels(&levels).unwrap();
        let stats = schedule_evolution(&Schedule::constant(2, p).unwrap());
        let shear = stats
            .iter()
            .find(|s| s.epoch == 1 && s.op == OpKind::ShearX)
            .unwrap();
        assert_eq!(
            (shear.mean_prob, shear.mean_mag, shear.prob_share),
            (5.0, 5.0, 1.0)
        );
        let zero = schedule_evolution(&Schedule::constant(3, PolicyParams::zero()).unwrap());
        assert!(zero
            .iter()
            .all(|s| s.mean_prob == 0.0 && s.mean_mag == 0.0 && s.prob_share == 0.0));
    }

    #[test]
    fn prob_shares_sum_to_one() {
        let mut rng = stream(4, Domain::Baseline, 0);
        let s = random_schedule(&RandomScheduleSpec::new(30), &mut rng).unwrap();
        for chunk in schedule_evolution(&s).chunks(OpKind::COUNT) {
            let total: f64 = chunk.iter().map(|c| c.prob_share).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_parse_reports_line_numbers() {
        let p = Path::new("log.csv");
        let ok = format!("{SEARCH_LOG_HEADER}\n0,1,3,0.5,,abcd\n0,2,3,0.25,1,ef01\n");
        let rows = parse_search_log(&ok, p).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].cloned_from, Some(1));
        let bad = format!("{SEARCH_LOG_HEADER}\n0,1,3,0.5,,abcd\n0,2,x,0.25,1,ef01\n");
        match parse_search_log(&bad, p) {
            Err(HarnessError::LogRow { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let summary = summarize_log(&rows);
        assert_eq!(summary.len(), 1);
        assert_eq!(summary[0].clones, 1);
        assert!((summary[0].mean_score - 0.375).abs() < 1e-12);
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
