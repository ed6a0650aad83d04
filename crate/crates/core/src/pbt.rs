//! Population based training over augmentation policies.
//!
//! Trials advance in synchronous generations: every trial trains
//! `ready_interval` epochs under its current policy, is evaluated, and then
//! the controller runs one exploit/explore round. Trials in the bottom
//! truncation bucket clone a random top-bucket trial (weights, policy and
//! policy history) and perturb the copied policy.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::MagLevel;
use crate::policy::{PolicyParams, ProbLevel, Schedule, ScheduleError};
use crate::rng::{self, Domain};

pub type TrainableError = Box<dyn std::error::Error + Send + Sync>;

/// A child model the search can train, score, and copy.
pub trait Trainable: Send {
    /// Trains one epoch with every training image augmented by `policy`.
    fn train_epoch(
        &mut self,
        policy: &PolicyParams,
        rng: &mut rng::Rng,
    ) -> Result<(), TrainableError>;

    /// Accuracy on the held-out search validation split.
    fn evaluate(&self) -> Result<f64, TrainableError>;

    fn save_checkpoint(&self) -> Vec<u8>;

    fn load_checkpoint(&mut self, bytes: &[u8]) -> Result<(), TrainableError>;
}

/// Creates the model for trial `trial_id`, initialised from `seed`.
pub trait TrainableFactory: Sync {
    fn create(&self, trial_id: usize, seed: u64) -> Result<Box<dyn Trainable>, TrainableError>;
}

impl<F> TrainableFactory for F
where
    F: Fn(usize, u64) -> Result<Box<dyn Trainable>, TrainableError> + Sync,
{
    fn create(&self, trial_id: usize, seed: u64) -> Result<Box<dyn Trainable>, TrainableError> {
        self(trial_id, seed)
    }
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("trial {trial} failed: {source}")]
    Trial {
        trial: usize,
        #[source]
        source: TrainableError,
    },
    #[error("trial {trial} reported non-finite score {score}")]
    Score { trial: usize, score: f64 },
    #[error("winning lineage is inconsistent: {0}")]
    Lineage(#[from] ScheduleError),
}

fn default_ready_interval() -> usize {
    3
}
fn default_truncation() -> f64 {
    0.25
}
fn default_resample() -> f64 {
    0.2
}
fn default_amounts() -> Vec<u8> {
    vec![0, 1, 2, 3]
}
fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub population_size: usize,
    pub epochs: usize,
    #[serde(default = "default_ready_interval")]
    pub ready_interval: usize,
    #[serde(default = "default_truncation")]
    pub truncation_fraction: f64,
    #[serde(default = "default_resample")]
    pub explore_resample_prob: f64,
    #[serde(default = "default_amounts")]
    pub perturb_amounts: Vec<u8>,
    pub master_seed: u64,
    /// Threads used to train trials within an interval. Has no effect on results.
    #[serde(default = "default_workers")]
    pub workers: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            population_size: 16,
            epochs: 200,
            ready_interval: default_ready_interval(),
            truncation_fraction: default_truncation(),
            explore_resample_prob: default_resample(),
            perturb_amounts: default_amounts(),
            master_seed: 0,
            workers: default_workers(),
        }
    }
}

impl SearchConfig {
    /// Config with every optional field at its default.
    pub fn new(population_size: usize, epochs: usize, master_seed: u64) -> Self {
        Self {
            population_size,
            epochs,
            ready_interval: default_ready_interval(),
            truncation_fraction: default_truncation(),
            explore_resample_prob: default_resample(),
            perturb_amounts: default_amounts(),
            master_seed,
            workers: default_workers(),
        }
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |field, reason: String| Err(SearchError::Config { field, reason });
        if self.population_size < 2 {
            return bad(
                "population_size",
                format!("must be at least 2, got {}", self.population_size),
            );
        }
        if !(self.truncation_fraction > 0.0 && self.truncation_fraction <= 0.5) {
            return bad(
                "truncation_fraction",
                format!("must lie in (0, 0.5], got {}", self.truncation_fraction),
            );
        }
        if self.ready_interval == 0 {
            return bad("ready_interval", "must be positive".into());
        }
        if self.epochs < self.ready_interval {
            return bad(
                "epochs",
                format!(
                    "must be at least ready_interval ({}), got {}",
                    self.ready_interval, self.epochs
                ),
            );
        }
        if !(0.0..=1.0).contains(&self.explore_resample_prob) {
            return bad(
                "explore_resample_prob",
                format!("must lie in [0, 1], got {}", self.explore_resample_prob),
            );
        }
        if self.perturb_amounts.is_empty() {
            return bad("perturb_amounts", "must not be empty".into());
        }
        if self.workers == 0 {
            return bad("workers", "must be positive".into());
        }
        Ok(())
    }

    /// Size of both the top and bottom selection buckets.
    pub fn truncation_count(&self) -> usize {
        (self.truncation_fraction * self.population_size as f64).floor() as usize
    }

    pub fn explore_params(&self) -> ExploreParams {
        ExploreParams {
            resample_prob: self.explore_resample_prob,
            amounts: self.perturb_amounts.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExploreParams {
    pub resample_prob: f64,
    pub amounts: Vec<u8>,
}

impl Default for ExploreParams {
    fn default() -> Self {
        Self {
            resample_prob: default_resample(),
            amounts: default_amounts(),
        }
    }
}

/// What explore did to a single level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Mutation {
    Resample,
    Perturb { amount: u8, up: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LevelMutation {
    pub slot: usize,
    /// `true` for the probability level, `false` for magnitude.
    pub is_prob: bool,
    pub before: u8,
    pub after: u8,
    pub kind: Mutation,
}

fn mutate_level<R: Rng + ?Sized>(
    value: u8,
    max: u8,
    params: &ExploreParams,
    rng: &mut R,
) -> (u8, Mutation) {
    if rng.gen::<f64>() < params.resample_prob {
        return (rng.gen_range(0..=max), Mutation::Resample);
    }
    let amount = params.amounts[rng.gen_range(0..params.amounts.len())];
    let up = rng.gen::<f64>() < 0.5;
    let next = if up {
        (value as i32 + amount as i32).min(max as i32)
    } else {
        (value as i32 - amount as i32).max(0)
    };
    (next as u8, Mutation::Perturb { amount, up })
}

/// Perturbs all 60 levels independently with the default explore settings.
pub fn explore<R: Rng + ?Sized>(p: &PolicyParams, rng: &mut R) -> PolicyParams {
    explore_traced(p, &ExploreParams::default(), rng).0
}

/// Explore with explicit settings, also returning one record per level
/// (probability then magnitude, slot by slot).
pub fn explore_traced<R: Rng + ?Sized>(
    p: &PolicyParams,
    params: &ExploreParams,
    rng: &mut R,
) -> (PolicyParams, Vec<LevelMutation>) {
    let mut out = p.clone();
    let mut log = Vec::with_capacity(p.slots().len() * 2);
    for (slot, s) in p.slots().iter().enumerate() {
        let (prob, pk) = mutate_level(s.prob.get(), ProbLevel::MAX, params, rng);
        let (mag, mk) = mutate_level(s.mag.get(), MagLevel::MAX, params, rng);
        log.push(LevelMutation {
            slot,
            is_prob: true,
            before: s.prob.get(),
            after: prob,
            kind: pk,
        });
        log.push(LevelMutation {
            slot,
            is_prob: false,
            before: s.mag.get(),
            after: mag,
            kind: mk,
        });
        out.set_levels(
            slot,
            ProbLevel::new(prob).expect("clipped to domain"),
            MagLevel::new(mag).expect("clipped to domain"),
        );
    }
    (out, log)
}

/// One population member.
pub struct Trial {
    pub id: usize,
    model: Box<dyn Trainable>,
    pub params: PolicyParams,
    /// `(epoch, policy trained under)`, one entry per completed epoch.
    pub history: Vec<(usize, PolicyParams)>,
    pub score: f64,
    pub epoch: usize,
    rng: rng::Rng,
}

impl Trial {
    pub fn new(id: usize, model: Box<dyn Trainable>, rng: rng::Rng) -> Self {
        Self {
            id,
            model,
            params: PolicyParams::zero(),
            history: vec![],
            score: 0.0,
            epoch: 0,
            rng,
        }
    }

    pub fn model(&self) -> &dyn Trainable {
        self.model.as_ref()
    }

    fn step(&mut self, epochs: usize) -> Result<(), SearchError> {
        for _ in 0..epochs {
            self.history.push((self.epoch, self.params.clone()));
            self.model
                .train_epoch(&self.params, &mut self.rng)
                .map_err(|source| SearchError::Trial {
                    trial: self.id,
                    source,
                })?;
            self.epoch += 1;
        }
        let score = self.model.evaluate().map_err(|source| SearchError::Trial {
            trial: self.id,
            source,
        })?;
        if !score.is_finite() {
            return Err(SearchError::Score {
                trial: self.id,
                score,
            });
        }
        self.score = score;
        Ok(())
    }
}

/// Indices of `trials` ordered best first: score descending, then id ascending.
pub fn rank(trials: &[Trial]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..trials.len()).collect();
    order.sort_by(|&a, &b| {
        trials[b]
            .score
            .total_cmp(&trials[a].score)
            .then(trials[a].id.cmp(&trials[b].id))
    });
    order
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CloneEvent {
    pub src: usize,
    pub dst: usize,
    pub epoch: usize,
    /// Policy the destination continues with, after explore.
    pub params: PolicyParams,
    pub mutations: Vec<LevelMutation>,
}

/// Truncation selection. Each bottom-bucket trial copies the checkpoint,
/// policy, history and score of a uniformly drawn top-bucket trial, then
/// explores the copied policy. Middle trials are not touched.
pub fn exploit<R: Rng + ?Sized>(
    trials: &mut [Trial],
    cfg: &SearchConfig,
    rng: &mut R,
) -> Result<Vec<CloneEvent>, SearchError> {
    let cut = cfg.truncation_count();
    if cut == 0 || 2 * cut > trials.len() {
        log::warn!(
            "population of {} too small for truncation {}, skipping exploit",
            trials.len(),
            cfg.truncation_fraction
        );
        return Ok(vec![]);
    }
    let order = rank(trials);
    let top = &order[..cut];
    let bottom = &order[order.len() - cut..];
    let explore_params = cfg.explore_params();
    let mut events = Vec::with_capacity(cut);
    for &dst in bottom {
        let src = top[rng.gen_range(0..top.len())];
        let checkpoint = trials[src].model.save_checkpoint();
        let (params, mutations) = explore_traced(&trials[src].params, &explore_params, rng);
        let history = trials[src].history.clone();
        let score = trials[src].score;
        let (src_id, epoch) = (trials[src].id, trials[src].epoch);
        let t = &mut trials[dst];
        t.model
            .load_checkpoint(&checkpoint)
            .map_err(|source| SearchError::Trial {
                trial: t.id,
                source,
            })?;
        t.history = history;
        t.score = score;
        t.epoch = epoch;
        t.params = params.clone();
        events.push(CloneEvent {
            src: src_id,
            dst: t.id,
            epoch,
            params,
            mutations,
        });
    }
    Ok(events)
}

/// Compresses the winner's lineage into a schedule of `cfg.epochs` epochs.
pub fn extract_schedule(winner: &Trial, cfg: &SearchConfig) -> Result<Schedule, ScheduleError> {
    Schedule::from_history(&winner.history, cfg.epochs)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub id: usize,
    pub score: f64,
    pub params_digest: String,
    pub cloned_from: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntervalRecord {
    pub interval: usize,
    /// Epochs completed by every trial at the end of this interval.
    pub epoch: usize,
    pub trials: Vec<TrialRecord>,
    pub clones: Vec<CloneEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchResult {
    pub schedule: Schedule,
    pub best_score: f64,
    pub best_trial: usize,
    pub total_epochs_trained: usize,
    pub intervals: Vec<IntervalRecord>,
}

pub const SEARCH_LOG_HEADER: &str = "interval,trial_id,epoch,score,cloned_from,params_digest";

impl SearchResult {
    /// Search log as CSV, one row per trial per interval.
    pub fn log_csv(&self) -> String {
        let mut out = String::from(SEARCH_LOG_HEADER);
        out.push('\n');
        for rec in &self.intervals {
            for t in &rec.trials {
                let from = t.cloned_from.map(|s| s.to_string()).unwrap_or_default();
                writeln!(
                    out,
                    "{},{},{},{:.6},{},{}",
                    rec.interval, t.id, rec.epoch, t.score, from, t.params_digest
                )
                .expect("write to string");
            }
        }
        out
    }
}

/// Runs the full search and returns the winning lineage as a schedule.
pub fn run_search(
    cfg: &SearchConfig,
    factory: &dyn TrainableFactory,
) -> Result<SearchResult, SearchError> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| SearchError::Config {
            field: "workers",
            reason: e.to_string(),
        })?;

    let mut trials = (0..cfg.population_size)
        .map(|id| {
            let seed = rng::derive_seed(cfg.master_seed, Domain::ModelInit, id as u32);
            let model = factory
                .create(id, seed)
                .map_err(|source| SearchError::Trial { trial: id, source })?;
            Ok(Trial::new(
                id,
                model,
                rng::stream(cfg.master_seed, Domain::Trial, id as u32),
            ))
        })
        .collect::<Result<Vec<_>, SearchError>>()?;
    let mut controller = rng::stream(cfg.master_seed, Domain::Controller, 0);

    let mut intervals = vec![];
    let mut done = 0;
    let mut total_epochs_trained = 0;
    while done < cfg.epochs {
        let steps = cfg.ready_interval.min(cfg.epochs - done);
        pool.install(|| trials.par_iter_mut().try_for_each(|t| t.step(steps)))?;
        done += steps;
        total_epochs_trained += steps * trials.len();

        let mut records: Vec<TrialRecord> = trials
            .iter()
            .map(|t| TrialRecord {
                id: t.id,
                score: t.score,
                params_digest: t.params.digest(),
                cloned_from: None,
            })
            .collect();
        let clones = exploit(&mut trials, cfg, &mut controller)?;
        for c in &clones {
            records[c.dst].cloned_from = Some(c.src);
        }
        log::debug!(
            "interval {} epoch {done}: best {:.4}, {} clones",
            intervals.len(),
            records.iter().map(|r| r.score).fold(f64::MIN, f64::max),
            clones.len()
        );
        intervals.push(IntervalRecord {
            interval: intervals.len(),
            epoch: done,
            trials: records,
            clones,
        });
    }

    let winner = &trials[rank(&trials)[0]];
    let schedule = extract_schedule(winner, cfg)?;
    Ok(SearchResult {
        schedule,
        best_score: winner.score,
        best_trial: winner.id,
        total_epochs_trained,
        intervals,
    })
}
