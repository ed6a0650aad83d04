//! Policy template, schedules and schedule transforms.

use std::fmt;

use num_bigint::BigUint;
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{apply_op, LevelError, MagLevel, OpKind};
use crate::image::Image;

/// Copies of each op in a policy.
pub const COPIES_PER_OP: usize = 2;
/// Number of `(op, prob, mag)` slots.
pub const POLICY_SLOTS: usize = OpKind::COUNT * COPIES_PER_OP;

/// Probabilities of applying 0, 1 or 2 ops per image.
pub const COUNT_DISTRIBUTION: [f64; 3] = [0.2, 0.3, 0.5];

/// Probability level in `0..=10`, i.e. tenths.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
#[serde(try_from = "i64", into = "u8")]
pub struct ProbLevel(u8);

impl ProbLevel {
    pub const MAX: u8 = 10;
    pub const LEVELS: usize = 11;

    pub fn new(level: u8) -> Result<Self, LevelError> {
        Self::try_from(level as i64)
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn probability(self) -> f64 {
        self.0 as f64 / 10.0
    }
}

impl TryFrom<i64> for ProbLevel {
    type Error = LevelError;

    fn try_from(v: i64) -> Result<Self, Self::Error> {
        if (0..=Self::MAX as i64).contains(&v) {
            Ok(ProbLevel(v as u8))
        } else {
            Err(LevelError {
                kind: "probability",
                value: v,
                max: Self::MAX,
            })
        }
    }
}

impl From<ProbLevel> for u8 {
    fn from(p: ProbLevel) -> u8 {
        p.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OpParam {
    pub op: OpKind,
    pub prob: ProbLevel,
    pub mag: MagLevel,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("policy has {0} slots, expected {POLICY_SLOTS}")]
    SlotCount(usize),
    #[error("slot {slot} holds `{found}`, expected `{expected}`")]
    SlotOp {
        slot: usize,
        expected: OpKind,
        found: OpKind,
    },
    #[error(transparent)]
    Level(#[from] LevelError),
}

/// The 30 `(op, prob, mag)` tuples. Slot `i` always holds op
/// `OpKind::ALL[i / 2]`; only the levels vary.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<OpParam>", into = "Vec<OpParam>")]
pub struct PolicyParams {
    slots: [OpParam; POLICY_SLOTS],
}

pub fn slot_op(slot: usize) -> OpKind {
    OpKind::ALL[slot / COPIES_PER_OP]
}

impl PolicyParams {
    /// All probabilities and magnitudes at level 0.
    pub fn zero() -> Self {
        Self {
            slots: std::array::from_fn(|i| OpParam {
                op: slot_op(i),
                prob: ProbLevel::default(),
                mag: MagLevel::default(),
            }),
        }
    }

    /// Builds a policy from `(prob, mag)` level pairs in slot order.
    pub fn from_levels(levels: &[(u8, u8)]) -> Result<Self, PolicyError> {
        if levels.len() != POLICY_SLOTS {
            return Err(PolicyError::SlotCount(levels.len()));
        }
        let mut p = Self::zero();
        for (slot, &(prob, mag)) in p.slots.iter_mut().zip(levels) {
            slot.prob = ProbLevel::new(prob)?;
            slot.mag = MagLevel::new(mag)?;
        }
        Ok(p)
    }

    /// Every level drawn uniformly from its domain.
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut p = Self::zero();
        for slot in p.slots.iter_mut() {
            slot.prob = ProbLevel(rng.gen_range(0..=ProbLevel::MAX));
            slot.mag = MagLevel::new(rng.gen_range(0..=MagLevel::MAX)).expect("in range");
        }
        p
    }

    pub fn slots(&self) -> &[OpParam; POLICY_SLOTS] {
        &self.slots
    }

    /// Sets the levels of one slot; the op is fixed.
    pub fn set_levels(&mut self, slot: usize, prob: ProbLevel, mag: MagLevel) {
        self.slots[slot].prob = prob;
        self.slots[slot].mag = mag;
    }

    pub fn prob_levels(&self) -> impl Iterator<Item = u8> + '_ {
        self.slots.iter().map(|s| s.prob.get())
    }

    /// Short hex digest of the levels, stable across platforms.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.slots {
            h.update([s.op.index() as u8, s.prob.get(), s.mag.get()]);
        }
        h.finalize()[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self::zero()
    }
}

impl fmt::Debug for PolicyParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let levels: Vec<String> = self
            .slots
            .iter()
            .filter(|s| s.prob.get() > 0 || s.mag.get() > 0)
            .map(|s| format!("{}:{}/{}", s.op, s.prob.get(), s.mag.get()))
            .collect();
        write!(f, "PolicyParams[{}]", levels.join(" "))
    }
}

impl TryFrom<Vec<OpParam>> for PolicyParams {
    type Error = PolicyError;

    fn try_from(v: Vec<OpParam>) -> Result<Self, Self::Error> {
        if v.len() != POLICY_SLOTS {
            return Err(PolicyError::SlotCount(v.len()));
        }
        for (slot, p) in v.iter().enumerate() {
            if p.op != slot_op(slot) {
                return Err(PolicyError::SlotOp {
                    slot,
                    expected: slot_op(slot),
                    found: p.op,
                });
            }
        }
        Ok(Self {
            slots: v.try_into().expect("length checked"),
        })
    }
}

impl From<PolicyParams> for Vec<OpParam> {
    fn from(p: PolicyParams) -> Self {
        p.slots.to_vec()
    }
}

/// Samples how many ops a single policy application may apply.
pub fn sample_op_count<R: Rng + ?Sized>(rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    if u < COUNT_DISTRIBUTION[0] {
        0
    } else if u < COUNT_DISTRIBUTION[0] + COUNT_DISTRIBUTION[1] {
        1
    } else {
        2
    }
}

/// What a single policy application did.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTrace {
    pub count: usize,
    pub applied: Vec<OpParam>,
}

/// Augments one image with the policy template: shuffle the 30 tuples, draw
/// an op budget from [`COUNT_DISTRIBUTION`], then walk the shuffled tuples
/// applying each with its probability until the budget is spent.
pub fn apply_policy<R: Rng + ?Sized>(img: &Image, policy: &PolicyParams, rng: &mut R) -> Image {
    apply_policy_traced(img, policy, rng).0
}

pub fn apply_policy_traced<R: Rng + ?Sized>(
    img: &Image,
    policy: &PolicyParams,
    rng: &mut R,
) -> (Image, PolicyTrace) {
    let mut order = policy.slots;
    order.shuffle(rng);
    let count = sample_op_count(rng);
    let mut remaining = count;
    let mut out = img.clone();
    let mut applied = Vec::with_capacity(2);
    for p in order.iter() {
        if remaining == 0 {
            break;
        }
        if rng.gen::<f64>() < p.prob.probability() {
            remaining -= 1;
            out = apply_op(&out, p.op, p.mag, rng);
            applied.push(*p);
        }
    }
    (out, PolicyTrace { count, applied })
}

/// Size of the per-epoch policy space, `(10 * 11)^30`.
pub fn search_space_size() -> BigUint {
    BigUint::from((MagLevel::LEVELS * ProbLevel::LEVELS) as u32).pow(POLICY_SLOTS as u32)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("schedule has no entries")]
    Empty,
    #[error("schedule must cover at least one epoch")]
    ZeroEpochs,
    #[error("first entry starts at epoch {0}, expected 0")]
    FirstStart(usize),
    #[error("entry {index} starts at {start}, not after previous start {previous}")]
    Unsorted {
        index: usize,
        start: usize,
        previous: usize,
    },
    #[error("entry {index} starts at {start}, beyond the last epoch {last}")]
    StartOutOfRange {
        index: usize,
        start: usize,
        last: usize,
    },
    #[error("epoch {epoch} out of range 0..{epochs}")]
    EpochOutOfRange { epoch: usize, epochs: usize },
    #[error("target length must be positive")]
    NonPositiveLength,
    #[error(
        "history has a gap or overlap at position {position}: epoch {found}, expected {expected}"
    )]
    HistoryGap {
        position: usize,
        expected: usize,
        found: usize,
    },
    #[error("history covers {found} epochs, expected {expected}")]
    HistoryLength { expected: usize, found: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub start: usize,
    pub params: PolicyParams,
}

/// Piecewise-constant map from epoch to policy. Each entry holds from its
/// start (inclusive) until the next entry's start.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSchedule", into = "RawSchedule")]
pub struct Schedule {
    epochs: usize,
    entries: Vec<ScheduleEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    epochs: usize,
    entries: Vec<ScheduleEntry>,
}

impl TryFrom<RawSchedule> for Schedule {
    type Error = ScheduleError;

    fn try_from(r: RawSchedule) -> Result<Self, Self::Error> {
        Schedule::new(r.epochs, r.entries)
    }
}

impl From<Schedule> for RawSchedule {
    fn from(s: Schedule) -> Self {
        RawSchedule {
            epochs: s.epochs,
            entries: s.entries,
        }
    }
}

impl Schedule {
    pub fn new(epochs: usize, entries: Vec<ScheduleEntry>) -> Result<Self, ScheduleError> {
        if epochs == 0 {
            return Err(ScheduleError::ZeroEpochs);
        }
        let first = entries.first().ok_or(ScheduleError::Empty)?;
        if first.start != 0 {
            return Err(ScheduleError::FirstStart(first.start));
        }
        for (index, pair) in entries.windows(2).enumerate() {
            if pair[1].start <= pair[0].start {
                return Err(ScheduleError::Unsorted {
                    index: index + 1,
                    start: pair[1].start,
                    previous: pair[0].start,
                });
            }
        }
        if let Some((index, e)) = entries.iter().enumerate().find(|(_, e)| e.start >= epochs) {
            return Err(ScheduleError::StartOutOfRange {
                index,
                start: e.start,
                last: epochs - 1,
            });
        }
        Ok(Self { epochs, entries })
    }

    /// A single policy over the whole run.
    pub fn constant(epochs: usize, params: PolicyParams) -> Result<Self, ScheduleError> {
        Self::new(epochs, vec![ScheduleEntry { start: 0, params }])
    }

    /// Builds a schedule from consecutive `(duration, params)` segments.
    pub fn from_segments(
        segments: impl IntoIterator<Item = (usize, PolicyParams)>,
    ) -> Result<Self, ScheduleError> {
        let mut start = 0;
        let mut entries = vec![];
        for (duration, params) in segments {
            if duration == 0 {
                continue;
            }
            entries.push(ScheduleEntry { start, params });
            start += duration;
        }
        Self::new(start, entries)
    }

    /// Compresses a per-epoch history into segments. `history[i]` must be
    /// epoch `i`; runs of equal policies are merged.
    pub fn from_history(
        history: &[(usize, PolicyParams)],
        epochs: usize,
    ) -> Result<Self, ScheduleError> {
        if history.len() != epochs {
            return Err(ScheduleError::HistoryLength {
                expected: epochs,
                found: history.len(),
            });
        }
        let mut entries: Vec<ScheduleEntry> = vec![];
        for (position, (epoch, params)) in history.iter().enumerate() {
            if *epoch != position {
                return Err(ScheduleError::HistoryGap {
                    position,
                    expected: position,
                    found: *epoch,
                });
            }
            if entries.last().map(|e| &e.params) != Some(params) {
                entries.push(ScheduleEntry {
                    start: *epoch,
                    params: params.clone(),
                });
            }
        }
        Self::new(epochs, entries)
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    pub fn entries(&self) -> &[ScheduleEntry] {
        &self.entries
    }

    /// Policy in force at `epoch`.
    pub fn at(&self, epoch: usize) -> Result<&PolicyParams, ScheduleError> {
        if epoch >= self.epochs {
            return Err(ScheduleError::EpochOutOfRange {
                epoch,
                epochs: self.epochs,
            });
        }
        let idx = self.entries.partition_point(|e| e.start <= epoch) - 1;
        Ok(&self.entries[idx].params)
    }

    /// `(duration, params)` per entry.
    pub fn segments(&self) -> impl Iterator<Item = (usize, &PolicyParams)> + '_ {
        self.entries.iter().enumerate().map(move |(i, e)| {
            let end = self.entries.get(i + 1).map_or(self.epochs, |n| n.start);
            (end - e.start, &e.params)
        })
    }

    /// One policy per epoch.
    pub fn expand(&self) -> Vec<PolicyParams> {
        self.segments()
            .flat_map(|(d, p)| std::iter::repeat(p.clone()).take(d))
            .collect()
    }

    /// Rescales to `new_epochs`: output epoch `e` takes the policy at input
    /// epoch `floor(e * epochs / new_epochs)`.
    pub fn stretch(&self, new_epochs: usize) -> Result<Schedule, ScheduleError> {
        if new_epochs == 0 {
            return Err(ScheduleError::NonPositiveLength);
        }
        let (old, new) = (self.epochs as u128, new_epochs as u128);
        // first output epoch e with floor(e * old / new) >= start
        let first_output = |start: usize| -> usize { (start as u128 * new).div_ceil(old) as usize };
        let mut entries: Vec<ScheduleEntry> = vec![];
        for (i, e) in self.entries.iter().enumerate() {
            let begin = first_output(e.start);
            let end = self
                .entries
                .get(i + 1)
                .map_or(new_epochs, |n| first_output(n.start));
            if begin < end {
                entries.push(ScheduleEntry {
                    start: begin,
                    params: e.params.clone(),
                });
            }
        }
        Schedule::new(new_epochs, entries)
    }

    /// Policy in force at the final epoch.
    pub fn last_policy(&self) -> &PolicyParams {
        &self.entries.last().expect("schedule is never empty").params
    }

    /// Permutes the segments uniformly at random while keeping each
    /// segment's duration.
    pub fn shuffle_order<R: Rng + ?Sized>(&self, rng: &mut R) -> Schedule {
        let mut segments: Vec<(usize, PolicyParams)> =
            self.segments().map(|(d, p)| (d, p.clone())).collect();
        segments.shuffle(rng);
        Schedule::from_segments(segments).expect("durations are positive and sum to epochs")
    }

    /// Time-independent sampler weighting each segment by its duration.
    pub fn collapse(&self) -> StationarySampler {
        let (weights, policies): (Vec<usize>, Vec<PolicyParams>) =
            self.segments().map(|(d, p)| (d, p.clone())).unzip();
        StationarySampler {
            index: WeightedIndex::new(&weights).expect("durations are positive"),
            weights,
            policies,
        }
    }
}

/// Draws a policy with probability proportional to its schedule duration.
#[derive(Debug, Clone)]
pub struct StationarySampler {
    policies: Vec<PolicyParams>,
    weights: Vec<usize>,
    index: WeightedIndex<usize>,
}

impl StationarySampler {
    /// Draws a policy. A single-policy sampler consumes no randomness.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &PolicyParams {
        if self.policies.len() == 1 {
            return &self.policies[0];
        }
        &self.policies[self.index.sample(rng)]
    }

    pub fn policies(&self) -> &[PolicyParams] {
        &self.policies
    }

    pub fn weights(&self) -> &[usize] {
        &self.weights
    }
}
