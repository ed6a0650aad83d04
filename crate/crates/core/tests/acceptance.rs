//! End-to-end acceptance checks A1 to A10. Runs as a plain binary so every
//! criterion prints one PASS/FAIL line; the process fails if any criterion
//! does.

use std::fs;
use std::sync::Arc;
use std::time::Instant;

use num_bigint::BigUint;
use rand::Rng;

use pba_core::augment::{apply_op, cutout_patch, MagLevel, OpKind};
use pba_core::data::{generate_synthetic, SyntheticSpec};
use pba_core::harness::{
    best_of_n_curve, cmd_search, oracle_gaps, random_baseline, replay, search_classifier,
    ReplayMode, ReplayOptions,
};
use pba_core::image::Image;
use pba_core::pbt::{
    explore_traced, run_search, ExploreParams, Mutation, Trainable, TrainableError,
};
use pba_core::policy::{apply_policy_traced, search_space_size, PolicyParams, COUNT_DISTRIBUTION};
use pba_core::rng::{self, Domain};
use pba_core::trainer::{ClassifierTrial, LrSchedule, ToyClassifier};
use pba_core::{SearchConfig, TrainerConfig};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: String) -> Outcome {
    if cond {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn median(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn a1_explore_distribution() -> Outcome {
    const CALLS: usize = 100_000;
    let params = ExploreParams::default();
    let mut rng = rng::stream(1, Domain::Controller, 0);
    let start = PolicyParams::random(&mut rng);
    let mut resampled = [0usize; 60];
    let mut amounts = [0usize; 4];
    let (mut perturbs, mut ups) = (0usize, 0usize);
    for _ in 0..CALLS {
        let (_, log) = explore_traced(&start, &params, &mut rng);
        for (i, m) in log.iter().enumerate() {
            match m.kind {
                Mutation::Resample => resampled[i] += 1,
                Mutation::Perturb { amount, up } => {
                    perturbs += 1;
                    amounts[amount as usize] += 1;
                    ups += up as usize;
                }
            }
        }
    }
    let worst_resample = resampled
        .iter()
        .map(|&r| (r as f64 / CALLS as f64 - 0.2).abs())
        .fold(0.0, f64::max);
    let amount_freq: Vec<f64> = amounts
        .iter()
        .map(|&a| a as f64 / perturbs as f64)
        .collect();
    let worst_amount = amount_freq
        .iter()
        .map(|f| (f - 0.25).abs())
        .fold(0.0, f64::max);
    let sign = ups as f64 / perturbs as f64;
    check(
        worst_resample <= 0.01 && worst_amount <= 0.01 && (sign - 0.5).abs() <= 0.01,
        format!(
            "max |resample - 0.2| = {worst_resample:.4}, amount freqs {amount_freq:.4?}, up fraction {sign:.4}"
        ),
    )
}

fn a2_count_distribution() -> Outcome {
    const CALLS: usize = 100_000;
    let mut rng = rng::stream(2, Domain::Controller, 0);
    let policy = PolicyParams::random(&mut rng);
    let img = Image::new(4, 4, 1, (0..16).map(|v| v as u8 * 16).collect()).unwrap();
    let mut counts = [0usize; 3];
    for _ in 0..CALLS {
        let (_, trace) = apply_policy_traced(&img, &policy, &mut rng);
        assert!(
            trace.applied.len() <= 2,
            "applied {} ops",
            trace.applied.len()
        );
        assert!(trace.applied.len() <= trace.count);
        counts[trace.count] += 1;
    }
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / CALLS as f64).collect();
    let worst = freq
        .iter()
        .zip(COUNT_DISTRIBUTION)
        .map(|(f, e)| (f - e).abs())
        .fold(0.0, f64::max);
    check(
        worst <= 0.01,
        format!("count freqs {freq:.4?}, applied ops never above 2"),
    )
}

fn a3_search_space() -> Outcome {
    // 110^30 = 11^30 * 10^30, and 11^30 fits in a u128
    let expected: BigUint = format!("{}{}", 11u128.pow(30), "0".repeat(30))
        .parse()
        .unwrap();
    let got = search_space_size();
    let digits = got.to_string();
    check(
        got == expected && digits.len() == 62 && digits.starts_with("17449"),
        format!("{}.{}e{}", &digits[..1], &digits[1..5], digits.len() - 1),
    )
}

/// Fake trainable scored by everything it has trained under, so the score
/// depends on its whole lineage.
struct Scripted {
    trained: Vec<PolicyParams>,
}

impl Trainable for Scripted {
    fn train_epoch(
        &mut self,
        policy: &PolicyParams,
        _rng: &mut rng::Rng,
    ) -> Result<(), TrainableError> {
        self.trained.push(policy.clone());
        Ok(())
    }
    fn evaluate(&self) -> Result<f64, TrainableError> {
        Ok(self
            .trained
            .iter()
            .flat_map(|p| p.prob_levels())
            .map(f64::from)
            .sum())
    }
    fn save_checkpoint(&self) -> Vec<u8> {
        serde_json::to_vec(&self.trained).unwrap()
    }
    fn load_checkpoint(&mut self, bytes: &[u8]) -> Result<(), TrainableError> {
        self.trained = serde_json::from_slice(bytes)?;
        Ok(())
    }
}

fn a4_bookkeeping() -> Outcome {
    let cfg = SearchConfig {
        ready_interval: 3,
        truncation_fraction: 0.25,
        ..SearchConfig::new(16, 30, 11)
    };
    let factory = |_: usize, _: u64| -> Result<Box<dyn Trainable>, TrainableError> {
        Ok(Box::new(Scripted { trained: vec![] }))
    };
    let res = run_search(&cfg, &factory).map_err(|e| e.to_string())?;
    let rounds = res
        .intervals
        .iter()
        .filter(|iv| !iv.clones.is_empty())
        .count();
    let clones: Vec<usize> = res.intervals.iter().map(|iv| iv.clones.len()).collect();

    // replay the lineage from the clone log alone
    let mut params = vec![PolicyParams::zero(); 16];
    let mut history: Vec<Vec<PolicyParams>> = vec![vec![]; 16];
    for iv in &res.intervals {
        for (p, h) in params.iter().zip(history.iter_mut()) {
            while h.len() < iv.epoch {
                h.push(p.clone());
            }
        }
        for c in &iv.clones {
            history[c.dst] = history[c.src].clone();
            params[c.dst] = c.params.clone();
        }
    }
    let lineage_ok = res.schedule.expand() == history[res.best_trial];
    let best_score: f64 = history[res.best_trial]
        .iter()
        .flat_map(|p| p.prob_levels())
        .map(f64::from)
        .sum();
    check(
        rounds == 10
            && clones.iter().all(|&c| c == 4)
            && res.total_epochs_trained == 480
            && lineage_ok
            && best_score == res.best_score,
        format!(
            "{rounds} exploit rounds, clones per round {clones:?}, {} epochs, lineage replay {}",
            res.total_epochs_trained,
            if lineage_ok { "matches" } else { "differs" }
        ),
    )
}

/// Synthetic task shared by A5 and A6.
fn synthetic_task(seed: u64) -> (SyntheticSpec, TrainerConfig) {
    let spec = SyntheticSpec {
        image_size: 32,
        class_count: 8,
        train_samples: 400,
        val_samples: 2000,
        test_samples: 1000,
        rotation_deg: 30.0,
        translate_frac: 0.0,
        brightness_jitter: 0.0,
        seed,
        ..SyntheticSpec::default()
    };
    let trainer = TrainerConfig {
        learning_rate: 0.05,
        weight_decay: 5e-4,
        batch_size: 32,
        epochs: 60,
        lr_schedule: LrSchedule::Cosine,
        hidden_units: 32,
        baseline_cutout: false,
        seed,
        ..TrainerConfig::default()
    };
    (spec, trainer)
}

struct Ablation {
    /// Test accuracy per seed, in `ReplayMode::ALL` order.
    accuracy: Vec<[f64; 5]>,
    oracle_gap: f64,
}

fn run_ablation() -> Result<Ablation, String> {
    let (spec, trainer) = synthetic_task(0);
    let seeds: Vec<u64> = (0..10).collect();
    let gaps = oracle_gaps(&spec, &trainer, &seeds).map_err(|e| e.to_string())?;
    println!("   oracle gaps per seed {gaps:.4?}");
    let mut accuracy = Vec::new();
    for seed in 0..5 {
        let (spec, trainer) = synthetic_task(seed);
        let data = Arc::new(generate_synthetic(&spec).map_err(|e| e.to_string())?);
        let search = SearchConfig {
            workers: 4,
            ..SearchConfig::new(8, 60, seed)
        };
        let res =
            search_classifier(&search, &trainer, Arc::clone(&data)).map_err(|e| e.to_string())?;
        let mut row = [0.0; 5];
        for (slot, mode) in row.iter_mut().zip(ReplayMode::ALL) {
            let out = replay(
                &res.schedule,
                mode,
                &trainer,
                &data,
                ReplayOptions {
                    per_epoch_eval: false,
                },
            )
            .map_err(|e| e.to_string())?;
            *slot = out.final_test_accuracy();
        }
        println!("   seed {seed}: {row:.4?}");
        accuracy.push(row);
    }
    Ok(Ablation {
        accuracy,
        oracle_gap: median(&gaps),
    })
}

fn column(ab: &Ablation, mode: ReplayMode) -> Vec<f64> {
    let i = ReplayMode::ALL.iter().position(|&m| m == mode).unwrap();
    ab.accuracy.iter().map(|r| r[i]).collect()
}

fn a5_signal_recovery(ab: &Ablation) -> Outcome {
    let full_col = column(ab, ReplayMode::FullSchedule);
    let none_col = column(ab, ReplayMode::None);
    let (full, none) = (median(&full_col), median(&none_col));
    let gain = full - none;
    let paired: Vec<f64> = full_col.iter().zip(&none_col).map(|(f, n)| f - n).collect();
    check(
        ab.oracle_gap >= 0.05 && gain > 0.0 && gain >= 0.5 * ab.oracle_gap,
        format!(
            "median test acc full-schedule {full:.4} vs none {none:.4}: gain {gain:.4} (paired median {:.4}), \
             oracle gap {:.4} (calibration needs >= 0.05, gain needs >= {:.4})",
            median(&paired),
            ab.oracle_gap,
            0.5 * ab.oracle_gap
        ),
    )
}

fn a6_ablation(ab: &Ablation) -> Outcome {
    let means: Vec<(ReplayMode, f64)> = ReplayMode::ALL
        .iter()
        .map(|&m| (m, mean(&column(ab, m))))
        .collect();
    let full = means[0].1;
    let fixed = means
        .iter()
        .find(|(m, _)| *m == ReplayMode::FixedLast)
        .unwrap()
        .1;
    let table: Vec<String> = means.iter().map(|(m, a)| format!("{m} {a:.4}")).collect();
    check(
        full >= fixed,
        format!("5-seed mean accuracy: {}", table.join(", ")),
    )
}

fn a7_best_of_n() -> Outcome {
    let spec = SyntheticSpec {
        image_size: 8,
        class_count: 4,
        train_samples: 64,
        val_samples: 16,
        test_samples: 200,
        rotation_deg: 30.0,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec).map_err(|e| e.to_string())?;
    let trainer = TrainerConfig {
        epochs: 8,
        hidden_units: 8,
        batch_size: 16,
        ..TrainerConfig::default()
    };
    let scores: Vec<f64> = random_baseline(&trainer, &data, 250, 7, 4)
        .map_err(|e| e.to_string())?
        .iter()
        .map(|t| t.test_accuracy)
        .collect();
    let started = Instant::now();
    let curve = best_of_n_curve(&scores, scores.len()).map_err(|e| e.to_string())?;

    const DRAWS: usize = 1_000_000;
    let mut rng = rng::stream(7, Domain::Controller, 0);
    let mut sums = vec![0.0; scores.len()];
    for _ in 0..DRAWS {
        let mut best = f64::NEG_INFINITY;
        for s in sums.iter_mut() {
            best = best.max(scores[rng.gen_range(0..scores.len())]);
            *s += best;
        }
    }
    let worst = curve
        .iter()
        .zip(&sums)
        .map(|(&(_, e), s)| (e - s / DRAWS as f64).abs())
        .fold(0.0, f64::max);
    let monotone = curve.windows(2).all(|w| w[1].1 >= w[0].1);
    check(
        worst < 1e-3 && monotone,
        format!(
            "max |curve - monte carlo| = {worst:.2e} over n = 1..{}, monotone {monotone}, E[best of 1] {:.4}, E[best of 250] {:.4} ({:.1}s)",
            scores.len(),
            curve[0].1,
            curve[curve.len() - 1].1,
            started.elapsed().as_secs_f64()
        ),
    )
}

fn a8_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut digests = Vec::new();
    for (run, workers) in [1, 1, 8, 8].into_iter().enumerate() {
        let config = serde_json::json!({
            "search": {"population_size": 8, "epochs": 12, "master_seed": 5, "workers": workers},
            "trainer": {"learning_rate": 0.05, "weight_decay": 0.0005, "batch_size": 16, "epochs": 12, "hidden_units": 8},
            "data": {"synthetic": {"image_size": 8, "class_count": 4, "train_samples": 64, "val_samples": 64,
                                   "test_samples": 64, "rotation_deg": 30.0, "seed": 5}}
        });
        let cfg_path = dir.path().join(format!("config{run}.json"));
        fs::write(&cfg_path, config.to_string()).map_err(|e| e.to_string())?;
        let out = dir.path().join(format!("out{run}"));
        fs::create_dir_all(&out).map_err(|e| e.to_string())?;
        let art = cmd_search(&cfg_path, &out).map_err(|e| e.to_string())?;
        digests.push(fs::read(&art.schedule_path).map_err(|e| e.to_string())?);
    }
    check(
        digests.windows(2).all(|w| w[0] == w[1]),
        format!(
            "schedule.json identical across 2 runs x workers {{1, 8}} ({} bytes)",
            digests[0].len()
        ),
    )
}

fn a9_numerics() -> Outcome {
    let mut rng = rng::stream(9, Domain::Controller, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let input = rng.gen_range(2..8);
        let hidden = rng.gen_range(0..7);
        let classes = rng.gen_range(2..6);
        let batch = rng.gen_range(1..7);
        let wd = rng.gen_range(0.0..0.1);
        let model = ToyClassifier::new(input, hidden, classes, rng.gen());
        let xs: Vec<Vec<f64>> = (0..batch)
            .map(|_| (0..input).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let ys: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
        let (_, grads) = model.loss_and_grad(&xs, &ys, wd);
        let analytic: Vec<f64> = grads
            .iter()
            .flat_map(|g| g.weights.iter().chain(&g.bias).copied())
            .collect();
        let base = model.params_flat();
        let h = 1e-5;
        for (i, &a) in analytic.iter().enumerate() {
            let mut probe = model.clone();
            let mut v = base.clone();
            v[i] += h;
            probe.set_params_flat(&v);
            let up = probe.loss_and_grad(&xs, &ys, wd).0;
            v[i] -= 2.0 * h;
            probe.set_params_flat(&v);
            let down = probe.loss_and_grad(&xs, &ys, wd).0;
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max((numeric - a).abs() / numeric.abs().max(a.abs()).max(1e-8));
        }
    }

    let spec = SyntheticSpec {
        image_size: 8,
        train_samples: 40,
        val_samples: 20,
        test_samples: 20,
        ..Default::default()
    };
    let data = Arc::new(generate_synthetic(&spec).map_err(|e| e.to_string())?);
    let cfg = TrainerConfig {
        epochs: 3,
        hidden_units: 6,
        batch_size: 8,
        ..TrainerConfig::default()
    };
    let mut trial = ClassifierTrial::new(Arc::clone(&data), cfg.clone(), 3);
    let policy = PolicyParams::random(&mut rng);
    let mut train_rng = rng::stream(3, Domain::Trial, 0);
    for _ in 0..3 {
        trial
            .train_epoch(&policy, &mut train_rng)
            .map_err(|e| e.to_string())?;
    }
    let blob = trial.save_checkpoint();
    let mut restored = ClassifierTrial::new(data, cfg, 99);
    restored.load_checkpoint(&blob).map_err(|e| e.to_string())?;
    let exact = restored.save_checkpoint() == blob
        && restored.model == trial.model
        && restored.evaluate().ok() == trial.evaluate().ok();
    check(
        worst < 1e-6 && exact,
        format!("max relative gradient error {worst:.2e} over 20 instances, checkpoint round trip bit-exact {exact}"),
    )
}

fn random_image<R: Rng>(rng: &mut R) -> Image {
    let w = rng.gen_range(1..13);
    let h = rng.gen_range(1..13);
    let c = if rng.gen_bool(0.5) { 1 } else { 3 };
    Image::new(w, h, c, (0..w * h * c).map(|_| rng.gen()).collect()).unwrap()
}

fn a10_ops() -> Outcome {
    let mut rng = rng::stream(10, Domain::Controller, 0);
    let mag = |m| MagLevel::new(m).unwrap();
    let mut failures = Vec::new();
    let probe = Image::new(2, 1, 1, vec![10, 171]).unwrap();
    if apply_op(&probe, OpKind::Invert, mag(7), &mut rng).data() != [245, 84] {
        failures.push("invert");
    }
    if apply_op(&probe, OpKind::Posterize, mag(9), &mut rng).data() != [0, 160] {
        failures.push("posterize");
    }
    for _ in 0..200 {
        let img = random_image(&mut rng);
        let twice = apply_op(
            &apply_op(&img, OpKind::Invert, mag(3), &mut rng),
            OpKind::Invert,
            mag(3),
            &mut rng,
        );
        if twice != img {
            failures.push("invert involution");
        }
        for op in [
            OpKind::Rotate,
            OpKind::ShearX,
            OpKind::ShearY,
            OpKind::TranslateX,
            OpKind::TranslateY,
            OpKind::Solarize,
            OpKind::Posterize,
            OpKind::Cutout,
        ] {
            if apply_op(&img, op, mag(0), &mut rng) != img {
                failures.push(op.name());
            }
        }
        if cutout_patch(&img, 0, &mut rng) != img {
            failures.push("cutout size 0");
        }
    }
    // a uniform histogram is a fixed point of equalize
    let ramp = Image::new(16, 16, 1, (0..=255).collect()).unwrap();
    if apply_op(&ramp, OpKind::Equalize, mag(4), &mut rng) != ramp {
        failures.push("equalize");
    }

    let mut applied = 0usize;
    for _ in 0..10_000 {
        let img = random_image(&mut rng);
        let before = img.clone();
        for op in OpKind::ALL {
            for m in MagLevel::all() {
                let out = apply_op(&img, op, m, &mut rng);
                applied += 1;
                if !out.same_shape(&img)
                    || out.data().len() != img.width() * img.height() * img.channels()
                {
                    failures.push("shape");
                }
            }
        }
        if img != before {
            failures.push("input modified");
        }
    }
    failures.dedup();
    check(
        failures.is_empty(),
        format!("identities and {applied} fuzzed applications, failures {failures:?}"),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |name: &str, outcome: Outcome, started: Instant| {
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("{name} PASS ({secs:.1}s) {msg}"),
            Err(msg) => {
                failed += 1;
                println!("{name} FAIL ({secs:.1}s) {msg}");
            }
        }
    };
    let t = Instant::now();
    report("A1", a1_explore_distribution(), t);
    let t = Instant::now();
    report("A2", a2_count_distribution(), t);
    let t = Instant::now();
    report("A3", a3_search_space(), t);
    let t = Instant::now();
    report("A4", a4_bookkeeping(), t);
    let t = Instant::now();
    match run_ablation() {
        Ok(ab) => {
            report("A5", a5_signal_recovery(&ab), t);
            report("A6", a6_ablation(&ab), t);
        }
        Err(e) => {
            report("A5", Err(e.clone()), t);
            report("A6", Err(e), t);
        }
    }
    let t = Instant::now();
    report("A7", a7_best_of_n(), t);
    let t = Instant::now();
    report("A8", a8_determinism(), t);
    let t = Instant::now();
    report("A9", a9_numerics(), t);
    let t = Instant::now();
    report("A10", a10_ops(), t);
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
