//! Measures the oracle augmentation gap and the gain of searched schedules on
//! the synthetic task.
//!
//! Usage: `calibrate [oracle_seeds] [search_seeds]`. Task settings come from
//! the environment: `SIZE`, `CLASSES`, `TRAIN`, `VAL`, `TEST`, `ROT`, `TRANS`,
//! `BRIGHT`, `LR`, `WD`, `HIDDEN`, `CUTOUT`, `SCHED` (constant, cosine, step)
//! and `EPOCHS`. With `HAND=slot:prob:mag,...` it instead compares one fixed
//! policy against no policy.

use std::sync::Arc;
use std::time::Instant;

use pba_core::data::{generate_synthetic, SyntheticSpec};
use pba_core::harness::{
    oracle_gaps, policy_op_stats, replay, search_classifier, ReplayMode, ReplayOptions,
};
use pba_core::trainer::LrSchedule;
use pba_core::{PolicyParams, Schedule, SearchConfig, TrainerConfig};

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn trainer(seed: u64, epochs: usize) -> TrainerConfig {
    let d = TrainerConfig::default();
    TrainerConfig {
        epochs,
        seed,
        learning_rate: env("LR", d.learning_rate),
        hidden_units: env("HIDDEN", d.hidden_units),
        baseline_cutout: env("CUTOUT", d.baseline_cutout),
        weight_decay: env("WD", d.weight_decay),
        lr_schedule: match std::env::var("SCHED").as_deref() {
            Ok("cosine") => LrSchedule::Cosine,
            Ok("step") => LrSchedule::Step,
            _ => d.lr_schedule,
        },
        ..d
    }
}

fn spec(seed: u64) -> SyntheticSpec {
    let d = SyntheticSpec::default();
    SyntheticSpec {
        seed,
        image_size: env("SIZE", d.image_size),
        class_count: env("CLASSES", d.class_count),
        train_samples: env("TRAIN", d.train_samples),
        val_samples: env("VAL", d.val_samples),
        test_samples: env("TEST", d.test_samples),
        rotation_deg: env("ROT", d.rotation_deg),
        translate_frac: env("TRANS", d.translate_frac),
        brightness_jitter: env("BRIGHT", d.brightness_jitter),
        ..d
    }
}

fn hand_policy(text: &str) -> PolicyParams {
    let mut levels = vec![(0u8, 0u8); 30];
    for item in text.split(',') {
        let f: Vec<u8> = item
            .split(':')
            .map(|x| x.parse().expect("slot:prob:mag"))
            .collect();
        levels[f[0] as usize] = (f[1], f[2]);
    }
    PolicyParams::from_levels(&levels).expect("valid levels")
}

fn main() {
    let args: Vec<u64> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("integer argument"))
        .collect();
    let oracle_seeds = args.first().copied().unwrap_or(10);
    let search_seeds = args.get(1).copied().unwrap_or(5);
    let epochs = env("EPOCHS", 60);
    let opts = ReplayOptions {
        per_epoch_eval: false,
    };
    let none = Schedule::constant(epochs, PolicyParams::zero()).unwrap();
    let final_acc = |schedule: &Schedule, mode, seed| {
        let data = generate_synthetic(&spec(seed)).unwrap();
        replay(schedule, mode, &trainer(seed, epochs), &data, opts)
            .unwrap()
            .final_test_accuracy()
    };

    if let Ok(hand) = std::env::var("HAND") {
        let fixed = Schedule::constant(epochs, hand_policy(&hand)).unwrap();
        let mut gains = Vec::new();
        for s in 0..oracle_seeds {
            let (a, b) = (
                final_acc(&fixed, ReplayMode::FullSchedule, s),
                final_acc(&none, ReplayMode::None, s),
            );
            println!("seed {s}: policy {a:.4} none {b:.4}");
            gains.push(a - b);
        }
        println!("median policy gain {:.4}", median(gains));
        return;
    }

    let seeds: Vec<u64> = (0..oracle_seeds).collect();
    let gaps = oracle_gaps(&spec(0), &trainer(0, epochs), &seeds).unwrap();
    println!("oracle gaps {gaps:.4?}");
    let gap = median(gaps);
    println!("median oracle gap {gap:.4}");

    let mut gains = Vec::new();
    for s in 0..search_seeds {
        let data = Arc::new(generate_synthetic(&spec(s)).unwrap());
        let search = SearchConfig {
            workers: 4,
            ..SearchConfig::new(8, epochs, s)
        };
        let started = Instant::now();
        let res = search_classifier(&search, &trainer(s, epochs), Arc::clone(&data)).unwrap();
        let mut line = format!(
            "seed {s}: search {:.1}s best val {:.4}",
            started.elapsed().as_secs_f64(),
            res.best_score
        );
        let mut accs = Vec::new();
        for mode in ReplayMode::ALL {
            let acc = replay(&res.schedule, mode, &trainer(s, epochs), &data, opts)
                .unwrap()
                .final_test_accuracy();
            line += &format!(" {mode} {acc:.4}");
            accs.push(acc);
        }
        println!("{line}");
        let stats: Vec<String> = policy_op_stats(res.schedule.last_policy())
            .into_iter()
            .filter(|s| s.1 > 0.0)
            .map(|(op, p, m)| format!("{}:{p:.2}/{m:.1}", op.name()))
            .collect();
        println!("  last policy {}", stats.join(" "));
        gains.push(accs[0] - accs[4]);
    }
    println!(
        "median paired gain {:.4} (half the oracle gap: {:.4})",
        median(gains),
        0.5 * gap
    );
}
