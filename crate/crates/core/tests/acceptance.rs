//! End-to-end acceptance: one PASS/FAIL line per criterion.
//!
//! `cargo test --release -p jigsaw --test acceptance -- --nocapture`

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use jigsaw::cfn::{CfnConfig, CfnModel};
use jigsaw::evalsuite::{puzzle_accuracy, transfer_lock_and_retrain, LockSpec, TransferConfig};
use jigsaw::imagepipe::{adjacent_gaps, extract_tiles_with_offsets, Image, Normalization, PuzzleConfig};
use jigsaw::permset::{apply_permutation, invert, Objective, Permutation, PermutationSet};
use jigsaw::rng::{derived_rng, rng_from_seed};
use jigsaw::synth::{puzzle_dataset, transfer_dataset, SynthConfig};
use jigsaw::tensornet::softmax;
use jigsaw::trainer::{puzzles_per_image, train, Checkpoint, TrainConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

use common::{cfn_error, greedy_oracle_mismatch, operator_errors, randn};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed())
}

fn dispersion() -> Outcome {
    let (max, t_max) = timed(|| PermutationSet::generate(100, 3, Objective::Max, 1).unwrap().avg_hamming_f64());
    let min = PermutationSet::generate(100, 3, Objective::Min, 1).unwrap().avg_hamming_f64();
    let mid = PermutationSet::generate(100, 3, Objective::Middle, 1).unwrap().avg_hamming_f64();
    let ok = (max - 0.88).abs() <= 0.05
        && (min - 0.45).abs() <= 0.05
        && min < mid
        && mid < max
        && t_max < Duration::from_secs(300);
    check(ok, format!("max {max:.4} middle {mid:.4} min {min:.4}; max objective took {:.1}s", t_max.as_secs_f64()))
}

fn greedy_oracle() -> Outcome {
    let mut steps = 0;
    for seed in 0..10 {
        for objective in [Objective::Max, Objective::Min] {
            let set = PermutationSet::generate(24, 2, objective, seed).unwrap();
            if let Some(msg) = greedy_oracle_mismatch(&set, objective) {
                return Err(format!("{objective} seed {seed}: {msg}"));
            }
            steps += set.len();
        }
    }
    Ok(format!("{steps} greedy steps over 10 seeds match brute force"))
}

fn parameter_counts() -> Outcome {
    let counts = CfnConfig::reference(1000).param_counts().map_err(|e| e.to_string())?;
    let fc6 = counts.get("fc6").ok_or("no fc6")?.weights;
    let fc7 = counts.get("fc7").ok_or("no fc7")?.weights;
    let extra = fc7 as i64 - 4096 * 4096;
    let total = counts.total();
    let ok = fc6 == 2_097_152 && (1_900_000..=2_300_000).contains(&extra) && (26_500_000..=29_500_000).contains(&total);
    check(ok, format!("fc6 {fc6}, fc7 - 4096^2 = {extra}, total {total}"))
}

fn puzzle_arithmetic() -> Outcome {
    let v = puzzles_per_image(350_000, 256, 1_300_000).map_err(|e| e.to_string())?;
    check(format!("{v:.2}") == "68.92" && v.round() == 69.0, format!("{v:.4}"))
}

fn gap_statistics() -> Outcome {
    let cfg = PuzzleConfig::default();
    let crop = Image::filled(cfg.crop, cfg.crop, cfg.norm.channels(), 0.0).unwrap();
    let mut rng = derived_rng(0, &[0]);
    let gaps: Vec<usize> = (0..10_000)
        .flat_map(|_| adjacent_gaps(&extract_tiles_with_offsets(&crop, &cfg, &mut rng).unwrap().1, &cfg))
        .collect();
    let (min, max) = (*gaps.iter().min().unwrap(), *gaps.iter().max().unwrap());
    let mean = gaps.iter().sum::<usize>() as f64 / gaps.len() as f64;
    check(min == 0 && max == 22 && (mean - 11.0).abs() <= 0.5, format!("min {min} max {max} mean {mean:.3}"))
}

fn gradient_checks() -> Outcome {
    let ((op_worst, cfn_worst), t) = timed(|| {
        let op = (0..20).flat_map(operator_errors).map(|(_, e)| e).fold(0.0, f64::max);
        let cfn = (0..20).map(cfn_error).fold(0.0, f64::max);
        (op, cfn)
    });
    let ok = op_worst < 1e-4 && cfn_worst < 1e-3 && t < Duration::from_secs(120);
    check(ok, format!("operators {op_worst:.2e}, toy CFN {cfn_worst:.2e}, {:.1}s", t.as_secs_f64()))
}

fn pretrain(objective: Objective, seed: u64, iterations: u64) -> (CfnModel<f32>, PermutationSet, PuzzleConfig) {
    let ds = puzzle_dataset(&SynthConfig::default(), 400, seed).unwrap();
    let puzzle = PuzzleConfig { norm: Normalization::from_images(ds.images()).unwrap(), ..PuzzleConfig::toy() };
    let ps = PermutationSet::generate(8, 3, objective, seed).unwrap();
    let cfg =
        TrainConfig { batch_size: 16, iterations, log_every: 50, seed, deterministic: true, ..TrainConfig::default() };
    let (ck, _) = train(CfnModel::build(CfnConfig::toy(8), seed).unwrap(), &ds, &ps, &puzzle, cfg).unwrap();
    (ck.model, ps, puzzle)
}

fn pretext_learnability() -> Outcome {
    let ((acc, iterations), t) = timed(|| {
        let iterations = 600;
        let (model, ps, puzzle) = pretrain(Objective::Max, 0, iterations);
        let heldout = puzzle_dataset(&SynthConfig::default(), 100, 1000).unwrap();
        (puzzle_accuracy(&model, &heldout, &ps, &puzzle, 1000, 7).unwrap(), iterations)
    });
    let ok = acc > 0.625 && iterations <= 2000 && t < Duration::from_secs(900);
    check(ok, format!("held-out accuracy {acc:.3} after {iterations} iterations, {:.1}s", t.as_secs_f64()))
}

fn transfer_direction() -> Outcome {
    let sc = SynthConfig::default();
    let lock = LockSpec { lock_upto: CfnConfig::toy(8).num_conv_layers(), reinit_rest: true };
    let (mut max, mut min, mut random) = (0.0, 0.0, 0.0);
    let mut per_seed = Vec::new();
    for seed in 0..3u64 {
        let train_set = transfer_dataset(&sc, 180, 32, 100 + seed).unwrap();
        let test_set = transfer_dataset(&sc, 450, 32, 200 + seed).unwrap();
        let norm = Normalization::from_images(&train_set.images).unwrap();
        let cfg = TransferConfig { seed, ..TransferConfig::default() };
        let run = |source: &CfnModel<f32>| {
            transfer_lock_and_retrain(source, lock, &train_set, &test_set, &norm, &cfg).unwrap().accuracy
        };
        let a = run(&pretrain(Objective::Max, seed, 300).0);
        let b = run(&pretrain(Objective::Min, seed, 300).0);
        let r = run(&CfnModel::build(CfnConfig::toy(8), seed).unwrap());
        per_seed.push(format!("{a:.3}/{b:.3}/{r:.3}"));
        max += a / 3.0;
        min += b / 3.0;
        random += r / 3.0;
    }
    let gain = 100.0 * (max - random);
    check(
        gain >= 10.0 && max >= min,
        format!(
            "mean max {max:.3}, min {min:.3}, random {random:.3}; gain {gain:.1} points (per seed max/min/random: {})",
            per_seed.join(", ")
        ),
    )
}

fn run_props<S: Strategy>(
    name: &str,
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<u32, String> {
    let mut runner = TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    runner.run(&strategy, test).map(|_| cases).map_err(|e| format!("{name}: {e}"))
}

fn invariant_suites() -> Outcome {
    let perm9 = Just((1..=9u8).collect::<Vec<_>>()).prop_shuffle().prop_map(|v| Permutation::new(v).unwrap());
    let mut cases = run_props("permutation roundtrip", 256, perm9, |p| {
        let items: Vec<usize> = (0..9).collect();
        let moved = apply_permutation(&p, &items).unwrap();
        let mut sorted = moved.clone();
        sorted.sort();
        prop_assert_eq!(&sorted, &items);
        prop_assert_eq!(apply_permutation(&invert(&p), &moved).unwrap(), items);
        prop_assert_eq!(invert(&invert(&p)), p);
        Ok(())
    })?;

    cases += run_props("softmax normalization", 256, prop::collection::vec(-50.0f64..50.0, 1..20), |v| {
        let t = jigsaw::tensornet::Tensor::from_vec(&[v.len()], v).unwrap();
        let p = softmax(&t);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        Ok(())
    })?;

    let sc = SynthConfig::default();
    let (tr, te) = (transfer_dataset(&sc, 18, 32, 1).unwrap(), transfer_dataset(&sc, 9, 32, 2).unwrap());
    let norm = Normalization::from_images(&tr.images).unwrap();
    cases += run_props("locking bit-exactness", 4, (0u64..1000, 1usize..=2), |(seed, k)| {
        let source = CfnModel::<f32>::build(CfnConfig::toy(8), seed).unwrap();
        let cfg = TransferConfig { iterations: 5, batch_size: 4, seed, ..TransferConfig::default() };
        let out =
            transfer_lock_and_retrain(&source, LockSpec { lock_upto: k, reinit_rest: true }, &tr, &te, &norm, &cfg)
                .unwrap();
        let locked = CfnConfig::toy(8).conv_layer_index(k).unwrap() + 1;
        for i in 0..locked {
            let (a, b) = (out.model.branch().params().layer(i), source.branch().params().layer(i));
            if let (Some(a), Some(b)) = (a, b) {
                let bits =
                    |t: &jigsaw::tensornet::Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                prop_assert_eq!(bits(&a.weight), bits(&b.weight));
                prop_assert_eq!(bits(&a.bias), bits(&b.bias));
            }
        }
        Ok(())
    })?;

    let order = Just((0..9usize).collect::<Vec<_>>()).prop_shuffle();
    cases += run_props("branch equivariance", 8, (0u64..1000, order), |(seed, order)| {
        let cfg = CfnConfig::toy(8);
        let model = CfnModel::<f64>::build(cfg.clone(), seed).unwrap();
        let mut rng = rng_from_seed(seed);
        let tiles: Vec<_> = (0..9).map(|_| randn(&cfg.tile_shape(), &mut rng)).collect();
        let feats = model.features(&tiles).unwrap();
        let moved = model.features(&order.iter().map(|&i| tiles[i].clone()).collect::<Vec<_>>()).unwrap();
        for (slot, &src) in order.iter().enumerate() {
            prop_assert_eq!(&moved[slot], &feats[src]);
        }
        Ok(())
    })?;

    cases += run_props("checkpoint roundtrip", 8, (0u64..1000, 0u64..10_000), |(seed, iteration)| {
        let mut ck = Checkpoint::fresh(CfnModel::build(CfnConfig::toy(8), seed).unwrap(), seed);
        ck.iteration = iteration;
        ck.cursor = iteration * 3;
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(&back.model, &ck.model);
        prop_assert_eq!((back.iteration, back.cursor, back.seed), (iteration, iteration * 3, seed));
        Ok(())
    })?;
    Ok(format!("{cases} property cases across 5 suites"))
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 9] = [
        ("permutation-set dispersion", dispersion),
        ("greedy oracle equivalence", greedy_oracle),
        ("parameter counts", parameter_counts),
        ("puzzles per image", puzzle_arithmetic),
        ("gap statistics", gap_statistics),
        ("gradient correctness", gradient_checks),
        ("pretext learnability", pretext_learnability),
        ("transfer direction", transfer_direction),
        ("invariant suites", invariant_suites),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or(p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        match outcome {
            Ok(d) => println!("PASS [{}] {name}: {d}", i + 1),
            Err(d) => {
                println!("FAIL [{}] {name}: {d}", i + 1);
                failed.push(*name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
