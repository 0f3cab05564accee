use std::fs;
use std::path::{Path, PathBuf};

use jigsaw::cfn::CfnModel;
use jigsaw::config::RunConfig;
use jigsaw::evalsuite::{
    branch_features, default_feature_layer, pr_to_csv, precision_recall, puzzle_accuracy, ranking_to_text, retrieve,
    transfer_lock_and_retrain, FeatureIndex, LockSpec, OracleSolver, PuzzleSolver, TransferConfig,
};
use jigsaw::imagepipe::{
    adjacent_gaps, center_crop_to_square, extract_tiles_with_offsets, load_normalization, resize_bilinear,
    save_normalization, write_manifest, Dataset, Image, LabeledSet, Normalization, PuzzleConfig,
};
use jigsaw::permset::{Objective, PermutationSet};
use jigsaw::rng::derived_rng;
use jigsaw::synth::{puzzle_dataset, transfer_dataset, SynthConfig};
use jigsaw::trainer::{puzzles_per_image, Checkpoint, MetricsLog, Trainer};
use jigsaw::{Error, Result};

use crate::Command;

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Permgen { n, grid, objective, seed, out } => permgen(n as usize, grid, &objective, seed, &out),
        Command::Synth { out, images, heldout, transfer_train, transfer_test, perms, seed } => {
            synth(&out, images, heldout, transfer_train, transfer_test, perms, seed)
        }
        Command::Train { config, resume, deterministic, iterations, data_root } => {
            train(&config, resume.as_deref(), deterministic, iterations, data_root.as_deref())
        }
        Command::Eval {
            checkpoint,
            manifest,
            permset,
            normalization,
            samples,
            seed,
            oracle,
            transfer_train,
            transfer_test,
            lock,
            transfer_iters,
            out,
        } => eval(EvalArgs {
            checkpoint,
            manifest,
            permset,
            normalization,
            samples,
            seed,
            oracle,
            transfer: transfer_train.zip(transfer_test),
            lock,
            transfer_iters,
            out,
        }),
        Command::Retrieve { checkpoint, manifest, normalization, query, k, layer, out } => {
            retrieve_cmd(&checkpoint, &manifest, normalization.as_deref(), &query, k, layer, &out)
        }
        Command::Stats { iters, batch, images, gap_samples, seed } => stats(iters, batch, images, gap_samples, seed),
    }
}

fn permgen(n: usize, grid: usize, objective: &str, seed: u64, out: &Path) -> Result<()> {
    let objective: Objective = objective.parse()?;
    let set = PermutationSet::generate(n, grid, objective, seed)?;
    set.save(out)?;
    println!("avg_hamming {:.6}", set.avg_hamming_f64());
    Ok(())
}

fn save_dataset(ds: &Dataset, root: &Path, sub: &str) -> Result<()> {
    fs::create_dir_all(root.join(sub))?;
    let mut lines = Vec::with_capacity(ds.len());
    for (id, img) in ds.iter() {
        let rel = format!("{sub}/{id}.png");
        img.save_png(root.join(&rel))?;
        lines.push(rel);
    }
    write_manifest(root.join(format!("{sub}.txt")), &lines)
}

fn synth(out: &Path, images: usize, heldout: usize, tr: usize, te: usize, perms: usize, seed: u64) -> Result<()> {
    let cfg = SynthConfig::default();
    fs::create_dir_all(out)?;
    save_dataset(&puzzle_dataset(&cfg, images, seed)?, out, "train")?;
    save_dataset(&puzzle_dataset(&cfg, heldout, seed.wrapping_add(1))?, out, "heldout")?;
    let tile = PuzzleConfig::toy().tile;
    for (name, n, s) in [("train", tr, 2), ("test", te, 3)] {
        let mut set = transfer_dataset(&cfg, n, tile, seed.wrapping_add(s))?;
        set.ids.iter_mut().for_each(|id| *id = format!("{name}/{id}"));
        set.save(out.join("transfer"), &format!("{name}.txt"))?;
    }
    PermutationSet::generate(perms, cfg.grid, Objective::Max, seed)?.save(out.join("permset.txt"))?;
    let run = RunConfig { seed, ..RunConfig::default() };
    fs::write(out.join("run.cfg"), run.to_text())?;
    println!("wrote {images} training and {heldout} held-out images to {}", out.display());
    Ok(())
}

fn train(
    config: &Path,
    resume: Option<&Path>,
    deterministic: bool,
    iterations: Option<u64>,
    root: Option<&Path>,
) -> Result<()> {
    let mut rc = RunConfig::load(config)?;
    let root = root.map(Path::to_path_buf).unwrap_or_else(|| config.parent().unwrap_or(Path::new(".")).to_path_buf());
    rc.resolve(&root);
    if deterministic {
        rc.deterministic = true;
        rc.train.deterministic = true;
    }
    if let Some(n) = iterations {
        rc.train.iterations = n;
        rc.validate()?;
    }
    let ds = Dataset::load_manifest(&rc.manifest)?;
    let ps = PermutationSet::load(&rc.permset)?;
    fs::create_dir_all(&rc.out_dir)?;
    let norm = match &rc.normalization {
        Some(p) => load_normalization(p)?,
        None => Normalization::from_images(ds.images())?,
    };
    save_normalization(rc.out_dir.join("normalization.txt"), &norm)?;
    let puzzle = PuzzleConfig { norm, ..rc.puzzle.clone() };
    let ck_path = rc.out_dir.join("checkpoint.bin");
    let metrics_path = rc.out_dir.join("metrics.csv");
    let want = rc.cfn_config(ps.len());

    let (mut trainer, mut log) = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.model.config() != &want {
                return Err(Error::Config("checkpoint network does not match the run config".into()));
            }
            let mut log = if metrics_path.exists() { MetricsLog::load(&metrics_path)? } else { MetricsLog::new() };
            log.truncate_for_resume(ck.iteration, rc.train.log_every);
            (Trainer::resume(ck, &ds, &ps, &puzzle, rc.train.clone())?, log)
        }
        None => {
            let model = CfnModel::<f32>::build(want, rc.seed)?;
            (Trainer::new(model, &ds, &ps, &puzzle, rc.train.clone())?, MetricsLog::new())
        }
    };
    let new = trainer.run(|ck| ck.save(&ck_path))?;
    log.extend(new)?;
    log.save(&metrics_path)?;
    if let Some(r) = log.last() {
        println!("iter {} loss {:.4} acc {:.4}", r.iter, r.loss, r.acc);
    }
    Ok(())
}

struct EvalArgs {
    checkpoint: Option<PathBuf>,
    manifest: PathBuf,
    permset: PathBuf,
    normalization: Option<PathBuf>,
    samples: usize,
    seed: u64,
    oracle: bool,
    transfer: Option<(PathBuf, PathBuf)>,
    lock: usize,
    transfer_iters: u64,
    out: Option<PathBuf>,
}

fn normalization_for(explicit: Option<&Path>, checkpoint: &Path) -> Result<Normalization> {
    match explicit {
        Some(p) => load_normalization(p),
        None => load_normalization(checkpoint.parent().unwrap_or(Path::new(".")).join("normalization.txt")),
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let ds = Dataset::load_manifest(&a.manifest)?;
    let ps = PermutationSet::load(&a.permset)?;
    let mut puzzle = PuzzleConfig { grid: ps.grid(), ..RunConfig::default().puzzle };
    puzzle.crop = puzzle.grid * puzzle.cell;
    let mut report = String::from("metric,value\n");

    let model = match &a.checkpoint {
        Some(p) if !a.oracle => Some((Checkpoint::load(p)?.model, p.clone())),
        _ => None,
    };
    let solver: Box<dyn PuzzleSolver> = match &model {
        Some((m, p)) => {
            puzzle.norm = normalization_for(a.normalization.as_deref(), p)?;
            Box::new(m.clone())
        }
        None => {
            puzzle.norm = Normalization::identity(ds.image(0).channels());
            Box::new(OracleSolver { num_classes: ps.len() })
        }
    };
    let acc = puzzle_accuracy(solver.as_ref(), &ds, &ps, &puzzle, a.samples, a.seed)?;
    println!("puzzle_accuracy {acc:.4}");
    report.push_str(&format!("puzzle_accuracy,{acc:.6}\n"));

    if let Some((train, test)) = &a.transfer {
        let (m, _) = model.as_ref().ok_or_else(|| Error::Config("transfer evaluation needs a checkpoint".into()))?;
        let train = LabeledSet::load_manifest(train)?;
        let test = LabeledSet::load_manifest(test)?;
        let cfg = TransferConfig { iterations: a.transfer_iters, seed: a.seed, ..TransferConfig::default() };
        let lock = LockSpec { lock_upto: a.lock, reinit_rest: true };
        let out = transfer_lock_and_retrain(m, lock, &train, &test, &puzzle.norm, &cfg)?;
        println!("transfer_accuracy {:.4}", out.accuracy);
        report.push_str(&format!("transfer_accuracy,{:.6}\n", out.accuracy));
    }
    if let Some(out) = &a.out {
        fs::write(out, report)?;
    }
    Ok(())
}

/// Centre square, resized to the network's tile side.
fn tile_view(img: &Image, side: usize) -> Result<Image> {
    let sq = center_crop_to_square(img, img.height().min(img.width()))?;
    Ok(resize_bilinear(&sq, side, side))
}

fn retrieve_cmd(
    checkpoint: &Path,
    manifest: &Path,
    normalization: Option<&Path>,
    queries: &[String],
    k: usize,
    layer: Option<usize>,
    out: &Path,
) -> Result<()> {
    let model = Checkpoint::load(checkpoint)?.model;
    let norm = normalization_for(normalization, checkpoint)?;
    let set = LabeledSet::load_manifest(manifest)?;
    let layers = layer.unwrap_or_else(|| default_feature_layer(model.config()));
    let side = model.config().tile_side;
    let feats = set
        .images
        .iter()
        .map(|img| branch_features(&model, &norm.apply(&tile_view(img, side)?)?, layers))
        .collect::<Result<Vec<_>>>()?;
    let index = FeatureIndex::new(set.ids.clone(), feats.clone(), Some(set.labels.clone()))?;
    let chosen: Vec<String> = if queries.is_empty() { set.ids.clone() } else { queries.to_vec() };
    fs::create_dir_all(out)?;
    let mut ap_sum = 0.0;
    let mut ap_count = 0usize;
    for q in &chosen {
        let qi = set
            .ids
            .iter()
            .position(|id| id == q)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown query id {q:?}")))?;
        let stem = q.replace(['/', '\\'], "_");
        let ranked = retrieve(&feats[qi], &index, k.min(index.len()))?;
        fs::write(out.join(format!("{stem}.txt")), ranking_to_text(&ranked))?;
        let full = retrieve(&feats[qi], &index, index.len())?;
        let labels: Vec<usize> =
            full.iter().filter(|r| &r.id != q).map(|r| index.label_of(&r.id).unwrap_or(usize::MAX)).collect();
        if let Ok(points) = precision_recall(&labels, set.labels[qi]) {
            ap_sum += points.iter().map(|p| p.precision).sum::<f64>() / points.len() as f64;
            ap_count += 1;
            fs::write(out.join(format!("{stem}.pr.csv")), pr_to_csv(&points))?;
        }
    }
    let map = if ap_count > 0 { ap_sum / ap_count as f64 } else { 0.0 };
    println!("queries {} mean_ap {map:.4}", chosen.len());
    Ok(())
}

fn stats(iters: u64, batch: usize, images: usize, gap_samples: usize, seed: u64) -> Result<()> {
    println!("puzzles_per_image {:.2}", puzzles_per_image(iters, batch, images)?);
    if gap_samples == 0 {
        return Ok(());
    }
    let cfg = PuzzleConfig::default();
    let crop = Image::filled(cfg.crop, cfg.crop, cfg.norm.channels(), 0.0)?;
    let mut rng = derived_rng(seed, &[0]);
    let (mut min, mut max, mut sum, mut n) = (usize::MAX, 0usize, 0u64, 0u64);
    for _ in 0..gap_samples {
        let (_, offsets) = extract_tiles_with_offsets(&crop, &cfg, &mut rng)?;
        for g in adjacent_gaps(&offsets, &cfg) {
            min = min.min(g);
            max = max.max(g);
            sum += g as u64;
            n += 1;
        }
    }
    println!("gap_min {min}");
    println!("gap_max {max}");
    println!("gap_mean {:.3}", sum as f64 / n as f64);
    Ok(())
}
