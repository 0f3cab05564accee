use crate::cfn::CfnModel;
use crate::error::{invalid, Result};
use crate::imagepipe::{make_puzzle, Dataset, PuzzleConfig, PuzzleSample};
use crate::permset::PermutationSet;
use crate::rng::{derive_seed, stream};

/// Anything that scores the permutation classes of a puzzle.
pub trait PuzzleSolver {
    fn logits(&self, sample: &PuzzleSample) -> Result<Vec<f32>>;
}

impl PuzzleSolver for CfnModel<f32> {
    fn logits(&self, sample: &PuzzleSample) -> Result<Vec<f32>> {
        Ok(self.forward(&sample.tiles)?.into_data())
    }
}

/// Reads the answer off the sample: logit 1 at the true label, 0 elsewhere.
#[derive(Clone, Copy, Debug)]
pub struct OracleSolver {
    pub num_classes: usize,
}

impl PuzzleSolver for OracleSolver {
    fn logits(&self, sample: &PuzzleSample) -> Result<Vec<f32>> {
        Ok(sample.one_hot(self.num_classes))
    }
}

fn argmax(v: &[f32]) -> Option<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &x) in v.iter().enumerate() {
        if best.is_none_or(|(_, b)| x > b) {
            best = Some((i, x));
        }
    }
    best.map(|(i, _)| i)
}

/// Fraction of `n_samples` fresh puzzles whose top logit is the label.
/// Sample `i` uses record `i mod N` and a seed derived from `(seed, i)`.
pub fn puzzle_accuracy<S: PuzzleSolver + ?Sized>(
    solver: &S,
    dataset: &Dataset,
    permset: &PermutationSet,
    puzzle: &PuzzleConfig,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(invalid!("empty dataset"));
    }
    if n_samples == 0 {
        return Err(invalid!("n_samples must be positive"));
    }
    let mut correct = 0usize;
    for i in 0..n_samples {
        let rec = i % dataset.len();
        let s = make_puzzle(
            dataset.image(rec),
            permset,
            puzzle,
            dataset.id(rec),
            derive_seed(seed, &[stream::EVAL, i as u64]),
        )?;
        let logits = solver.logits(&s)?;
        if logits.len() != permset.len() {
            return Err(invalid!("solver produced {} logits for {} classes", logits.len(), permset.len()));
        }
        correct += usize::from(argmax(&logits) == Some(s.label));
    }
    Ok(correct as f64 / n_samples as f64)
}
