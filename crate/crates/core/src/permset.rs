//! Tile permutations and greedy Hamming-controlled permutation sets.
//!
//! A [`Permutation`] over `N = grid²` cells is stored 1-based. Placement
//! convention: after [`apply_permutation`], output position `i` holds input
//! item `p[i]`. [`invert`] gives the dual reading.
//!
//! [`PermutationSet::generate`] builds the label space of the puzzle task. The
//! first entry is drawn uniformly from all `N!` permutations; every further
//! entry is picked from the permutations not yet chosen by looking at the
//! column sums of the distance matrix between the chosen set and the pool:
//!
//! * [`Objective::Max`] takes the largest column sum,
//! * [`Objective::Min`] takes the smallest,
//! * [`Objective::Middle`] ignores distances and draws uniformly.
//!
//! The pool is enumerated in lexicographic order and ties go to the lowest
//! pool index.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use num_rational::Ratio;
use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::rng::{derived_rng, stream};

/// Largest grid for which the full permutation pool is materialized.
pub const MAX_GRID: usize = 3;

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Permutation {
    mapping: Vec<u8>,
}

impl Permutation {
    /// Validate and wrap a 1-based mapping.
    pub fn new(mapping: Vec<u8>) -> Result<Self> {
        let n = mapping.len();
        if n == 0 || n > u8::MAX as usize {
            return Err(invalid!("permutation length {n} out of range"));
        }
        let mut seen = vec![false; n];
        for &v in &mapping {
            let v = v as usize;
            if v == 0 || v > n {
                return Err(invalid!("value {v} outside 1..={n}"));
            }
            if std::mem::replace(&mut seen[v - 1], true) {
                return Err(invalid!("value {v} appears twice"));
            }
        }
        Ok(Self { mapping })
    }

    pub fn identity(n: usize) -> Self {
        assert!(n >= 1 && n <= u8::MAX as usize);
        Self { mapping: (1..=n as u8).collect() }
    }

    /// Build from a slice already known to be a bijection (pool entries).
    fn from_valid(mapping: &[u8]) -> Self {
        Self { mapping: mapping.to_vec() }
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.mapping
    }

    /// 0-based source index for each output position.
    pub fn sources(&self) -> impl Iterator<Item = usize> + '_ {
        self.mapping.iter().map(|&v| v as usize - 1)
    }

    pub fn is_identity(&self) -> bool {
        self.mapping.iter().enumerate().all(|(i, &v)| v as usize == i + 1)
    }
}

impl fmt::Debug for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Permutation{:?}", self.mapping)
    }
}

impl fmt::Display for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.mapping.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

impl FromStr for Permutation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mapping = s
            .split(',')
            .map(|t| t.trim().parse::<u8>().map_err(|e| invalid!("bad permutation entry {t:?}: {e}")))
            .collect::<Result<Vec<_>>>()?;
        Self::new(mapping)
    }
}

#[inline]
fn mismatches(p: &[u8], q: &[u8]) -> u32 {
    p.iter().zip(q).filter(|(a, b)| a != b).count() as u32
}

/// Fraction of positions on which two permutations disagree.
pub fn hamming(p: &Permutation, q: &Permutation) -> Result<Ratio<u64>> {
    if p.len() != q.len() {
        return Err(invalid!("length mismatch: {} vs {}", p.len(), q.len()));
    }
    Ok(Ratio::new(mismatches(&p.mapping, &q.mapping) as u64, p.len() as u64))
}

/// Mean normalized Hamming distance over all unordered pairs; 0 for a
/// single entry.
pub fn average_hamming(entries: &[Permutation]) -> Result<Ratio<u64>> {
    let Some(first) = entries.first() else {
        return Err(invalid!("average Hamming distance of an empty set"));
    };
    let n = first.len();
    if entries.iter().any(|p| p.len() != n) {
        return Err(invalid!("permutations of differing length"));
    }
    let pairs = (entries.len() * (entries.len() - 1) / 2) as u64;
    if pairs == 0 {
        return Ok(Ratio::from_integer(0));
    }
    let total: u64 = entries
        .iter()
        .enumerate()
        .flat_map(|(i, p)| entries[i + 1..].iter().map(move |q| (p, q)))
        .map(|(p, q)| mismatches(&p.mapping, &q.mapping) as u64)
        .sum();
    Ok(Ratio::new(total, pairs * n as u64))
}

/// Reorder `items` so that output position `i` holds `items[p[i] - 1]`.
pub fn apply_permutation<T: Clone>(p: &Permutation, items: &[T]) -> Result<Vec<T>> {
    if items.len() != p.len() {
        return Err(invalid!("permutation of length {} applied to {} items", p.len(), items.len()));
    }
    Ok(p.sources().map(|s| items[s].clone()).collect())
}

pub fn invert(p: &Permutation) -> Permutation {
    let mut inv = vec![0u8; p.len()];
    for (i, s) in p.sources().enumerate() {
        inv[s] = (i + 1) as u8;
    }
    Permutation { mapping: inv }
}

/// All permutations of `1..=n` in lexicographic order, flattened row-major.
pub fn enumerate_lexicographic(n: usize) -> Vec<u8> {
    assert!((1..=10).contains(&n), "refusing to enumerate {n}!");
    let total: usize = (1..=n).product();
    let mut out = Vec::with_capacity(total * n);
    let mut cur: Vec<u8> = (1..=n as u8).collect();
    loop {
        out.extend_from_slice(&cur);
        // next permutation in lexicographic order
        let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| cur[i] < cur[i + 1]) else {
            break;
        };
        let j = (i + 1..n).rev().find(|&j| cur[j] > cur[i]).unwrap();
        cur.swap(i, j);
        cur[i + 1..].reverse();
    }
    debug_assert_eq!(out.len(), total * n);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Objective {
    Max,
    Min,
    Middle,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Max => "max",
            Objective::Min => "min",
            Objective::Middle => "middle",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Objective::Max),
            "min" => Ok(Objective::Min),
            "middle" => Ok(Objective::Middle),
            other => Err(invalid!("unknown objective {other:?} (expected max, min or middle)")),
        }
    }
}

/// Ordered permutation set; an entry's position is its class label.
#[derive(Clone, Debug, PartialEq)]
pub struct PermutationSet {
    entries: Vec<Permutation>,
    grid: usize,
    objective: Objective,
    seed: u64,
    avg_hamming: Ratio<u64>,
}

impl PermutationSet {
    /// Greedy selection of `n` permutations of a `grid × grid` puzzle.
    pub fn generate(n: usize, grid: usize, objective: Objective, seed: u64) -> Result<Self> {
        if grid < 2 {
            return Err(invalid!("grid must be at least 2, got {grid}"));
        }
        if grid > MAX_GRID {
            return Err(Error::UnsupportedScale(format!(
                "grid {grid} needs ({})! permutations; only grids up to {MAX_GRID} are supported",
                grid * grid
            )));
        }
        let cells = grid * grid;
        let pool = enumerate_lexicographic(cells);
        let pool_len = pool.len() / cells;
        if n == 0 || n > pool_len {
            return Err(invalid!("set size {n} outside 1..={pool_len}"));
        }

        let row = |k: usize| &pool[k * cells..(k + 1) * cells];
        let mut rng = derived_rng(seed, &[stream::PERMSET, grid as u64]);
        let mut removed = vec![false; pool_len];
        let mut col_sums = vec![0u32; pool_len];
        let mut entries = Vec::with_capacity(n);

        let mut j = rng.random_range(0..pool_len);
        loop {
            let chosen = row(j);
            entries.push(Permutation::from_valid(chosen));
            removed[j] = true;
            if entries.len() == n {
                break;
            }
            j = match objective {
                Objective::Middle => {
                    let remaining = pool_len - entries.len();
                    let r = rng.random_range(0..remaining);
                    (0..pool_len).filter(|&k| !removed[k]).nth(r).unwrap()
                }
                Objective::Max | Objective::Min => {
                    for (k, sum) in col_sums.iter_mut().enumerate() {
                        if !removed[k] {
                            *sum += mismatches(chosen, row(k));
                        }
                    }
                    select_extreme(&col_sums, &removed, objective == Objective::Max)
                }
            };
        }

        let avg_hamming = average_hamming(&entries)?;
        Ok(Self { entries, grid, objective, seed, avg_hamming })
    }

    /// Wrap externally supplied entries, checking every set invariant.
    pub fn from_entries(entries: Vec<Permutation>, grid: usize, objective: Objective, seed: u64) -> Result<Self> {
        if grid < 2 {
            return Err(invalid!("grid must be at least 2, got {grid}"));
        }
        let cells = grid * grid;
        if let Some(bad) = entries.iter().find(|p| p.len() != cells) {
            return Err(invalid!("entry {bad} does not have {cells} cells"));
        }
        let mut seen = std::collections::HashSet::with_capacity(entries.len());
        if let Some(dup) = entries.iter().find(|p| !seen.insert(*p)) {
            return Err(invalid!("duplicate entry {dup}"));
        }
        let avg_hamming = average_hamming(&entries)?;
        Ok(Self { entries, grid, objective, seed, avg_hamming })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn objective(&self) -> Objective {
        self.objective
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn entries(&self) -> &[Permutation] {
        &self.entries
    }

    pub fn get(&self, label: usize) -> Option<&Permutation> {
        self.entries.get(label)
    }

    /// Class label of a permutation, if it is in the set.
    pub fn label_of(&self, p: &Permutation) -> Option<usize> {
        self.entries.iter().position(|e| e == p)
    }

    pub fn avg_hamming(&self) -> Ratio<u64> {
        self.avg_hamming
    }

    pub fn avg_hamming_f64(&self) -> f64 {
        *self.avg_hamming.numer() as f64 / *self.avg_hamming.denom() as f64
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "grid={}", self.grid)?;
        writeln!(w, "objective={}", self.objective)?;
        writeln!(w, "seed={}", self.seed)?;
        writeln!(w, "count={}", self.entries.len())?;
        for p in &self.entries {
            writeln!(w, "{p}")?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse { what: "permutation set".into(), line, msg };
        let mut lines = BufReader::new(r).lines().enumerate();
        let mut header = |key: &str| -> Result<String> {
            let (i, line) = lines.next().ok_or_else(|| parse_err(0, format!("missing header {key}")))?;
            let line = line?;
            match line.split_once('=') {
                Some((k, v)) if k == key => Ok(v.to_string()),
                _ => Err(parse_err(i + 1, format!("expected `{key}=...`, found {line:?}"))),
            }
        };
        let grid: usize = header("grid")?.parse().map_err(|e| parse_err(1, format!("grid: {e}")))?;
        let objective: Objective = header("objective")?.parse()?;
        let seed: u64 = header("seed")?.parse().map_err(|e| parse_err(3, format!("seed: {e}")))?;
        let count: usize = header("count")?.parse().map_err(|e| parse_err(4, format!("count: {e}")))?;

        let mut entries = Vec::with_capacity(count);
        for (i, line) in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            entries.push(line.parse::<Permutation>().map_err(|e| parse_err(i + 1, e.to_string()))?);
        }
        if entries.len() != count {
            return Err(parse_err(0, format!("header says {count} entries, found {}", entries.len())));
        }
        Self::from_entries(entries, grid, objective, seed)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(fs::File::open(path)?)
    }
}

/// Index of the extreme column sum among entries still in the pool; ties go
/// to the lowest index.
fn select_extreme(col_sums: &[u32], removed: &[bool], maximize: bool) -> usize {
    let mut best: Option<(usize, u32)> = None;
    for (k, (&s, &gone)) in col_sums.iter().zip(removed).enumerate() {
        if gone {
            continue;
        }
        let better = match best {
            None => true,
            Some((_, b)) => {
                if maximize {
                    s > b
                } else {
                    s < b
                }
            }
        };
        if better {
            best = Some((k, s));
        }
    }
    best.expect("pool exhausted").0
}
