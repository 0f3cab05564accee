use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::image::{random_crop, resize_shorter_side, Image};
use crate::error::{invalid, Error, Result};
use crate::permset::{apply_permutation, PermutationSet};
use crate::rng::{derive_seed, derived_rng, stream};
use crate::tensornet::Tensor;

/// Per-channel normalization `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// `[C, H, W]` tensor of `(x - mean) / std`.
    pub fn apply(&self, img: &Image) -> Result<Tensor<f32>> {
        self.validate()?;
        if img.channels() != self.channels() {
            return Err(invalid!("{}-channel image, {}-channel normalization", img.channels(), self.channels()));
        }
        let plane = img.height() * img.width();
        let mut data = img.data().to_vec();
        for (c, chunk) in data.chunks_mut(plane).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        Tensor::from_vec(&[img.channels(), img.height(), img.width()], data)
    }

    fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() || self.mean.is_empty() {
            return Err(invalid!("normalization needs matching, non-empty mean and std lists"));
        }
        if let Some(s) = self.std.iter().find(|&&s| s <= 0.0 || !s.is_finite()) {
            return Err(invalid!("normalization std must be positive, got {s}"));
        }
        Ok(())
    }

    /// Population mean and standard deviation per channel over every pixel.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Self> {
        let mut sums: Vec<(f64, f64, u64)> = Vec::new();
        for img in images {
            if sums.is_empty() {
                sums = vec![(0.0, 0.0, 0); img.channels()];
            } else if sums.len() != img.channels() {
                return Err(invalid!("mixed channel counts in dataset"));
            }
            let plane = img.height() * img.width();
            for (c, acc) in sums.iter_mut().enumerate() {
                for &v in &img.data()[c * plane..(c + 1) * plane] {
                    acc.0 += v as f64;
                    acc.1 += (v as f64) * (v as f64);
                }
                acc.2 += plane as u64;
            }
        }
        if sums.is_empty() {
            return Err(invalid!("no images to compute normalization from"));
        }
        let (mean, std) = sums
            .iter()
            .map(|&(s, sq, n)| {
                let m = s / n as f64;
                let var = (sq / n as f64 - m * m).max(0.0);
                (m as f32, (var.sqrt() as f32).max(1e-6))
            })
            .unzip();
        Ok(Self { mean, std })
    }
}

fn join(v: &[f32]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Text form: `mean=a,b,c` and `std=d,e,f` on two lines.
impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mean={}", join(&self.mean))?;
        writeln!(f, "std={}", join(&self.std))
    }
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut mean = None;
        let mut std = None;
        for (i, line) in s.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let err = |msg: String| Error::Parse { what: "normalization".into(), line: i + 1, msg };
            let (key, vals) = line.split_once('=').ok_or_else(|| err(format!("expected key=values, got {line:?}")))?;
            let parsed = vals
                .split(',')
                .map(|t| t.trim().parse::<f32>().map_err(|e| err(format!("{t:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            match key.trim() {
                "mean" => mean = Some(parsed),
                "std" => std = Some(parsed),
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        let norm = Normalization {
            mean: mean.ok_or_else(|| invalid!("normalization file lacks mean"))?,
            std: std.ok_or_else(|| invalid!("normalization file lacks std"))?,
        };
        norm.validate()?;
        Ok(norm)
    }
}

/// Geometry of puzzle extraction.
#[derive(Clone, Debug, PartialEq)]
pub struct PuzzleConfig {
    pub resize_target: usize,
    pub crop: usize,
    pub grid: usize,
    pub cell: usize,
    pub tile: usize,
    pub norm: Normalization,
}

impl Default for PuzzleConfig {
    fn default() -> Self {
        Self { resize_target: 256, crop: 225, grid: 3, cell: 75, tile: 64, norm: Normalization::identity(3) }
    }
}

impl PuzzleConfig {
    /// Small geometry for CPU-scale experiments: 32 px tiles in 35 px cells.
    pub fn toy() -> Self {
        Self { resize_target: 112, crop: 105, grid: 3, cell: 35, tile: 32, norm: Normalization::identity(3) }
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 {
            return Err(invalid!("grid must be at least 2"));
        }
        if self.grid * self.cell != self.crop {
            return Err(invalid!("grid {} x cell {} != crop {}", self.grid, self.cell, self.crop));
        }
        if self.tile == 0 || self.tile > self.cell {
            return Err(invalid!("tile {} must be in 1..={}", self.tile, self.cell));
        }
        if self.resize_target < self.crop {
            return Err(invalid!("resize target {} smaller than crop {}", self.resize_target, self.crop));
        }
        self.norm.validate()
    }
}

/// Top-left corner of a tile inside its cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileOffset {
    pub dy: usize,
    pub dx: usize,
}

/// Raster-order tiles and their in-cell offsets. Offsets are drawn
/// independently per cell and per axis, `dy` before `dx`.
pub fn extract_tiles_with_offsets<R: Rng + ?Sized>(
    img: &Image,
    cfg: &PuzzleConfig,
    rng: &mut R,
) -> Result<(Vec<Image>, Vec<TileOffset>)> {
    if img.height() != cfg.crop || img.width() != cfg.crop {
        return Err(invalid!("expected a {0}x{0} crop, got {1}x{2}", cfg.crop, img.height(), img.width()));
    }
    let slack = cfg.cell - cfg.tile;
    let mut tiles = Vec::with_capacity(cfg.cells());
    let mut offsets = Vec::with_capacity(cfg.cells());
    for row in 0..cfg.grid {
        for col in 0..cfg.grid {
            let dy = rng.random_range(0..=slack);
            let dx = rng.random_range(0..=slack);
            tiles.push(img.crop(row * cfg.cell + dy, col * cfg.cell + dx, cfg.tile, cfg.tile)?);
            offsets.push(TileOffset { dy, dx });
        }
    }
    Ok((tiles, offsets))
}

pub fn extract_tiles<R: Rng + ?Sized>(img: &Image, cfg: &PuzzleConfig, rng: &mut R) -> Result<Vec<Image>> {
    extract_tiles_with_offsets(img, cfg, rng).map(|(t, _)| t)
}

/// Pixel gaps between horizontally and vertically adjacent tiles.
pub fn adjacent_gaps(offsets: &[TileOffset], cfg: &PuzzleConfig) -> Vec<usize> {
    let g = cfg.grid;
    let base = cfg.cell - cfg.tile;
    let mut gaps = Vec::with_capacity(2 * g * (g - 1));
    for r in 0..g {
        for c in 0..g {
            let here = offsets[r * g + c];
            if c + 1 < g {
                gaps.push(base + offsets[r * g + c + 1].dx - here.dx);
            }
            if r + 1 < g {
                gaps.push(base + offsets[(r + 1) * g + c].dy - here.dy);
            }
        }
    }
    gaps
}

pub fn normalize(tile: &Image, cfg: &PuzzleConfig) -> Result<Tensor<f32>> {
    cfg.norm.apply(tile)
}

/// A shuffled puzzle ready for the network.
#[derive(Clone, Debug, PartialEq)]
pub struct PuzzleSample {
    pub tiles: Vec<Tensor<f32>>,
    pub label: usize,
    pub source_id: String,
    /// Seed that reproduces this sample through [`make_puzzle`].
    pub rng_trace: u64,
}

impl PuzzleSample {
    pub fn one_hot(&self, classes: usize) -> Vec<f32> {
        one_hot(self.label, classes)
    }
}

pub fn one_hot(label: usize, classes: usize) -> Vec<f32> {
    (0..classes).map(|i| if i == label { 1.0 } else { 0.0 }).collect()
}

/// Seed of the puzzle built from `record` during `epoch`. Independent of
/// batch composition and worker scheduling.
pub fn sample_seed(master: u64, epoch: u64, record: u64) -> u64 {
    derive_seed(master, &[stream::SAMPLE, epoch, record])
}

/// Resize, crop and cut into raster-order tiles, drawing geometry from
/// `seed`. The label stream is separate, so the unshuffled tiles of a
/// sample do not depend on which permutation is chosen.
pub fn unshuffled_tiles(img: &Image, cfg: &PuzzleConfig, seed: u64) -> Result<Vec<Image>> {
    cfg.validate()?;
    let mut rng = derived_rng(seed, &[1]);
    let resized = if img.height().min(img.width()) == cfg.resize_target {
        img.clone()
    } else {
        resize_shorter_side(img, cfg.resize_target)?
    };
    let crop = random_crop(&resized, cfg.crop, &mut rng)?;
    extract_tiles(&crop, cfg, &mut rng)
}

/// Full pipeline with a uniformly drawn label.
pub fn make_puzzle(
    img: &Image,
    set: &PermutationSet,
    cfg: &PuzzleConfig,
    source_id: &str,
    seed: u64,
) -> Result<PuzzleSample> {
    if set.is_empty() {
        return Err(invalid!("empty permutation set"));
    }
    let label = derived_rng(seed, &[0]).random_range(0..set.len());
    make_puzzle_labeled(img, set, cfg, label, source_id, seed)
}

/// Full pipeline with a caller-chosen label.
pub fn make_puzzle_labeled(
    img: &Image,
    set: &PermutationSet,
    cfg: &PuzzleConfig,
    label: usize,
    source_id: &str,
    seed: u64,
) -> Result<PuzzleSample> {
    if set.grid() != cfg.grid {
        return Err(invalid!("permutation set grid {} vs puzzle grid {}", set.grid(), cfg.grid));
    }
    let perm = set.get(label).ok_or_else(|| invalid!("label {label} out of range for {} permutations", set.len()))?;
    let tiles = unshuffled_tiles(img, cfg, seed)?;
    let shuffled = apply_permutation(perm, &tiles)?;
    let tiles = shuffled.iter().map(|t| normalize(t, cfg)).collect::<Result<Vec<_>>>()?;
    Ok(PuzzleSample { tiles, label, source_id: source_id.to_string(), rng_trace: seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::permset::{invert, Objective, Permutation};
    use crate::rng::rng_from_seed;

    fn noise(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = rng_from_seed(seed);
        Image::from_fn(h, w, 3, |_, _, _| rng.random::<f32>()).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(PuzzleConfig::default().validate().is_ok());
        assert!(PuzzleConfig::toy().validate().is_ok());
        assert!(PuzzleConfig { cell: 70, ..Default::default() }.validate().is_err());
        assert!(PuzzleConfig { tile: 76, ..Default::default() }.validate().is_err());
        assert!(PuzzleConfig { resize_target: 200, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn zero_slack_gives_zero_gaps() {
        let cfg = PuzzleConfig { resize_target: 30, crop: 30, cell: 10, tile: 10, ..Default::default() };
        let (_, offs) = extract_tiles_with_offsets(&noise(30, 30, 1), &cfg, &mut rng_from_seed(3)).unwrap();
        assert!(adjacent_gaps(&offs, &cfg).iter().all(|&g| g == 0));
    }

    #[test]
    fn reassembling_full_cells_reproduces_the_crop() {
        let cfg = PuzzleConfig { resize_target: 30, crop: 30, cell: 10, tile: 10, ..Default::default() };
        let img = noise(30, 30, 4);
        let tiles = extract_tiles(&img, &cfg, &mut rng_from_seed(0)).unwrap();
        let rebuilt = Image::from_fn(30, 30, 3, |c, y, x| tiles[(y / 10) * 3 + x / 10].get(c, y % 10, x % 10)).unwrap();
        assert_eq!(rebuilt, img);
    }

    #[test]
    fn tiles_stay_inside_their_cells() {
        // pixel value encodes its own coordinates
        let cfg = PuzzleConfig::default();
        let img = Image::from_fn(225, 225, 1, |_, y, x| (y * 225 + x) as f32).unwrap();
        let cfg1 = PuzzleConfig { norm: Normalization::identity(1), ..cfg };
        let mut rng = rng_from_seed(77);
        for _ in 0..50 {
            let (tiles, offs) = extract_tiles_with_offsets(&img, &cfg1, &mut rng).unwrap();
            for (i, (t, o)) in tiles.iter().zip(&offs).enumerate() {
                let (r, c) = (i / 3, i % 3);
                let v = t.get(0, 0, 0) as usize;
                assert_eq!((v / 225, v % 225), (r * 75 + o.dy, c * 75 + o.dx));
                let last = t.get(0, 63, 63) as usize;
                assert!(last / 225 < (r + 1) * 75 && last % 225 < (c + 1) * 75);
            }
        }
    }

    #[test]
    fn normalize_examples() {
        let tile = Image::filled(4, 4, 3, 0.5).unwrap();
        let id = PuzzleConfig::default();
        assert_eq!(normalize(&tile, &id).unwrap().data(), &[0.5; 48][..]);
        let centered =
            PuzzleConfig { norm: Normalization { mean: vec![0.5; 3], std: vec![1.0; 3] }, ..Default::default() };
        assert!(normalize(&tile, &centered).unwrap().data().iter().all(|&v| v == 0.0));
        let scaled =
            PuzzleConfig { norm: Normalization { mean: vec![0.5; 3], std: vec![0.25; 3] }, ..Default::default() };
        let one = Image::filled(2, 2, 3, 1.0).unwrap();
        assert!(normalize(&one, &scaled).unwrap().data().iter().all(|&v| v == 2.0));
        let zero_std =
            PuzzleConfig { norm: Normalization { mean: vec![0.0; 3], std: vec![0.0; 3] }, ..Default::default() };
        assert!(normalize(&one, &zero_std).is_err());
    }

    #[test]
    fn normalization_text_roundtrip() {
        let n = Normalization { mean: vec![0.25, 0.5, 0.125], std: vec![0.1, 0.2, 0.3] };
        let back: Normalization = n.to_string().parse().unwrap();
        assert_eq!(back, n);
        assert!("mean=0.1\nstd=0\n".parse::<Normalization>().is_err());
        assert!("mean=0.1\n".parse::<Normalization>().is_err());
    }

    #[test]
    fn normalization_from_images() {
        let a = Image::filled(2, 2, 1, 0.0).unwrap();
        let b = Image::filled(2, 2, 1, 1.0).unwrap();
        let n = Normalization::from_images([&a, &b]).unwrap();
        assert!((n.mean[0] - 0.5).abs() < 1e-7 && (n.std[0] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn one_hot_at_label() {
        let v = one_hot(63, 100);
        assert_eq!(v.len(), 100);
        assert_eq!(v[63], 1.0);
        assert_eq!(v.iter().sum::<f32>(), 1.0);
    }

    #[test]
    fn puzzle_roundtrip_and_identity() {
        let cfg = PuzzleConfig::toy();
        let img = noise(112, 130, 9);
        let set = PermutationSet::from_entries(
            vec![Permutation::identity(9), "3,1,2,9,5,4,8,7,6".parse().unwrap()],
            3,
            Objective::Max,
            0,
        )
        .unwrap();
        let plain = make_puzzle_labeled(&img, &set, &cfg, 0, "a", 5).unwrap();
        let raw: Vec<_> =
            unshuffled_tiles(&img, &cfg, 5).unwrap().iter().map(|t| normalize(t, &cfg).unwrap()).collect();
        assert_eq!(plain.tiles, raw);

        let shuffled = make_puzzle_labeled(&img, &set, &cfg, 1, "a", 5).unwrap();
        let restored = apply_permutation(&invert(set.get(1).unwrap()), &shuffled.tiles).unwrap();
        assert_eq!(restored, raw);
        assert!(make_puzzle_labeled(&img, &set, &cfg, 2, "a", 5).is_err());
    }

    #[test]
    fn replay_is_bit_identical() {
        let cfg = PuzzleConfig::toy();
        let img = noise(120, 112, 2);
        let set = PermutationSet::generate(8, 3, Objective::Max, 1).unwrap();
        let a = make_puzzle(&img, &set, &cfg, "x", sample_seed(3, 1, 4)).unwrap();
        let b = make_puzzle(&img, &set, &cfg, "x", a.rng_trace).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tiles.len(), 9);
        assert!(a.tiles.iter().all(|t| t.shape() == [3, 32, 32]));
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let set = PermutationSet::generate(4, 2, Objective::Max, 1).unwrap();
        let img = noise(112, 112, 2);
        assert!(make_puzzle(&img, &set, &PuzzleConfig::toy(), "x", 0).is_err());
    }
}
