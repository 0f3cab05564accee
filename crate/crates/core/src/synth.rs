//! Synthetic images for CPU-scale experiments.
//!
//! Every cell of a `grid x grid` image carries a sinusoidal grating whose
//! orientation and period depend only on the cell position. Per-image
//! nuisance (a colour shift, tint, contrast, phase and pixel noise) is shared
//! across all cells, so colour statistics say nothing about where a tile
//! belongs; only the pattern structure does.
//!
//! The transfer task asks for the cell index of a single tile-sized patch
//! drawn from the same distribution.

use std::f32::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::imagepipe::{Dataset, Image, LabeledSet};
use crate::rng::{derived_rng, stream};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// Side of the square puzzle images.
    pub size: usize,
    pub grid: usize,
    pub channels: usize,
    /// Half-width of the uniform per-image colour shift.
    pub color_shift: f32,
    pub noise_std: f32,
}

impl Default for SynthConfig {
    /// Matches the toy puzzle geometry, so images need no resizing.
    fn default() -> Self {
        Self { size: 112, grid: 3, channels: 3, color_shift: 0.3, noise_std: 0.05 }
    }
}

/// Orientation (radians) and period (pixels) of the grating in `cell`.
pub fn cell_pattern(cell: usize, cells: usize) -> (f32, f32) {
    let angle = PI * cell as f32 / cells as f32;
    let period = 5.0 + 2.0 * (cell % 3) as f32;
    (angle, period)
}

/// Per-image nuisance drawn once and shared by every cell.
struct Nuisance {
    base: Vec<f32>,
    tint: Vec<f32>,
    amp: f32,
}

impl Nuisance {
    fn draw<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> Self {
        let base = (0..cfg.channels).map(|_| 0.5 + rng.random_range(-cfg.color_shift..=cfg.color_shift)).collect();
        let tint = (0..cfg.channels).map(|_| rng.random_range(0.5..=1.0)).collect();
        Self { base, tint, amp: rng.random_range(0.15..=0.3) }
    }
}

fn grating(angle: f32, period: f32, phase: f32, y: usize, x: usize) -> f32 {
    let t = x as f32 * angle.cos() + y as f32 * angle.sin();
    (2.0 * PI * t / period + phase).sin()
}

fn render<R: Rng + ?Sized>(
    cfg: &SynthConfig,
    h: usize,
    w: usize,
    rng: &mut R,
    cell_at: impl Fn(usize, usize) -> usize,
    phases: &[f32],
) -> Result<Image> {
    let nuisance = Nuisance::draw(cfg, rng);
    let noise = Normal::new(0.0, cfg.noise_std as f64).map_err(|e| invalid!("noise std: {e}"))?;
    let cells = cfg.grid * cfg.grid;
    let mut data = vec![0.0f32; cfg.channels * h * w];
    for y in 0..h {
        for x in 0..w {
            let cell = cell_at(y, x);
            let (angle, period) = cell_pattern(cell, cells);
            let g = nuisance.amp * grating(angle, period, phases[cell], y, x);
            for c in 0..cfg.channels {
                let n = noise.sample(rng) as f32;
                data[(c * h + y) * w + x] = nuisance.base[c] + nuisance.tint[c] * g + n;
            }
        }
    }
    Image::new(h, w, cfg.channels, data)
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.grid < 2 || self.size < self.grid {
            return Err(invalid!("synthetic images need grid >= 2 and size >= grid"));
        }
        if self.channels == 0 {
            return Err(invalid!("channels must be positive"));
        }
        Ok(())
    }

    /// One `size x size` puzzle source image.
    pub fn puzzle_image<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Image> {
        self.validate()?;
        let cells = self.grid * self.grid;
        let phases: Vec<f32> = (0..cells).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let (g, s) = (self.grid, self.size);
        render(self, s, s, rng, |y, x| (y * g / s) * g + x * g / s, &phases)
    }

    /// A `side x side` patch showing the pattern of `cell`.
    pub fn cell_patch<R: Rng + ?Sized>(&self, cell: usize, side: usize, rng: &mut R) -> Result<Image> {
        self.validate()?;
        let cells = self.grid * self.grid;
        if cell >= cells {
            return Err(invalid!("cell {cell} out of range for {cells} cells"));
        }
        let phases = vec![rng.random_range(0.0..2.0 * PI); cells];
        render(self, side, side, rng, |_, _| cell, &phases)
    }
}

/// `n` unlabeled puzzle source images with ids `synth-00000`, ...
pub fn puzzle_dataset(cfg: &SynthConfig, n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = derived_rng(seed, &[stream::SYNTH, 0]);
    let records =
        (0..n).map(|i| Ok((format!("synth-{i:05}"), cfg.puzzle_image(&mut rng)?))).collect::<Result<Vec<_>>>()?;
    Ok(Dataset::from_images(records))
}

/// `n` patches of side `side`, labelled with the cell they depict. Labels
/// cycle through the classes so every class is equally represented.
pub fn transfer_dataset(cfg: &SynthConfig, n: usize, side: usize, seed: u64) -> Result<LabeledSet> {
    let classes = cfg.grid * cfg.grid;
    let mut rng = derived_rng(seed, &[stream::SYNTH, 1]);
    let mut images = Vec::with_capacity(n);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for &l in &labels {
        images.push(cfg.cell_patch(l, side, &mut rng)?);
    }
    let ids = (0..n).map(|i| format!("patch-{i:05}")).collect();
    LabeledSet::new(ids, images, labels, classes)
}
