//! Seedable image-to-puzzle pipeline: resize, crop, cut tiles with random
//! gaps, shuffle by a permutation, normalize.

mod dataset;
mod image;
mod puzzle;

pub use dataset::{load_normalization, read_manifest, save_normalization, write_manifest, Dataset, LabeledSet};
pub use image::{center_crop_to_square, random_crop, random_crop_offsets, resize_bilinear, resize_shorter_side, Image};
pub use puzzle::{
    adjacent_gaps, extract_tiles, extract_tiles_with_offsets, make_puzzle, make_puzzle_labeled, normalize, one_hot,
    sample_seed, unshuffled_tiles, Normalization, PuzzleConfig, PuzzleSample, TileOffset,
};
