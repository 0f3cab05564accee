use std::fs;
use std::path::{Path, PathBuf};

use super::image::Image;
use super::puzzle::Normalization;
use crate::error::{invalid, Error, Result};

/// Images held in memory, in manifest order. The record index is the
/// stable identity used to derive per-sample seeds.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    ids: Vec<String>,
    images: Vec<Image>,
}

impl Dataset {
    pub fn from_images(records: Vec<(String, Image)>) -> Self {
        let (ids, images) = records.into_iter().unzip();
        Self { ids, images }
    }

    /// Load every image listed in a manifest. Relative entries resolve
    /// against the manifest's directory.
    pub fn load_manifest(path: impl AsRef<Path>) -> Result<Self> {
        let entries = read_manifest(path)?;
        let mut ids = Vec::with_capacity(entries.len());
        let mut images = Vec::with_capacity(entries.len());
        for (id, full) in entries {
            images.push(Image::load(&full)?);
            ids.push(id);
        }
        Ok(Self { ids, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn id(&self, idx: usize) -> &str {
        &self.ids[idx]
    }

    pub fn image(&self, idx: usize) -> &Image {
        &self.images[idx]
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Image)> {
        self.ids.iter().map(String::as_str).zip(&self.images)
    }

    /// Split off the records at positions `>= at` into a second dataset.
    pub fn split_at(mut self, at: usize) -> (Dataset, Dataset) {
        let at = at.min(self.len());
        let ids = self.ids.split_off(at);
        let images = self.images.split_off(at);
        (self, Dataset { ids, images })
    }
}

/// Manifest entries as `(relative path as written, resolved path)`.
/// Blank lines and `#` comments are skipped.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<(String, PathBuf)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("manifest {}: {e}", path.display()))))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let entries: Vec<_> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| (l.to_string(), base.join(l)))
        .collect();
    if entries.is_empty() {
        return Err(invalid!("manifest {} lists no images", path.display()));
    }
    Ok(entries)
}

pub fn write_manifest<S: AsRef<str>>(path: impl AsRef<Path>, entries: &[S]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(e.as_ref());
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn load_normalization(path: impl AsRef<Path>) -> Result<Normalization> {
    fs::read_to_string(path)?.parse()
}

pub fn save_normalization(path: impl AsRef<Path>, norm: &Normalization) -> Result<()> {
    fs::write(path, norm.to_string())?;
    Ok(())
}

/// Images with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub ids: Vec<String>,
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledSet {
    pub fn new(ids: Vec<String>, images: Vec<Image>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if ids.len() != images.len() || images.len() != labels.len() {
            return Err(invalid!("ids, images and labels differ in length"));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(invalid!("label {l} out of range for {num_classes} classes"));
        }
        Ok(Self { ids, images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Load a manifest of `path label` lines; the class count is one more
    /// than the largest label.
    pub fn load_manifest(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new("."));
        let (mut ids, mut images, mut labels) = (Vec::new(), Vec::new(), Vec::new());
        for (i, (entry, _)) in read_manifest(path)?.into_iter().enumerate() {
            let parse_err = |msg: String| Error::Parse { what: path.display().to_string(), line: i + 1, msg };
            let (rel, label) = entry
                .rsplit_once(char::is_whitespace)
                .ok_or_else(|| parse_err(format!("expected `path label`, got {entry:?}")))?;
            let rel = rel.trim_end();
            labels.push(label.parse::<usize>().map_err(|e| parse_err(format!("label {label:?}: {e}")))?);
            images.push(Image::load(base.join(rel))?);
            ids.push(rel.to_string());
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        Self::new(ids, images, labels, classes)
    }

    /// Write PNGs under `dir` and a manifest `name` listing them.
    pub fn save(&self, dir: impl AsRef<Path>, name: &str) -> Result<()> {
        let dir = dir.as_ref();
        let mut lines = Vec::with_capacity(self.len());
        for ((id, img), label) in self.ids.iter().zip(&self.images).zip(&self.labels) {
            let rel = format!("{id}.png");
            let full = dir.join(&rel);
            if let Some(parent) = full.parent() {
                fs::create_dir_all(parent)?;
            }
            img.save_png(&full)?;
            lines.push(format!("{rel} {label}"));
        }
        write_manifest(dir.join(name), &lines)
    }
}
