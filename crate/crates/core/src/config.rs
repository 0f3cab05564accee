//! Run configuration as flat `section.key = value` lines.
//!
//! ```text
//! # comments and blank lines are ignored
//! seed = 7
//! deterministic = true
//! paths.manifest = data/train.txt
//! puzzle.tile = 32
//! cfn.preset = toy
//! train.iterations = 500
//! train.lr_decay_at = 300, 450
//! ```
//!
//! Every key is optional; unknown keys are an error.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cfn::CfnConfig;
use crate::error::{Error, Result};
use crate::imagepipe::PuzzleConfig;
use crate::tensornet::Init;
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Toy,
    Reference,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Toy => "toy",
            Preset::Reference => "reference",
        })
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "toy" => Ok(Preset::Toy),
            "reference" => Ok(Preset::Reference),
            _ => Err(format!("unknown preset {s:?} (expected toy or reference)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub manifest: PathBuf,
    pub permset: PathBuf,
    /// Computed from the training images when absent.
    pub normalization: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Geometry only; normalization comes from `normalization`.
    pub puzzle: PuzzleConfig,
    pub preset: Preset,
    /// Overrides the preset's initializer.
    pub init: Option<Init>,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            deterministic: false,
            manifest: "train.txt".into(),
            permset: "permset.txt".into(),
            normalization: None,
            out_dir: "run".into(),
            puzzle: PuzzleConfig::toy(),
            preset: Preset::Toy,
            init: None,
            train: TrainConfig { batch_size: 32, iterations: 500, log_every: 10, ..TrainConfig::default() },
        }
    }
}

fn parse_init(s: &str) -> std::result::Result<Init, String> {
    if s == "fanin" {
        return Ok(Init::FanIn);
    }
    let body = s
        .strip_prefix("gaussian(")
        .and_then(|r| r.strip_suffix(')'))
        .ok_or_else(|| format!("unknown init {s:?} (expected fanin or gaussian(mean, std))"))?;
    let (m, sd) = body.split_once(',').ok_or("gaussian needs mean and std")?;
    let mean = m.trim().parse::<f64>().map_err(|e| e.to_string())?;
    let std = sd.trim().parse::<f64>().map_err(|e| e.to_string())?;
    if !(std >= 0.0 && std.is_finite() && mean.is_finite()) {
        return Err(format!("bad gaussian parameters in {s:?}"));
    }
    Ok(Init::Gaussian { mean, std })
}

fn show_init(init: Init) -> String {
    match init {
        Init::FanIn => "fanin".into(),
        Init::Gaussian { mean, std } => format!("gaussian({mean:?}, {std:?})"),
    }
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("{v:?}: {e}"))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::Parse { what: "config".into(), line: n + 1, msg };
            let (key, value) =
                line.split_once('=').ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
            let (key, v) = (key.trim(), value.trim());
            let r: std::result::Result<(), String> = match key {
                "seed" => parse(v).map(|x| c.seed = x),
                "deterministic" => parse(v).map(|x| c.deterministic = x),
                "paths.manifest" => {
                    c.manifest = v.into();
                    Ok(())
                }
                "paths.permset" => {
                    c.permset = v.into();
                    Ok(())
                }
                "paths.normalization" => {
                    c.normalization = Some(v.into());
                    Ok(())
                }
                "paths.out_dir" => {
                    c.out_dir = v.into();
                    Ok(())
                }
                "puzzle.resize_target" => parse(v).map(|x| c.puzzle.resize_target = x),
                "puzzle.crop" => parse(v).map(|x| c.puzzle.crop = x),
                "puzzle.grid" => parse(v).map(|x| c.puzzle.grid = x),
                "puzzle.cell" => parse(v).map(|x| c.puzzle.cell = x),
                "puzzle.tile" => parse(v).map(|x| c.puzzle.tile = x),
                "cfn.preset" => parse(v).map(|x| c.preset = x),
                "cfn.init" => parse_init(v).map(|x| c.init = Some(x)),
                "train.learning_rate" => parse(v).map(|x| c.train.learning_rate = x),
                "train.momentum" => parse(v).map(|x| c.train.momentum = x),
                "train.batch_size" => parse(v).map(|x| c.train.batch_size = x),
                "train.iterations" => parse(v).map(|x| c.train.iterations = x),
                "train.log_every" => parse(v).map(|x| c.train.log_every = x),
                "train.checkpoint_every" => parse(v).map(|x| c.train.checkpoint_every = x),
                "train.lr_decay_at" => v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(parse::<u64>)
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map(|x| c.train.lr_decay_at = x),
                _ => Err(format!("unknown key {key:?}")),
            };
            r.map_err(err)?;
        }
        c.train.seed = c.seed;
        c.train.deterministic = c.deterministic;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.train.iterations == 0 {
            return Err(Error::Config("train.iterations must be at least 1".into()));
        }
        if self.train.learning_rate <= 0.0 {
            return Err(Error::Config("train.learning_rate must be positive".into()));
        }
        self.puzzle.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("config {}: {e}", path.display()))))?;
        Self::parse(&text)
    }

    /// Network for a permutation set of `num_classes` entries.
    pub fn cfn_config(&self, num_classes: usize) -> CfnConfig {
        let mut cfg = match self.preset {
            Preset::Toy => CfnConfig::toy(num_classes),
            Preset::Reference => CfnConfig::reference(num_classes),
        };
        cfg.tile_side = self.puzzle.tile;
        cfg.num_branches = self.puzzle.cells();
        if let Some(init) = self.init {
            cfg.init = init;
        }
        cfg
    }

    /// Resolve the relative paths in this config against `root`.
    pub fn resolve(&mut self, root: &Path) {
        for p in [&mut self.manifest, &mut self.permset, &mut self.out_dir] {
            if p.is_relative() {
                *p = root.join(&*p);
            }
        }
        if let Some(p) = self.normalization.as_mut().filter(|p| p.is_relative()) {
            *p = root.join(&*p);
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let t = &self.train;
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "deterministic = {}", self.deterministic);
        let _ = writeln!(s, "paths.manifest = {}", self.manifest.display());
        let _ = writeln!(s, "paths.permset = {}", self.permset.display());
        if let Some(n) = &self.normalization {
            let _ = writeln!(s, "paths.normalization = {}", n.display());
        }
        let _ = writeln!(s, "paths.out_dir = {}", self.out_dir.display());
        let p = &self.puzzle;
        let _ = writeln!(s, "puzzle.resize_target = {}", p.resize_target);
        let _ = writeln!(s, "puzzle.crop = {}", p.crop);
        let _ = writeln!(s, "puzzle.grid = {}", p.grid);
        let _ = writeln!(s, "puzzle.cell = {}", p.cell);
        let _ = writeln!(s, "puzzle.tile = {}", p.tile);
        let _ = writeln!(s, "cfn.preset = {}", self.preset);
        if let Some(init) = self.init {
            let _ = writeln!(s, "cfn.init = {}", show_init(init));
        }
        let _ = writeln!(s, "train.learning_rate = {:?}", t.learning_rate);
        let _ = writeln!(s, "train.momentum = {:?}", t.momentum);
        let _ = writeln!(s, "train.batch_size = {}", t.batch_size);
        let _ = writeln!(s, "train.iterations = {}", t.iterations);
        let _ = writeln!(s, "train.log_every = {}", t.log_every);
        let _ = writeln!(s, "train.checkpoint_every = {}", t.checkpoint_every);
        let decay: Vec<String> = t.lr_decay_at.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "train.lr_decay_at = {}", decay.join(", "));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_roundtrip() {
        let text = "\
# toy run
seed = 7
deterministic = true
paths.manifest = data/train.txt
cfn.init = gaussian(0.0, 0.01)
train.iterations = 40
train.lr_decay_at = 20, 30
";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.seed, 7);
        assert!(c.train.deterministic);
        assert_eq!(c.manifest, PathBuf::from("data/train.txt"));
        assert_eq!(c.init, Some(Init::Gaussian { mean: 0.0, std: 0.01 }));
        assert_eq!(c.train.lr_decay_at, vec![20, 30]);
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_and_bad_values() {
        for bad in [
            "train.batchsize = 3",
            "seed = x",
            "just words",
            "cfn.preset = huge",
            "train.iterations = 0",
            "cfn.init = uniform",
        ] {
            assert!(RunConfig::parse(bad).is_err(), "{bad}");
        }
        match RunConfig::parse("seed = 1\nfoo.bar = 2") {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("foo.bar"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cfn_follows_puzzle_geometry() {
        let c = RunConfig::default();
        let cfg = c.cfn_config(8);
        assert_eq!((cfg.tile_side, cfg.num_branches, cfg.num_classes), (32, 9, 8));
        cfg.validate().unwrap();
    }

    #[test]
    fn resolve_relative_paths() {
        let mut c = RunConfig { manifest: "/abs/m.txt".into(), ..Default::default() };
        c.resolve(Path::new("/root/data"));
        assert_eq!(c.manifest, PathBuf::from("/abs/m.txt"));
        assert_eq!(c.permset, PathBuf::from("/root/data/permset.txt"));
    }
}
