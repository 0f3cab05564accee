//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! "CFNJ" | version u32 | payload length u64 | payload | CRC-32 u32
//! ```
//!
//! The CRC covers every byte before it. The payload holds the network
//! configuration, training counters, and the parameter and momentum tensors
//! as `ndim u32, dims u32..., f32 values`.

use std::fs;
use std::path::Path;

use crate::cfn::{CfnConfig, CfnModel};
use crate::error::{CheckpointError, Error, Result};
use crate::tensornet::{Init, LayerSpec, ParamSet, Tensor};

pub const MAGIC: &[u8; 4] = b"CFNJ";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: CfnModel<f32>,
    pub velocity_branch: ParamSet<f32>,
    pub velocity_head: ParamSet<f32>,
    /// Completed iterations.
    pub iteration: u64,
    /// Master seed of the sample stream.
    pub seed: u64,
    /// Number of samples consumed so far; the position in the sample stream.
    pub cursor: u64,
}

impl Checkpoint {
    pub fn fresh(model: CfnModel<f32>, seed: u64) -> Self {
        let velocity_branch = model.branch().zero_grads();
        let velocity_head = model.head().zero_grads();
        Self { model, velocity_branch, velocity_head, iteration: 0, seed, cursor: 0 }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut p = Writer::default();
        encode_config(&mut p, self.model.config());
        p.u64(self.iteration);
        p.u64(self.seed);
        p.u64(self.cursor);
        for set in
            [self.model.branch().params(), self.model.head().params(), &self.velocity_branch, &self.velocity_head]
        {
            let tensors: Vec<_> = set.tensors().collect();
            p.u32(tensors.len() as u32);
            for t in tensors {
                p.u32(t.shape().len() as u32);
                t.shape().iter().for_each(|&d| p.u32(d as u32));
                t.data().iter().for_each(|&v| p.f32(v));
            }
        }
        let mut out = Vec::with_capacity(p.0.len() + 20);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(p.0.len() as u64).to_le_bytes());
        out.extend_from_slice(&p.0);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 {
            return Err(CheckpointError::Truncated);
        }
        if &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 16 {
            return Err(CheckpointError::Truncated);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let total = 16u64.checked_add(len).and_then(|n| n.checked_add(4)).ok_or(CheckpointError::Truncated)?;
        if (bytes.len() as u64) < total {
            return Err(CheckpointError::Truncated);
        }
        if (bytes.len() as u64) > total {
            return Err(CheckpointError::Malformed("trailing bytes after checksum".into()));
        }
        let body_end = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }

        let mut r = Reader { buf: &bytes[16..body_end], pos: 0 };
        let cfg = decode_config(&mut r)?;
        let iteration = r.u64()?;
        let seed = r.u64()?;
        let cursor = r.u64()?;
        let mut model = CfnModel::<f32>::zeroed(cfg).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let branch = read_set(&mut r, model.branch().params())?;
        let head = read_set(&mut r, model.head().params())?;
        let velocity_branch = read_set(&mut r, model.branch().params())?;
        let velocity_head = read_set(&mut r, model.head().params())?;
        if r.pos != r.buf.len() {
            return Err(CheckpointError::Malformed("unread payload bytes".into()));
        }
        let to_err = |e: Error| CheckpointError::Malformed(e.to_string());
        model.branch_mut().set_params(branch).map_err(to_err)?;
        model.head_mut().set_params(head).map_err(to_err)?;
        Ok(Self { model, velocity_branch, velocity_head, iteration, seed, cursor })
    }

    /// Write atomically: a temporary sibling is renamed into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        let end = self
            .pos
            .checked_add(N)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Malformed("payload ends early".into()))?;
        let out = self.buf[self.pos..end].try_into().unwrap();
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn usize(&mut self) -> Result<usize, CheckpointError> {
        Ok(self.u32()? as usize)
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take()?))
    }
    fn f32(&mut self) -> Result<f32, CheckpointError> {
        Ok(f32::from_le_bytes(self.take()?))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

fn encode_config(w: &mut Writer, cfg: &CfnConfig) {
    for v in [
        cfg.channels,
        cfg.tile_side,
        cfg.num_branches,
        cfg.fc6_width,
        cfg.fc7_width,
        cfg.num_classes,
        cfg.first_conv_stride,
    ] {
        w.u32(v as u32);
    }
    match cfg.init {
        Init::Gaussian { mean, std } => {
            w.u8(0);
            w.f64(mean);
            w.f64(std);
        }
        Init::FanIn => {
            w.u8(1);
            w.f64(0.0);
            w.f64(0.0);
        }
    }
    w.u32(cfg.branch.len() as u32);
    for spec in &cfg.branch {
        let (tag, f) = match *spec {
            LayerSpec::Conv { out_channels, kernel, stride, padding, groups } => {
                (0, [out_channels, kernel, stride, padding, groups])
            }
            LayerSpec::MaxPool { window, stride } => (1, [window, stride, 0, 0, 0]),
            LayerSpec::Relu => (2, [0; 5]),
            LayerSpec::Flatten => (3, [0; 5]),
            LayerSpec::Linear { out_features } => (4, [out_features, 0, 0, 0, 0]),
            LayerSpec::Concat { parts } => (5, [parts, 0, 0, 0, 0]),
        };
        w.u8(tag);
        f.iter().for_each(|&v| w.u32(v as u32));
    }
}

fn decode_config(r: &mut Reader) -> Result<CfnConfig, CheckpointError> {
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = r.usize()?;
    }
    let init = match r.u8()? {
        0 => Init::Gaussian { mean: r.f64()?, std: r.f64()? },
        1 => {
            r.f64()?;
            r.f64()?;
            Init::FanIn
        }
        t => return Err(CheckpointError::Malformed(format!("unknown init tag {t}"))),
    };
    let n = r.usize()?;
    let mut branch = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let tag = r.u8()?;
        let mut f = [0usize; 5];
        for v in &mut f {
            *v = r.usize()?;
        }
        branch.push(match tag {
            0 => LayerSpec::conv(f[0], f[1], f[2], f[3], f[4]),
            1 => LayerSpec::pool(f[0], f[1]),
            2 => LayerSpec::Relu,
            3 => LayerSpec::Flatten,
            4 => LayerSpec::linear(f[0]),
            5 => LayerSpec::Concat { parts: f[0] },
            t => return Err(CheckpointError::Malformed(format!("unknown layer tag {t}"))),
        });
    }
    let [channels, tile_side, num_branches, fc6_width, fc7_width, num_classes, first_conv_stride] = dims;
    Ok(CfnConfig {
        branch,
        channels,
        tile_side,
        num_branches,
        fc6_width,
        fc7_width,
        num_classes,
        first_conv_stride,
        init,
    })
}

/// Read tensors laid out like `like`, checking every shape.
fn read_set(r: &mut Reader, like: &ParamSet<f32>) -> Result<ParamSet<f32>, CheckpointError> {
    let mut out = ParamSet::zeros_like(like);
    let count = r.usize()?;
    if count != like.tensors().count() {
        return Err(CheckpointError::Malformed(format!("{count} tensors, network has {}", like.tensors().count())));
    }
    for t in out.tensors_mut() {
        let ndim = r.usize()?;
        let shape = (0..ndim).map(|_| r.usize()).collect::<Result<Vec<_>, _>>()?;
        if shape != t.shape() {
            return Err(CheckpointError::Malformed(format!("tensor shape {shape:?}, expected {:?}", t.shape())));
        }
        let data = (0..t.len()).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
        *t = Tensor::from_vec(&shape, data).expect("shape checked");
    }
    Ok(out)
}
