//! Binary model checkpoints.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic         8 bytes   "HYCORECK"
//! version       u32       1
//! flags         u32       bit 0: Euclidean mode, bit 1: feature clip present
//! curvature     f64
//! feature clip  f64       0 when absent
//! count         u32       number of tensors (10)
//! per tensor, in canonical parameter order:
//!   name length u32, name UTF-8 bytes
//!   rank u32, extents u64 × rank
//!   values f64 × product of extents
//! ```
//!
//! Floats are stored as raw bit patterns, so a save/load roundtrip is
//! bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::hypgeo::Curvature;
use crate::nn::{EncoderParams, HeadParams, MobiusLayerParams, ModelState, PARAM_NAMES};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"HYCORECK";
pub const VERSION: u32 = 1;

const FLAG_EUCLIDEAN: u32 = 1;
const FLAG_CLIP: u32 = 2;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub fn to_bytes(state: &ModelState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let mut flags = 0;
    if state.euclidean_mode {
        flags |= FLAG_EUCLIDEAN;
    }
    if state.feature_clip.is_some() {
        flags |= FLAG_CLIP;
    }
    out.extend_from_slice(&flags.to_le_bytes());
    out.extend_from_slice(&state.curvature.value().to_le_bytes());
    out.extend_from_slice(&state.feature_clip.unwrap_or(0.0).to_le_bytes());
    out.extend_from_slice(&(PARAM_NAMES.len() as u32).to_le_bytes());
    for (name, t) in PARAM_NAMES.iter().zip(state.params()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() < n {
            return Err(CheckpointError::Truncated);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelState, CheckpointError> {
    let mut r = Reader { buf: bytes };
    if r.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let flags = r.u32()?;
    let curvature = Curvature::new(r.f64()?).map_err(|e| CheckpointError::Format(e.to_string()))?;
    let clip = r.f64()?;
    let count = r.u32()? as usize;
    if count != PARAM_NAMES.len() {
        return Err(CheckpointError::Format(format!("expected {} tensors, found {count}", PARAM_NAMES.len())));
    }
    let mut tensors = Vec::with_capacity(count);
    for expected in PARAM_NAMES {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Format("tensor name is not UTF-8".into()))?;
        if name != expected {
            return Err(CheckpointError::Format(format!("expected tensor `{expected}`, found `{name}`")));
        }
        let rank = r.u32()? as usize;
        if rank > 2 {
            return Err(CheckpointError::Format(format!("`{name}` has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        if n > r.buf.len() / 8 {
            return Err(CheckpointError::Truncated);
        }
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        tensors.push(Tensor::new(shape, data).expect("length matches shape"));
    }
    if !r.buf.is_empty() {
        return Err(CheckpointError::Format(format!("{} trailing bytes", r.buf.len())));
    }
    let mut it = tensors.into_iter();
    let mut next = || it.next().expect("ten tensors");
    let state = ModelState {
        encoder: EncoderParams {
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
            w3: next(),
            b3: next(),
        },
        mobius: MobiusLayerParams { m: next(), b: next() },
        head: HeadParams { w: next(), b: next() },
        curvature,
        euclidean_mode: flags & FLAG_EUCLIDEAN != 0,
        feature_clip: (flags & FLAG_CLIP != 0).then_some(clip),
    };
    check_shapes(&state)?;
    Ok(state)
}

fn check_shapes(s: &ModelState) -> Result<(), CheckpointError> {
    let e = &s.encoder;
    let dims = |t: &Tensor| t.shape().to_vec();
    let h1 = e.w1.shape().get(1).copied().unwrap_or(0);
    let h2 = e.w2.shape().get(1).copied().unwrap_or(0);
    let m = e.w3.shape().get(1).copied().unwrap_or(0);
    let f = s.mobius.m.rows();
    let k = s.head.w.rows();
    let expected = [
        vec![3, h1],
        vec![h1],
        vec![h1, h2],
        vec![h2],
        vec![h2, m],
        vec![m],
        vec![f, m],
        vec![f],
        vec![k, f],
        vec![k],
    ];
    for ((name, t), want) in PARAM_NAMES.iter().zip(s.params()).zip(expected) {
        if dims(t) != want || want.contains(&0) {
            return Err(CheckpointError::Format(format!(
                "`{name}` has shape {:?}, expected {want:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

pub fn save(path: &Path, state: &ModelState) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(state)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load(path: &Path) -> Result<ModelState, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}
