//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LSLC"            magic, 4 bytes
//! version           u32
//! tensor count      u32
//! per tensor:
//!   name length     u16, then UTF-8 name
//!   dtype           u8 (0 = f32, 1 = f64)
//!   rank            u8, then rank x u32 dims
//!   data            row-major little-endian values
//! ```

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::model::{ArchConfig, ClassifierHead, FeatureExtractor, Network};
use super::params::ParamStore;
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"LSLC";
pub const FORMAT_VERSION: u32 = 1;

const META: &str = "meta.arch";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    VersionUnsupported(u32),
    #[error("expected {expected} tensors, found {found}")]
    TensorCountMismatch { expected: usize, found: usize },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("tensor {name}: stored as {found}, requested {expected}")]
    DtypeMismatch { name: String, expected: DType, found: DType },
    #[error("refusing to save non-finite tensor {0}")]
    NonFinite(String),
}

/// An ordered list of named tensors.
pub type NamedTensors<T> = Vec<(String, Tensor<T>)>;

pub fn encode<T: Element>(tensors: &[(String, Tensor<T>)]) -> Result<Vec<u8>, CheckpointError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        if !t.all_finite() {
            return Err(CheckpointError::NonFinite(name.clone()));
        }
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| CheckpointError::Malformed(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(bytes);
        out.push(T::DTYPE.tag());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Malformed(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode<T: Element>(buf: &[u8]) -> Result<NamedTensors<T>, CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionUnsupported(version));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
        let tag = r.u8()?;
        let dtype = DType::from_tag(tag).ok_or_else(|| CheckpointError::Malformed(format!("unknown dtype tag {tag}")))?;
        if dtype != T::DTYPE {
            return Err(CheckpointError::DtypeMismatch { name, expected: T::DTYPE, found: dtype });
        }
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * dtype.size())?;
        let data = raw.chunks_exact(dtype.size()).map(T::read_le).collect();
        let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
        tensors.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(tensors)
}

pub fn save_tensors<T: Element>(tensors: &[(String, Tensor<T>)], path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, encode(tensors)?)?;
    Ok(())
}

pub fn load_tensors<T: Element>(path: &Path) -> Result<NamedTensors<T>, CheckpointError> {
    decode(&fs::read(path)?)
}

fn arch_meta<T: Element>(arch: &ArchConfig, input_hw: (usize, usize)) -> Tensor<T> {
    let mut v = vec![arch.in_channels, arch.stem_channels.unwrap_or(0)];
    v.extend(arch.block_channels);
    v.extend(arch.block_strides);
    v.extend([arch.pool, arch.post_add_relu as usize, input_hw.0, input_hw.1]);
    Tensor::from_vec(v.into_iter().map(|x| T::from_f64_lossy(x as f64)).collect())
}

fn parse_meta<T: Element>(t: &Tensor<T>) -> Result<(ArchConfig, (usize, usize)), CheckpointError> {
    let v: Vec<usize> = t.data().iter().map(|x| x.to_f64_lossy() as usize).collect();
    if v.len() != 14 {
        return Err(CheckpointError::Malformed(format!("{META} has {} entries", v.len())));
    }
    let arch = ArchConfig {
        in_channels: v[0],
        stem_channels: (v[1] > 0).then_some(v[1]),
        block_channels: [v[2], v[3], v[4], v[5]],
        block_strides: [v[6], v[7], v[8], v[9]],
        pool: v[10],
        post_add_relu: v[11] != 0,
    };
    Ok((arch, (v[12], v[13])))
}

fn push_store<T: Element>(out: &mut NamedTensors<T>, prefix: &str, store: &ParamStore<T>) {
    for (name, _, t) in store.iter() {
        out.push((format!("{prefix}.{name}"), t.clone()));
    }
}

fn fill_store<T: Element>(
    store: &mut ParamStore<T>,
    prefix: &str,
    tensors: &mut std::vec::IntoIter<(String, Tensor<T>)>,
) -> Result<(), CheckpointError> {
    for id in store.ids().collect::<Vec<_>>() {
        let expected = format!("{prefix}.{}", store.name(id));
        let (name, t) = tensors.next().ok_or_else(|| CheckpointError::Malformed(format!("missing {expected}")))?;
        if name != expected || t.shape() != store.get(id).shape() {
            return Err(CheckpointError::Malformed(format!(
                "expected {expected} {:?}, found {name} {:?}",
                store.get(id).shape(),
                t.shape()
            )));
        }
        *store.get_mut(id) = t;
    }
    Ok(())
}

/// Saves architecture metadata, every extractor tensor (including batch-norm
/// running statistics) and the head.
pub fn save_network<T: Element>(net: &Network<T>, path: &Path) -> Result<(), CheckpointError> {
    save_tensors(&network_tensors(net), path)
}

pub fn network_tensors<T: Element>(net: &Network<T>) -> NamedTensors<T> {
    let mut out = vec![(META.to_string(), arch_meta(&net.extractor.arch, net.extractor.input_hw))];
    push_store(&mut out, "F", &net.extractor.params);
    push_store(&mut out, "G", &net.head.params);
    out
}

pub fn load_network<T: Element>(path: &Path) -> Result<Network<T>, CheckpointError> {
    network_from_tensors(load_tensors(path)?)
}

pub fn network_from_tensors<T: Element>(tensors: NamedTensors<T>) -> Result<Network<T>, CheckpointError> {
    let found = tensors.len();
    let mut it = tensors.into_iter();
    let (name, meta) = it.next().ok_or(CheckpointError::TensorCountMismatch { expected: 1, found: 0 })?;
    if name != META {
        return Err(CheckpointError::Malformed(format!("first tensor is {name}, expected {META}")));
    }
    let (arch, hw) = parse_meta(&meta)?;
    let mut extractor = FeatureExtractor::new(arch, hw, 0).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    let rest: Vec<_> = it.collect();
    let head_count = 2;
    let expected = 1 + extractor.params.len() + head_count;
    if found != expected {
        return Err(CheckpointError::TensorCountMismatch { expected, found });
    }
    let mut it = rest.into_iter();
    fill_store(&mut extractor.params, "F", &mut it)?;
    let (wn, w) = it.next().expect("counted");
    let (bn, b) = it.next().expect("counted");
    if wn != "G.weight" || bn != "G.bias" {
        return Err(CheckpointError::Malformed(format!("unexpected head tensors {wn}, {bn}")));
    }
    let head = ClassifierHead::from_weights(w, b).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    Network::new(extractor, head).map_err(|e| CheckpointError::Malformed(e.to_string()))
}
