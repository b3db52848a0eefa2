//! Binary checkpoint container.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! magic "ATXCKPT\0" | version | header length | TOML header
//! | array count | { name length | name | rank | dims.. | f32 values.. }*
//! ```
//!
//! Running batch-norm statistics are stored as `<norm>.running_mean` and
//! `<norm>.running_var` arrays next to the parameters.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_densenet_scaled, ArchConfig, Model};
use crate::error::{Error, Result};
use crate::tensor::Element;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"ATXCKPT\0";

/// Checkpoint header metadata.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    epoch: usize,
    #[serde(default)]
    metrics: BTreeMap<String, f64>,
    arch: ArchConfig,
}

struct Array {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn ckpt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), msg: msg.into() }
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("value {v} does not fit a u32 field")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(ckpt_err(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

impl<T: Element> Model<T> {
    fn arrays(&self) -> Vec<Array> {
        let f32s = |v: &[T]| v.iter().map(|x| x.as_f64() as f32).collect::<Vec<_>>();
        let mut out: Vec<Array> = self
            .params
            .iter()
            .map(|p| Array { name: p.name.clone(), shape: p.value.shape().to_vec(), data: f32s(p.value.data()) })
            .collect();
        for s in &self.stats {
            out.push(Array { name: format!("{}.running_mean", s.name), shape: vec![s.mean.len()], data: f32s(&s.mean) });
            out.push(Array { name: format!("{}.running_var", s.name), shape: vec![s.var.len()], data: f32s(&s.var) });
        }
        out
    }

    /// Writes a checkpoint atomically (temporary file, then rename).
    pub fn save_checkpoint(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            epoch: meta.epoch,
            metrics: meta.metrics.clone(),
            arch: self.config.clone(),
        };
        let text = toml::to_string(&header).map_err(|e| ckpt_err(path, e.to_string()))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, CHECKPOINT_VERSION as usize)?;
        put_u32(&mut buf, text.len())?;
        buf.extend_from_slice(text.as_bytes());
        let arrays = self.arrays();
        put_u32(&mut buf, arrays.len())?;
        for a in &arrays {
            put_u32(&mut buf, a.name.len())?;
            buf.extend_from_slice(a.name.as_bytes());
            put_u32(&mut buf, a.shape.len())?;
            for &d in &a.shape {
                put_u32(&mut buf, d)?;
            }
            for v in &a.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }

        let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let file_name = path.file_name().ok_or_else(|| ckpt_err(path, "no file name"))?;
        let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Rebuilds a model from the architecture recorded in a checkpoint.
    pub fn from_checkpoint(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let (header, arrays) = read(path)?;
        let mut model = build_densenet_scaled(&header.arch, 0)?;
        model.assign(path, arrays)?;
        Ok((model, CheckpointMeta { epoch: header.epoch, metrics: header.metrics }))
    }

    /// Loads weights into this model. The recorded architecture must equal
    /// this model's exactly.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<CheckpointMeta> {
        let (header, arrays) = read(path)?;
        if header.arch != self.config {
            return Err(ckpt_err(
                path,
                format!("architecture mismatch: checkpoint has {:?}, model has {:?}", header.arch, self.config),
            ));
        }
        self.assign(path, arrays)?;
        Ok(CheckpointMeta { epoch: header.epoch, metrics: header.metrics })
    }

    fn assign(&mut self, path: &Path, arrays: Vec<Array>) -> Result<()> {
        let mut by_name: BTreeMap<String, Array> = BTreeMap::new();
        for a in arrays {
            if by_name.contains_key(&a.name) {
                return Err(ckpt_err(path, format!("duplicate array {:?}", a.name)));
            }
            by_name.insert(a.name.clone(), a);
        }
        let mut take = |name: &str, shape: &[usize]| -> Result<Vec<T>> {
            let a = by_name.remove(name).ok_or_else(|| ckpt_err(path, format!("missing array {name:?}")))?;
            if a.shape != shape {
                return Err(ckpt_err(path, format!("array {name:?} has shape {:?}, expected {shape:?}", a.shape)));
            }
            Ok(a.data.iter().map(|&v| T::from_f64(v as f64)).collect())
        };
        let mut staged = Vec::with_capacity(self.params.len());
        for p in &self.params {
            staged.push(take(&p.name, p.value.shape())?);
        }
        let mut staged_stats = Vec::with_capacity(self.stats.len());
        for s in &self.stats {
            let c = s.mean.len();
            staged_stats.push((take(&format!("{}.running_mean", s.name), &[c])?, take(&format!("{}.running_var", s.name), &[c])?));
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(ckpt_err(path, format!("unexpected array {extra:?}")));
        }
        for (p, data) in self.params.iter_mut().zip(staged) {
            p.value.data_mut().copy_from_slice(&data);
            p.value.zero_grad();
        }
        for (s, (m, v)) in self.stats.iter_mut().zip(staged_stats) {
            s.mean = m;
            s.var = v;
        }
        Ok(())
    }
}

fn read(path: &Path) -> Result<(Header, Vec<Array>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(8)? != MAGIC {
        return Err(ckpt_err(path, "not a checkpoint file (bad magic)"));
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(ckpt_err(path, format!("unsupported format version {version} (expected {CHECKPOINT_VERSION})")));
    }
    let len = r.u32()?;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| ckpt_err(path, "header is not UTF-8"))?;
    let header: Header = toml::from_str(text).map_err(|e| ckpt_err(path, format!("bad header: {e}")))?;
    if header.format_version != version {
        return Err(ckpt_err(path, "header version disagrees with container version"));
    }
    let count = r.u32()?;
    let mut arrays = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u32()?;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| ckpt_err(path, "array name is not UTF-8"))?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| ckpt_err(path, "array too large"))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        arrays.push(Array { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(ckpt_err(path, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((header, arrays))
}
