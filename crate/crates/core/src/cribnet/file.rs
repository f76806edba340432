//! Model files: magic `C3DG`, `u32` version, `u32` section count, then per
//! section a `u16` name length, the UTF-8 name, a `u32` rank, `rank` `u32`
//! dimensions and the `f64` values, all little-endian. The first section,
//! `meta`, holds `[bands, classes, domains, mode]`; the rest are the
//! parameters in registration order.

use std::path::Path;

use super::{ContextMode, CribModel, ModelDims};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::numcore::Array;

pub const MODEL_MAGIC: &[u8; 4] = b"C3DG";
pub const MODEL_VERSION: u32 = 1;
const META: &str = "meta";

fn put_section(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl CribModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.store.len() as u32 + 1).to_le_bytes());
        let meta = [
            self.dims.bands as f64,
            self.dims.classes as f64,
            self.dims.domains as f64,
            f64::from(self.mode.code()),
        ];
        put_section(&mut out, META, &[4], &meta);
        for (_, p) in self.store.iter() {
            put_section(&mut out, &p.name, p.value.shape(), p.value.data());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MODEL_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "not a model file (bad magic)".into(),
            });
        }
        let at = r.pos;
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(r.err_at(at, format!("unsupported model version {version}")));
        }
        let count = r.u32()? as usize;
        if count == 0 {
            return Err(r.err_at(8, "model file has no sections".into()));
        }
        let meta_at = r.pos;
        let (name, meta) = r.section()?;
        if name != META || meta.shape() != [4] {
            return Err(r.err_at(meta_at, "first section must be meta[4]".into()));
        }
        let m = meta.data();
        let as_count = |v: f64| -> Option<usize> { (v >= 0.0 && v.fract() == 0.0 && v < 1e9).then_some(v as usize) };
        let (Some(bands), Some(classes), Some(domains), Some(code)) =
            (as_count(m[0]), as_count(m[1]), as_count(m[2]), as_count(m[3]))
        else {
            return Err(r.err_at(meta_at, format!("malformed meta values {m:?}")));
        };
        let mode = ContextMode::from_code(code as u32)
            .ok_or_else(|| r.err_at(meta_at, format!("unknown mode code {code}")))?;
        let dims = ModelDims {
            bands,
            classes,
            domains,
        };
        let mut model = CribModel::new(dims, mode, 0).map_err(|e| r.err_at(meta_at, e.to_string()))?;
        if count != model.store.len() + 1 {
            return Err(r.err_at(
                8,
                format!("{} sections, {mode} model with these dims needs {}", count, model.store.len() + 1),
            ));
        }
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let at = r.pos;
            let (name, value) = r.section()?;
            let expected = model.store.name(id);
            if name != expected || value.shape() != model.store.get(id).shape() {
                return Err(r.err_at(
                    at,
                    format!(
                        "section {name} {:?} where {expected} {:?} was expected",
                        value.shape(),
                        model.store.get(id).shape()
                    ),
                ));
            }
            *model.store.get_mut(id) = value;
        }
        if r.pos != bytes.len() {
            return Err(r.err_at(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(model)
    }
}

pub fn write_model(model: &CribModel, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &model.to_bytes())
}

pub fn read_model(path: impl AsRef<Path>) -> Result<CribModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    CribModel::from_bytes(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn err_at(&self, offset: usize, msg: String) -> Error {
        Error::Format {
            offset: offset as u64,
            msg,
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            self.err_at(self.bytes.len(), format!("truncated: needed {n} bytes at {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn section(&mut self) -> Result<(String, Array)> {
        let at = self.pos;
        let len = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = match std::str::from_utf8(self.take(len)?) {
            Ok(n) => n.to_owned(),
            Err(_) => return Err(self.err_at(at, "section name is not UTF-8".into())),
        };
        let rank = self.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(self.err_at(at, format!("section {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&c| c > 0)
            .ok_or_else(|| self.err_at(at, format!("section {name} has bad shape {shape:?}")))?;
        let raw = self.take(count.checked_mul(8).unwrap_or(usize::MAX))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let value = Array::new(shape, data).map_err(|e| self.err_at(at, e.to_string()))?;
        Ok((name, value))
    }
}
