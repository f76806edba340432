//! HSIC cube and HSIL label files.
//!
//! Both start with a four-byte ASCII magic and a little-endian `u32`
//! version (currently 1), followed by little-endian `u32` dimensions.
//! Cubes then hold `H·W·B` IEEE-754 `f32` values with the band index
//! fastest; label maps hold `H·W` `u16` labels, 0 meaning unlabeled.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const CUBE_MAGIC: &[u8; 4] = b"HSIC";
pub const LABEL_MAGIC: &[u8; 4] = b"HSIL";
pub const FORMAT_VERSION: u32 = 1;
pub const CUBE_HEADER_LEN: usize = 20;
pub const LABEL_HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// `(h, w, b)` nesting, band fastest.
    pub data: Vec<f64>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::shape(format!("cube dimensions {height}x{width}x{bands}")));
        }
        if data.len() != height * width * bands {
            return Err(Error::shape(format!(
                "cube {height}x{width}x{bands} needs {} values, got {}",
                height * width * bands,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("cube contains non-finite values".into()));
        }
        Ok(Self {
            height,
            width,
            bands,
            data,
        })
    }

    pub fn pixel(&self, h: usize, w: usize) -> &[f64] {
        let start = (h * self.width + w) * self.bands;
        &self.data[start..start + self.bands]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CUBE_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(CUBE_MAGIC);
        for v in [FORMAT_VERSION, self.height as u32, self.width as u32, self.bands as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CUBE_MAGIC)?;
        r.version()?;
        let dims_at = r.pos;
        let (h, w, b) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        if h == 0 || w == 0 || b == 0 {
            return Err(format_err(dims_at, format!("zero dimension in {h}x{w}x{b}")));
        }
        let count = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(b))
            .ok_or_else(|| format_err(dims_at, "dimensions overflow".into()))?;
        r.expect_remaining(count.saturating_mul(4))?;
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let at = r.pos;
            let v = f32::from_le_bytes(r.take::<4>()?);
            if !v.is_finite() {
                return Err(format_err(at, format!("non-finite value {v}")));
            }
            data.push(f64::from(v));
        }
        Ok(Self {
            height: h,
            width: w,
            bands: b,
            data,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    /// Row-major, 0 = unlabeled.
    pub labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::shape(format!(
                "label map {height}x{width} with {} labels",
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn get(&self, h: usize, w: usize) -> u16 {
        self.labels[h * self.width + w]
    }

    /// Largest label present.
    pub fn max_label(&self) -> u16 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(LABEL_HEADER_LEN + 2 * self.labels.len());
        out.extend_from_slice(LABEL_MAGIC);
        for v in [FORMAT_VERSION, self.height as u32, self.width as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(LABEL_MAGIC)?;
        r.version()?;
        let dims_at = r.pos;
        let (h, w) = (r.u32()? as usize, r.u32()? as usize);
        if h == 0 || w == 0 {
            return Err(format_err(dims_at, format!("zero dimension in {h}x{w}")));
        }
        let count = h
            .checked_mul(w)
            .ok_or_else(|| format_err(dims_at, "dimensions overflow".into()))?;
        r.expect_remaining(count.saturating_mul(2))?;
        let labels = (0..count)
            .map(|_| r.take::<2>().map(u16::from_le_bytes))
            .collect::<Result<_>>()?;
        Ok(Self {
            height: h,
            width: w,
            labels,
        })
    }
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<HsiCube> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    HsiCube::from_bytes(&bytes)
}

pub fn write_cube(cube: &HsiCube, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &cube.to_bytes())
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    LabelMap::from_bytes(&bytes)
}

pub fn write_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &labels.to_bytes())
}

fn format_err(offset: usize, msg: String) -> Error {
    Error::Format {
        offset: offset as u64,
        msg,
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| format_err(self.bytes.len(), format!("truncated: needed {N} bytes at {}", self.pos)))?;
        self.pos = end;
        Ok(chunk.try_into().expect("slice has length N"))
    }

    fn u32(&mut self) -> Result<u32> {
        self.take::<4>().map(u32::from_le_bytes)
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take::<4>()?;
        if &got != want {
            return Err(format_err(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&got),
                    String::from_utf8_lossy(want)
                ),
            ));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let at = self.pos;
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(format_err(at, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn expect_remaining(&self, len: usize) -> Result<()> {
        let have = self.bytes.len() - self.pos;
        if have < len {
            return Err(format_err(
                self.bytes.len(),
                format!("truncated payload: {have} of {len} bytes"),
            ));
        }
        if have > len {
            return Err(format_err(
                self.pos + len,
                format!("{} trailing bytes after payload", have - len),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cube() -> HsiCube {
        let data = (0..12).map(|i| i as f64 * 0.25 - 1.0).collect();
        HsiCube::new(2, 2, 3, data).unwrap()
    }

    #[test]
    fn cube_file_size() {
        assert_eq!(small_cube().to_bytes().len(), 20 + 48);
    }

    #[test]
    fn cube_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.hsic");
        let cube = small_cube();
        write_cube(&cube, &path).unwrap();
        let back = read_cube(&path).unwrap();
        assert_eq!(back, cube);
        assert_eq!(std::fs::read(&path).unwrap(), back.to_bytes());
    }

    #[test]
    fn label_bytes_are_passed_to_cube_reader() {
        let labels = LabelMap::new(1, 2, vec![1, 0]).unwrap();
        match HsiCube::from_bytes(&labels.to_bytes()) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_and_trailing_payloads() {
        let bytes = small_cube().to_bytes();
        match HsiCube::from_bytes(&bytes[..bytes.len() - 1]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 67),
            other => panic!("{other:?}"),
        }
        let mut longer = bytes.clone();
        longer.push(0);
        match HsiCube::from_bytes(&longer) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 68),
            other => panic!("{other:?}"),
        }
        match HsiCube::from_bytes(&bytes[..10]) {
            Err(Error::Format { .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_mismatch() {
        let mut bytes = small_cube().to_bytes();
        bytes[4] = 2;
        match HsiCube::from_bytes(&bytes) {
            Err(Error::Format { offset: 4, msg }) => assert!(msg.contains("version")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn labels_round_trip() {
        let labels = LabelMap::new(2, 3, vec![0, 1, 2, 7, 0, 3]).unwrap();
        let bytes = labels.to_bytes();
        assert_eq!(bytes.len(), 16 + 12);
        assert_eq!(LabelMap::from_bytes(&bytes).unwrap(), labels);
        assert!(matches!(
            LabelMap::from_bytes(&small_cube().to_bytes()),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
