//! Classification maps as binary PPM images.

use std::path::Path;

use crate::error::{Error, Result};
use crate::hsidata::LabelMap;
use crate::io::write_atomic;

pub type Rgb = [u8; 3];

/// Black for unlabeled pixels, then evenly spaced hues.
pub fn default_palette(classes: usize) -> Vec<Rgb> {
    let mut out = vec![[0, 0, 0]];
    for c in 0..classes {
        let h = c as f64 / classes.max(1) as f64 * 6.0;
        let x = 1.0 - (h % 2.0 - 1.0).abs();
        let (r, g, b) = match h as usize {
            0 => (1.0, x, 0.0),
            1 => (x, 1.0, 0.0),
            2 => (0.0, 1.0, x),
            3 => (0.0, x, 1.0),
            4 => (x, 0.0, 1.0),
            _ => (1.0, 0.0, x),
        };
        let q = |v: f64| (v * 255.0).round() as u8;
        out.push([q(r), q(g), q(b)]);
    }
    out
}

/// PPM bytes for `preds`, one per labeled position of `mask` in row-major
/// order; unlabeled positions get `palette[0]`.
pub fn map_bytes(preds: &[usize], mask: &LabelMap, palette: &[Rgb]) -> Result<Vec<u8>> {
    let labeled = mask.labels.iter().filter(|&&l| l != 0).count();
    if preds.len() != labeled {
        return Err(Error::shape(format!("{} predictions for {labeled} labeled pixels", preds.len())));
    }
    let top = preds.iter().copied().max().unwrap_or(0);
    if palette.len() <= top || palette.is_empty() {
        return Err(Error::Contract(format!(
            "palette has {} colors, class {top} needs {}",
            palette.len(),
            top + 1
        )));
    }
    let header = format!("P6\n{} {}\n255\n", mask.width, mask.height);
    let mut out = Vec::with_capacity(header.len() + 3 * mask.labels.len());
    out.extend_from_slice(header.as_bytes());
    let mut next = preds.iter();
    for &l in &mask.labels {
        let c = if l == 0 { 0 } else { *next.next().expect("counted above") };
        out.extend_from_slice(&palette[c]);
    }
    Ok(out)
}

pub fn render_map(preds: &[usize], mask: &LabelMap, palette: &[Rgb], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &map_bytes(preds, mask, palette)?)
}
