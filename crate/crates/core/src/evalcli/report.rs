//! Run reports: UTF-8 JSON with the fixed top-level keys `config`,
//! `history`, `confusion`, `metrics` and `theory`. Every float is written
//! with 17 significant digits so it reads back bit for bit.

use std::io;
use std::path::Path;

use serde::ser::Serialize;
use serde::Deserialize;
use serde_json::ser::{Formatter, PrettyFormatter};

use super::config::RunConfig;
use super::metrics::{ConfusionMatrix, MetricsReport};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::theorylab::{BoundProbeReport, DisentangleReport, EntropyReport};
use crate::trainpipe::EpochStats;

/// Outcome of the Theorem 1 check over many batches.
#[derive(Clone, Debug, PartialEq, serde::Serialize, Deserialize)]
pub struct Theorem1Summary {
    /// Sign the suppression term enters the loss with.
    pub supp_sign: f64,
    pub confidence: f64,
    /// Samples meeting the confidence threshold, out of `pool`.
    pub confident_samples: usize,
    pub pool: usize,
    pub batches: usize,
    pub batch_size: usize,
    /// Batches with `⟨g₁, g₁ − s·g₂⟩ ≥ 0`.
    pub nonnegative: usize,
    /// `None` when no batch was drawn.
    pub min_total: Option<f64>,
    pub max_total: Option<f64>,
    /// Saturated samples left out, summed over batches.
    pub excluded: usize,
    /// One-layer construction: autodiff against the closed form.
    pub one_layer_autodiff: f64,
    pub one_layer_closed_form: f64,
}

#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, Deserialize)]
pub struct TheoryReport {
    pub theorem1: Option<Theorem1Summary>,
    pub entropy: Option<EntropyReport>,
    pub bound: Option<BoundProbeReport>,
    pub disentangle: Option<DisentangleReport>,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub history: Vec<EpochStats>,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsReport,
    pub theory: Option<TheoryReport>,
}

/// Pretty JSON whose floats carry 17 significant digits.
struct Digits17(PrettyFormatter<'static>);

impl Formatter for Digits17 {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, v: f64) -> io::Result<()> {
        w.write_all(format_f64(v).as_bytes())
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, v: f32) -> io::Result<()> {
        w.write_all(format_f64(v as f64).as_bytes())
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }

    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }

    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }

    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }

    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }

    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Positional notation for moderate magnitudes, scientific otherwise;
/// always 17 significant digits and always a JSON float literal.
/// Non-finite values have no JSON form and are written as `null`.
pub fn format_f64(v: f64) -> String {
    if !v.is_finite() {
        return "null".into();
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0.0".into() } else { "0.0".into() };
    }
    let sci = format!("{v:.16e}");
    let exp: i32 = sci[sci.find('e').expect("exponent") + 1..].parse().expect("integer exponent");
    if (-5..16).contains(&exp) {
        let decimals = (16 - exp) as usize;
        format!("{v:.decimals$}")
    } else {
        sci
    }
}

/// Serializes any value with the report's number format.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, Digits17(PrettyFormatter::new()));
    value
        .serialize(&mut ser)
        .map_err(|e| Error::Data(format!("cannot serialize report: {e}")))?;
    out.push(b'\n');
    Ok(String::from_utf8(out).expect("serde_json writes UTF-8"))
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        to_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format {
            offset: 0,
            msg: format!("report JSON at line {} column {}: {e}", e.line(), e.column()),
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json()?.as_bytes())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
