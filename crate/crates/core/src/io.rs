//! File formats and diff-stable JSON output.

use std::io;

use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::error::{Error, Result};
use crate::grid::GridConfig;
use crate::measure::{Atom, AtomicMeasure, MeasurePair};

pub const SPEC_VERSION: &str = "1.0";

/// `{"K": depth, "atoms": [{"k": cell, "mass": m}]}`, atom at `(2k + 1) 2^-(K+1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureFile {
    #[serde(rename = "K")]
    pub k: u32,
    pub atoms: Vec<Atom>,
}

impl MeasureFile {
    pub fn to_measure(&self) -> Result<AtomicMeasure> {
        AtomicMeasure::new(self.k, self.atoms.clone())
    }
}

impl From<&AtomicMeasure> for MeasureFile {
    fn from(m: &AtomicMeasure) -> Self {
        Self { k: m.depth(), atoms: m.atoms().to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairFile {
    pub spec_version: String,
    pub name: String,
    pub grid: GridConfig,
    pub sigma: MeasureFile,
    pub w: MeasureFile,
}

impl PairFile {
    pub fn new(name: impl Into<String>, pair: &MeasurePair) -> Self {
        Self {
            spec_version: SPEC_VERSION.into(),
            name: name.into(),
            grid: pair.cfg,
            sigma: (&pair.sigma).into(),
            w: (&pair.w).into(),
        }
    }

    pub fn to_pair(&self) -> Result<MeasurePair> {
        let sigma = self.sigma.to_measure().map_err(|e| Error::Schema(format!("sigma: {e}")))?;
        let w = self.w.to_measure().map_err(|e| Error::Schema(format!("w: {e}")))?;
        MeasurePair::new(sigma, w, self.grid)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let f: Self = serde_json::from_str(text).map_err(|e| Error::Schema(format!("pair file: {e}")))?;
        if f.spec_version != SPEC_VERSION {
            return Err(Error::Schema(format!(
                "pair file: spec_version {:?}, expected {SPEC_VERSION:?}",
                f.spec_version
            )));
        }
        Ok(f)
    }
}

pub fn parse_measure(text: &str) -> Result<AtomicMeasure> {
    let f: MeasureFile =
        serde_json::from_str(text).map_err(|e| Error::Schema(format!("measure file: {e}")))?;
    f.to_measure()
}

/// Pretty printer that writes every float with 17 significant digits.
struct Stable<'a>(PrettyFormatter<'a>);

impl Formatter for Stable<'_> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, v: f64) -> io::Result<()> {
        write!(w, "{v:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, v: f32) -> io::Result<()> {
        write!(w, "{:.16e}", f64::from(v))
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

pub fn to_stable_json<T: Serialize + ?Sized>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Stable(PrettyFormatter::new()));
    value.serialize(&mut ser).expect("serializing to memory cannot fail");
    buf.push(b'\n');
    String::from_utf8(buf).expect("serde_json writes UTF-8")
}

/// `{"spec_version": ..., "kind": ..., "body": ...}`.
#[derive(Serialize)]
pub struct Versioned<'a, T: Serialize> {
    pub spec_version: &'static str,
    pub kind: &'a str,
    pub body: &'a T,
}

pub fn versioned_json<T: Serialize>(kind: &str, body: &T) -> String {
    to_stable_json(&Versioned { spec_version: SPEC_VERSION, kind, body })
}
