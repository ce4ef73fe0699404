//! Tables, JSON documents and model files.
//!
//! Every table starts with a `#` comment line carrying the provenance of
//! the run that wrote it.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use collogp::kernel::PointSet;
use serde::{Deserialize, Serialize};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Who wrote a file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
}

impl Provenance {
    pub fn new(seed: u64, config_hash: String) -> Self {
        Provenance {
            seed,
            config_hash,
            version: VERSION.to_string(),
        }
    }

    fn comment(&self, extra: &[(&str, String)]) -> String {
        let mut s = format!(
            "# collogp config_hash={} seed={} version={}",
            self.config_hash, self.seed, self.version
        );
        for (k, v) in extra {
            let _ = write!(s, " {k}={v}");
        }
        s
    }
}

/// A numeric table with named columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub provenance: Option<Provenance>,
    /// Extra `key=value` pairs of the provenance line.
    pub meta: Vec<(String, String)>,
}

impl Table {
    pub fn new(header: Vec<String>) -> Self {
        Table {
            header,
            rows: Vec::new(),
            provenance: None,
            meta: Vec::new(),
        }
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Leading `x0, x1, …` columns as points.
    pub fn inputs(&self) -> Result<PointSet> {
        let d = self.header.iter().take_while(|h| is_input_column(h)).count();
        if d == 0 {
            bail!("table has no input columns (expected x0, x1, ...)");
        }
        let data = self.rows.iter().flat_map(|r| r[..d].iter().copied()).collect();
        Ok(PointSet::new(d, data)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        if let Some(p) = &self.provenance {
            let extra: Vec<(&str, String)> = self.meta.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
            writeln!(out, "{}", p.comment(&extra))?;
        }
        {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(&self.header)?;
            for row in &self.rows {
                w.write_record(row.iter().map(|v| format_float(*v)))?;
            }
            w.flush()?;
        }
        fs::write(path, out).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Table> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Table> {
        let (provenance, meta) = match text.lines().next() {
            Some(first) if first.starts_with('#') => parse_comment(first),
            _ => (None, Vec::new()),
        };
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|v| v.parse::<f64>().map_err(|e| anyhow!("row {}: `{v}`: {e}", i + 1)))
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Ok(Table {
            header,
            rows,
            provenance,
            meta,
        })
    }
}

fn is_input_column(h: &str) -> bool {
    h.strip_prefix('x').is_some_and(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
}

fn parse_comment(line: &str) -> (Option<Provenance>, Vec<(String, String)>) {
    let mut fields: Vec<(String, String)> = line
        .trim_start_matches('#')
        .split_whitespace()
        .filter_map(|w| w.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let mut take = |key: &str| {
        let i = fields.iter().position(|(k, _)| k == key)?;
        Some(fields.remove(i).1)
    };
    let prov = match (take("config_hash"), take("seed"), take("version")) {
        (Some(h), Some(s), Some(v)) => s.parse().ok().map(|seed| Provenance {
            seed,
            config_hash: h,
            version: v,
        }),
        _ => None,
    };
    (prov, fields)
}

/// Shortest representation that reads back to the same value.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}

/// Input columns `x0..` followed by `extra`.
pub fn points_header(d: usize, extra: &[&str]) -> Vec<String> {
    (0..d).map(|k| format!("x{k}")).chain(extra.iter().map(|s| s.to_string())).collect()
}

/// A table of points and per-point values.
pub fn points_table(points: &PointSet, columns: &[(&str, &[f64])]) -> Table {
    let names: Vec<&str> = columns.iter().map(|(n, _)| *n).collect();
    let mut t = Table::new(points_header(points.dim(), &names));
    for (i, z) in points.iter().enumerate() {
        let mut row = z.to_vec();
        row.extend(columns.iter().map(|(_, v)| v[i]));
        t.rows.push(row);
    }
    t
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

const MODEL_MAGIC: &[u8; 8] = b"COLLOGPM";
/// Bumped whenever the payload layout changes.
pub const MODEL_FORMAT: u32 = 1;

/// Versioned model snapshot: magic, format number, then the payload.
pub fn write_model<T: Serialize>(path: &Path, payload: &T) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_FORMAT.to_le_bytes());
    out.extend_from_slice(&serde_json::to_vec(payload)?);
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn read_model<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.len() < 12 || &bytes[..8] != MODEL_MAGIC {
        bail!("{} is not a model file", path.display());
    }
    let format = u32::from_le_bytes(bytes[8..12].try_into().expect("four bytes"));
    if format != MODEL_FORMAT {
        bail!(
            "{} has model format {format}; this build reads format {MODEL_FORMAT}",
            path.display()
        );
    }
    serde_json::from_slice(&bytes[12..]).with_context(|| format!("decoding {}", path.display()))
}
