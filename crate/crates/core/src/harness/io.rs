//! Plain-text output: CSV tables, field dumps with JSON sidecars, JSON files.
//!
//! Floats are written in Rust's shortest round-trip form, so every value
//! parses back to the identical `f64`. Missing values are empty cells.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn fmt_cell(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, format!("{other:?}")),
    }
}

/// Writes a header and rows of optional numbers.
pub fn write_table<I>(path: &Path, header: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<Option<f64>>>,
{
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::Domain(format!(
                "row of {} values for {} columns in {}",
                row.len(),
                header.len(),
                path.display()
            )));
        }
        w.write_record(row.iter().map(|v| fmt_cell(*v)))
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `t,<prefix>_0,...` rows.
pub fn write_state_csv<I>(path: &Path, prefix: &str, dim: usize, rows: I) -> Result<()>
where
    I: IntoIterator<Item = (f64, Vec<f64>)>,
{
    let header = state_header(&[prefix], dim);
    write_table(
        path,
        &header,
        rows.into_iter().map(|(t, x)| {
            let mut row = Vec::with_capacity(dim + 1);
            row.push(Some(t));
            row.extend(x.into_iter().map(Some));
            row
        }),
    )
}

/// `t` followed by `<prefix>_i` for every prefix and `i < dim`.
pub fn state_header(prefixes: &[&str], dim: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    for p in prefixes {
        h.extend((0..dim).map(|i| format!("{p}_{i}")));
    }
    h
}

/// Parsed CSV with optional cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<Vec<Option<f64>>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    /// All cells, failing on any missing value.
    pub fn dense(&self, path: &Path) -> Result<Vec<Vec<f64>>> {
        self.rows
            .iter()
            .enumerate()
            .map(|(r, row)| {
                row.iter()
                    .map(|v| v.ok_or_else(|| Error::parse(path, format!("missing value in row {}", r + 1))))
                    .collect()
            })
            .collect()
    }
}

pub fn read_table(path: &Path) -> Result<Table> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = rec
            .iter()
            .map(|cell| {
                if cell.is_empty() {
                    Ok(None)
                } else {
                    cell.parse::<f64>()
                        .map(Some)
                        .map_err(|_| Error::parse(path, format!("row {}: bad number {cell:?}", n + 1)))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(Table { header, rows })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

/// Sidecar describing a field dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldMeta {
    pub t: f64,
    pub nx: usize,
    pub ny: usize,
    pub quantity: String,
}

/// Writes `<dir>/<stem>.csv` (one value per line, row-major) and
/// `<dir>/<stem>.json`.
pub fn write_field(dir: &Path, stem: &str, meta: &FieldMeta, values: &[f64]) -> Result<PathBuf> {
    if values.len() != meta.nx * meta.ny {
        return Err(Error::Domain(format!(
            "field has {} values, expected {}×{}",
            values.len(),
            meta.nx,
            meta.ny
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("{stem}.csv"));
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for v in values {
        writeln!(w, "{}", fmt_f64(*v)).map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_json(&dir.join(format!("{stem}.json")), meta)?;
    Ok(path)
}

pub fn read_field(dir: &Path, stem: &str) -> Result<(FieldMeta, Vec<f64>)> {
    let meta: FieldMeta = read_json(&dir.join(format!("{stem}.json")))?;
    let path = dir.join(format!("{stem}.csv"));
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let values = text
        .lines()
        .map(|l| l.parse::<f64>().map_err(|_| Error::parse(&path, format!("bad number {l:?}"))))
        .collect::<Result<Vec<_>>>()?;
    if values.len() != meta.nx * meta.ny {
        return Err(Error::parse(&path, "value count does not match the sidecar"));
    }
    Ok((meta, values))
}

/// Line-oriented JSON writer.
pub struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLines {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let line = serde_json::to_string(value).map_err(|e| Error::parse(&self.path, e.to_string()))?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}
