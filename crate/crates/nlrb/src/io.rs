//! On-disk formats: numeric CSV with JSON sidecars, stage manifests and
//! result tables.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use nlrb_core::linalg::Matrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Header of every results table.
pub const RESULTS_HEADER: [&str; 6] = ["method", "r", "mu1", "mu2", "rel_error", "wall_time_s"];

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:e}")
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|_| CliError::Missing(path.to_path_buf()))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

/// Describes a numeric CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub rows: usize,
    pub cols: usize,
    pub description: String,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

pub fn sidecar_path(csv: &Path) -> PathBuf {
    let mut p = csv.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

/// Writes `m` one row per line and a `.json` sidecar next to it.
pub fn write_matrix(path: &Path, m: &Matrix, description: &str, hash: &str, extra: serde_json::Value) -> Result<(), CliError> {
    let mut text = String::with_capacity(m.rows() * m.cols() * 24);
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|&v| fmt_f64(v)).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    write_text(path, &text)?;
    write_json(
        &sidecar_path(path),
        &Sidecar {
            rows: m.rows(),
            cols: m.cols(),
            description: description.into(),
            config_hash: hash.into(),
            extra,
        },
    )
}

pub fn write_vector(path: &Path, v: &[f64], description: &str, hash: &str, extra: serde_json::Value) -> Result<(), CliError> {
    let m = Matrix::from_row_major(v.len(), 1, v.to_vec()).map_err(CliError::Core)?;
    write_matrix(path, &m, description, hash, extra)
}

/// Reads a matrix and checks its sidecar's shape and, if given, its hash.
pub fn read_matrix(path: &Path, expected_hash: Option<&str>) -> Result<(Matrix, Sidecar), CliError> {
    let side: Sidecar = read_json(&sidecar_path(path))?;
    if let Some(h) = expected_hash {
        if side.config_hash != h {
            return Err(CliError::Stale {
                path: path.to_path_buf(),
                found: side.config_hash,
                expected: h.into(),
            });
        }
    }
    let file = fs::File::open(path).map_err(|_| CliError::Missing(path.to_path_buf()))?;
    let mut data = Vec::with_capacity(side.rows * side.cols);
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(file);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        for field in rec.iter() {
            data.push(field.trim().parse::<f64>().map_err(|e| io_err(path, e))?);
        }
    }
    if data.len() != side.rows * side.cols {
        return Err(io_err(path, format!("expected {}x{} values, found {}", side.rows, side.cols, data.len())));
    }
    let m = Matrix::from_row_major(side.rows, side.cols, data).map_err(CliError::Core)?;
    Ok((m, side))
}

pub fn read_vector(path: &Path, expected_hash: Option<&str>) -> Result<(Vec<f64>, Sidecar), CliError> {
    let (m, side) = read_matrix(path, expected_hash)?;
    Ok((m.as_slice().to_vec(), side))
}

/// Per-stage record of what was produced and from which configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub config_hash: String,
    pub upstream_hash: String,
    pub files: Vec<String>,
    #[serde(default)]
    pub info: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: String,
    pub r: usize,
    pub mu: [f64; 2],
    pub rel_error: f64,
    pub wall_time_s: f64,
}

/// Results table with a leading `# config_hash=<hash>` comment line.
pub fn write_results(path: &Path, hash: &str, rows: &[ResultRow]) -> Result<(), CliError> {
    let mut buf = Vec::new();
    writeln!(buf, "# config_hash={hash}").expect("write to memory");
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(RESULTS_HEADER).map_err(|e| io_err(path, e))?;
        for row in rows {
            w.write_record([
                row.method.clone(),
                row.r.to_string(),
                fmt_f64(row.mu[0]),
                fmt_f64(row.mu[1]),
                fmt_f64(row.rel_error),
                fmt_f64(row.wall_time_s),
            ])
            .map_err(|e| io_err(path, e))?;
        }
        w.flush().map_err(|e| io_err(path, e))?;
    }
    write_text(path, &String::from_utf8(buf).expect("csv output is UTF-8"))
}

pub fn read_results(path: &Path) -> Result<(String, Vec<ResultRow>), CliError> {
    let file = fs::File::open(path).map_err(|_| CliError::Missing(path.to_path_buf()))?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first).map_err(|e| io_err(path, e))?;
    let hash = first
        .trim()
        .strip_prefix("# config_hash=")
        .ok_or_else(|| io_err(path, "missing '# config_hash=' line"))?
        .to_string();
    let mut rdr = csv::Reader::from_reader(reader);
    let header = rdr.headers().map_err(|e| io_err(path, e))?.clone();
    if header.iter().ne(RESULTS_HEADER) {
        return Err(io_err(path, format!("expected columns {}", RESULTS_HEADER.join(","))));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let num = |i: usize| rec[i].parse::<f64>().map_err(|e| io_err(path, e));
        rows.push(ResultRow {
            method: rec[0].to_string(),
            r: rec[1].parse().map_err(|e| io_err(path, e))?,
            mu: [num(2)?, num(3)?],
            rel_error: num(4)?,
            wall_time_s: num(5)?,
        });
    }
    Ok((hash, rows))
}
