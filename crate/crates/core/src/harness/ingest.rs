//! CSV input: header `y,x,z1,...,zp`, one observation per row.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IngestError {
    #[error("parse error at line {line}, column {column}: {message}")]
    ParseError { line: u64, column: usize, message: String },
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("non-numeric cell at line {line}, column {column}: {value:?}")]
    NonNumericCell { line: u64, column: usize, value: String },
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

/// Observations in the orientation the estimators use.
#[derive(Debug, Clone, PartialEq)]
pub struct IvData {
    pub y: DVector<f64>,
    pub x: DVector<f64>,
    /// `p × n`.
    pub z: DMatrix<f64>,
    pub instrument_names: Vec<String>,
}

impl IvData {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.z.nrows()
    }
}

pub fn ingest_csv(path: &Path) -> Result<IvData, IngestError> {
    let bytes = std::fs::read(path).map_err(|e| IngestError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_csv(&bytes)
}

/// Parse CSV bytes. `y` and `x` are located by name; every other column is
/// an instrument, kept in file order.
pub fn parse_csv(bytes: &[u8]) -> Result<IvData, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| csv_error(e, 1))?
        .iter()
        .map(str::to_owned)
        .collect::<Vec<_>>();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IngestError::MissingColumn(name.to_owned()))
    };
    let iy = find("y")?;
    let ix = find("x")?;
    let instruments: Vec<usize> = (0..headers.len()).filter(|&c| c != iy && c != ix).collect();
    if instruments.is_empty() {
        return Err(IngestError::MissingColumn("z1".into()));
    }

    let width = headers.len();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(e, rows.len() as u64 + 2))?;
        let line = record.position().map_or(rows.len() as u64 + 2, |p| p.line());
        if record.len() != width {
            return Err(IngestError::ParseError {
                line,
                column: record.len().min(width) + 1,
                message: format!("expected {width} fields, found {}", record.len()),
            });
        }
        let mut row = Vec::with_capacity(width);
        for (c, cell) in record.iter().enumerate() {
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => row.push(v),
                _ => {
                    return Err(IngestError::NonNumericCell {
                        line,
                        column: c + 1,
                        value: cell.to_owned(),
                    })
                }
            }
        }
        rows.push(row);
    }
    let n = rows.len();
    if n < 2 {
        return Err(IngestError::Invalid(format!("need at least 2 data rows, found {n}")));
    }
    Ok(IvData {
        y: DVector::from_fn(n, |i, _| rows[i][iy]),
        x: DVector::from_fn(n, |i, _| rows[i][ix]),
        z: DMatrix::from_fn(instruments.len(), n, |j, i| rows[i][instruments[j]]),
        instrument_names: instruments.iter().map(|&c| headers[c].clone()).collect(),
    })
}

fn csv_error(e: csv::Error, fallback_line: u64) -> IngestError {
    let line = e.position().map_or(fallback_line, |p| p.line());
    IngestError::ParseError {
        line,
        column: 1,
        message: e.to_string(),
    }
}

/// Render a data set in the input format. Values use the shortest decimal
/// form that parses back to the same `f64`.
pub fn fixture_csv_string(y: &DVector<f64>, x: &DVector<f64>, z: &DMatrix<f64>) -> Result<String, IngestError> {
    let n = y.len();
    if x.len() != n || z.ncols() != n {
        return Err(IngestError::Invalid(format!(
            "column lengths disagree: y {n}, x {}, z {}",
            x.len(),
            z.ncols()
        )));
    }
    let mut out = String::from("y,x");
    for j in 1..=z.nrows() {
        out.push_str(&format!(",z{j}"));
    }
    out.push('\n');
    for i in 0..n {
        out.push_str(&format!("{},{}", y[i], x[i]));
        for j in 0..z.nrows() {
            out.push_str(&format!(",{}", z[(j, i)]));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_fixture_csv(path: &Path, y: &DVector<f64>, x: &DVector<f64>, z: &DMatrix<f64>) -> Result<(), IngestError> {
    let text = fixture_csv_string(y, x, z)?;
    std::fs::write(path, text).map_err(|e| IngestError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}
