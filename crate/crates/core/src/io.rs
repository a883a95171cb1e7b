//! Result serialization: schema-checked CSV tables and JSON summaries.
//!
//! Every file is deterministic byte for byte: fixed column orders, LF line
//! endings, '.' decimal separator, floats at 17 significant digits (round
//! trip exact for f64). Non-finite values are a hard error, never silently
//! written.

use std::fs::File;
use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::kmc::{DiffusivityEstimate, SpreadPoint, StructureEstimate, VelocityEstimate};

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("row has {got} cells, schema {schema} has {expected} columns")]
    Arity { schema: String, expected: usize, got: usize },
    #[error("non-finite value in column {column}")]
    NonFinite { column: String },
}

/// One table cell. Floats are rendered as `{:.16e}`; everything else in its
/// canonical display form.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    UInt(u64),
    Float(f64),
    Bool(bool),
    Str(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::UInt(v) => v.to_string(),
            Cell::Float(v) => format!("{v:.16e}"),
            Cell::Bool(v) => v.to_string(),
            Cell::Str(v) => v.clone(),
        }
    }
}

/// An ordered-column table with checked rows.
#[derive(Debug, Clone)]
pub struct Table {
    name: String,
    columns: Vec<String>,
    rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Table {
            name: name.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Appends a row, rejecting wrong arity and non-finite floats up front.
    pub fn push(&mut self, row: Vec<Cell>) -> Result<(), IoError> {
        if row.len() != self.columns.len() {
            return Err(IoError::Arity {
                schema: self.name.clone(),
                expected: self.columns.len(),
                got: row.len(),
            });
        }
        for (cell, col) in row.iter().zip(&self.columns) {
            if let Cell::Float(v) = cell {
                if !v.is_finite() {
                    return Err(IoError::NonFinite { column: col.clone() });
                }
            }
        }
        self.rows.push(row);
        Ok(())
    }

    /// RFC 4180 encoding with LF line endings; header always present.
    pub fn to_csv_string(&self) -> Result<String, IoError> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render))?;
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), IoError> {
        let body = self.to_csv_string()?;
        let mut f = File::create(path)?;
        f.write_all(body.as_bytes())?;
        Ok(())
    }
}

/// Pretty JSON plus a trailing newline. `serde_json` cannot represent
/// non-finite numbers, so summaries assembled through `json!` stay clean as
/// long as values pass [`finite`] first.
pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), IoError> {
    let mut body = serde_json::to_string_pretty(value).expect("serializable value");
    body.push('\n');
    let mut f = File::create(path)?;
    f.write_all(body.as_bytes())?;
    Ok(())
}

/// Guards a float on its way into a summary.
pub fn finite(x: f64, what: &str) -> Result<f64, IoError> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(IoError::NonFinite { column: what.to_string() })
    }
}

/// Structure-function table: (t, x..., s_hat, stderr), rows ordered by time
/// then displacement (lexicographic, last axis outer).
pub fn structure_table(est: &StructureEstimate) -> Result<Table, IoError> {
    let geom = est.geometry();
    let d = geom.dimension();
    let [n1, n2] = geom.sides();
    let mut table = if d == 1 {
        Table::new("structure", &["t", "x", "s_hat", "stderr"])
    } else {
        Table::new("structure", &["t", "x1", "x2", "s_hat", "stderr"])
    };
    let lo1 = -(n1 as i64 / 2);
    let lo2 = -(n2 as i64 / 2);
    for (k, &t) in est.times.iter().enumerate() {
        for x2 in lo2..lo2 + n2 as i64 {
            for x1 in lo1..lo1 + n1 as i64 {
                let site = geom.shift(0, [x1, x2]);
                let mut row = vec![Cell::Float(t), Cell::Int(x1)];
                if d == 2 {
                    row.push(Cell::Int(x2));
                }
                row.push(Cell::Float(est.s[k][site]));
                row.push(Cell::Float(est.stderr[k][site]));
                table.push(row)?;
            }
        }
    }
    Ok(table)
}

/// Diffusivity table: (t, i, j, d_hat, stderr) with 1-based axis labels,
/// all components in row-major order (only (1, 1) in one dimension).
pub fn diffusivity_table(
    points: &[DiffusivityEstimate],
    dimension: usize,
) -> Result<Table, IoError> {
    let mut table = Table::new("diffusivity", &["t", "i", "j", "d_hat", "stderr"]);
    for p in points {
        for i in 0..dimension {
            for j in 0..dimension {
                table.push(vec![
                    Cell::Float(p.t),
                    Cell::UInt(i as u64 + 1),
                    Cell::UInt(j as u64 + 1),
                    Cell::Float(p.d[i][j]),
                    Cell::Float(p.stderr[i][j]),
                ])?;
            }
        }
    }
    Ok(table)
}

/// Velocity table: one row per observation time plus a combined row with
/// t = -1 sentinel omitted; the combined estimate lives in the JSON summary.
pub fn velocity_table(est: &VelocityEstimate, dimension: usize) -> Result<Table, IoError> {
    let mut table = if dimension == 1 {
        Table::new("velocity", &["t", "v", "stderr"])
    } else {
        Table::new("velocity", &["t", "v1", "v2", "stderr1", "stderr2"])
    };
    for p in &est.per_time {
        let row = if dimension == 1 {
            vec![Cell::Float(p.t), Cell::Float(p.v[0]), Cell::Float(p.stderr[0])]
        } else {
            vec![
                Cell::Float(p.t),
                Cell::Float(p.v[0]),
                Cell::Float(p.v[1]),
                Cell::Float(p.stderr[0]),
                Cell::Float(p.stderr[1]),
            ]
        };
        table.push(row)?;
    }
    Ok(table)
}

/// Current-spread table: (t, spread, stderr).
pub fn spread_table(points: &[SpreadPoint]) -> Result<Table, IoError> {
    let mut table = Table::new("spread", &["t", "spread", "stderr"]);
    for p in points {
        table.push(vec![Cell::Float(p.t), Cell::Float(p.value), Cell::Float(p.stderr)])?;
    }
    Ok(table)
}

/// Resolvent sweep table: (lambda, n, dynamics, M, value, converged, iterations).
pub fn resolvent_table() -> Table {
    Table::new(
        "resolvent",
        &["lambda", "n", "dynamics", "M", "value", "converged", "iterations"],
    )
}

/// Fourier sweep table: (d, lambda, integral, fit_exponent, residual); the
/// global fit values repeat on every row.
pub fn fourier_table() -> Table {
    Table::new("fourier", &["d", "lambda", "integral", "fit_exponent", "residual"])
}
