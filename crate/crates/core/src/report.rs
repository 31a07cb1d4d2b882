//! Bit-stable CSV and JSON emission.
//!
//! Floats in CSV are written as `{:.16e}` (17 significant digits, `.` decimal
//! separator), rows end in `\n`, and every table carries its header row.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::hessian::EigenSummary;
use crate::metrics::DimReport;
use crate::reduced::ComparisonRow;
use crate::trainer::SweepEntry;

pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        CsvTable {
            header: header.iter().map(|h| h.as_ref().to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.header.join(","));
        for row in &self.rows {
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &self.render())
    }
}

/// Write a file, creating missing parent directories.
pub fn write_text(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, content)?;
    Ok(())
}

/// Pretty JSON with a trailing newline. Floats use the shortest round-trip form.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &to_json(value)?)
}

pub fn comparison_table(rows: &[ComparisonRow]) -> CsvTable {
    let mut t = CsvTable::new(&["frame_id", "rank", "alpha_star", "fit_term", "reg_term", "total"]);
    for r in rows {
        t.push(vec![
            r.frame_id.clone(),
            r.rank.to_string(),
            fmt_float(r.alpha_star),
            fmt_float(r.fit_term),
            fmt_float(r.reg_term),
            fmt_float(r.total),
        ]);
    }
    t
}

pub fn dims_table(report: &DimReport) -> CsvTable {
    let mut t = CsvTable::new(&["d", "D_dnc", "dim_lower", "dim_upper", "ratio_lower", "ratio_upper"]);
    for r in &report.rows {
        t.push(vec![
            r.d.to_string(),
            r.d_dnc.to_string(),
            r.dim_lower.to_string(),
            r.dim_upper.to_string(),
            fmt_float(r.ratio_lower),
            fmt_float(r.ratio_upper),
        ]);
    }
    t
}

pub fn eigenvalue_table(values: &[f64]) -> CsvTable {
    let mut t = CsvTable::new(&["index", "eigenvalue"]);
    for (i, v) in values.iter().enumerate() {
        t.push(vec![i.to_string(), fmt_float(*v)]);
    }
    t
}

#[derive(Clone, Debug, Serialize)]
pub struct EigenReport<'a> {
    pub summary: &'a EigenSummary,
    pub symmetry_error: f64,
}

/// One row per run in grid order. Failed runs get class `failed` and empty numeric fields.
pub fn sweep_table(entries: &[SweepEntry]) -> CsvTable {
    let mut t = CsvTable::new(&[
        "d",
        "lambda",
        "lr",
        "seed",
        "class",
        "final_loss",
        "final_rank",
        "nc1",
        "nc2_angle_dev",
        "nc3",
        "balancedness",
    ]);
    for e in entries {
        let c = &e.config;
        let mut row = vec![
            c.d.to_string(),
            fmt_float(c.lambda),
            fmt_float(c.learning_rate),
            c.seed.to_string(),
        ];
        match &e.outcome {
            Ok((rec, cls)) => row.extend([
                cls.class.label(),
                fmt_float(rec.final_loss()),
                cls.rank.to_string(),
                fmt_float(cls.nc.nc1),
                fmt_float(cls.nc.nc2_angle_dev),
                fmt_float(cls.nc.nc3),
                fmt_float(cls.balancedness),
            ]),
            Err(_) => {
                row.push("failed".into());
                row.extend(std::iter::repeat_n(String::new(), 6));
            }
        }
        t.push(row);
    }
    t
}
