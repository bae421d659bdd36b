//! Plain-text tabular formats for problem inputs and field outputs.
//!
//! - Measures: header `# n m` with `m = 1` (one weight per row) or `m = 2`
//!   (`support weight` per row), then `n` data rows.
//! - Cost matrices: header `# n m`, then `n` rows of `m` whitespace-separated
//!   entries.
//! - Drift fields: header `# nt nz t0 dt z0 dz`, then `nt` rows of `nz`
//!   values (uniform grids only).
//! - Sample dumps: one sample per line.
//!
//! Floats are written with 17 significant digits so files round-trip exactly.

use std::path::Path;

use ndarray::{Array1, Array2};

use crate::bridge::DriftField;
use crate::error::{Error, Result};
use crate::measures::{CostMatrix, DiscreteMeasure};

/// 17 significant digits; enough to reproduce any f64 exactly.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidParameter(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content)
        .map_err(|e| Error::InvalidParameter(format!("cannot write {}: {e}", path.display())))
}

fn parse_header(line: Option<&str>, path: &Path, expect: usize) -> Result<Vec<f64>> {
    let line = line.ok_or_else(|| {
        Error::InvalidParameter(format!("{}: empty file", path.display()))
    })?;
    let rest = line.trim().strip_prefix('#').ok_or_else(|| {
        Error::InvalidParameter(format!("{}: header must start with '#'", path.display()))
    })?;
    let nums: Result<Vec<f64>> = rest
        .split_whitespace()
        .map(|tok| {
            tok.parse::<f64>().map_err(|_| {
                Error::InvalidParameter(format!("{}: bad header token '{tok}'", path.display()))
            })
        })
        .collect();
    let nums = nums?;
    if nums.len() != expect {
        return Err(Error::InvalidParameter(format!(
            "{}: header has {} fields, expected {expect}",
            path.display(),
            nums.len()
        )));
    }
    Ok(nums)
}

fn parse_row(line: &str, path: &Path, lineno: usize) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|tok| {
            tok.parse::<f64>().map_err(|_| {
                Error::InvalidParameter(format!(
                    "{} line {lineno}: bad number '{tok}'",
                    path.display()
                ))
            })
        })
        .collect()
}

pub fn load_measure(path: &Path) -> Result<DiscreteMeasure> {
    let content = read(path)?;
    let mut lines = content.lines();
    let header = parse_header(lines.next(), path, 2)?;
    let (n, m) = (header[0] as usize, header[1] as usize);
    if m != 1 && m != 2 {
        return Err(Error::InvalidParameter(format!(
            "{}: measure files use m = 1 or 2, got {m}",
            path.display()
        )));
    }
    let mut weights = Vec::with_capacity(n);
    let mut support = Vec::with_capacity(n);
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = parse_row(line, path, lineno + 2)?;
        if row.len() != m {
            return Err(Error::InvalidParameter(format!(
                "{} line {}: expected {m} values",
                path.display(),
                lineno + 2
            )));
        }
        if m == 2 {
            support.push(row[0]);
            weights.push(row[1]);
        } else {
            weights.push(row[0]);
        }
    }
    if weights.len() != n {
        return Err(Error::InvalidParameter(format!(
            "{}: expected {n} rows, found {}",
            path.display(),
            weights.len()
        )));
    }
    if m == 2 {
        DiscreteMeasure::with_support(Array1::from_vec(weights), Array1::from_vec(support))
    } else {
        DiscreteMeasure::new(Array1::from_vec(weights))
    }
}

pub fn save_measure(path: &Path, measure: &DiscreteMeasure) -> Result<()> {
    let mut out = String::new();
    match measure.support() {
        Some(support) => {
            out.push_str(&format!("# {} 2\n", measure.len()));
            for (z, w) in support.iter().zip(measure.weights().iter()) {
                out.push_str(&format!("{} {}\n", fmt_float(*z), fmt_float(*w)));
            }
        }
        None => {
            out.push_str(&format!("# {} 1\n", measure.len()));
            for w in measure.weights().iter() {
                out.push_str(&fmt_float(*w));
                out.push('\n');
            }
        }
    }
    write(path, &out)
}

pub fn load_cost(path: &Path) -> Result<CostMatrix> {
    let content = read(path)?;
    let mut lines = content.lines();
    let header = parse_header(lines.next(), path, 2)?;
    let (n, m) = (header[0] as usize, header[1] as usize);
    let mut entries = Vec::with_capacity(n * m);
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = parse_row(line, path, lineno + 2)?;
        if row.len() != m {
            return Err(Error::InvalidParameter(format!(
                "{} line {}: expected {m} values",
                path.display(),
                lineno + 2
            )));
        }
        entries.extend(row);
    }
    if entries.len() != n * m {
        return Err(Error::InvalidParameter(format!(
            "{}: expected {n} rows",
            path.display()
        )));
    }
    let matrix = Array2::from_shape_vec((n, m), entries)
        .map_err(|e| Error::InvalidParameter(format!("{}: {e}", path.display())))?;
    CostMatrix::new(matrix)
}

pub fn save_cost(path: &Path, cost: &CostMatrix) -> Result<()> {
    let mut out = format!("# {} {}\n", cost.nrows(), cost.ncols());
    for i in 0..cost.nrows() {
        let row: Vec<String> = (0..cost.ncols())
            .map(|j| fmt_float(cost.entries()[(i, j)]))
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    write(path, &out)
}

/// Serialize a field; requires a uniformly spaced time grid.
pub fn save_drift_field(path: &Path, field: &DriftField) -> Result<()> {
    let t = field.t_grid();
    let z = field.z_grid();
    let (t0, dt) = if t.len() == 1 {
        (t[0], 0.0)
    } else {
        let dt = t[1] - t[0];
        if t.windows(2).any(|w| ((w[1] - w[0]) - dt).abs() > 1e-9) {
            return Err(Error::InvalidParameter(
                "only uniformly spaced time grids serialize to the tabular format".into(),
            ));
        }
        (t[0], dt)
    };
    let dz = z[1] - z[0];
    let mut out = format!(
        "# {} {} {} {} {} {}\n",
        t.len(),
        z.len(),
        fmt_float(t0),
        fmt_float(dt),
        fmt_float(z[0]),
        fmt_float(dz)
    );
    for i in 0..t.len() {
        let row: Vec<String> = (0..z.len())
            .map(|k| fmt_float(field.values()[(i, k)]))
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    write(path, &out)
}

pub fn load_drift_field(path: &Path) -> Result<DriftField> {
    let content = read(path)?;
    let mut lines = content.lines();
    let header = parse_header(lines.next(), path, 6)?;
    let (nt, nz) = (header[0] as usize, header[1] as usize);
    let (t0, dt, z0, dz) = (header[2], header[3], header[4], header[5]);
    let t_grid: Vec<f64> = (0..nt).map(|i| t0 + dt * i as f64).collect();
    let z_grid = Array1::from_iter((0..nz).map(|k| z0 + dz * k as f64));
    let mut entries = Vec::with_capacity(nt * nz);
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        entries.extend(parse_row(line, path, lineno + 2)?);
    }
    if entries.len() != nt * nz {
        return Err(Error::InvalidParameter(format!(
            "{}: expected {nt}x{nz} values, found {}",
            path.display(),
            entries.len()
        )));
    }
    let values = Array2::from_shape_vec((nt, nz), entries)
        .map_err(|e| Error::InvalidParameter(format!("{}: {e}", path.display())))?;
    DriftField::new(t_grid, z_grid, values)
}

/// Dump an ensemble (or any sample list) as a single column.
pub fn save_samples(path: &Path, samples: &[f64]) -> Result<()> {
    let mut out = String::with_capacity(samples.len() * 24);
    for s in samples {
        out.push_str(&fmt_float(*s));
        out.push('\n');
    }
    write(path, &out)
}
