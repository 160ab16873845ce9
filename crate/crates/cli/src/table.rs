//! Numeric CSV matrices: one row per sample, no header.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use bke_core::Tensor;

pub fn read_matrix(path: &Path) -> Result<Tensor> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut width = None;
    let mut rows = 0;
    let mut data = Vec::new();
    for record in reader.records() {
        let record = record.with_context(|| format!("reading {}", path.display()))?;
        let line = record.position().map_or(0, |p| p.line());
        for (col, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                anyhow::anyhow!(
                    "{} line {line}, column {}: {field:?} is not a number",
                    path.display(),
                    col + 1
                )
            })?;
            if !v.is_finite() {
                bail!("{} line {line}: non-finite value {field:?}", path.display());
            }
            data.push(v);
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => bail!(
                "{} line {line}: expected {w} columns, found {}",
                path.display(),
                record.len()
            ),
            _ => {}
        }
        rows += 1;
    }
    let Some(width) = width.filter(|&w| w > 0) else {
        bail!("{} has no data rows", path.display());
    };
    Ok(Tensor::new(vec![rows, width], data)?)
}

/// Rows of `t` with 17 significant digits.
pub fn matrix_csv(t: &Tensor) -> String {
    let mut s = String::new();
    for i in 0..t.rows() {
        let row: Vec<String> = t.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        let _ = writeln!(s, "{}", row.join(","));
    }
    s
}
