//! Minimal CSV writer with a fixed float format so identical runs emit
//! identical bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Six decimal places, enough to distinguish any two distinct f32 metrics
/// in [0, 1000] while keeping output stable.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.6}")
}

pub fn fmt_f32(v: f32) -> String {
    fmt_f64(v as f64)
}

fn quote(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_owned()
    }
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for (i, row) in rows.iter().enumerate() {
        if row.len() != header.len() {
            return Err(Error::Format(format!(
                "csv row {i} has {} fields, header has {}",
                row.len(),
                header.len()
            )));
        }
        let cells: Vec<String> = row.iter().map(|c| quote(c)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(Error::from)
}
