//! Two-column plot data: a header row, then `x,y` rows sorted by `x`.

use std::io::Write;
use std::path::Path;

use pangaea_core::Error;

use crate::error::{IoError, Result};

pub fn emit_plotdata<W: Write>(mut out: W, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> Result<()> {
    if points.is_empty() {
        return Err(Error::Contract("no points to plot".into()).into());
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut text = format!("{x_label},{y_label}\n");
    for (x, y) in sorted {
        text.push_str(&format!("{x},{y}\n"));
    }
    out.write_all(text.as_bytes()).map_err(IoError::io("<plot output>"))
}

pub fn write_plotdata(path: impl AsRef<Path>, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> Result<()> {
    let mut buf = Vec::new();
    emit_plotdata(&mut buf, x_label, y_label, points)?;
    crate::write_atomic(path.as_ref(), &buf)
}

pub fn read_plotdata(path: impl AsRef<Path>) -> Result<Vec<(f64, f64)>> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| IoError::Csv { line: 0, message: e.to_string() })?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| IoError::Csv { line: e.position().map_or(0, |p| p.line()), message: e.to_string() })?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |i: usize| {
            rec.get(i)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or(IoError::Csv { line, message: "expected two numeric fields".into() })
        };
        out.push((num(0)?, num(1)?));
    }
    Ok(out)
}
