//! Table CSV files with a header row and a per-column schema.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use pangaea_core::pretrain::{impute_missing, ColumnKind};
use serde::{Deserialize, Serialize};

use crate::error::{IoError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CsvColumn {
    Continuous,
    Discrete,
    /// Text labels, coded as their index in sorted order.
    Categorical,
}

impl CsvColumn {
    fn imputation(self) -> ColumnKind {
        match self {
            CsvColumn::Continuous => ColumnKind::Continuous,
            CsvColumn::Discrete | CsvColumn::Categorical => ColumnKind::Discrete,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub schema: Vec<CsvColumn>,
    /// `None` marks a missing cell.
    pub rows: Vec<Vec<Option<f64>>>,
    /// Category labels per column; empty for numeric columns.
    pub categories: Vec<Vec<String>>,
}

fn is_missing(cell: &str) -> bool {
    let t = cell.trim();
    t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan")
}

impl Table {
    /// Parses CSV text. Without a schema every column is continuous.
    pub fn parse<R: Read>(reader: R, schema: Option<&[CsvColumn]>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| IoError::Csv { line: 1, message: e.to_string() })?
            .iter()
            .map(str::to_string)
            .collect();
        if header.is_empty() {
            return Err(IoError::Csv { line: 1, message: "missing header row".into() });
        }
        let schema = match schema {
            Some(s) if s.len() != header.len() => {
                return Err(IoError::Csv { line: 1, message: format!("{} columns, schema lists {}", header.len(), s.len()) })
            }
            Some(s) => s.to_vec(),
            None => vec![CsvColumn::Continuous; header.len()],
        };
        let mut raw: Vec<(u64, Vec<String>)> = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| IoError::Csv { line: e.position().map_or(0, |p| p.line()), message: e.to_string() })?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != header.len() {
                return Err(IoError::Csv { line, message: format!("{} fields, header has {}", rec.len(), header.len()) });
            }
            raw.push((line, rec.iter().map(str::to_string).collect()));
        }
        let mut categories = vec![Vec::new(); header.len()];
        for (c, kind) in schema.iter().enumerate() {
            if *kind == CsvColumn::Categorical {
                let mut labels: Vec<String> =
                    raw.iter().map(|(_, r)| r[c].trim()).filter(|v| !is_missing(v)).map(str::to_string).collect();
                labels.sort();
                labels.dedup();
                categories[c] = labels;
            }
        }
        let mut rows = Vec::with_capacity(raw.len());
        for (line, rec) in &raw {
            let mut row = Vec::with_capacity(header.len());
            for (c, cell) in rec.iter().enumerate() {
                let cell = cell.trim();
                if is_missing(cell) {
                    row.push(None);
                    continue;
                }
                let v = match schema[c] {
                    CsvColumn::Categorical => categories[c].binary_search_by(|l| l.as_str().cmp(cell)).expect("label collected") as f64,
                    _ => cell.parse::<f64>().map_err(|_| IoError::Csv {
                        line: *line,
                        message: format!("column {}: {cell:?} is not a number", header[c]),
                    })?,
                };
                row.push(Some(v));
            }
            rows.push(row);
        }
        Ok(Self { header, schema, rows, categories })
    }

    pub fn read(path: impl AsRef<Path>, schema: Option<&[CsvColumn]>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(File::open(path).map_err(IoError::io(path))?, schema)
    }

    pub fn write_to<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let csv_err = |e: csv::Error| IoError::Csv { line: 0, message: e.to_string() };
        w.write_record(&self.header).map_err(csv_err)?;
        for row in &self.rows {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(c, v)| match (v, self.schema[c]) {
                    (None, _) => String::new(),
                    (Some(v), CsvColumn::Categorical) => self.categories[c][*v as usize].clone(),
                    (Some(v), _) => v.to_string(),
                })
                .collect();
            w.write_record(&cells).map_err(csv_err)?;
        }
        w.flush().map_err(|e| IoError::Csv { line: 0, message: e.to_string() })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        crate::write_atomic(path.as_ref(), &buf)
    }

    /// Complete rows after filling missing cells column by column.
    pub fn imputed(&self) -> Result<Vec<Vec<f64>>> {
        let mut cols = Vec::with_capacity(self.header.len());
        for (c, kind) in self.schema.iter().enumerate() {
            let column: Vec<Option<f64>> = self.rows.iter().map(|r| r[c]).collect();
            cols.push(impute_missing(&column, kind.imputation())?);
        }
        Ok((0..self.rows.len()).map(|r| cols.iter().map(|c| c[r]).collect()).collect())
    }

    /// Numeric table with generated column names `f0, f1, …`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let d = rows.first().map_or(0, Vec::len);
        Self {
            header: (0..d).map(|i| format!("f{i}")).collect(),
            schema: vec![CsvColumn::Continuous; d],
            rows: rows.iter().map(|r| r.iter().map(|&v| Some(v)).collect()).collect(),
            categories: vec![Vec::new(); d],
        }
    }
}
