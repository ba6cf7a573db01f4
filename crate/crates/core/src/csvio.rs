//! Numeric CSV tables with an optional header row.

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Write `m` with the given column names (or none).
pub fn write_matrix(path: &Path, m: &DMatrix<f64>, header: Option<&[&str]>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if let Some(h) = header {
        if h.len() != m.ncols() {
            return Err(Error::shape(format!("{} column names for {} columns", h.len(), m.ncols())));
        }
        w.write_record(h)?;
    }
    for i in 0..m.nrows() {
        w.write_record((0..m.ncols()).map(|j| format!("{:e}", m[(i, j)])))?;
    }
    w.flush()?;
    Ok(())
}

/// A numeric table; the first row is treated as a header when any of its
/// fields fails to parse as a number.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Option<Vec<String>>,
    pub values: DMatrix<f64>,
}

impl Table {
    /// Column by header name.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.header.as_ref()?.iter().position(|h| h == name)?;
        Some(self.values.column(j).iter().cloned().collect())
    }
}

pub fn read_table(path: &Path) -> Result<Table> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_path(path)?;
    let mut header = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(|f| f.parse::<f64>()).collect();
        match parsed {
            Ok(v) => rows.push(v),
            Err(_) if k == 0 => header = Some(rec.iter().map(|s| s.to_string()).collect()),
            Err(_) => {
                return Err(Error::data(format!("{}: non-numeric value on line {}", path.display(), k + 1)))
            }
        }
    }
    let ncols = rows.first().map_or_else(|| header.as_ref().map_or(0, |h: &Vec<String>| h.len()), |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::data(format!("{}: rows of unequal length", path.display())));
    }
    if let Some(h) = &header {
        if !rows.is_empty() && h.len() != ncols {
            return Err(Error::data(format!("{}: header has {} fields, rows have {ncols}", path.display(), h.len())));
        }
    }
    let values = DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]);
    Ok(Table { header, values })
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    Ok(read_table(path)?.values)
}
