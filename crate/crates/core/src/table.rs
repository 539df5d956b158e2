//! CSV tables: header row, `,` separator, `\n` line ends, floats written with
//! 17 significant digits so they parse back to the same bits.

use std::path::Path;

use crate::error::{Error, Result};

/// `{:.16e}`: one leading digit plus 16 decimals.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_rows<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| Error::Csv(e.to_string()))?;
    w.write_record(header).map_err(|e| Error::Csv(e.to_string()))?;
    for row in rows {
        w.write_record(row.into_iter().collect::<Vec<_>>())
            .map_err(|e| Error::Csv(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a purely numeric table.
pub fn write_numeric(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    write_rows(path, header, rows.iter().map(|r| r.iter().map(|&v| fmt_f64(v))))
}

/// Reads a numeric table, skipping the header. All rows must have equal length.
pub fn read_numeric(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
        let row = rec
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Csv(format!("{} row {}: `{f}`: {e}", path.display(), i + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Header `x1, .., xD`.
pub fn coord_header(d: usize) -> Vec<String> {
    (1..=d).map(|i| format!("x{i}")).collect()
}
