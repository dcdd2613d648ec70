//! External dataset input: CSV with a `x_1,...,x_D,y` header, or the JSONL
//! dataset format produced by `symreg generate`.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("dataset error: {0}")]
    Dataset(#[from] symreg_core::dataset::DatasetError),
    #[error("file {0} is empty")]
    Empty(String),
}

#[derive(Debug)]
pub struct Table {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

/// Parse a CSV whose header names D input columns `x_1..x_D` and one `y`.
pub fn read_csv(path: &Path) -> Result<Table, DataError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| DataError::Empty(path.display().to_string()))?;
    let header = header?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let dim = cols.len().saturating_sub(1);
    if dim == 0 || cols.last() != Some(&"y") {
        return Err(DataError::Malformed {
            line: 1,
            reason: format!("header must be x_1,...,x_D,y (got `{header}`)"),
        });
    }
    for (i, c) in cols[..dim].iter().enumerate() {
        let want = format!("x_{}", i + 1);
        if *c != want {
            return Err(DataError::Malformed {
                line: 1,
                reason: format!("column {} should be `{want}`, found `{c}`", i + 1),
            });
        }
    }

    let mut x = Vec::new();
    let mut y = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Result<Vec<f64>, _> =
            line.split(',').map(|v| v.trim().parse::<f64>()).collect();
        let vals = vals.map_err(|e| DataError::Malformed {
            line: i + 1,
            reason: format!("bad number: {e}"),
        })?;
        if vals.len() != dim + 1 {
            return Err(DataError::Malformed {
                line: i + 1,
                reason: format!("expected {} values, found {}", dim + 1, vals.len()),
            });
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Malformed { line: i + 1, reason: "non-finite value".into() });
        }
        y.push(vals[dim]);
        x.push(vals[..dim].to_vec());
    }
    if y.is_empty() {
        return Err(DataError::Empty(path.display().to_string()));
    }
    Ok(Table { x, y })
}

/// Load either CSV (by `.csv` extension) or JSONL dataset records (first
/// record only carries the points used for fitting).
pub fn read_table(path: &Path) -> Result<Table, DataError> {
    if path.extension().and_then(|e| e.to_str()) == Some("csv") {
        return read_csv(path);
    }
    let reader = BufReader::new(File::open(path)?);
    let records = symreg_core::dataset::read_jsonl(reader)?;
    let rec = records
        .into_iter()
        .next()
        .ok_or_else(|| DataError::Empty(path.display().to_string()))?;
    // JSONL records store whitened x; reconstruct raw coordinates.
    let x = rec
        .x
        .iter()
        .map(|w| (0..rec.dim).map(|d| rec.mu[d] + rec.sigma[d] * w[d]).collect())
        .collect();
    Ok(Table { x, y: rec.y })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let mut f = File::create(&path).unwrap();
        writeln!(f, "x_1,x_2,y").unwrap();
        writeln!(f, "1.0,2.0,3.0").unwrap();
        writeln!(f, "-0.5,0.25,1.5").unwrap();
        let t = read_csv(&path).unwrap();
        assert_eq!(t.x, vec![vec![1.0, 2.0], vec![-0.5, 0.25]]);
        assert_eq!(t.y, vec![3.0, 1.5]);
    }

    #[test]
    fn csv_bad_header_is_line_numbered() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "a,b\n1,2\n").unwrap();
        match read_csv(&path) {
            Err(DataError::Malformed { line: 1, .. }) => {}
            other => panic!("expected header error, got {other:?}"),
        }
    }

    #[test]
    fn csv_bad_value_is_line_numbered() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "x_1,y\n1,2\nfoo,3\n").unwrap();
        match read_csv(&path) {
            Err(DataError::Malformed { line: 3, .. }) => {}
            other => panic!("expected line-3 error, got {other:?}"),
        }
    }
}
