//! File formats: matrices as header-less CSV, everything else as JSON.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use spikeconv::Matrix;

use crate::failure::{CliResult, Failure};

pub fn read_matrix(path: &Path) -> CliResult<Matrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
        let row = record
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Failure::input(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Failure::input(format!("{}: no rows", path.display())));
    }
    Matrix::from_rows(&rows).map_err(Failure::at(path))
}

pub fn write_matrix(path: &Path, m: &Matrix) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    for i in 0..m.rows() {
        w.write_record(m.row(i).iter().map(|v| v.to_string()))
            .map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::input(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let m = Matrix::from_rows(&[vec![1.5, -2.0], vec![0.1, 1e-300]]).unwrap();
        write_matrix(&p, &m).unwrap();
        assert_eq!(read_matrix(&p).unwrap(), m);
    }

    #[test]
    fn ragged_or_empty_csv_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "").unwrap();
        assert!(read_matrix(&p).is_err());
        std::fs::write(&p, "1,2\n3,x\n").unwrap();
        assert!(read_matrix(&p).unwrap_err().message.contains("line 2"));
    }
}
