//! Synthetic datasets as CSV with header `x0,x1,label`.

use std::path::Path;

use super::{Dataset, Domain};
use crate::error::{ArosError, Result};
use crate::tensor::Tensor;

pub fn write_csv(data: &Dataset, path: &Path) -> Result<()> {
    let d = data.inputs.row_len();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data.inputs.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(data.labels[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| ArosError::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> ArosError {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => ArosError::io(path, io),
            _ => unreachable!(),
        }
    } else {
        ArosError::Csv(e)
    }
}

/// Reads a synthetic dataset; the class count is `max(label) + 1`.
pub fn read_csv(path: &Path) -> Result<Dataset> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let headers = r.headers()?.clone();
    let d = headers.len().saturating_sub(1);
    let expected: Vec<String> = (0..d).map(|j| format!("x{j}")).chain(["label".into()]).collect();
    if d == 0 || headers.iter().ne(expected.iter().map(String::as_str)) {
        return Err(ArosError::config(
            path.display().to_string(),
            format!("CSV header must be {}", expected.join(",")),
        ));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        for j in 0..d {
            data.push(
                rec[j]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| ArosError::config(path.display().to_string(), format!("x{j}: {e}")))?,
            );
        }
        labels.push(
            rec[d]
                .trim()
                .parse::<usize>()
                .map_err(|e| ArosError::config(path.display().to_string(), format!("label: {e}")))?,
        );
    }
    let n = labels.len();
    let k = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(Tensor::matrix(n, d, data)?, labels, k, Domain::Synthetic2d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datahub::gen_two_moons;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("moons.csv");
        let ds = gen_two_moons(25, 0.1, 3).unwrap();
        write_csv(&ds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("x0,x1,label\n"));
        assert_eq!(read_csv(&path).unwrap(), ds);
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_csv(Path::new("/nonexistent/ring.csv")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/ring.csv"), "{err}");
    }
}
