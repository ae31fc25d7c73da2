use std::path::Path;

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::io::write_atomic;

/// Reads `b0,...,b{n-1},label` rows. A first row that does not parse as numbers is
/// taken as a header. The band count comes from the first data row. Labels must lie
/// in `0..num_classes` when given; otherwise the class count is `max label + 1`.
pub fn load_csv(path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let parse_err = |row: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        message,
    };
    let mut bands = None;
    let mut samples = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| csv_error(path, e))?;
        if record.len() < 2 {
            return Err(parse_err(row, "need at least one band and a label".into()));
        }
        let values: std::result::Result<Vec<f64>, _> = record.iter().take(record.len() - 1).map(str::parse).collect();
        let values = match values {
            Ok(v) => v,
            Err(_) if row == 1 => continue,
            Err(e) => return Err(parse_err(row, format!("non-numeric band value: {e}"))),
        };
        let n = *bands.get_or_insert(values.len());
        if values.len() != n {
            return Err(parse_err(row, format!("{} bands, expected {n}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(row, "non-finite band value".into()));
        }
        let label = &record[record.len() - 1];
        let class_id: usize = label
            .parse()
            .map_err(|_| parse_err(row, format!("label `{label}` is not a non-negative integer")))?;
        if let Some(k) = num_classes {
            if class_id >= k {
                return Err(parse_err(row, format!("label {class_id} outside 0..{k}")));
            }
        }
        samples.push(Sample {
            spectrum: values,
            class_id,
        });
    }
    let bands = bands.ok_or_else(|| Error::Empty(format!("no data rows in {}", path.display())))?;
    let k = num_classes.unwrap_or_else(|| samples.iter().map(|s| s.class_id + 1).max().unwrap_or(0));
    Dataset::new(bands, k, samples)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            row: 0,
            message: format!("{other:?}"),
        },
    }
}

/// Writes one row per sample, no header. Values use shortest round-trip formatting.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in dataset.samples() {
        let mut row: Vec<String> = s.spectrum.iter().map(|v| v.to_string()).collect();
        row.push(s.class_id.to_string());
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    write_atomic(path, &bytes)
}
