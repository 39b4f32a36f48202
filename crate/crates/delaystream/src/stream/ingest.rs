//! CSV ingestion and materialization.
//!
//! Format: UTF-8, comma-separated, header `step,label,f0,...,f{D-1}`, rows
//! sorted by step ascending, `.` decimal point. Every `n` consecutive rows
//! form one stream batch.

use std::io::Write;
use std::path::Path;

use super::generators::RawSample;
use super::StreamError;

fn format_err(path: &Path, reason: String) -> StreamError {
    StreamError::FileFormat {
        path: path.to_path_buf(),
        reason,
    }
}

/// Read and validate all rows. Returns `(samples, dim, num_classes)` where
/// `num_classes` is the largest label plus one.
pub(super) fn read_rows(path: &Path) -> Result<(Vec<RawSample>, usize, usize), StreamError> {
    let file = std::fs::File::open(path).map_err(|e| StreamError::FileRead {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);

    let headers = reader
        .headers()
        .map_err(|e| format_err(path, format!("cannot read header: {e}")))?
        .clone();
    if headers.len() < 3 || &headers[0] != "step" || &headers[1] != "label" {
        return Err(format_err(
            path,
            "header must be `step,label,f0,...`".to_string(),
        ));
    }
    let dim = headers.len() - 2;
    for (j, name) in headers.iter().skip(2).enumerate() {
        if name != format!("f{j}") {
            return Err(format_err(
                path,
                format!("feature column {} named `{name}`, expected `f{j}`", j + 2),
            ));
        }
    }

    let mut samples = Vec::new();
    let mut prev_step = 0u64;
    let mut max_label = 0usize;
    for (i, record) in reader.records().enumerate() {
        let row = i + 2; // 1-based, after the header line
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { .. } => {
                format_err(path, format!("ragged row {row}: {e}"))
            }
            _ => format_err(path, format!("row {row}: {e}")),
        })?;
        if record.len() != headers.len() {
            return Err(format_err(
                path,
                format!(
                    "ragged row {row}: expected {} fields, found {}",
                    headers.len(),
                    record.len()
                ),
            ));
        }
        let step: u64 = record[0]
            .parse()
            .map_err(|_| format_err(path, format!("non-integer step `{}` at row {row}", &record[0])))?;
        if step < prev_step {
            return Err(format_err(
                path,
                format!("rows not sorted by step ascending at row {row}"),
            ));
        }
        prev_step = step;
        let label: usize = record[1]
            .parse()
            .map_err(|_| format_err(path, format!("non-integer label `{}` at row {row}", &record[1])))?;
        max_label = max_label.max(label);
        let features = record
            .iter()
            .skip(2)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| format_err(path, format!("bad feature value `{v}` at row {row}")))
            })
            .collect::<Result<Vec<f64>, StreamError>>()?;
        samples.push(RawSample { features, label });
    }
    Ok((samples, dim, max_label + 1))
}

/// Write batches in the ingestion format: one row per sample, `step` column
/// equal to the batch step. Floats use the shortest round-trip encoding, so a
/// replay parses back to bit-identical values.
pub(super) fn write_rows<W: Write>(
    w: &mut W,
    dim: usize,
    rows: impl Iterator<Item = (u64, usize, Vec<f64>)>,
) -> std::io::Result<()> {
    write!(w, "step,label")?;
    for j in 0..dim {
        write!(w, ",f{j}")?;
    }
    writeln!(w)?;
    for (step, label, features) in rows {
        write!(w, "{step},{label}")?;
        for v in features {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
