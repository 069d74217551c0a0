//! Discrete-measure files: CSV with one atom per row, `weight,x1,...,xd`.
//! No header row; blank lines and `#` comments are skipped. Weights must be
//! positive and sum to 1 (within the library tolerance). Writing uses the
//! same 17-significant-digit float format as the JSON outputs, so a written
//! measure re-reads bit-identically.

use std::path::Path;

use nalgebra::DVector;

use ctrans::transport::DiscreteMeasure;

use crate::CliError;

/// Reads a measure file, optionally enforcing the atom dimension.
pub fn read_measure(path: &Path, expect_dim: Option<usize>) -> Result<DiscreteMeasure, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| {
            CliError::failure("io", format!("cannot read measure {}: {e}", path.display()))
        })?;

    let mut points = Vec::new();
    let mut weights = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            CliError::failure("parse", format!("measure {}: {e}", path.display()))
        })?;
        if record.len() < 2 {
            return Err(CliError::failure(
                "parse",
                format!(
                    "measure {} row {}: need weight plus at least one coordinate",
                    path.display(),
                    row + 1
                ),
            ));
        }
        let numbers: Vec<f64> = record
            .iter()
            .enumerate()
            .map(|(col, field)| {
                field.parse::<f64>().map_err(|_| {
                    CliError::failure(
                        "parse",
                        format!(
                            "measure {} row {} column {}: '{field}' is not a number",
                            path.display(),
                            row + 1,
                            col + 1
                        ),
                    )
                })
            })
            .collect::<Result<_, _>>()?;
        weights.push(numbers[0]);
        points.push(DVector::from_row_slice(&numbers[1..]));
    }

    if let Some(dim) = expect_dim {
        if let Some(bad) = points.iter().position(|p| p.len() != dim) {
            return Err(CliError::failure(
                "validation",
                format!(
                    "measure {} row {} has dimension {}, system expects {dim}",
                    path.display(),
                    bad + 1,
                    points[bad].len()
                ),
            ));
        }
    }

    DiscreteMeasure::new(points, weights).map_err(CliError::from)
}
