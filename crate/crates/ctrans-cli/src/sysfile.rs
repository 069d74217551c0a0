//! System description files.
//!
//! TOML with fields `d`, `n`, `T`, and matrix tables `M` (d×d) and `N`
//! (d×n). Each matrix carries exactly one form:
//!
//! ```toml
//! d = 2
//! n = 1
//! T = 1.0
//!
//! [M]
//! constant = [[0.0, 1.0], [0.0, 0.0]]
//!
//! [N]
//! constant = [[0.0], [1.0]]
//! ```
//!
//! `poly = [[[c0, c1, ...], ...], ...]` lists per-entry coefficients in
//! ascending powers of t, and `samples = { dt = 0.1, values = [[[...]]] }`
//! gives uniformly spaced matrix samples whose implied horizon
//! `dt·(len−1)` must match `T`.

use std::path::Path;

use nalgebra::DMatrix;
use toml::Value;

use ctrans::linsys::MatrixCurve;

use crate::CliError;

/// A parsed system: drift, input matrix, and declared dimensions.
#[derive(Debug)]
pub struct SystemDescription {
    pub m: MatrixCurve,
    pub n: MatrixCurve,
    pub d: usize,
    pub n_inputs: usize,
    pub horizon: f64,
}

/// Reads and validates a system description file.
pub fn parse_system(path: &Path) -> Result<SystemDescription, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::failure("io", format!("cannot read system file {}: {e}", path.display()))
    })?;
    let table: toml::Table = text.parse().map_err(|e| {
        CliError::failure("parse", format!("system file {}: {e}", path.display()))
    })?;

    let mut d = None;
    let mut n_inputs = None;
    let mut horizon = None;
    let mut m_spec = None;
    let mut n_spec = None;
    for (key, value) in &table {
        match key.as_str() {
            "d" => d = Some(field_usize(value, "d")?),
            "n" => n_inputs = Some(field_usize(value, "n")?),
            "T" => horizon = Some(field_f64(value, "T")?),
            "M" => m_spec = Some(value),
            "N" => n_spec = Some(value),
            other => {
                return Err(CliError::failure(
                    "parse",
                    format!("system file field '{other}' is not recognized"),
                ))
            }
        }
    }
    let d = d.ok_or_else(|| missing("d"))?;
    let n_inputs = n_inputs.ok_or_else(|| missing("n"))?;
    let horizon = horizon.ok_or_else(|| missing("T"))?;
    let m_spec = m_spec.ok_or_else(|| missing("M"))?;
    let n_spec = n_spec.ok_or_else(|| missing("N"))?;

    if d == 0 {
        return Err(CliError::failure("validation", "d must be >= 1".into()));
    }
    if n_inputs == 0 || n_inputs > d {
        return Err(CliError::failure(
            "validation",
            format!("control dimension must satisfy 1 <= n <= d, got n = {n_inputs}, d = {d}"),
        ));
    }
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(CliError::failure(
            "validation",
            format!("T must be a positive horizon, got {horizon}"),
        ));
    }

    let m = parse_matrix(m_spec, "M", d, d, horizon)?;
    let n = parse_matrix(n_spec, "N", d, n_inputs, horizon)?;
    Ok(SystemDescription {
        m,
        n,
        d,
        n_inputs,
        horizon,
    })
}

fn missing(field: &str) -> CliError {
    CliError::failure("parse", format!("system file is missing the '{field}' field"))
}

fn field_usize(value: &Value, field: &str) -> Result<usize, CliError> {
    match value {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        other => Err(CliError::failure(
            "parse",
            format!("field '{field}' must be a non-negative integer, got {other}"),
        )),
    }
}

fn field_f64(value: &Value, field: &str) -> Result<f64, CliError> {
    match value {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(CliError::failure(
            "parse",
            format!("field '{field}' must be a number"),
        )),
    }
}

/// One matrix table with exactly one of `constant`, `poly`, `samples`.
fn parse_matrix(
    value: &Value,
    name: &str,
    rows: usize,
    cols: usize,
    horizon: f64,
) -> Result<MatrixCurve, CliError> {
    let table = value.as_table().ok_or_else(|| {
        CliError::failure("parse", format!("field '{name}' must be a table"))
    })?;
    let mut forms = Vec::new();
    for key in table.keys() {
        match key.as_str() {
            "constant" | "poly" | "samples" => forms.push(key.as_str()),
            other => {
                return Err(CliError::failure(
                    "parse",
                    format!("matrix '{name}' has unknown key '{other}'"),
                ))
            }
        }
    }
    if forms.len() != 1 {
        return Err(CliError::failure(
            "parse",
            format!(
                "matrix '{name}' must give exactly one of constant/poly/samples, found {}",
                forms.len()
            ),
        ));
    }

    let curve = match forms[0] {
        "constant" => {
            let entries = matrix_entries(&table["constant"], name)?;
            let m = to_dmatrix(&entries, name, rows, cols)?;
            MatrixCurve::constant(m, horizon)
        }
        "poly" => {
            let coeffs = poly_entries(&table["poly"], name)?;
            check_shape(coeffs.len(), coeffs.first().map_or(0, Vec::len), name, rows, cols)?;
            MatrixCurve::polynomial(coeffs, horizon)
        }
        "samples" => {
            let samples = table["samples"].as_table().ok_or_else(|| {
                CliError::failure("parse", format!("'{name}.samples' must be a table"))
            })?;
            let dt = field_f64(
                samples
                    .get("dt")
                    .ok_or_else(|| missing(&format!("{name}.samples.dt")))?,
                "dt",
            )?;
            let values = samples
                .get("values")
                .ok_or_else(|| missing(&format!("{name}.samples.values")))?
                .as_array()
                .ok_or_else(|| {
                    CliError::failure(
                        "parse",
                        format!("'{name}.samples.values' must be an array of matrices"),
                    )
                })?;
            let mats: Vec<DMatrix<f64>> = values
                .iter()
                .map(|v| {
                    let entries = matrix_entries(v, name)?;
                    to_dmatrix(&entries, name, rows, cols)
                })
                .collect::<Result<_, _>>()?;
            let curve = MatrixCurve::sampled(dt, mats).map_err(CliError::from)?;
            let implied = curve.horizon();
            if (implied - horizon).abs() > 1e-9 * (1.0 + horizon.abs()) {
                return Err(CliError::failure(
                    "validation",
                    format!(
                        "matrix '{name}' samples span {implied} but T = {horizon}"
                    ),
                ));
            }
            return Ok(curve);
        }
        _ => unreachable!(),
    };
    curve.map_err(CliError::from)
}

/// `[[f64]]` from a TOML value.
fn matrix_entries(value: &Value, name: &str) -> Result<Vec<Vec<f64>>, CliError> {
    let rows = value.as_array().ok_or_else(|| bad_matrix(name))?;
    rows.iter()
        .map(|row| {
            row.as_array()
                .ok_or_else(|| bad_matrix(name))?
                .iter()
                .map(|v| field_f64(v, name))
                .collect()
        })
        .collect()
}

/// `[[[f64]]]` (per-entry coefficient lists) from a TOML value.
fn poly_entries(value: &Value, name: &str) -> Result<Vec<Vec<Vec<f64>>>, CliError> {
    let rows = value.as_array().ok_or_else(|| bad_matrix(name))?;
    rows.iter()
        .map(|row| {
            row.as_array()
                .ok_or_else(|| bad_matrix(name))?
                .iter()
                .map(|entry| {
                    entry
                        .as_array()
                        .ok_or_else(|| bad_matrix(name))?
                        .iter()
                        .map(|v| field_f64(v, name))
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn bad_matrix(name: &str) -> CliError {
    CliError::failure(
        "parse",
        format!("matrix '{name}' entries must be nested arrays of numbers"),
    )
}

fn check_shape(
    got_rows: usize,
    got_cols: usize,
    name: &str,
    rows: usize,
    cols: usize,
) -> Result<(), CliError> {
    if got_rows != rows || got_cols != cols {
        return Err(CliError::failure(
            "validation",
            format!("matrix '{name}' is {got_rows}x{got_cols}, expected {rows}x{cols}"),
        ));
    }
    Ok(())
}

fn to_dmatrix(
    entries: &[Vec<f64>],
    name: &str,
    rows: usize,
    cols: usize,
) -> Result<DMatrix<f64>, CliError> {
    if entries.iter().any(|row| row.len() != entries[0].len()) {
        return Err(CliError::failure(
            "parse",
            format!("matrix '{name}' rows have unequal lengths"),
        ));
    }
    check_shape(entries.len(), entries.first().map_or(0, Vec::len), name, rows, cols)?;
    let mut m = DMatrix::zeros(rows, cols);
    for (r, row) in entries.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            m[(r, c)] = v;
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn constant_system_parses() {
        let f = write_tmp(
            "d = 2\nn = 1\nT = 1.0\n[M]\nconstant = [[0.0, 1.0], [0.0, 0.0]]\n[N]\nconstant = [[0.0], [1.0]]\n",
        );
        let sys = parse_system(f.path()).unwrap();
        assert_eq!((sys.d, sys.n_inputs), (2, 1));
        assert_eq!(sys.horizon, 1.0);
        assert_eq!(sys.m.eval(0.7, 0).unwrap()[(0, 1)], 1.0);
    }

    #[test]
    fn polynomial_coefficients_follow_ascending_powers() {
        let f = write_tmp(
            "d = 1\nn = 1\nT = 2.0\n[M]\npoly = [[[0.0, 1.0]]]\n[N]\nconstant = [[1.0]]\n",
        );
        let sys = parse_system(f.path()).unwrap();
        assert_eq!(sys.m.eval(1.5, 0).unwrap()[(0, 0)], 1.5);
    }

    #[test]
    fn sampled_horizon_must_match_declared_t() {
        let f = write_tmp(
            "d = 1\nn = 1\nT = 1.0\n[M]\nsamples = { dt = 0.25, values = [[[0.0]], [[0.0]], [[0.0]]] }\n[N]\nconstant = [[1.0]]\n",
        );
        let err = parse_system(f.path()).unwrap_err();
        assert!(err.message().contains("samples span"));
    }

    #[test]
    fn wide_input_matrix_is_rejected() {
        let f = write_tmp(
            "d = 2\nn = 3\nT = 1.0\n[M]\nconstant = [[0.0, 0.0], [0.0, 0.0]]\n[N]\nconstant = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]\n",
        );
        let err = parse_system(f.path()).unwrap_err();
        assert!(err.message().contains("1 <= n <= d"));
    }

    #[test]
    fn two_forms_for_one_matrix_are_rejected() {
        let f = write_tmp(
            "d = 1\nn = 1\nT = 1.0\n[M]\nconstant = [[0.0]]\npoly = [[[0.0]]]\n[N]\nconstant = [[1.0]]\n",
        );
        let err = parse_system(f.path()).unwrap_err();
        assert!(err.message().contains("exactly one"));
    }
}
