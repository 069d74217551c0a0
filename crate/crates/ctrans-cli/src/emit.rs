//! Deterministic structured output: a small JSON tree whose floats are
//! always printed with 17 significant digits (scientific notation), so a
//! given config + seed produces byte-identical files, and atomic file
//! writes (temp file in the target directory + rename).

use std::io::Write;
use std::path::Path;

use crate::CliError;

/// JSON value with deterministic serialization.
#[derive(Debug, Clone)]
pub enum Json {
    Null,
    Bool(bool),
    Int(i64),
    Num(f64),
    Str(String),
    Arr(Vec<Json>),
    Obj(Vec<(&'static str, Json)>),
}

/// `f64` to 17 significant digits, e.g. `1.2000000000000000e1`; the value
/// round-trips exactly through any correct parser.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        // Not representable in JSON; results are expected to be finite.
        "null".into()
    }
}

impl Json {
    pub fn num(v: f64) -> Self {
        Json::Num(v)
    }

    pub fn int(v: usize) -> Self {
        Json::Int(v as i64)
    }

    pub fn str(v: impl Into<String>) -> Self {
        Json::Str(v.into())
    }

    pub fn from_vector(v: &nalgebra::DVector<f64>) -> Self {
        Json::Arr(v.iter().map(|&x| Json::Num(x)).collect())
    }

    pub fn from_matrix(m: &nalgebra::DMatrix<f64>) -> Self {
        Json::Arr(
            (0..m.nrows())
                .map(|r| Json::Arr((0..m.ncols()).map(|c| Json::Num(m[(r, c)])).collect()))
                .collect(),
        )
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Json::Arr(v.iter().map(|&x| Json::Num(x)).collect())
    }

    /// Renders with two-space indentation and a trailing newline.
    pub fn render(&self) -> String {
        let mut out = String::new();
        self.write(&mut out, 0);
        out.push('\n');
        out
    }

    fn write(&self, out: &mut String, indent: usize) {
        match self {
            Json::Null => out.push_str("null"),
            Json::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
            Json::Int(i) => out.push_str(&i.to_string()),
            Json::Num(v) => out.push_str(&fmt_f64(*v)),
            Json::Str(s) => write_escaped(out, s),
            Json::Arr(items) => {
                if items.is_empty() {
                    out.push_str("[]");
                    return;
                }
                // Flat arrays of scalars stay on one line; nested ones wrap.
                let scalar = items
                    .iter()
                    .all(|i| !matches!(i, Json::Arr(_) | Json::Obj(_)));
                if scalar {
                    out.push('[');
                    for (k, item) in items.iter().enumerate() {
                        if k > 0 {
                            out.push_str(", ");
                        }
                        item.write(out, indent);
                    }
                    out.push(']');
                } else {
                    out.push('[');
                    for (k, item) in items.iter().enumerate() {
                        if k > 0 {
                            out.push(',');
                        }
                        out.push('\n');
                        push_indent(out, indent + 1);
                        item.write(out, indent + 1);
                    }
                    out.push('\n');
                    push_indent(out, indent);
                    out.push(']');
                }
            }
            Json::Obj(fields) => {
                if fields.is_empty() {
                    out.push_str("{}");
                    return;
                }
                out.push('{');
                for (k, (key, value)) in fields.iter().enumerate() {
                    if k > 0 {
                        out.push(',');
                    }
                    out.push('\n');
                    push_indent(out, indent + 1);
                    write_escaped(out, key);
                    out.push_str(": ");
                    value.write(out, indent + 1);
                }
                out.push('\n');
                push_indent(out, indent);
                out.push('}');
            }
        }
    }
}

fn push_indent(out: &mut String, level: usize) {
    for _ in 0..level {
        out.push_str("  ");
    }
}

fn write_escaped(out: &mut String, s: &str) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out.push('"');
}

/// Writes `content` to `path` atomically: the bytes land in a temporary
/// file in the same directory, which is then renamed over the target.
pub fn write_atomic(path: &Path, content: &str) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => std::path::PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).map_err(|e| {
        CliError::failure("io", format!("cannot create {}: {e}", dir.display()))
    })?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| {
        CliError::failure("io", format!("cannot create temp file in {}: {e}", dir.display()))
    })?;
    tmp.write_all(content.as_bytes())
        .map_err(|e| CliError::failure("io", format!("cannot write {}: {e}", path.display())))?;
    tmp.persist(path).map_err(|e| {
        CliError::failure("io", format!("cannot persist {}: {e}", path.display()))
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_are_17_significant_digits() {
        assert_eq!(fmt_f64(12.0), "1.2000000000000000e1");
        assert_eq!(fmt_f64(0.5), "5.0000000000000000e-1");
        assert_eq!(fmt_f64(0.0), "0.0000000000000000e0");
        let third: f64 = 1.0 / 3.0;
        assert_eq!(fmt_f64(third).parse::<f64>().unwrap().to_bits(), third.to_bits());
    }

    #[test]
    fn rendering_is_valid_and_stable() {
        let v = Json::Obj(vec![
            ("name", Json::str("a\"b")),
            ("values", Json::from_slice(&[1.0, 2.0])),
            ("flag", Json::Bool(true)),
            ("missing", Json::Null),
        ]);
        let first = v.render();
        assert_eq!(first, v.render());
        assert!(first.contains("\"a\\\"b\""));
        assert!(first.ends_with('\n'));
    }
}
