//! Protected-template file format: per record a header line
//! `k=<k> params=<params_id> source_dim=<n>` followed by one line of
//! space-separated values.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::transform::ProtectedTemplate;

#[derive(Debug, Error)]
pub enum TemplateIoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("record {record}: malformed header `{line}`")]
    MalformedHeader { record: usize, line: String },
    #[error("record {record}: expected {expected} values, got {got}")]
    ValueCount { record: usize, expected: usize, got: usize },
    #[error("record {record}: cannot parse value `{text}`")]
    BadNumber { record: usize, text: String },
    #[error("record {record}: value {index} is not finite")]
    NonFinite { record: usize, index: usize },
    #[error("record {record}: header present but values line missing")]
    MissingValues { record: usize },
    #[error("params id `{0}` cannot contain whitespace")]
    BadParamsId(String),
}

pub fn save_protected_templates(
    templates: &[ProtectedTemplate],
    path: impl AsRef<Path>,
) -> Result<(), TemplateIoError> {
    let path = path.as_ref();
    let io_err = |source| TemplateIoError::Io { path: path.display().to_string(), source };
    for t in templates {
        if t.params_id.chars().any(char::is_whitespace) || t.params_id.is_empty() {
            return Err(TemplateIoError::BadParamsId(t.params_id.clone()));
        }
    }
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    for t in templates {
        writeln!(w, "k={} params={} source_dim={}", t.values.len(), t.params_id, t.source_dim)
            .map_err(io_err)?;
        for (i, v) in t.values.iter().enumerate() {
            if i > 0 {
                w.write_all(b" ").map_err(io_err)?;
            }
            write!(w, "{v}").map_err(io_err)?;
        }
        w.write_all(b"\n").map_err(io_err)?;
    }
    Ok(())
}

pub fn load_protected_templates(
    path: impl AsRef<Path>,
) -> Result<Vec<ProtectedTemplate>, TemplateIoError> {
    let path = path.as_ref();
    let io_err = |source| TemplateIoError::Io { path: path.display().to_string(), source };
    let file = File::open(path).map_err(io_err)?;
    let mut lines = BufReader::new(file).lines();
    let mut out = Vec::new();
    let mut record = 0usize;
    while let Some(header) = lines.next() {
        let header = header.map_err(io_err)?;
        if header.trim().is_empty() {
            continue;
        }
        record += 1;
        let (k, params_id, source_dim) =
            parse_header(&header).ok_or_else(|| TemplateIoError::MalformedHeader {
                record,
                line: header.clone(),
            })?;
        let values_line = lines
            .next()
            .ok_or(TemplateIoError::MissingValues { record })?
            .map_err(io_err)?;
        let mut values = Vec::with_capacity(k);
        for tok in values_line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| TemplateIoError::BadNumber {
                record,
                text: tok.to_string(),
            })?;
            values.push(v);
        }
        if values.len() != k {
            return Err(TemplateIoError::ValueCount { record, expected: k, got: values.len() });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(TemplateIoError::NonFinite { record, index });
        }
        out.push(ProtectedTemplate { values, params_id, source_dim });
    }
    Ok(out)
}

fn parse_header(line: &str) -> Option<(usize, String, usize)> {
    let mut k = None;
    let mut params = None;
    let mut source_dim = None;
    for field in line.split_whitespace() {
        if let Some(v) = field.strip_prefix("k=") {
            k = v.parse().ok();
        } else if let Some(v) = field.strip_prefix("params=") {
            params = Some(v.to_string());
        } else {
            let v = field.strip_prefix("source_dim=")?;
            source_dim = v.parse().ok();
        }
    }
    Some((k?, params?, source_dim?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_multiple_records() {
        let templates = vec![
            ProtectedTemplate {
                values: vec![1.5, -2.25, 1e-17],
                params_id: "alice".into(),
                source_dim: 16,
            },
            ProtectedTemplate {
                values: vec![0.0, 3.333333333333333],
                params_id: "bob#2".into(),
                source_dim: 16,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("templates.txt");
        save_protected_templates(&templates, &path).unwrap();
        let back = load_protected_templates(&path).unwrap();
        assert_eq!(back, templates);
    }

    #[test]
    fn header_and_count_errors_name_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "k=2 params=x source_dim=4\n1.0\n").unwrap();
        assert!(matches!(
            load_protected_templates(&path),
            Err(TemplateIoError::ValueCount { record: 1, expected: 2, got: 1 })
        ));
        std::fs::write(&path, "k=two params=x source_dim=4\n1.0 2.0\n").unwrap();
        assert!(matches!(
            load_protected_templates(&path),
            Err(TemplateIoError::MalformedHeader { record: 1, .. })
        ));
    }

    #[test]
    fn whitespace_params_id_is_rejected_on_write() {
        let t = ProtectedTemplate { values: vec![1.0], params_id: "a b".into(), source_dim: 4 };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            save_protected_templates(&[t], dir.path().join("x.txt")),
            Err(TemplateIoError::BadParamsId(_))
        ));
    }
}
