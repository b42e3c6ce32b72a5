//! Text format: header `id,group,label,f0,...,f{D-1}`, one instance per line.
//! Floats are written with 17 significant digits so a save/load cycle is
//! exact. Row numbers in errors are 1-based file lines (the header is line 1).

use std::fmt::Write as _;
use std::path::Path;

use super::{Dataset, LabeledInstance};
use crate::error::{DplError, Result};
use crate::io_util::{fmt_f64, read_file, write_atomic};

pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, to_csv_string(dataset).as_bytes())
}

pub(crate) fn to_csv_string(dataset: &Dataset) -> String {
    let mut out = String::from("id,group,label");
    for i in 0..dataset.feature_dim() {
        let _ = write!(out, ",f{i}");
    }
    out.push('\n');
    for inst in dataset.instances() {
        let _ = write!(out, "{},{},{}", inst.id, inst.group, inst.label);
        for v in inst.feature.iter() {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push('\n');
    }
    out
}

/// Load a CSV dataset; the class count is one past the largest label seen.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    load_inner(path, None)
}

/// Load a CSV dataset whose labels must all lie below `num_classes`.
pub fn load_csv_with_classes(path: &Path, num_classes: usize) -> Result<Dataset> {
    load_inner(path, Some(num_classes))
}

fn load_inner(path: &Path, num_classes: Option<usize>) -> Result<Dataset> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|_| DplError::format("file is not valid UTF-8").with_path(path))?;
    parse_csv(text, num_classes).map_err(|e| e.with_path(path))
}

pub(crate) fn parse_csv(text: &str, num_classes: Option<usize>) -> Result<Dataset> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    let (_, header) = lines
        .next()
        .ok_or_else(|| DplError::format("empty file, expected header `id,group,label,f0,...`"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 4 || cols[..3] != ["id", "group", "label"] {
        return Err(DplError::format_at(
            1,
            "missing header `id,group,label,f0,...`",
        ));
    }
    let dim = cols.len() - 3;
    for (i, c) in cols[3..].iter().enumerate() {
        if *c != format!("f{i}") {
            return Err(DplError::format_at(
                1,
                format!("header column `{c}` should be `f{i}`"),
            ));
        }
    }

    let mut instances = Vec::new();
    let mut max_label = 0usize;
    for (line_no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != dim + 3 {
            return Err(DplError::format_at(
                line_no,
                format!("expected {} fields, found {}", dim + 3, fields.len()),
            ));
        }
        let int = |s: &str, what: &str| -> Result<u64> {
            s.parse::<u64>()
                .map_err(|_| DplError::format_at(line_no, format!("bad {what} `{s}`")))
        };
        let id = int(fields[0], "id")?;
        let group = u32::try_from(int(fields[1], "group")?)
            .map_err(|_| DplError::format_at(line_no, "group does not fit in 32 bits"))?;
        let label = int(fields[2], "label")? as usize;
        if let Some(n) = num_classes {
            if label >= n {
                return Err(DplError::format_at(
                    line_no,
                    format!("label {label} not below class count {n}"),
                ));
            }
        }
        let mut feature = Vec::with_capacity(dim);
        for (j, s) in fields[3..].iter().enumerate() {
            let v: f64 = s.parse().map_err(|_| {
                DplError::format_at(line_no, format!("bad float `{s}` in column f{j}"))
            })?;
            if !v.is_finite() {
                return Err(DplError::format_at(
                    line_no,
                    format!("non-finite value in column f{j}"),
                ));
            }
            feature.push(v);
        }
        max_label = max_label.max(label);
        instances.push(LabeledInstance {
            id,
            group,
            label,
            feature: feature.into(),
            fine: None,
        });
    }
    if instances.is_empty() {
        return Err(DplError::format("file has a header but no instances"));
    }
    Dataset::new(instances, num_classes.unwrap_or(max_label + 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, GeneratorSpec};

    #[test]
    fn round_trip_exact() {
        let mut spec = GeneratorSpec::desk(2);
        spec.fine_counts = vec![5, 5, 5, 3, 2, 1];
        let ds = generate_synthetic(&spec).unwrap();
        let back = parse_csv(&to_csv_string(&ds), Some(4)).unwrap();
        assert!(ds.same_records(&back));
    }

    #[test]
    fn ragged_row_names_line() {
        let text = "id,group,label,f0,f1\n0,0,0,1.0,2.0\n1,0,1,3.0\n";
        let err = parse_csv(text, None).unwrap_err();
        assert!(
            matches!(err, DplError::Format { row: Some(3), .. }),
            "{err}"
        );
        assert!(err.to_string().contains("row 3"));
    }

    #[test]
    fn empty_and_headerless_rejected() {
        assert!(matches!(parse_csv("", None), Err(DplError::Format { .. })));
        assert!(matches!(
            parse_csv("0,0,0,1.0\n", None),
            Err(DplError::Format { .. })
        ));
        assert!(matches!(
            parse_csv("id,group,label,f0\n", None),
            Err(DplError::Format { .. })
        ));
    }

    #[test]
    fn label_bound_enforced() {
        let text = "id,group,label,f0\n0,0,0,1.0\n1,0,3,2.0\n";
        assert!(matches!(
            parse_csv(text, Some(3)),
            Err(DplError::Format { row: Some(3), .. })
        ));
        assert_eq!(parse_csv(text, None).unwrap().num_classes(), 4);
    }

    #[test]
    fn garbage_values_rejected() {
        assert!(parse_csv("id,group,label,f0\n0,0,0,abc\n", None).is_err());
        assert!(parse_csv("id,group,label,f0\n0,0,0,NaN\n", None).is_err());
        assert!(parse_csv("id,group,label,f0\n-1,0,0,1\n", None).is_err());
    }
}
