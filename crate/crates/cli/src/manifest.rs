//! CSV inputs: the cohort manifest and paired-score tables.
//!
//! Cohort manifest header (column order free, extra columns ignored):
//!
//! | column          | required | meaning                                   |
//! |-----------------|----------|-------------------------------------------|
//! | `id`            | yes      | subject identifier                        |
//! | `pred_count`    | yes      | predicted lesion count or rating, `>= 0`  |
//! | `true_count`    | yes      | reference count or rating, `>= 0`         |
//! | `presence_pred` | yes      | `true/false`, `1/0` or `yes/no`           |
//! | `presence_true` | yes      | as above                                  |
//! | `region`        | no       | e.g. `BG`, `CSO`, `MB`                    |
//! | `pred_mask`     | no       | predicted mask, relative to the manifest  |
//! | `gt_mask`       | no       | reference mask, relative to the manifest  |
//!
//! A subject may span several rows, one per region.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use csvd_core::cohort::SubjectRecord;

use crate::error::{CliError, CliResult};

pub const REQUIRED_COLUMNS: [&str; 5] = ["id", "pred_count", "true_count", "presence_pred", "presence_true"];

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    /// 1-based line in the file.
    pub line: u64,
    pub record: SubjectRecord,
    pub pred_mask: Option<PathBuf>,
    pub gt_mask: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
struct RawRow {
    id: String,
    pred_count: f64,
    true_count: f64,
    presence_pred: String,
    presence_true: String,
    #[serde(default)]
    region: Option<String>,
    #[serde(default)]
    pred_mask: Option<String>,
    #[serde(default)]
    gt_mask: Option<String>,
}

fn parse_flag(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "y" => Some(true),
        "false" | "0" | "no" | "n" => Some(false),
        _ => None,
    }
}

fn non_empty(s: Option<String>) -> Option<String> {
    s.map(|v| v.trim().to_string()).filter(|v| !v.is_empty())
}

fn check_row(raw: RawRow, line: u64, base: &Path) -> Result<ManifestRow, String> {
    let id = raw.id.trim().to_string();
    if id.is_empty() {
        return Err("empty id".into());
    }
    for (name, v) in [("pred_count", raw.pred_count), ("true_count", raw.true_count)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(format!("{name} {v} must be a finite non-negative number"));
        }
    }
    let flag = |name: &str, s: &str| parse_flag(s).ok_or_else(|| format!("{name} `{s}` is not a boolean"));
    let presence_pred = flag("presence_pred", &raw.presence_pred)?;
    let presence_true = flag("presence_true", &raw.presence_true)?;
    let pred_mask = non_empty(raw.pred_mask).map(|p| base.join(p));
    let gt_mask = non_empty(raw.gt_mask).map(|p| base.join(p));
    if pred_mask.is_some() != gt_mask.is_some() {
        return Err("pred_mask and gt_mask must be given together".into());
    }
    Ok(ManifestRow {
        line,
        record: SubjectRecord {
            id,
            pred_count: raw.pred_count,
            true_count: raw.true_count,
            presence_pred,
            presence_true,
            region: non_empty(raw.region),
        },
        pred_mask,
        gt_mask,
    })
}

fn open(path: &Path) -> CliResult<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))
}

fn require_columns(headers: &csv::StringRecord, required: &[&str], path: &Path) -> CliResult<()> {
    let missing: Vec<&str> = required.iter().copied().filter(|c| !headers.iter().any(|h| h == *c)).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CliError::input(format!("{}: missing column(s) {}", path.display(), missing.join(", "))))
    }
}

/// Reads and validates every row. All malformed rows are reported together,
/// each with its line number, and nothing is returned if any is bad.
pub fn read_manifest(path: &Path) -> CliResult<Vec<ManifestRow>> {
    let mut rdr = open(path)?;
    let headers = rdr.headers().map_err(|e| CliError::input(format!("{}: {e}", path.display())))?.clone();
    require_columns(&headers, &REQUIRED_COLUMNS, path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for result in rdr.records() {
        let record = match result {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                errors.push(format!("line {line}: {e}"));
                continue;
            }
        };
        let line = record.position().map_or(0, |p| p.line());
        match record.deserialize::<RawRow>(Some(&headers)) {
            Ok(raw) => match check_row(raw, line, base) {
                Ok(row) => rows.push(row),
                Err(e) => errors.push(format!("line {line}: {e}")),
            },
            Err(e) => errors.push(format!("line {line}: {}", e.kind_message())),
        }
    }
    if !errors.is_empty() {
        return Err(CliError::input(format!("malformed manifest {}:\n  {}", path.display(), errors.join("\n  "))));
    }
    if rows.is_empty() {
        return Err(CliError::input(format!("manifest {} has no rows", path.display())));
    }
    Ok(rows)
}

trait KindMessage {
    fn kind_message(&self) -> String;
}

impl KindMessage for csv::Error {
    /// The error without csv's own position prefix.
    fn kind_message(&self) -> String {
        match self.kind() {
            csv::ErrorKind::Deserialize { err, .. } => match err.field() {
                Some(f) => format!("column {}: {}", f + 1, err.kind()),
                None => err.kind().to_string(),
            },
            _ => self.to_string(),
        }
    }
}

/// Paired scores: two numeric columns named `a_col` and `b_col`.
pub fn read_pairs(path: &Path, a_col: &str, b_col: &str) -> CliResult<(Vec<f64>, Vec<f64>)> {
    let mut rdr = open(path)?;
    let headers = rdr.headers().map_err(|e| CliError::input(format!("{}: {e}", path.display())))?.clone();
    require_columns(&headers, &[a_col, b_col], path)?;
    let ia = headers.iter().position(|h| h == a_col).expect("checked");
    let ib = headers.iter().position(|h| h == b_col).expect("checked");
    let (mut a, mut b) = (Vec::new(), Vec::new());
    let mut errors = Vec::new();
    for result in rdr.records() {
        let record = match result {
            Ok(r) => r,
            Err(e) => {
                errors.push(format!("line {}: {e}", e.position().map_or(0, |p| p.line())));
                continue;
            }
        };
        let line = record.position().map_or(0, |p| p.line());
        let num = |i: usize, name: &str| -> Result<f64, String> {
            let s = record.get(i).unwrap_or("");
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format!("line {line}: {name} `{s}` is not a finite number"))
        };
        match (num(ia, a_col), num(ib, b_col)) {
            (Ok(x), Ok(y)) => {
                a.push(x);
                b.push(y);
            }
            (Err(e), _) | (_, Err(e)) => errors.push(e),
        }
    }
    if !errors.is_empty() {
        return Err(CliError::input(format!("malformed pairs file {}:\n  {}", path.display(), errors.join("\n  "))));
    }
    Ok((a, b))
}
