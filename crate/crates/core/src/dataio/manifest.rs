//! Subject manifest CSV: reserved columns, covariates and `tab_*` features.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::residualize::{CovariateSchema, Covariates};
use crate::{Error, Result};

pub const RESERVED_COLUMNS: [&str; 6] = ["subject_id", "t1", "gm", "split", "raw_score", "residual_score"];

/// Columns with this prefix are numeric tabular features fed to the model.
pub const TABULAR_PREFIX: &str = "tab_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (expected train, val or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub t1_path: PathBuf,
    pub gm_path: PathBuf,
    pub covariates: Covariates,
    pub tabular: Vec<f64>,
    pub raw_score: Option<f64>,
    pub residual_score: Option<f64>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub covariate_columns: Vec<String>,
    pub tabular_columns: Vec<String>,
    pub records: Vec<SubjectRecord>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn with_split(&self, split: Split) -> Vec<&SubjectRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn get(&self, subject_id: &str) -> Option<&SubjectRecord> {
        self.records.iter().find(|r| r.subject_id == subject_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadOptions {
    /// Require that every referenced volume file exists.
    pub check_files: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { check_files: true }
    }
}

fn parse_optional(raw: &str, column: &str) -> std::result::Result<Option<f64>, String> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(None);
    }
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(format!("column {column}: malformed scalar {raw:?}")),
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads a manifest. Relative volume paths resolve against the manifest's
/// directory. With a schema, every schema field must be a column; other
/// non-reserved, non-`tab_` columns are carried along as covariates.
/// All per-row problems are collected into a single error.
pub fn load_manifest(path: &Path, schema: Option<&CovariateSchema>, options: LoadOptions) -> Result<Manifest> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();

    let column = |name: &str| headers.iter().position(|h| h == name);
    let mut header_problems = Vec::new();
    let mut seen = BTreeSet::new();
    for h in &headers {
        if !seen.insert(h.as_str()) {
            header_problems.push(format!("duplicate column {h:?}"));
        }
    }
    for name in ["subject_id", "t1", "gm", "split"] {
        if column(name).is_none() {
            header_problems.push(format!("missing reserved column {name:?}"));
        }
    }
    if let Some(schema) = schema {
        for name in schema.field_names() {
            if column(name).is_none() {
                header_problems.push(format!("missing covariate column {name:?}"));
            }
        }
    }
    if !header_problems.is_empty() {
        return Err(Error::data(format!(
            "{}: {}",
            path.display(),
            header_problems.join("; ")
        )));
    }

    let covariate_columns: Vec<String> = headers
        .iter()
        .filter(|h| !RESERVED_COLUMNS.contains(&h.as_str()) && !h.starts_with(TABULAR_PREFIX))
        .cloned()
        .collect();
    let tabular_columns: Vec<String> = headers
        .iter()
        .filter(|h| h.starts_with(TABULAR_PREFIX))
        .cloned()
        .collect();
    let base = path.parent().unwrap_or(Path::new("."));

    let mut problems = Vec::new();
    let mut records = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("line {line}: {e}"));
                continue;
            }
        };
        let field = |name: &str| column(name).and_then(|c| row.get(c)).unwrap_or("");
        let id = field("subject_id").to_string();
        let mut row_problems = Vec::new();
        if id.is_empty() {
            row_problems.push("empty subject_id".to_string());
        } else if !ids.insert(id.clone()) {
            row_problems.push(format!("duplicate subject_id {id:?}"));
        }
        let split = Split::from_str(field("split")).map_err(|e| row_problems.push(e)).ok();
        let raw_score = parse_optional(field("raw_score"), "raw_score")
            .map_err(|e| row_problems.push(e))
            .ok()
            .flatten();
        let residual_score = parse_optional(field("residual_score"), "residual_score")
            .map_err(|e| row_problems.push(e))
            .ok()
            .flatten();
        let mut tabular = Vec::with_capacity(tabular_columns.len());
        for name in &tabular_columns {
            match parse_optional(field(name), name) {
                Ok(Some(v)) => tabular.push(v),
                Ok(None) => row_problems.push(format!("column {name}: missing value")),
                Err(e) => row_problems.push(e),
            }
        }
        let covariates: Covariates = covariate_columns
            .iter()
            .map(|name| (name.clone(), field(name).to_string()))
            .collect();
        if let Some(schema) = schema {
            for name in schema.field_names() {
                if covariates.get(name).is_none_or(|v| v.is_empty()) {
                    row_problems.push(format!("covariate {name}: missing value"));
                }
            }
        }
        let mut paths = [PathBuf::new(), PathBuf::new()];
        for (slot, name) in paths.iter_mut().zip(["t1", "gm"]) {
            let raw = field(name);
            if raw.is_empty() {
                row_problems.push(format!("column {name}: empty path"));
                continue;
            }
            *slot = resolve(base, raw);
            if options.check_files && !slot.is_file() {
                row_problems.push(format!("column {name}: missing file {}", slot.display()));
            }
        }
        if !row_problems.is_empty() {
            let who = if id.is_empty() {
                String::new()
            } else {
                format!(" ({id})")
            };
            problems.push(format!("line {line}{who}: {}", row_problems.join(", ")));
            continue;
        }
        let [t1_path, gm_path] = paths;
        records.push(SubjectRecord {
            subject_id: id,
            t1_path,
            gm_path,
            covariates,
            tabular,
            raw_score,
            residual_score,
            split: split.expect("validated above"),
        });
    }
    if !problems.is_empty() {
        return Err(Error::data(format!(
            "{}: {} bad row(s):\n  {}",
            path.display(),
            problems.len(),
            problems.join("\n  ")
        )));
    }
    Ok(Manifest {
        covariate_columns,
        tabular_columns,
        records,
    })
}

fn format_optional(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn relative_to<'a>(path: &'a Path, base: &Path) -> &'a Path {
    path.strip_prefix(base).unwrap_or(path)
}

/// Writes a manifest; volume paths under the manifest's directory are
/// stored relative to it.
pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let csv_err = |e: csv::Error| Error::data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let header = RESERVED_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain(manifest.covariate_columns.iter().cloned())
        .chain(manifest.tabular_columns.iter().cloned());
    w.write_record(header).map_err(csv_err)?;
    for r in &manifest.records {
        if r.tabular.len() != manifest.tabular_columns.len() {
            return Err(Error::data(format!(
                "subject {}: {} tabular values for {} columns",
                r.subject_id,
                r.tabular.len(),
                manifest.tabular_columns.len()
            )));
        }
        let mut row = vec![
            r.subject_id.clone(),
            relative_to(&r.t1_path, base).display().to_string(),
            relative_to(&r.gm_path, base).display().to_string(),
            r.split.to_string(),
            format_optional(r.raw_score),
            format_optional(r.residual_score),
        ];
        for c in &manifest.covariate_columns {
            row.push(r.covariates.get(c).cloned().unwrap_or_default());
        }
        row.extend(r.tabular.iter().map(f64::to_string));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row of the residualized-target CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualRow {
    pub subject_id: String,
    pub raw_score: f64,
    pub residual_score: f64,
}

pub fn write_residuals(path: &Path, rows: &[ResidualRow]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["subject_id", "raw_score", "residual_score"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.subject_id.clone(),
            r.raw_score.to_string(),
            r.residual_score.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_residuals(path: &Path) -> Result<Vec<ResidualRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    let mut problems = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = match rec {
            Ok(r) if r.len() == 3 => r,
            Ok(r) => {
                problems.push(format!("line {line}: expected 3 fields, found {}", r.len()));
                continue;
            }
            Err(e) => {
                problems.push(format!("line {line}: {e}"));
                continue;
            }
        };
        let id = rec[0].to_string();
        if !ids.insert(id.clone()) {
            problems.push(format!("line {line}: duplicate subject_id {id:?}"));
            continue;
        }
        match (
            parse_optional(&rec[1], "raw_score"),
            parse_optional(&rec[2], "residual_score"),
        ) {
            (Ok(Some(raw_score)), Ok(Some(residual_score))) => rows.push(ResidualRow {
                subject_id: id,
                raw_score,
                residual_score,
            }),
            (a, b) => {
                let msg = [a.err(), b.err()].into_iter().flatten().collect::<Vec<_>>().join(", ");
                let msg = if msg.is_empty() {
                    "missing value".to_string()
                } else {
                    msg
                };
                problems.push(format!("line {line} ({id}): {msg}"));
            }
        }
    }
    if !problems.is_empty() {
        return Err(Error::data(format!("{}: {}", path.display(), problems.join("; "))));
    }
    Ok(rows)
}

/// Copies residual scores into matching manifest records.
pub fn attach_residuals(manifest: &mut Manifest, rows: &[ResidualRow]) {
    for row in rows {
        if let Some(r) = manifest.records.iter_mut().find(|r| r.subject_id == row.subject_id) {
            r.residual_score = Some(row.residual_score);
        }
    }
}

pub fn write_predictions(path: &Path, rows: &[(String, f64)]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["subject_id", "prediction"]).map_err(csv_err)?;
    for (id, p) in rows {
        w.write_record([id.clone(), p.to_string()]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_tags_round_trip() {
        for s in [Split::Train, Split::Val, Split::Test] {
            assert_eq!(s.as_str().parse::<Split>().unwrap(), s);
        }
        assert!("holdout".parse::<Split>().is_err());
    }

    #[test]
    fn empty_manifest_has_no_records() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "subject_id,t1,gm,split,raw_score,residual_score\n").unwrap();
        let m = load_manifest(&p, None, LoadOptions::default()).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn row_errors_are_aggregated() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(
            &p,
            "subject_id,t1,gm,split,raw_score,residual_score\n\
             a,a.vvol,a_gm.vvol,train,1.5,\n\
             a,b.vvol,b_gm.vvol,val,x,\n",
        )
        .unwrap();
        let err = load_manifest(&p, None, LoadOptions::default()).unwrap_err().to_string();
        assert!(err.contains("2 bad row(s)"), "{err}");
        assert!(err.contains("duplicate subject_id \"a\""), "{err}");
        assert!(err.contains("malformed scalar"), "{err}");
        assert!(err.contains("missing file"), "{err}");
    }
}
