//! Confound residualization of targets: covariates are encoded into a design
//! matrix with an intercept, an OLS fit is obtained by Householder QR, and
//! the residuals replace the raw scores as regression targets.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Raw covariate values of one subject, keyed by field name.
pub type Covariates = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldKind {
    Continuous,
    Categorical { levels: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub name: String,
    #[serde(flatten)]
    pub kind: FieldKind,
}

impl Field {
    pub fn continuous(name: &str) -> Self {
        Self {
            name: name.into(),
            kind: FieldKind::Continuous,
        }
    }

    pub fn categorical(name: &str, levels: &[&str]) -> Self {
        Self {
            name: name.into(),
            kind: FieldKind::Categorical {
                levels: levels.iter().map(|s| s.to_string()).collect(),
            },
        }
    }
}

/// Ordered list of covariates entering the confound model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSchema {
    pub fields: Vec<Field>,
}

impl CovariateSchema {
    pub fn new(fields: Vec<Field>) -> Result<Self> {
        let s = Self { fields };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for f in &self.fields {
            if f.name.is_empty() {
                return Err(Error::config("covariate names must be non-empty"));
            }
            if !names.insert(f.name.as_str()) {
                return Err(Error::config(format!("duplicate covariate {:?}", f.name)));
            }
            if let FieldKind::Categorical { levels } = &f.kind {
                if levels.is_empty() {
                    return Err(Error::config(format!(
                        "categorical covariate {:?} has an empty level set",
                        f.name
                    )));
                }
                let uniq: HashSet<&String> = levels.iter().collect();
                if uniq.len() != levels.len() {
                    return Err(Error::config(format!(
                        "categorical covariate {:?} repeats a level",
                        f.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn field_names(&self) -> impl Iterator<Item = &str> {
        self.fields.iter().map(|f| f.name.as_str())
    }

    /// `1 + #continuous + Σ(levels − 1)`.
    pub fn design_width(&self) -> usize {
        1 + self
            .fields
            .iter()
            .map(|f| match &f.kind {
                FieldKind::Continuous => 1,
                FieldKind::Categorical { levels } => levels.len() - 1,
            })
            .sum::<usize>()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: Self =
            serde_json::from_str(&text).map_err(|e| Error::config(format!("schema {}: {e}", path.display())))?;
        s.validate()?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("schema serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Mean and standard deviation of a continuous covariate on the fitting set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub field: String,
    pub mean: f64,
    pub sd: f64,
}

/// Dense row-major design matrix with column labels.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub labels: Vec<String>,
}

impl DesignMatrix {
    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<String>) -> Result<Self> {
        let cols = labels.len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::config("design rows differ in length from the label list"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
            labels,
        })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.rows).map(move |r| self.get(r, c))
    }

    /// `y − X·β`.
    pub fn residuals(&self, y: &[f64], beta: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| y[r] - self.row(r).iter().zip(beta).map(|(x, b)| x * b).sum::<f64>())
            .collect()
    }
}

fn value<'a>(subject: &str, covs: &'a Covariates, field: &str) -> Result<&'a str> {
    match covs.get(field).map(|v| v.trim()) {
        Some(v) if !v.is_empty() => Ok(v),
        _ => Err(Error::data(format!(
            "subject {subject}: missing value for covariate {field}"
        ))),
    }
}

fn continuous(subject: &str, covs: &Covariates, field: &str) -> Result<f64> {
    let raw = value(subject, covs, field)?;
    raw.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
        Error::data(format!(
            "subject {subject}: covariate {field} has non-numeric value {raw:?}"
        ))
    })
}

/// Schema plus the standardization statistics learned on the fitting set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignEncoder {
    pub schema: CovariateSchema,
    pub standardization: Vec<Standardization>,
}

impl DesignEncoder {
    /// Learns continuous-covariate means and (sample) standard deviations.
    pub fn fit<'a>(
        schema: &CovariateSchema,
        rows: impl IntoIterator<Item = (&'a str, &'a Covariates)> + Clone,
    ) -> Result<Self> {
        schema.validate()?;
        let mut standardization = Vec::new();
        for f in &schema.fields {
            if f.kind != FieldKind::Continuous {
                continue;
            }
            let vals: Vec<f64> = rows
                .clone()
                .into_iter()
                .map(|(id, c)| continuous(id, c, &f.name))
                .collect::<Result<_>>()?;
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let sd = var.sqrt();
            if !(sd > 0.0 && sd.is_finite()) {
                return Err(Error::data(format!(
                    "continuous covariate {} is constant on the fitting set (collinear with the intercept)",
                    f.name
                )));
            }
            standardization.push(Standardization {
                field: f.name.clone(),
                mean,
                sd,
            });
        }
        Ok(Self {
            schema: schema.clone(),
            standardization,
        })
    }

    pub fn labels(&self) -> Vec<String> {
        let mut labels = vec!["intercept".to_string()];
        for f in &self.schema.fields {
            match &f.kind {
                FieldKind::Continuous => labels.push(f.name.clone()),
                FieldKind::Categorical { levels } => {
                    labels.extend(levels[1..].iter().map(|l| format!("{}={l}", f.name)))
                }
            }
        }
        labels
    }

    /// Intercept, standardized continuous columns and reference-coded
    /// one-hot columns (first level dropped), in schema order.
    pub fn encode<'a>(&self, rows: impl IntoIterator<Item = (&'a str, &'a Covariates)>) -> Result<DesignMatrix> {
        let labels = self.labels();
        let mut out = Vec::new();
        let mut n = 0;
        for (id, covs) in rows {
            let mut row = Vec::with_capacity(labels.len());
            row.push(1.0);
            let mut stats = self.standardization.iter();
            for f in &self.schema.fields {
                match &f.kind {
                    FieldKind::Continuous => {
                        let s = stats.next().expect("one entry per continuous field");
                        row.push((continuous(id, covs, &f.name)? - s.mean) / s.sd);
                    }
                    FieldKind::Categorical { levels } => {
                        let v = value(id, covs, &f.name)?;
                        let idx = levels.iter().position(|l| l == v).ok_or_else(|| {
                            Error::data(format!(
                                "subject {id}: covariate {} has unknown level {v:?} (allowed: {})",
                                f.name,
                                levels.join(", ")
                            ))
                        })?;
                        row.extend((1..levels.len()).map(|k| if k == idx { 1.0 } else { 0.0 }));
                    }
                }
            }
            out.extend(row);
            n += 1;
        }
        Ok(DesignMatrix {
            rows: n,
            cols: labels.len(),
            data: out,
            labels,
        })
    }
}

/// Coefficients and diagnostics of a least-squares fit.
#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    pub beta: Vec<f64>,
    pub r_squared: f64,
    pub residual_variance: f64,
}

const RANK_TOLERANCE: f64 = 1e-10;

/// `argmin ‖y − Xβ‖²` by Householder QR.
pub fn fit_ols(x: &DesignMatrix, y: &[f64]) -> Result<OlsFit> {
    let (n, p) = (x.rows, x.cols);
    if y.len() != n {
        return Err(Error::config(format!(
            "design has {n} rows but {} targets were given",
            y.len()
        )));
    }
    if n <= p {
        return Err(Error::data(format!(
            "OLS needs more rows than columns: {n} rows, {p} columns"
        )));
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::data(format!("target {i} is not finite")));
    }
    // Column-major working copy, reduced to R in place; `qty` becomes Qᵀy.
    let mut a: Vec<Vec<f64>> = (0..p).map(|c| x.column(c).collect()).collect();
    let mut qty = y.to_vec();
    for k in 0..p {
        let norm = a[k][k..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if a[k][k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = a[k][k..].to_vec();
        v[0] -= alpha;
        let vnorm2 = v.iter().map(|x| x * x).sum::<f64>();
        if vnorm2 == 0.0 {
            continue;
        }
        let reflect = |col: &mut [f64]| {
            let dot: f64 = col.iter().zip(&v).map(|(a, b)| a * b).sum();
            let s = 2.0 * dot / vnorm2;
            col.iter_mut().zip(&v).for_each(|(c, vi)| *c -= s * vi);
        };
        for col in a.iter_mut().skip(k) {
            reflect(&mut col[k..]);
        }
        reflect(&mut qty[k..]);
    }
    let diag: Vec<f64> = (0..p).map(|k| a[k][k].abs()).collect();
    let max_diag = diag.iter().cloned().fold(0.0, f64::max);
    let deficient: Vec<&str> = diag
        .iter()
        .enumerate()
        .filter(|(_, &d)| d <= RANK_TOLERANCE * max_diag)
        .map(|(k, _)| x.labels.get(k).map_or("?", String::as_str))
        .collect();
    if !deficient.is_empty() {
        return Err(Error::data(format!(
            "design matrix is rank deficient: column(s) {} are collinear with preceding columns",
            deficient.join(", ")
        )));
    }
    let mut beta = vec![0.0; p];
    for k in (0..p).rev() {
        let tail: f64 = (k + 1..p).map(|j| a[j][k] * beta[j]).sum();
        beta[k] = (qty[k] - tail) / a[k][k];
    }
    let r = x.residuals(y, &beta);
    let ssr: f64 = r.iter().map(|v| v * v).sum();
    let mean = y.iter().sum::<f64>() / n as f64;
    let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    Ok(OlsFit {
        beta,
        r_squared: if sst > 0.0 { 1.0 - ssr / sst } else { 1.0 },
        residual_variance: ssr / (n - p) as f64,
    })
}

/// A fitted confound model: encoder, coefficients and fit diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualizationModel {
    pub encoder: DesignEncoder,
    pub labels: Vec<String>,
    pub beta: Vec<f64>,
    pub r_squared: f64,
    pub residual_variance: f64,
}

impl ResidualizationModel {
    /// Learns standardization statistics and OLS coefficients on `rows`.
    pub fn fit<'a>(
        schema: &CovariateSchema,
        rows: impl IntoIterator<Item = (&'a str, &'a Covariates)> + Clone,
        y: &[f64],
    ) -> Result<Self> {
        let encoder = DesignEncoder::fit(schema, rows.clone())?;
        let x = encoder.encode(rows)?;
        let fit = fit_ols(&x, y)?;
        Ok(Self {
            labels: x.labels,
            encoder,
            beta: fit.beta,
            r_squared: fit.r_squared,
            residual_variance: fit.residual_variance,
        })
    }

    /// `y − Xβ` for a design encoded with this model's encoder.
    pub fn residualize(&self, x: &DesignMatrix, y: &[f64]) -> Result<Vec<f64>> {
        if x.labels != self.labels {
            return Err(Error::config(format!(
                "design columns [{}] do not match the fitted model's [{}]",
                x.labels.join(", "),
                self.labels.join(", ")
            )));
        }
        if y.len() != x.rows {
            return Err(Error::config(format!(
                "design has {} rows but {} targets were given",
                x.rows,
                y.len()
            )));
        }
        Ok(x.residuals(y, &self.beta))
    }

    /// Encodes `rows` and residualizes their targets.
    pub fn apply<'a>(&self, rows: impl IntoIterator<Item = (&'a str, &'a Covariates)>, y: &[f64]) -> Result<Vec<f64>> {
        let x = self.encoder.encode(rows)?;
        self.residualize(&x, y)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("model serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn covs(pairs: &[(&str, &str)]) -> Covariates {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn one_continuous_field_gives_two_columns() {
        let schema = CovariateSchema::new(vec![Field::continuous("age")]).unwrap();
        let rows = [covs(&[("age", "9")]), covs(&[("age", "10")]), covs(&[("age", "11")])];
        let ids = ["a", "b", "c"];
        let it = ids.iter().copied().zip(rows.iter());
        let enc = DesignEncoder::fit(&schema, it.clone()).unwrap();
        let x = enc.encode(it).unwrap();
        assert_eq!((x.rows, x.cols), (3, 2));
        assert_eq!(x.column(1).collect::<Vec<_>>(), [-1.0, 0.0, 1.0]);
    }

    #[test]
    fn four_levels_give_three_indicator_columns() {
        let schema = CovariateSchema::new(vec![Field::categorical("site", &["s1", "s2", "s3", "s4"])]).unwrap();
        assert_eq!(schema.design_width(), 4);
        let rows = [covs(&[("site", "s3")])];
        let enc = DesignEncoder::fit(&schema, [("a", &rows[0])]).unwrap();
        let x = enc.encode([("a", &rows[0])]).unwrap();
        assert_eq!(x.row(0), [1.0, 0.0, 1.0, 0.0]);
        assert_eq!(x.labels, ["intercept", "site=s2", "site=s3", "site=s4"]);
    }

    #[test]
    fn unknown_level_names_subject_and_field() {
        let schema = CovariateSchema::new(vec![Field::categorical("sex", &["F", "M"])]).unwrap();
        let row = covs(&[("sex", "X")]);
        let enc = DesignEncoder::fit(&schema, [("sub-7", &row)]).unwrap();
        let err = enc.encode([("sub-7", &row)]).unwrap_err().to_string();
        assert!(err.contains("sub-7") && err.contains("sex"), "{err}");
    }

    #[test]
    fn missing_value_is_an_error() {
        let schema = CovariateSchema::new(vec![Field::continuous("income")]).unwrap();
        let row = covs(&[("income", "")]);
        let err = DesignEncoder::fit(&schema, [("s", &row)]).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn intercept_only_centres() {
        let x = DesignMatrix::from_rows(&vec![vec![1.0]; 4], vec!["intercept".into()]).unwrap();
        let y = [1.0, 2.0, 3.0, 6.0];
        let fit = fit_ols(&x, &y).unwrap();
        let r = x.residuals(&y, &fit.beta);
        for (ri, yi) in r.iter().zip(y) {
            assert!((ri - (yi - 3.0)).abs() < 1e-14);
        }
    }

    #[test]
    fn exact_linear_fit() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0, i as f64, (i * i) as f64]).collect();
        let x = DesignMatrix::from_rows(&rows, vec!["intercept".into(), "a".into(), "b".into()]).unwrap();
        let y: Vec<f64> = rows.iter().map(|r| 2.0 - 0.5 * r[1] + 0.25 * r[2]).collect();
        let fit = fit_ols(&x, &y).unwrap();
        assert!(x.residuals(&y, &fit.beta).iter().all(|r| r.abs() < 1e-10));
    }

    #[test]
    fn collinear_columns_are_named() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![1.0, i as f64, 2.0 * i as f64]).collect();
        let x = DesignMatrix::from_rows(&rows, vec!["intercept".into(), "a".into(), "twice_a".into()]).unwrap();
        let err = fit_ols(&x, &[1.0; 6]).unwrap_err().to_string();
        assert!(err.contains("twice_a"), "{err}");
    }
}
