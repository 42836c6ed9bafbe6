//! Convex weighted averaging of independently trained members.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dataio::Dataset;
use crate::trainer::{mse, predict_dataset};
use crate::voxcnn::{load_checkpoint, VoxCnnModel};
use crate::{Error, Result, Scalar};

/// Grid resolution of the `grid` scheme.
pub const GRID_STEP: f64 = 0.05;
const GRID_UNITS: usize = 20;
const SPEC_HEADER: &str = "voxreg-ensemble 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightScheme {
    /// Two members: 2/3 to the lower validation MSE, 1/3 to the other.
    #[default]
    PaperFixed,
    /// Exhaustive search over a simplex grid for the lowest blended
    /// validation MSE.
    Grid,
}

impl fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightScheme::PaperFixed => "paper_fixed",
            WeightScheme::Grid => "grid",
        })
    }
}

impl FromStr for WeightScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper_fixed" => Ok(WeightScheme::PaperFixed),
            "grid" => Ok(WeightScheme::Grid),
            other => Err(Error::config(format!(
                "unknown weighting scheme {other:?} (expected paper_fixed or grid)"
            ))),
        }
    }
}

fn check_mses(val_mses: &[f64]) -> Result<()> {
    if val_mses.len() < 2 {
        return Err(Error::config(format!(
            "an ensemble needs at least two members, got {}",
            val_mses.len()
        )));
    }
    if let Some((i, m)) = val_mses.iter().enumerate().find(|(_, m)| !(m.is_finite() && **m > 0.0)) {
        return Err(Error::config(format!(
            "member {i} has validation MSE {m}; expected a finite positive value"
        )));
    }
    Ok(())
}

/// Weights from validation ranking: 2/3 to the better of two members, an
/// even split on a tie.
pub fn paper_fixed_weights(val_mses: &[f64]) -> Result<Vec<f64>> {
    check_mses(val_mses)?;
    if val_mses.len() != 2 {
        return Err(Error::config(format!(
            "the paper_fixed scheme needs exactly 2 members, got {}",
            val_mses.len()
        )));
    }
    let (a, b) = (val_mses[0], val_mses[1]);
    Ok(if a == b {
        vec![0.5, 0.5]
    } else if a < b {
        vec![2.0 / 3.0, 1.0 / 3.0]
    } else {
        vec![1.0 / 3.0, 2.0 / 3.0]
    })
}

fn compositions(parts: usize, total: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if parts == 1 {
        prefix.push(total);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for k in (0..=total).rev() {
        prefix.push(k);
        compositions(parts - 1, total - k, prefix, out);
        prefix.pop();
    }
}

/// Candidate weight vectors of the grid scheme: every point of the simplex
/// grid with step [`GRID_STEP`], plus, for two members, both 2/3–1/3 splits.
pub fn grid_candidates(members: usize) -> Vec<Vec<f64>> {
    let mut units = Vec::new();
    compositions(members, GRID_UNITS, &mut Vec::new(), &mut units);
    let mut out: Vec<Vec<f64>> = units
        .into_iter()
        .map(|u| u.into_iter().map(|k| k as f64 / GRID_UNITS as f64).collect())
        .collect();
    if members == 2 {
        out.push(vec![2.0 / 3.0, 1.0 / 3.0]);
        out.push(vec![1.0 / 3.0, 2.0 / 3.0]);
    }
    out
}

/// `Σ wᵢ·predᵢ`, summed in member order.
pub fn blend(member_predictions: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let n = member_predictions.first().map_or(0, Vec::len);
    (0..n)
        .map(|s| {
            member_predictions
                .iter()
                .zip(weights)
                .fold(0.0, |acc, (p, w)| acc + w * p[s])
        })
        .collect()
}

/// Scores within this many ulps of the best count as ties.
const TIE_ULPS: f64 = 64.0;

/// Grid weights minimizing the validation MSE of the blend. Among candidates
/// tied with the best score up to rounding, the one closest to uniform
/// weights wins, then the first.
pub fn grid_weights(member_predictions: &[Vec<f64>], targets: &[f64]) -> Result<Vec<f64>> {
    let k = member_predictions.len();
    if k < 2 {
        return Err(Error::config("an ensemble needs at least two members"));
    }
    if let Some(i) = member_predictions.iter().position(|p| p.len() != targets.len()) {
        return Err(Error::data(format!(
            "member {i} produced {} predictions for {} targets",
            member_predictions[i].len(),
            targets.len()
        )));
    }
    let scored: Vec<(f64, Vec<f64>)> = grid_candidates(k)
        .into_iter()
        .map(|w| (mse(&blend(member_predictions, &w), targets), w))
        .collect();
    let best = scored.iter().map(|(s, _)| *s).fold(f64::INFINITY, f64::min);
    let band = best + TIE_ULPS * f64::EPSILON * best;
    let spread = |w: &[f64]| w.iter().map(|x| (x - 1.0 / k as f64).powi(2)).sum::<f64>();
    let mut pick: Option<&Vec<f64>> = None;
    for (score, w) in &scored {
        if *score <= band && pick.is_none_or(|p| spread(w) < spread(p)) {
            pick = Some(w);
        }
    }
    Ok(pick.expect("grid is non-empty").clone())
}

/// Dispatches on `scheme`. The grid scheme needs the members' validation
/// predictions and targets.
pub fn assign_weights(
    val_mses: &[f64],
    scheme: WeightScheme,
    validation: Option<(&[Vec<f64>], &[f64])>,
) -> Result<Vec<f64>> {
    check_mses(val_mses)?;
    match scheme {
        WeightScheme::PaperFixed => paper_fixed_weights(val_mses),
        WeightScheme::Grid => {
            let (preds, targets) =
                validation.ok_or_else(|| Error::config("the grid scheme needs validation predictions"))?;
            if preds.len() != val_mses.len() {
                return Err(Error::config("one prediction vector per member is required"));
            }
            grid_weights(preds, targets)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemberRef {
    pub path: PathBuf,
    pub weight: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSpec {
    pub scheme: WeightScheme,
    pub members: Vec<MemberRef>,
}

impl EnsembleSpec {
    pub fn new(scheme: WeightScheme, members: Vec<MemberRef>) -> Result<Self> {
        let spec = EnsembleSpec { scheme, members };
        spec.validate()?;
        Ok(spec)
    }

    pub fn weights(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.weight).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.len() < 2 {
            return Err(Error::config("an ensemble needs at least two members"));
        }
        let w = self.weights();
        if w.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::config(format!("ensemble weights {w:?} must be non-negative")));
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!("ensemble weights sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Line-oriented text form. Paths are written as given.
    pub fn to_text(&self) -> String {
        let mut s = format!("{SPEC_HEADER}\nscheme {}\n", self.scheme);
        for m in &self.members {
            s.push_str(&format!("member {:?} {:?} {}\n", m.weight, m.val_mse, m.path.display()));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next() != Some(SPEC_HEADER) {
            return Err(Error::config(format!("ensemble spec must start with {SPEC_HEADER:?}")));
        }
        let mut scheme = None;
        let mut members = Vec::new();
        for line in lines {
            let bad = || Error::config(format!("malformed ensemble spec line {line:?}"));
            if let Some(rest) = line.strip_prefix("scheme ") {
                scheme = Some(rest.trim().parse()?);
            } else if let Some(rest) = line.strip_prefix("member ") {
                let mut parts = rest.splitn(3, ' ');
                let weight = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
                let val_mse = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
                let path = parts.next().filter(|p| !p.is_empty()).ok_or_else(bad)?;
                members.push(MemberRef {
                    path: PathBuf::from(path),
                    weight,
                    val_mse,
                });
            } else {
                return Err(bad());
            }
        }
        let scheme = scheme.ok_or_else(|| Error::config("ensemble spec lacks a scheme line"))?;
        EnsembleSpec::new(scheme, members)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Loaded members with their weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble<T> {
    pub weights: Vec<f64>,
    pub models: Vec<VoxCnnModel<T>>,
}

impl<T: Scalar> Ensemble<T> {
    pub fn new(weights: Vec<f64>, models: Vec<VoxCnnModel<T>>) -> Result<Self> {
        if weights.len() != models.len() || models.len() < 2 {
            return Err(Error::config(format!(
                "{} weights for {} members",
                weights.len(),
                models.len()
            )));
        }
        let channels = models[0].config().in_channels;
        if let Some(i) = models.iter().position(|m| m.config().in_channels != channels) {
            return Err(Error::config(format!(
                "member {i} expects {} input channels, member 0 expects {channels}",
                models[i].config().in_channels
            )));
        }
        Ok(Ensemble { weights, models })
    }

    /// Loads every member before returning; relative member paths resolve
    /// against `base_dir`.
    pub fn load(spec: &EnsembleSpec, base_dir: &Path) -> Result<Self> {
        spec.validate()?;
        let models = spec
            .members
            .iter()
            .map(|m| {
                let p = if m.path.is_absolute() {
                    m.path.clone()
                } else {
                    base_dir.join(&m.path)
                };
                load_checkpoint::<T>(&p).map(|c| c.model)
            })
            .collect::<Result<Vec<_>>>()?;
        Ensemble::new(spec.weights(), models)
    }

    pub fn member_predictions(&self, data: &Dataset) -> Result<Vec<Vec<f64>>> {
        self.models.iter().map(|m| predict_dataset(m, data)).collect()
    }

    pub fn predict(&self, data: &Dataset) -> Result<Vec<f64>> {
        Ok(blend(&self.member_predictions(data)?, &self.weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_scores_give_two_thirds_to_the_better_member() {
        assert_eq!(paper_fixed_weights(&[71.777, 71.094]).unwrap(), [1.0 / 3.0, 2.0 / 3.0]);
        assert_eq!(paper_fixed_weights(&[4.0, 4.0]).unwrap(), [0.5, 0.5]);
        assert!(matches!(paper_fixed_weights(&[1.0, 2.0, 3.0]), Err(Error::Config(_))));
    }

    #[test]
    fn grid_has_expected_size() {
        assert_eq!(grid_candidates(2).len(), 21 + 2);
        // Compositions of 20 into 3 parts: C(22, 2).
        assert_eq!(grid_candidates(3).len(), 231);
        for w in grid_candidates(3) {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_blend() {
        let p = blend(&[vec![1.0, 3.0], vec![2.0, 0.0]], &[2.0 / 3.0, 1.0 / 3.0]);
        assert!((p[0] - 4.0 / 3.0).abs() < 1e-15 && (p[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn spec_text_round_trips() {
        let spec = EnsembleSpec::new(
            WeightScheme::PaperFixed,
            vec![
                MemberRef {
                    path: "member_a.voxr".into(),
                    weight: 1.0 / 3.0,
                    val_mse: 71.777,
                },
                MemberRef {
                    path: "dir with space/member_b.voxr".into(),
                    weight: 2.0 / 3.0,
                    val_mse: 71.094,
                },
            ],
        )
        .unwrap();
        assert_eq!(EnsembleSpec::from_text(&spec.to_text()).unwrap(), spec);
    }
}
