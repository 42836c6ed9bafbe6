//! End-to-end steps shared by the command-line tool and its parity tests:
//! residualize a manifest, train the two ensemble members, weight them.

use std::path::PathBuf;

use crate::dataio::{Dataset, Manifest, ResidualRow, Split, SubjectRecord, TargetColumn};
use crate::ensemble::{assign_weights, EnsembleSpec, MemberRef, WeightScheme};
use crate::residualize::{CovariateSchema, ResidualizationModel};
use crate::trainer::{mse, predict_dataset, split_two, train_member_observed, EpochRecord, TrainConfig, TrainReport};
use crate::voxcnn::{Checkpoint, VoxCnnConfig, VoxCnnModel};
use crate::{rng, Error, Result, Scalar};

pub const MEMBER_NAMES: [&str; 2] = ["member_a", "member_b"];

#[derive(Debug, Clone)]
pub struct ResidualizeOutput {
    pub model: ResidualizationModel,
    /// Train and validation subjects, whose scores fit the model.
    pub fitted: Vec<ResidualRow>,
    /// Test subjects with a raw score, residualized by the fitted model.
    pub held_out: Vec<ResidualRow>,
}

fn rows_of<'a>(records: &[&'a SubjectRecord]) -> Vec<(&'a str, &'a crate::residualize::Covariates)> {
    records.iter().map(|r| (r.subject_id.as_str(), &r.covariates)).collect()
}

fn residual_rows(records: &[&SubjectRecord], raw: &[f64], residual: Vec<f64>) -> Vec<ResidualRow> {
    records
        .iter()
        .zip(raw)
        .zip(residual)
        .map(|((r, &raw_score), residual_score)| ResidualRow {
            subject_id: r.subject_id.clone(),
            raw_score,
            residual_score,
        })
        .collect()
}

/// Fits the confound model on the train and validation subjects and
/// residualizes their raw scores, then applies it to scored test subjects.
pub fn residualize_manifest(manifest: &Manifest, schema: &CovariateSchema) -> Result<ResidualizeOutput> {
    let fit_set: Vec<&SubjectRecord> = manifest.records.iter().filter(|r| r.split != Split::Test).collect();
    let missing: Vec<&str> = fit_set
        .iter()
        .filter(|r| r.raw_score.is_none())
        .map(|r| r.subject_id.as_str())
        .collect();
    if !missing.is_empty() {
        return Err(Error::data(format!("raw_score missing for: {}", missing.join(", "))));
    }
    let y: Vec<f64> = fit_set.iter().map(|r| r.raw_score.unwrap()).collect();
    let rows = rows_of(&fit_set);
    let model = ResidualizationModel::fit(schema, rows.iter().copied(), &y)?;
    let fitted = residual_rows(&fit_set, &y, model.apply(rows.iter().copied(), &y)?);

    let test: Vec<&SubjectRecord> = manifest
        .records
        .iter()
        .filter(|r| r.split == Split::Test && r.raw_score.is_some())
        .collect();
    let held_out = if test.is_empty() {
        Vec::new()
    } else {
        let y: Vec<f64> = test.iter().map(|r| r.raw_score.unwrap()).collect();
        residual_rows(&test, &y, model.apply(rows_of(&test), &y)?)
    };
    Ok(ResidualizeOutput {
        model,
        fitted,
        held_out,
    })
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PipelineConfig {
    pub model: VoxCnnConfig,
    pub train: TrainConfig,
    /// Feed the manifest's `tab_*` columns to the model head.
    pub use_tabular: bool,
}

impl PipelineConfig {
    /// Applies a `key=value` override. Training keys are tried first, then
    /// `use_tabular`, then model keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if key == "use_tabular" {
            self.use_tabular = value
                .parse()
                .map_err(|_| Error::config(format!("invalid value {value:?} for use_tabular")))?;
            return Ok(());
        }
        match self.train.set(key, value) {
            Err(Error::Config(m)) if m.starts_with("unknown training option") => self.model.set(key, value),
            other => other,
        }
    }

    pub fn to_kv_text(&self) -> String {
        format!(
            "{}use_tabular={}\n{}",
            self.train.to_kv_text(),
            self.use_tabular,
            self.model.to_kv_text()
        )
    }

    /// Model configuration adapted to a dataset's extents and features.
    pub fn model_for(&self, data: &Dataset) -> Result<VoxCnnConfig> {
        let mut cfg = self.model.clone();
        cfg.input_extent = data.extent().ok_or_else(|| Error::data("empty dataset"))?;
        cfg.tabular_dim = if self.use_tabular { data.tabular_dim() } else { 0 };
        if self.use_tabular && cfg.tabular_dim == 0 {
            return Err(Error::config(
                "use_tabular is set but the manifest has no tab_* columns",
            ));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct MemberOutcome<T> {
    pub name: &'static str,
    pub subjects: Vec<String>,
    pub checkpoint: Checkpoint<T>,
    pub report: TrainReport,
}

/// Loads the training and validation subjects of `manifest` with residual
/// targets.
pub fn load_training_data(manifest: &Manifest) -> Result<(Dataset, Dataset)> {
    let train = Dataset::load(&manifest.with_split(Split::Train), TargetColumn::Residual)?;
    let val = Dataset::load(&manifest.with_split(Split::Val), TargetColumn::Residual)?;
    if train.len() < 4 {
        return Err(Error::data(format!(
            "{} training subjects; two members need at least 4",
            train.len()
        )));
    }
    if val.is_empty() {
        return Err(Error::data("no validation subjects"));
    }
    Ok((train, val))
}

/// Splits the training subjects in two and trains one member on each part,
/// both validated on `val`. Seeds derive from `config.train.seed`.
pub fn train_pair<T: Scalar>(
    train: &Dataset,
    val: &Dataset,
    config: &PipelineConfig,
    mut on_epoch: impl FnMut(&str, &EpochRecord),
) -> Result<Vec<MemberOutcome<T>>> {
    config.train.validate()?;
    let model_cfg = config.model_for(train)?;
    let root = config.train.seed;
    let (a, b) = split_two(train.len(), rng::derive(root, "split_two"), config.train.split_fraction)?;
    let mut out = Vec::with_capacity(2);
    for (name, part) in MEMBER_NAMES.into_iter().zip([a, b]) {
        let data = train.subset(&part);
        let mut init = rng::stream(rng::derive(root, &format!("{name}/init")));
        let model = VoxCnnModel::<T>::new(model_cfg.clone(), &mut init)?;
        let mut train_cfg = config.train.clone();
        train_cfg.seed = rng::derive(root, &format!("{name}/train"));
        let (checkpoint, report) = train_member_observed(model, &data, val, &train_cfg, |e| on_epoch(name, e))?;
        out.push(MemberOutcome {
            name,
            subjects: data.subject_ids(),
            checkpoint,
            report,
        });
    }
    Ok(out)
}

/// Scores each member on `val` and weights them by `scheme`.
pub fn weigh_members<T: Scalar>(
    members: &[(PathBuf, VoxCnnModel<T>)],
    val: &Dataset,
    scheme: WeightScheme,
) -> Result<EnsembleSpec> {
    let targets = val.targets()?;
    let preds = members
        .iter()
        .map(|(_, m)| predict_dataset(m, val))
        .collect::<Result<Vec<_>>>()?;
    let mses: Vec<f64> = preds.iter().map(|p| mse(p, &targets)).collect();
    let weights = assign_weights(&mses, scheme, Some((&preds, &targets)))?;
    EnsembleSpec::new(
        scheme,
        members
            .iter()
            .zip(weights)
            .zip(mses)
            .map(|(((path, _), weight), val_mse)| MemberRef {
                path: path.clone(),
                weight,
                val_mse,
            })
            .collect(),
    )
}
