//! In-memory model inputs assembled from manifest records.

use crate::dataio::manifest::SubjectRecord;
use crate::dataio::volume::load_volume;
use crate::parallel;
use crate::volgrad::Tensor;
use crate::voxcnn::stack_channels;
use crate::{Error, Result, Scalar};

/// Which manifest column supplies the regression target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetColumn {
    None,
    Raw,
    Residual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub subject_id: String,
    /// `[2, D, H, W]`: T1 then gray-matter mask.
    pub volume: Tensor<f32>,
    pub tabular: Vec<f64>,
    pub target: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub volumes: Tensor<T>,
    pub tabular: Option<Tensor<T>>,
    pub targets: Option<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    samples: Vec<Sample>,
}

impl Dataset {
    /// Checks that every sample has the same extents and tabular width.
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        if let Some(first) = samples.first() {
            for s in &samples[1..] {
                if s.volume.shape() != first.volume.shape() {
                    return Err(Error::data(format!(
                        "subject {}: input shape {:?} differs from {} ({:?})",
                        s.subject_id,
                        s.volume.shape(),
                        first.subject_id,
                        first.volume.shape()
                    )));
                }
                if s.tabular.len() != first.tabular.len() {
                    return Err(Error::data(format!(
                        "subject {}: {} tabular features, expected {}",
                        s.subject_id,
                        s.tabular.len(),
                        first.tabular.len()
                    )));
                }
            }
        }
        Ok(Dataset { samples })
    }

    /// Loads both volumes of every record. Problems are collected across all
    /// subjects before failing.
    pub fn load(records: &[&SubjectRecord], target: TargetColumn) -> Result<Self> {
        let loaded = parallel::map_indices(records.len(), |i| -> Result<Sample> {
            let r = records[i];
            let t1 = load_volume(&r.t1_path)?;
            let gm = load_volume(&r.gm_path)?;
            let volume = stack_channels(&r.subject_id, &t1, &gm)?;
            let target = match target {
                TargetColumn::None => None,
                TargetColumn::Raw => Some(
                    r.raw_score
                        .ok_or_else(|| Error::data(format!("subject {}: raw_score missing", r.subject_id)))?,
                ),
                TargetColumn::Residual => Some(
                    r.residual_score
                        .ok_or_else(|| Error::data(format!("subject {}: residual_score missing", r.subject_id)))?,
                ),
            };
            Ok(Sample {
                subject_id: r.subject_id.clone(),
                volume,
                tabular: r.tabular.clone(),
                target,
            })
        });
        let mut samples = Vec::with_capacity(records.len());
        let mut problems = Vec::new();
        for (r, s) in records.iter().zip(loaded) {
            match s {
                Ok(s) => samples.push(s),
                Err(e) => problems.push(format!("{}: {e}", r.subject_id)),
            }
        }
        if !problems.is_empty() {
            return Err(Error::data(format!(
                "{} subject(s) failed to load:\n  {}",
                problems.len(),
                problems.join("\n  ")
            )));
        }
        Dataset::new(samples)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn subject_ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.subject_id.clone()).collect()
    }

    pub fn tabular_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.tabular.len())
    }

    /// Spatial extents shared by every sample.
    pub fn extent(&self) -> Option<[usize; 3]> {
        self.samples.first().map(|s| {
            let sh = s.volume.shape();
            [sh[1], sh[2], sh[3]]
        })
    }

    pub fn targets(&self) -> Result<Vec<f64>> {
        self.samples
            .iter()
            .map(|s| {
                s.target
                    .ok_or_else(|| Error::data(format!("subject {}: target missing", s.subject_id)))
            })
            .collect()
    }

    /// Keeps only the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Stacks the samples at `indices` into model inputs. Tabular features
    /// are included only when `with_tabular` is set.
    pub fn batch<T: Scalar>(&self, indices: &[usize], with_tabular: bool) -> Result<Batch<T>> {
        let first = indices
            .first()
            .map(|&i| &self.samples[i])
            .ok_or_else(|| Error::config("empty batch"))?;
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(first.volume.shape());
        let mut vol = Vec::with_capacity(indices.len() * first.volume.numel());
        let mut tab = Vec::new();
        let mut targets = Vec::new();
        let mut all_targets = true;
        for &i in indices {
            let s = &self.samples[i];
            vol.extend(s.volume.data().iter().map(|&v| T::from_f64_lossy(f64::from(v))));
            if with_tabular {
                tab.extend(s.tabular.iter().map(|&v| T::from_f64_lossy(v)));
            }
            match s.target {
                Some(t) => targets.push(T::from_f64_lossy(t)),
                None => all_targets = false,
            }
        }
        let tabular = if with_tabular {
            Some(Tensor::new(&[indices.len(), first.tabular.len()], tab)?)
        } else {
            None
        };
        let targets = if all_targets {
            Some(Tensor::new(&[indices.len()], targets)?)
        } else {
            None
        };
        Ok(Batch {
            volumes: Tensor::new(&shape, vol)?,
            tabular,
            targets,
        })
    }
}
