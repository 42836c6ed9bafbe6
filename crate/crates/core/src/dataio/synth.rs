//! Synthetic datasets with a planted signal.
//!
//! Each subject's T1 volume is a fixed smooth background plus a Gaussian blob
//! whose amplitude is drawn per subject, plus white noise. The gray-matter
//! mask marks the voxels where the blob profile exceeds one half. The target
//! is `signal_coef * amplitude + noise_sd * eps`; the raw score adds
//! covariate-driven confounds on top so residualization has work to do.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataio::manifest::{write_manifest, Manifest, Split, SubjectRecord};
use crate::dataio::volume::save_volume;
use crate::residualize::{CovariateSchema, Covariates, Field};
use crate::volgrad::Tensor;
use crate::{parallel, rng, Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const SCHEMA_FILE: &str = "schema.json";
pub const TRUTH_FILE: &str = "truth.json";
pub const VOLUME_DIR: &str = "volumes";

const SITES: [&str; 3] = ["site01", "site02", "site03"];
const SITE_EFFECT: [f64; 3] = [0.0, 0.8, -0.6];
const SEXES: [&str; 2] = ["F", "M"];
const RACES: [&str; 4] = ["white", "black", "hispanic", "other"];
const EDUCATION: [&str; 3] = ["secondary", "bachelor", "graduate"];
const INCOME: [&str; 3] = ["low", "middle", "high"];
const MARITAL: [&str; 2] = ["married", "unmarried"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub extent: [usize; 3],
    pub signal_coef: f64,
    pub noise_sd: f64,
    /// Blob standard deviation as a fraction of the smallest extent.
    pub blob_sigma: f64,
    /// Maximum per-axis displacement of the blob centre, in voxels.
    pub blob_jitter: usize,
    pub background_noise_sd: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_subjects: 200,
            extent: [24; 3],
            signal_coef: 1.0,
            noise_sd: std::f64::consts::FRAC_1_SQRT_2,
            blob_sigma: 0.15,
            blob_jitter: 1,
            background_noise_sd: 0.05,
            train_fraction: 0.7,
            val_fraction: 0.15,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if let Some(axis) = self.extent.iter().position(|&e| e < 8) {
            return Err(Error::config(format!(
                "synthetic extent {:?}: axis {axis} is below the minimum of 8",
                self.extent
            )));
        }
        let finite_nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must be finite and >= 0, got {v}")))
            }
        };
        finite_nonneg("noise_sd", self.noise_sd)?;
        finite_nonneg("background_noise_sd", self.background_noise_sd)?;
        finite_nonneg("train_fraction", self.train_fraction)?;
        finite_nonneg("val_fraction", self.val_fraction)?;
        if !self.signal_coef.is_finite() {
            return Err(Error::config("signal_coef must be finite"));
        }
        if !(self.blob_sigma > 0.0 && self.blob_sigma < 1.0) {
            return Err(Error::config(format!(
                "blob_sigma must lie in (0, 1), got {}",
                self.blob_sigma
            )));
        }
        if self.train_fraction + self.val_fraction > 1.0 {
            return Err(Error::config("train_fraction + val_fraction exceeds 1"));
        }
        if 2 * self.blob_jitter >= *self.extent.iter().min().unwrap() / 2 {
            return Err(Error::config("blob_jitter too large for the extent"));
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("invalid value {value:?} for synth key {key}")))
        }
        match key {
            "n_subjects" => self.n_subjects = num(key, value)?,
            "extent" => self.extent = crate::voxcnn::parse_extent(value)?,
            "signal_coef" => self.signal_coef = num(key, value)?,
            "noise_sd" => self.noise_sd = num(key, value)?,
            "blob_sigma" => self.blob_sigma = num(key, value)?,
            "blob_jitter" => self.blob_jitter = num(key, value)?,
            "background_noise_sd" => self.background_noise_sd = num(key, value)?,
            "train_fraction" => self.train_fraction = num(key, value)?,
            "val_fraction" => self.val_fraction = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            other => return Err(Error::config(format!("unknown synth key {other:?}"))),
        }
        Ok(())
    }

    pub fn to_kv_text(&self) -> String {
        let [d, h, w] = self.extent;
        format!(
            "n_subjects={}\nextent={d}x{h}x{w}\nsignal_coef={:?}\nnoise_sd={:?}\nblob_sigma={:?}\nblob_jitter={}\n\
             background_noise_sd={:?}\ntrain_fraction={:?}\nval_fraction={:?}\nseed={}\n",
            self.n_subjects,
            self.signal_coef,
            self.noise_sd,
            self.blob_sigma,
            self.blob_jitter,
            self.background_noise_sd,
            self.train_fraction,
            self.val_fraction,
            self.seed
        )
    }

    /// Subjects per split: train and val are rounded, test takes the rest.
    pub fn split_sizes(&self) -> [usize; 3] {
        let n = self.n_subjects;
        let train = ((self.train_fraction * n as f64).round() as usize).min(n);
        let val = ((self.val_fraction * n as f64).round() as usize).min(n - train);
        [train, val, n - train - val]
    }
}

/// The covariate schema the generator writes, mirroring the eight
/// sociodemographic and anatomical confounds.
pub fn synthetic_schema() -> CovariateSchema {
    CovariateSchema::new(vec![
        Field::continuous("brain_volume"),
        Field::categorical("site", &SITES),
        Field::continuous("age"),
        Field::categorical("sex", &SEXES),
        Field::categorical("race_ethnicity", &RACES),
        Field::categorical("parent_education", &EDUCATION),
        Field::categorical("parent_income", &INCOME),
        Field::categorical("marital_status", &MARITAL),
    ])
    .expect("static schema is valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectTruth {
    pub subject_id: String,
    pub split: String,
    pub amplitude: f64,
    pub center: [usize; 3],
    pub target: f64,
    pub confound: f64,
    pub raw_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SynthSpec,
    pub subjects: Vec<SubjectTruth>,
}

impl GroundTruth {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub manifest_path: PathBuf,
    pub schema_path: PathBuf,
    pub truth_path: PathBuf,
    pub truth: GroundTruth,
}

fn pick<'a, R: Rng>(rng: &mut R, options: &[&'a str]) -> (usize, &'a str) {
    let i = rng.random_range(0..options.len());
    (i, options[i])
}

/// Unit-peak Gaussian profile centred at `center`.
fn blob_profile(extent: [usize; 3], center: [usize; 3], sigma: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(extent.iter().product());
    for z in 0..extent[0] {
        for y in 0..extent[1] {
            for x in 0..extent[2] {
                let d2: f64 = [z, y, x]
                    .iter()
                    .zip(&center)
                    .map(|(&p, &c)| (p as f64 - c as f64).powi(2))
                    .sum();
                out.push((-d2 / (2.0 * sigma * sigma)).exp());
            }
        }
    }
    out
}

/// Shared smooth background: a broad radial bump around the volume centre.
fn background(extent: [usize; 3]) -> Vec<f64> {
    let mid = extent.map(|e| (e as f64 - 1.0) / 2.0);
    let scale = extent.map(|e| 0.45 * e as f64);
    let mut out = Vec::with_capacity(extent.iter().product());
    for z in 0..extent[0] {
        for y in 0..extent[1] {
            for x in 0..extent[2] {
                let r2: f64 = [z, y, x]
                    .iter()
                    .enumerate()
                    .map(|(a, &p)| ((p as f64 - mid[a]) / scale[a]).powi(2))
                    .sum();
                out.push(0.5 * (-r2).exp() - 0.25);
            }
        }
    }
    out
}

struct Generated {
    record: SubjectRecord,
    truth: SubjectTruth,
}

fn generate_subject(spec: &SynthSpec, index: usize, split: Split, volume_dir: &Path, bg: &[f64]) -> Result<Generated> {
    let id = format!("sub-{index:04}");
    let mut r = rng::stream(rng::derive_index(spec.seed, "subject", index as u64));

    let brain_volume: f64 = 1200.0 + 100.0 * r.sample::<f64, _>(StandardNormal);
    let age: f64 = 120.0 + 8.0 * r.sample::<f64, _>(StandardNormal);
    let brain_volume = (brain_volume * 10.0).round() / 10.0;
    let age = (age * 10.0).round() / 10.0;
    let (site_i, site) = pick(&mut r, &SITES);
    let (sex_i, sex) = pick(&mut r, &SEXES);
    let (_, race) = pick(&mut r, &RACES);
    let (edu_i, education) = pick(&mut r, &EDUCATION);
    let (inc_i, income) = pick(&mut r, &INCOME);
    let (_, marital) = pick(&mut r, &MARITAL);
    let confound = 0.4 * (brain_volume - 1200.0) / 100.0
        + 0.5 * (age - 120.0) / 8.0
        + SITE_EFFECT[site_i]
        + 0.3 * sex_i as f64
        + 0.2 * edu_i as f64
        + 0.15 * inc_i as f64;

    let amplitude: f64 = r.sample(StandardNormal);
    let eps: f64 = r.sample(StandardNormal);
    let target = spec.signal_coef * amplitude + spec.noise_sd * eps;
    let raw_score = target + confound;

    let j = spec.blob_jitter as i64;
    let center = spec.extent.map(|e| (e / 2) as i64);
    let center = center.map(|c| (c + r.random_range(-j..=j)) as usize);
    let sigma = spec.blob_sigma * *spec.extent.iter().min().unwrap() as f64;
    let profile = blob_profile(spec.extent, center, sigma);
    let t1: Vec<f32> = profile
        .iter()
        .zip(bg)
        .map(|(&p, &b)| {
            let n: f64 = r.sample(StandardNormal);
            (b + amplitude * p + spec.background_noise_sd * n) as f32
        })
        .collect();
    let gm: Vec<f32> = profile.iter().map(|&p| if p > 0.5 { 1.0 } else { 0.0 }).collect();

    let t1_path = volume_dir.join(format!("{id}_t1.vvol"));
    let gm_path = volume_dir.join(format!("{id}_gm.vvol"));
    save_volume(&Tensor::new(&spec.extent, t1)?, &t1_path)?;
    save_volume(&Tensor::new(&spec.extent, gm)?, &gm_path)?;

    let covariates: Covariates = [
        ("brain_volume", format!("{brain_volume:.1}")),
        ("site", site.to_string()),
        ("age", format!("{age:.1}")),
        ("sex", sex.to_string()),
        ("race_ethnicity", race.to_string()),
        ("parent_education", education.to_string()),
        ("parent_income", income.to_string()),
        ("marital_status", marital.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();

    Ok(Generated {
        record: SubjectRecord {
            subject_id: id.clone(),
            t1_path,
            gm_path,
            covariates,
            tabular: vec![(brain_volume - 1200.0) / 100.0],
            raw_score: Some(raw_score),
            residual_score: None,
            split,
        },
        truth: SubjectTruth {
            subject_id: id,
            split: split.to_string(),
            amplitude,
            center,
            target,
            confound,
            raw_score,
        },
    })
}

/// Writes `manifest.csv`, `schema.json`, `truth.json` and, for a non-empty
/// spec, one T1 and one mask volume per subject under `volumes/`.
pub fn generate_synthetic(spec: &SynthSpec, out_dir: &Path) -> Result<SynthOutput> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let volume_dir = out_dir.join(VOLUME_DIR);
    if spec.n_subjects > 0 {
        fs::create_dir_all(&volume_dir).map_err(|e| Error::io(&volume_dir, e))?;
    }

    let [n_train, n_val, _] = spec.split_sizes();
    let mut order: Vec<usize> = (0..spec.n_subjects).collect();
    order.shuffle(&mut rng::stream(rng::derive(spec.seed, "split")));
    let mut splits = vec![Split::Test; spec.n_subjects];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let bg = background(spec.extent);
    let generated = parallel::try_map_indices(spec.n_subjects, |i| {
        generate_subject(spec, i, splits[i], &volume_dir, &bg)
    })?;

    let schema = synthetic_schema();
    let manifest = Manifest {
        covariate_columns: schema.field_names().map(str::to_string).collect(),
        tabular_columns: vec!["tab_brain_volume".to_string()],
        records: generated.iter().map(|g| g.record.clone()).collect(),
    };
    let truth = GroundTruth {
        spec: spec.clone(),
        subjects: generated.into_iter().map(|g| g.truth).collect(),
    };

    let manifest_path = out_dir.join(MANIFEST_FILE);
    let schema_path = out_dir.join(SCHEMA_FILE);
    let truth_path = out_dir.join(TRUTH_FILE);
    write_manifest(&manifest_path, &manifest)?;
    schema.save(&schema_path)?;
    let text = serde_json::to_string_pretty(&truth).map_err(|e| Error::Internal(e.to_string()))?;
    fs::write(&truth_path, text + "\n").map_err(|e| Error::io(&truth_path, e))?;
    Ok(SynthOutput {
        manifest_path,
        schema_path,
        truth_path,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_cover_every_subject() {
        for n in [0, 1, 7, 10, 200] {
            let spec = SynthSpec {
                n_subjects: n,
                ..SynthSpec::default()
            };
            assert_eq!(spec.split_sizes().iter().sum::<usize>(), n);
        }
    }

    #[test]
    fn small_extent_rejected() {
        let spec = SynthSpec {
            extent: [8, 7, 8],
            ..SynthSpec::default()
        };
        assert!(spec.validate().unwrap_err().to_string().contains("axis 1"));
    }
}
