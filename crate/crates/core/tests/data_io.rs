use std::fs;
use std::path::Path;

use voxreg::dataio::{
    generate_synthetic, load_manifest, load_volume, save_volume, synthetic_schema, Dataset, LoadOptions, Split,
    SynthSpec, TargetColumn,
};
use voxreg::residualize::{CovariateSchema, Field, ResidualizationModel};
use voxreg::volgrad::Tensor;

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn gaussian(extent: [usize; 3], center: [usize; 3], sigma: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for z in 0..extent[0] {
        for y in 0..extent[1] {
            for x in 0..extent[2] {
                let d2 = [z, y, x]
                    .iter()
                    .zip(center)
                    .map(|(&p, c)| (p as f64 - c as f64).powi(2))
                    .sum::<f64>();
                out.push((-d2 / (2.0 * sigma * sigma)).exp());
            }
        }
    }
    out
}

fn radial_background(extent: [usize; 3]) -> Vec<f64> {
    let mut out = Vec::new();
    for z in 0..extent[0] {
        for y in 0..extent[1] {
            for x in 0..extent[2] {
                let r2 = [z, y, x]
                    .iter()
                    .zip(extent)
                    .map(|(&p, e)| ((p as f64 - (e as f64 - 1.0) / 2.0) / (0.45 * e as f64)).powi(2))
                    .sum::<f64>();
                out.push(0.5 * (-r2).exp() - 0.25);
            }
        }
    }
    out
}

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn noiseless_targets_are_recoverable_from_the_volumes() {
    let spec = SynthSpec {
        n_subjects: 40,
        extent: [12; 3],
        noise_sd: 0.0,
        seed: 3,
        ..SynthSpec::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let out = generate_synthetic(&spec, dir.path()).unwrap();
    let manifest = load_manifest(&out.manifest_path, Some(&synthetic_schema()), LoadOptions::default()).unwrap();
    let bg = radial_background(spec.extent);
    let sigma = spec.blob_sigma * 12.0;
    let mut estimates = Vec::new();
    let mut targets = Vec::new();
    for (rec, truth) in manifest.records.iter().zip(&out.truth.subjects) {
        assert_eq!(rec.subject_id, truth.subject_id);
        assert_eq!(truth.raw_score, truth.target + truth.confound);
        assert_eq!(rec.raw_score, Some(truth.raw_score));
        let t1 = load_volume(&rec.t1_path).unwrap();
        let gm = load_volume(&rec.gm_path).unwrap();
        let p = gaussian(spec.extent, truth.center, sigma);
        let num: f64 = t1
            .data()
            .iter()
            .zip(&bg)
            .zip(&p)
            .map(|((&v, b), q)| (v as f64 - b) * q)
            .sum();
        let den: f64 = p.iter().map(|q| q * q).sum();
        estimates.push(num / den);
        targets.push(truth.target);
        for (m, q) in gm.data().iter().zip(&p) {
            assert_eq!(*m, if *q > 0.5 { 1.0 } else { 0.0 });
        }
    }
    let r = correlation(&estimates, &targets);
    assert!(r * r > 0.999, "R^2 = {}", r * r);
}

#[test]
fn covariate_residualization_uncovers_the_target() {
    let spec = SynthSpec {
        n_subjects: 200,
        extent: [8; 3],
        noise_sd: 0.0,
        seed: 4,
        ..SynthSpec::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let out = generate_synthetic(&spec, dir.path()).unwrap();
    let schema = synthetic_schema();
    let manifest = load_manifest(&out.manifest_path, Some(&schema), LoadOptions::default()).unwrap();
    let rows: Vec<_> = manifest
        .records
        .iter()
        .map(|r| (r.subject_id.as_str(), &r.covariates))
        .collect();
    let raw: Vec<f64> = manifest.records.iter().map(|r| r.raw_score.unwrap()).collect();
    let targets: Vec<f64> = out.truth.subjects.iter().map(|s| s.target).collect();
    let confounds: Vec<f64> = out.truth.subjects.iter().map(|s| s.confound).collect();
    assert!(correlation(&raw, &confounds) > 0.5);
    let model = ResidualizationModel::fit(&schema, rows.iter().copied(), &raw).unwrap();
    let residuals = model.apply(rows.iter().copied(), &raw).unwrap();
    assert!(correlation(&residuals, &targets) > 0.95);
    assert!(correlation(&residuals, &confounds).abs() < 0.2);
}

#[test]
fn generation_is_byte_identical_for_a_seed() {
    let spec = SynthSpec {
        n_subjects: 12,
        extent: [8; 3],
        seed: 9,
        ..SynthSpec::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_synthetic(&spec, a.path()).unwrap();
    generate_synthetic(&spec, b.path()).unwrap();
    let fa = files_under(a.path());
    assert_eq!(fa.len(), 3 + 2 * 12);
    assert_eq!(fa, files_under(b.path()));

    let c = tempfile::tempdir().unwrap();
    generate_synthetic(&SynthSpec { seed: 10, ..spec }, c.path()).unwrap();
    assert_ne!(fa, files_under(c.path()));
}

#[test]
fn splits_follow_the_requested_fractions() {
    let spec = SynthSpec {
        n_subjects: 20,
        extent: [8; 3],
        ..SynthSpec::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let out = generate_synthetic(&spec, dir.path()).unwrap();
    let manifest = load_manifest(&out.manifest_path, None, LoadOptions::default()).unwrap();
    let counts = [Split::Train, Split::Val, Split::Test].map(|s| manifest.with_split(s).len());
    assert_eq!(counts, spec.split_sizes());
    assert_eq!(counts, [14, 3, 3]);
    assert_eq!(manifest.tabular_columns, ["tab_brain_volume"]);
}

#[test]
fn zero_subjects_write_an_empty_manifest() {
    let spec = SynthSpec {
        n_subjects: 0,
        ..SynthSpec::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let out = generate_synthetic(&spec, dir.path()).unwrap();
    assert!(out.truth.subjects.is_empty());
    let manifest = load_manifest(&out.manifest_path, Some(&synthetic_schema()), LoadOptions::default()).unwrap();
    assert!(manifest.is_empty());
    assert!(CovariateSchema::load(&out.schema_path).is_ok());
}

fn fixture(dir: &Path, rows: &[&str]) -> std::path::PathBuf {
    for id in ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j"] {
        for (suffix, fill) in [("t1", 0.5f32), ("gm", 1.0)] {
            let v = Tensor::from_fn(&[8, 8, 8], |i| fill + i as f32 * 1e-3);
            save_volume(&v, &dir.join(format!("{id}_{suffix}.vvol"))).unwrap();
        }
    }
    let mut text = String::from("subject_id,t1,gm,split,raw_score,residual_score,age,site,scanner,tab_icv\n");
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    let p = dir.join("manifest.csv");
    fs::write(&p, text).unwrap();
    p
}

fn good_rows() -> Vec<String> {
    let splits = [
        "train", "train", "train", "train", "train", "train", "val", "val", "test", "test",
    ];
    ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j"]
        .iter()
        .zip(splits)
        .enumerate()
        .map(|(k, (id, split))| {
            let raw = if split == "test" {
                String::new()
            } else {
                format!("{}", k as f64 * 0.5)
            };
            format!(
                "{id},{id}_t1.vvol,{id}_gm.vvol,{split},{raw},,{},{},s{},{}",
                9.0 + k as f64,
                ["x", "y"][k % 2],
                k % 3,
                k as f64 / 10.0
            )
        })
        .collect()
}

fn schema() -> CovariateSchema {
    CovariateSchema::new(vec![Field::continuous("age"), Field::categorical("site", &["x", "y"])]).unwrap()
}

#[test]
fn fixture_manifest_loads_with_extras_and_tabular_columns() {
    let dir = tempfile::tempdir().unwrap();
    let rows = good_rows();
    let p = fixture(dir.path(), &rows.iter().map(String::as_str).collect::<Vec<_>>());
    let m = load_manifest(&p, Some(&schema()), LoadOptions::default()).unwrap();
    assert_eq!(m.len(), 10);
    assert_eq!(m.covariate_columns, ["age", "site", "scanner"]);
    assert_eq!(m.tabular_columns, ["tab_icv"]);
    let c = m.get("c").unwrap();
    assert_eq!(c.raw_score, Some(1.0));
    assert_eq!(c.residual_score, None);
    assert_eq!(c.tabular, [0.2]);
    assert_eq!(c.covariates["scanner"], "s2");
    assert_eq!(c.t1_path, dir.path().join("c_t1.vvol"));
    assert_eq!(m.get("j").unwrap().raw_score, None);

    let train = m.with_split(Split::Train);
    let data = Dataset::load(&train, TargetColumn::Raw).unwrap();
    assert_eq!(data.len(), 6);
    assert_eq!(data.extent(), Some([8; 3]));
    assert_eq!(data.tabular_dim(), 1);
    assert_eq!(data.samples()[0].volume.shape(), [2, 8, 8, 8]);
    let err = Dataset::load(&train, TargetColumn::Residual).unwrap_err().to_string();
    assert!(
        err.contains("6 subject(s)") && err.contains("residual_score missing"),
        "{err}"
    );
    let test = m.with_split(Split::Test);
    assert!(Dataset::load(&test, TargetColumn::Raw).is_err());
    assert!(Dataset::load(&test, TargetColumn::None).unwrap().targets().is_err());
}

#[test]
fn missing_schema_column_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    fs::write(&p, "subject_id,t1,gm,split,raw_score,residual_score,age\n").unwrap();
    let err = load_manifest(&p, Some(&schema()), LoadOptions::default()).unwrap_err();
    assert!(matches!(err, voxreg::Error::Data(_)));
    assert!(err.to_string().contains("missing covariate column \"site\""), "{err}");
}

#[test]
fn bad_rows_are_reported_together() {
    let dir = tempfile::tempdir().unwrap();
    let mut rows = good_rows();
    rows[1] = rows[1].replace(",train,", ",holdout,");
    rows[3] = rows[3].replace("d_gm.vvol", "nowhere.vvol");
    rows[4] = rows[4].replace(",0.4", ",icv");
    rows[5] = rows[5].replace(",y,", ",,");
    let p = fixture(dir.path(), &rows.iter().map(String::as_str).collect::<Vec<_>>());
    let err = load_manifest(&p, Some(&schema()), LoadOptions::default())
        .unwrap_err()
        .to_string();
    assert!(err.contains("4 bad row(s)"), "{err}");
    for needle in [
        "line 3 (b)",
        "holdout",
        "missing file",
        "column tab_icv: malformed scalar",
        "covariate site: missing value",
    ] {
        assert!(err.contains(needle), "{needle} not in {err}");
    }
    let m = load_manifest(&p, None, LoadOptions { check_files: false });
    assert!(m.is_err());
}

#[test]
fn mismatched_volume_shapes_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let rows = good_rows();
    let p = fixture(dir.path(), &rows.iter().map(String::as_str).collect::<Vec<_>>());
    save_volume(&Tensor::from_fn(&[8, 8, 9], |_| 0.0f32), &dir.path().join("b_gm.vvol")).unwrap();
    let m = load_manifest(&p, None, LoadOptions::default()).unwrap();
    let err = Dataset::load(&m.with_split(Split::Train), TargetColumn::Raw)
        .unwrap_err()
        .to_string();
    assert!(err.contains("1 subject(s) failed") && err.contains("b: "), "{err}");
}
