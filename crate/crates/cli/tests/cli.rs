mod common;

use std::fs;

use common::{metric, ok, synth, tree_digest, voxreg};
use voxreg::dataio::{load_manifest, read_residuals, synthetic_schema, write_residuals, LoadOptions, Split};
use voxreg::pipeline::residualize_manifest;

const TINY: [&str; 12] = [
    "--config",
    "base_filters=2",
    "--config",
    "fc_hidden=8",
    "--config",
    "max_epochs=3",
    "--config",
    "batch_size=4",
    "--config",
    "learning_rate=1e-3",
    "--config",
    "patience=3",
];

#[test]
fn residualize_matches_the_library_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "data", 30, 8, 1);
    let out = ok(
        &[
            "residualize",
            "--manifest",
            "data/manifest.csv",
            "--schema",
            "data/schema.json",
            "--out",
            "res",
        ],
        &[],
        dir.path(),
    );
    assert!(out.stdout.contains("residualized"));

    let schema = synthetic_schema();
    let manifest = load_manifest(&data.join("manifest.csv"), Some(&schema), LoadOptions::default()).unwrap();
    let lib = residualize_manifest(&manifest, &schema).unwrap();
    let expected = dir.path().join("expected.csv");
    write_residuals(&expected, &lib.fitted).unwrap();
    let written = dir.path().join("res/residuals.csv");
    assert_eq!(fs::read(&written).unwrap(), fs::read(&expected).unwrap());

    let fit_count = manifest.with_split(Split::Train).len() + manifest.with_split(Split::Val).len();
    assert_eq!(read_residuals(&written).unwrap().len(), fit_count);
    let test_rows = read_residuals(&dir.path().join("res/test_residuals.csv")).unwrap();
    assert_eq!(test_rows.len(), manifest.with_split(Split::Test).len());
    assert!(dir.path().join("res/residualization.json").is_file());
    assert!(dir.path().join("res/run_config.txt").is_file());
}

#[test]
fn missing_covariate_column_is_a_data_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "data", 12, 8, 2);
    let schema = fs::read_to_string(dir.path().join("data/schema.json")).unwrap();
    let patched = schema.replacen("\"brain_volume\"", "\"handedness\"", 1);
    assert_ne!(schema, patched);
    fs::write(dir.path().join("schema2.json"), patched).unwrap();
    let r = voxreg(
        &[
            "residualize",
            "--manifest",
            "data/manifest.csv",
            "--schema",
            "schema2.json",
            "--out",
            "res",
        ],
        &[],
        dir.path(),
    );
    assert_eq!(r.code, 2, "{}", r.stderr);
    assert!(r.stderr.contains("handedness"), "{}", r.stderr);
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    assert_eq!(voxreg(&["--help"], &[], cwd).code, 0);
    assert_eq!(voxreg(&["--version"], &[], cwd).code, 0);
    assert_eq!(voxreg(&["frobnicate"], &[], cwd).code, 4);
    assert_eq!(
        voxreg(&["synth", "--out", "x", "--config", "bogus=1"], &[], cwd).code,
        4
    );
    assert_eq!(
        voxreg(&["synth", "--out", "x", "--config", "extent=4"], &[], cwd).code,
        4
    );
    assert_eq!(
        voxreg(&["synth", "--out", "x"], &[("VOXREG_THREADS", "zero")], cwd).code,
        4
    );
    let missing = voxreg(
        &[
            "residualize",
            "--manifest",
            "nope.csv",
            "--schema",
            "nope.json",
            "--out",
            "r",
        ],
        &[],
        cwd,
    );
    assert_eq!(missing.code, 2, "{}", missing.stderr);
    fs::write(cwd.join("junk.voxr"), b"VOXRjunk").unwrap();
    synth(cwd, "data", 12, 8, 3);
    let bad_ckpt = voxreg(
        &[
            "predict",
            "--model",
            "junk.voxr",
            "--manifest",
            "data/manifest.csv",
            "--out",
            "p",
        ],
        &[],
        cwd,
    );
    assert_eq!(bad_ckpt.code, 2, "{}", bad_ckpt.stderr);
}

#[test]
fn selfcheck_catches_a_planted_kernel_bug() {
    let dir = tempfile::tempdir().unwrap();
    let clean = voxreg(&["selfcheck", "--seeds", "1", "--no-model"], &[], dir.path());
    assert_eq!(clean.code, 0, "{}", clean.stdout);
    assert!(!clean.stdout.contains("FAIL"));
    for perturb in ["conv3d", "linear-grad"] {
        let r = voxreg(
            &["selfcheck", "--seeds", "1", "--no-model", "--perturb", perturb],
            &[],
            dir.path(),
        );
        assert_eq!(r.code, 3, "{perturb}: {}", r.stdout);
        assert!(r.stdout.contains("FAIL"), "{perturb}: {}", r.stdout);
    }
}

#[test]
fn synthetic_fixture_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "a", 10, 8, 5);
    synth(dir.path(), "b", 10, 8, 5);
    let skip = ["run_config.txt"];
    let a = tree_digest(&dir.path().join("a"), &skip);
    assert_eq!(a.len(), 3 + 2 * 10);
    assert_eq!(a, tree_digest(&dir.path().join("b"), &skip));
}

#[test]
fn end_to_end_pipeline_and_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    synth(cwd, "data", 40, 16, 7);
    ok(
        &[
            "residualize",
            "--manifest",
            "data/manifest.csv",
            "--schema",
            "data/schema.json",
            "--out",
            "res",
        ],
        &[],
        cwd,
    );
    let mut train = vec![
        "train",
        "--manifest",
        "data/manifest.csv",
        "--residuals",
        "res/residuals.csv",
        "--out",
        "run",
        "--seed",
        "11",
    ];
    train.extend(TINY);
    let t = ok(&train, &[], cwd);
    assert!(t.stdout.contains("member_a epoch    1"), "{}", t.stdout);
    for f in [
        "member_a.voxr",
        "member_b.voxr",
        "member_a.report.json",
        "member_b.log",
        "timing.txt",
    ] {
        assert!(cwd.join("run").join(f).is_file(), "{f}");
    }

    ok(
        &[
            "ensemble",
            "--members",
            "run/member_a.voxr",
            "run/member_b.voxr",
            "--manifest",
            "data/manifest.csv",
            "--residuals",
            "res/residuals.csv",
            "--out",
            "ens",
        ],
        &[],
        cwd,
    );
    let spec = fs::read_to_string(cwd.join("ens/ensemble.txt")).unwrap();
    assert!(spec.contains("../run/member_a.voxr"), "{spec}");

    let eval_args = |out: &'static str| {
        vec![
            "evaluate",
            "--model",
            "ens/ensemble.txt",
            "--manifest",
            "data/manifest.csv",
            "--residuals",
            "res/residuals.csv",
            "--residuals",
            "res/test_residuals.csv",
            "--out",
            out,
        ]
    };
    ok(&eval_args("eval"), &[], cwd);
    let metrics = fs::read_to_string(cwd.join("eval/metrics.txt")).unwrap();
    let blended = metric(&metrics, "mse").unwrap();
    let weighted = metric(&metrics, "weighted_member_mse").unwrap();
    assert!(blended <= weighted + 1e-12, "{metrics}");
    let preds = fs::read_to_string(cwd.join("eval/predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 1 + metric(&metrics, "n").unwrap() as usize);

    let p = ok(
        &[
            "predict",
            "--model",
            "run/member_a.voxr",
            "--manifest",
            "data/manifest.csv",
            "--out",
            "pred",
        ],
        &[],
        cwd,
    );
    assert!(p.stdout.starts_with("n="), "{}", p.stdout);
    assert!(!p.stdout.contains("mse"), "{}", p.stdout);
    let no_targets = voxreg(
        &[
            "evaluate",
            "--model",
            "run/member_a.voxr",
            "--manifest",
            "data/manifest.csv",
            "--out",
            "e2",
        ],
        &[],
        cwd,
    );
    assert_eq!(no_targets.code, 2);

    ok(&["rerun", "run", "--out", "run2"], &[], cwd);
    let skip = ["timing.txt", "run_config.txt"];
    let first = tree_digest(&cwd.join("run"), &skip);
    assert_eq!(first, tree_digest(&cwd.join("run2"), &skip));
    assert_eq!(first.len(), 8);
    ok(&["rerun", "eval", "--out", "eval2"], &[], cwd);
    assert_eq!(
        fs::read(cwd.join("eval/predictions.csv")).unwrap(),
        fs::read(cwd.join("eval2/predictions.csv")).unwrap()
    );
}
