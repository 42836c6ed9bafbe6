use std::fmt::Write as _;
use std::fs;
use std::io::Read as _;
use std::path::{Component, Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use clap::{Args, ValueEnum};
use voxreg::dataio::{
    attach_residuals, generate_synthetic, load_manifest, read_residuals, write_predictions, write_residuals, Dataset,
    LoadOptions, Manifest, Split, SynthSpec, TargetColumn,
};
use voxreg::ensemble::{blend, Ensemble, EnsembleSpec, WeightScheme};
use voxreg::pipeline::{load_training_data, residualize_manifest, train_pair, weigh_members, PipelineConfig};
use voxreg::residualize::CovariateSchema;
use voxreg::selfcheck::{run_selfcheck, Perturbation, SelfCheckOptions};
use voxreg::trainer::{mse, predict_dataset};
use voxreg::voxcnn::{load_checkpoint, save_checkpoint, VoxCnnModel, CHECKPOINT_MAGIC};
use voxreg::Error;

use crate::run_config::RunConfig;

pub const RESIDUALS_FILE: &str = "residuals.csv";
pub const TEST_RESIDUALS_FILE: &str = "test_residuals.csv";
pub const RESIDUAL_MODEL_FILE: &str = "residualization.json";
pub const ENSEMBLE_FILE: &str = "ensemble.txt";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const METRICS_FILE: &str = "metrics.txt";
pub const TIMING_FILE: &str = "timing.txt";

#[derive(Debug, Args)]
pub struct ResidualizeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Covariate schema (JSON).
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Residualized targets; repeat to combine files.
    #[arg(long, required = true)]
    pub residuals: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Root seed; overrides any `seed=` in `--config`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key=value` override of a training or model setting.
    #[arg(long = "config", value_name = "KEY=VALUE")]
    pub config: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    /// Member checkpoints.
    #[arg(long, num_args = 2.., required = true)]
    pub members: Vec<PathBuf>,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, required = true)]
    pub residuals: Vec<PathBuf>,
    #[arg(long, default_value_t = WeightScheme::PaperFixed)]
    pub scheme: WeightScheme,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// A member checkpoint or an ensemble file.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub residuals: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "config", value_name = "KEY=VALUE")]
    pub config: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PerturbArg {
    Conv3d,
    LinearGrad,
}

#[derive(Debug, Args)]
pub struct SelfcheckArgs {
    /// Random seeds for the gradient checks.
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,
    /// Skip the full-model gradient check.
    #[arg(long)]
    pub no_model: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, hide = true)]
    pub perturb: Option<PerturbArg>,
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    /// Directory holding a `run_config.txt`.
    pub dir: PathBuf,
    /// Write to this directory instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn split_kv(kv: &str) -> Result<(&str, &str), Error> {
    kv.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got {kv:?}")))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

/// Loads the manifest and merges every residual file into it.
fn manifest_with_residuals(manifest: &Path, residuals: &[PathBuf]) -> anyhow::Result<Manifest> {
    let mut m = load_manifest(manifest, None, LoadOptions::default())?;
    for r in residuals {
        let rows = read_residuals(r)?;
        attach_residuals(&mut m, &rows);
    }
    Ok(m)
}

pub fn residualize(args: &ResidualizeArgs, argv: &[String]) -> anyhow::Result<()> {
    let schema = CovariateSchema::load(&args.schema)?;
    let manifest = load_manifest(&args.manifest, Some(&schema), LoadOptions::default())?;
    let out = residualize_manifest(&manifest, &schema)?;
    create_dir(&args.out)?;
    write_residuals(&args.out.join(RESIDUALS_FILE), &out.fitted)?;
    write_residuals(&args.out.join(TEST_RESIDUALS_FILE), &out.held_out)?;
    out.model.save(&args.out.join(RESIDUAL_MODEL_FILE))?;
    let settings = format!(
        "manifest={}\nschema={}\n",
        args.manifest.display(),
        args.schema.display()
    );
    RunConfig::capture(argv, settings)?.write(&args.out)?;
    println!(
        "residualized {} train/val subjects and {} test subjects into {}",
        out.fitted.len(),
        out.held_out.len(),
        args.out.display()
    );
    Ok(())
}

pub fn pipeline_config(overrides: &[String], seed: Option<u64>) -> anyhow::Result<PipelineConfig> {
    let mut config = PipelineConfig::default();
    for kv in overrides {
        let (k, v) = split_kv(kv)?;
        config.set(k, v)?;
    }
    if let Some(s) = seed {
        config.train.seed = s;
    }
    config.train.validate()?;
    config.model.validate()?;
    Ok(config)
}

pub fn train(args: &TrainArgs, argv: &[String]) -> anyhow::Result<()> {
    let config = pipeline_config(&args.config, args.seed)?;
    let manifest = manifest_with_residuals(&args.manifest, &args.residuals)?;
    let (train, val) = load_training_data(&manifest)?;
    create_dir(&args.out)?;
    RunConfig::capture(argv, config.to_kv_text())?.write(&args.out)?;
    println!(
        "training 2 members on {} subjects, validating on {}",
        train.len(),
        val.len()
    );
    let start = Instant::now();
    let members = train_pair::<f32>(&train, &val, &config, |name, e| {
        println!(
            "{name} epoch {:>4} train_loss {:.6e} val_mse {:.6e}",
            e.epoch, e.train_loss, e.val_mse
        );
    })?;
    let mut timing = String::new();
    for m in &members {
        let ck = &m.checkpoint;
        save_checkpoint(
            &args.out.join(format!("{}.voxr", m.name)),
            &ck.model,
            ck.optimizer.as_ref(),
            &ck.meta,
        )?;
        write_file(&args.out.join(format!("{}.report.json", m.name)), &m.report.to_json())?;
        write_file(&args.out.join(format!("{}.log", m.name)), &m.report.log_lines())?;
        let mut subjects = m.subjects.join("\n");
        subjects.push('\n');
        write_file(&args.out.join(format!("{}.subjects.txt", m.name)), &subjects)?;
        let _ = writeln!(timing, "{}_seconds={:.3}", m.name, m.report.wall_seconds);
        println!(
            "{}: best epoch {} val_mse {} ({:?})",
            m.name,
            m.report.best_epoch,
            m.report.best_val_mse.map_or("n/a".into(), |v| format!("{v:.6e}")),
            m.report.stop_reason
        );
    }
    let _ = writeln!(timing, "total_seconds={:.3}", start.elapsed().as_secs_f64());
    write_file(&args.out.join(TIMING_FILE), &timing)?;
    Ok(())
}

/// `target` relative to `base`; both must be absolute.
fn relative_to(target: &Path, base: &Path) -> PathBuf {
    let t: Vec<Component> = target.components().collect();
    let b: Vec<Component> = base.components().collect();
    let common = t.iter().zip(&b).take_while(|(x, y)| x == y).count();
    if common <= 1 {
        return target.to_path_buf();
    }
    let mut rel = PathBuf::new();
    for _ in common..b.len() {
        rel.push("..");
    }
    for c in &t[common..] {
        rel.push(c.as_os_str());
    }
    rel
}

fn canonical(path: &Path) -> anyhow::Result<PathBuf> {
    Ok(fs::canonicalize(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?)
}

pub fn ensemble(args: &EnsembleArgs, argv: &[String]) -> anyhow::Result<()> {
    let manifest = manifest_with_residuals(&args.manifest, &args.residuals)?;
    let val = Dataset::load(&manifest.with_split(Split::Val), TargetColumn::Residual)?;
    if val.is_empty() {
        return Err(Error::Data("no validation subjects".into()).into());
    }
    create_dir(&args.out)?;
    let out_dir = canonical(&args.out)?;
    let mut members = Vec::with_capacity(args.members.len());
    for p in &args.members {
        let model = load_checkpoint::<f32>(p)?.model;
        members.push((relative_to(&canonical(p)?, &out_dir), model));
    }
    let spec = weigh_members(&members, &val, args.scheme)?;
    spec.save(&args.out.join(ENSEMBLE_FILE))?;
    let settings = format!("scheme={}\n", args.scheme);
    RunConfig::capture(argv, settings)?.write(&args.out)?;
    for (m, p) in spec.members.iter().zip(&args.members) {
        println!("{}: weight {:.6} val_mse {:.6e}", p.display(), m.weight, m.val_mse);
    }
    Ok(())
}

enum LoadedModel {
    Single(Box<VoxCnnModel<f32>>),
    Ensemble(Ensemble<f32>),
}

fn load_model(path: &Path) -> anyhow::Result<LoadedModel> {
    let io = |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut head = [0u8; 4];
    let mut f = fs::File::open(path).map_err(io)?;
    let n = f.read(&mut head).map_err(io)?;
    if n == 4 && &head == CHECKPOINT_MAGIC {
        return Ok(LoadedModel::Single(Box::new(load_checkpoint::<f32>(path)?.model)));
    }
    let spec = EnsembleSpec::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(LoadedModel::Ensemble(Ensemble::load(&spec, base)?))
}

fn select(manifest: &Manifest, split: SplitArg) -> Vec<&voxreg::dataio::SubjectRecord> {
    match split {
        SplitArg::Train => manifest.with_split(Split::Train),
        SplitArg::Val => manifest.with_split(Split::Val),
        SplitArg::Test => manifest.with_split(Split::Test),
        SplitArg::All => manifest.records.iter().collect(),
    }
}

/// `evaluate` requires a residual target for every selected subject;
/// `predict` uses them only when all are present.
pub fn evaluate(args: &EvalArgs, require_targets: bool, argv: &[String]) -> anyhow::Result<()> {
    let model = load_model(&args.model)?;
    let manifest = manifest_with_residuals(&args.manifest, &args.residuals)?;
    let records = select(&manifest, args.split);
    if records.is_empty() {
        return Err(Error::Data(format!("no subjects in split {:?}", args.split)).into());
    }
    let all_targets = records.iter().all(|r| r.residual_score.is_some());
    let column = if require_targets || all_targets {
        TargetColumn::Residual
    } else {
        TargetColumn::None
    };
    let data = Dataset::load(&records, column)?;
    let targets = data.targets().ok();

    let mut metrics = String::new();
    let predictions = match &model {
        LoadedModel::Single(m) => predict_dataset(m, &data)?,
        LoadedModel::Ensemble(e) => {
            let members = e.member_predictions(&data)?;
            let blended = blend(&members, &e.weights);
            if let Some(t) = &targets {
                let mut weighted = 0.0;
                for (i, (p, w)) in members.iter().zip(&e.weights).enumerate() {
                    let m = mse(p, t);
                    weighted += w * m;
                    let _ = writeln!(metrics, "member_{i}_mse={m:?}");
                }
                let _ = writeln!(metrics, "weighted_member_mse={weighted:?}");
            }
            blended
        }
    };
    if let Some(t) = &targets {
        metrics.insert_str(0, &format!("n={}\nmse={:?}\n", t.len(), mse(&predictions, t)));
    } else {
        let _ = writeln!(metrics, "n={}", predictions.len());
    }

    create_dir(&args.out)?;
    let rows: Vec<(String, f64)> = data.subject_ids().into_iter().zip(predictions).collect();
    write_predictions(&args.out.join(PREDICTIONS_FILE), &rows)?;
    write_file(&args.out.join(METRICS_FILE), &metrics)?;
    let settings = format!("split={:?}\nmodel={}\n", args.split, args.model.display()).to_lowercase();
    RunConfig::capture(argv, settings)?.write(&args.out)?;
    print!("{metrics}");
    Ok(())
}

pub fn synth(args: &SynthArgs, argv: &[String]) -> anyhow::Result<()> {
    let mut spec = SynthSpec::default();
    for kv in &args.config {
        let (k, v) = split_kv(kv)?;
        spec.set(k, v)?;
    }
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let out = generate_synthetic(&spec, &args.out)?;
    RunConfig::capture(argv, spec.to_kv_text())?.write(&args.out)?;
    let [tr, va, te] = spec.split_sizes();
    println!(
        "wrote {} subjects ({tr} train, {va} val, {te} test) to {}",
        out.truth.subjects.len(),
        out.manifest_path.display()
    );
    Ok(())
}

pub fn selfcheck(args: &SelfcheckArgs) -> anyhow::Result<()> {
    let opts = SelfCheckOptions {
        seeds: args.seeds,
        include_model: !args.no_model,
        seed: args.seed,
        perturbation: args.perturb.map(|p| match p {
            PerturbArg::Conv3d => Perturbation::Conv3dOutput,
            PerturbArg::LinearGrad => Perturbation::LinearGradient,
        }),
        ..SelfCheckOptions::default()
    };
    let results = run_selfcheck(&opts, |r| println!("{}", r.line()))?;
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", results.len());
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} self-check(s) failed")).into());
    }
    Ok(())
}

/// Replays the arguments recorded in `args.dir`, from the recorded working
/// directory.
pub fn rerun_argv(args: &RerunArgs) -> anyhow::Result<(PathBuf, Vec<String>)> {
    let rc = RunConfig::read(&args.dir)?;
    let argv = match &args.out {
        Some(o) => {
            let abs = std::path::absolute(o).with_context(|| format!("cannot resolve {}", o.display()))?;
            rc.argv_with_out(&abs)
        }
        None => rc.argv.clone(),
    };
    if argv.first().is_some_and(|c| c == "rerun") {
        return Err(Error::Config("a run configuration cannot replay another rerun".into()).into());
    }
    Ok((rc.cwd, argv))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths_climb_to_the_common_ancestor() {
        let r = relative_to(Path::new("/a/run/train/member_a.voxr"), Path::new("/a/run/ens"));
        assert_eq!(r, Path::new("../train/member_a.voxr"));
        let r = relative_to(Path::new("/a/run/ens/m.voxr"), Path::new("/a/run/ens"));
        assert_eq!(r, Path::new("m.voxr"));
    }

    #[test]
    fn kv_needs_an_equals_sign() {
        assert_eq!(split_kv(" patience = 3").unwrap(), ("patience", "3"));
        assert!(matches!(split_kv("patience"), Err(Error::Config(_))));
    }

    #[test]
    fn seed_flag_overrides_config() {
        let c = pipeline_config(&["seed=3".into(), "max_epochs=2".into()], Some(9)).unwrap();
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.train.max_epochs, 2);
        assert!(pipeline_config(&["no_such_key=1".into()], None).is_err());
    }
}
