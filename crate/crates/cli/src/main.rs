//! `fpnet`: train, evaluate, count, describe and verify FP-nets.
//!
//! Exit codes: 0 success, 1 validation or verification failure, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fpnet::data::{load_cifar10, Dataset, Split};
use fpnet::model_zoo::{build_fp_resnet50_spec, summarize, ModelSummary};
use fpnet::trainer::{evaluate, load_checkpoint, Precision, TrainConfig, Trainer};
use fpnet::verify::{self, SuiteReport};
use fpnet::{Base, Error, Model, ModelSpec, Scalar};
use serde_json::json;

const DATA_ENV: &str = "FPNET_DATA_DIR";

#[derive(Parser)]
#[command(name = "fpnet", version, about = "Feature-product networks on CIFAR-10")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv and checkpoint.bin under --out-dir.
    Train(TrainArgs),
    /// Test error of a checkpoint on the CIFAR-10 test split.
    Eval(EvalArgs),
    /// Per-layer and total parameter counts.
    CountParams(CountArgs),
    /// Run self-check suites against independent references.
    Verify(VerifyArgs),
    /// Layer-by-layer architecture listing.
    Describe(CountArgs),
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Base network: resnet20, resnet32, resnet44, resnet18, resnet34, resnet50.
    #[arg(long, default_value = "resnet32")]
    model: String,
    /// One binary digit per stage; '1' replaces the stage by FP-blocks.
    /// Defaults to the unmodified base.
    #[arg(long)]
    config: Option<String>,
    /// Expansion factor inside FP-blocks (default 2 on CIFAR, 1 on ImageNet).
    #[arg(long)]
    q: Option<usize>,
    /// Single depthwise filter and ReLU instead of the filter-pair product.
    #[arg(long)]
    ablation: bool,
}

impl ModelArgs {
    /// `resnet50-fp` is the ImageNet ResNet-50 with stages 2 and 4 replaced.
    fn is_resnet50_fp(&self) -> bool {
        let key = self.model.to_ascii_lowercase().replace(['-', '_'], "");
        key == "resnet50fp" || key == "fpresnet50"
    }

    fn spec(&self) -> Result<ModelSpec, Error> {
        let (base, default_config) = if self.is_resnet50_fp() {
            (Base::Resnet50, Some("0101".to_string()))
        } else {
            (self.model.parse::<Base>()?, None)
        };
        let classes = if base.is_cifar() { 10 } else { 1000 };
        let mut spec = ModelSpec::base(base, classes);
        if let Some(c) = self.config.clone().or(default_config) {
            spec.config = c;
        }
        if let Some(q) = self.q {
            spec.q = q;
        }
        spec.ablation = self.ablation;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Directory holding the extracted CIFAR-10 binary batches.
    #[arg(long, env = DATA_ENV)]
    data_dir: Option<PathBuf>,
    /// Train on generated images of this many items instead of CIFAR-10.
    #[arg(long, conflicts_with = "data_dir")]
    synthetic: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep only the first N training images of each class.
    #[arg(long)]
    subset: Option<usize>,
    /// Evaluate on the first N test images only.
    #[arg(long)]
    test_limit: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "f32")]
    precision: PrecisionArg,
    /// Ten epochs with one learning-rate drop at epoch 8.
    #[arg(long)]
    smoke: bool,
    #[arg(long)]
    no_augment: bool,
    /// Continue from a checkpoint; model and schedule come from the file.
    #[arg(long, conflicts_with_all = ["smoke", "batch_size", "precision"])]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, env = DATA_ENV)]
    data_dir: Option<PathBuf>,
    #[arg(long, conflicts_with = "data_dir")]
    synthetic: Option<usize>,
    #[arg(long)]
    test_limit: Option<usize>,
}

#[derive(Args)]
struct CountArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Machine-readable output.
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Suite {
    Gradcheck,
    Conv,
    Volterra,
    Params,
    Data,
}

#[derive(Args)]
struct VerifyArgs {
    /// Suites to run; all but `data` by default, `data` too when a data
    /// directory is known.
    #[arg(long, value_enum)]
    suite: Vec<Suite>,
    #[arg(long, env = DATA_ENV)]
    data_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per op for gradcheck.
    #[arg(long, default_value_t = 20)]
    instances: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn print_config(value: serde_json::Value) {
    eprintln!("resolved config: {value}");
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::CountParams(a) => count_params(a, false),
        Command::Describe(a) => count_params(a, true),
        Command::Verify(a) => verify(a),
    }
}

fn summary(model: &ModelArgs) -> anyhow::Result<ModelSummary> {
    let spec = model.spec()?;
    print_config(json!({ "model": spec }));
    if model.is_resnet50_fp() && model.config.is_none() && model.q.is_none() && !model.ablation {
        return Ok(build_fp_resnet50_spec(spec.num_classes)?);
    }
    let (m, store) = Model::new::<f32>(spec, 0)?;
    Ok(summarize(&m, &store))
}

fn count_params(a: CountArgs, full: bool) -> anyhow::Result<bool> {
    let s = summary(&a.model)?;
    if a.json {
        println!("{}", s.to_json());
    } else if full {
        println!("{s}");
    } else {
        println!("{} {}", s.name, s.config);
        println!("{:<8} {:>12}", "stem", s.stem_params);
        for l in &s.layers {
            println!("{:<8} {:>12}{}", format!("layer{}", l.index), l.params, if l.fp { "  fp" } else { "" });
        }
        println!("{:<8} {:>12}", "head", s.head_params);
        println!("{:<8} {:>12}  ({})", "total", s.total_params, human(s.total_params));
    }
    Ok(true)
}

fn human(n: usize) -> String {
    if n >= 1_000_000 {
        format!("{:.1}M", n as f64 / 1e6)
    } else {
        format!("{}K", (n as f64 / 1e3).round())
    }
}

fn datasets(data_dir: Option<&Path>, synthetic: Option<usize>, seed: u64) -> anyhow::Result<(Dataset, Dataset)> {
    if let Some(n) = synthetic {
        return Ok((Dataset::synthetic(n, seed, Split::Train), Dataset::synthetic(n.div_ceil(5).max(10), seed ^ 1, Split::Test)));
    }
    let Some(dir) = data_dir else {
        bail!("no CIFAR-10 directory: pass --data-dir or set {DATA_ENV}");
    };
    let train = load_cifar10(dir, Split::Train).context("loading training split")?;
    let test = load_cifar10(dir, Split::Test).context("loading test split")?;
    Ok((train, test))
}

fn train(a: TrainArgs) -> anyhow::Result<bool> {
    let (train, test) = datasets(a.data_dir.as_deref(), a.synthetic, a.seed)?;
    let train = match a.subset {
        Some(n) => train.subset_per_class(n),
        None => train,
    };
    let test = match a.test_limit {
        Some(n) => test.take(n),
        None => test,
    };
    if let Some(path) = &a.resume {
        let precision = checkpoint_precision(path)?;
        return match precision {
            Precision::F32 => resume_run::<f32>(&a, path, &train, &test),
            Precision::F64 => resume_run::<f64>(&a, path, &train, &test),
        };
    }
    let spec = a.model.spec()?;
    let mut config = if a.smoke { TrainConfig::smoke(a.seed) } else { TrainConfig::standard(a.seed) };
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    if let Some(b) = a.batch_size {
        config.batch_size = b;
    }
    config.precision = a.precision.into();
    config.augment = !a.no_augment;
    config.validate()?;
    let out = a.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-s{}", spec.label(), a.seed)));
    print_config(json!({
        "model": spec,
        "train": config,
        "out_dir": out,
        "train_items": train.len(),
        "test_items": test.len(),
    }));
    match config.precision {
        Precision::F32 => fresh_run::<f32>(spec, config, &out, &train, &test),
        Precision::F64 => fresh_run::<f64>(spec, config, &out, &train, &test),
    }
}

fn fresh_run<T: Scalar>(spec: ModelSpec, config: TrainConfig, out: &Path, train: &Dataset, test: &Dataset) -> anyhow::Result<bool> {
    let trainer = Trainer::<T>::new(spec, config)?.with_output(out)?;
    finish(trainer, train, test)
}

fn resume_run<T: Scalar>(a: &TrainArgs, path: &Path, train: &Dataset, test: &Dataset) -> anyhow::Result<bool> {
    let mut ck = load_checkpoint::<T>(path)?;
    if let Some(e) = a.epochs {
        ck.config.epochs = e;
    }
    let out = a.out_dir.clone().or_else(|| path.parent().map(Path::to_path_buf)).unwrap_or_default();
    print_config(json!({
        "model": ck.spec,
        "train": ck.config,
        "resume_from": path,
        "completed_epochs": ck.epoch,
        "out_dir": out,
        "train_items": train.len(),
        "test_items": test.len(),
    }));
    let trainer = Trainer::<T>::resume(ck)?.with_output(out)?;
    finish(trainer, train, test)
}

fn finish<T: Scalar>(mut trainer: Trainer<T>, train: &Dataset, test: &Dataset) -> anyhow::Result<bool> {
    let report = trainer.run(train, test)?;
    println!(
        "{}: {} epochs, final test error {:.4}, best {:.4}",
        trainer.model.spec().label(),
        trainer.epoch,
        report.final_test_error,
        report.min_test_error
    );
    Ok(true)
}

/// Reads only the header and manifest to learn the stored precision.
fn checkpoint_precision(path: &Path) -> anyhow::Result<Precision> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.len() < 20 {
        bail!("{}: not a checkpoint file", path.display());
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let manifest: serde_json::Value = bytes
        .get(20..20 + len)
        .and_then(|m| serde_json::from_slice(m).ok())
        .with_context(|| format!("{}: unreadable manifest", path.display()))?;
    Ok(match manifest["config"]["precision"].as_str() {
        Some("f64") => Precision::F64,
        _ => Precision::F32,
    })
}

fn eval(a: EvalArgs) -> anyhow::Result<bool> {
    let (_, test) = datasets(a.data_dir.as_deref(), a.synthetic, 0)?;
    let test = match a.test_limit {
        Some(n) => test.take(n),
        None => test,
    };
    match checkpoint_precision(&a.checkpoint)? {
        Precision::F32 => eval_as::<f32>(&a.checkpoint, &test),
        Precision::F64 => eval_as::<f64>(&a.checkpoint, &test),
    }
}

fn eval_as<T: Scalar>(path: &Path, test: &Dataset) -> anyhow::Result<bool> {
    let ck = load_checkpoint::<T>(path)?;
    print_config(json!({ "model": ck.spec, "train": ck.config, "checkpoint": path, "epoch": ck.epoch, "test_items": test.len() }));
    let mut t = Trainer::<T>::resume(ck)?;
    let err = evaluate(&t.model, &mut t.store, test, &t.policy, t.config.eval_batch_size)?;
    println!("test error {err:.4} on {} images", test.len());
    Ok(true)
}

fn verify(a: VerifyArgs) -> anyhow::Result<bool> {
    let mut suites = a.suite.clone();
    if suites.is_empty() {
        suites = vec![Suite::Volterra, Suite::Params, Suite::Conv, Suite::Gradcheck];
        if a.data_dir.is_some() {
            suites.push(Suite::Data);
        }
    }
    let names: Vec<_> = suites.iter().map(|s| s.to_possible_value().map(|v| v.get_name().to_string())).collect();
    print_config(json!({ "suites": names, "seed": a.seed, "instances": a.instances, "data_dir": a.data_dir }));
    let mut ok = true;
    for s in suites {
        let report: SuiteReport = match s {
            Suite::Gradcheck => verify::gradcheck_suite(a.instances, a.seed)?,
            Suite::Conv => verify::conv_suite(50, a.seed, 1e-5)?,
            Suite::Volterra => verify::volterra_suite(1000, 100, a.seed)?,
            Suite::Params => verify::params_suite(50, a.seed)?,
            Suite::Data => {
                let Some(dir) = &a.data_dir else {
                    bail!("the data suite needs --data-dir or {DATA_ENV}");
                };
                verify::data_suite(dir)?
            }
        };
        println!("{report}");
        ok &= report.passed();
    }
    Ok(ok)
}
