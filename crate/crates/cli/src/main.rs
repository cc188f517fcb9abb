#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use dlt_core::data::{self, Dataset, NoiseSpec};
use dlt_core::nn::{self, gradcheck, Mlp};
use dlt_core::trainer::{self, HardSampleKind, TrainConfig};

/// Dynamic loss thresholding experiments on synthetic noisy-label data.
#[derive(Parser)]
#[command(name = "dlt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with a TOML config and write metrics, summary, ledger and model.
    Train(TrainArgs),
    /// Run a plain cross-entropy pass and estimate the noise rate.
    EstimateNoise(EstimateArgs),
    /// Write a copy of a dataset with injected label noise.
    InjectNoise(InjectArgs),
    /// Write a clean Gaussian-blob dataset.
    Generate(GenerateArgs),
    /// Compare hard-sample loss trajectories and routing.
    HardStudy(HardArgs),
    /// Check analytic gradients against central finite differences.
    GradCheck(GradCheckArgs),
    /// Train and write the per-sample loss ledger.
    DumpLosses(DumpArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Seed override.
    #[arg(long, env = "DLT_SEED")]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                TrainConfig::from_toml(&text)
                    .with_context(|| format!("parsing {}", path.display()))?
            }
            None => TrainConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Per-epoch metrics CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// JSON run summary.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Per-sample loss ledger CSV.
    #[arg(long)]
    ledger: Option<PathBuf>,
    /// Binary model checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// JSON estimation summary.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum NoiseKind {
    Symmetric,
    Asymmetric,
}

#[derive(Args)]
struct InjectArgs {
    /// Input dataset (`.csv` or binary).
    #[arg(short, long)]
    input: PathBuf,
    /// Output dataset (`.csv` or binary).
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long)]
    rate: f64,
    #[arg(long, value_enum, default_value = "symmetric")]
    kind: NoiseKind,
    #[arg(long, env = "DLT_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(short, long)]
    output: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n_per_class: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 1.0)]
    center_spread: f64,
    #[arg(long, default_value_t = 1.0)]
    cluster_std: f64,
    #[arg(long, env = "DLT_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum HardKindArg {
    Erasure,
    Fgsm,
}

#[derive(Args)]
struct HardArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_enum, default_value = "erasure")]
    kind: HardKindArg,
    /// Hard samples per subset sample; the config value when omitted.
    #[arg(long)]
    ratio: Option<f64>,
    /// Checkpoint of the model attacked by fgsm.
    #[arg(long)]
    attack_model: Option<PathBuf>,
    /// JSON report.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 50)]
    models: usize,
    #[arg(long, env = "DLT_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = gradcheck::DEFAULT_STEP)]
    step: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Args)]
struct DumpArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(short, long)]
    output: PathBuf,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    let input =
        BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let data = if is_csv(path) {
        data::read_csv(input)
    } else {
        data::read_binary(input)
    };
    data.with_context(|| format!("reading {}", path.display()))
}

fn write_dataset(data: &Dataset, path: &Path) -> Result<()> {
    let mut out = create(path)?;
    if is_csv(path) {
        data::write_csv(data, &mut out)?;
    } else {
        data::write_binary(data, &mut out)?;
    }
    out.flush()?;
    Ok(())
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let config = args.config.load()?;
    let run = trainer::train(&config)?;
    if let Some(path) = &args.metrics {
        let mut out = create(path)?;
        run.write_metrics_csv(&mut out)?;
        out.flush()?;
    }
    if let Some(path) = &args.ledger {
        let mut out = create(path)?;
        run.ledger.write_csv(&mut out)?;
        out.flush()?;
    }
    if let Some(path) = &args.model {
        let mut out = create(path)?;
        nn::write_checkpoint(&run.model, &mut out)?;
        out.flush()?;
    }
    let summary = run.summary();
    if let Some(path) = &args.summary {
        write_json(&summary, path)?;
    }
    println!(
        "final accuracy {:.4}, best {:.4} at epoch {}",
        summary.final_accuracy, summary.best_accuracy, summary.best_epoch
    );
    Ok(())
}

fn estimate(args: EstimateArgs) -> Result<()> {
    let config = args.config.load()?;
    let est = trainer::estimate_noise(&config)?;
    info!(
        "loss difference between epochs {} and {}; true noise fraction {:.4}",
        est.early_epoch, est.late_epoch, est.true_noise_fraction
    );
    if let Some(path) = &args.summary {
        write_json(&est.result.summary(), path)?;
    }
    println!("{}", est.result.rate);
    Ok(())
}

fn inject(args: InjectArgs) -> Result<()> {
    let data = read_dataset(&args.input)?;
    let spec = match args.kind {
        NoiseKind::Symmetric => NoiseSpec::Symmetric { rate: args.rate },
        NoiseKind::Asymmetric => NoiseSpec::Asymmetric {
            rate: args.rate,
            class_map: data::cyclic_class_map(data.class_count()),
        },
    };
    let noisy = spec.apply(&data, args.seed)?;
    write_dataset(&noisy, &args.output)?;
    println!(
        "observed label differs from truth on {:.4} of samples",
        noisy.noise_fraction()
    );
    Ok(())
}

fn generate(args: GenerateArgs) -> Result<()> {
    let data = data::generate_blobs(
        args.n_per_class,
        args.classes,
        args.dim,
        args.center_spread,
        args.cluster_std,
        args.seed,
    )?;
    write_dataset(&data, &args.output)
}

fn hard_study(args: HardArgs) -> Result<()> {
    let config = args.config.load()?;
    let attack: Option<Mlp> = match &args.attack_model {
        Some(path) => {
            let input = BufReader::new(
                File::open(path).with_context(|| format!("opening {}", path.display()))?,
            );
            Some(nn::read_checkpoint(input)?)
        }
        None => None,
    };
    let kind = match args.kind {
        HardKindArg::Erasure => HardSampleKind::Erasure,
        HardKindArg::Fgsm => HardSampleKind::Fgsm,
    };
    let ratio = args.ratio.unwrap_or(config.hard.ratio);
    let report = trainer::run_hard_sample_study(&config, kind, ratio, attack.as_ref())?;
    if let Some(path) = &args.report {
        write_json(&report, path)?;
    }
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "{} hard samples; L2 to clean {}, to noisy {}; routed clean {}",
        report.hard_count,
        show(report.hard_to_clean_l2),
        show(report.hard_to_noisy_l2),
        show(report.hard_clean_fraction)
    );
    Ok(())
}

fn grad_check(args: GradCheckArgs) -> Result<()> {
    let report = gradcheck::run_suite(args.models, args.seed, args.step)?;
    println!(
        "{} models, {} coordinates checked, {} skipped at kinks; max relative error {:.3e} (parameters {:.3e}, inputs {:.3e})",
        report.models,
        report.checked,
        report.skipped_kinks,
        report.max_rel_error(),
        report.max_param_rel_error,
        report.max_input_rel_error
    );
    if !(report.max_rel_error() < args.tolerance) {
        bail!("relative error exceeds {}", args.tolerance);
    }
    Ok(())
}

fn dump_losses(args: DumpArgs) -> Result<()> {
    let config = args.config.load()?;
    let run = trainer::train(&config)?;
    let mut out = create(&args.output)?;
    run.ledger.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::EstimateNoise(a) => estimate(a),
        Command::InjectNoise(a) => inject(a),
        Command::Generate(a) => generate(a),
        Command::HardStudy(a) => hard_study(a),
        Command::GradCheck(a) => grad_check(a),
        Command::DumpLosses(a) => dump_losses(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
