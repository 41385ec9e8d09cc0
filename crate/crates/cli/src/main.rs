//! `cim-adapt`: run the adaptation stages, mapping, simulation and reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use cim_adapt::mapper::MappingPlan;
use cim_adapt::model::load_checkpoint;
use cim_adapt::pipeline::{load_stage, Pipeline, PipelineConfig, Stage, INTEGER_MODEL_FILE};
use cim_adapt::qat::load_integer_model;
use cim_adapt::sim::simulate_inference;
use cim_adapt::train::argmax;
use cim_adapt::{Error, Tensor};

#[derive(Parser)]
#[command(name = "cim-adapt", version, about = "Adapt CNNs to a multi-bit CIM macro")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON pipeline config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    /// Directory holding checkpoints and reports.
    #[arg(long)]
    out: PathBuf,
    /// Multiplies every epoch count.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Round each layer's output scale to a power of two on export.
    #[arg(long)]
    power_of_two: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the seed model with activation quantizers.
    TrainSeed(Common),
    /// Shrink, prune and re-expand the seed model under the bitline budget.
    Morph(Common),
    /// Weight quantization-aware training with folded batchnorm.
    QatPhase1(Common),
    /// ADC calibration, partial-sum quantization-aware training and integer export.
    QatPhase2(Common),
    /// Map a model onto the macro and print its hardware metrics.
    Map {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to map; defaults to the newest stage checkpoint in `--out`,
        /// or a freshly built model from the config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run images through the bit-exact integer simulator.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Integer model file; defaults to the exported model in `--out`.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Raw little-endian f64 images in CHW order, concatenated; defaults
        /// to the first `--count` test images.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Baseline-vs-adapted hardware and accuracy table (JSON and CSV).
    Report(Common),
    /// Every stage in order, then the report.
    Pipeline(Common),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::TrainSeed(_) => "train-seed",
            Command::Morph(_) => "morph",
            Command::QatPhase1(_) => "qat-phase1",
            Command::QatPhase2(_) => "qat-phase2",
            Command::Map { .. } => "map",
            Command::Simulate { .. } => "simulate",
            Command::Report(_) => "report",
            Command::Pipeline(_) => "pipeline",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::TrainSeed(c)
            | Command::Morph(c)
            | Command::QatPhase1(c)
            | Command::QatPhase2(c)
            | Command::Report(c)
            | Command::Pipeline(c) => c,
            Command::Map { common, .. } | Command::Simulate { common, .. } => common,
        }
    }
}

#[derive(Debug)]
enum CliError {
    Core(Error),
    Usage(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn to_json(&self) -> Value {
        match self {
            CliError::Core(Error::MissingStage { stage, path }) => json!({
                "error": self.message(),
                "kind": "missing-stage",
                "run_first": stage,
                "path": path,
            }),
            CliError::Core(_) => json!({ "error": self.message(), "kind": "runtime" }),
            CliError::Usage(_) => json!({ "error": self.message(), "kind": "usage" }),
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Core(e) => e.to_string(),
            CliError::Usage(m) => m.clone(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_sha256: String,
    seed: u64,
    scale: f64,
    power_of_two: bool,
    versions: Value,
}

fn config_hash(cfg: &PipelineConfig) -> CliResult<String> {
    let canonical = serde_json::to_vec(cfg)?;
    Ok(hex::encode(Sha256::digest(&canonical)))
}

fn write_manifest(cmd: &str, c: &Common, cfg: &PipelineConfig) -> CliResult<()> {
    let m = Manifest {
        command: cmd,
        config_sha256: config_hash(cfg)?,
        seed: c.seed,
        scale: c.scale,
        power_of_two: c.power_of_two,
        versions: json!({
            "cim-adapt": env!("CARGO_PKG_VERSION"),
        }),
    };
    fs::write(
        c.out.join(format!("manifest-{cmd}.json")),
        serde_json::to_string_pretty(&m)? + "\n",
    )?;
    Ok(())
}

fn load_config(c: &Common) -> CliResult<PipelineConfig> {
    let cfg = match &c.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    Ok(cfg.scaled(c.scale)?)
}

fn print_json<T: Serialize>(v: &T) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn newest_checkpoint(out: &Path) -> Option<PathBuf> {
    Stage::ALL
        .iter()
        .rev()
        .map(|s| out.join(s.checkpoint()))
        .find(|p| p.exists())
}

fn read_images(path: &Path, per_image: usize) -> CliResult<Vec<Tensor>> {
    let bytes = fs::read(path)?;
    if bytes.is_empty() || bytes.len() % (8 * per_image) != 0 {
        return Err(CliError::Usage(format!(
            "{} holds {} bytes, not a whole number of {per_image}-value f64 images",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8 * per_image)
        .map(|img| {
            Tensor::from_vec(
                img.chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    .collect(),
            )
        })
        .collect())
}

fn run(cmd: &Command) -> CliResult<()> {
    let c = cmd.common();
    let cfg = load_config(c)?;
    fs::create_dir_all(&c.out)?;
    write_manifest(cmd.name(), c, &cfg)?;
    let macro_cfg = cfg.macro_cfg;
    let pipeline = || Pipeline::new(cfg.clone(), c.seed, &c.out);
    match cmd {
        Command::TrainSeed(_) => print_json(&pipeline()?.train_seed()?.1),
        Command::Morph(_) => {
            load_stage(&c.out, Stage::TrainSeed)?;
            print_json(pipeline()?.morph()?.1.final_snapshot())
        }
        Command::QatPhase1(_) => {
            load_stage(&c.out, Stage::Morph)?;
            print_json(&pipeline()?.phase1()?.1)
        }
        Command::QatPhase2(_) => {
            load_stage(&c.out, Stage::QatPhase1)?;
            print_json(&pipeline()?.phase2(c.power_of_two)?.1)
        }
        Command::Map { checkpoint, .. } => {
            let model = match checkpoint.clone().or_else(|| newest_checkpoint(&c.out)) {
                Some(p) => load_checkpoint(p)?,
                None => pipeline()?.build_model()?,
            };
            let plan = MappingPlan::build(&model, &macro_cfg)?;
            let target = (cfg.morph.morph.target_bl > 0).then_some(cfg.morph.morph.target_bl);
            let target = target.filter(|&t| plan.macro_usage(t).is_ok());
            let report = plan.report(&model, target, macro_cfg.adc_bits())?;
            fs::write(c.out.join("map.json"), serde_json::to_string_pretty(&report)? + "\n")?;
            print_json(&report)
        }
        Command::Simulate { model, image, count, .. } => {
            let path = model.clone().unwrap_or_else(|| c.out.join(INTEGER_MODEL_FILE));
            if !path.exists() && model.is_none() {
                return Err(Error::MissingStage {
                    stage: Stage::QatPhase2.command().into(),
                    path: path.display().to_string(),
                }
                .into());
            }
            let im = load_integer_model(&path)?;
            let per = im.input_channels * im.input_resolution * im.input_resolution;
            let (images, labels): (Vec<Tensor>, Vec<Option<usize>>) = match image {
                Some(p) => {
                    let imgs = read_images(p, per)?;
                    let n = imgs.len();
                    (imgs, vec![None; n])
                }
                None => {
                    let (_, test) = cfg.data.load()?;
                    let n = (*count).min(test.len());
                    (0..n)
                        .map(|i| (Tensor::from_vec(test.image(i).to_vec()), Some(test.labels[i])))
                        .unzip()
                }
            };
            let mut results = Vec::new();
            for (img, label) in images.iter().zip(labels) {
                let img = img
                    .clone()
                    .reshape(&[im.input_channels, im.input_resolution, im.input_resolution])?;
                let out = simulate_inference(&im, &img)?;
                results.push(json!({
                    "logits": out.logits,
                    "prediction": argmax(&out.logits),
                    "label": label,
                    "trace": out.trace,
                }));
            }
            let v = json!({ "model": path.display().to_string(), "images": results });
            fs::write(c.out.join("simulate.json"), serde_json::to_string_pretty(&v)? + "\n")?;
            print_json(&v)
        }
        Command::Report(_) => print_json(&pipeline()?.report()?),
        Command::Pipeline(_) => print_json(&pipeline()?.run_all(c.power_of_two)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let v = CliError::Usage(e.to_string().trim().to_string()).to_json();
            eprintln!("{v}");
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
