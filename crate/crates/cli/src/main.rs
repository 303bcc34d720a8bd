use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use semix::Result;
use semix_cli::commands::{self, ProbeArgs};
use semix_cli::config::{RunConfig, SEED_ENV};
use semix_cli::source::Part;
use semix_cli::exit_code;

#[derive(Parser)]
#[command(name = "semix", about = "Semantic equivariant mixup experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes model.semx, metrics.csv and config.resolved to out_dir
    Train(TrainArgs),
    /// Clean accuracy of a checkpoint
    Eval(EvalArgs),
    /// Accuracy over the 4 x 5 corruption grid
    CorruptEval {
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// MSP-based AUROC between an in-distribution and an OOD dataset
    OodEval {
        checkpoint: PathBuf,
        #[arg(long = "ood")]
        ood: String,
        /// In-distribution dataset (default: the training dataset)
        #[arg(long = "id")]
        id: Option<String>,
        #[arg(long, default_value = "test")]
        split: Part,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Equivariance gap curve and PCA projection for one class pair
    Probe {
        checkpoint: PathBuf,
        #[arg(long = "class_a")]
        class_a: usize,
        #[arg(long = "class_b")]
        class_b: usize,
        #[arg(long = "pair_count", default_value_t = 100)]
        pair_count: usize,
        #[arg(long = "lambda_step", default_value_t = 0.1)]
        lambda_step: f64,
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long, default_value = "test")]
        split: Part,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (default: next to the checkpoint)
        #[arg(long = "out_dir")]
        out_dir: Option<PathBuf>,
    },
    /// Write a dataset as IDX image and label files
    GenData {
        dataset: String,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value = "all")]
        split: Part,
    },
    /// Finite-difference check of the full training loss on a small conv net
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    /// Dataset specifier (default: the training dataset)
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long, default_value = "test")]
    split: Part,
    /// JSON output path (default: next to the checkpoint)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// key = value config file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long = "batch_size")]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long = "lr_milestones")]
    lr_milestones: Option<String>,
    #[arg(long = "lr_factor")]
    lr_factor: Option<String>,
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long = "weight_decay")]
    weight_decay: Option<String>,
    #[arg(long = "mix_kind")]
    mix_kind: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long = "stop_gradient_targets")]
    stop_gradient_targets: Option<String>,
    #[arg(long = "penalty_variant")]
    penalty_variant: Option<String>,
    #[arg(long = "es_fraction")]
    es_fraction: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long = "out_dir")]
    out_dir: Option<String>,
}

impl TrainArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let flags = [
            ("dataset", &self.dataset),
            ("model", &self.model),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("lr", &self.lr),
            ("lr_milestones", &self.lr_milestones),
            ("lr_factor", &self.lr_factor),
            ("momentum", &self.momentum),
            ("weight_decay", &self.weight_decay),
            ("mix_kind", &self.mix_kind),
            ("alpha", &self.alpha),
            ("gamma", &self.gamma),
            ("stop_gradient_targets", &self.stop_gradient_targets),
            ("penalty_variant", &self.penalty_variant),
            ("es_fraction", &self.es_fraction),
            ("seed", &self.seed),
            ("out_dir", &self.out_dir),
        ];
        flags.into_iter().filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone()))).collect()
    }
}

fn write_json(value: &Value, out: Option<&Path>, checkpoint: &Path, default_name: &str) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json values serialise");
    println!("{text}");
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => checkpoint.with_file_name(default_name),
    };
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Train(args) => {
            let text = args.config.as_ref().map(std::fs::read_to_string).transpose()?;
            let env = std::env::var(SEED_ENV).ok();
            let cfg = RunConfig::resolve(text.as_deref(), env.as_deref(), &args.overrides())?;
            let out = commands::train(&cfg)?;
            if let Some(last) = out.records.iter().rev().find(|r| r.split == "val") {
                println!("epoch {} val accuracy {:.4}", last.epoch, last.accuracy);
            }
            println!("wrote {}", out.out_dir.display());
        }
        Command::Eval(a) => {
            let v = commands::eval(&a.checkpoint, a.dataset.as_deref(), a.split)?;
            write_json(&v, a.out.as_deref(), &a.checkpoint, "eval.json")?;
        }
        Command::CorruptEval { eval: a, seed } => {
            let v = commands::corrupt_eval(&a.checkpoint, a.dataset.as_deref(), a.split, seed)?;
            write_json(&v, a.out.as_deref(), &a.checkpoint, "corrupt_eval.json")?;
        }
        Command::OodEval { checkpoint, ood, id, split, out } => {
            let v = commands::ood_eval(&checkpoint, id.as_deref(), &ood, split)?;
            write_json(&v, out.as_deref(), &checkpoint, "ood_eval.json")?;
        }
        Command::Probe { checkpoint, class_a, class_b, pair_count, lambda_step, dataset, split, seed, out_dir } => {
            let out_dir = out_dir.unwrap_or_else(|| checkpoint.with_file_name("probe"));
            let out = commands::probe(&ProbeArgs {
                checkpoint: &checkpoint,
                dataset: dataset.as_deref(),
                part: split,
                class_a,
                class_b,
                pair_count,
                lambda_step,
                seed,
                out_dir: &out_dir,
            })?;
            print!("{}", out.curve.to_csv());
            println!("wrote {} and {}", out.gap_csv.display(), out.projection_csv.display());
        }
        Command::GenData { dataset, images, labels, split } => {
            let data = commands::gen_data(&dataset, split, &images, &labels)?;
            println!("wrote {} samples, {} classes", data.len(), data.classes());
        }
        Command::Gradcheck { seed } => {
            let g = commands::gradcheck(seed)?;
            println!("max relative error: {:e}", g.max_rel_error);
            println!("checked {} coordinates, skipped {} at relu kinks", g.checked, g.skipped_kinks);
            if !g.passed() {
                eprintln!("gradient check failed, worst parameter: {}", g.worst_param);
            }
            return Ok(g.exit_code() as u8);
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
