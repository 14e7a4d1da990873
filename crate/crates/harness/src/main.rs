use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use inavit::model::{ClipInput, InAViT};
use inavit::synthdata::{generate_dataset, Split, SynthConfig};
use inavit_harness::ablate::{preset_rows, run_ablation, write_csv, Preset};
use inavit_harness::checkpoint::Checkpoint;
use inavit_harness::config::{config_hash, RunConfig};
use inavit_harness::dataset::Dataset;
use inavit_harness::error::{io_err, json_err, HarnessError, Result};
use inavit_harness::export::export_attention;
use inavit_harness::gradcheck::gradcheck_suite;
use inavit_harness::train::{evaluate, train};

#[derive(Parser)]
#[command(name = "inavit", version, about = "Interaction-region video transformer: data, training and verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set model.objects=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let cfg = RunConfig::load(self.config.as_deref(), &self.sets)?;
        cfg.seed()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into `dataset`, starting at episode seed `seed`.
    GenData(Common),
    /// Train on `dataset`; writes log.jsonl, checkpoint.bin and metrics.json under `output`.
    Train(Common),
    /// Evaluate a checkpoint; its config must match the run config.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<output>/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "eval")]
        split: String,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// `full` or one block name.
        #[arg(long, default_value = "full")]
        scope: String,
        /// Scale the backward pass of matrix products by this factor (negative control).
        #[arg(long, hide = true)]
        inject_fault: Option<f64>,
    },
    /// Train every row of an ablation preset on each seed and write the CSV table.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "default")]
        preset: Preset,
        /// Comma-separated training seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Defaults to `<output>/ablation.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export attention weights of one episode as JSON.
    ExportAttn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Episode seed in the dataset.
        #[arg(long)]
        episode: u64,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value).map_err(json_err("stdout"))?;
    writeln!(out).map_err(io_err("stdout"))
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "eval" => Ok(Split::Eval),
        _ => Err(HarnessError::Config(format!("unknown split `{s}` (train, eval)"))),
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData(common) => {
            let cfg = common.load()?;
            let seed = cfg.seed()?;
            let data_cfg = SynthConfig { seed, ..cfg.data.clone() };
            let (episodes, manifest) = generate_dataset(&data_cfg, cfg.episodes, seed)?;
            let data = Dataset::from_episodes(episodes, manifest);
            data.write(&cfg.dataset)?;
            print_json(&serde_json::json!({
                "dataset": cfg.dataset,
                "episodes": data.episodes.len(),
                "train": data.split(Split::Train).count(),
                "eval": data.split(Split::Eval).count(),
                "skipped_seeds": data.manifest.skipped_seeds,
                "class_counts": data.manifest.class_counts,
                "hash": data.hash,
            }))?;
        }
        Command::Train(common) => {
            let cfg = common.load()?;
            let out = train(&cfg)?;
            print_json(&serde_json::json!({
                "output": cfg.output,
                "steps": cfg.steps,
                "final_loss": out.losses.last(),
                "wall_clock_s": out.wall_clock_s,
                "eval": out.eval,
            }))?;
        }
        Command::Eval { common, checkpoint, split } => {
            let cfg = common.load()?;
            let path = checkpoint.unwrap_or_else(|| cfg.output.join("checkpoint.bin"));
            let ck = Checkpoint::load(&path)?;
            let data = Dataset::load(&cfg.dataset)?;
            let report = evaluate(&ck, &data, parse_split(&split)?, Some(&config_hash(&cfg.model)))?;
            print_json(&report)?;
        }
        Command::Gradcheck { common, scope, inject_fault } => {
            let cfg = common.load()?;
            let report = gradcheck_suite(&scope, cfg.seed()?, inject_fault)?;
            print_json(&report)?;
            return Ok(report.passed);
        }
        Command::Ablate { common, preset, seeds, out } => {
            let cfg = common.load()?;
            let data = Dataset::load(&cfg.dataset)?;
            cfg.check_dataset(&data.manifest)?;
            let rows = preset_rows(preset, &cfg.model);
            let source = |m: &inavit::model::InAViTConfig| {
                Ok((data.examples(m, Split::Train)?, data.examples(m, Split::Eval)?))
            };
            let results = run_ablation(&cfg, &rows, &seeds, &source, &data.hash)?;
            let path = out.unwrap_or_else(|| cfg.output.join("ablation.csv"));
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(io_err(dir))?;
            }
            let file = std::fs::File::create(&path).map_err(io_err(&path))?;
            write_csv(&results, file)?;
            write_csv(&results, std::io::stdout().lock())?;
        }
        Command::ExportAttn { common, checkpoint, episode, out } => {
            let cfg = common.load()?;
            let path = checkpoint.unwrap_or_else(|| cfg.output.join("checkpoint.bin"));
            let ck = Checkpoint::load(&path)?;
            let data = Dataset::load(&cfg.dataset)?;
            let e = data
                .episode(episode)
                .ok_or_else(|| HarnessError::Dataset(format!("no episode with seed {episode}")))?;
            let model = InAViT::new(ck.config.clone())?;
            let input = ClipInput::prepare(&e.clip, &e.detections, &ck.config)?;
            let export = export_attention(&model, &ck.params, &input)?;
            match out {
                Some(p) => {
                    let bytes = serde_json::to_vec(&export).expect("serializes");
                    std::fs::write(&p, bytes).map_err(io_err(&p))?;
                }
                None => print_json(&export)?,
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
