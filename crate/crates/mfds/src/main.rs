use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mfds::config::RunConfig;
use mfds::error::{io, Result};
use mfds::{coco, dataset, labelme, runner};
use mfds_core::data::Schema;

#[derive(Parser)]
#[command(name = "mfds", version, about = "Blood-cell detection with a multi-scale deformable transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; checkpoints go to <output>/checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override a configuration key, e.g. `--set model.enc.layers=3`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Evaluate a checkpoint on the test split; writes <output>/reports/eval.json.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Draw predictions on every image in a directory; writes <output>/overlays.
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// COCO annotations whose boxes are drawn in black.
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Write the synthetic disc dataset and a matching config.toml.
    MakeSynth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value = "synth")]
        out: PathBuf,
    },
    /// Convert a directory of LabelMe files to one COCO file.
    ConvertLabelme {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// wbcdd, lisc or bccd.
        #[arg(long)]
        schema: String,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume, set } => {
            let config = RunConfig::load(&config, &set)?;
            let s = runner::train(&config, resume.as_deref())?;
            if let Some(last) = s.epochs.last() {
                println!("epoch {}: loss {:.4}", last.epoch, last.loss);
            }
            println!("checkpoint: {}", s.checkpoint.display());
        }
        Command::Eval { config, ckpt, set } => {
            let config = RunConfig::load(&config, &set)?;
            let r = runner::evaluate(&config, &ckpt)?;
            println!("{}", serde_json::to_string_pretty(&r).expect("plain struct"));
        }
        Command::Infer {
            config,
            ckpt,
            images,
            threshold,
            annotations,
            set,
        } => {
            let config = RunConfig::load(&config, &set)?;
            let s = runner::infer(&config, &ckpt, &images, threshold, annotations.as_deref())?;
            let boxes: usize = s.images.iter().map(|i| i.detections.len()).sum();
            println!("{} images, {boxes} boxes, {} errors -> {}", s.images.len(), s.errors.len(), runner::overlays_dir(&config).display());
        }
        Command::MakeSynth { seed, n, classes, out } => {
            dataset::write_synthetic(&out, seed, n, classes)?;
            println!("{n} images -> {}", out.display());
        }
        Command::ConvertLabelme { input, out, schema } => {
            let schema = Schema::by_name(&schema)?;
            let (file, rejects) = labelme::convert_labelme(&input, &schema)?;
            coco::write_coco(&out, &file)?;
            let report = out.with_extension("rejects.json");
            std::fs::write(&report, serde_json::to_string_pretty(&rejects).expect("plain struct")).map_err(io(&report))?;
            println!("{} images, {} boxes, {} rejected (see {})", file.images.len(), file.annotations.len(), rejects.len(), report.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
