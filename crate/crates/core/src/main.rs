use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use polarbev::harness::{ablate, bench, eval_multires, train_and_eval, Checkpoint, ExperimentConfig};
use polarbev::synthscene::{gen_scene, render_views};
use polarbev::Result;

#[derive(Parser)]
#[command(name = "polarbev", version, about = "Polar BEV detection: training, multi-resolution evaluation, ablation and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint at several BEV resolutions.
    EvalMultires {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        res: Vec<usize>,
        /// Train and evaluate the Cartesian-interpolation baseline instead.
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train the three module configurations on identical data.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Time single-frame inference at several BEV resolutions.
    Bench {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        res: Vec<usize>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Write the rendered camera views of one scene as PPM files.
    Render {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn write_outputs(dir: Option<&Path>, files: &[(&str, String)]) -> Result<()> {
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
        for (name, body) in files {
            std::fs::write(dir.join(name), body)?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (ck, report) = train_and_eval(&cfg, &[cfg.train_resolution])?;
            ck.save(&out)?;
            Ok(json!({ "checkpoint": out, "loss_curve": report.loss_curve, "metrics": report.metrics }))
        }
        Command::EvalMultires { ckpt, res, baseline, out_dir } => {
            let report = eval_multires(&Checkpoint::load(&ckpt)?, &res, baseline)?;
            write_outputs(out_dir.as_deref(), &[("report.json", report.to_json()), ("metrics.csv", report.csv())])?;
            Ok(serde_json::to_value(&report)?)
        }
        Command::Ablate { config, out_dir } => {
            let report = ablate(&ExperimentConfig::load(&config)?, &[])?;
            let mut files = vec![("ablation.json", serde_json::to_string_pretty(&report)?), ("ablation.csv", report.csv())];
            if let Some(w) = report.warning() {
                eprintln!("{w}");
                files.push(("ablation_warning.json", serde_json::to_string_pretty(&w)?));
            }
            write_outputs(out_dir.as_deref(), &files)?;
            Ok(serde_json::to_value(&report)?)
        }
        Command::Bench { ckpt, res, out_dir } => {
            let report = bench(&Checkpoint::load(&ckpt)?, &res)?;
            write_outputs(out_dir.as_deref(), &[("bench.json", serde_json::to_string_pretty(&report)?), ("bench.csv", report.csv())])?;
            Ok(serde_json::to_value(&report)?)
        }
        Command::Render { config, index, out_dir } => {
            let cfg = ExperimentConfig::load(&config)?;
            let scene = gen_scene(&cfg.scene_spec(), index)?;
            std::fs::create_dir_all(&out_dir)?;
            let mut files = Vec::new();
            for (i, img) in render_views(&scene, &cfg.rig()).iter().enumerate() {
                let path = out_dir.join(format!("scene{index}_cam{i}.ppm"));
                img.write_ppm(&path)?;
                files.push(path);
            }
            Ok(json!({ "scene": scene, "views": files }))
        }
    }
}

fn fail(kind: &str, message: String) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string()),
    };
    match run(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json"));
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), e.to_string()),
    }
}
