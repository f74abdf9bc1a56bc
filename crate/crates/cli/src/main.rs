//! `drtl`: runs experiment stages from a JSON config or a preset.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use drtl_core::config::{self, ExperimentConfig, GammaSource, Stage, OUT_ENV};
use drtl_core::pipeline::{load_config, Pipeline, StageStatus};
use drtl_core::DrtlError;

#[derive(Parser)]
#[command(name = "drtl", version, about = "Few-shot restoration guided by distortion relations")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON, `//` comments allowed).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Use a built-in preset instead of a config file.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Overrides the global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Task weights for guided regimes: `relation`, `ones`, or a file.
    #[arg(long)]
    gamma: Option<GammaSource>,
    /// Output root; run directories are created beneath it.
    #[arg(long, env = OUT_ENV)]
    out: Option<PathBuf>,
    /// Rerun stages even when their inputs are unchanged.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize the auxiliary datasets and the pseudo-target.
    Synth(Common),
    /// Train the distortion relation network.
    TrainDrn(Common),
    /// Compute task weights and the embedding export.
    Relation(Common),
    /// Pre-train and meta-train on the auxiliary tasks.
    Train(Common),
    /// Fine-tune on the few-shot target split, including the baseline.
    Finetune(Common),
    /// Score fine-tuned models on the target test set.
    Eval(Common),
    /// Write report.md and report.json.
    Report(Common),
    /// Run every stage listed in the config.
    Run(Common),
    /// Print a preset config.
    Preset {
        /// One of table2-desk, fig6-sweep, table4-ablation, smoke.
        name: String,
        /// Write to this file instead of stdout.
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
}

fn resolve(c: &Common) -> Result<ExperimentConfig, DrtlError> {
    let mut cfg = load_config(c.config.as_deref(), c.preset.as_deref())?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(g) = &c.gamma {
        cfg.gamma = g.clone();
    }
    if let Some(o) = &c.out {
        cfg.out_root = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_stages(c: &Common, stages: Option<&[Stage]>) -> Result<(), DrtlError> {
    let cfg = resolve(c)?;
    let stages = stages.map(<[Stage]>::to_vec).unwrap_or_else(|| cfg.stages.clone());
    let mut p = Pipeline::new(cfg)?
        .force(c.force)
        .on_progress(|m| eprintln!("[drtl] {m}"));
    let done = p.run_stages(&stages)?;
    let ran = done.iter().filter(|(_, s)| *s == StageStatus::Ran).count();
    eprintln!(
        "[drtl] {} stage(s) run, {} skipped; outputs in {}",
        ran,
        done.len() - ran,
        p.layout().root.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Synth(c) => run_stages(c, Some(&[Stage::Synth])),
        Cmd::TrainDrn(c) => run_stages(c, Some(&[Stage::TrainDrn])),
        Cmd::Relation(c) => run_stages(c, Some(&[Stage::Relation])),
        Cmd::Train(c) => run_stages(c, Some(&[Stage::Pretrain, Stage::Metatrain])),
        Cmd::Finetune(c) => run_stages(c, Some(&[Stage::Finetune, Stage::Baseline])),
        Cmd::Eval(c) => run_stages(c, Some(&[Stage::Eval])),
        Cmd::Report(c) => run_stages(c, Some(&[Stage::Report])),
        Cmd::Run(c) => run_stages(c, None),
        Cmd::Preset { name, output } => config::preset(name).and_then(|cfg| match output {
            Some(p) => std::fs::write(p, cfg.to_json()).map_err(|e| DrtlError::Io {
                path: p.clone(),
                source: e,
            }),
            None => {
                print!("{}", cfg.to_json());
                Ok(())
            }
        }),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                DrtlError::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
