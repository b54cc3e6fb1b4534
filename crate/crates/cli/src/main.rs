use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use lasfusion::exec::{self, Mode};
use lasfusion::harness::{self, RunConfig};

#[derive(Parser)]
#[command(name = "lasfusion", about = "Toy-scale camera-lidar BEV fusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate evaluation scenes with images, depth maps and boxes.
    GenScene(Common),
    /// Train one model and write its checkpoint and loss curve.
    Train(Common),
    /// Depth-supervision sweep over lambda, lidar, pretrained and uniform rows.
    DepthSweep(Common),
    /// Evaluate a checkpoint on the evaluation scenes.
    Eval(Common),
    /// Scatter attention (or depth) weights onto the BEV grid.
    AttnViz(Common),
    /// Camera-input saliency of one box's class logit.
    Saliency(Common),
    /// Test-time augmentation and checkpoint ensembling with box fusion.
    Ensemble(Common),
    /// Fusion-mode and decoder-depth ablation.
    Ablate(Common),
    /// List configuration keys.
    Keys,
}

#[derive(Args)]
struct Common {
    /// Flat key = value configuration file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a configuration key (repeatable).
    #[arg(short, long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run on the calling thread only.
    #[arg(long)]
    sequential: bool,
}

fn load(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    for kv in &c.set {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn execute(name: &str, c: &Common) -> Result<()> {
    if c.sequential {
        exec::set_mode(Mode::Sequential);
    }
    let cfg = load(c)?;
    let out = harness::run(name, &cfg)?;
    for (k, v) in &out.summary {
        println!("{k} = {v}");
    }
    println!("wrote {}", out.root.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, common) = match &cli.command {
        Command::GenScene(c) => ("gen-scene", c),
        Command::Train(c) => ("train", c),
        Command::DepthSweep(c) => ("depth-sweep", c),
        Command::Eval(c) => ("eval", c),
        Command::AttnViz(c) => ("attn-viz", c),
        Command::Saliency(c) => ("saliency", c),
        Command::Ensemble(c) => ("ensemble", c),
        Command::Ablate(c) => ("ablate", c),
        Command::Keys => {
            for (k, doc) in harness::KEYS {
                println!("{k:<24} {doc}");
            }
            return ExitCode::SUCCESS;
        }
    };
    match execute(name, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
