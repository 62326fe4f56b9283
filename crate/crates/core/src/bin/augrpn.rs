use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use augrpn::commands::{
    cmd_anchor_stats, cmd_eval, cmd_render, cmd_train, cmd_verify, CommandError, CHECKPOINT,
};
use augrpn::config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "augrpn",
    version,
    about = "Anchor augmentation and proposal refinement"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides out_dir)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed (overrides seed)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Check dense/per-box equivalence and gradients
    Verify {
        #[command(flatten)]
        common: Common,
        /// Scramble the per-box weight layout; verification must then fail
        #[arg(long, hide = true)]
        corrupt_layout: bool,
    },
    /// Train on synthetic scenes, write metrics and a checkpoint
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the held-out synthetic split
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to <out>/checkpoint.bin
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Hand-designed anchor statistics over a COCO-style annotation file
    AnchorStats {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        annotations: PathBuf,
    },
    /// Draw anchors, augmented anchors and proposals for one scene as SVG
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig, CommandError> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CommandError> {
    match cli.command {
        Command::Verify {
            common,
            corrupt_layout,
        } => {
            let doc = cmd_verify(&load_config(&common)?, corrupt_layout)?;
            println!("{}", doc.to_json());
        }
        Command::Train { common } => {
            let out = cmd_train(&load_config(&common)?)?;
            println!("{}", out.doc.to_json());
            eprintln!("checkpoint written to {}", out.checkpoint.display());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT));
            println!("{}", cmd_eval(&cfg, &ckpt)?.to_json());
        }
        Command::AnchorStats {
            common,
            annotations,
        } => {
            println!(
                "{}",
                cmd_anchor_stats(&load_config(&common)?, &annotations)?.to_json()
            );
        }
        Command::Render { common, checkpoint } => {
            let path = cmd_render(&load_config(&common)?, checkpoint.as_deref())?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
