mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use psrnn::Error;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "psrnn", version, about = "PS-RNN intra prediction: data preparation, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Crop, rescale and degrade the images of a manifest into a sample archive.
    Prepare(Common),
    /// Train a per-size network, or a unified model when plus_target is set.
    Train(Common),
    /// RDO-lite comparison of the network against the baseline modes.
    Eval(Common),
    /// Write context, network, baseline and ground-truth PGMs for sample blocks.
    Demo(Common),
    /// Train SATD- and MSE-loss models on several seeds and compare them.
    CompareLosses(Common),
    /// Train one model per PS-RNN unit count.
    AblateUnits(Common),
}

#[derive(Args)]
struct Common {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use the ground-truth block as the candidate prediction.
    #[arg(long)]
    oracle: bool,
    /// Extra key=value settings applied after the config file.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn resolve(&self) -> psrnn::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => RunConfig::default(),
        };
        cfg.apply_text(&self.overrides.join("\n"))?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        cfg.finish()?;
        Ok(cfg)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (common, run): (&Common, fn(&RunConfig, bool) -> psrnn::Result<()>) = match &cli.command {
        Command::Prepare(c) => (c, commands::prepare),
        Command::Train(c) => (c, commands::train),
        Command::Eval(c) => (c, commands::eval),
        Command::Demo(c) => (c, commands::demo),
        Command::CompareLosses(c) => (c, commands::compare_losses),
        Command::AblateUnits(c) => (c, commands::ablate_units),
    };
    match common.resolve().and_then(|cfg| run(&cfg, common.oracle)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
