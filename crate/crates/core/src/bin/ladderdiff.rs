use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ladderdiff::cli::commands::{
    cmd_bench, cmd_effnfe, cmd_eval, cmd_gen_shapes, cmd_sample, cmd_train, Reference, SampleSource,
};
use ladderdiff::cli::config::RunConfig;
use ladderdiff::{Error, Result};

#[derive(Parser)]
#[command(name = "ladderdiff", version, about = "Weight-shared cascaded diffusion on a resolution ladder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `seed` from the config file.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train and write DIR/checkpoint.ldif and DIR/train.jsonl.
    Train {
        #[command(flatten)]
        common: Common,
        /// Defaults to `out_dir` from the config file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides `steps` from the config file.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        allow_config_mismatch: bool,
    },
    /// Sample a batch and write DIR/samples.ldtn and DIR/sample.jsonl.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Use the closed-form mixture denoisers instead of a network.
        #[arg(long)]
        oracle: bool,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        /// Defaults to `out_dir` from the config file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        allow_config_mismatch: bool,
    },
    /// Fréchet distance between a sample file and a reference file or the
    /// configured mixture.
    Eval {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long, required_unless_present = "config", conflicts_with = "config")]
        reference: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Time single-stage against cascaded sampling.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[arg(long)]
        allow_config_mismatch: bool,
    },
    /// Effective NFE from a bench JSONL file.
    Effnfe {
        #[arg(long)]
        bench: PathBuf,
        /// Per-stage NFEs, stage 1 (full resolution) first.
        #[arg(long, value_delimiter = ',')]
        nfe: Option<Vec<usize>>,
    },
    /// Render the synthetic shapes dataset at the top ladder resolution.
    GenShapes {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2048)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn out_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| Error::Config("no --out given and no out_dir in the config".into()))
}

fn run(cli: Cli) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    let out = &mut stdout;
    match cli.command {
        Command::Train {
            common,
            out: dir,
            checkpoint,
            steps,
            allow_config_mismatch,
        } => {
            let mut cfg = common.load()?;
            if let Some(s) = steps {
                cfg.train_steps = s;
            }
            let dir = out_dir(dir, &cfg)?;
            cmd_train(&cfg, &dir, checkpoint.as_deref(), allow_config_mismatch, out)?;
        }
        Command::Sample {
            common,
            checkpoint,
            oracle,
            count,
            batch,
            out: dir,
            allow_config_mismatch,
        } => {
            let cfg = common.load()?;
            let dir = out_dir(dir, &cfg)?;
            let source = match (&checkpoint, oracle) {
                (_, true) => SampleSource::Oracle,
                (Some(p), false) => SampleSource::Checkpoint(p),
                (None, false) => unreachable!("clap requires --checkpoint or --oracle"),
            };
            cmd_sample(&cfg, source, count, batch, &dir, allow_config_mismatch, out)?;
        }
        Command::Eval {
            samples,
            reference,
            config,
        } => match (reference, config) {
            (Some(r), _) => {
                cmd_eval(&samples, Reference::File(&r), out)?;
            }
            (None, Some(c)) => {
                let cfg = RunConfig::load(&c)?;
                cmd_eval(&samples, Reference::Mixture(&cfg), out)?;
            }
            (None, None) => unreachable!("clap requires --reference or --config"),
        },
        Command::Bench {
            common,
            checkpoint,
            batch,
            warmup,
            reps,
            allow_config_mismatch,
        } => {
            let cfg = common.load()?;
            cmd_bench(&cfg, checkpoint.as_deref(), batch, warmup, reps, allow_config_mismatch, out)?;
        }
        Command::Effnfe { bench, nfe } => {
            cmd_effnfe(&bench, nfe.as_deref(), out)?;
        }
        Command::GenShapes { common, count, out: path } => {
            let cfg = common.load()?;
            cmd_gen_shapes(&cfg, count, &path, out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ladderdiff: {e}");
            ExitCode::FAILURE
        }
    }
}
