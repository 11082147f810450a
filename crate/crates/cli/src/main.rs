use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dyadmo::dyadgen::ChainMode;
use dyadmo_cli::{cmd_eval, cmd_generate, cmd_synth, cmd_train, CliError, Layout, RunConfig, Stage};

#[derive(Parser, Debug)]
#[command(name = "dyadmo", version, about = "Dyadic speaker/listener motion generation")]
struct Cli {
    /// Run configuration (JSON). Unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root for the default corpus/models/generated/eval layout.
    #[arg(long, global = true, env = "DYAD_DATA_DIR", default_value = ".")]
    data_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic coupled corpus.
    Synth {
        #[arg(long)]
        seed: Option<u64>,
        /// Corpus directory (default <data-dir>/corpus).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one stage: vqvae, vqvae:<role.part>, face, generator or fgd.
    Train {
        stage: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mode: Option<ChainMode>,
        /// Training corpus (default <data-dir>/corpus).
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Checkpoint root (default <data-dir>/models).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a dyad for every clip (or the single clip) under --input.
    Generate {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mode: Option<ChainMode>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write per-part PNG line charts and CSV tracks.
        #[arg(long)]
        emit_plots: bool,
    },
    /// Score generated clips against references.
    Eval {
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    let layout = Layout::new(&cli.data_dir, &cfg.paths);
    match cli.command {
        Command::Synth { seed, out } => {
            let out = out.unwrap_or_else(|| layout.corpus());
            let done = cmd_synth(&cfg, seed, &out)?;
            println!(
                "{} clips -> {} (sha256 {})",
                done.clips,
                done.dir.display(),
                done.digest
            );
        }
        Command::Train {
            stage,
            seed,
            mode,
            corpus,
            out,
        } => {
            let stage: Stage = stage.parse()?;
            let seed = cfg.require_seed(seed, "train")?;
            let corpus = corpus.unwrap_or_else(|| layout.corpus());
            let models = out.unwrap_or_else(|| layout.models());
            for dir in cmd_train(&cfg, stage, seed, mode, &corpus, &models)? {
                println!("{}", dir.display());
            }
        }
        Command::Generate {
            seed,
            mode,
            input,
            models,
            out,
            emit_plots,
        } => {
            let seed = cfg.require_seed(seed, "generate")?;
            let input = input.unwrap_or_else(|| layout.corpus());
            let models = models.unwrap_or_else(|| layout.models());
            let out = out.unwrap_or_else(|| layout.generated());
            for m in cmd_generate(&cfg, seed, mode, &input, &models, &out, emit_plots)? {
                println!("{}", m.display());
            }
        }
        Command::Eval {
            pred,
            reference,
            models,
            out,
        } => {
            let pred = pred.unwrap_or_else(|| layout.generated());
            let reference = reference.unwrap_or_else(|| layout.corpus());
            let models = models.unwrap_or_else(|| layout.models());
            let out = out.unwrap_or_else(|| layout.eval());
            let report = cmd_eval(&cfg, &pred, &reference, &models, &out)?;
            for (name, v) in report.values() {
                println!("{name:<20} {v:.6}");
            }
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
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
