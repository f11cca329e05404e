use std::io::Read;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use modnet::lang::Direction;
use modnet::runner::{self, ExperimentConfig, Overrides, RunManifest};
use modnet::{Error, Result};

#[derive(Parser)]
#[command(name = "modnet", version, about = "Modular multilingual translation experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `run.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Root seed; overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Omit wall-clock figures so metrics are byte-identical across reruns.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Transformer preset: base, large, desk, or tiny.
    #[arg(long, global = true)]
    preset: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic multi-parallel corpora.
    MakeSynthetic,
    /// Divide the corpus between language pairs.
    SplitData,
    /// Build the vocabularies for the configured model kind.
    BuildVocab,
    /// Train the configured model.
    Train,
    /// Translate lines from a file or stdin.
    Translate {
        #[arg(long)]
        direction: Direction,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score the trained directions.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score every ordered pair, trained or not.
    ZeroShot {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Add a language to a trained M2 model.
    Increment,
    /// Run the encoder-similarity and mono-direction probes.
    Probe {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare finished runs in one table.
    Report {
        /// Run directories; defaults to the configured output directory.
        #[arg(long, num_args = 1..)]
        runs: Vec<PathBuf>,
        /// Group rows by data tier.
        #[arg(long)]
        tiers: bool,
    },
    /// Run every stage end to end.
    Run,
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let path = c.config.as_ref().ok_or_else(|| Error::config("--config is required"))?;
    let o = Overrides { seed: c.seed, out: c.out.clone(), deterministic: c.deterministic, preset: c.preset.clone() };
    ExperimentConfig::from_file(path, &o)
}

fn summary(m: &RunManifest) {
    println!("{} [{}] {} -> {}", m.name, m.kind, m.status, m.digest);
    if !m.matrix.is_empty() {
        print!("{}", m.translation_matrix().to_table());
        if let Some(avg) = m.average_bleu() {
            println!("average BLEU {avg:.2}");
        }
    }
}

fn read_input(path: Option<&PathBuf>) -> Result<Vec<String>> {
    Ok(match path {
        Some(p) => std::fs::read_to_string(p)?.lines().map(str::to_string).collect(),
        None => {
            let mut s = String::new();
            std::io::stdin().lock().read_to_string(&mut s)?;
            s.lines().map(str::to_string).collect()
        }
    })
}

fn report(dirs: &[PathBuf], tiers: bool) -> Result<()> {
    let manifests: Vec<RunManifest> = dirs.iter().map(|d| RunManifest::load(d)).collect::<Result<_>>()?;
    print!("{}", if tiers { runner::tier_report(&manifests) } else { runner::report(&manifests) });
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    if let Command::Report { runs, tiers } = &cli.command {
        if !runs.is_empty() {
            return report(runs, *tiers);
        }
    }
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::MakeSynthetic => summary(&runner::make_synthetic(&cfg)?),
        Command::SplitData => summary(&runner::split_data(&cfg)?),
        Command::BuildVocab => summary(&runner::make_vocab(&cfg)?),
        Command::Train => summary(&runner::train(&cfg)?),
        Command::Translate { direction, input, checkpoint } => {
            let lines = read_input(input.as_ref())?;
            for h in runner::translate_lines(&cfg, checkpoint.as_deref(), &direction, &lines)? {
                println!("{h}");
            }
        }
        Command::Evaluate { checkpoint } => summary(&runner::evaluate_run(&cfg, checkpoint.as_deref(), false)?.0),
        Command::ZeroShot { checkpoint } => summary(&runner::evaluate_run(&cfg, checkpoint.as_deref(), true)?.0),
        Command::Increment => {
            let o = runner::increment(&cfg)?;
            summary(&o.manifest);
            println!("frozen parameters unchanged: {}", o.frozen_identical);
            if let Some(p) = &o.pivot {
                println!("pivot baseline");
                print!("{}", p.to_table());
            }
        }
        Command::Probe { checkpoint } => {
            let m = runner::probe_run(&cfg, checkpoint.as_deref())?;
            if let Some(p) = &m.probe {
                println!("cosine parallel {:.4} control {:.4}", p.similarity.average, p.similarity.control_average);
                for (l, b) in &p.mono {
                    println!("mono {l}-{l} BLEU {b:.2}");
                }
            }
        }
        Command::Report { tiers, .. } => report(std::slice::from_ref(&cfg.out), tiers)?,
        Command::Run => summary(&runner::run(&cfg)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
