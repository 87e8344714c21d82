use std::path::PathBuf;
use std::process::ExitCode;

use botimpact::config::{ConfigError, PipelineConfig};
use botimpact::pipeline::{self, PipelineError, StageReport};
use botimpact::synth::SynthSpec;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "botimpact", version, about = "Measure how far bot groups shift follower opinions")]
struct Cli {
    /// TOML config file; relative paths in it resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads, 0 for one per core.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the follower network, daily retweet networks and posting rates.
    Build,
    /// Infer daily bot probabilities and the union bot set.
    DetectBots,
    /// Label accounts and summarize groups.
    Classify,
    /// Daily influence series for each bot group.
    Ghic,
    /// Run build, detect-bots, classify, ghic and report in order.
    All,
    /// Generate a synthetic corpus from a spec file.
    Synth {
        spec: PathBuf,
    },
    /// Text report from whatever stage outputs exist.
    Report,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.paths.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn print_report(r: &StageReport) {
    println!("{}: {} files written", r.stage, r.files.len());
    for (k, v) in &r.counts {
        println!("  {k:<28} {v}");
    }
    for n in &r.notes {
        eprintln!("warning: {n}");
    }
}

fn run(cli: &Cli) -> Result<Vec<StageReport>, PipelineError> {
    let cfg = load_config(cli)?;
    pipeline::init_workers(cfg.workers);
    let one = |r: StageReport| vec![r];
    Ok(match &cli.command {
        Command::Build => one(pipeline::run_build(&cfg)?),
        Command::DetectBots => one(pipeline::run_detect_bots(&cfg)?),
        Command::Classify => one(pipeline::run_classify(&cfg)?),
        Command::Ghic => one(pipeline::run_ghic(&cfg)?),
        Command::Report => one(pipeline::run_report(&cfg)?),
        Command::All => pipeline::run_all(&cfg)?,
        Command::Synth { spec } => {
            let text = std::fs::read_to_string(spec).map_err(|e| {
                PipelineError::Config(ConfigError::Read {
                    path: spec.display().to_string(),
                    reason: e.to_string(),
                })
            })?;
            let mut spec = SynthSpec::from_toml(&text)?;
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            one(pipeline::run_synth(&spec, &cfg.paths.output_dir)?)
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(reports) => {
            reports.iter().for_each(print_report);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
