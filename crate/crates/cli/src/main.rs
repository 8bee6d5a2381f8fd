use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use coopgen::desk::{generate_desk_corpus, DESK_DOCUMENTS, DESK_SEED};
use coopgen::discriminators::ScorerId;
use coopgen::metrics::format_table;
use coopgen::pipeline::{PipelineConfig, SystemMode, Workspace};

#[derive(Parser)]
#[command(name = "coopgen", version, about = "Language-model decoding reranked by trained scorers")]
struct Cli {
    /// TOML config; built-in defaults are used when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set beam.beam_size=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Shorthand for `--set output_dir=DIR`.
    #[arg(short, long, global = true)]
    output_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the bundled templated review corpus.
    DeskCorpus {
        #[arg(long, default_value_t = DESK_DOCUMENTS)]
        documents: usize,
        #[arg(long, default_value_t = DESK_SEED)]
        seed: u64,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Split the corpus, build the vocabulary and write example files.
    Prepare,
    TrainLm,
    TrainScorers,
    /// Fit mixture weights for all scorers.
    LearnWeights,
    /// Decode the test set: `full`, `lm-baseline` or `ablation-<scorer>`.
    Generate {
        #[arg(long, default_value = "full")]
        mode: String,
    },
    /// Compare systems whose generations already exist.
    Evaluate {
        #[arg(long, value_delimiter = ',', default_value = "full,lm-baseline")]
        systems: Vec<String>,
    },
    /// One weight fit, decode and report row per single scorer.
    Ablate,
    /// Every stage from prepare to evaluate.
    Run,
    /// Print the resolved config as TOML.
    ShowConfig,
}

fn run(cli: Cli) -> coopgen::Result<()> {
    if let Command::DeskCorpus { documents, seed, out } = &cli.command {
        let text = generate_desk_corpus(*documents, *seed);
        match out {
            Some(p) => std::fs::write(p, text).map_err(coopgen::error::io_err(p))?,
            None => print!("{text}"),
        }
        return Ok(());
    }
    let mut overrides = cli.overrides.clone();
    if let Some(dir) = &cli.output_dir {
        overrides.push(format!("output_dir={:?}", dir.display().to_string()));
    }
    let config = PipelineConfig::load(cli.config.as_deref(), &overrides)?;
    let ws = Workspace::new(config)?;
    match cli.command {
        Command::DeskCorpus { .. } => unreachable!(),
        Command::ShowConfig => print!("{}", ws.config.to_toml()),
        Command::Prepare => {
            let s = ws.prepare()?;
            println!("{}", serde_json::to_string(&s)?);
        }
        Command::TrainLm => {
            let s = ws.train_lm()?;
            println!("{}", serde_json::to_string(&s)?);
        }
        Command::TrainScorers => {
            for r in ws.train_scorers()? {
                println!("{}", serde_json::to_string(&r)?);
            }
        }
        Command::LearnWeights => {
            let w = ws.learn_weights(&ScorerId::ALL, "full")?;
            print!("{}", w.to_text(&[]));
        }
        Command::Generate { mode } => {
            let mode: SystemMode = mode.parse()?;
            let records = ws.generate(mode)?;
            println!("{} generations ({mode})", records.len());
        }
        Command::Evaluate { systems } => {
            let systems = systems.iter().map(|s| s.parse()).collect::<coopgen::Result<Vec<SystemMode>>>()?;
            print!("{}", format_table(&ws.evaluate(&systems, "report")?));
        }
        Command::Ablate => print!("{}", format_table(&ws.ablate()?)),
        Command::Run => print!("{}", format_table(&ws.run_all()?)),
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
