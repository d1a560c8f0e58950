use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fewgen::commands::{self, Options};
use fewgen_core::tuning::Objective;

#[derive(Parser)]
#[command(name = "fewgen", version, about = "Meta-weighted prefix tuning, data synthesis and noise-robust classifier training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run only this seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Generator objective: w-gen, gen or gen+disc.
    #[arg(long, global = true, value_parser = parse_objective)]
    objective: Option<Objective>,
    /// Output directory, also where single-stage commands look for earlier artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Relative-error tolerance for gradcheck.
    #[arg(long, global = true)]
    tol: Option<f64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Draw the few-shot, dev and test splits.
    SynthTask,
    /// Pretrain the backbone on the unlabeled corpus.
    Pretrain,
    /// Tune the label prefixes.
    TuneGen,
    /// Sample a labeled dataset from the tuned prefixes.
    Generate,
    /// Train the classifier in two stages.
    TrainClf,
    /// Evaluate the trained classifier on the test split.
    Eval,
    /// Run the full pipeline for every seed and write report.json.
    Run,
    /// Finite-difference checks of every gradient.
    Gradcheck,
}

fn parse_objective(s: &str) -> Result<Objective, String> {
    s.parse().map_err(|e: fewgen_core::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let opts = Options { config: cli.config, seed: cli.seed, objective: cli.objective, out: cli.out, tol: cli.tol };
    let result = match cli.command {
        Command::SynthTask => commands::synth_task(&opts),
        Command::Pretrain => commands::pretrain(&opts),
        Command::TuneGen => commands::tune_gen(&opts),
        Command::Generate => commands::generate(&opts),
        Command::TrainClf => commands::train_clf(&opts),
        Command::Eval => commands::eval(&opts),
        Command::Run => commands::run(&opts),
        Command::Gradcheck => commands::gradcheck(&opts),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
