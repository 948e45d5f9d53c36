use std::path::PathBuf;
use std::process::ExitCode;

use brainseg_cli::commands::{self, Context, InferInput, Split};
use brainseg_cli::{CliError, RunConfig};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "brainseg", version, about = "Cascaded, adversarially defended phantom segmentation")]
struct Cli {
    /// key=value configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the configuration
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `out_dir` from the configuration
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated attack strengths for attack-eval
    #[arg(long, global = true, value_delimiter = ',')]
    epsilon: Vec<f64>,
    /// Worker threads; results do not depend on this
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Print the cascade label tables and exit
    #[arg(long)]
    dump_plans: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom dataset
    GenData,
    /// Train one model per fold
    Train,
    /// Evaluate trained folds and append to metrics.csv
    Eval {
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
        /// Score ground truth against itself (pipeline check)
        #[arg(long)]
        oracle: bool,
    },
    /// Clean and FGSM-attacked evaluation
    AttackEval,
    /// Segment one sample
    Infer {
        /// Sample index in the configured dataset
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Read the first sample of this file instead
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long)]
        oracle: bool,
    },
    /// Train and compare the ablation configurations
    Ablate,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.dump_plans {
        print!("{}", commands::dump_plans());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(CliError::Usage("no command given (try --help)".into()));
    };
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    let ctx = Context::new(cfg, cli.workers)?;
    match command {
        Command::GenData => commands::gen_data(&ctx),
        Command::Train => commands::train(&ctx),
        Command::Eval { split, oracle } => commands::eval(&ctx, split, oracle),
        Command::AttackEval => commands::attack_eval(&ctx, &cli.epsilon),
        Command::Infer {
            index,
            input,
            fold,
            oracle,
        } => commands::infer(
            &ctx,
            &InferInput {
                index,
                input,
                fold,
                oracle,
            },
        ),
        Command::Ablate => commands::ablate(&ctx),
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
