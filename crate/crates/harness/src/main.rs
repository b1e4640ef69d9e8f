use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hybridfit::{ExperimentConfig, HarnessError, RunArtifacts};

#[derive(Parser)]
#[command(name = "hybridfit", version, about = "Closed-form lower tier, continually trained head")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the lower tier in closed form and report its accuracy.
    FitDirect(RunArgs),
    /// Run the full continual-learning pipeline.
    Continual(RunArgs),
    /// Write the cost report and fixed-point emulation only.
    Emulate(RunArgs),
    /// Write the configured task stream as CSV files.
    GenData(RunArgs),
    /// Check a config file and print the resolved document.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory. Defaults to `runs/<timestamp>-seed<seed>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of seed variants (`seed`, `seed+1`, ...) run concurrently,
    /// each in its own subdirectory.
    #[arg(long, default_value_t = 1)]
    replicas: u64,
    #[arg(long)]
    quiet: bool,
}

type RunFn = fn(&ExperimentConfig, &Path, bool) -> hybridfit::Result<RunArtifacts>;

fn load(path: Option<&Path>) -> hybridfit::Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn execute(args: RunArgs, run: RunFn) -> hybridfit::Result<()> {
    let mut cfg = load(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    if args.replicas == 0 {
        return Err(HarnessError::config("replicas", "must be >= 1"));
    }
    let out = args.out.unwrap_or_else(|| {
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        PathBuf::from("runs").join(format!("{stamp}-seed{}", cfg.seed))
    });
    if args.replicas == 1 {
        let a = run(&cfg, &out, args.quiet)?;
        if !args.quiet {
            println!("{}", a.run_dir.display());
        }
        return Ok(());
    }
    let results: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..args.replicas)
            .map(|r| {
                let mut c = cfg.clone();
                c.seed = cfg.seed.wrapping_add(r);
                let dir = out.join(format!("replica-{r}-seed{}", c.seed));
                s.spawn(move || run(&c, &dir, true))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("replica thread panicked")).collect()
    });
    let mut first_err = None;
    for r in results {
        match r {
            Ok(a) if !args.quiet => println!("{}", a.run_dir.display()),
            Ok(_) => {}
            Err(e) => {
                eprintln!("error: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    first_err.map_or(Ok(()), Err)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::FitDirect(a) => execute(a, hybridfit::fit_direct),
        Command::Continual(a) => execute(a, hybridfit::run_experiment),
        Command::Emulate(a) => execute(a, hybridfit::emulate),
        Command::GenData(a) => execute(a, hybridfit::gen_data),
        Command::Validate { config } => ExperimentConfig::load(&config).map(|c| print!("{}", c.to_json())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
