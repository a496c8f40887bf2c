use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use leqg_po::experiments::{emit, exit_code, run_campaign, ExperimentConfig, Mode};
use leqg_po::game_oracle::{solve_gare_value_iteration, ORACLE_MAX_ITER, ORACLE_TOL};
use leqg_po::plant::PlantModel;
use leqg_po::{Error, Result};

#[derive(Parser)]
#[command(name = "leqg", version, about = "Risk-sensitive LQG / zero-sum game experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Undisturbed dual loop.
    Solve(RunArgs),
    /// Dual loop with random iteration errors.
    Robust(RunArgs),
    /// Off-policy learning from sampled data.
    Learn(RunArgs),
    /// Identification plus LMI initial gain.
    Sysid(RunArgs),
    /// Riccati value iteration only.
    Oracle(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config (or, for `oracle`, a bare plant).
    #[arg(long, conflicts_with = "builtin")]
    config: Option<PathBuf>,
    /// illustrative, cartpole, or a full built-in name such as cartpole-disturbed.
    #[arg(long)]
    builtin: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Keep inner iterates and write inner.csv.
    #[arg(long)]
    verbose_inner: bool,
    /// Concurrent trials (default: one per core).
    #[arg(long)]
    jobs: Option<usize>,
}

fn load(args: &RunArgs, mode: Mode) -> Result<ExperimentConfig> {
    let mut cfg = match (&args.config, &args.builtin) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => ExperimentConfig::builtin(name, Some(mode))?,
        (None, None) => return Err(Error::Config("pass --config <file> or --builtin <name>".into())),
    };
    if cfg.mode != mode {
        return Err(Error::Config(format!(
            "config mode '{}' does not match subcommand mode '{}'",
            cfg.mode.as_str(),
            mode.as_str()
        )));
    }
    if let Some(seed) = args.seed {
        cfg.master_seed = seed;
    }
    if let Some(trials) = args.trials {
        cfg.trials = trials;
    }
    if args.out.is_some() {
        cfg.output = args.out.clone();
    }
    cfg.verbose_inner |= args.verbose_inner;
    cfg.validate()?;
    Ok(cfg)
}

fn campaign(args: &RunArgs, mode: Mode) -> Result<()> {
    let cfg = load(args, mode)?;
    let result = run_campaign(&cfg, args.jobs)?;
    let dir = cfg
        .output
        .clone()
        .unwrap_or_else(|| PathBuf::from("results").join(if cfg.name.is_empty() { mode.as_str() } else { &cfg.name }));
    let files = emit(&result, &dir)?;
    println!(
        "{}: {} trials ({} failed), final mean rel_err_K {}, admissible steps {:.1}%",
        mode.as_str(),
        result.trials.len(),
        result.failed(),
        result.mean_final_rel_err_k().map_or("n/a".into(), |v| format!("{v:.3e}")),
        100.0 * result.admissible_fraction()
    );
    if let Some(r) = &result.rates {
        println!("alpha_hat = {:.3e}", r.alpha_hat);
    }
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn oracle(args: &RunArgs) -> Result<()> {
    let model: PlantModel = match (&args.config, &args.builtin) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
            match ExperimentConfig::from_json(&text) {
                Ok(cfg) => cfg.model,
                Err(_) => serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?,
            }
        }
        (None, Some(name)) => ExperimentConfig::builtin(name, Some(Mode::Exact))?.model,
        (None, None) => return Err(Error::Config("pass --config <file> or --builtin <name>".into())),
    };
    let sol = solve_gare_value_iteration(&model, ORACLE_TOL, ORACLE_MAX_ITER)?;
    let text = serde_json::to_string_pretty(&sol).expect("solution serializes");
    match &args.out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
            let path = dir.join("summary.json");
            std::fs::write(&path, text + "\n").map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
            println!("{} iterations, residual {:.3e}; wrote {}", sol.iterations, sol.residual, path.display());
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Solve(a) => campaign(a, Mode::Exact),
        Command::Robust(a) => campaign(a, Mode::Disturbed),
        Command::Learn(a) => campaign(a, Mode::Learn),
        Command::Sysid(a) => campaign(a, Mode::Sysid),
        Command::Oracle(a) => oracle(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
