use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stiffswitch::experiment::{
    ensure_references, run_demo1d, run_eval, run_sweep, run_training, RunConfig, RunError,
};
use stiffswitch::kinetics::Condition;
use stiffswitch::policy::Checkpoint;
use stiffswitch::ppo::final_checkpoint_path;

#[derive(Debug, Parser)]
#[command(name = "stiffswitch", version, about = "Learned BDF / alpha-QSS solver selection for stiff chemistry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate (or verify) reference trajectories for the pool and the evaluation grid.
    Reference(Common),
    /// Train a policy with constrained PPO.
    Train(Common),
    /// Evaluate a checkpoint on one condition.
    Eval(EvalArgs),
    /// Evaluate a checkpoint over the evaluation grid.
    Sweep(Common),
    /// Run the 1D hot-spot reaction-diffusion case with a 0D checkpoint.
    Demo1d(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (TOML). Built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `train.workers`; also used for reference generation.
    #[arg(long)]
    workers: Option<usize>,
    /// Checkpoint to evaluate. Defaults to the final checkpoint in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Overrides `paths.output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Initial temperature. Defaults to the first evaluation-grid point.
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    pressure: Option<f64>,
    #[arg(long)]
    fuel: Option<f64>,
}

fn load_config(c: &Common) -> Result<RunConfig, RunError> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
    }
    if let Some(w) = c.workers {
        cfg.train.workers = w;
    }
    if let Some(out) = &c.out {
        cfg.paths.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_checkpoint(c: &Common, cfg: &RunConfig) -> Result<Checkpoint, RunError> {
    let path = c.checkpoint.clone().unwrap_or_else(|| final_checkpoint_path(&cfg.paths.output_dir));
    if !path.exists() {
        return Err(RunError::Config(format!(
            "checkpoint {} not found; pass --checkpoint or run `train` first",
            path.display()
        )));
    }
    Ok(Checkpoint::load(&path)?)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), RunError> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn cmd_reference(c: &Common) -> Result<(), RunError> {
    let cfg = load_config(c)?;
    let report = ensure_references(&cfg, c.workers.unwrap_or(1))?;
    println!(
        "references in {}: {} generated, {} reused, {} failed",
        cfg.paths.reference_dir.display(),
        report.generated,
        report.reused,
        report.failed.len()
    );
    for (cond, msg) in &report.failed {
        eprintln!("  T={} p={} fuel={}: {msg}", cond.temperature, cond.pressure, cond.fuel);
    }
    report.check()
}

fn cmd_train(c: &Common) -> Result<(), RunError> {
    let cfg = load_config(c)?;
    let out = &cfg.paths.output_dir;
    let outcome = run_training(&cfg, Some(out))?;
    if let Some(last) = outcome.log.last() {
        println!(
            "trained {} steps: lambda {:.4}, qss fraction {:.3}, mean cost {:.3}",
            last.env_steps, last.lambda_next, last.qss_fraction, last.mean_cost_norm
        );
    }
    println!("checkpoint {}", final_checkpoint_path(out).display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<(), RunError> {
    let cfg = load_config(&a.common)?;
    let ck = load_checkpoint(&a.common, &cfg)?;
    let first = cfg.eval.conditions()[0];
    let condition = Condition {
        temperature: a.temperature.unwrap_or(first.temperature),
        pressure: a.pressure.unwrap_or(first.pressure),
        fuel: a.fuel.unwrap_or(first.fuel),
    };
    let out = cfg.paths.output_dir.join("eval");
    cfg.write_resolved(&out)?;
    let mut report = run_eval(&cfg, condition, &ck, Some(&out))?;
    report.choices.clear();
    print_json(&report)
}

fn cmd_sweep(c: &Common) -> Result<(), RunError> {
    let cfg = load_config(c)?;
    let ck = load_checkpoint(c, &cfg)?;
    let out = cfg.paths.output_dir.join("sweep");
    cfg.write_resolved(&out)?;
    let outcome = run_sweep(&cfg, &ck, Some(&out))?;
    print_json(&outcome.summary)
}

fn cmd_demo1d(c: &Common) -> Result<(), RunError> {
    let cfg = load_config(c)?;
    let ck = load_checkpoint(c, &cfg)?;
    let out = cfg.paths.output_dir.join("demo1d");
    cfg.write_resolved(&out)?;
    let report = run_demo1d(&cfg, &ck, Some(&out))?;
    print_json(&report)
}

fn run(cli: &Cli) -> Result<(), RunError> {
    match &cli.command {
        Command::Reference(c) => cmd_reference(c),
        Command::Train(c) => cmd_train(c),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(c) => cmd_sweep(c),
        Command::Demo1d(c) => cmd_demo1d(c),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
