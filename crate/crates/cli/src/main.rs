//! `nonlocal`: runs the convergence experiments and writes CSV tables.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nonlocal_diffusion::assembly::Scheme;
use nonlocal_diffusion::experiment::{
    list_examples, run_with_progress, write_csv, DeltaRule, ExperimentConfig, GridFamily,
};
use nonlocal_diffusion::problems::find_case;

#[derive(Parser)]
#[command(name = "nonlocal", version, about = "Nonlocal diffusion convergence experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an example preset, a config file, or individual cases.
    Run(RunArgs),
    /// List examples, their presets and cases.
    List,
}

#[derive(Args)]
struct RunArgs {
    /// TOML config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Example id 1 to 6 (6 is the chi2 sweep over the example 2 cases).
    #[arg(long)]
    example: Option<u32>,
    /// Case name from `nonlocal list`; repeatable.
    #[arg(long = "case")]
    cases: Vec<String>,
    /// collocation or fd-quadrature.
    #[arg(long)]
    scheme: Option<Scheme>,
    /// Fixed horizon δ.
    #[arg(long, conflicts_with = "ratio")]
    delta: Option<f64>,
    /// Horizon as a multiple of the largest cell width.
    #[arg(long)]
    ratio: Option<f64>,
    /// Comma-separated chi-square thresholds.
    #[arg(long, value_delimiter = ',')]
    chi2: Option<Vec<f64>>,
    /// Grid levels: `40,80`, `40x20,50x25` or `10+15x20,20+30x40`.
    #[arg(long)]
    grids: Option<String>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Relative solver tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Directory for `x y value` solution dumps.
    #[arg(long)]
    dump: Option<PathBuf>,
    /// Write wall_ms as 0 for byte-stable output.
    #[arg(long)]
    no_timing: bool,
    /// Suppress per-row progress on stderr.
    #[arg(long, short)]
    quiet: bool,
}

fn build_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        ExperimentConfig::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?
    } else if let Some(id) = args.example {
        ExperimentConfig::for_example(id)?
    } else if let Some(first) = args.cases.first() {
        let case = find_case(first)?;
        let mut c = ExperimentConfig::for_example(case.example)?;
        c.example = None;
        c
    } else {
        bail!("give --config, --example or --case");
    };
    if args.config.is_some() {
        if let Some(id) = args.example {
            cfg.example = Some(id);
        }
    }
    if !args.cases.is_empty() {
        cfg.cases = args.cases.clone();
    }
    if let Some(s) = args.scheme {
        cfg.scheme = s;
    }
    if let Some(d) = args.delta {
        cfg.delta = DeltaRule::Fixed(d);
    }
    if let Some(r) = args.ratio {
        cfg.delta = DeltaRule::Ratio(r);
    }
    if let Some(c) = &args.chi2 {
        cfg.chi2 = c.clone();
    }
    if let Some(g) = &args.grids {
        cfg.grids = GridFamily::parse(g)?;
    }
    if let Some(o) = &args.out {
        cfg.out = Some(o.clone());
    }
    if let Some(t) = args.tol {
        cfg.tol = t;
    }
    if let Some(d) = &args.dump {
        cfg.dump = Some(d.clone());
    }
    if args.no_timing {
        cfg.timing = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("NONLOCAL_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .with_context(|| format!("NONLOCAL_THREADS must be a positive integer, got '{v}'"))?;
        if n == 0 {
            bail!("NONLOCAL_THREADS must be a positive integer, got '{v}'");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(args: &RunArgs) -> Result<bool> {
    let cfg = build_config(args)?;
    let quiet = args.quiet;
    let outcome = run_with_progress(&cfg, |row| {
        if !quiet {
            let err = row.error_linf.map(|e| format!("{e:.4e}")).unwrap_or_else(|| "-".into());
            let rate = row.rate.map(|r| format!("{r:.2}")).unwrap_or_else(|| "-".into());
            eprintln!(
                "{:<8} chi2={:<4} {:<14} err={:<11} rate={:<6} iters={:<5} {:.0} ms{}",
                row.case,
                row.chi2,
                row.grid_desc,
                err,
                rate,
                row.solve_iters,
                row.wall_ms,
                if row.converged { "" } else { "  NOT CONVERGED" }
            );
        }
    })?;
    if cfg.out.is_none() {
        let stdout = std::io::stdout();
        let mut lock = stdout.lock();
        write_csv(&outcome.rows, &mut lock)?;
        lock.flush()?;
    }
    Ok(outcome.all_converged)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|_| match &cli.command {
        Command::List => {
            print!("{}", list_examples());
            Ok(true)
        }
        Command::Run(args) => run(args),
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: at least one solve did not converge");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
