//! `attnflow`: run scenarios, invariant suites and Wendel's formula from the shell.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 configuration or argument
//! error, 3 integration failure, 4 a verification check failed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attnflow::diagnostics::{wendel_monte_carlo, wendel_probability};
use attnflow::scenarios::{
    builtin, builtin_scenarios, run_scenario, write_outputs, RunSummary, ScenarioConfig,
};
use attnflow::verify::{run_suite, Suite};
use attnflow::Error;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_INTEGRATION: u8 = 3;
const EXIT_CHECK_FAILED: u8 = 4;

#[derive(Parser)]
#[command(name = "attnflow", version, about = "Consensus dynamics of attention flows on ellipsoids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one scenario and write states.csv, observers.csv and summary.json.
    Simulate(SimulateArgs),
    /// Run randomized invariant suites; exits 0 iff every check passes.
    Verify(VerifyArgs),
    /// Probability that ℓ uniform random points on the unit sphere of ℝⁿ share a hemisphere.
    Wendel(WendelArgs),
    /// Run one scenario over consecutive seeds in parallel.
    Sweep(SweepArgs),
    /// List the built-in scenarios, or print one as TOML.
    Builtins {
        /// Print this builtin's configuration.
        name: Option<String>,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Source {
    /// TOML scenario file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Name of a built-in scenario (see `attnflow builtins`).
    #[arg(long)]
    builtin: Option<String>,
}

#[derive(Args)]
struct Overrides {
    /// Final integration time; overrides the config.
    #[arg(long, allow_negative_numbers = true)]
    t_final: Option<f64>,
    /// Step size; overrides the config.
    #[arg(long, allow_negative_numbers = true)]
    dt: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    source: Source,
    /// Seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; results go to `<out>/<name>/<seed>/`.
    #[arg(long, env = "ATTNFLOW_OUT", default_value = "runs")]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    /// Print the summary as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// gradient, hemisphere, causal, symmetric-u or all.
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print the full report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct WendelArgs {
    #[arg(long)]
    ell: usize,
    #[arg(long)]
    n: usize,
    /// Also estimate the probability from this many random draws.
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    source: Source,
    /// Number of seeds to run.
    #[arg(long)]
    seeds: usize,
    /// First seed; the sweep covers `seed .. seed + seeds`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "ATTNFLOW_OUT", default_value = "runs")]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long)]
    json: bool,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Contract(_) | Error::Domain(_) => EXIT_CONFIG,
        Error::Integration { .. } | Error::Numeric(_) => EXIT_INTEGRATION,
        Error::Io(_) | Error::Json(_) => EXIT_FAILURE,
    }
}

fn load(source: &Source, overrides: &Overrides) -> Result<ScenarioConfig, Error> {
    let mut cfg = match (&source.config, &source.builtin) {
        (Some(path), _) => ScenarioConfig::from_file(path)?,
        (None, Some(name)) => builtin(name).ok_or_else(|| {
            let known: Vec<String> = builtin_scenarios().into_iter().map(|c| c.name).collect();
            Error::Config(format!("unknown builtin {name:?}; known: {}", known.join(", ")))
        })?,
        (None, None) => unreachable!("clap requires one source"),
    };
    if let Some(t) = overrides.t_final {
        cfg.t_final = t;
    }
    if let Some(dt) = overrides.dt {
        cfg.dt = dt;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn simulate(args: SimulateArgs) -> Result<(), Error> {
    let mut cfg = load(&args.source, &args.overrides)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let run = run_scenario(&cfg)?;
    for w in &run.summary.warnings {
        log::warn!("{w}");
    }
    let dir = write_outputs(&run, &args.out)?;
    if args.json {
        let out = json!({ "output_dir": dir, "summary": run.summary });
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        let s = &run.summary;
        println!("{} seed {} -> {}", cfg.name, cfg.seed, dir.display());
        println!(
            "  steps {}  E {:.3e}  spread {:.3e}  drift {:.1e}",
            s.steps, s.final_e, s.final_spread, s.max_manifold_drift
        );
        match s.converged_at {
            Some(t) => println!("  converged at t = {t:.3}"),
            None => println!("  not converged by t = {}", cfg.t_final),
        }
        if let Some(dev) = s.coordinate_change_deviation {
            println!("  coordinate-change deviation {dev:.2e}");
        }
    }
    Ok(())
}

fn verify(args: VerifyArgs) -> Result<bool, Error> {
    let suite: Suite = args.suite.parse()?;
    let report = run_suite(suite, args.trials, args.seed)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(report.passed);
    }
    // Worst value per (suite, check), plus failure count.
    let mut worst: BTreeMap<(&str, &str), (f64, &str, f64, usize, usize)> = BTreeMap::new();
    for c in &report.checks {
        let e = worst
            .entry((c.suite, c.name))
            .or_insert((c.value, c.relation, c.bound, 0, 0));
        let lower_bounded = c.relation == ">";
        if (lower_bounded && c.value < e.0) || (!lower_bounded && c.value > e.0) {
            e.0 = c.value;
        }
        e.3 += 1;
        e.4 += usize::from(!c.passed);
    }
    for ((suite, name), (value, relation, bound, count, failed)) in &worst {
        let status = if *failed == 0 { "PASS" } else { "FAIL" };
        println!(
            "{status} {suite}/{name}: worst {value:.3e} (need {relation} {bound:.1e}), {failed}/{count} failed"
        );
    }
    println!(
        "{} checks over {} trials, seed {}: {}",
        report.checks.len(),
        report.trials,
        report.seed,
        if report.passed { "all passed" } else { "FAILURES" }
    );
    Ok(report.passed)
}

fn wendel(args: WendelArgs) -> Result<(), Error> {
    let p = wendel_probability(args.ell, args.n)?;
    let mc = match args.mc_samples {
        Some(k) => {
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            let est = wendel_monte_carlo(&mut rng, args.ell, args.n, k)?;
            let sd = (p * (1.0 - p) / k as f64).sqrt();
            Some((k, est, sd))
        }
        None => None,
    };
    if args.json {
        let mut out = json!({ "ell": args.ell, "n": args.n, "probability": p });
        if let Some((k, est, sd)) = mc {
            out["monte_carlo"] = json!({ "samples": k, "seed": args.seed, "estimate": est, "sd": sd });
        }
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else {
        println!("{p}");
        if let Some((k, est, sd)) = mc {
            println!("monte carlo ({k} samples): {est} (sd {sd:.3e}, {:.2} sd from formula)", deviation(est, p, sd));
        }
    }
    Ok(())
}

fn deviation(est: f64, p: f64, sd: f64) -> f64 {
    if sd > 0.0 {
        (est - p).abs() / sd
    } else if est == p {
        0.0
    } else {
        f64::INFINITY
    }
}

fn sweep(args: SweepArgs) -> Result<(), Error> {
    if args.seeds == 0 {
        return Err(Error::Config("seeds must be >= 1".into()));
    }
    let base = load(&args.source, &args.overrides)?;
    let results: Vec<(u64, Result<(PathBuf, RunSummary), Error>)> = (0..args.seeds as u64)
        .into_par_iter()
        .map(|k| {
            let mut cfg = base.clone();
            cfg.seed = args.seed.wrapping_add(k);
            let out = run_one(&cfg, &args.out);
            (cfg.seed, out)
        })
        .collect();

    let mut first_error = None;
    let mut rows = Vec::new();
    for (seed, r) in results {
        match r {
            Ok((dir, s)) => {
                if args.json {
                    rows.push(json!({ "seed": seed, "output_dir": dir, "summary": s }));
                } else {
                    println!(
                        "seed {seed}: E {:.3e} spread {:.3e} converged {} -> {}",
                        s.final_e,
                        s.final_spread,
                        s.converged,
                        dir.display()
                    );
                }
            }
            Err(e) => {
                eprintln!("seed {seed}: {e}");
                if args.json {
                    rows.push(json!({ "seed": seed, "error": e.to_string() }));
                }
                first_error.get_or_insert(e);
            }
        }
    }
    if args.json {
        println!("{}", serde_json::to_string_pretty(&rows)?);
    }
    first_error.map_or(Ok(()), Err)
}

fn run_one(cfg: &ScenarioConfig, out: &Path) -> Result<(PathBuf, RunSummary), Error> {
    let run = run_scenario(cfg)?;
    let dir = write_outputs(&run, out)?;
    Ok((dir, run.summary))
}

fn builtins(name: Option<String>) -> Result<(), Error> {
    match name {
        None => {
            for cfg in builtin_scenarios() {
                println!("{}", cfg.name);
            }
            Ok(())
        }
        Some(name) => {
            let cfg = builtin(&name).ok_or_else(|| Error::Config(format!("unknown builtin {name:?}")))?;
            print!("{}", cfg.to_toml_string()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(a) => simulate(a).map(|()| true),
        Command::Verify(a) => verify(a),
        Command::Wendel(a) => wendel(a).map(|()| true),
        Command::Sweep(a) => sweep(a).map(|()| true),
        Command::Builtins { name } => builtins(name).map(|()| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_CHECK_FAILED),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
