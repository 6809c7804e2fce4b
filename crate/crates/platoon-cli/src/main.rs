//! Command-line runner: execute scenarios with CSV output, or drive the
//! randomized invariant suites. Exit codes are CI-friendly: 0 on success,
//! 1 on configuration errors, 2 on collisions or invariant violations.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use platoon_core::fuzz::{run_suite, FuzzConfig, Suite};
use platoon_core::scenario::Scenario;
use platoon_core::sim;

#[derive(Parser)]
#[command(
    name = "platoon",
    about = "Safety-verified vehicle platooning simulator",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file and write steps.csv, summary.csv, and
    /// channel_trace.csv.
    Run(RunArgs),
    /// Run a randomized invariant suite, or replay a saved reproducer.
    Fuzz(FuzzArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory for the CSV files.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the channel drop probability.
    #[arg(long)]
    drop: Option<f64>,
    /// Override the channel delay: a single step count or "min:max".
    #[arg(long)]
    delay: Option<String>,
    /// Override the scenario duration [s].
    #[arg(long)]
    duration: Option<f64>,
    /// Print the per-metric summary to stdout.
    #[arg(long)]
    report: bool,
}

#[derive(Args)]
struct FuzzArgs {
    /// Suite name: monotonicity, verify-soundness, consensus-invariance, or
    /// failsafe-minimality.
    #[arg(long)]
    suite: Option<String>,
    /// Cases to run (total protocol steps for consensus-invariance).
    #[arg(long, default_value_t = 100)]
    iters: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Channel drop probability for consensus-invariance.
    #[arg(long)]
    drop: Option<f64>,
    /// Maximum channel delay in steps for consensus-invariance.
    #[arg(long)]
    delay: Option<u64>,
    /// Adversarial rollouts per safe verdict for verify-soundness.
    #[arg(long)]
    rollouts: Option<u64>,
    /// Directory for reproducer files of failing cases.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Replay a reproducer file written by a previous failing run.
    #[arg(long)]
    replay: Option<PathBuf>,
}

fn main() -> ExitCode {
    match Cli::parse().cmd {
        Cmd::Run(args) => cmd_run(args),
        Cmd::Fuzz(args) => cmd_fuzz(args),
    }
}

fn cmd_run(args: RunArgs) -> ExitCode {
    let mut scenario = match Scenario::from_path(&args.scenario) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {}: {e}", args.scenario.display());
            return ExitCode::from(1);
        }
    };
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    if let Some(drop) = args.drop {
        scenario.channel.drop_prob = drop;
    }
    if let Some(delay) = &args.delay {
        match parse_delay(delay) {
            Ok((lo, hi)) => {
                scenario.channel.delay_min = lo;
                scenario.channel.delay_max = hi;
            }
            Err(e) => {
                eprintln!("error: --delay: {e}");
                return ExitCode::from(1);
            }
        }
    }
    if let Some(duration) = args.duration {
        scenario.duration = duration;
    }
    if let Err(e) = scenario.channel.validate() {
        eprintln!("error: channel overrides: {e}");
        return ExitCode::from(1);
    }

    let output = match sim::run(&scenario) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: simulation failed: {e}");
            return ExitCode::from(1);
        }
    };
    if let Err(e) = output.write_all(&args.out) {
        eprintln!("error: writing CSV output: {e}");
        return ExitCode::from(1);
    }

    let s = &output.summary;
    println!(
        "{}: {} steps, {} collision(s)",
        scenario.name, s.steps_run, s.collisions
    );
    if let Some(step) = s.first_collision_step {
        let pair = s
            .collision_pair
            .as_ref()
            .map(|(a, b)| format!("{a} into {b}"))
            .unwrap_or_default();
        println!("collision at step {step}: {pair}");
    }
    if let Some(t) = s.convergence_time {
        println!("consensus converged at t = {} s", sim::fmt_sig(t));
    }
    if let Some(((f, l), g)) = s
        .min_gaps
        .iter()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, v)| (k.clone(), *v))
    {
        println!("smallest gap: {} m ({f} behind {l})", sim::fmt_sig(g));
    }
    println!(
        "planning: p99 {} ms, max {} ms",
        sim::fmt_sig(s.planning_p99_ms),
        sim::fmt_sig(s.planning_max_ms)
    );
    if args.report {
        print!("{}", output.summary_csv());
    }

    if s.collisions > 0 {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    }
}

fn cmd_fuzz(args: FuzzArgs) -> ExitCode {
    let mut cfg = if let Some(replay) = &args.replay {
        match read_reproducer(replay) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {}: {e}", replay.display());
                return ExitCode::from(1);
            }
        }
    } else {
        let Some(name) = &args.suite else {
            eprintln!("error: either --suite or --replay is required");
            return ExitCode::from(1);
        };
        let Some(suite) = Suite::from_name(name) else {
            eprintln!(
                "error: unknown suite `{name}`; expected one of: {}",
                Suite::all().map(|s| s.name()).join(", ")
            );
            return ExitCode::from(1);
        };
        let mut cfg = FuzzConfig::new(suite, args.iters, args.seed);
        if let Some(d) = args.drop {
            cfg.drop_prob = d;
        }
        if let Some(d) = args.delay {
            cfg.delay_max = d;
        }
        if let Some(r) = args.rollouts {
            cfg.rollouts = r;
        }
        cfg
    };

    if let Ok(threads) = std::env::var("PLATOON_SAFE_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n >= 1 => cfg.threads = n,
            _ => {
                eprintln!("error: PLATOON_SAFE_THREADS must be a positive integer");
                return ExitCode::from(1);
            }
        }
    }
    // harness self-test hook: deliberately break the checked bound
    if std::env::var("PLATOON_BREAK_BOUND")
        .map(|v| v == "1")
        .unwrap_or(false)
    {
        cfg.break_bound = true;
    }

    let report = run_suite(&cfg);
    println!(
        "suite {}: {} case(s), {} violation(s)",
        report.suite.name(),
        report.cases,
        report.violations.len()
    );
    if report.passed() {
        return ExitCode::SUCCESS;
    }
    for v in report.violations.iter().take(5) {
        println!("violation (case seed {}): {}", v.case_seed, v.detail);
    }
    let first = &report.violations[0];
    let path = args.out.join(format!(
        "reproducer-{}-{}.toml",
        report.suite.name(),
        first.case_seed
    ));
    match write_reproducer(&path, &cfg, first.case_seed) {
        Ok(()) => println!(
            "reproducer written to {} (rerun with `platoon fuzz --replay <file>`)",
            path.display()
        ),
        Err(e) => eprintln!("warning: could not write reproducer: {e}"),
    }
    ExitCode::from(2)
}

fn parse_delay(text: &str) -> Result<(u64, u64), String> {
    if let Some((lo, hi)) = text.split_once(':') {
        let lo = lo.parse::<u64>().map_err(|e| e.to_string())?;
        let hi = hi.parse::<u64>().map_err(|e| e.to_string())?;
        if lo > hi {
            return Err(format!("interval out of order: {lo}:{hi}"));
        }
        Ok((lo, hi))
    } else {
        let n = text.parse::<u64>().map_err(|e| e.to_string())?;
        Ok((n, n))
    }
}

fn write_reproducer(path: &Path, cfg: &FuzzConfig, case_seed: u64) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let text = format!(
        "# platoon fuzz reproducer: replays the failing case in isolation\n\
         suite = \"{}\"\n\
         seed = {case_seed}\n\
         iterations = 1\n\
         drop = {}\n\
         delay_max = {}\n\
         rollouts = {}\n",
        cfg.suite.name(),
        cfg.drop_prob,
        cfg.delay_max,
        cfg.rollouts,
    );
    std::fs::write(path, text)
}

fn read_reproducer(path: &Path) -> Result<FuzzConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let mut suite = None;
    let mut seed = None;
    let mut iterations = 1u64;
    let mut drop_prob = 0.3;
    let mut delay_max = 10u64;
    let mut rollouts = 200u64;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!("malformed line: {line}"));
        };
        let key = key.trim();
        let value = value.trim();
        match key {
            "suite" => {
                let name = value.trim_matches('"');
                suite =
                    Some(Suite::from_name(name).ok_or_else(|| format!("unknown suite `{name}`"))?);
            }
            "seed" => seed = Some(value.parse().map_err(|e| format!("seed: {e}"))?),
            "iterations" => iterations = value.parse().map_err(|e| format!("iterations: {e}"))?,
            "drop" => drop_prob = value.parse().map_err(|e| format!("drop: {e}"))?,
            "delay_max" => delay_max = value.parse().map_err(|e| format!("delay_max: {e}"))?,
            "rollouts" => rollouts = value.parse().map_err(|e| format!("rollouts: {e}"))?,
            other => return Err(format!("unknown key `{other}`")),
        }
    }
    let suite = suite.ok_or("missing `suite`")?;
    let seed = seed.ok_or("missing `seed`")?;
    let mut cfg = FuzzConfig::new(suite, iterations, seed);
    cfg.drop_prob = drop_prob;
    cfg.delay_max = delay_max;
    cfg.rollouts = rollouts;
    Ok(cfg)
}
