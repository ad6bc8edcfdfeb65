//! Command-line front end.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde::Serialize;

use super::config::{RunConfig, OUTPUT_ENV};
use super::invariants::{invariant_suite, InvariantRow};
use super::report;
use super::studies::{Harness, OptimalityReport, ResidualReport, Verdict};
use crate::error::{Error, Result};
use crate::merton::{solve_merton_with, MertonMethod};
use crate::simulate::{simulate_paths, summarize, write_path_csv};
use crate::utility::logspace;

#[derive(Debug, Parser)]
#[command(name = "multiscale", version, about = "Multiscale portfolio asymptotics and Monte Carlo verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Config file, or the name of an embedded config (default, reference, constant).
    #[arg(long, short, global = true, default_value = "default")]
    config: PathBuf,
    /// Output directory; overrides the environment and the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Treat UNRESOLVED verdicts as failures.
    #[arg(long, global = true)]
    strict: bool,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Tabulate the Merton value and strategy at λ̄(z0).
    SolveMerton {
        /// Sharpe ratio; defaults to λ̄(z0).
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
    },
    /// Expansion terms at the initial state for every grid point.
    Expand,
    /// Monte Carlo values of every roster strategy at every grid point.
    Simulate,
    /// Residual-order study.
    ResidualStudy,
    /// Asymptotic-optimality study.
    OptimalityStudy,
    /// Invariant suite.
    Invariants,
    /// Everything above.
    All,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum MethodArg {
    ClosedFormPower,
    DualQuadrature,
    FiniteDifference,
}

impl From<MethodArg> for MertonMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::ClosedFormPower => Self::ClosedFormPower,
            MethodArg::DualQuadrature => Self::DualQuadrature,
            MethodArg::FiniteDifference => Self::FiniteDifference,
        }
    }
}

#[derive(Serialize)]
struct Summary {
    scenario: String,
    residual: Option<Verdict>,
    optimality: Option<Verdict>,
    invariants: Option<Verdict>,
    overall: Verdict,
}

/// Parses `argv`, runs the subcommand and returns the process exit code:
/// 0 on success, 1 on a FAIL verdict or runtime error, 2 on a bad
/// invocation or config.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();

    let cfg = match RunConfig::load(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let out = cli
        .out
        .clone()
        .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| cfg.output_dir.clone());

    let run = || dispatch(&cli, &cfg, &out);
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(run),
            Err(e) => {
                eprintln!("error: thread pool: {e}");
                return 1;
            }
        },
        None => run(),
    };
    match result {
        Ok(Verdict::Pass) => 0,
        Ok(Verdict::Unresolved) => {
            eprintln!("warning: some results are UNRESOLVED; more paths are needed");
            i32::from(cli.strict)
        }
        Ok(Verdict::Fail) => 1,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: &Cli, cfg: &RunConfig, out: &std::path::Path) -> Result<Verdict> {
    match &cli.command {
        Command::SolveMerton { lambda, method } => {
            solve_merton_cmd(cfg, out, *lambda, method.map(Into::into))?;
            Ok(Verdict::Pass)
        }
        Command::Expand => {
            expand_cmd(cfg, out)?;
            Ok(Verdict::Pass)
        }
        Command::Simulate => {
            simulate_cmd(cfg, out)?;
            Ok(Verdict::Pass)
        }
        Command::ResidualStudy => {
            let mut h = Harness::new(cfg)?;
            Ok(emit_residual(&h.residual_study()?, out)?)
        }
        Command::OptimalityStudy => {
            let mut h = Harness::new(cfg)?;
            Ok(emit_optimality(&h.optimality_study()?, out)?)
        }
        Command::Invariants => emit_invariants(&invariant_suite(cfg), out),
        Command::All => {
            solve_merton_cmd(cfg, out, None, None)?;
            expand_cmd(cfg, out)?;
            simulate_cmd(cfg, out)?;
            let inv = emit_invariants(&invariant_suite(cfg), out)?;
            let mut h = Harness::new(cfg)?;
            let res = emit_residual(&h.residual_study()?, out)?;
            let opt = emit_optimality(&h.optimality_study()?, out)?;
            let overall = res.and(opt).and(inv);
            let summary = Summary {
                scenario: cfg.name.clone(),
                residual: Some(res),
                optimality: Some(opt),
                invariants: Some(inv),
                overall,
            };
            report::write(out, "summary.json", &report::to_json(&summary)?)?;
            println!("overall: {}", overall.as_str());
            Ok(overall)
        }
    }
}

fn emit_residual(r: &ResidualReport, out: &std::path::Path) -> Result<Verdict> {
    report::write(out, "residual.csv", &report::residual_csv(r))?;
    report::write(out, "residual.json", &report::to_json(r)?)?;
    for row in &r.rows {
        println!(
            "ε = {:<6} δ = {:<6} Ê = {:+.6e} ± {:.2e}{}",
            row.epsilon,
            row.delta,
            row.residual,
            row.se,
            if row.resolved { "" } else { "  (unresolved)" }
        );
    }
    match r.fit {
        Some(f) => println!("residual slope {:.4} ± {:.4}: {}", f.slope, f.slope_se, r.verdict.as_str()),
        None => println!("residual slope unavailable: {}", r.verdict.as_str()),
    }
    Ok(r.verdict)
}

fn emit_optimality(r: &OptimalityReport, out: &std::path::Path) -> Result<Verdict> {
    report::write(out, "optimality.csv", &report::optimality_csv(r))?;
    report::write(out, "optimality.json", &report::to_json(r)?)?;
    for c in &r.challengers {
        println!(
            "challenger {:<16} bounded={} trend={}: {}",
            c.challenger,
            c.bounded,
            c.trend_ok,
            c.verdict.as_str()
        );
    }
    Ok(r.verdict)
}

fn emit_invariants(rows: &[InvariantRow], out: &std::path::Path) -> Result<Verdict> {
    report::write(out, "invariants.csv", &report::invariants_csv(rows))?;
    report::write(out, "invariants.json", &report::to_json(&rows)?)?;
    for r in rows {
        println!("{:<36} {:>12.4e} ≤ {:<10.2e} {}", r.name, r.measured, r.tolerance, r.verdict.as_str());
    }
    Ok(rows.iter().fold(Verdict::Pass, |a, r| a.and(r.verdict)))
}

fn solve_merton_cmd(
    cfg: &RunConfig,
    out: &std::path::Path,
    lambda: Option<f64>,
    method: Option<MertonMethod>,
) -> Result<()> {
    let s = &cfg.simulation;
    let lam = match lambda {
        Some(l) => l,
        None => cfg.bundle()?.averages().lambda_bar(s.z0),
    };
    let (e, d) = cfg.grid.points()[0];
    let sigma = cfg.model(e, d)?.sigma(s.y0, s.z0);
    let method = method.unwrap_or(cfg.solver.method);
    let sol = solve_merton_with(&cfg.utility_spec()?, lam, s.horizon, method, &cfg.solver.settings)?;
    let mut rows = Vec::new();
    for t in [0.0, 0.5 * s.horizon] {
        for x in logspace(0.1, 10.0, 25) {
            let p = sol.eval(t, x);
            rows.push(vec![
                t.to_string(),
                x.to_string(),
                p.value.to_string(),
                p.m_x.to_string(),
                p.m_xx.to_string(),
                p.risk_tolerance.to_string(),
                (lam / sigma * p.risk_tolerance).to_string(),
            ]);
        }
    }
    let csv = report::table_csv("t,x,value,m_x,m_xx,risk_tolerance,pi_star", &rows);
    report::write(out, "merton.csv", &csv)?;
    println!("Merton solution at λ = {lam} ({method:?}): {} rows", rows.len());
    Ok(())
}

fn expand_cmd(cfg: &RunConfig, out: &std::path::Path) -> Result<()> {
    let s = &cfg.simulation;
    let bundle = cfg.bundle()?;
    let mut rows = Vec::new();
    for (e, d) in cfg.grid.points() {
        let b = bundle.with_scales(e, d)?;
        let p = b.expand(0.0, s.x0, s.z0);
        let a = p.averages;
        rows.push(
            [
                e,
                d,
                a.lambda_bar,
                a.lambda_hat,
                a.lambda_bar_prime,
                a.b,
                p.v0.value,
                p.v10,
                p.v01,
                p.q,
                b.pi_zero(0.0, s.x0, s.y0, s.z0),
            ]
            .iter()
            .map(f64::to_string)
            .collect(),
        );
    }
    let header = "epsilon,delta,lambda_bar,lambda_hat,lambda_bar_prime,b,v0,v10,v01,q,pi_zero";
    report::write(out, "expansion.csv", &report::table_csv(header, &rows))?;
    println!("expansion at (t, x, z) = (0, {}, {}): {} grid points", s.x0, s.z0, rows.len());
    Ok(())
}

fn simulate_cmd(cfg: &RunConfig, out: &std::path::Path) -> Result<()> {
    let bundle = cfg.bundle()?;
    let mut rows = Vec::new();
    for (i, (e, d)) in cfg.grid.points().into_iter().enumerate() {
        let model = cfg.model(e, d)?;
        let b = bundle.with_scales(e, d)?;
        let sc = cfg.sim_config(e, d, cfg.simulation.control_variate_plain);
        for named in &cfg.strategies {
            let ens = simulate_paths(&model, &named.strategy, &b, &sc)?;
            if cfg.simulation.record_paths {
                let mut buf = Vec::new();
                write_path_csv(&ens, &mut buf)?;
                let text = String::from_utf8(buf).map_err(|e| Error::Config(e.to_string()))?;
                report::write(out, &format!("paths_{}_{i}.csv", named.name), &text)?;
            }
            let v = summarize(&ens);
            println!("ε = {e:<6} δ = {d:<6} {:<16} V̂ = {:.6} ± {:.2e}", named.name, v.mean, v.se);
            rows.push(vec![
                e.to_string(),
                d.to_string(),
                named.name.clone(),
                v.mean.to_string(),
                v.se.to_string(),
                v.paths.to_string(),
                v.effective_n.to_string(),
                v.floor_hit_rate.to_string(),
            ]);
        }
    }
    let header = "epsilon,delta,strategy,v_hat,se,paths,effective_n,floor_hit_rate";
    report::write(out, "simulate.csv", &report::table_csv(header, &rows))?;
    Ok(())
}
