use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::warn;

use harvest_core::analysis::{
    classify_regions, extract_threshold_curves_2d, extract_thresholds_1d, summarize_regions, sweep,
    ThresholdReport,
};
use harvest_core::config::{ConfigError, RunConfig, RunRecord};
use harvest_core::io::{
    read_solution, sweep_to_csv, thresholds_to_csv, verify_to_csv, write_solution, write_text,
    SolutionHeader,
};
use harvest_core::model::{
    check_diagonal_dominance, check_growth_condition, check_origin_equilibrium, check_price_cost,
    GrowthScan,
};
use harvest_core::simulate::verify;
use harvest_core::{solve, Regime, Solution, SolveError};

#[derive(Parser)]
#[command(name = "harvest", version, about = "Optimal harvesting and seeding by Markov chain approximation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate the config and run the model assumption checks.
    Check(Common),
    /// Solve and write the value function, policy and thresholds.
    Solve(Common),
    /// Solve over a range of one parameter and tabulate the thresholds.
    Sweep(Common),
    /// Compare a solution with Monte Carlo estimates of its policy.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Solution CSV to check (default: <out>/solution.csv).
        #[arg(long)]
        solution: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Simulation seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    quiet: bool,
}

/// Exit 1: the input is invalid or a check failed. Exit 2: the computation
/// or file system failed.
enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Failure::Runtime(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

struct Context {
    config: RunConfig,
    out: PathBuf,
    quiet: bool,
}

impl Context {
    fn load(common: &Common) -> Result<Self, Failure> {
        let mut config = RunConfig::load(&common.config)?;
        if let Some(seed) = common.seed {
            config.simulate.get_or_insert_with(Default::default).seed = Some(seed);
        }
        if let Some(out) = &common.out {
            config.output = out.clone();
        }
        Ok(Context {
            out: config.output.clone(),
            config,
            quiet: common.quiet,
        })
    }

    fn say(&self, line: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", line.as_ref());
        }
    }

    fn prepare_out(&self) -> Result<(), Failure> {
        fs::create_dir_all(&self.out)
            .map_err(|e| Failure::Runtime(format!("{}: {e}", self.out.display())))
    }

    fn write_manifest(&self, record: RunRecord) -> Result<PathBuf, Failure> {
        let mut manifest = self.config.materialized()?;
        manifest.output = self.out.clone();
        let path = self.out.join(format!("manifest_{}.toml", record.command));
        manifest.run = Some(record);
        write_text(&path, &manifest.to_toml()?).map_err(runtime)?;
        Ok(path)
    }
}

fn record(command: &str, solution: Option<&Solution>, started: Instant) -> RunRecord {
    RunRecord {
        command: command.to_string(),
        iterations: solution.map(|s| s.iterations),
        converged: solution.map(|s| s.converged),
        final_change: solution.map(|s| s.final_residual()),
        bellman_residual: solution.map(|s| s.bellman_residual),
        wall_time_seconds: started.elapsed().as_secs_f64(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    }
}

fn threshold_line(report: &ThresholdReport) -> String {
    let l1 = if report.has_seeding[0] {
        format!("{:.2}", report.l1[0])
    } else {
        "none".to_string()
    };
    let l2 = if report.has_harvesting[0] {
        format!("{:.2}", report.l2[0])
    } else {
        "none".to_string()
    };
    format!("L1={l1} L2={l2}")
}

fn cmd_check(ctx: &Context) -> Result<(), Failure> {
    let model = ctx.config.model()?;
    let bounds = ctx.config.bounds()?;
    let regime = bounds.regime().map_err(|e| Failure::Validation(e.to_string()))?;
    let grid = ctx.config.grid()?;
    let mut reports = vec![
        check_origin_equilibrium(&model),
        check_price_cost(&model, grid.nodes(), grid.h()),
        check_diagonal_dominance(&model, grid.nodes()),
    ];
    if model.price_is_constant() {
        reports.push(
            check_growth_condition(&model, grid.upper(), &GrowthScan::with_spacing(grid.h()))
                .map_err(|e| Failure::Validation(e.to_string()))?,
        );
    } else {
        ctx.say("skip: growth condition (needs constant prices)");
    }
    let mut problems = Vec::new();
    if regime == Regime::BoundedSeeding && !model.price_is_constant() {
        problems.push("bounded seeding with singular harvesting requires constant prices");
    }
    if regime == Regime::BoundedHarvesting && !model.cost_is_constant() {
        problems.push("singular seeding with bounded harvesting requires constant seeding costs");
    }
    ctx.say(format!(
        "model {} (d = {}), regime {}, {} nodes, h = {}",
        model.name(),
        model.dim(),
        regime,
        grid.node_count(),
        grid.h()
    ));
    let mut failed = !problems.is_empty();
    for report in &reports {
        failed |= !report.passed();
        if !report.passed() {
            eprintln!("{report}");
        } else {
            ctx.say(report.to_string());
        }
    }
    for p in &problems {
        eprintln!("FAIL: {p}");
    }
    if failed {
        Err(Failure::Validation("assumption checks failed".into()))
    } else {
        ctx.say("all checks passed");
        Ok(())
    }
}

fn write_thresholds(ctx: &Context, solution: &Solution) -> Result<(), Failure> {
    if solution.grid.dim() == 1 {
        let report = extract_thresholds_1d(solution).map_err(runtime)?;
        if !report.contiguity_warnings.is_empty() {
            warn!(
                "policy is not a single seed/idle/harvest band at {} nodes",
                report.contiguity_warnings.len()
            );
        }
        write_text(&ctx.out.join("thresholds.csv"), &thresholds_to_csv(&report)).map_err(runtime)?;
        ctx.say(threshold_line(&report));
    } else {
        let labels = classify_regions(solution);
        ctx.say(summarize_regions(&labels, solution.grid.dim()).to_string());
        for species in 0..solution.grid.dim() {
            let report = extract_threshold_curves_2d(solution, species).map_err(runtime)?;
            let name = format!("thresholds_{}.csv", species + 1);
            write_text(&ctx.out.join(name), &thresholds_to_csv(&report)).map_err(runtime)?;
            ctx.say(report.to_string());
        }
    }
    Ok(())
}

fn cmd_solve(ctx: &Context) -> Result<(), Failure> {
    let started = Instant::now();
    let model = ctx.config.model()?;
    let bounds = ctx.config.bounds()?;
    let grid = ctx.config.grid()?;
    let params = ctx.config.solve_params()?;
    let header = SolutionHeader {
        model: model.name().to_string(),
        discount: model.discount(),
        tolerance: params.tolerance,
    };
    let (solution, failure) = match solve(&model, &bounds, &grid, &params) {
        Ok(s) => (s, None),
        Err(SolveError::NotConverged(partial)) => {
            let msg = format!(
                "solver did not converge in {} iterations; partial solution written",
                partial.iterations
            );
            (*partial, Some(Failure::Runtime(msg)))
        }
        Err(e @ SolveError::Singular(_)) => return Err(runtime(e)),
        Err(e) => return Err(Failure::Validation(e.to_string())),
    };
    ctx.prepare_out()?;
    write_solution(&ctx.out.join("solution.csv"), &solution, &header).map_err(runtime)?;
    ctx.say(format!(
        "regime {}, {} nodes, {} iterations, final change {:.3e}",
        solution.regime,
        solution.grid.node_count(),
        solution.iterations,
        solution.final_residual()
    ));
    write_thresholds(ctx, &solution)?;
    ctx.write_manifest(record("solve", Some(&solution), started))?;
    match failure {
        Some(f) => Err(f),
        None => Ok(()),
    }
}

fn cmd_sweep(ctx: &Context) -> Result<(), Failure> {
    let started = Instant::now();
    let model = ctx.config.model()?;
    let bounds = ctx.config.bounds()?;
    let params = ctx.config.solve_params()?;
    let spec = ctx.config.sweep_spec()?;
    let result = sweep(
        &model,
        &bounds,
        ctx.config.grid.upper,
        ctx.config.grid.h,
        &params,
        &spec,
    )
    .map_err(|e| Failure::Validation(e.to_string()))?;
    ctx.prepare_out()?;
    write_text(&ctx.out.join("sweep.csv"), &sweep_to_csv(&result)).map_err(runtime)?;
    let mut failures = 0;
    for point in &result.points {
        match &point.outcome {
            Ok(o) => {
                let summary = if model.dim() == 1 {
                    threshold_line(&o.report)
                } else {
                    o.report.to_string()
                };
                ctx.say(format!("{}={}: {summary}", result.parameter, point.value));
            }
            Err(e) => {
                failures += 1;
                eprintln!("{}={}: failed: {e}", result.parameter, point.value);
            }
        }
    }
    ctx.write_manifest(record("sweep", None, started))?;
    if failures == result.points.len() {
        return Err(Failure::Runtime("every sweep point failed".into()));
    }
    Ok(())
}

fn grid_mismatch(what: &str) -> Failure {
    Failure::Validation(format!("GridMismatch: {what}"))
}

fn cmd_verify(ctx: &Context, solution_path: &Path) -> Result<(), Failure> {
    let started = Instant::now();
    let model = ctx.config.model()?;
    let bounds = ctx.config.bounds()?;
    let grid = ctx.config.grid()?;
    let cfg = ctx.config.sim_config()?;
    let samples = ctx.config.samples();
    if samples.is_empty() {
        return Err(Failure::Validation(
            "simulate.samples lists no states to verify".into(),
        ));
    }
    let (_, solution) = read_solution(solution_path).map_err(|e| {
        Failure::Runtime(format!("{}: {e}", solution_path.display()))
    })?;
    if solution.grid != grid {
        return Err(grid_mismatch("solution lattice differs from the config"));
    }
    if solution.bounds != bounds {
        return Err(grid_mismatch("solution rate bounds differ from the config"));
    }
    if let Some(x) = samples.iter().find(|x| grid.node_at(x).is_none()) {
        return Err(grid_mismatch(&format!("sample state {x:?} is not a lattice node")));
    }
    let report = verify(&model, &solution, &samples, &cfg, ctx.config.slack()).map_err(runtime)?;
    ctx.prepare_out()?;
    write_text(&ctx.out.join("verify.csv"), &verify_to_csv(&report)).map_err(runtime)?;
    for row in &report.rows {
        ctx.say(format!(
            "{} x={:?} V={:.4} MC={:.4} stderr={:.4} diff={:.4} tol={:.4}",
            if row.pass { "pass" } else { "FAIL" },
            row.state,
            row.value,
            row.estimate.mean,
            row.estimate.stderr,
            row.difference,
            row.tolerance
        ));
    }
    ctx.write_manifest(record("verify", None, started))?;
    if report.all_pass() {
        Ok(())
    } else {
        Err(Failure::Validation(
            "Monte Carlo estimates disagree with the value function".into(),
        ))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Check(c) => cmd_check(&Context::load(c)?),
        Command::Solve(c) => cmd_solve(&Context::load(c)?),
        Command::Sweep(c) => cmd_sweep(&Context::load(c)?),
        Command::Verify { common, solution } => {
            let ctx = Context::load(common)?;
            let path = solution
                .clone()
                .unwrap_or_else(|| ctx.out.join("solution.csv"));
            cmd_verify(&ctx, &path)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let quiet = match &cli.command {
        Command::Check(c) | Command::Solve(c) | Command::Sweep(c) => c.quiet,
        Command::Verify { common, .. } => common.quiet,
    };
    env_logger::Builder::from_env(
        env_logger::Env::default().default_filter_or(if quiet { "error" } else { "warn" }),
    )
    .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
