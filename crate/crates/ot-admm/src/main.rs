//! Command-line front end: problem generation, the three solvers, and the
//! experiment drivers.
//!
//! Exit codes: 0 on success/convergence, 2 when a solver stopped at its
//! iteration budget (outputs are still written), 1 on input errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ot_admm::baselines::centralized_admm_with;
use ot_admm::engine::{Engine, SolverConfig, THREADS_ENV};
use ot_admm::error::DriverError;
use ot_admm::experiments::{default_robustness_scenario, exp_compare, exp_graphs, exp_robust};
use ot_admm::graph::{generate, GraphKind};
use ot_admm::io::{
    parse_matrix_str, parse_problem, parse_vector_str, read_file, write_central_trace_str,
    write_file, write_matrix_str, write_plan_str, write_problem_str, write_trace_str,
    ParsedProblem, PlanMeta,
};
use ot_admm::problem::MassProblem;
use ot_admm::sinkhorn::{sinkhorn, SinkhornParams};

#[derive(Parser)]
#[command(
    name = "ot-admm",
    about = "Distributed and centralized ADMM solvers for regularized optimal transport on graphs",
    long_about = None,
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a problem file for a standard topology.
    Gen(GenArgs),
    /// Run the distributed multi-agent solver on a problem file.
    Solve(SolveArgs),
    /// Run the centralized ADMM solver on a problem file.
    Central(SolveArgs),
    /// Run Sinkhorn on a cost matrix with row/column marginals.
    Sinkhorn(SinkhornArgs),
    /// Topology sweep: 4 graph kinds x 3 regularization levels, 20 agents.
    ExpGraphs(ExpGraphsArgs),
    /// Bipartite 5+5 comparison of distributed/centralized/Sinkhorn.
    ExpCompare(ExpCompareArgs),
    /// Agent-departure robustness scenario.
    ExpRobust(ExpRobustArgs),
}

#[derive(Args)]
struct GenArgs {
    /// line | ring | star | complete | bipartite
    #[arg(long)]
    kind: String,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1.0)]
    cost: f64,
    /// Per-arc capacity; use "inf" for uncapacitated arcs.
    #[arg(long, default_value_t = 1e6)]
    capacity: f64,
    /// 1-based source node for a unit of mass (ignored with --random-rho).
    #[arg(long, default_value_t = 1)]
    source: usize,
    /// 1-based sink node (defaults to n).
    #[arg(long)]
    sink: Option<usize>,
    /// Draw random balanced probability marginals from this seed instead.
    #[arg(long)]
    random_rho: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    problem: PathBuf,
    /// Override the file's per-agent regularization weight.
    #[arg(long)]
    gamma: Option<f64>,
    /// Interpret --gamma as a global weight and divide it by the node count.
    #[arg(long, default_value_t = false)]
    divide_gamma: bool,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    qp_tol: Option<f64>,
    /// Write the per-iteration trace CSV here.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write the final plan JSON here.
    #[arg(long)]
    plan: Option<PathBuf>,
}

#[derive(Args)]
struct SinkhornArgs {
    /// Row marginals, one value per line (or comma-separated).
    #[arg(long)]
    rows: PathBuf,
    /// Column marginals.
    #[arg(long)]
    cols: PathBuf,
    /// Cost matrix CSV.
    #[arg(long)]
    cost: PathBuf,
    #[arg(long)]
    gamma: f64,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long, default_value_t = 100_000)]
    max_iters: usize,
    /// Write the coupling CSV here (defaults to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExpGraphsArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    max_iters: Option<usize>,
}

#[derive(Args)]
struct ExpCompareArgs {
    #[arg(long)]
    out: PathBuf,
    /// Seed for the random instance (required for reproducibility).
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    max_iters: Option<usize>,
}

#[derive(Args)]
struct ExpRobustArgs {
    #[arg(long)]
    out: PathBuf,
    /// Scenario file; defaults to the bundled six-node topology.
    #[arg(long)]
    problem: Option<PathBuf>,
    #[arg(long)]
    max_iters: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Solve(args) => cmd_solve(args),
        Command::Central(args) => cmd_central(args),
        Command::Sinkhorn(args) => cmd_sinkhorn(args),
        Command::ExpGraphs(args) => exp_graphs(&args.out, args.seed, args.max_iters).map(summarize),
        Command::ExpCompare(args) => {
            exp_compare(&args.out, args.seed, args.max_iters).map(summarize)
        }
        Command::ExpRobust(args) => cmd_exp_robust(args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}

fn summarize(report: ot_admm::experiments::ExperimentReport) -> ExitCode {
    println!("{}: {} runs", report.scenario, report.cells.len());
    for cell in &report.cells {
        println!(
            "  {} gamma={}: iterations={} converged={}{}",
            cell.label,
            cell.gamma,
            cell.iterations,
            cell.converged,
            cell.diverged
                .map_or(String::new(), |d| format!(" diverged={d}")),
        );
    }
    ExitCode::SUCCESS
}

fn cmd_gen(args: GenArgs) -> Result<ExitCode, DriverError> {
    let kind: GraphKind = args.kind.parse()?;
    let graph = generate(kind, args.n, args.cost, args.capacity)?;
    let problem = match args.random_rho {
        Some(seed) => random_marginals(args.n, seed),
        None => {
            let sink = args.sink.unwrap_or(args.n);
            if args.source == 0 || args.source > args.n || sink == 0 || sink > args.n {
                return Err(DriverError::Invalid(format!(
                    "source/sink must be in 1..={}",
                    args.n
                )));
            }
            if args.source == sink {
                return Err(DriverError::Invalid(
                    "source and sink must differ".to_string(),
                ));
            }
            let mut rho0 = vec![0.0; args.n];
            let mut rho_inf = vec![0.0; args.n];
            rho0[args.source - 1] = 1.0;
            rho_inf[sink - 1] = 1.0;
            MassProblem::new(rho0, rho_inf)?
        }
    };
    let parsed = ParsedProblem {
        graph,
        problem,
        config: SolverConfig::default(),
        events: Default::default(),
    };
    write_file(&args.out, &write_problem_str(&parsed))?;
    println!("wrote {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn random_marginals(n: usize, seed: u64) -> MassProblem {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    ot_admm::experiments::random_mass(n, &mut rng)
}

fn effective_config(file: &SolverConfig, args: &SolveArgs, nodes: usize) -> SolverConfig {
    let gamma = match (args.gamma, args.divide_gamma) {
        (Some(g), true) => g / nodes as f64,
        (Some(g), false) => g,
        (None, _) => file.gamma,
    };
    SolverConfig {
        gamma,
        delta: args.delta.unwrap_or(file.delta),
        epsilon: args.eps.unwrap_or(file.epsilon),
        max_iters: args.max_iters.unwrap_or(file.max_iters),
        qp_tol: args.qp_tol.unwrap_or(file.qp_tol),
    }
}

fn cmd_solve(args: SolveArgs) -> Result<ExitCode, DriverError> {
    let parsed = parse_problem(&args.problem)?;
    let config = effective_config(&parsed.config, &args, parsed.graph.node_count());
    let mut engine = Engine::new(parsed.graph.clone(), &parsed.problem, config)?;
    for warning in engine.warnings() {
        eprintln!("warning: {warning}");
    }
    let (solution, trace) = engine.run(&parsed.events)?;
    if let Some(path) = &args.trace {
        write_file(path, &write_trace_str(&trace))?;
    }
    if let Some(path) = &args.plan {
        let meta = PlanMeta {
            gamma: config.gamma,
            delta: config.delta,
            epsilon: config.epsilon,
            converged: solution.converged,
            iterations: solution.iterations,
            seed: None,
        };
        write_file(path, &write_plan_str(&parsed.graph, &solution.plan, &meta))?;
    }
    println!(
        "solve: converged={} iterations={} objective={:.6} consensus_gap={:.3e} (threads: {})",
        solution.converged,
        solution.iterations,
        solution.objective,
        engine.consensus_gap(),
        std::env::var(THREADS_ENV).unwrap_or_else(|_| "default".to_string()),
    );
    Ok(if solution.converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn cmd_central(args: SolveArgs) -> Result<ExitCode, DriverError> {
    let parsed = parse_problem(&args.problem)?;
    if !parsed.events.is_empty() {
        eprintln!("warning: centralized solver ignores departure events");
    }
    let config = effective_config(&parsed.config, &args, parsed.graph.node_count());
    let gamma_total = parsed.graph.node_count() as f64 * config.gamma;
    let (solution, trace) = centralized_admm_with(
        &parsed.graph,
        parsed.graph.capacity(),
        parsed.problem.rho(),
        gamma_total,
        config.delta,
        config.epsilon,
        config.max_iters,
    )?;
    if let Some(path) = &args.trace {
        write_file(path, &write_central_trace_str(&trace))?;
    }
    if let Some(path) = &args.plan {
        let meta = PlanMeta {
            gamma: config.gamma,
            delta: config.delta,
            epsilon: config.epsilon,
            converged: solution.converged,
            iterations: solution.iterations,
            seed: None,
        };
        write_file(path, &write_plan_str(&parsed.graph, &solution.plan, &meta))?;
    }
    println!(
        "central: converged={} iterations={} objective={:.6}",
        solution.converged, solution.iterations, solution.objective
    );
    Ok(if solution.converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn cmd_sinkhorn(args: SinkhornArgs) -> Result<ExitCode, DriverError> {
    let a = parse_vector_str(&read_file(&args.rows)?)?;
    let b = parse_vector_str(&read_file(&args.cols)?)?;
    let cost = parse_matrix_str(&read_file(&args.cost)?)?;
    let mut params = SinkhornParams::new(args.gamma);
    params.tol = args.tol;
    params.max_iters = args.max_iters;
    let coupling = sinkhorn(&cost, &a, &b, &params)?;
    let rendered = write_matrix_str(&coupling.matrix);
    match &args.out {
        Some(path) => {
            write_file(path, &rendered)?;
            println!(
                "sinkhorn: converged={} iterations={} marginal_error={:.3e} log_domain={}",
                coupling.converged,
                coupling.iterations,
                coupling.marginal_error,
                coupling.log_domain
            );
        }
        None => print!("{rendered}"),
    }
    Ok(if coupling.converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn cmd_exp_robust(args: ExpRobustArgs) -> Result<ExitCode, DriverError> {
    let scenario = match &args.problem {
        Some(path) => parse_problem(path)?,
        None => default_robustness_scenario(),
    };
    let report = exp_robust(&args.out, &scenario, &[0.0, 0.1, 1.0], args.max_iters)?;
    Ok(summarize(report))
}
