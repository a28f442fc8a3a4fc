//! Experiment drivers: topology/regularization sweeps, the bipartite solver
//! comparison, and the agent-departure robustness scenario.
//!
//! Every driver writes one trace file per run plus a `report.json` whose
//! numeric claims (iteration counts, objectives, sparsity) are recomputable
//! from the emitted traces and plan files. Runs are deterministic for a
//! fixed seed.

use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::baselines::{centralized_admm_with, objective, reference_solution_with};
use crate::engine::{Engine, EventKind, EventSchedule, RunTrace, SolverConfig};
use crate::error::DriverError;
use crate::graph::{generate, DirectedGraph, GraphKind};
use crate::io::{
    parse_problem_str, write_central_trace_str, write_file, write_matrix_str, write_plan_str,
    write_trace_str, ParsedProblem, PlanMeta,
};
use crate::problem::MassProblem;
use crate::sinkhorn::{sinkhorn, SinkhornParams};

/// The bundled six-node departure scenario. The arc set ships as data so
/// the topology can be swapped without rebuilding; it is the bidirected
/// 6-cycle 1-2-3-4-5-6 with the chord 2-6, the smallest arrangement that
/// keeps agents 1, 2, and 5 adjacent to agent 6, contains every arc named
/// by the reported transport plans, and leaves nodes 1-5 connected and the
/// adjusted supply feasible after the departure.
pub const DEFAULT_ROBUSTNESS_SCENARIO: &str = include_str!("../data/robustness.json");

/// Flows below this threshold do not count toward a plan's support.
pub const SUPPORT_THRESHOLD: f64 = 1e-6;

/// One run of an experiment grid.
#[derive(Debug, Clone, Serialize)]
pub struct CellReport {
    pub label: String,
    pub gamma: f64,
    pub converged: bool,
    /// Robustness classification: the post-event run blew up past 1000x its
    /// residual at the event or exhausted the budget.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diverged: Option<bool>,
    pub iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace_path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan_path: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub objective: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_objective: Option<f64>,
    /// `|objective − oracle| / (1 + |oracle|)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_delta_objective: Option<f64>,
    /// `‖plan − oracle plan‖_∞`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_delta_plan: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<usize>,
    /// Distinct neighbors each agent broadcasts to per round: `[min, max]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub neighbor_messages: Option<[usize; 2]>,
    /// Arcs carrying flow above [`SUPPORT_THRESHOLD`], 1-based.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub support: Option<Vec<(usize, usize)>>,
    /// Final-round consensus gap of a distributed run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_consensus_gap: Option<f64>,
    /// Final-round divergence-constraint violation of a distributed run.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_feasibility: Option<f64>,
}

impl CellReport {
    fn new(label: impl Into<String>, gamma: f64) -> Self {
        CellReport {
            label: label.into(),
            gamma,
            converged: false,
            diverged: None,
            iterations: 0,
            trace_path: None,
            plan_path: None,
            objective: None,
            oracle_objective: None,
            oracle_delta_objective: None,
            oracle_delta_plan: None,
            sparsity: None,
            neighbor_messages: None,
            support: None,
            final_consensus_gap: None,
            final_feasibility: None,
        }
    }
}

/// Summary of one experiment driver invocation.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentReport {
    pub scenario: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub notes: Vec<String>,
    pub cells: Vec<CellReport>,
}

impl ExperimentReport {
    fn write(&self, out_dir: &Path) -> Result<(), DriverError> {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        write_file(&out_dir.join("report.json"), &text)?;
        Ok(())
    }
}

fn gamma_tag(gamma: f64) -> String {
    format!("{gamma}").replace('.', "p")
}

fn run_distributed(
    graph: &DirectedGraph,
    problem: &MassProblem,
    config: SolverConfig,
) -> Result<(crate::engine::Solution, RunTrace), DriverError> {
    let mut engine = Engine::new(graph.clone(), problem, config)?;
    Ok(engine.run(&EventSchedule::empty())?)
}

/// Random balanced probability marginals on `n` nodes.
pub fn random_mass(n: usize, rng: &mut ChaCha8Rng) -> MassProblem {
    let dist = Uniform::new(0.05f64, 1.0);
    let mut rho0: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    let mut rho_inf: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    let s0: f64 = rho0.iter().sum();
    let s1: f64 = rho_inf.iter().sum();
    for v in &mut rho0 {
        *v /= s0;
    }
    for v in &mut rho_inf {
        *v /= s1;
    }
    // Kill the residual imbalance from the two divisions.
    let drift: f64 = rho0.iter().sum::<f64>() - rho_inf.iter().sum::<f64>();
    rho0[0] -= drift;
    MassProblem::new(rho0, rho_inf).expect("normalized marginals are balanced")
}

/// Topology sweep: line, ring, star, and complete graphs on 20 agents, each
/// solved at `gamma` in {0, 0.1, 1} with uniform costs and large capacities
/// and a seeded random supply pattern shared across topologies.
pub fn exp_graphs(
    out_dir: &Path,
    seed: u64,
    max_iters: Option<usize>,
) -> Result<ExperimentReport, DriverError> {
    let n = 20;
    let gammas = [0.0, 0.1, 1.0];
    let kinds = [
        GraphKind::Line,
        GraphKind::Ring,
        GraphKind::Star,
        GraphKind::Complete,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let problem = random_mass(n, &mut rng);

    let mut report = ExperimentReport {
        scenario: "exp-graphs".to_string(),
        seed: Some(seed),
        notes: vec![format!(
            "{n} agents, uniform costs 1, capacities 1e6, delta 10, epsilon 1e-4; \
             supply pattern drawn from seed {seed} and shared across topologies"
        )],
        cells: Vec::new(),
    };

    for kind in kinds {
        let graph = generate(kind, n, 1.0, 1e6)?;
        let messages = neighbor_message_range(&graph);
        for gamma in gammas {
            let config = SolverConfig {
                gamma,
                max_iters: max_iters.unwrap_or(200_000),
                ..SolverConfig::default()
            };
            let (sol, trace) = run_distributed(&graph, &problem, config)?;
            let rel = format!("{kind}-gamma{}.csv", gamma_tag(gamma));
            write_file(&out_dir.join(&rel), &write_trace_str(&trace))?;

            let mut cell = CellReport::new(format!("{kind}"), gamma);
            cell.converged = sol.converged;
            cell.iterations = sol.iterations;
            cell.trace_path = Some(rel);
            cell.objective = Some(sol.objective);
            cell.neighbor_messages = Some(messages);
            fill_final_diagnostics(&mut cell, &trace);
            report.cells.push(cell);
        }
    }
    report.write(out_dir)?;
    Ok(report)
}

fn neighbor_message_range(graph: &DirectedGraph) -> [usize; 2] {
    let mut min = usize::MAX;
    let mut max = 0;
    for node in 0..graph.node_count() {
        let sets = graph.neighbor_sets(node).expect("valid node");
        let distinct = sets.outbound.union(&sets.inbound).count();
        min = min.min(distinct);
        max = max.max(distinct);
    }
    [min, max]
}

/// Bipartite comparison: a seeded 5+5 instance with random costs and
/// marginals, solved by distributed ADMM, centralized ADMM, and Sinkhorn at
/// `gamma` in {0.01, 0.1, 1, 10}, with per-method sparsity at 1e-6.
pub fn exp_compare(
    out_dir: &Path,
    seed: u64,
    max_iters: Option<usize>,
) -> Result<ExperimentReport, DriverError> {
    let half = 5;
    let n = 2 * half;
    let gammas = [0.01, 0.1, 1.0, 10.0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let cost_dist = Uniform::new(0.1f64, 1.0);
    let mut arcs = Vec::new();
    let mut costs = Vec::new();
    for s in 0..half {
        for t in half..n {
            arcs.push((s, t));
            costs.push(cost_dist.sample(&mut rng));
        }
    }
    let graph = DirectedGraph::new(n, arcs, costs.clone(), vec![1e6; half * half])?;

    let marg_dist = Uniform::new(0.1f64, 1.0);
    let mut a: Vec<f64> = (0..half).map(|_| marg_dist.sample(&mut rng)).collect();
    let mut b: Vec<f64> = (0..half).map(|_| marg_dist.sample(&mut rng)).collect();
    let sa: f64 = a.iter().sum();
    let sb: f64 = b.iter().sum();
    for v in &mut a {
        *v /= sa;
    }
    for v in &mut b {
        *v /= sb;
    }
    let drift: f64 = a.iter().sum::<f64>() - b.iter().sum::<f64>();
    a[0] -= drift;

    let mut rho0 = a.clone();
    rho0.extend(vec![0.0; half]);
    let mut rho_inf = vec![0.0; half];
    rho_inf.extend(b.clone());
    let problem = MassProblem::new(rho0, rho_inf)?;

    let cost_matrix = nalgebra::DMatrix::from_fn(half, half, |i, j| costs[i * half + j]);
    write_file(&out_dir.join("cost.csv"), &write_matrix_str(&cost_matrix))?;
    write_file(
        &out_dir.join("rows.csv"),
        &(a.iter().map(f64::to_string).collect::<Vec<_>>().join("\n") + "\n"),
    )?;
    write_file(
        &out_dir.join("cols.csv"),
        &(b.iter().map(f64::to_string).collect::<Vec<_>>().join("\n") + "\n"),
    )?;

    let mut report = ExperimentReport {
        scenario: "exp-compare".to_string(),
        seed: Some(seed),
        notes: vec![
            format!(
                "bipartite 5+5, random costs and marginals from seed {seed} \
                 (cost.csv, rows.csv, cols.csv), delta 10, epsilon 1e-4"
            ),
            "sparsity counts entries above 1e-6".to_string(),
        ],
        cells: Vec::new(),
    };

    for gamma in gammas {
        let tag = gamma_tag(gamma);
        let config = SolverConfig {
            gamma,
            max_iters: max_iters.unwrap_or(500_000),
            ..SolverConfig::default()
        };

        let (dist_sol, dist_trace) = run_distributed(&graph, &problem, config)?;
        let dist_trace_rel = format!("distributed-gamma{tag}.csv");
        write_file(
            &out_dir.join(&dist_trace_rel),
            &write_trace_str(&dist_trace),
        )?;
        let dist_plan_rel = format!("distributed-gamma{tag}-plan.json");
        let meta = PlanMeta {
            gamma,
            delta: config.delta,
            epsilon: config.epsilon,
            converged: dist_sol.converged,
            iterations: dist_sol.iterations,
            seed: Some(seed),
        };
        write_file(
            &out_dir.join(&dist_plan_rel),
            &write_plan_str(&graph, &dist_sol.plan, &meta),
        )?;

        let gamma_total = n as f64 * gamma;
        let (central_sol, central_trace) = centralized_admm_with(
            &graph,
            graph.capacity(),
            problem.rho(),
            gamma_total,
            config.delta,
            config.epsilon,
            config.max_iters,
        )?;
        let central_trace_rel = format!("central-gamma{tag}.csv");
        write_file(
            &out_dir.join(&central_trace_rel),
            &write_central_trace_str(&central_trace),
        )?;
        let central_plan_rel = format!("central-gamma{tag}-plan.json");
        let central_meta = PlanMeta {
            gamma,
            delta: config.delta,
            epsilon: config.epsilon,
            converged: central_sol.converged,
            iterations: central_sol.iterations,
            seed: Some(seed),
        };
        write_file(
            &out_dir.join(&central_plan_rel),
            &write_plan_str(&graph, &central_sol.plan, &central_meta),
        )?;

        let obj_d = objective(&graph, &dist_sol.plan, gamma_total)?;
        let obj_c = objective(&graph, &central_sol.plan, gamma_total)?;
        let plan_delta = inf_dist(&dist_sol.plan, &central_sol.plan);

        let mut dist_cell = CellReport::new("distributed", gamma);
        dist_cell.converged = dist_sol.converged;
        dist_cell.iterations = dist_sol.iterations;
        dist_cell.trace_path = Some(dist_trace_rel);
        dist_cell.plan_path = Some(dist_plan_rel);
        dist_cell.objective = Some(obj_d);
        dist_cell.oracle_objective = Some(obj_c);
        dist_cell.oracle_delta_objective = Some((obj_d - obj_c).abs() / (1.0 + obj_c.abs()));
        dist_cell.oracle_delta_plan = Some(plan_delta);
        dist_cell.sparsity = Some(crate::baselines::sparsity(
            dist_sol.plan.iter(),
            SUPPORT_THRESHOLD,
        ));
        fill_final_diagnostics(&mut dist_cell, &dist_trace);
        report.cells.push(dist_cell);

        let mut central_cell = CellReport::new("central", gamma);
        central_cell.converged = central_sol.converged;
        central_cell.iterations = central_sol.iterations;
        central_cell.trace_path = Some(central_trace_rel);
        central_cell.plan_path = Some(central_plan_rel);
        central_cell.objective = Some(obj_c);
        central_cell.sparsity = Some(crate::baselines::sparsity(
            central_sol.plan.iter(),
            SUPPORT_THRESHOLD,
        ));
        report.cells.push(central_cell);

        let mut params = SinkhornParams::new(gamma);
        params.tol = 1e-8;
        let coupling = sinkhorn(&cost_matrix, &a, &b, &params)?;
        let coupling_rel = format!("sinkhorn-gamma{tag}.csv");
        write_file(
            &out_dir.join(&coupling_rel),
            &write_matrix_str(&coupling.matrix),
        )?;
        let mut sk_cell = CellReport::new("sinkhorn", gamma);
        sk_cell.converged = coupling.converged;
        sk_cell.iterations = coupling.iterations;
        sk_cell.trace_path = Some(coupling_rel);
        sk_cell.sparsity = Some(crate::baselines::sparsity(
            coupling.matrix.iter(),
            SUPPORT_THRESHOLD,
        ));
        report.cells.push(sk_cell);
    }
    report.write(out_dir)?;
    Ok(report)
}

fn fill_final_diagnostics(cell: &mut CellReport, trace: &RunTrace) {
    if let Some(last) = trace.rows.last() {
        cell.final_consensus_gap = Some(last.consensus_gap);
        cell.final_feasibility = Some(last.feasibility);
    }
}

fn inf_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max)
}

/// Result of one robustness run (pre-event solve plus the event run).
#[derive(Debug, Clone, Serialize)]
pub struct RobustnessOutcome {
    pub gamma: f64,
    pub pre: CellReport,
    pub post: CellReport,
}

/// Departure scenario: solve the full instance to convergence, then rerun
/// with the departure applied at its scheduled iteration and classify the
/// post-event behavior per regularization level.
///
/// A post-event run counts as diverged when its residual exceeds 1000x the
/// residual at the event iteration or the budget runs out.
pub fn exp_robust(
    out_dir: &Path,
    scenario: &ParsedProblem,
    gammas: &[f64],
    max_iters: Option<usize>,
) -> Result<ExperimentReport, DriverError> {
    let graph = &scenario.graph;
    let n = graph.node_count();
    let events = scenario.events.events();
    if events.len() != 1 {
        return Err(DriverError::Invalid(format!(
            "robustness scenario needs exactly one departure event, got {}",
            events.len()
        )));
    }
    let event = &events[0];
    let EventKind::Depart { node, new_rho } = &event.kind;
    let depart_at = event.at_iteration;

    let mut report = ExperimentReport {
        scenario: "exp-robust".to_string(),
        seed: None,
        notes: vec![format!(
            "node {} departs after iteration {depart_at}; post-event supply {:?}",
            node + 1,
            new_rho
        )],
        cells: Vec::new(),
    };

    for &gamma in gammas {
        let tag = gamma_tag(gamma);
        let config = SolverConfig {
            gamma,
            max_iters: max_iters.unwrap_or(scenario.config.max_iters),
            ..scenario.config
        };

        // Full run without the event.
        let (pre_sol, pre_trace) = run_distributed(graph, &scenario.problem, config)?;
        let pre_trace_rel = format!("pre-gamma{tag}.csv");
        write_file(&out_dir.join(&pre_trace_rel), &write_trace_str(&pre_trace))?;
        let pre_plan_rel = format!("pre-gamma{tag}-plan.json");
        let pre_meta = PlanMeta {
            gamma,
            delta: config.delta,
            epsilon: config.epsilon,
            converged: pre_sol.converged,
            iterations: pre_sol.iterations,
            seed: None,
        };
        write_file(
            &out_dir.join(&pre_plan_rel),
            &write_plan_str(graph, &pre_sol.plan, &pre_meta),
        )?;

        let mut pre = CellReport::new("pre-event", gamma);
        pre.converged = pre_sol.converged;
        pre.iterations = pre_sol.iterations;
        pre.trace_path = Some(pre_trace_rel);
        pre.plan_path = Some(pre_plan_rel);
        let gamma_total = n as f64 * gamma;
        pre.objective = Some(objective(graph, &pre_sol.plan, gamma_total)?);
        match reference_solution_with(graph, graph.capacity(), scenario.problem.rho(), gamma_total)
        {
            Ok(oracle) => {
                let obj_o = objective(graph, &oracle, gamma_total)?;
                pre.oracle_objective = Some(obj_o);
                pre.oracle_delta_objective =
                    Some((pre.objective.unwrap() - obj_o).abs() / (1.0 + obj_o.abs()));
                pre.oracle_delta_plan = Some(inf_dist(&pre_sol.plan, &oracle));
            }
            Err(e) => report
                .notes
                .push(format!("pre-event oracle failed at gamma {gamma}: {e}")),
        }
        pre.support = Some(support_arcs(graph, &pre_sol.plan));
        fill_final_diagnostics(&mut pre, &pre_trace);
        report.cells.push(pre);

        // Event run with per-agent norm series.
        let mut engine = Engine::new(graph.clone(), &scenario.problem, config)?;
        let mut trace = RunTrace::default();
        let mut norms: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut error_at_event: Option<f64> = None;
        let mut diverged = false;
        let mut converged = false;
        while engine.iteration() < config.max_iters {
            if engine.iteration() == depart_at {
                engine.apply_departure(*node, new_rho)?;
                error_at_event = trace.rows.last().map(|r| r.error);
            }
            let row = engine.round()?;
            trace.rows.push(row);
            norms.push((
                row.iter,
                engine
                    .agents()
                    .iter()
                    .map(|a| a.plan.iter().map(|x| x * x).sum::<f64>().sqrt())
                    .collect(),
            ));
            if let Some(e0) = error_at_event {
                if row.error > 1e3 * e0.max(f64::MIN_POSITIVE) {
                    diverged = true;
                    break;
                }
            }
            if row.error < config.epsilon && engine.iteration() > depart_at {
                converged = true;
                break;
            }
        }
        if !converged && !diverged {
            diverged = true; // budget exhausted
        }

        let post_trace_rel = format!("event-gamma{tag}.csv");
        write_file(&out_dir.join(&post_trace_rel), &write_trace_str(&trace))?;
        let norms_rel = format!("norms-gamma{tag}.csv");
        write_file(&out_dir.join(&norms_rel), &norms_csv(&norms, n))?;

        let post_plan = engine.mean_plan();
        let post_plan_rel = format!("event-gamma{tag}-plan.json");
        let post_meta = PlanMeta {
            gamma,
            delta: config.delta,
            epsilon: config.epsilon,
            converged,
            iterations: engine.iteration(),
            seed: None,
        };
        write_file(
            &out_dir.join(&post_plan_rel),
            &write_plan_str(graph, &post_plan, &post_meta),
        )?;

        let mut post = CellReport::new("post-event", gamma);
        post.converged = converged;
        post.diverged = Some(diverged);
        post.iterations = engine.iteration();
        post.trace_path = Some(post_trace_rel);
        post.plan_path = Some(post_plan_rel);
        post.support = Some(support_arcs(graph, &post_plan));
        fill_final_diagnostics(&mut post, &trace);

        if converged {
            let active = n - 1;
            let gamma_total_post = active as f64 * gamma;
            let caps_after: Vec<f64> = graph
                .arcs()
                .iter()
                .zip(graph.capacity())
                .map(|(&(f, t), &c)| if f == *node || t == *node { 0.0 } else { c })
                .collect();
            post.objective = Some(objective(graph, &post_plan, gamma_total_post)?);
            match reference_solution_with(graph, &caps_after, new_rho, gamma_total_post) {
                Ok(oracle) => {
                    let obj_o = objective(graph, &oracle, gamma_total_post)?;
                    post.oracle_objective = Some(obj_o);
                    post.oracle_delta_objective =
                        Some((post.objective.unwrap() - obj_o).abs() / (1.0 + obj_o.abs()));
                    post.oracle_delta_plan = Some(inf_dist(&post_plan, &oracle));
                }
                Err(e) => report
                    .notes
                    .push(format!("post-event oracle failed at gamma {gamma}: {e}")),
            }
        }
        report.cells.push(post);

        report
            .notes
            .push(format!("per-agent norm series: {norms_rel}"));
    }
    report.write(out_dir)?;
    Ok(report)
}

fn support_arcs(graph: &DirectedGraph, plan: &[f64]) -> Vec<(usize, usize)> {
    graph
        .arcs()
        .iter()
        .zip(plan)
        .filter(|(_, &flow)| flow.abs() > SUPPORT_THRESHOLD)
        .map(|(&(from, to), _)| (from + 1, to + 1))
        .collect()
}

fn norms_csv(norms: &[(usize, Vec<f64>)], n: usize) -> String {
    use std::fmt::Write as _;
    let mut out = String::from("iter");
    for i in 1..=n {
        let _ = write!(out, ",norm_{i}");
    }
    out.push('\n');
    for (iter, row) in norms {
        let _ = write!(out, "{iter}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Parse the bundled robustness scenario.
pub fn default_robustness_scenario() -> ParsedProblem {
    parse_problem_str(DEFAULT_ROBUSTNESS_SCENARIO).expect("bundled scenario parses")
}
