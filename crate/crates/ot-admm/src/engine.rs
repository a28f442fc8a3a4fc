//! Synchronous multi-agent ADMM engine.
//!
//! One agent per node keeps a full copy of the arc-flow vector plus a scalar
//! dual for its own divergence constraint and a vector dual for consensus
//! with its neighbors. Each round runs three phases:
//!
//! * Phase A — every active agent minimizes its local box QP using the
//!   neighbors' plans from the previous round (independent, may run
//!   concurrently);
//! * Phase B — the new plans are exchanged;
//! * Phase C — every active agent advances its duals using the new plans.
//!
//! The run stops when the summed state change per round drops below the
//! configured tolerance. Mid-run topology events (agent departure) freeze an
//! agent, zero the capacities of its arcs, and remove it from every
//! remaining agent's neighbor sums.
//!
//! Results are identical under serial and concurrent execution: per-agent
//! results are computed independently and reduced in fixed agent order.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::baselines::objective;
use crate::error::EngineError;
use crate::graph::{laplacian_kernel_gap_over, DirectedGraph};
use crate::problem::{is_runnable, validate, MassProblem, Severity, BALANCE_TOL};
use crate::qp::{assemble_from_parts, solve_box_qp_from, AssemblyParts, DEFAULT_MAX_SWEEPS};

/// Environment variable capping engine concurrency (number of worker
/// threads for the per-round subproblem phase).
pub const THREADS_ENV: &str = "OT_ADMM_THREADS";

/// Solver parameters.
///
/// `gamma` is the per-agent regularization weight, i.e. the value obtained
/// after dividing a global regularization strength by the number of agents;
/// each agent's objective carries `(gamma/2)·‖plan‖²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub gamma: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub max_iters: usize,
    pub qp_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            gamma: 0.0,
            delta: 10.0,
            epsilon: 1e-4,
            max_iters: 50_000,
            qp_tol: 1e-8,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), EngineError> {
        if !(self.delta > 0.0) {
            return Err(EngineError::Validation(format!(
                "delta must be > 0, got {}",
                self.delta
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(EngineError::Validation(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(EngineError::Validation(format!(
                "gamma must be finite and >= 0, got {}",
                self.gamma
            )));
        }
        if !(self.qp_tol > 0.0) {
            return Err(EngineError::Validation(format!(
                "qp_tol must be > 0, got {}",
                self.qp_tol
            )));
        }
        if self.max_iters == 0 {
            return Err(EngineError::Validation("max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// One agent's local state.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub node: usize,
    /// The agent's copy of the full arc-flow vector.
    pub plan: Vec<f64>,
    /// Scalar dual for the local divergence constraint.
    pub alpha: f64,
    /// Consensus dual.
    pub s: Vec<f64>,
    /// Net supply at this node.
    pub local_supply: f64,
    /// Frozen agents keep their state bit-identical across rounds.
    pub active: bool,
}

/// A scheduled mid-run topology event.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    /// Number of completed rounds after which the event fires, before the
    /// next round's Phase A.
    pub at_iteration: usize,
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    Depart { node: usize, new_rho: Vec<f64> },
}

/// Validated, time-ordered event list.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventSchedule {
    events: Vec<Event>,
}

impl EventSchedule {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Events must be strictly increasing in `at_iteration`, and each
    /// departure's replacement supply must sum to zero.
    pub fn new(events: Vec<Event>) -> Result<Self, EngineError> {
        for w in events.windows(2) {
            if w[1].at_iteration <= w[0].at_iteration {
                return Err(EngineError::BadSchedule(format!(
                    "event iterations must be strictly increasing ({} then {})",
                    w[0].at_iteration, w[1].at_iteration
                )));
            }
        }
        for ev in &events {
            let EventKind::Depart { new_rho, .. } = &ev.kind;
            let sum: f64 = new_rho.iter().sum();
            let scale: f64 = 1.0 + new_rho.iter().map(|x| x.abs()).sum::<f64>();
            if sum.abs() > BALANCE_TOL * scale {
                return Err(EngineError::BadSchedule(format!(
                    "replacement supply at iteration {} sums to {sum}, not 0",
                    ev.at_iteration
                )));
            }
        }
        Ok(Self { events })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// One completed round's diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    /// Number of completed rounds (1-based).
    pub iter: usize,
    /// Summed state change of the round (the stopping-criterion residual).
    pub error: f64,
    /// Max disagreement between neighboring active agents' plans.
    pub consensus_gap: f64,
    /// Max divergence-constraint violation of the mean active plan.
    pub feasibility: f64,
    /// Sum over active agents of local cost plus regularization.
    pub objective: f64,
}

/// Per-round history of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunTrace {
    pub rows: Vec<TraceRow>,
}

/// Final result of a run.
#[derive(Debug, Clone)]
pub struct Solution {
    /// Arithmetic mean of the active agents' plans.
    pub plan: Vec<f64>,
    pub per_agent_plans: Vec<Vec<f64>>,
    /// Consensus-form objective of the mean plan (cost plus
    /// `active_count·(gamma/2)·‖plan‖²`).
    pub objective: f64,
    pub converged: bool,
    /// Rounds completed.
    pub iterations: usize,
}

/// Stopping-criterion residual between two engine states: the sum over
/// active agents of `‖Δs‖ + ‖Δπ‖ + |Δα|` (Euclidean norms).
pub fn residual_error(before: &[AgentState], after: &[AgentState]) -> f64 {
    debug_assert_eq!(before.len(), after.len());
    let mut total = 0.0;
    for (prev, next) in before.iter().zip(after) {
        if !next.active {
            continue;
        }
        let dpi: f64 = prev
            .plan
            .iter()
            .zip(&next.plan)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let ds: f64 = prev
            .s
            .iter()
            .zip(&next.s)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        total += ds + dpi + (next.alpha - prev.alpha).abs();
    }
    total
}

/// The synchronous multi-agent engine executing the distributed iterates.
pub struct Engine {
    graph: DirectedGraph,
    config: SolverConfig,
    /// Working capacities; departure events zero arcs here, the graph stays
    /// immutable.
    caps: Vec<f64>,
    agents: Vec<AgentState>,
    /// Other endpoint of every incident arc per node, filtered to active
    /// counterparts (a neighbor connected in both directions appears twice).
    active_nbrs: Vec<Vec<usize>>,
    /// Full incidence row per node (cached, never changes).
    incidence: Vec<Vec<f64>>,
    /// Arc cost on arcs leaving each node, zero elsewhere (cached).
    cost_out: Vec<Vec<f64>>,
    iteration: usize,
    warnings: Vec<String>,
    pool: Option<Arc<rayon::ThreadPool>>,
    serial: bool,
}

impl Engine {
    /// Initialize one zero-state agent per node.
    ///
    /// Fails on hard validation findings (imbalance, weak disconnection,
    /// bad costs/capacities). Warnings, including running with `gamma = 0`
    /// on a graph with unbounded capacities, are retained on the engine.
    pub fn new(
        graph: DirectedGraph,
        problem: &MassProblem,
        config: SolverConfig,
    ) -> Result<Self, EngineError> {
        config.validate()?;
        let findings = validate(&graph, problem);
        if !is_runnable(&findings) {
            let msgs: Vec<&str> = findings
                .iter()
                .filter(|f| f.severity == Severity::Error)
                .map(|f| f.message.as_str())
                .collect();
            return Err(EngineError::Validation(msgs.join("; ")));
        }
        let mut warnings: Vec<String> = findings.into_iter().map(|f| f.message).collect();
        if config.gamma == 0.0 && graph.capacity().iter().any(|c| c.is_infinite()) {
            warnings.push(
                "gamma = 0 with unbounded capacities: plan iterates need finite capacities to \
                 stay bounded"
                    .to_string(),
            );
        }

        let n = graph.node_count();
        let m = graph.arc_count();
        let agents = (0..n)
            .map(|node| AgentState {
                node,
                plan: vec![0.0; m],
                alpha: 0.0,
                s: vec![0.0; m],
                local_supply: problem.rho()[node],
                active: true,
            })
            .collect();

        let mut active_nbrs = vec![Vec::new(); n];
        for &(from, to) in graph.arcs() {
            active_nbrs[from].push(to);
            active_nbrs[to].push(from);
        }
        let incidence = (0..n)
            .map(|i| graph.incidence_row(i).expect("valid node"))
            .collect();
        let mut cost_out = vec![vec![0.0; m]; n];
        for (a, &(from, _)) in graph.arcs().iter().enumerate() {
            cost_out[from][a] = graph.cost()[a];
        }

        let threads = threads_from_env();
        let mut engine = Engine {
            caps: graph.capacity().to_vec(),
            graph,
            config,
            agents,
            active_nbrs,
            incidence,
            cost_out,
            iteration: 0,
            warnings,
            pool: None,
            serial: false,
        };
        engine.set_threads(threads);
        Ok(engine)
    }

    /// Cap Phase-A concurrency: `Some(1)` forces serial execution, `None`
    /// uses the global thread pool. Defaults to the `OT_ADMM_THREADS`
    /// environment variable.
    pub fn set_threads(&mut self, threads: Option<usize>) {
        match threads {
            Some(1) => {
                self.serial = true;
                self.pool = None;
            }
            Some(t) => {
                self.serial = false;
                self.pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(t)
                    .build()
                    .ok()
                    .map(Arc::new);
            }
            None => {
                self.serial = false;
                self.pool = None;
            }
        }
    }

    pub fn graph(&self) -> &DirectedGraph {
        &self.graph
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    /// Working per-arc capacities (zeroed on arcs of departed agents).
    pub fn capacities(&self) -> &[f64] {
        &self.caps
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Current net supply over active agents.
    pub fn active_rho(&self) -> Vec<(usize, f64)> {
        self.agents
            .iter()
            .filter(|a| a.active)
            .map(|a| (a.node, a.local_supply))
            .collect()
    }

    fn solve_agent(&self, i: usize, plans: &[Vec<f64>]) -> Result<Vec<f64>, EngineError> {
        let m = self.graph.arc_count();
        let agent = &self.agents[i];
        let mut neighbor_sum = vec![0.0; m];
        for &j in &self.active_nbrs[i] {
            for a in 0..m {
                neighbor_sum[a] += plans[j][a];
            }
        }
        let qp = assemble_from_parts(AssemblyParts {
            d: self.incidence[i].clone(),
            cost_out: &self.cost_out[i],
            delta: self.config.delta,
            gamma: self.config.gamma,
            alpha: agent.alpha,
            rho_i: agent.local_supply,
            s: &agent.s,
            own_plan: &plans[i],
            neighbor_sum: &neighbor_sum,
            degree: self.active_nbrs[i].len(),
            lower: vec![0.0; m],
            upper: self.caps.clone(),
        })
        .map_err(|source| EngineError::Subproblem { node: i, source })?;
        let sol = solve_box_qp_from(&qp, self.config.qp_tol, &plans[i], DEFAULT_MAX_SWEEPS)
            .map_err(|source| EngineError::Subproblem { node: i, source })?;
        Ok(sol.x)
    }

    /// The primal update for one agent: the minimizer of its local QP over
    /// `[0, capacity]`, box-respecting exactly.
    ///
    /// `neighbor_plans` must hold the previous-round plan of every active
    /// incoming or outgoing neighbor.
    pub fn primal_update(
        &self,
        node: usize,
        neighbor_plans: &BTreeMap<usize, Vec<f64>>,
    ) -> Result<Vec<f64>, EngineError> {
        self.check_active(node)?;
        let required = self.required_neighbors(node);
        self.check_coverage(node, neighbor_plans, &required)?;
        let mut plans = vec![Vec::new(); self.graph.node_count()];
        plans[node] = self.agents[node].plan.clone();
        for (&j, p) in neighbor_plans {
            plans[j] = p.clone();
        }
        self.solve_agent(node, &plans)
    }

    /// The scalar dual update: `alpha + div(new_plan)_node − rho_node`.
    pub fn dual_update_alpha(&self, node: usize, new_plan: &[f64]) -> f64 {
        let agent = &self.agents[node];
        agent.alpha + self.graph.divergence_at(node, new_plan) - agent.local_supply
    }

    /// The consensus dual update:
    /// `s + ½ Σ_j (new_plan_self − new_plan_j)` over active incident
    /// neighbors. `new_plans` must hold this round's plans for the agent
    /// itself and every active neighbor.
    pub fn dual_update_s(
        &self,
        node: usize,
        new_plans: &BTreeMap<usize, Vec<f64>>,
    ) -> Result<Vec<f64>, EngineError> {
        self.check_active(node)?;
        let own = new_plans.get(&node).ok_or_else(|| EngineError::Protocol {
            node,
            message: "missing this agent's own new plan".to_string(),
        })?;
        let required = self.required_neighbors(node);
        for &j in &required {
            if !new_plans.contains_key(&j) {
                return Err(EngineError::Protocol {
                    node,
                    message: format!("missing neighbor {} plan", j + 1),
                });
            }
        }
        let m = self.graph.arc_count();
        let mut s = self.agents[node].s.clone();
        for &j in &self.active_nbrs[node] {
            let other = &new_plans[&j];
            for a in 0..m {
                s[a] += 0.5 * (own[a] - other[a]);
            }
        }
        Ok(s)
    }

    fn required_neighbors(&self, node: usize) -> Vec<usize> {
        let mut req: Vec<usize> = self.active_nbrs[node].clone();
        req.sort_unstable();
        req.dedup();
        req
    }

    fn check_coverage(
        &self,
        node: usize,
        plans: &BTreeMap<usize, Vec<f64>>,
        required: &[usize],
    ) -> Result<(), EngineError> {
        for &j in required {
            if !plans.contains_key(&j) {
                return Err(EngineError::Protocol {
                    node,
                    message: format!("missing neighbor {} plan", j + 1),
                });
            }
        }
        Ok(())
    }

    fn check_active(&self, node: usize) -> Result<(), EngineError> {
        if node >= self.agents.len() {
            return Err(EngineError::Protocol {
                node,
                message: "unknown node".to_string(),
            });
        }
        if !self.agents[node].active {
            return Err(EngineError::Protocol {
                node,
                message: "agent is inactive".to_string(),
            });
        }
        Ok(())
    }

    /// Run one synchronous round and return its trace row.
    pub fn round(&mut self) -> Result<TraceRow, EngineError> {
        let plans: Vec<Vec<f64>> = self.agents.iter().map(|a| a.plan.clone()).collect();
        let active: Vec<usize> = self
            .agents
            .iter()
            .filter(|a| a.active)
            .map(|a| a.node)
            .collect();

        // Phase A: independent subproblems against the previous round's
        // plans; fixed agent order in the collected results.
        let solve_all = |engine: &Engine| -> Vec<Result<Vec<f64>, EngineError>> {
            if engine.serial {
                active
                    .iter()
                    .map(|&i| engine.solve_agent(i, &plans))
                    .collect()
            } else {
                active
                    .par_iter()
                    .map(|&i| engine.solve_agent(i, &plans))
                    .collect()
            }
        };
        let results = match &self.pool {
            Some(pool) => {
                let pool = Arc::clone(pool);
                pool.install(|| solve_all(self))
            }
            None => solve_all(self),
        };
        let mut new_plans = plans.clone();
        for (&i, res) in active.iter().zip(results) {
            new_plans[i] = res?;
        }

        // Phases B and C: exchange the new plans, then advance both duals
        // with them. Residual contributions accumulate in agent order.
        let mut error = 0.0;
        for &i in &active {
            let dpi: f64 = plans[i]
                .iter()
                .zip(&new_plans[i])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let div_i = self.graph.divergence_at(i, &new_plans[i]);
            let new_alpha = self.agents[i].alpha + div_i - self.agents[i].local_supply;
            let d_alpha = (new_alpha - self.agents[i].alpha).abs();

            let m = self.graph.arc_count();
            let mut ds = vec![0.0; m];
            for &j in &self.active_nbrs[i] {
                for a in 0..m {
                    ds[a] += 0.5 * (new_plans[i][a] - new_plans[j][a]);
                }
            }
            let ds_norm: f64 = ds.iter().map(|v| v * v).sum::<f64>().sqrt();

            let agent = &mut self.agents[i];
            agent.alpha = new_alpha;
            for a in 0..m {
                agent.s[a] += ds[a];
            }
            error += ds_norm + dpi + d_alpha;
        }
        for &i in &active {
            self.agents[i].plan = new_plans[i].clone();
        }

        self.iteration += 1;
        Ok(TraceRow {
            iter: self.iteration,
            error,
            consensus_gap: self.consensus_gap(),
            feasibility: self.feasibility_residual(),
            objective: self.trace_objective(),
        })
    }

    /// Run to convergence or the iteration budget, applying each scheduled
    /// event exactly after its iteration count, before the next round.
    ///
    /// A residual below epsilon only stops the run once no events remain;
    /// budget exhaustion returns `converged = false` with the full trace.
    pub fn run(&mut self, events: &EventSchedule) -> Result<(Solution, RunTrace), EngineError> {
        let mut pending: std::collections::VecDeque<&Event> = events.events().iter().collect();
        let mut trace = RunTrace::default();
        let mut converged = false;
        while self.iteration < self.config.max_iters {
            while let Some(ev) = pending.front() {
                if ev.at_iteration == self.iteration {
                    let EventKind::Depart { node, new_rho } = &ev.kind;
                    self.apply_departure(*node, new_rho)?;
                    pending.pop_front();
                } else {
                    break;
                }
            }
            let row = self.round()?;
            trace.rows.push(row);
            if row.error < self.config.epsilon && pending.is_empty() {
                converged = true;
                break;
            }
        }
        Ok((self.solution(converged), trace))
    }

    /// Freeze `node`, zero its incident arc capacities, remove it from the
    /// remaining agents' neighbor sums, and install the replacement supply.
    ///
    /// The frozen agent's state stays bit-identical afterwards; surviving
    /// agents' plan entries on removed arcs are driven to zero by the new
    /// zero capacity at their next primal update. The arc dimension never
    /// changes.
    pub fn apply_departure(&mut self, node: usize, new_rho: &[f64]) -> Result<(), EngineError> {
        let n = self.graph.node_count();
        if node >= n {
            return Err(EngineError::Departure {
                node,
                message: "unknown node".to_string(),
            });
        }
        if !self.agents[node].active {
            return Err(EngineError::Departure {
                node,
                message: "agent already inactive".to_string(),
            });
        }
        if new_rho.len() != n {
            return Err(EngineError::Departure {
                node,
                message: format!(
                    "replacement supply has {} entries, expected {n}",
                    new_rho.len()
                ),
            });
        }
        let sum: f64 = new_rho.iter().sum();
        let scale: f64 = 1.0 + new_rho.iter().map(|x| x.abs()).sum::<f64>();
        if sum.abs() > BALANCE_TOL * scale {
            return Err(EngineError::Departure {
                node,
                message: format!("replacement supply sums to {sum}, not 0"),
            });
        }
        if new_rho[node].abs() > BALANCE_TOL * scale {
            return Err(EngineError::Departure {
                node,
                message: format!(
                    "replacement supply assigns {} to the departing node",
                    new_rho[node]
                ),
            });
        }
        let active_after: Vec<bool> = (0..n).map(|i| i != node && self.agents[i].active).collect();
        if !active_after.iter().any(|&a| a) {
            return Err(EngineError::Departure {
                node,
                message: "no active agents would remain".to_string(),
            });
        }
        if !self.graph.weakly_connected_over(|i| active_after[i]) {
            return Err(EngineError::Departure {
                node,
                message: "remaining graph disconnected".to_string(),
            });
        }

        self.agents[node].active = false;
        for (a, &(from, to)) in self.graph.arcs().iter().enumerate() {
            if from == node || to == node {
                self.caps[a] = 0.0;
            }
        }
        let mut nbrs = vec![Vec::new(); n];
        for &(from, to) in self.graph.arcs() {
            if active_after[from] && active_after[to] {
                nbrs[from].push(to);
                nbrs[to].push(from);
            }
        }
        self.active_nbrs = nbrs;
        for agent in &mut self.agents {
            if agent.active {
                agent.local_supply = new_rho[agent.node];
            }
        }
        Ok(())
    }

    /// Max over active pairs sharing an arc of `‖plan_i − plan_j‖_∞`.
    pub fn consensus_gap(&self) -> f64 {
        let mut gap = 0.0f64;
        for &(from, to) in self.graph.arcs() {
            if !self.agents[from].active || !self.agents[to].active {
                continue;
            }
            let pair = self.agents[from]
                .plan
                .iter()
                .zip(&self.agents[to].plan)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            gap = gap.max(pair);
        }
        gap
    }

    /// Laplacian-kernel residual of the active agents' plans; zero exactly
    /// at consensus on a weakly connected active subgraph.
    pub fn laplacian_gap(&self) -> f64 {
        let plans: Vec<Vec<f64>> = self.agents.iter().map(|a| a.plan.clone()).collect();
        laplacian_kernel_gap_over(&self.graph, &plans, |i| self.agents[i].active)
            .expect("engine state is dimension-consistent")
    }

    /// Mean plan over active agents.
    pub fn mean_plan(&self) -> Vec<f64> {
        let m = self.graph.arc_count();
        let mut mean = vec![0.0; m];
        let mut count = 0usize;
        for agent in &self.agents {
            if !agent.active {
                continue;
            }
            count += 1;
            for a in 0..m {
                mean[a] += agent.plan[a];
            }
        }
        if count > 0 {
            for v in &mut mean {
                *v /= count as f64;
            }
        }
        mean
    }

    /// Max over active nodes of `|div(mean plan)_i − rho_i|`.
    pub fn feasibility_residual(&self) -> f64 {
        let mean = self.mean_plan();
        self.agents
            .iter()
            .filter(|a| a.active)
            .map(|a| (self.graph.divergence_at(a.node, &mean) - a.local_supply).abs())
            .fold(0.0f64, f64::max)
    }

    /// Sum over active agents of `f_i(plan_i) + (gamma/2)·‖plan_i‖²`, the
    /// quantity whose limit is the regularized transport cost.
    pub fn trace_objective(&self) -> f64 {
        let mut total = 0.0;
        for agent in &self.agents {
            if !agent.active {
                continue;
            }
            let cost: f64 = self.cost_out[agent.node]
                .iter()
                .zip(&agent.plan)
                .map(|(c, p)| c * p)
                .sum();
            let sq: f64 = agent.plan.iter().map(|p| p * p).sum();
            total += cost + 0.5 * self.config.gamma * sq;
        }
        total
    }

    fn solution(&self, converged: bool) -> Solution {
        let mean = self.mean_plan();
        let active_count = self.agents.iter().filter(|a| a.active).count();
        let objective = objective(&self.graph, &mean, active_count as f64 * self.config.gamma)
            .expect("mean plan has the right dimension");
        Solution {
            plan: mean,
            per_agent_plans: self.agents.iter().map(|a| a.plan.clone()).collect(),
            objective,
            converged,
            iterations: self.iteration,
        }
    }
}

fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&t| t >= 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate, GraphKind};
    use approx::assert_abs_diff_eq;

    fn two_node() -> (DirectedGraph, MassProblem) {
        let g = DirectedGraph::uniform(2, vec![(0, 1)], 1.0, 10.0).unwrap();
        let p = MassProblem::from_net(vec![1.0, -1.0]).unwrap();
        (g, p)
    }

    fn tight_config(gamma: f64) -> SolverConfig {
        SolverConfig {
            gamma,
            qp_tol: 1e-12,
            ..SolverConfig::default()
        }
    }

    #[test]
    fn init_builds_zeroed_agents() {
        let (g, p) = two_node();
        let engine = Engine::new(g, &p, tight_config(0.0)).unwrap();
        assert_eq!(engine.agents().len(), 2);
        for agent in engine.agents() {
            assert!(agent.active);
            assert_eq!(agent.plan, vec![0.0]);
            assert_eq!(agent.alpha, 0.0);
            assert_eq!(agent.s, vec![0.0]);
        }

        let star = generate(GraphKind::Star, 20, 1.0, 100.0).unwrap();
        let mut rho = vec![0.0; 20];
        rho[0] = 1.0;
        rho[19] = -1.0;
        let p = MassProblem::from_net(rho).unwrap();
        let engine = Engine::new(star, &p, SolverConfig::default()).unwrap();
        assert_eq!(engine.agents().len(), 20);
    }

    #[test]
    fn init_rejects_imbalance() {
        // An imbalanced net supply is unrepresentable as a MassProblem, so
        // the rejection happens at problem construction.
        assert!(MassProblem::from_net(vec![1.0, 1.0, -1.0]).is_err());
    }

    #[test]
    fn init_rejects_weak_disconnection() {
        let g = DirectedGraph::uniform(4, vec![(0, 1), (2, 3)], 1.0, 10.0).unwrap();
        let p = MassProblem::from_net(vec![1.0, -1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            Engine::new(g, &p, SolverConfig::default()),
            Err(EngineError::Validation(_))
        ));
    }

    #[test]
    fn gamma_zero_with_infinite_caps_warns() {
        let g = DirectedGraph::uniform(2, vec![(0, 1), (1, 0)], 1.0, f64::INFINITY).unwrap();
        let p = MassProblem::from_net(vec![1.0, -1.0]).unwrap();
        let engine = Engine::new(g, &p, tight_config(0.0)).unwrap();
        assert!(engine.warnings().iter().any(|w| w.contains("gamma = 0")));
    }

    /// Hand trace of the first round on the forced-flow two-node instance,
    /// written out independently of the engine:
    ///
    /// agent 1 minimizes `x² − 0.9x` over [0,10]  → 0.45
    /// agent 2 minimizes `x² − 1.0x` over [0,10]  → 0.5
    /// alpha: 0.45−1 = −0.55 and −0.5+1 = 0.5
    /// s:     ±(0.45−0.5)/2 = ∓0.025
    /// error: (0.45+0.55+0.025) + (0.5+0.5+0.025) = 2.05
    #[test]
    fn first_round_matches_hand_trace() {
        let (g, p) = two_node();
        let mut engine = Engine::new(g, &p, tight_config(0.0)).unwrap();
        let before = engine.agents().to_vec();
        let row = engine.round().unwrap();

        assert_abs_diff_eq!(engine.agents()[0].plan[0], 0.45, epsilon = 1e-10);
        assert_abs_diff_eq!(engine.agents()[1].plan[0], 0.5, epsilon = 1e-10);
        assert_abs_diff_eq!(engine.agents()[0].alpha, -0.55, epsilon = 1e-10);
        assert_abs_diff_eq!(engine.agents()[1].alpha, 0.5, epsilon = 1e-10);
        assert_abs_diff_eq!(engine.agents()[0].s[0], -0.025, epsilon = 1e-10);
        assert_abs_diff_eq!(engine.agents()[1].s[0], 0.025, epsilon = 1e-10);
        assert_abs_diff_eq!(row.error, 2.05, epsilon = 1e-9);

        // The reported residual equals the two-state residual operator.
        let after = engine.agents().to_vec();
        assert_abs_diff_eq!(residual_error(&before, &after), row.error, epsilon = 1e-12);
    }

    #[test]
    fn primal_update_ops_match_hand_values() {
        let (g, p) = two_node();
        let engine = Engine::new(g, &p, tight_config(0.0)).unwrap();
        let mut nbrs = BTreeMap::new();
        nbrs.insert(1usize, vec![0.0]);
        let plan = engine.primal_update(0, &nbrs).unwrap();
        assert_abs_diff_eq!(plan[0], 0.45, epsilon = 1e-10);

        assert_abs_diff_eq!(engine.dual_update_alpha(0, &plan), -0.55, epsilon = 1e-10);

        // alpha arithmetic on plain numbers
        let g2 = DirectedGraph::uniform(2, vec![(0, 1)], 1.0, 10.0).unwrap();
        let p2 = MassProblem::from_net(vec![0.05, -0.05]).unwrap();
        let mut eng2 = Engine::new(g2, &p2, tight_config(0.0)).unwrap();
        // div − rho = 0 −> alpha unchanged
        assert_abs_diff_eq!(eng2.dual_update_alpha(0, &[0.05]), 0.0, epsilon = 1e-15);
        // 0.2 + (div − rho) = 0.2 − 0.05
        eng2.agents[0].alpha = 0.2;
        assert_abs_diff_eq!(eng2.dual_update_alpha(0, &[0.0]), 0.15, epsilon = 1e-15);
    }

    #[test]
    fn dual_update_s_examples() {
        let (g, p) = two_node();
        let engine = Engine::new(g, &p, tight_config(0.0)).unwrap();

        // all plans equal: s unchanged
        let mut same = BTreeMap::new();
        same.insert(0usize, vec![0.7]);
        same.insert(1usize, vec![0.7]);
        assert_eq!(engine.dual_update_s(0, &same).unwrap(), vec![0.0]);

        // plans (1) and (0): agent 1 gains 0.5
        let mut diff = BTreeMap::new();
        diff.insert(0usize, vec![1.0]);
        diff.insert(1usize, vec![0.0]);
        assert_eq!(engine.dual_update_s(0, &diff).unwrap(), vec![0.5]);

        // missing neighbor is a protocol error
        let mut missing = BTreeMap::new();
        missing.insert(0usize, vec![1.0]);
        assert!(matches!(
            engine.dual_update_s(0, &missing),
            Err(EngineError::Protocol { .. })
        ));
    }

    #[test]
    fn four_neighbors_at_offset_shift_s_by_twice_offset() {
        // Hub 0 is connected to nodes 1 and 2 in both directions, so its
        // incident multiset has 4 entries; neighbors all at plan + v shift
        // s by 4 * (−v) / 2 = −2v.
        let arcs = vec![(0, 1), (0, 2), (1, 0), (2, 0)];
        let g = DirectedGraph::uniform(3, arcs, 1.0, 10.0).unwrap();
        let p = MassProblem::from_net(vec![0.0; 3]).unwrap();
        let engine = Engine::new(g, &p, tight_config(0.0)).unwrap();
        let v = 0.25;
        let base = vec![1.0; 4];
        let mut plans = BTreeMap::new();
        plans.insert(0usize, base.clone());
        plans.insert(1usize, base.iter().map(|x| x + v).collect());
        plans.insert(2usize, base.iter().map(|x| x + v).collect());
        let s = engine.dual_update_s(0, &plans).unwrap();
        for a in 0..4 {
            assert_abs_diff_eq!(s[a], -2.0 * v, epsilon = 1e-12);
        }
    }

    #[test]
    fn bipartite_instance_agrees_with_centralized_solver() {
        // Weak connectivity is enough for consensus; source->sink-only
        // instances run with a warning.
        let g = generate(GraphKind::Bipartite, 4, 1.0, 10.0).unwrap();
        let mut costs = g.cost().to_vec();
        costs[0] = 0.4;
        costs[3] = 0.6;
        let g = DirectedGraph::new(4, g.arcs().to_vec(), costs, g.capacity().to_vec()).unwrap();
        let p = MassProblem::new(vec![0.7, 0.3, 0.0, 0.0], vec![0.0, 0.0, 0.5, 0.5]).unwrap();

        let mut engine = Engine::new(g.clone(), &p, tight_config(0.5)).unwrap();
        assert!(engine
            .warnings()
            .iter()
            .any(|w| w.contains("not strongly connected")));
        let (sol, _) = engine.run(&EventSchedule::empty()).unwrap();
        assert!(sol.converged);

        let central = crate::baselines::reference_solution(&g, &p, 0.5).unwrap();
        for (a, b) in sol.plan.iter().zip(&central) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-2);
        }
    }

    #[test]
    fn fixed_point_round_is_stationary() {
        // Stationary state of the two-node instance at gamma = 0:
        // plan (1,1), alpha = (−0.05, 0.05), s = (−0.05, 0.05) satisfies
        // every agent's KKT conditions, so one more round changes nothing.
        let (g, p) = two_node();
        let mut engine = Engine::new(g, &p, tight_config(0.0)).unwrap();
        engine.agents[0].plan = vec![1.0];
        engine.agents[1].plan = vec![1.0];
        engine.agents[0].alpha = -0.05;
        engine.agents[1].alpha = 0.05;
        engine.agents[0].s = vec![-0.05];
        engine.agents[1].s = vec![0.05];
        let row = engine.round().unwrap();
        assert!(row.error <= 1e-9, "error {} at fixed point", row.error);
    }

    #[test]
    fn forced_flow_two_node_converges_for_all_gammas() {
        for gamma in [0.0, 0.1, 1.0] {
            let (g, p) = two_node();
            let mut engine = Engine::new(g, &p, tight_config(gamma)).unwrap();
            let (sol, trace) = engine.run(&EventSchedule::empty()).unwrap();
            assert!(sol.converged, "gamma {gamma}");
            assert!(sol.iterations < 5000);
            assert_abs_diff_eq!(sol.plan[0], 1.0, epsilon = 1e-3);
            assert_eq!(trace.rows.len(), sol.iterations);
            assert!(trace.rows.last().unwrap().error < 1e-4);
        }
    }

    #[test]
    fn uncapacitated_arcs_work_for_positive_gamma() {
        let g = DirectedGraph::uniform(2, vec![(0, 1), (1, 0)], 1.0, f64::INFINITY).unwrap();
        let p = MassProblem::from_net(vec![1.0, -1.0]).unwrap();
        let mut engine = Engine::new(g, &p, tight_config(0.1)).unwrap();
        let (sol, _) = engine.run(&EventSchedule::empty()).unwrap();
        assert!(sol.converged);
        assert_abs_diff_eq!(sol.plan[0], 1.0, epsilon = 1e-3);
        assert_abs_diff_eq!(sol.plan[1], 0.0, epsilon = 1e-3);
    }

    #[test]
    fn reported_error_equals_residual_operator_on_ring() {
        let g = generate(GraphKind::Ring, 5, 1.0, 10.0).unwrap();
        let p = MassProblem::from_net(vec![0.7, -0.4, -0.3, 0.2, -0.2]).unwrap();
        let mut engine = Engine::new(g, &p, tight_config(0.5)).unwrap();
        for _ in 0..7 {
            let before = engine.agents().to_vec();
            let row = engine.round().unwrap();
            let after = engine.agents().to_vec();
            assert_abs_diff_eq!(residual_error(&before, &after), row.error, epsilon = 1e-12);
        }
    }

    #[test]
    fn three_ring_matches_scalar_calculus_optimum() {
        // Feasible family (1+t, t, t); cost strictly increasing in t, so the
        // optimum is (1, 0, 0) for any gamma >= 0.
        let g = DirectedGraph::uniform(3, vec![(0, 1), (1, 2), (2, 0)], 1.0, 10.0).unwrap();
        let p = MassProblem::from_net(vec![1.0, -1.0, 0.0]).unwrap();
        let mut engine = Engine::new(g, &p, tight_config(0.1)).unwrap();
        let (sol, _) = engine.run(&EventSchedule::empty()).unwrap();
        assert!(sol.converged);
        assert_abs_diff_eq!(sol.plan[0], 1.0, epsilon = 1e-2);
        assert_abs_diff_eq!(sol.plan[1], 0.0, epsilon = 1e-2);
        assert_abs_diff_eq!(sol.plan[2], 0.0, epsilon = 1e-2);
        assert!(engine.consensus_gap() <= 1e-2);
    }

    #[test]
    fn box_feasibility_holds_after_every_round() {
        let g = generate(GraphKind::Ring, 5, 1.0, 0.4).unwrap();
        let p = MassProblem::from_net(vec![0.3, -0.3, 0.2, -0.2, 0.0]).unwrap();
        let mut engine = Engine::new(g, &p, tight_config(0.1)).unwrap();
        for _ in 0..50 {
            engine.round().unwrap();
            for agent in engine.agents() {
                for (a, &x) in agent.plan.iter().enumerate() {
                    assert!(x >= 0.0 && x <= engine.capacities()[a] + 1e-15);
                }
            }
        }
    }

    #[test]
    fn residual_error_examples() {
        let (g, p) = two_node();
        let engine = Engine::new(g, &p, tight_config(0.0)).unwrap();
        let before = engine.agents().to_vec();
        assert_eq!(residual_error(&before, &before), 0.0);

        let mut moved = before.clone();
        moved[0].plan = vec![1.0];
        assert_abs_diff_eq!(residual_error(&before, &moved), 1.0);

        let mut alphas = before.clone();
        alphas[0].alpha = 0.5;
        alphas[1].alpha = -0.5;
        assert_abs_diff_eq!(residual_error(&before, &alphas), 1.0);
    }

    #[test]
    fn departure_freezes_agent_bit_identically() {
        let g = generate(GraphKind::Ring, 4, 1.0, 10.0).unwrap();
        let p = MassProblem::from_net(vec![1.0, -1.0, 0.5, -0.5]).unwrap();
        let mut engine = Engine::new(g, &p, tight_config(0.1)).unwrap();
        for _ in 0..5 {
            engine.round().unwrap();
        }
        engine.apply_departure(3, &[1.0, -1.0, 0.0, 0.0]).unwrap();
        let frozen = engine.agents()[3].clone();
        for _ in 0..20 {
            engine.round().unwrap();
        }
        assert_eq!(engine.agents()[3], frozen);
        // capacities on arcs at node 3 are zeroed and plans driven to zero
        for (a, &(from, to)) in engine.graph().arcs().iter().enumerate() {
            if from == 3 || to == 3 {
                assert_eq!(engine.capacities()[a], 0.0);
                for agent in engine.agents() {
                    if agent.active {
                        assert_eq!(agent.plan[a], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn departure_rejections() {
        // Departing the hub of a star isolates the leaves.
        let g = generate(GraphKind::Star, 3, 1.0, 10.0).unwrap();
        let p = MassProblem::from_net(vec![0.0, 1.0, -1.0]).unwrap();
        let mut engine = Engine::new(g, &p, tight_config(0.1)).unwrap();
        let err = engine.apply_departure(0, &[0.0, 1.0, -1.0]).unwrap_err();
        assert!(err.to_string().contains("disconnected"), "{err}");

        // Unbalanced replacement supply.
        let g = generate(GraphKind::Ring, 3, 1.0, 10.0).unwrap();
        let p = MassProblem::from_net(vec![1.0, -1.0, 0.0]).unwrap();
        let mut engine = Engine::new(g, &p, tight_config(0.1)).unwrap();
        assert!(engine.apply_departure(2, &[1.0, -0.5, 0.0]).is_err());
        assert!(engine.apply_departure(7, &[0.0, 0.0, 0.0]).is_err());
        // Supply pinned on the departing node.
        assert!(engine.apply_departure(2, &[1.0, -2.0, 1.0]).is_err());
        // A balanced, zero-at-node replacement is accepted.
        assert!(engine.apply_departure(2, &[1.0, -1.0, 0.0]).is_ok());
        // Double departure is rejected.
        assert!(engine.apply_departure(2, &[1.0, -1.0, 0.0]).is_err());
    }

    #[test]
    fn departure_of_zero_supply_node_keeps_balance() {
        let g = generate(GraphKind::Ring, 4, 1.0, 10.0).unwrap();
        let p = MassProblem::from_net(vec![1.0, -1.0, 0.0, 0.0]).unwrap();
        let mut engine = Engine::new(g, &p, tight_config(0.1)).unwrap();
        engine.apply_departure(3, &[1.0, -1.0, 0.0, 0.0]).unwrap();
        let total: f64 = engine.active_rho().iter().map(|(_, r)| r).sum();
        assert!(total.abs() <= 1e-12);
    }

    #[test]
    fn consensus_gap_examples() {
        let (g, p) = two_node();
        let mut engine = Engine::new(g, &p, tight_config(0.0)).unwrap();
        assert_eq!(engine.consensus_gap(), 0.0);
        engine.agents[0].plan = vec![1.0];
        assert_eq!(engine.consensus_gap(), 1.0);
        assert!(engine.laplacian_gap() > 0.0);
        engine.agents[1].plan = vec![1.0];
        assert_eq!(engine.consensus_gap(), 0.0);
        assert_eq!(engine.laplacian_gap(), 0.0);
    }

    #[test]
    fn traces_are_identical_under_serial_and_parallel_execution() {
        let g = generate(GraphKind::Complete, 6, 1.0, 10.0).unwrap();
        let p = MassProblem::from_net(vec![0.5, -0.5, 0.25, -0.25, 0.3, -0.3]).unwrap();
        let run = |threads: Option<usize>| {
            let mut engine = Engine::new(g.clone(), &p, tight_config(0.1)).unwrap();
            engine.set_threads(threads);
            let mut rows = Vec::new();
            for _ in 0..40 {
                rows.push(engine.round().unwrap());
            }
            (rows, engine.agents().to_vec())
        };
        let (rows1, agents1) = run(Some(1));
        let (rows4, agents4) = run(Some(4));
        let (rows_default, _) = run(None);
        assert_eq!(rows1, rows4);
        assert_eq!(rows1, rows_default);
        for (a, b) in agents1.iter().zip(&agents4) {
            assert_eq!(a.plan, b.plan);
            assert_eq!(a.s, b.s);
            assert!(a.alpha == b.alpha);
        }
    }

    #[test]
    fn run_applies_event_at_exact_iteration() {
        let g = generate(GraphKind::Ring, 4, 1.0, 10.0).unwrap();
        let p = MassProblem::from_net(vec![1.0, -1.0, 0.0, 0.0]).unwrap();
        let mut engine = Engine::new(g, &p, tight_config(0.1)).unwrap();
        let schedule = EventSchedule::new(vec![Event {
            at_iteration: 3,
            kind: EventKind::Depart {
                node: 3,
                new_rho: vec![1.0, -1.0, 0.0, 0.0],
            },
        }])
        .unwrap();
        let (sol, trace) = engine.run(&schedule).unwrap();
        assert!(sol.converged);
        assert!(!engine.agents()[3].active);
        assert!(trace.rows.len() > 3);
    }

    #[test]
    fn schedule_validation() {
        assert!(EventSchedule::new(vec![
            Event {
                at_iteration: 5,
                kind: EventKind::Depart {
                    node: 0,
                    new_rho: vec![0.0]
                },
            },
            Event {
                at_iteration: 5,
                kind: EventKind::Depart {
                    node: 1,
                    new_rho: vec![0.0]
                },
            },
        ])
        .is_err());
        assert!(EventSchedule::new(vec![Event {
            at_iteration: 1,
            kind: EventKind::Depart {
                node: 0,
                new_rho: vec![1.0, 0.0]
            },
        }])
        .is_err());
    }

    #[test]
    fn max_iters_exhaustion_reports_unconverged() {
        let (g, p) = two_node();
        let config = SolverConfig {
            max_iters: 1,
            ..tight_config(0.1)
        };
        let mut engine = Engine::new(g, &p, config).unwrap();
        let (sol, trace) = engine.run(&EventSchedule::empty()).unwrap();
        assert!(!sol.converged);
        assert_eq!(trace.rows.len(), 1);
    }
}
