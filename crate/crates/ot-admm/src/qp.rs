//! Box-constrained strictly convex quadratic programs and the agent
//! subproblem assembly.
//!
//! Solves `min ½ xᵀQx + qᵀx` over `lower <= x <= upper` by cyclic coordinate
//! descent with exact per-coordinate minimization and clamping. The primal
//! update of the distributed solver produces `Q = σI + d dᵀ` with
//! `σ = γ/δ + deg(i) >= 1`, which admits O(dim) sweeps; a dense symmetric
//! Hessian is supported as well.

use std::collections::BTreeMap;

use crate::engine::AgentState;
use crate::error::QpError;
use crate::graph::DirectedGraph;

/// Hessian of a box QP. Both forms must be symmetric positive definite.
#[derive(Debug, Clone)]
pub enum Hessian {
    /// Row-major `dim x dim` symmetric matrix.
    Dense(Vec<f64>),
    /// `sigma * I + d dᵀ` with `sigma > 0`.
    ScaledIdentityPlusRankOne { sigma: f64, d: Vec<f64> },
}

impl Hessian {
    fn dim_matches(&self, dim: usize) -> bool {
        match self {
            Hessian::Dense(m) => m.len() == dim * dim,
            Hessian::ScaledIdentityPlusRankOne { d, .. } => d.len() == dim,
        }
    }

    /// `out = Q x`.
    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        let n = x.len();
        match self {
            Hessian::Dense(m) => {
                for i in 0..n {
                    let row = &m[i * n..(i + 1) * n];
                    out[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
                }
            }
            Hessian::ScaledIdentityPlusRankOne { sigma, d } => {
                let t: f64 = d.iter().zip(x).map(|(a, b)| a * b).sum();
                for i in 0..n {
                    out[i] = sigma * x[i] + d[i] * t;
                }
            }
        }
    }
}

/// A box-constrained strictly convex quadratic program
/// `min ½ xᵀQx + qᵀx  s.t.  lower <= x <= upper`.
///
/// Upper bounds may be `f64::INFINITY`; equal lower/upper pins a coordinate.
#[derive(Debug, Clone)]
pub struct BoxQp {
    pub hessian: Hessian,
    pub linear: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxQp {
    pub fn new(
        hessian: Hessian,
        linear: Vec<f64>,
        lower: Vec<f64>,
        upper: Vec<f64>,
    ) -> Result<Self, QpError> {
        let dim = linear.len();
        if !hessian.dim_matches(dim) {
            return Err(QpError::Dimension {
                expected: dim,
                got: 0,
                what: "hessian",
            });
        }
        if lower.len() != dim || upper.len() != dim {
            return Err(QpError::Dimension {
                expected: dim,
                got: lower.len().min(upper.len()),
                what: "bounds",
            });
        }
        if let Hessian::Dense(m) = &hessian {
            for i in 0..dim {
                for j in (i + 1)..dim {
                    let delta = (m[i * dim + j] - m[j * dim + i]).abs();
                    if delta > 1e-12 * (1.0 + m[i * dim + j].abs()) {
                        return Err(QpError::NotSymmetric { i, j, delta });
                    }
                }
            }
        }
        for idx in 0..dim {
            if lower[idx] > upper[idx] {
                return Err(QpError::EmptyBox {
                    idx,
                    lower: lower[idx],
                    upper: upper[idx],
                });
            }
        }
        Ok(Self {
            hessian,
            linear,
            lower,
            upper,
        })
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    /// Objective value `½ xᵀQx + qᵀx`.
    pub fn value(&self, x: &[f64]) -> f64 {
        let mut qx = vec![0.0; x.len()];
        self.hessian.matvec(x, &mut qx);
        let quad: f64 = x.iter().zip(&qx).map(|(a, b)| a * b).sum();
        let lin: f64 = self.linear.iter().zip(x).map(|(a, b)| a * b).sum();
        0.5 * quad + lin
    }
}

/// Solution of a box QP with its optimality certificate.
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// Projected-gradient fixed-point residual; zero exactly at the unique
    /// minimizer.
    pub kkt_residual: f64,
    /// Coordinate-descent sweeps performed.
    pub iterations: usize,
}

/// Safety cap on coordinate-descent sweeps.
pub const DEFAULT_MAX_SWEEPS: usize = 100_000;

/// Projected-gradient fixed-point residual
/// `‖x − clamp(x − (Qx + q), lower, upper)‖_∞`.
pub fn kkt_residual(qp: &BoxQp, x: &[f64]) -> f64 {
    let n = qp.dim();
    let mut g = vec![0.0; n];
    qp.hessian.matvec(x, &mut g);
    let mut res = 0.0f64;
    for i in 0..n {
        let target = (x[i] - (g[i] + qp.linear[i])).clamp(qp.lower[i], qp.upper[i]);
        res = res.max((x[i] - target).abs());
    }
    res
}

/// Solve from the box-projected origin. See [`solve_box_qp_from`].
pub fn solve_box_qp(qp: &BoxQp, tol: f64) -> Result<QpSolution, QpError> {
    let start = vec![0.0; qp.dim()];
    solve_box_qp_from(qp, tol, &start, DEFAULT_MAX_SWEEPS)
}

/// Cyclic coordinate descent from `start` (clamped into the box), sweeping
/// coordinates in index order until the KKT residual drops below `tol` or
/// `max_sweeps` sweeps have run. Deterministic for fixed inputs.
///
/// On hitting the sweep cap the best iterate is returned inside the error.
pub fn solve_box_qp_from(
    qp: &BoxQp,
    tol: f64,
    start: &[f64],
    max_sweeps: usize,
) -> Result<QpSolution, QpError> {
    if !(tol > 0.0) {
        return Err(QpError::BadTolerance(tol));
    }
    if start.len() != qp.dim() {
        return Err(QpError::Dimension {
            expected: qp.dim(),
            got: start.len(),
            what: "start",
        });
    }
    let n = qp.dim();
    let mut x: Vec<f64> = start
        .iter()
        .enumerate()
        .map(|(i, &v)| v.clamp(qp.lower[i], qp.upper[i]))
        .collect();

    let mut residual = kkt_residual(qp, &x);
    if residual <= tol {
        return Ok(QpSolution {
            x,
            kkt_residual: residual,
            iterations: 0,
        });
    }

    match &qp.hessian {
        Hessian::ScaledIdentityPlusRankOne { sigma, d } => {
            for sweep in 1..=max_sweeps {
                // t = dᵀx, refreshed per sweep to keep drift bounded.
                let mut t: f64 = d.iter().zip(&x).map(|(a, b)| a * b).sum();
                for i in 0..n {
                    let qii = sigma + d[i] * d[i];
                    if qii <= 0.0 || qp.lower[i] == qp.upper[i] {
                        continue;
                    }
                    let g = sigma * x[i] + d[i] * t + qp.linear[i];
                    let next = (x[i] - g / qii).clamp(qp.lower[i], qp.upper[i]);
                    let step = next - x[i];
                    if step != 0.0 {
                        x[i] = next;
                        t += d[i] * step;
                    }
                }
                residual = kkt_residual(qp, &x);
                if residual <= tol {
                    return Ok(QpSolution {
                        x,
                        kkt_residual: residual,
                        iterations: sweep,
                    });
                }
            }
        }
        Hessian::Dense(m) => {
            let mut g = vec![0.0; n];
            for sweep in 1..=max_sweeps {
                qp.hessian.matvec(&x, &mut g);
                for i in 0..n {
                    if qp.lower[i] == qp.upper[i] {
                        continue;
                    }
                    let gi = g[i] + qp.linear[i];
                    let next = (x[i] - gi / m[i * n + i]).clamp(qp.lower[i], qp.upper[i]);
                    let step = next - x[i];
                    if step != 0.0 {
                        x[i] = next;
                        for (k, gk) in g.iter_mut().enumerate() {
                            *gk += m[k * n + i] * step;
                        }
                    }
                }
                residual = kkt_residual(qp, &x);
                if residual <= tol {
                    return Ok(QpSolution {
                        x,
                        kkt_residual: residual,
                        iterations: sweep,
                    });
                }
            }
        }
    }
    Err(QpError::IterationCap {
        sweeps: max_sweeps,
        kkt_residual: residual,
        tol,
        best: QpSolution {
            x,
            kkt_residual: residual,
            iterations: max_sweeps,
        },
    })
}

/// Assemble one agent's primal-update subproblem.
///
/// For agent `i` with local state `(plan, alpha, s)` and net supply `rho_i`,
/// the subproblem over `0 <= x <= capacity` has
///
/// ```text
/// Q = (γ/δ)·I + d_i d_iᵀ + deg(i)·I
/// q = (1/δ)·c⁽ⁱ⁾ + (α − ρ_i)·d_i + s − Σ_j (plan + plan_j)/2
/// ```
///
/// where `d_i` is the incidence row, `c⁽ⁱ⁾` carries the arc cost on arcs
/// leaving `i` and zero elsewhere, and `j` ranges over the other endpoints of
/// all incident arcs (a neighbor connected in both directions appears twice).
/// Constant terms are dropped; the gradient of the update objective is
/// exactly `Qx + q`.
///
/// `neighbor_plans` must cover exactly the incoming and outgoing neighbors.
pub fn assemble_subproblem(
    graph: &DirectedGraph,
    node: usize,
    state: &AgentState,
    neighbor_plans: &BTreeMap<usize, Vec<f64>>,
    gamma: f64,
    delta: f64,
) -> Result<BoxQp, QpError> {
    let m = graph.arc_count();
    let sets = graph.neighbor_sets(node).map_err(|_| QpError::Dimension {
        expected: graph.node_count(),
        got: node,
        what: "node",
    })?;
    let mut required: Vec<usize> = sets.outbound.union(&sets.inbound).copied().collect();
    required.sort_unstable();
    for &j in &required {
        if !neighbor_plans.contains_key(&j) {
            return Err(QpError::MissingNeighbor { node: j });
        }
    }
    for &j in neighbor_plans.keys() {
        if required.binary_search(&j).is_err() {
            return Err(QpError::UnexpectedNeighbor { node: j });
        }
    }
    for plans in neighbor_plans.values() {
        if plans.len() != m {
            return Err(QpError::Dimension {
                expected: m,
                got: plans.len(),
                what: "neighbor plan",
            });
        }
    }
    if state.plan.len() != m || state.s.len() != m {
        return Err(QpError::Dimension {
            expected: m,
            got: state.plan.len(),
            what: "agent state",
        });
    }

    let mut neighbor_sum = vec![0.0; m];
    let mut degree = 0usize;
    for &(from, to) in graph.arcs() {
        let other = if from == node {
            to
        } else if to == node {
            from
        } else {
            continue;
        };
        degree += 1;
        let other_plan = &neighbor_plans[&other];
        for a in 0..m {
            neighbor_sum[a] += other_plan[a];
        }
    }

    let d = graph.incidence_row(node).expect("node checked above");
    let mut cost_out = vec![0.0; m];
    for (a, &(from, _)) in graph.arcs().iter().enumerate() {
        if from == node {
            cost_out[a] = graph.cost()[a];
        }
    }

    assemble_from_parts(AssemblyParts {
        d,
        cost_out: &cost_out,
        delta,
        gamma,
        alpha: state.alpha,
        rho_i: state.local_supply,
        s: &state.s,
        own_plan: &state.plan,
        neighbor_sum: &neighbor_sum,
        degree,
        lower: vec![0.0; m],
        upper: graph.capacity().to_vec(),
    })
}

/// Raw inputs of one primal-update subproblem; see [`assemble_subproblem`]
/// for the formula. The engine feeds this directly with its working
/// capacities and the departure-filtered neighbor sums.
pub(crate) struct AssemblyParts<'a> {
    pub d: Vec<f64>,
    pub cost_out: &'a [f64],
    pub delta: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub rho_i: f64,
    pub s: &'a [f64],
    pub own_plan: &'a [f64],
    pub neighbor_sum: &'a [f64],
    pub degree: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

pub(crate) fn assemble_from_parts(parts: AssemblyParts<'_>) -> Result<BoxQp, QpError> {
    let m = parts.d.len();
    let degree = parts.degree as f64;
    let sigma = parts.gamma / parts.delta + degree;
    let shift = parts.alpha - parts.rho_i;
    let mut q = vec![0.0; m];
    for a in 0..m {
        q[a] = parts.cost_out[a] / parts.delta + shift * parts.d[a] + parts.s[a]
            - 0.5 * (degree * parts.own_plan[a] + parts.neighbor_sum[a]);
    }
    BoxQp::new(
        Hessian::ScaledIdentityPlusRankOne { sigma, d: parts.d },
        q,
        parts.lower,
        parts.upper,
    )
}
