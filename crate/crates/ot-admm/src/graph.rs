//! Directed-graph data model for transport problems: arc lists with costs and
//! capacities, divergence/incidence operators, connectivity checks, and
//! generators for the standard test topologies.
//!
//! Node ids are 0-based everywhere in the library; file formats and reports
//! use 1-based ids (see the `io` module).

use std::collections::BTreeSet;

use crate::error::GraphError;

/// A directed graph with per-arc transport cost and capacity.
///
/// The arc list fixes a stable arc index `0..arc_count()` that every plan
/// vector follows. Self-loops and duplicate `(from, to)` pairs are rejected;
/// capacities may be `f64::INFINITY` for uncapacitated arcs.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectedGraph {
    node_count: usize,
    arcs: Vec<(usize, usize)>,
    cost: Vec<f64>,
    capacity: Vec<f64>,
}

/// Incoming/outgoing neighbor sets of one node.
///
/// `degree` counts incident arcs, i.e. `|N⁺| + |N⁻|`; a node connected to a
/// neighbor in both directions counts it twice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborSets {
    pub inbound: BTreeSet<usize>,
    pub outbound: BTreeSet<usize>,
    pub degree: usize,
}

/// Result of [`DirectedGraph::connectivity`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Connectivity {
    pub strong: bool,
    pub weak: bool,
}

/// Test topologies from the experiment suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphKind {
    Line,
    Ring,
    Star,
    Complete,
    Bipartite,
}

impl std::str::FromStr for GraphKind {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, GraphError> {
        match s.to_ascii_lowercase().as_str() {
            "line" => Ok(GraphKind::Line),
            "ring" => Ok(GraphKind::Ring),
            "star" => Ok(GraphKind::Star),
            "complete" => Ok(GraphKind::Complete),
            "bipartite" => Ok(GraphKind::Bipartite),
            other => Err(GraphError::UnknownKind(other.to_string())),
        }
    }
}

impl std::fmt::Display for GraphKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            GraphKind::Line => "line",
            GraphKind::Ring => "ring",
            GraphKind::Star => "star",
            GraphKind::Complete => "complete",
            GraphKind::Bipartite => "bipartite",
        };
        f.write_str(s)
    }
}

impl DirectedGraph {
    /// Build a graph from an arc list with per-arc costs and capacities.
    ///
    /// Rejects self-loops, out-of-range endpoints, duplicate arcs, negative
    /// costs, and nonpositive capacities.
    pub fn new(
        node_count: usize,
        arcs: Vec<(usize, usize)>,
        cost: Vec<f64>,
        capacity: Vec<f64>,
    ) -> Result<Self, GraphError> {
        if node_count == 0 {
            return Err(GraphError::NoNodes);
        }
        if cost.len() != arcs.len() || capacity.len() != arcs.len() {
            return Err(GraphError::Dimension {
                expected: arcs.len(),
                got: cost.len().min(capacity.len()),
                what: "per-arc cost/capacity vectors",
            });
        }
        let mut seen = BTreeSet::new();
        for (idx, &(from, to)) in arcs.iter().enumerate() {
            if from >= node_count || to >= node_count {
                return Err(GraphError::ArcOutOfRange {
                    idx,
                    from,
                    to,
                    node_count,
                });
            }
            if from == to {
                return Err(GraphError::SelfLoop { idx, node: from });
            }
            if !seen.insert((from, to)) {
                return Err(GraphError::DuplicateArc { idx, from, to });
            }
        }
        for (idx, &c) in cost.iter().enumerate() {
            if !c.is_finite() || c < 0.0 {
                return Err(GraphError::BadCost { idx, value: c });
            }
        }
        for (idx, &u) in capacity.iter().enumerate() {
            if u.is_nan() || u <= 0.0 {
                return Err(GraphError::BadCapacity { idx, value: u });
            }
        }
        Ok(Self {
            node_count,
            arcs,
            cost,
            capacity,
        })
    }

    /// Same arc list with uniform cost and capacity on every arc.
    pub fn uniform(
        node_count: usize,
        arcs: Vec<(usize, usize)>,
        cost: f64,
        capacity: f64,
    ) -> Result<Self, GraphError> {
        let m = arcs.len();
        Self::new(node_count, arcs, vec![cost; m], vec![capacity; m])
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn arc_count(&self) -> usize {
        self.arcs.len()
    }

    pub fn arcs(&self) -> &[(usize, usize)] {
        &self.arcs
    }

    pub fn cost(&self) -> &[f64] {
        &self.cost
    }

    pub fn capacity(&self) -> &[f64] {
        &self.capacity
    }

    /// Neighbor sets of `node`.
    pub fn neighbor_sets(&self, node: usize) -> Result<NeighborSets, GraphError> {
        self.check_node(node)?;
        let mut inbound = BTreeSet::new();
        let mut outbound = BTreeSet::new();
        let mut degree = 0usize;
        for &(from, to) in &self.arcs {
            if from == node {
                outbound.insert(to);
                degree += 1;
            }
            if to == node {
                inbound.insert(from);
                degree += 1;
            }
        }
        Ok(NeighborSets {
            inbound,
            outbound,
            degree,
        })
    }

    /// Arc indices leaving each node, in arc order.
    pub fn out_arcs(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.node_count];
        for (a, &(from, _)) in self.arcs.iter().enumerate() {
            out[from].push(a);
        }
        out
    }

    /// Arc indices entering each node, in arc order.
    pub fn in_arcs(&self) -> Vec<Vec<usize>> {
        let mut inc = vec![Vec::new(); self.node_count];
        for (a, &(_, to)) in self.arcs.iter().enumerate() {
            inc[to].push(a);
        }
        inc
    }

    /// Divergence of `plan`: component `i` is total outflow minus total
    /// inflow at node `i`. Components sum to zero up to roundoff.
    pub fn divergence(&self, plan: &[f64]) -> Result<Vec<f64>, GraphError> {
        if plan.len() != self.arcs.len() {
            return Err(GraphError::Dimension {
                expected: self.arcs.len(),
                got: plan.len(),
                what: "plan vector",
            });
        }
        let mut div = vec![0.0; self.node_count];
        for (a, &(from, to)) in self.arcs.iter().enumerate() {
            div[from] += plan[a];
            div[to] -= plan[a];
        }
        Ok(div)
    }

    /// Divergence at a single node: the dot product of its incidence row
    /// with `plan`. Summation order matches arc order for determinism.
    pub fn divergence_at(&self, node: usize, plan: &[f64]) -> f64 {
        let mut d = 0.0;
        for (a, &(from, to)) in self.arcs.iter().enumerate() {
            if from == node {
                d += plan[a];
            } else if to == node {
                d -= plan[a];
            }
        }
        d
    }

    /// Row of the node-arc incidence operator for `node`: `+1` on arcs
    /// leaving it, `-1` on arcs entering it, `0` elsewhere. Satisfies
    /// `divergence(plan)[node] == row · plan`.
    pub fn incidence_row(&self, node: usize) -> Result<Vec<f64>, GraphError> {
        self.check_node(node)?;
        let mut row = vec![0.0; self.arcs.len()];
        for (a, &(from, to)) in self.arcs.iter().enumerate() {
            if from == node {
                row[a] = 1.0;
            } else if to == node {
                row[a] = -1.0;
            }
        }
        Ok(row)
    }

    /// Strong and weak connectivity of the graph.
    pub fn connectivity(&self) -> Connectivity {
        let fwd = self.reachable(0, false);
        let bwd = self.reachable(0, true);
        let strong = fwd.iter().all(|&r| r) && bwd.iter().all(|&r| r);
        let weak = self.weakly_connected_over(|_| true);
        Connectivity { strong, weak }
    }

    /// Weak connectivity of the subgraph induced by nodes with `keep(node)`,
    /// using only arcs whose endpoints are both kept.
    pub fn weakly_connected_over<F: Fn(usize) -> bool>(&self, keep: F) -> bool {
        let kept: Vec<usize> = (0..self.node_count).filter(|&i| keep(i)).collect();
        let Some(&start) = kept.first() else {
            return true;
        };
        let mut adj = vec![Vec::new(); self.node_count];
        for &(from, to) in &self.arcs {
            if keep(from) && keep(to) {
                adj[from].push(to);
                adj[to].push(from);
            }
        }
        let mut seen = vec![false; self.node_count];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        kept.iter().all(|&v| seen[v])
    }

    fn reachable(&self, start: usize, reversed: bool) -> Vec<bool> {
        let mut adj = vec![Vec::new(); self.node_count];
        for &(from, to) in &self.arcs {
            if reversed {
                adj[to].push(from);
            } else {
                adj[from].push(to);
            }
        }
        let mut seen = vec![false; self.node_count];
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen
    }

    fn check_node(&self, node: usize) -> Result<(), GraphError> {
        if node >= self.node_count {
            return Err(GraphError::NodeOutOfRange {
                node,
                node_count: self.node_count,
            });
        }
        Ok(())
    }
}

/// Maximum over nodes of `‖deg(i)·π^i − Σ_{incident arcs} π^j‖_∞`, where the
/// sum runs over the other endpoints of arcs incident to `i`, counted with
/// multiplicity. Zero exactly when the plan family lies in the kernel of the
/// arc-Laplacian, which on a weakly connected graph means all plans agree.
pub fn laplacian_kernel_gap(graph: &DirectedGraph, plans: &[Vec<f64>]) -> Result<f64, GraphError> {
    laplacian_kernel_gap_over(graph, plans, |_| true)
}

/// [`laplacian_kernel_gap`] restricted to nodes with `keep(node)`, over arcs
/// whose endpoints are both kept.
pub fn laplacian_kernel_gap_over<F: Fn(usize) -> bool>(
    graph: &DirectedGraph,
    plans: &[Vec<f64>],
    keep: F,
) -> Result<f64, GraphError> {
    if plans.len() != graph.node_count() {
        return Err(GraphError::Dimension {
            expected: graph.node_count(),
            got: plans.len(),
            what: "one plan per node",
        });
    }
    let m = graph.arc_count();
    for plan in plans {
        if plan.len() != m {
            return Err(GraphError::Dimension {
                expected: m,
                got: plan.len(),
                what: "plan vector",
            });
        }
    }
    // deg(i)·π^i − Σ_j π^j accumulated as per-arc differences, so equal
    // plans give an exact zero.
    let mut residual: Vec<Vec<f64>> = (0..graph.node_count()).map(|_| vec![0.0; m]).collect();
    for &(from, to) in graph.arcs() {
        if keep(from) && keep(to) {
            for a in 0..m {
                residual[from][a] += plans[from][a] - plans[to][a];
                residual[to][a] += plans[to][a] - plans[from][a];
            }
        }
    }
    let mut gap = 0.0f64;
    for i in 0..graph.node_count() {
        if !keep(i) {
            continue;
        }
        for a in 0..m {
            gap = gap.max(residual[i][a].abs());
        }
    }
    Ok(gap)
}

/// Generate one of the standard test topologies with uniform cost and
/// capacity.
///
/// Line, star, and complete graphs realize each undirected edge as two
/// opposite arcs so the result is strongly connected; the ring is emitted
/// bidirected as well (forward cycle first, then the reverse cycle). The
/// bipartite graph has `n/2` sources, `n/2` sinks, and source→sink arcs
/// only, so it is weakly but not strongly connected.
pub fn generate(
    kind: GraphKind,
    n: usize,
    cost_value: f64,
    capacity_value: f64,
) -> Result<DirectedGraph, GraphError> {
    if n < 2 {
        return Err(GraphError::TooSmall {
            kind: kind.to_string(),
            n,
            min: 2,
        });
    }
    let mut arcs = Vec::new();
    match kind {
        GraphKind::Line => {
            for i in 0..n - 1 {
                arcs.push((i, i + 1));
            }
            for i in 0..n - 1 {
                arcs.push((i + 1, i));
            }
        }
        GraphKind::Ring => {
            if n == 2 {
                // the forward and reverse cycles coincide
                arcs.push((0, 1));
                arcs.push((1, 0));
            } else {
                for i in 0..n {
                    arcs.push((i, (i + 1) % n));
                }
                for i in 0..n {
                    arcs.push(((i + 1) % n, i));
                }
            }
        }
        GraphKind::Star => {
            for i in 1..n {
                arcs.push((0, i));
            }
            for i in 1..n {
                arcs.push((i, 0));
            }
        }
        GraphKind::Complete => {
            for i in 0..n {
                for j in 0..n {
                    if i < j {
                        arcs.push((i, j));
                    }
                }
            }
            for i in 0..n {
                for j in 0..n {
                    if i < j {
                        arcs.push((j, i));
                    }
                }
            }
        }
        GraphKind::Bipartite => {
            if n % 2 != 0 {
                return Err(GraphError::OddBipartite { n });
            }
            let half = n / 2;
            for s in 0..half {
                for t in half..n {
                    arcs.push((s, t));
                }
            }
        }
    }
    DirectedGraph::uniform(n, arcs, cost_value, capacity_value)
}
