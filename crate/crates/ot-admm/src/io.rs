//! Problem files, trace CSVs, plan files, and the small matrix/vector
//! formats consumed by the Sinkhorn subcommand.
//!
//! Problem files are JSON with 1-based node ids:
//!
//! ```json
//! {
//!   "nodes": 2,
//!   "arcs": [{"from": 1, "to": 2, "cost": 1.0, "capacity": 10.0}],
//!   "rho": [1.0, -1.0],
//!   "config": {"gamma": 0.1, "delta": 10.0, "epsilon": 1e-4},
//!   "events": [{"kind": "depart", "at": 100, "node": 2, "new_rho": [0.0, 0.0]}]
//! }
//! ```
//!
//! Either `rho` or the pair `rho0`/`rhoInf` must be present. Unknown fields
//! are rejected with their position; an arc's `capacity` may be the string
//! `"inf"` or be omitted for an uncapacitated arc. Config fields are
//! optional and default to `gamma = 0`, `delta = 10`, `epsilon = 1e-4`,
//! `max_iters = 50000`, `qp_tol = 1e-8`.
//!
//! Traces are CSV with header `iter,error,consensus_gap,feasibility,objective`,
//! LF line endings, and shortest round-trip float formatting, so identical
//! runs produce byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::baselines::CentralTraceRow;
use crate::engine::{Event, EventKind, EventSchedule, RunTrace, SolverConfig};
use crate::error::IoError;
use crate::graph::DirectedGraph;
use crate::problem::MassProblem;

/// Threshold below which plan entries are dropped from plan files.
pub const PLAN_FLOW_EPSILON: f64 = 1e-9;

/// A parsed problem file.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedProblem {
    pub graph: DirectedGraph,
    pub problem: MassProblem,
    pub config: SolverConfig,
    pub events: EventSchedule,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemRepr {
    nodes: usize,
    arcs: Vec<ArcRepr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rho0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none", rename = "rhoInf")]
    rho_inf: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rho: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<ConfigRepr>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    events: Vec<EventRepr>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArcRepr {
    from: usize,
    to: usize,
    cost: f64,
    #[serde(default = "default_capacity", skip_serializing_if = "is_infinite")]
    capacity: CapacityRepr,
}

fn default_capacity() -> CapacityRepr {
    CapacityRepr::Number(f64::INFINITY)
}

fn is_infinite(c: &CapacityRepr) -> bool {
    matches!(c, CapacityRepr::Number(v) if v.is_infinite())
}

/// Arc capacity: a JSON number, or the string `"inf"` for an uncapacitated
/// arc (JSON itself has no infinity literal).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum CapacityRepr {
    Number(f64),
    Text(String),
}

impl CapacityRepr {
    fn value(&self, idx: usize) -> Result<f64, IoError> {
        match self {
            CapacityRepr::Number(v) => Ok(*v),
            CapacityRepr::Text(s) => match s.trim().to_ascii_lowercase().as_str() {
                "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
                other => Err(IoError::Schema(format!(
                    "arcs[{idx}].capacity: expected a number or \"inf\", got {other:?}"
                ))),
            },
        }
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigRepr {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max_iters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    qp_tol: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "kind", rename_all = "lowercase")]
enum EventRepr {
    Depart {
        at: usize,
        node: usize,
        new_rho: Vec<f64>,
    },
}

/// Parse a problem file from a string.
pub fn parse_problem_str(text: &str) -> Result<ParsedProblem, IoError> {
    let repr: ProblemRepr = serde_json::from_str(text).map_err(|e| IoError::Json {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let n = repr.nodes;
    if n == 0 {
        return Err(IoError::Schema("nodes must be at least 1".to_string()));
    }

    let mut arcs = Vec::with_capacity(repr.arcs.len());
    let mut cost = Vec::with_capacity(repr.arcs.len());
    let mut capacity = Vec::with_capacity(repr.arcs.len());
    for (idx, arc) in repr.arcs.iter().enumerate() {
        let from = to_zero_based(arc.from, n, &format!("arcs[{idx}].from"))?;
        let to = to_zero_based(arc.to, n, &format!("arcs[{idx}].to"))?;
        arcs.push((from, to));
        cost.push(arc.cost);
        capacity.push(arc.capacity.value(idx)?);
    }
    let graph =
        DirectedGraph::new(n, arcs, cost, capacity).map_err(|e| IoError::Schema(e.to_string()))?;

    let problem = match (&repr.rho, &repr.rho0, &repr.rho_inf) {
        (Some(rho), None, None) => {
            check_len(rho.len(), n, "rho")?;
            MassProblem::from_net(rho.clone()).map_err(|e| IoError::Schema(format!("rho: {e}")))?
        }
        (None, Some(rho0), Some(rho_inf)) => {
            check_len(rho0.len(), n, "rho0")?;
            check_len(rho_inf.len(), n, "rhoInf")?;
            MassProblem::new(rho0.clone(), rho_inf.clone())
                .map_err(|e| IoError::Schema(format!("rho0/rhoInf: {e}")))?
        }
        (Some(_), _, _) => {
            return Err(IoError::Schema(
                "give either rho or the rho0/rhoInf pair, not both".to_string(),
            ))
        }
        (None, None, None) => {
            return Err(IoError::Schema(
                "missing rho (or rho0 and rhoInf)".to_string(),
            ))
        }
        (None, _, _) => {
            return Err(IoError::Schema(
                "rho0 and rhoInf must be given together".to_string(),
            ))
        }
    };

    let defaults = SolverConfig::default();
    let cfg = repr.config.unwrap_or_default();
    let config = SolverConfig {
        gamma: cfg.gamma.unwrap_or(defaults.gamma),
        delta: cfg.delta.unwrap_or(defaults.delta),
        epsilon: cfg.epsilon.unwrap_or(defaults.epsilon),
        max_iters: cfg.max_iters.unwrap_or(defaults.max_iters),
        qp_tol: cfg.qp_tol.unwrap_or(defaults.qp_tol),
    };
    config
        .validate()
        .map_err(|e| IoError::Schema(e.to_string()))?;

    let mut events = Vec::new();
    for (idx, ev) in repr.events.iter().enumerate() {
        let EventRepr::Depart { at, node, new_rho } = ev;
        let node = to_zero_based(*node, n, &format!("events[{idx}].node"))?;
        check_len(new_rho.len(), n, &format!("events[{idx}].new_rho"))?;
        events.push(Event {
            at_iteration: *at,
            kind: EventKind::Depart {
                node,
                new_rho: new_rho.clone(),
            },
        });
    }
    let events = EventSchedule::new(events).map_err(|e| IoError::Schema(e.to_string()))?;

    Ok(ParsedProblem {
        graph,
        problem,
        config,
        events,
    })
}

/// Parse a problem file from disk.
pub fn parse_problem(path: &Path) -> Result<ParsedProblem, IoError> {
    let text = std::fs::read_to_string(path).map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })?;
    parse_problem_str(&text)
}

/// Serialize a problem back to the file format; round-trips through
/// [`parse_problem_str`] to an equal value.
pub fn write_problem_str(parsed: &ParsedProblem) -> String {
    let graph = &parsed.graph;
    let arcs = graph
        .arcs()
        .iter()
        .enumerate()
        .map(|(idx, &(from, to))| ArcRepr {
            from: from + 1,
            to: to + 1,
            cost: graph.cost()[idx],
            capacity: CapacityRepr::Number(graph.capacity()[idx]),
        })
        .collect();
    let events = parsed
        .events
        .events()
        .iter()
        .map(|ev| {
            let EventKind::Depart { node, new_rho } = &ev.kind;
            EventRepr::Depart {
                at: ev.at_iteration,
                node: node + 1,
                new_rho: new_rho.clone(),
            }
        })
        .collect();
    let repr = ProblemRepr {
        nodes: graph.node_count(),
        arcs,
        rho0: Some(parsed.problem.rho0().to_vec()),
        rho_inf: Some(parsed.problem.rho_inf().to_vec()),
        rho: None,
        config: Some(ConfigRepr {
            gamma: Some(parsed.config.gamma),
            delta: Some(parsed.config.delta),
            epsilon: Some(parsed.config.epsilon),
            max_iters: Some(parsed.config.max_iters),
            qp_tol: Some(parsed.config.qp_tol),
        }),
        events,
    };
    let mut out = serde_json::to_string_pretty(&repr).expect("problem repr serializes");
    out.push('\n');
    out
}

fn to_zero_based(id: usize, n: usize, what: &str) -> Result<usize, IoError> {
    if id == 0 || id > n {
        return Err(IoError::Schema(format!(
            "{what}: node id {id} outside 1..={n}"
        )));
    }
    Ok(id - 1)
}

fn check_len(got: usize, want: usize, what: &str) -> Result<(), IoError> {
    if got != want {
        return Err(IoError::Schema(format!(
            "{what}: expected {want} entries, got {got}"
        )));
    }
    Ok(())
}

/// Render a distributed run trace as CSV.
pub fn write_trace_str(trace: &RunTrace) -> String {
    let mut out = String::from("iter,error,consensus_gap,feasibility,objective\n");
    for row in &trace.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            row.iter, row.error, row.consensus_gap, row.feasibility, row.objective
        );
    }
    out
}

/// Render a centralized run trace as CSV with the same header; the
/// consensus column carries the gap between the two plan copies.
pub fn write_central_trace_str(rows: &[CentralTraceRow]) -> String {
    let mut out = String::from("iter,error,consensus_gap,feasibility,objective\n");
    for row in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            row.iter, row.error, row.copy_gap, row.feasibility, row.objective
        );
    }
    out
}

/// Metadata block of a plan file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PlanMeta {
    pub gamma: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub converged: bool,
    pub iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PlanFileRepr {
    metadata: PlanMeta,
    flows: Vec<FlowRepr>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FlowRepr {
    from: usize,
    to: usize,
    flow: f64,
}

/// Render a plan file: metadata plus all flows above [`PLAN_FLOW_EPSILON`],
/// with 1-based node ids.
pub fn write_plan_str(graph: &DirectedGraph, plan: &[f64], meta: &PlanMeta) -> String {
    let flows = graph
        .arcs()
        .iter()
        .zip(plan)
        .filter(|(_, &flow)| flow.abs() > PLAN_FLOW_EPSILON)
        .map(|(&(from, to), &flow)| FlowRepr {
            from: from + 1,
            to: to + 1,
            flow,
        })
        .collect();
    let repr = PlanFileRepr {
        metadata: meta.clone(),
        flows,
    };
    let mut out = serde_json::to_string_pretty(&repr).expect("plan repr serializes");
    out.push('\n');
    out
}

/// Write a string to disk.
pub fn write_file(path: &Path, contents: &str) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| IoError::File {
            path: parent.display().to_string(),
            source,
        })?;
    }
    std::fs::write(path, contents).map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })
}

/// Parse a dense matrix from comma-separated rows, one row per line.
pub fn parse_matrix_str(text: &str) -> Result<DMatrix<f64>, IoError> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let row = parse_float_list(trimmed, lineno + 1)?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(IoError::Csv {
                    line: lineno + 1,
                    message: format!("expected {} columns, got {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(IoError::Csv {
            line: 1,
            message: "empty matrix".to_string(),
        });
    }
    let nrows = rows.len();
    let ncols = rows[0].len();
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Parse a vector: values separated by commas and/or newlines.
pub fn parse_vector_str(text: &str) -> Result<Vec<f64>, IoError> {
    let mut values = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        values.extend(parse_float_list(trimmed, lineno + 1)?);
    }
    if values.is_empty() {
        return Err(IoError::Csv {
            line: 1,
            message: "empty vector".to_string(),
        });
    }
    Ok(values)
}

fn parse_float_list(line: &str, lineno: usize) -> Result<Vec<f64>, IoError> {
    line.split(',')
        .map(|tok| {
            let tok = tok.trim();
            tok.parse::<f64>().map_err(|_| IoError::Csv {
                line: lineno,
                message: format!("not a number: {tok:?}"),
            })
        })
        .collect()
}

/// Render a matrix as comma-separated rows.
pub fn write_matrix_str(matrix: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for i in 0..matrix.nrows() {
        let row: Vec<String> = (0..matrix.ncols())
            .map(|j| format!("{}", matrix[(i, j)]))
            .collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

/// Read a file into a string.
pub fn read_file(path: &Path) -> Result<String, IoError> {
    std::fs::read_to_string(path).map_err(|source| IoError::File {
        path: path.display().to_string(),
        source,
    })
}
