//! Mass distributions and instance validation.

use crate::error::ProblemError;
use crate::graph::DirectedGraph;

/// Source and target mass distributions on the nodes, with the derived net
/// supply `rho = rho0 - rhoInf`.
///
/// Both distributions must be entrywise nonnegative with equal totals; they
/// need not be normalized to sum 1, so unnormalized instances like
/// `rho = (2, -3, -2, 1, 1, 1)` are representable.
#[derive(Debug, Clone, PartialEq)]
pub struct MassProblem {
    rho0: Vec<f64>,
    rho_inf: Vec<f64>,
    rho: Vec<f64>,
}

/// Absolute slack allowed on the mass balance `sum(rho0) == sum(rhoInf)`.
pub const BALANCE_TOL: f64 = 1e-12;

impl MassProblem {
    /// Build from explicit source and target distributions.
    pub fn new(rho0: Vec<f64>, rho_inf: Vec<f64>) -> Result<Self, ProblemError> {
        if rho0.len() != rho_inf.len() {
            return Err(ProblemError::LengthMismatch {
                len0: rho0.len(),
                len_inf: rho_inf.len(),
            });
        }
        for (which, v) in [("rho0", &rho0), ("rhoInf", &rho_inf)] {
            for (node, &x) in v.iter().enumerate() {
                if !x.is_finite() {
                    return Err(ProblemError::NonFinite { node });
                }
                if x < 0.0 {
                    return Err(ProblemError::NegativeMass {
                        which,
                        node,
                        value: x,
                    });
                }
            }
        }
        let sum0: f64 = rho0.iter().sum();
        let sum_inf: f64 = rho_inf.iter().sum();
        if (sum0 - sum_inf).abs() > BALANCE_TOL * (1.0 + sum0.abs().max(sum_inf.abs())) {
            return Err(ProblemError::Unbalanced { sum0, sum_inf });
        }
        let rho = rho0.iter().zip(&rho_inf).map(|(a, b)| a - b).collect();
        Ok(Self { rho0, rho_inf, rho })
    }

    /// Build from a net supply vector, splitting it into its positive and
    /// negative parts.
    pub fn from_net(rho: Vec<f64>) -> Result<Self, ProblemError> {
        for (node, &x) in rho.iter().enumerate() {
            if !x.is_finite() {
                return Err(ProblemError::NonFinite { node });
            }
        }
        let sum: f64 = rho.iter().sum();
        let scale: f64 = 1.0 + rho.iter().map(|x| x.abs()).sum::<f64>();
        if sum.abs() > BALANCE_TOL * scale {
            return Err(ProblemError::NetNotZero { sum });
        }
        let rho0 = rho.iter().map(|&x| x.max(0.0)).collect();
        let rho_inf = rho.iter().map(|&x| (-x).max(0.0)).collect();
        Ok(Self { rho0, rho_inf, rho })
    }

    pub fn rho0(&self) -> &[f64] {
        &self.rho0
    }

    pub fn rho_inf(&self) -> &[f64] {
        &self.rho_inf
    }

    /// Net supply `rho0 - rhoInf`; sums to zero.
    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn node_count(&self) -> usize {
        self.rho.len()
    }
}

/// Severity of a validation finding. `Error` findings make an instance
/// unusable for the distributed solver; warnings do not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Error,
    Warning,
}

/// One structural problem reported by [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Finding {
    pub severity: Severity,
    pub message: String,
}

impl Finding {
    fn error(message: impl Into<String>) -> Self {
        Finding {
            severity: Severity::Error,
            message: message.into(),
        }
    }

    fn warning(message: impl Into<String>) -> Self {
        Finding {
            severity: Severity::Warning,
            message: message.into(),
        }
    }
}

/// Screen an instance for structural defects.
///
/// Returns findings instead of failing so callers can decide; strong
/// disconnection is only a warning because the bipartite comparison
/// instances are run despite it, while weak disconnection is an error
/// because consensus is then unattainable.
pub fn validate(graph: &DirectedGraph, problem: &MassProblem) -> Vec<Finding> {
    let mut findings = Vec::new();

    if problem.node_count() != graph.node_count() {
        findings.push(Finding::error(format!(
            "supply vector has {} entries but the graph has {} nodes",
            problem.node_count(),
            graph.node_count()
        )));
        return findings;
    }

    let sum: f64 = problem.rho().iter().sum();
    let scale: f64 = 1.0 + problem.rho().iter().map(|x| x.abs()).sum::<f64>();
    if sum.abs() > BALANCE_TOL * scale {
        findings.push(Finding::error(format!(
            "supply-demand imbalance: sum(rho) = {sum}"
        )));
    }

    for (idx, &c) in graph.cost().iter().enumerate() {
        if c < 0.0 {
            findings.push(Finding::error(format!("negative cost {c} on arc {idx}")));
        }
    }
    for (idx, &u) in graph.capacity().iter().enumerate() {
        if u <= 0.0 {
            findings.push(Finding::error(format!(
                "nonpositive capacity {u} on arc {idx}"
            )));
        }
    }

    let conn = graph.connectivity();
    if !conn.weak {
        findings.push(Finding::error(
            "graph is not weakly connected; consensus across agents is unattainable",
        ));
    } else if !conn.strong {
        findings.push(Finding::warning("not strongly connected (warning)"));
    }

    findings
}

/// True when no `Error`-severity finding is present.
pub fn is_runnable(findings: &[Finding]) -> bool {
    findings.iter().all(|f| f.severity != Severity::Error)
}
