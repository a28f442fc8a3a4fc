//! Distributed optimal transport on directed graphs.
//!
//! Solves the quadratically regularized minimum-cost flow problem with a
//! consensus-ADMM scheme in which every node is an agent holding its own
//! copy of the arc-flow vector and talking only to its graph neighbors. The
//! crate also ships a centralized ADMM counterpart, a Sinkhorn baseline for
//! bipartite instances, problem-file I/O, and the experiment drivers behind
//! the `ot-admm` command-line tool.
//!
//! Modules follow the pipeline:
//!
//! * [`graph`] — arc-indexed directed graphs, divergence and incidence
//!   operators, topology generators;
//! * [`problem`] — mass distributions and instance validation;
//! * [`qp`] — the per-agent box QP and its coordinate-descent solver;
//! * [`engine`] — the synchronous multi-agent round loop with departure
//!   events;
//! * [`baselines`] / [`sinkhorn`] — centralized ADMM, reference oracle,
//!   entropic OT;
//! * [`io`] — problem files, trace CSVs, plan files;
//! * [`experiments`] — the convergence, comparison, and robustness drivers.
//!
//! Moving one unit of mass across a single arc:
//!
//! ```
//! use ot_admm::{DirectedGraph, Engine, EventSchedule, MassProblem, SolverConfig};
//!
//! let graph = DirectedGraph::uniform(2, vec![(0, 1)], 1.0, 10.0)?;
//! let problem = MassProblem::from_net(vec![1.0, -1.0])?;
//! let config = SolverConfig { gamma: 0.1, ..SolverConfig::default() };
//!
//! let mut engine = Engine::new(graph, &problem, config)?;
//! let (solution, trace) = engine.run(&EventSchedule::empty())?;
//! assert!(solution.converged);
//! assert!((solution.plan[0] - 1.0).abs() < 1e-3);
//! assert_eq!(trace.rows.len(), solution.iterations);
//! # Ok::<(), Box<dyn std::error::Error>>(())
//! ```

pub mod baselines;
pub mod engine;
pub mod error;
pub mod experiments;
pub mod graph;
pub mod io;
pub mod problem;
pub mod qp;
pub mod sinkhorn;

pub use engine::{Engine, EventSchedule, RunTrace, Solution, SolverConfig};
pub use graph::{generate, DirectedGraph, GraphKind};
pub use problem::MassProblem;
