//! Property tests for the operator identities and the parser's totality.

use proptest::prelude::*;

use ot_admm::engine::SolverConfig;
use ot_admm::graph::{laplacian_kernel_gap, DirectedGraph};
use ot_admm::io::{parse_problem_str, write_problem_str, ParsedProblem};
use ot_admm::problem::MassProblem;

/// Strategy: a weakly connected digraph with up to `max_nodes` nodes (random
/// spanning tree plus extra arcs) and a plan vector for it.
fn connected_graph(max_nodes: usize) -> impl Strategy<Value = DirectedGraph> {
    (2..=max_nodes, any::<u64>()).prop_map(|(n, seed)| {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut arcs = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for v in 1..n {
            let u = rng.gen_range(0..v);
            let arc = if rng.gen::<bool>() { (u, v) } else { (v, u) };
            arcs.push(arc);
            seen.insert(arc);
        }
        for _ in 0..n {
            let u = rng.gen_range(0..n);
            let v = rng.gen_range(0..n);
            if u != v && seen.insert((u, v)) {
                arcs.push((u, v));
            }
        }
        let m = arcs.len();
        let costs: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..2.0)).collect();
        DirectedGraph::new(n, arcs, costs, vec![10.0; m]).unwrap()
    })
}

fn plan_for(graph: &DirectedGraph, seed: u64) -> Vec<f64> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..graph.arc_count())
        .map(|_| rng.gen_range(-3.0..3.0))
        .collect()
}

proptest! {
    /// Every arc contributes +1 at its tail and -1 at its head, so the
    /// divergence components always sum to zero.
    #[test]
    fn divergence_components_sum_to_zero(graph in connected_graph(8), seed in any::<u64>()) {
        let plan = plan_for(&graph, seed);
        let div = graph.divergence(&plan).unwrap();
        let total: f64 = div.iter().sum();
        prop_assert!(total.abs() <= 1e-9 * (1.0 + plan.iter().map(|x| x.abs()).sum::<f64>()));
    }

    /// The divergence operator equals the stacked incidence rows.
    #[test]
    fn divergence_matches_incidence_rows(graph in connected_graph(8), seed in any::<u64>()) {
        let plan = plan_for(&graph, seed);
        let div = graph.divergence(&plan).unwrap();
        for node in 0..graph.node_count() {
            let row = graph.incidence_row(node).unwrap();
            let dot: f64 = row.iter().zip(&plan).map(|(r, p)| r * p).sum();
            prop_assert!((dot - div[node]).abs() <= 1e-12);
        }
    }

    /// On a weakly connected graph the arc-Laplacian kernel residual is zero
    /// exactly when all per-node plans coincide.
    #[test]
    fn kernel_gap_zero_iff_plans_equal(
        graph in connected_graph(6),
        seed in any::<u64>(),
        node_pick in any::<u64>(),
        bump in 0.01f64..5.0,
    ) {
        let base = plan_for(&graph, seed);
        let equal: Vec<Vec<f64>> = vec![base.clone(); graph.node_count()];
        prop_assert_eq!(laplacian_kernel_gap(&graph, &equal).unwrap(), 0.0);

        if graph.arc_count() > 0 {
            let mut perturbed = equal;
            let node = (node_pick as usize) % graph.node_count();
            perturbed[node][0] += bump;
            prop_assert!(laplacian_kernel_gap(&graph, &perturbed).unwrap() > 0.0);

            // fully random per-node plans: zero gap forces equality
            let random: Vec<Vec<f64>> = (0..graph.node_count())
                .map(|i| plan_for(&graph, seed.wrapping_add(i as u64 + 1)))
                .collect();
            let gap = laplacian_kernel_gap(&graph, &random).unwrap();
            let all_equal = random.windows(2).all(|w| w[0] == w[1]);
            prop_assert_eq!(gap == 0.0, all_equal);
        }
    }

    /// No byte soup may crash the problem parser.
    #[test]
    fn parser_never_panics_on_arbitrary_input(text in "\\PC*") {
        let _ = parse_problem_str(&text);
    }

    /// Nor may structurally JSON-shaped input.
    #[test]
    fn parser_never_panics_on_jsonish_input(
        nodes in 0..5usize,
        from in 0..6usize,
        to in 0..6usize,
        cost in -2.0f64..2.0,
        rho in prop::collection::vec(-2.0f64..2.0, 0..5),
    ) {
        let text = format!(
            r#"{{"nodes": {nodes}, "arcs": [{{"from": {from}, "to": {to}, "cost": {cost}}}], "rho": {rho:?}}}"#
        );
        let _ = parse_problem_str(&text);
    }

    /// Written problems parse back to an equal value.
    #[test]
    fn problem_files_round_trip(
        graph in connected_graph(6),
        seed in any::<u64>(),
        gamma in 0.0f64..2.0,
    ) {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let flow: Vec<f64> = (0..graph.arc_count()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let rho = graph.divergence(&flow).unwrap();
        let problem = MassProblem::from_net(rho).unwrap();
        let parsed = ParsedProblem {
            graph,
            problem,
            config: SolverConfig { gamma, ..SolverConfig::default() },
            events: Default::default(),
        };
        let text = write_problem_str(&parsed);
        let reparsed = parse_problem_str(&text).unwrap();
        prop_assert_eq!(parsed, reparsed);
    }
}
