mod common;

use std::collections::VecDeque;

use common::{random_connected, random_subset, UnionFind};
use gossip_overlay::engine::{default_b_max, EngineConfig, Mode, Network};
use gossip_overlay::expander::{expander_degree_reduction, increase_expansion, make_benign, ReductionParams};
use gossip_overlay::graph::{
    connected_components, cut_of, estimate_conductance, exact_conductance, pseudo_diameter, Subgraph,
};
use gossip_overlay::harness::{barabasi_albert, fat_cycle, grid, random_regular};
use gossip_overlay::overlay::{bound_degree, build_overlay, EdgeOwnership, OverlayParams};
use gossip_overlay::pushsum::{aggregate_sketches, PushSumSchedule, ScheduleConstants};
use gossip_overlay::rng::stream;
use gossip_overlay::sketch::{SketchMatrix, SketchParams, SketchSeed, SketchVector};
use gossip_overlay::{NodeId, OverlayGraph};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn bfs(g: &OverlayGraph, root: NodeId) -> Vec<u32> {
    let mut dist = vec![u32::MAX; g.node_count()];
    dist[root.index()] = 0;
    let mut queue = VecDeque::from([root]);
    while let Some(u) = queue.pop_front() {
        for v in g.neighbor_ids(u) {
            if dist[v.index()] == u32::MAX {
                dist[v.index()] = dist[u.index()] + 1;
                queue.push_back(v);
            }
        }
    }
    dist
}

fn aggregate(m: &SketchMatrix, g: &OverlayGraph, s: &[NodeId]) -> SketchVector {
    let mut acc = m.zero();
    for &v in s {
        acc.merge_in(&m.sketch_node(v, g.neighbor_ids(v))).unwrap();
    }
    acc
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fat_cycle_is_regular(n in 3usize..200, w in 1usize..10) {
        prop_assume!(n > 2 * w);
        let g = fat_cycle(n, w).unwrap();
        prop_assert!(g.nodes().all(|v| g.degree(v) == 2 * w as u32));
    }

    #[test]
    fn grid_degree_at_most_four(r in 1usize..30, c in 1usize..30) {
        prop_assume!(r * c >= 2);
        let g = grid(r, c).unwrap();
        prop_assert_eq!(g.node_count(), r * c);
        prop_assert!(g.max_degree() <= 4);
        prop_assert!(g.is_connected());
    }

    #[test]
    fn ba_min_degree_is_m(n in 10usize..300, m in 1usize..5, seed: u64) {
        prop_assume!(n > m + 1);
        let g = barabasi_albert(n, m, seed).unwrap();
        prop_assert!(g.nodes().all(|v| g.degree(v) >= m as u32));
        prop_assert!(g.is_connected());
    }

    #[test]
    fn random_regular_is_simple(n in 8usize..120, d in 2usize..7, seed: u64) {
        prop_assume!(n * d % 2 == 0 && d < n);
        let g = random_regular(n, d, seed).unwrap();
        prop_assert!(g.nodes().all(|v| g.degree(v) == d as u32));
        prop_assert!(g.edges().all(|(u, v, m)| u != v && m == 1));
    }

    #[test]
    fn conductance_is_symmetric(seed: u64, n in 2usize..20) {
        let mut rng = stream(seed, &[]);
        let g = random_connected(n, 0.3, &mut rng);
        let s = random_subset(n, &mut rng);
        prop_assume!(s.len() < n);
        let rest: Vec<NodeId> = g.nodes().filter(|v| !s.contains(v)).collect();
        let a = cut_of(&g, &s).conductance();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert_eq!(a, cut_of(&g, &rest).conductance());
    }

    #[test]
    fn estimate_never_below_exact(seed: u64, n in 2usize..15, samples in 1usize..12) {
        let g = random_connected(n, 0.25, &mut stream(seed, &[]));
        let exact = exact_conductance(&g).unwrap().conductance();
        prop_assert!(estimate_conductance(&g, samples, seed).unwrap() >= exact - 1e-12);
    }

    #[test]
    fn pseudo_diameter_below_diameter(seed: u64, n in 1usize..64) {
        let g = random_connected(n, 1.5 / n as f64, &mut stream(seed, &[]));
        let diameter = g.nodes().flat_map(|v| bfs(&g, v)).max().unwrap();
        prop_assert!(pseudo_diameter(&g, 4, seed).unwrap() <= diameter);
    }

    #[test]
    fn components_ignore_edge_order(seed: u64, n in 1usize..40) {
        let mut rng = stream(seed, &[]);
        let mut edges: Vec<(NodeId, NodeId)> = (0..n)
            .filter_map(|_| {
                let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
                (a != b).then(|| (NodeId::from_index(a), NodeId::from_index(b)))
            })
            .collect();
        let before = connected_components(&OverlayGraph::simple_from_edges(n, edges.clone()));
        edges.shuffle(&mut rng);
        let after = connected_components(&OverlayGraph::simple_from_edges(n, edges));
        prop_assert_eq!(before, after);
    }

    #[test]
    fn sketches_are_linear(seed: u64, n in 2usize..30) {
        let mut rng = stream(seed, &[]);
        let g = random_connected(n, 0.2, &mut rng);
        let m = SketchMatrix::new(SketchParams::new(n as u64), &SketchSeed::random(n as u64, &mut rng));
        let mut nodes: Vec<NodeId> = g.nodes().collect();
        nodes.shuffle(&mut rng);
        let split = rng.gen_range(0..=n);
        let (a, b) = nodes.split_at(split);
        let (sa, sb) = (aggregate(&m, &g, a), aggregate(&m, &g, b));
        prop_assert_eq!(sa.merge(&sb).unwrap(), aggregate(&m, &g, &nodes));
        prop_assert_eq!(sa.merge(&sb).unwrap(), sb.merge(&sa).unwrap());
        prop_assert_eq!(sa.merge(&m.zero()).unwrap(), sa.clone());
        prop_assert!(aggregate(&m, &g, &nodes).is_zero());
        prop_assert_eq!(SketchVector::from_bytes(&sa.to_bytes()).unwrap(), sa);
    }

    #[test]
    fn sketch_fits_message_budget(bits in 1u32..=20) {
        let id_bound = 1u64 << bits;
        prop_assert!(SketchParams::new(id_bound.max(2)).serialized_bits() <= default_b_max(id_bound.max(2)));
    }

    #[test]
    fn bound_degree_keeps_edges_connected(seed: u64, n in 2usize..40) {
        let mut rng = stream(seed, &[]);
        let hot = rng.gen_range(0..n);
        let owned: Vec<EdgeOwnership> = (0..n)
            .filter_map(|o| {
                if !rng.gen_bool(0.7) {
                    return None;
                }
                let t = if rng.gen_bool(0.5) { hot } else { rng.gen_range(0..n) };
                (t != o).then(|| EdgeOwnership::new(NodeId::from_index(o), NodeId::from_index(t)))
            })
            .collect();
        let b = bound_degree(&owned).unwrap();
        let g = OverlayGraph::from_edges(n, b.edges.iter().copied());
        prop_assert!(g.max_degree() <= 4);
        let mut uf = UnionFind::new(n);
        for (u, v) in &b.edges {
            uf.union(u.index(), v.index());
        }
        for e in &owned {
            prop_assert_eq!(uf.find(e.owner.index()), uf.find(e.target().index()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn benign_invariants_hold_through_expansion(seed: u64, n in 2usize..40) {
        let mut rng = stream(seed, &[]);
        let g = random_connected(n, 0.1, &mut rng);
        let h = make_benign(&g, g.max_degree()).unwrap();
        prop_assert!(h.is_regular());
        prop_assert_eq!(h.lazy_nodes(), n);
        prop_assert!(h.graph.edges().all(|(u, v, m)| u == v || m % h.lambda == 0));
        let labels: Vec<NodeId> = g.nodes().collect();
        let mut net = Network::new(EngineConfig::new(seed, Mode::Fast, n as u64), &g);
        let mut cur = h;
        for _ in 0..3 {
            let (next, _) = increase_expansion(&cur, &labels, 13, &mut net, &mut rng).unwrap();
            prop_assert!(next.is_regular());
            prop_assert_eq!(next.delta_h, cur.delta_h);
            prop_assert!(next.graph.without_loops().is_connected());
            cur = next;
        }
    }

    #[test]
    fn few_nodes_fill_up_with_small_token_counts(seed: u64, n in 40usize..200) {
        let g = random_regular(n, 6, seed).unwrap();
        let params = ReductionParams { tokens: 3, ..Default::default() };
        prop_assert!(params.bounds_full_nodes());
        let mut net = Network::new(EngineConfig::new(seed, Mode::Fast, n as u64), &g);
        let (out, report) =
            expander_degree_reduction(&Subgraph::whole(g), &params, &mut net, &mut stream(seed, &[1])).unwrap();
        prop_assert!((report.max_overloaded as f64) < n as f64 / 10.0);
        prop_assert!(out.max_degree() <= params.degree_bound());
        prop_assert!(out.is_connected());
    }

    #[test]
    fn pushsum_conserves_mass(seed: u64, k in 2usize..24) {
        let mut rng = stream(seed, &[]);
        let cluster = random_connected(k, 0.15, &mut rng);
        let g = random_connected(k, 0.3, &mut rng);
        let params = SketchParams::new(k as u64);
        let m = SketchMatrix::new(params, &SketchSeed::random(k as u64, &mut rng));
        let inputs: Vec<_> = g.nodes().map(|v| m.sketch_node(v, g.neighbor_ids(v))).collect();
        let schedule = PushSumSchedule::for_sketches(k, &ScheduleConstants::default());
        let mut net = Network::new(EngineConfig::new(seed, Mode::Faithful, k as u64), &cluster);
        let out = aggregate_sketches(&Subgraph::whole(cluster), NodeId(1), &inputs, &params, &schedule, &mut net, &mut rng)
            .unwrap();
        prop_assert_eq!(out.report.conservation_violations, 0);
        prop_assert_eq!(out.report.sign_violations, 0);
        prop_assert!(net.stats().max_initiations_per_round <= k as u64);
    }

    #[test]
    fn overlay_merges_monotonically(seed: u64, n in 2usize..60, faithful: bool) {
        let g = random_connected(n, 2.0 / n as f64, &mut stream(seed, &[]));
        let mode = if faithful { Mode::Faithful } else { Mode::Fast };
        let params = OverlayParams::default();
        let out = build_overlay(&g, &params, EngineConfig::new(seed, mode, n as u64)).unwrap();
        prop_assert!(out.graph.is_connected());
        prop_assert!(out.graph.max_degree() <= params.reduction.degree_bound());
        for s in &out.metrics.stages {
            prop_assert!(s.clusters_after <= s.clusters_before);
            prop_assert!(s.bounded_max_degree <= 4);
        }
        prop_assert!(out.metrics.phases <= params.stage_limit(n));
    }
}
