mod common;

use std::collections::HashSet;

use chat::graph::{bfs_distance, build_graph, split_links, EdgeList, HetGraph, Interest, Link, NodeId, UNREACHABLE};
use chat::sampler::{sample_corpus, sample_corpus_serial, sample_sequence, SamplerConfig};
use chat::seed;
use proptest::prelude::*;

fn graph_from_seed(seed_value: u64, nodes: usize, edges: usize) -> HetGraph {
    common::random_typed_graph(&mut seed::rng(seed_value), nodes, edges, 3, seed_value % 2 == 0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn undirected_adjacency_is_symmetric(s in any::<u64>(), n in 3usize..40, m in 0usize..120) {
        let g = graph_from_seed(s, n, m);
        for (u, e, v) in g.arcs() {
            prop_assert!(g.has_arc(v, e, u));
            prop_assert_ne!(u, v);
        }
    }

    #[test]
    fn distances_respect_edges(s in any::<u64>(), n in 3usize..40, m in 0usize..120, cap in 1u16..12) {
        let g = graph_from_seed(s, n, m);
        let table = bfs_distance(&g, NodeId(0), cap, None);
        prop_assert_eq!(table.get(NodeId(0)), 0);
        for (u, _, v) in g.arcs() {
            let (du, dv) = (table.get(u), table.get(v));
            if du < cap && du != UNREACHABLE {
                prop_assert!(dv != UNREACHABLE && dv <= du + 1);
            }
        }
    }

    #[test]
    fn corpus_is_independent_of_scheduling(s in any::<u64>(), k in 0usize..3, length in 2usize..6) {
        let g = graph_from_seed(s, 30, 70);
        let cfg = SamplerConfig { max_inner: k, length, samples_per_head: 5, seed: s, ..Default::default() };
        let heads = g.head_nodes();
        let a = sample_corpus(&g, &heads, &cfg).unwrap();
        let b = sample_corpus_serial(&g, &heads, &cfg).unwrap();
        prop_assert_eq!(a.len(), heads.len() * 5);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn sequences_are_bounded(s in any::<u64>(), k in 0usize..4, length in 2usize..9) {
        let g = graph_from_seed(s, 25, 60);
        let cfg = SamplerConfig { max_inner: k, length, ..Default::default() };
        let head = g.head_nodes()[0];
        let table = bfs_distance(&g, head, cfg.distance_cap, None);
        let seq = sample_sequence(&g, head, &cfg, &table, &mut seed::rng(s)).unwrap();
        prop_assert!(seq.steps.len() < length);
        prop_assert_eq!(seq.token_count(), 2 * seq.node_count() - 1);
        for step in &seq.steps {
            prop_assert!(!step.connection.is_empty() && step.connection.len() <= k + 1);
            prop_assert!(g.is_tail(step.tail));
        }
    }
}

fn bipartite(heads: usize, tails: usize, edges: &[(usize, usize)]) -> (HetGraph, Vec<Link>) {
    let mut list = EdgeList::new();
    for &(h, t) in edges {
        list.push_named("drug", &format!("d{h}"), "binds", "protein", &format!("p{t}"));
    }
    for h in 0..heads {
        list.push_named("drug", &format!("d{h}"), "near", "site", &format!("s{h}"));
    }
    for t in 0..tails {
        list.push_named("protein", &format!("p{t}"), "near", "site", &format!("s{t}"));
    }
    let g = build_graph(&list, &Interest::new(&["drug"], &["protein"]), false).unwrap();
    let links = edges
        .iter()
        .map(|&(h, t)| {
            let v = g.vocab();
            Link::new(v.lookup_node("drug", &format!("d{h}")).unwrap(), v.lookup_node("protein", &format!("p{t}")).unwrap())
        })
        .collect();
    (g, links)
}

#[test]
fn split_is_seeded_and_leak_free() {
    let edges: Vec<(usize, usize)> = (0..40).map(|i| (i % 20, (i * 7) % 30)).collect::<HashSet<_>>().into_iter().collect();
    let mut edges = edges;
    edges.sort_unstable();
    let (g, positives) = bipartite(20, 30, &edges);
    let g = g.without_links(&positives).unwrap();
    let a = split_links(&g, &positives, 4, 2.0, 42).unwrap();
    let b = split_links(&g, &positives, 4, 2.0, 42).unwrap();
    let c = split_links(&g, &positives, 4, 2.0, 43).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.negatives, c.negatives);
    let pos: HashSet<Link> = positives.iter().copied().collect();
    for n in &a.negatives {
        assert!(!pos.contains(n));
        assert!(!g.adjacent(g.id(n.head), g.id(n.tail)));
    }
    let sizes: Vec<usize> = (0..4).map(|f| a.fold_positives(f).len()).collect();
    assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    assert_eq!(sizes.iter().sum::<usize>(), positives.len());
}

#[test]
fn unique_walk_is_always_sampled() {
    // h - t1 - t2 is the only route; every sample must be exactly that walk.
    let mut list = EdgeList::new();
    list.push_named("h", "a", "r", "t", "b");
    list.push_named("t", "b", "s", "t", "c");
    let g = build_graph(&list, &Interest::new(&["h"], &["t"]), false).unwrap();
    let cfg = SamplerConfig { max_inner: 0, length: 2, samples_per_head: 50, ..Default::default() };
    let corpus = sample_corpus(&g, &g.head_nodes(), &cfg).unwrap();
    let b = g.id(g.vocab().lookup_node("t", "b").unwrap());
    assert!(corpus.iter().all(|s| s.steps.len() == 1 && s.steps[0].tail == b));
}
