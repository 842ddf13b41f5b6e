#![allow(dead_code)]

use std::collections::HashSet;
use std::fmt::Write as _;

use chat::graph::{build_graph, parse_edge_text, EdgeTypeId, HetGraph, Interest, NodeId};
use rand::Rng;

/// Random graph over node types `h`, `t`, `x` and edge types `r0..r{edge_types}`.
///
/// Nodes 0, 1 and 2 carry the three types and are chained so every type exists.
/// When `head_is_tail` is set, `h` nodes are interest on both sides.
pub fn random_typed_graph<R: Rng>(
    rng: &mut R,
    nodes: usize,
    edges: usize,
    edge_types: usize,
    head_is_tail: bool,
) -> HetGraph {
    assert!(nodes >= 3);
    let types = ["h", "t", "x"];
    let node_type: Vec<&str> =
        (0..nodes).map(|i| if i < 3 { types[i] } else { types[rng.gen_range(0..3)] }).collect();
    let mut text = String::new();
    let mut seen = HashSet::new();
    let mut push = |a: usize, b: usize, e: usize| {
        if seen.insert((a.min(b), a.max(b), e)) {
            writeln!(text, "{}\tn{a}\tr{e}\t{}\tn{b}", node_type[a], node_type[b]).unwrap();
        }
        seen.len()
    };
    push(0, 1, 0);
    let mut count = push(1, 2, 0);
    let mut attempts = 0;
    while count < edges && attempts < edges * 20 {
        attempts += 1;
        let a = rng.gen_range(0..nodes);
        let b = rng.gen_range(0..nodes);
        if a != b {
            count = push(a, b, rng.gen_range(0..edge_types));
        }
    }
    let list = parse_edge_text(&text).unwrap();
    let tails: &[&str] = if head_is_tail { &["h", "t"] } else { &["t"] };
    build_graph(&list, &Interest::new(&["h"], tails), false).unwrap()
}

/// Every `(edge types, end node)` a single concentrated step from `from` can
/// produce, by depth-first enumeration of walks with at most `k` non-tail inner nodes.
pub fn step_outcomes(g: &HetGraph, from: NodeId, k: usize) -> HashSet<(Vec<EdgeTypeId>, NodeId)> {
    fn go(g: &HetGraph, cur: NodeId, path: &mut Vec<EdgeTypeId>, k: usize, out: &mut HashSet<(Vec<EdgeTypeId>, NodeId)>) {
        for (e, v) in g.neighbors(cur) {
            path.push(e);
            if g.is_tail(v) {
                out.insert((path.clone(), v));
            } else if path.len() <= k {
                go(g, v, path, k, out);
            }
            path.pop();
        }
    }
    let mut out = HashSet::new();
    go(g, from, &mut Vec::new(), k, &mut out);
    out
}

/// All-pairs hop distances by Floyd-Warshall; `None` when unreachable.
pub fn all_pairs(g: &HetGraph, skip: &HashSet<(NodeId, NodeId)>) -> Vec<Vec<Option<u32>>> {
    let n = g.node_count();
    let mut d = vec![vec![None; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = Some(0);
    }
    for u in 0..n as u32 {
        for (_, v) in g.neighbors(NodeId(u)) {
            if !skip.contains(&(NodeId(u), v)) && u != v.0 {
                d[u as usize][v.index()] = Some(1);
            }
        }
    }
    for m in 0..n {
        for i in 0..n {
            let Some(im) = d[i][m] else { continue };
            for j in 0..n {
                if let Some(mj) = d[m][j] {
                    if d[i][j].map_or(true, |c| im + mj < c) {
                        d[i][j] = Some(im + mj);
                    }
                }
            }
        }
    }
    d
}
