//! Concentrated random-walk sampling.
//!
//! A concentrated walk keeps only nodes of interest. Starting at a head node
//! it repeatedly walks uniformly at random until it lands on a tail-typed
//! node; the edge types crossed on the way form a [`Connection`] and every
//! non-tail node passed through (head-typed nodes included) is an inner node.
//! A step that needs more than `k` inner nodes is discarded and retried.

use std::fmt;
use std::io::{self, Write};

use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::graph::{bfs_distance, DistanceTable, EdgeMask, EdgeTypeId, HetGraph, NodeId, TypeId, Vocabulary};
use crate::seed;

/// Ordered tuple of edge types crossed between two consecutive interest nodes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct Connection(pub Vec<EdgeTypeId>);

impl Connection {
    pub fn new(edge_types: Vec<EdgeTypeId>) -> Self {
        Self(edge_types)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of inner nodes the connection passes through.
    pub fn inner_nodes(&self) -> usize {
        self.0.len().saturating_sub(1)
    }

    /// `(binds,similar)` using edge type names.
    pub fn display(&self, vocab: &Vocabulary) -> String {
        let names: Vec<&str> = self.0.iter().map(|&t| vocab.edge_types[t as usize].as_str()).collect();
        format!("({})", names.join(","))
    }
}

impl fmt::Display for Connection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ids: Vec<String> = self.0.iter().map(|t| format!("e{t}")).collect();
        write!(f, "({})", ids.join(","))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub connection: Connection,
    pub tail: NodeId,
}

/// A sampled walk: the head followed by `(connection, tail)` steps, with the
/// hop distance of every node from the head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConcentratedSequence {
    pub head: NodeId,
    pub steps: Vec<Step>,
    /// `distances[0]` is the head (always 0), `distances[i]` the tail of step `i - 1`.
    pub distances: Vec<u16>,
}

impl ConcentratedSequence {
    pub fn node_count(&self) -> usize {
        1 + self.steps.len()
    }

    /// Interleaved token count, `2 * nodes - 1`.
    pub fn token_count(&self) -> usize {
        2 * self.node_count() - 1
    }

    /// The `i`-th interest node (0 is the head).
    pub fn node(&self, i: usize) -> NodeId {
        if i == 0 {
            self.head
        } else {
            self.steps[i - 1].tail
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        std::iter::once(self.head).chain(self.steps.iter().map(|s| s.tail))
    }

    pub fn tails(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.steps.iter().map(|s| s.tail)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Maximum inner (non-tail) nodes per connection, `k`.
    pub max_inner: usize,
    /// Walk length in interest nodes, `L`.
    pub length: usize,
    /// Sequences per head node, `m`.
    pub samples_per_head: usize,
    /// Attempts per step before giving up.
    pub max_attempts: usize,
    /// Hop cap for distance labels.
    pub distance_cap: u16,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { max_inner: 2, length: 10, samples_per_head: 1000, max_attempts: 10, distance_cap: 10, seed: 0 }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SamplerError {
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error("node {0} is not of a head type")]
    NotHead(String),
    #[error("no head nodes given")]
    NoHeads,
    #[error("meta-path {0}")]
    MetaPath(String),
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.length < 2 {
            return Err(SamplerError::Config(format!("walk length must be at least 2, got {}", self.length)));
        }
        if self.samples_per_head == 0 {
            return Err(SamplerError::Config("samples per head must be at least 1".into()));
        }
        if self.max_attempts == 0 {
            return Err(SamplerError::Config("max attempts must be at least 1".into()));
        }
        Ok(())
    }
}

/// One concentrated step from `from`: walk until a tail-typed node is hit,
/// retrying up to `max_attempts` times when more than `k` inner nodes are needed.
pub fn concentrated_step<R: Rng + ?Sized>(
    graph: &HetGraph,
    from: NodeId,
    config: &SamplerConfig,
    rng: &mut R,
) -> Option<Step> {
    let mut edges = Vec::with_capacity(config.max_inner + 1);
    for _ in 0..config.max_attempts {
        edges.clear();
        let mut current = from;
        let mut inner = 0;
        loop {
            let degree = graph.degree(current);
            if degree == 0 {
                break;
            }
            let (edge_type, next) = graph.arc(current, rng.gen_range(0..degree));
            edges.push(edge_type);
            if graph.is_tail(next) {
                return Some(Step { connection: Connection(edges), tail: next });
            }
            inner += 1;
            if inner > config.max_inner {
                break;
            }
            current = next;
        }
    }
    None
}

/// Samples one sequence from `head`, stopping at `length` interest nodes or
/// at the first step that yields no sample.
pub fn sample_sequence<R: Rng + ?Sized>(
    graph: &HetGraph,
    head: NodeId,
    config: &SamplerConfig,
    distances: &DistanceTable,
    rng: &mut R,
) -> Result<ConcentratedSequence, SamplerError> {
    if !graph.is_head(head) {
        return Err(SamplerError::NotHead(graph.display(head)));
    }
    let mut steps = Vec::with_capacity(config.length - 1);
    let mut dist = Vec::with_capacity(config.length);
    dist.push(0);
    let mut last = head;
    while steps.len() + 1 < config.length {
        let Some(step) = concentrated_step(graph, last, config, rng) else { break };
        last = step.tail;
        dist.push(distances.get(step.tail));
        steps.push(step);
    }
    Ok(ConcentratedSequence { head, steps, distances: dist })
}

/// Samples `samples_per_head` sequences for every head, in head order.
///
/// Each head draws from its own stream seeded by `(config.seed, head id)`, so
/// the corpus does not depend on thread count or scheduling.
pub fn sample_corpus(
    graph: &HetGraph,
    heads: &[NodeId],
    config: &SamplerConfig,
) -> Result<Vec<ConcentratedSequence>, SamplerError> {
    sample_corpus_masked(graph, heads, config, |_| None)
}

/// As [`sample_corpus`], with per-head edge masks applied to the distance labels.
pub fn sample_corpus_masked<F>(
    graph: &HetGraph,
    heads: &[NodeId],
    config: &SamplerConfig,
    mask_for: F,
) -> Result<Vec<ConcentratedSequence>, SamplerError>
where
    F: Fn(NodeId) -> Option<EdgeMask> + Sync,
{
    config.validate()?;
    if heads.is_empty() {
        return Err(SamplerError::NoHeads);
    }
    if let Some(&bad) = heads.iter().find(|&&h| !graph.is_head(h)) {
        return Err(SamplerError::NotHead(graph.display(bad)));
    }
    let per_head: Vec<Vec<ConcentratedSequence>> = heads
        .par_iter()
        .map(|&head| {
            let mask = mask_for(head);
            let table = bfs_distance(graph, head, config.distance_cap, mask.as_ref());
            sample_head(graph, head, config, &table)
        })
        .collect::<Result<_, _>>()?;
    Ok(per_head.into_iter().flatten().collect())
}

/// Serial reference for [`sample_corpus`]; produces the identical corpus.
pub fn sample_corpus_serial(
    graph: &HetGraph,
    heads: &[NodeId],
    config: &SamplerConfig,
) -> Result<Vec<ConcentratedSequence>, SamplerError> {
    config.validate()?;
    if heads.is_empty() {
        return Err(SamplerError::NoHeads);
    }
    let mut out = Vec::with_capacity(heads.len() * config.samples_per_head);
    for &head in heads {
        let table = bfs_distance(graph, head, config.distance_cap, None);
        out.extend(sample_head(graph, head, config, &table)?);
    }
    Ok(out)
}

fn sample_head(
    graph: &HetGraph,
    head: NodeId,
    config: &SamplerConfig,
    table: &DistanceTable,
) -> Result<Vec<ConcentratedSequence>, SamplerError> {
    let mut rng = seed::rng(seed::derive(config.seed, head.0 as u64));
    (0..config.samples_per_head).map(|_| sample_sequence(graph, head, config, table, &mut rng)).collect()
}

/// Writes one sequence per line: `head \t (conn) \t tail \t (conn) \t tail ...`.
pub fn write_corpus<W: Write>(graph: &HetGraph, corpus: &[ConcentratedSequence], mut out: W) -> io::Result<()> {
    let vocab = graph.vocab();
    for seq in corpus {
        write!(out, "{}", graph.display(seq.head))?;
        for step in &seq.steps {
            write!(out, "\t{}\t{}", step.connection.display(vocab), graph.display(step.tail))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// An alternating node-type / edge-type path template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetaPath {
    pub node_types: Vec<TypeId>,
    pub edge_types: Vec<EdgeTypeId>,
}

impl MetaPath {
    pub fn new(node_types: Vec<TypeId>, edge_types: Vec<EdgeTypeId>) -> Result<Self, SamplerError> {
        if node_types.is_empty() || node_types.len() != edge_types.len() + 1 {
            return Err(SamplerError::MetaPath(format!(
                "needs one more node type than edge types, got {} and {}",
                node_types.len(),
                edge_types.len()
            )));
        }
        Ok(Self { node_types, edge_types })
    }

    /// Parses whitespace-separated names, `drug binds protein similar protein`.
    pub fn parse(vocab: &Vocabulary, text: &str) -> Result<Self, SamplerError> {
        let mut node_types = Vec::new();
        let mut edge_types = Vec::new();
        for (i, token) in text.split_whitespace().enumerate() {
            if i % 2 == 0 {
                let t = vocab
                    .node_type_id(token)
                    .ok_or_else(|| SamplerError::MetaPath(format!("unknown node type `{token}`")))?;
                node_types.push(t);
            } else {
                let t = vocab
                    .edge_type_id(token)
                    .ok_or_else(|| SamplerError::MetaPath(format!("unknown edge type `{token}`")))?;
                edge_types.push(t);
            }
        }
        Self::new(node_types, edge_types)
    }
}

/// Type-level skeleton of a concentrated sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceTemplate {
    pub head_type: TypeId,
    /// `(connection, tail type)` per step.
    pub steps: Vec<(Connection, TypeId)>,
    /// Index into the meta-path of each kept node (0 for the head).
    pub positions: Vec<usize>,
}

/// Collapses a meta-path into the concentrated form the sampler emits.
///
/// Each maximal run of non-tail types after the head becomes one connection;
/// feasibility requires `k` to cover every run and `length` to cover the
/// number of kept nodes.
pub fn metapath_to_concentrated(
    metapath: &MetaPath,
    is_head_type: impl Fn(TypeId) -> bool,
    is_tail_type: impl Fn(TypeId) -> bool,
    max_inner: usize,
    length: usize,
) -> Result<SequenceTemplate, SamplerError> {
    let head_type = metapath.node_types[0];
    if !is_head_type(head_type) {
        return Err(SamplerError::MetaPath(format!("must start at a head type, starts at type {head_type}")));
    }
    let mut steps = Vec::new();
    let mut positions = vec![0];
    let mut run_start = 0;
    let mut pending: Vec<EdgeTypeId> = Vec::new();
    for (i, &edge) in metapath.edge_types.iter().enumerate() {
        pending.push(edge);
        let node_type = metapath.node_types[i + 1];
        if is_tail_type(node_type) {
            let gap = pending.len() - 1;
            if gap > max_inner {
                return Err(SamplerError::MetaPath(format!(
                    "sub-path from position {run_start} to {} has {gap} inner nodes, exceeding k = {max_inner}",
                    i + 1
                )));
            }
            steps.push((Connection(std::mem::take(&mut pending)), node_type));
            positions.push(i + 1);
            run_start = i + 1;
        }
    }
    if !pending.is_empty() {
        return Err(SamplerError::MetaPath(format!(
            "sub-path from position {run_start} does not end at a tail type"
        )));
    }
    if positions.len() > length {
        return Err(SamplerError::MetaPath(format!(
            "needs {} interest nodes but walk length is {length}",
            positions.len()
        )));
    }
    Ok(SequenceTemplate { head_type, steps, positions })
}
