//! Heterogeneous graph storage: edge-file parsing, typed adjacency,
//! link splits with negative sampling, and hop distances.
//!
//! Nodes are addressed two ways. A [`NodeRef`] is the stable
//! `(type, local id)` pair used in files and reports; a [`NodeId`] is the
//! dense global index used by the adjacency arrays and by every hot loop.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub type TypeId = u16;
pub type EdgeTypeId = u16;

/// Dense global node index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub u32);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// A node addressed by its type and its index among nodes of that type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeRef {
    pub type_id: TypeId,
    pub local_id: u32,
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("I/O error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("self-loop on node {0}")]
    SelfLoop(String),
    #[error("node {0} is not part of the graph")]
    UnknownNode(String),
    #[error(
        "cannot draw {requested} negatives: only {available} head-tail pairs are neither positive nor edges"
    )]
    NegativeSpaceExhausted { requested: usize, available: usize },
}

/// An edge as read from a file, with type and node names interned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RawEdge {
    pub src: NodeRef,
    pub edge_type: EdgeTypeId,
    pub dst: NodeRef,
}

/// Interned names for node types, edge types and nodes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    pub node_types: Vec<String>,
    pub edge_types: Vec<String>,
    /// `node_names[type_id][local_id]`
    pub node_names: Vec<Vec<String>>,
    node_type_index: HashMap<String, TypeId>,
    edge_type_index: HashMap<String, EdgeTypeId>,
    node_index: Vec<HashMap<String, u32>>,
}

impl Vocabulary {
    pub fn intern_node_type(&mut self, name: &str) -> TypeId {
        if let Some(&id) = self.node_type_index.get(name) {
            return id;
        }
        let id = self.node_types.len() as TypeId;
        self.node_types.push(name.to_string());
        self.node_type_index.insert(name.to_string(), id);
        self.node_names.push(Vec::new());
        self.node_index.push(HashMap::new());
        id
    }

    pub fn intern_edge_type(&mut self, name: &str) -> EdgeTypeId {
        if let Some(&id) = self.edge_type_index.get(name) {
            return id;
        }
        let id = self.edge_types.len() as EdgeTypeId;
        self.edge_types.push(name.to_string());
        self.edge_type_index.insert(name.to_string(), id);
        id
    }

    pub fn intern_node(&mut self, type_name: &str, node_name: &str) -> NodeRef {
        let type_id = self.intern_node_type(type_name);
        let index = &mut self.node_index[type_id as usize];
        let local_id = match index.get(node_name) {
            Some(&id) => id,
            None => {
                let id = self.node_names[type_id as usize].len() as u32;
                self.node_names[type_id as usize].push(node_name.to_string());
                index.insert(node_name.to_string(), id);
                id
            }
        };
        NodeRef { type_id, local_id }
    }

    pub fn node_type_id(&self, name: &str) -> Option<TypeId> {
        self.node_type_index.get(name).copied()
    }

    pub fn edge_type_id(&self, name: &str) -> Option<EdgeTypeId> {
        self.edge_type_index.get(name).copied()
    }

    pub fn lookup_node(&self, type_name: &str, node_name: &str) -> Option<NodeRef> {
        let type_id = self.node_type_id(type_name)?;
        let local_id = *self.node_index[type_id as usize].get(node_name)?;
        Some(NodeRef { type_id, local_id })
    }

    /// `type:name`, the form used in every text export.
    pub fn display_node(&self, node: NodeRef) -> String {
        format!(
            "{}:{}",
            self.node_types[node.type_id as usize],
            self.node_names[node.type_id as usize][node.local_id as usize]
        )
    }
}

/// Parsed edge file: interned names plus deduplicated edges in file order.
#[derive(Debug, Clone, Default)]
pub struct EdgeList {
    pub vocab: Vocabulary,
    pub edges: Vec<RawEdge>,
}

impl EdgeList {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an edge by names. Returns `false` when the exact edge was already present.
    pub fn push_named(
        &mut self,
        src_type: &str,
        src: &str,
        edge_type: &str,
        dst_type: &str,
        dst: &str,
    ) -> bool {
        let s = self.vocab.intern_node(src_type, src);
        let e = self.vocab.intern_edge_type(edge_type);
        let d = self.vocab.intern_node(dst_type, dst);
        let edge = RawEdge { src: s, edge_type: e, dst: d };
        if self.edges.contains(&edge) {
            return false;
        }
        self.edges.push(edge);
        true
    }
}

fn read_text(path: &Path) -> Result<String, GraphError> {
    fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, line)| {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            None
        } else {
            Some((i + 1, line.split('\t').collect()))
        }
    })
}

/// Parses edge-file text: `src_type  src_id  edge_type  dst_type  dst_id`, tab separated.
///
/// The `directed` flag does not change parsing; it only matters for
/// deduplication of mirrored lines, which happens in [`build_graph`].
pub fn parse_edge_text(text: &str) -> Result<EdgeList, GraphError> {
    let mut list = EdgeList::new();
    let mut seen = HashSet::new();
    for (line, fields) in data_lines(text) {
        if fields.len() != 5 {
            return Err(GraphError::Parse {
                line,
                message: format!("expected 5 tab-separated fields, found {}", fields.len()),
            });
        }
        if let Some(empty) = fields.iter().position(|f| f.is_empty()) {
            return Err(GraphError::Parse {
                line,
                message: format!("field {} is empty", empty + 1),
            });
        }
        let s = list.vocab.intern_node(fields[0], fields[1]);
        let e = list.vocab.intern_edge_type(fields[2]);
        let d = list.vocab.intern_node(fields[3], fields[4]);
        let edge = RawEdge { src: s, edge_type: e, dst: d };
        if seen.insert(edge) {
            list.edges.push(edge);
        }
    }
    Ok(list)
}

pub fn parse_edge_file(path: impl AsRef<Path>) -> Result<EdgeList, GraphError> {
    parse_edge_text(&read_text(path.as_ref())?)
}

/// Head and tail node types of the links being predicted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interest {
    pub head_types: Vec<String>,
    pub tail_types: Vec<String>,
}

impl Interest {
    pub fn new(head: &[&str], tail: &[&str]) -> Self {
        Self {
            head_types: head.iter().map(|s| s.to_string()).collect(),
            tail_types: tail.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Immutable typed-node, typed-edge graph in CSR form.
#[derive(Debug, Clone)]
pub struct HetGraph {
    vocab: Vocabulary,
    directed: bool,
    /// Prefix sums of per-type node counts; global id = type_offset[type] + local.
    type_offset: Vec<u32>,
    node_type: Vec<TypeId>,
    offsets: Vec<usize>,
    adj_edge_type: Vec<EdgeTypeId>,
    adj_neighbor: Vec<NodeId>,
    is_head_type: Vec<bool>,
    is_tail_type: Vec<bool>,
    edge_count: usize,
}

/// Builds adjacency from parsed edges. Undirected graphs mirror every edge.
pub fn build_graph(
    edges: &EdgeList,
    interest: &Interest,
    directed: bool,
) -> Result<HetGraph, GraphError> {
    HetGraph::from_edges(edges.vocab.clone(), &edges.edges, interest, directed)
}

impl HetGraph {
    pub fn from_edges(
        vocab: Vocabulary,
        edges: &[RawEdge],
        interest: &Interest,
        directed: bool,
    ) -> Result<Self, GraphError> {
        let type_count = vocab.node_types.len();
        let resolve = |names: &[String], what: &str| -> Result<Vec<bool>, GraphError> {
            if names.is_empty() {
                return Err(GraphError::Config(format!("no {what} types given")));
            }
            let mut mask = vec![false; type_count];
            for name in names {
                let id = vocab.node_type_id(name).ok_or_else(|| {
                    GraphError::Config(format!("{what} type `{name}` not found among node types"))
                })?;
                mask[id as usize] = true;
            }
            Ok(mask)
        };
        let is_head_type = resolve(&interest.head_types, "head")?;
        let is_tail_type = resolve(&interest.tail_types, "tail")?;

        let mut type_offset = Vec::with_capacity(type_count + 1);
        let mut total = 0u32;
        type_offset.push(0);
        for names in &vocab.node_names {
            total += names.len() as u32;
            type_offset.push(total);
        }
        let node_count = total as usize;
        let mut node_type = Vec::with_capacity(node_count);
        for (t, names) in vocab.node_names.iter().enumerate() {
            node_type.extend(std::iter::repeat(t as TypeId).take(names.len()));
        }
        let global = |r: NodeRef| NodeId(type_offset[r.type_id as usize] + r.local_id);

        let mut arcs: Vec<(NodeId, EdgeTypeId, NodeId)> = Vec::with_capacity(edges.len() * 2);
        for e in edges {
            if e.src == e.dst {
                return Err(GraphError::SelfLoop(vocab.display_node(e.src)));
            }
            let (s, d) = (global(e.src), global(e.dst));
            arcs.push((s, e.edge_type, d));
            if !directed {
                arcs.push((d, e.edge_type, s));
            }
        }
        arcs.sort_unstable();
        arcs.dedup();
        let edge_count = if directed { arcs.len() } else { arcs.len() / 2 };

        let mut offsets = vec![0usize; node_count + 1];
        for &(s, _, _) in &arcs {
            offsets[s.index() + 1] += 1;
        }
        for i in 0..node_count {
            offsets[i + 1] += offsets[i];
        }
        let adj_edge_type = arcs.iter().map(|a| a.1).collect();
        let adj_neighbor = arcs.iter().map(|a| a.2).collect();

        Ok(Self {
            vocab,
            directed,
            type_offset,
            node_type,
            offsets,
            adj_edge_type,
            adj_neighbor,
            is_head_type,
            is_tail_type,
            edge_count,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    pub fn node_count(&self) -> usize {
        self.node_type.len()
    }

    pub fn node_type_count(&self) -> usize {
        self.vocab.node_types.len()
    }

    pub fn edge_type_count(&self) -> usize {
        self.vocab.edge_types.len()
    }

    /// Number of distinct typed edges (mirrored pairs counted once when undirected).
    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn nodes_of_type(&self, type_id: TypeId) -> usize {
        let t = type_id as usize;
        (self.type_offset[t + 1] - self.type_offset[t]) as usize
    }

    #[inline]
    pub fn id(&self, node: NodeRef) -> NodeId {
        NodeId(self.type_offset[node.type_id as usize] + node.local_id)
    }

    pub fn try_id(&self, node: NodeRef) -> Option<NodeId> {
        let t = node.type_id as usize;
        (t < self.node_type_count() && (node.local_id as usize) < self.nodes_of_type(node.type_id))
            .then(|| self.id(node))
    }

    #[inline]
    pub fn node_ref(&self, id: NodeId) -> NodeRef {
        let type_id = self.node_type[id.index()];
        NodeRef {
            type_id,
            local_id: id.0 - self.type_offset[type_id as usize],
        }
    }

    #[inline]
    pub fn type_of(&self, id: NodeId) -> TypeId {
        self.node_type[id.index()]
    }

    #[inline]
    pub fn is_head(&self, id: NodeId) -> bool {
        self.is_head_type[self.type_of(id) as usize]
    }

    #[inline]
    pub fn is_tail(&self, id: NodeId) -> bool {
        self.is_tail_type[self.type_of(id) as usize]
    }

    pub fn is_head_type(&self, t: TypeId) -> bool {
        self.is_head_type[t as usize]
    }

    pub fn is_tail_type(&self, t: TypeId) -> bool {
        self.is_tail_type[t as usize]
    }

    pub fn head_type_ids(&self) -> Vec<TypeId> {
        (0..self.node_type_count() as TypeId).filter(|&t| self.is_head_type(t)).collect()
    }

    pub fn tail_type_ids(&self) -> Vec<TypeId> {
        (0..self.node_type_count() as TypeId).filter(|&t| self.is_tail_type(t)).collect()
    }

    /// All nodes of head types, in global id order.
    pub fn head_nodes(&self) -> Vec<NodeId> {
        (0..self.node_count() as u32).map(NodeId).filter(|&v| self.is_head(v)).collect()
    }

    pub fn tail_nodes(&self) -> Vec<NodeId> {
        (0..self.node_count() as u32).map(NodeId).filter(|&v| self.is_tail(v)).collect()
    }

    #[inline]
    pub fn degree(&self, id: NodeId) -> usize {
        self.offsets[id.index() + 1] - self.offsets[id.index()]
    }

    /// Outgoing `(edge type, neighbor)` pairs, sorted by `(edge type, neighbor)`.
    #[inline]
    pub fn neighbors(&self, id: NodeId) -> impl Iterator<Item = (EdgeTypeId, NodeId)> + '_ {
        let r = self.offsets[id.index()]..self.offsets[id.index() + 1];
        self.adj_edge_type[r.clone()].iter().copied().zip(self.adj_neighbor[r].iter().copied())
    }

    /// The `i`-th incident arc of `id`.
    #[inline]
    pub fn arc(&self, id: NodeId, i: usize) -> (EdgeTypeId, NodeId) {
        let at = self.offsets[id.index()] + i;
        (self.adj_edge_type[at], self.adj_neighbor[at])
    }

    pub fn has_arc(&self, from: NodeId, edge_type: EdgeTypeId, to: NodeId) -> bool {
        let r = self.offsets[from.index()]..self.offsets[from.index() + 1];
        let types = &self.adj_edge_type[r.clone()];
        let nbrs = &self.adj_neighbor[r];
        types.iter().zip(nbrs).any(|(&t, &n)| t == edge_type && n == to)
    }

    /// True when any typed edge joins the two nodes (in either direction for undirected graphs).
    pub fn adjacent(&self, a: NodeId, b: NodeId) -> bool {
        self.neighbors(a).any(|(_, n)| n == b) || (self.directed && self.neighbors(b).any(|(_, n)| n == a))
    }

    /// Every stored arc, in CSR order.
    pub fn arcs(&self) -> impl Iterator<Item = (NodeId, EdgeTypeId, NodeId)> + '_ {
        (0..self.node_count() as u32)
            .map(NodeId)
            .flat_map(move |u| self.neighbors(u).map(move |(t, v)| (u, t, v)))
    }

    /// Edges in file form (each undirected edge once, `src < dst`).
    pub fn raw_edges(&self) -> Vec<RawEdge> {
        self.arcs()
            .filter(|(u, _, v)| self.directed || u < v)
            .map(|(u, t, v)| RawEdge { src: self.node_ref(u), edge_type: t, dst: self.node_ref(v) })
            .collect()
    }

    /// A copy of this graph with every edge between the given node pairs removed.
    pub fn without_links(&self, links: &[Link]) -> Result<HetGraph, GraphError> {
        let mut drop: HashSet<(NodeId, NodeId)> = HashSet::with_capacity(links.len() * 2);
        for l in links {
            let (a, b) = (self.id(l.head), self.id(l.tail));
            drop.insert((a, b));
            drop.insert((b, a));
        }
        let kept: Vec<RawEdge> = self
            .raw_edges()
            .into_iter()
            .filter(|e| !drop.contains(&(self.id(e.src), self.id(e.dst))))
            .collect();
        let interest = self.interest();
        HetGraph::from_edges(self.vocab.clone(), &kept, &interest, self.directed)
    }

    pub fn interest(&self) -> Interest {
        let names = |mask: &[bool]| {
            mask.iter()
                .enumerate()
                .filter(|(_, &m)| m)
                .map(|(t, _)| self.vocab.node_types[t].clone())
                .collect()
        };
        Interest { head_types: names(&self.is_head_type), tail_types: names(&self.is_tail_type) }
    }

    pub fn display(&self, id: NodeId) -> String {
        self.vocab.display_node(self.node_ref(id))
    }
}

/// One labeled head-tail pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Link {
    pub head: NodeRef,
    pub tail: NodeRef,
}

impl Link {
    pub fn new(head: NodeRef, tail: NodeRef) -> Self {
        Self { head, tail }
    }
}

/// Reads a link label file: `head_type  head_id  tail_type  tail_id  label`.
///
/// Returns positives and explicit negatives. Nodes must already exist in `vocab`.
pub fn parse_link_text(text: &str, vocab: &Vocabulary) -> Result<(Vec<Link>, Vec<Link>), GraphError> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (line, fields) in data_lines(text) {
        if fields.len() != 5 {
            return Err(GraphError::Parse {
                line,
                message: format!("expected 5 tab-separated fields, found {}", fields.len()),
            });
        }
        let node = |t: &str, n: &str| {
            vocab.lookup_node(t, n).ok_or_else(|| GraphError::Parse {
                line,
                message: format!("unknown node {t}:{n}"),
            })
        };
        let link = Link::new(node(fields[0], fields[1])?, node(fields[2], fields[3])?);
        match fields[4].trim() {
            "1" => pos.push(link),
            "0" => neg.push(link),
            other => {
                return Err(GraphError::Parse { line, message: format!("label must be 0 or 1, got `{other}`") })
            }
        }
    }
    Ok((pos, neg))
}

pub fn parse_link_file(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<(Vec<Link>, Vec<Link>), GraphError> {
    parse_link_text(&read_text(path.as_ref())?, vocab)
}

/// Labeled pairs for k-fold evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkDataset {
    pub positives: Vec<Link>,
    pub negatives: Vec<Link>,
    /// Fold of each positive, parallel to `positives`.
    pub positive_folds: Vec<usize>,
    /// Fold of each negative, parallel to `negatives`.
    pub negative_folds: Vec<usize>,
    pub folds: usize,
    pub ratio: f64,
}

impl LinkDataset {
    pub fn fold_positives(&self, fold: usize) -> Vec<Link> {
        pick(&self.positives, &self.positive_folds, |f| f == fold)
    }

    pub fn fold_negatives(&self, fold: usize) -> Vec<Link> {
        pick(&self.negatives, &self.negative_folds, |f| f == fold)
    }

    pub fn train_positives(&self, fold: usize) -> Vec<Link> {
        pick(&self.positives, &self.positive_folds, |f| f != fold)
    }

    pub fn train_negatives(&self, fold: usize) -> Vec<Link> {
        pick(&self.negatives, &self.negative_folds, |f| f != fold)
    }
}

fn pick(links: &[Link], folds: &[usize], keep: impl Fn(usize) -> bool) -> Vec<Link> {
    links.iter().zip(folds).filter(|(_, &f)| keep(f)).map(|(l, _)| *l).collect()
}

/// Fold labels `0..k` for `n` items in near-equal groups, shuffled by `rng`.
fn assign_folds(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut folds = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        folds[i] = rank % k;
    }
    folds
}

/// Splits positives into `k` folds and draws `ratio` uniform negatives per positive.
///
/// Negatives are head x tail pairs that are neither positive nor adjacent in
/// `graph`; they are assigned to folds the same way as positives.
pub fn split_links(
    graph: &HetGraph,
    positives: &[Link],
    k: usize,
    ratio: f64,
    seed: u64,
) -> Result<LinkDataset, GraphError> {
    if k < 2 {
        return Err(GraphError::Config(format!("fold count must be at least 2, got {k}")));
    }
    if !(ratio > 0.0 && ratio.is_finite()) {
        return Err(GraphError::Config(format!("negative ratio must be positive, got {ratio}")));
    }
    for l in positives {
        check_link(graph, l)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positive_folds = assign_folds(positives.len(), k, &mut rng);
    let wanted = (positives.len() as f64 * ratio).round() as usize;
    let negatives = sample_negatives(graph, positives, wanted, &mut rng)?;
    let negative_folds = assign_folds(negatives.len(), k, &mut rng);
    Ok(LinkDataset {
        positives: positives.to_vec(),
        negatives,
        positive_folds,
        negative_folds,
        folds: k,
        ratio,
    })
}

/// Fixed negatives (from a label file) with folds assigned like [`split_links`].
pub fn split_with_negatives(
    graph: &HetGraph,
    positives: &[Link],
    negatives: &[Link],
    k: usize,
    seed: u64,
) -> Result<LinkDataset, GraphError> {
    if k < 2 {
        return Err(GraphError::Config(format!("fold count must be at least 2, got {k}")));
    }
    let pos_set: HashSet<Link> = positives.iter().copied().collect();
    for l in positives.iter().chain(negatives) {
        check_link(graph, l)?;
    }
    if let Some(l) = negatives.iter().find(|l| pos_set.contains(l)) {
        return Err(GraphError::Config(format!(
            "link {} -> {} is labeled both positive and negative",
            graph.vocab().display_node(l.head),
            graph.vocab().display_node(l.tail)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positive_folds = assign_folds(positives.len(), k, &mut rng);
    let negative_folds = assign_folds(negatives.len(), k, &mut rng);
    let ratio = if positives.is_empty() { 0.0 } else { negatives.len() as f64 / positives.len() as f64 };
    Ok(LinkDataset {
        positives: positives.to_vec(),
        negatives: negatives.to_vec(),
        positive_folds,
        negative_folds,
        folds: k,
        ratio,
    })
}

fn check_link(graph: &HetGraph, l: &Link) -> Result<(), GraphError> {
    let vocab = graph.vocab();
    let h = graph.try_id(l.head).ok_or_else(|| GraphError::UnknownNode(format!("{:?}", l.head)))?;
    let t = graph.try_id(l.tail).ok_or_else(|| GraphError::UnknownNode(format!("{:?}", l.tail)))?;
    if !graph.is_head(h) {
        return Err(GraphError::Config(format!("{} is not of a head type", vocab.display_node(l.head))));
    }
    if !graph.is_tail(t) {
        return Err(GraphError::Config(format!("{} is not of a tail type", vocab.display_node(l.tail))));
    }
    Ok(())
}

fn sample_negatives(
    graph: &HetGraph,
    positives: &[Link],
    wanted: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Link>, GraphError> {
    let heads = graph.head_nodes();
    let tails = graph.tail_nodes();
    let forbidden: HashSet<(NodeId, NodeId)> =
        positives.iter().map(|l| (graph.id(l.head), graph.id(l.tail))).collect();
    let blocked = |h: NodeId, t: NodeId| h == t || forbidden.contains(&(h, t)) || graph.adjacent(h, t);

    let space = heads.len() * tails.len();
    // Rejection sampling while the candidate space is sparse in forbidden
    // pairs; exact enumeration otherwise.
    if space > 0 && wanted * 4 <= space && forbidden.len() * 4 <= space {
        let mut chosen = BTreeSet::new();
        let mut out = Vec::with_capacity(wanted);
        let max_draws = wanted.saturating_mul(64).max(1024);
        let mut draws = 0;
        while out.len() < wanted && draws < max_draws {
            draws += 1;
            let h = heads[rng.gen_range(0..heads.len())];
            let t = tails[rng.gen_range(0..tails.len())];
            if blocked(h, t) || !chosen.insert((h, t)) {
                continue;
            }
            out.push(Link::new(graph.node_ref(h), graph.node_ref(t)));
        }
        if out.len() == wanted {
            return Ok(out);
        }
    }
    let mut candidates: Vec<(NodeId, NodeId)> = Vec::new();
    for &h in &heads {
        for &t in &tails {
            if !blocked(h, t) {
                candidates.push((h, t));
            }
        }
    }
    if candidates.len() < wanted {
        return Err(GraphError::NegativeSpaceExhausted { requested: wanted, available: candidates.len() });
    }
    let picked = rand::seq::index::sample(rng, candidates.len(), wanted);
    Ok(picked
        .into_iter()
        .map(|i| {
            let (h, t) = candidates[i];
            Link::new(graph.node_ref(h), graph.node_ref(t))
        })
        .collect())
}

/// Hop count stored in a [`DistanceTable`] for nodes beyond the cap or disconnected.
pub const UNREACHABLE: u16 = u16::MAX;

/// Unweighted hop distances from one source, capped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceTable {
    pub source: NodeId,
    pub cap: u16,
    pub dist: Vec<u16>,
}

impl DistanceTable {
    #[inline]
    pub fn get(&self, node: NodeId) -> u16 {
        self.dist[node.index()]
    }

    pub fn is_reachable(&self, node: NodeId) -> bool {
        self.get(node) != UNREACHABLE
    }
}

/// Node pairs whose edges a traversal must skip (all edge types, both directions).
#[derive(Debug, Clone, Default)]
pub struct EdgeMask {
    pairs: HashSet<(NodeId, NodeId)>,
}

impl EdgeMask {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, a: NodeId, b: NodeId) {
        self.pairs.insert((a, b));
        self.pairs.insert((b, a));
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    #[inline]
    pub fn contains(&self, a: NodeId, b: NodeId) -> bool {
        self.pairs.contains(&(a, b))
    }
}

/// Breadth-first hop distances from `source`, up to `cap` hops.
pub fn bfs_distance(graph: &HetGraph, source: NodeId, cap: u16, excluded: Option<&EdgeMask>) -> DistanceTable {
    let mut dist = vec![UNREACHABLE; graph.node_count()];
    dist[source.index()] = 0;
    let mut queue = VecDeque::from([source]);
    while let Some(u) = queue.pop_front() {
        let du = dist[u.index()];
        if du >= cap {
            continue;
        }
        for (_, v) in graph.neighbors(u) {
            if dist[v.index()] != UNREACHABLE {
                continue;
            }
            if excluded.is_some_and(|m| m.contains(u, v)) {
                continue;
            }
            dist[v.index()] = du + 1;
            queue.push_back(v);
        }
    }
    DistanceTable { source, cap, dist }
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.type_id, self.local_id)
    }
}
