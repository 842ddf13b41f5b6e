//! Connection-aware transformer encoder.
//!
//! A concentrated sequence of `n` interest nodes becomes `2n - 1` tokens:
//! node tokens carry the node feature plus a hop-distance encoding, and the
//! connection tokens between them carry the connection encoding plus the
//! shared `[EDG]` row. All tokens go through one shared input projection and
//! a stack of pre-normalized self-attention blocks.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::graph::{HetGraph, NodeId, UNREACHABLE};
use crate::predictor::PredictorConfig;
use crate::sampler::{ConcentratedSequence, Connection};
use crate::tensor::{ParamId, ParamSet, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid encoder configuration: {0}")]
    Config(String),
    #[error("sequence data error: {0}")]
    Data(String),
}

/// Maps connection tuples to rows of the connection-encoding table. Row 0 is UNK.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConnectionVocab {
    index: HashMap<Connection, usize>,
    tuples: Vec<Connection>,
}

impl ConnectionVocab {
    pub const UNK: usize = 0;

    pub fn new() -> Self {
        Self::default()
    }

    /// Row for `tuple`; unseen tuples get a new row unless `frozen`, in which case UNK.
    pub fn lookup(&mut self, tuple: &Connection, frozen: bool) -> usize {
        if let Some(&i) = self.index.get(tuple) {
            return i;
        }
        if frozen {
            return Self::UNK;
        }
        self.tuples.push(tuple.clone());
        let i = self.tuples.len();
        self.index.insert(tuple.clone(), i);
        i
    }

    /// Frozen lookup.
    pub fn get(&self, tuple: &Connection) -> usize {
        self.index.get(tuple).copied().unwrap_or(Self::UNK)
    }

    /// Number of known tuples (table rows = `len() + 1`).
    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    /// Known tuples in row order, starting at row 1.
    pub fn tuples(&self) -> &[Connection] {
        &self.tuples
    }

    pub fn from_tuples(tuples: Vec<Connection>) -> Self {
        let index = tuples.iter().enumerate().map(|(i, t)| (t.clone(), i + 1)).collect();
        Self { index, tuples }
    }

    pub fn extend_from_corpus(&mut self, corpus: &[ConcentratedSequence]) {
        for seq in corpus {
            for step in &seq.steps {
                self.lookup(&step.connection, false);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    /// Largest distance with its own encoding row; one more row holds UNREACHABLE.
    pub distance_cap: u16,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { layers: 4, heads: 8, d_in: 512, d_hidden: 256, d_out: 128, distance_cap: 10, dropout: 0.0 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let dims = [("layers", self.layers), ("heads", self.heads), ("d_in", self.d_in), ("d_hidden", self.d_hidden), ("d_out", self.d_out)];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(EncoderError::Config(format!("{name} must be positive")));
        }
        if self.d_hidden % self.heads != 0 {
            return Err(EncoderError::Config(format!(
                "d_hidden {} is not divisible by {} heads",
                self.d_hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(EncoderError::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    /// Per-head width; attention logits are scaled by `1 / sqrt(head_dim)`.
    pub fn head_dim(&self) -> usize {
        self.d_hidden / self.heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockIds {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub ff1: ParamId,
    pub ff1_bias: ParamId,
    pub ff2: ParamId,
    pub ff2_bias: ParamId,
}

/// Parameter handles of a [`ChatModel`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelIds {
    pub node_embeddings: ParamId,
    pub distance_table: ParamId,
    pub edg: ParamId,
    pub connections: ParamId,
    pub w_in: ParamId,
    pub blocks: Vec<BlockIds>,
    pub final_gain: ParamId,
    pub final_bias: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
    /// Pairwise connection attention vector, length `3 * d_out`.
    pub attention: ParamId,
    pub w1: ParamId,
    pub w2: ParamId,
}

/// Encoder parameters plus the lookup state needed to embed sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatModel {
    pub config: EncoderConfig,
    pub predictor: PredictorConfig,
    pub params: ParamSet,
    pub ids: ModelIds,
    pub vocab: ConnectionVocab,
    /// Embedding row of each graph node, `u32::MAX` for nodes not of interest.
    node_rows: Vec<u32>,
}

const NO_ROW: u32 = u32::MAX;

/// Embedding rows for every head- or tail-typed node, in node id order.
pub fn interest_rows(graph: &HetGraph) -> Vec<u32> {
    let mut next = 0;
    (0..graph.node_count() as u32)
        .map(|i| {
            let v = NodeId(i);
            if graph.is_head(v) || graph.is_tail(v) {
                next += 1;
                next - 1
            } else {
                NO_ROW
            }
        })
        .collect()
}

impl ChatModel {
    /// Fresh model. `vocab` must already hold every training-time connection.
    pub fn new<R: Rng + ?Sized>(
        config: EncoderConfig,
        predictor: PredictorConfig,
        graph: &HetGraph,
        vocab: ConnectionVocab,
        rng: &mut R,
    ) -> Result<Self, EncoderError> {
        config.validate()?;
        predictor.validate().map_err(|e| EncoderError::Config(e.to_string()))?;
        let node_rows = interest_rows(graph);
        let n_interest = node_rows.iter().filter(|&&r| r != NO_ROW).count();
        let (d_in, dh, d_out) = (config.d_in, config.d_hidden, config.d_out);
        let glorot = |fan_in: usize| (1.0 / fan_in as f64).sqrt();
        let mut p = ParamSet::new();
        let node_embeddings = p.add("node_embeddings", Tensor::randn(&[n_interest.max(1), d_in], 1.0, rng));
        let distance_table =
            p.add("distance_table", Tensor::randn(&[config.distance_cap as usize + 2, d_in], 1.0, rng));
        let edg = p.add("edg", Tensor::randn(&[1, d_in], 1.0, rng));
        let connections = p.add("connections", Tensor::randn(&[vocab.len() + 1, d_in], 1.0, rng));
        let w_in = p.add("w_in", Tensor::randn(&[d_in, dh], glorot(d_in), rng));
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let name = |s: &str| format!("block{l}.{s}");
            blocks.push(BlockIds {
                ln1_gain: p.add(name("ln1_gain"), Tensor::full(&[1, dh], 1.0)),
                ln1_bias: p.add(name("ln1_bias"), Tensor::zeros(&[1, dh])),
                wq: p.add(name("wq"), Tensor::randn(&[dh, dh], glorot(dh), rng)),
                wk: p.add(name("wk"), Tensor::randn(&[dh, dh], glorot(dh), rng)),
                wv: p.add(name("wv"), Tensor::randn(&[dh, dh], glorot(dh), rng)),
                wo: p.add(name("wo"), Tensor::randn(&[dh, dh], glorot(dh), rng)),
                bo: p.add(name("bo"), Tensor::zeros(&[1, dh])),
                ln2_gain: p.add(name("ln2_gain"), Tensor::full(&[1, dh], 1.0)),
                ln2_bias: p.add(name("ln2_bias"), Tensor::zeros(&[1, dh])),
                ff1: p.add(name("ff1"), Tensor::randn(&[dh, 2 * dh], glorot(dh), rng)),
                ff1_bias: p.add(name("ff1_bias"), Tensor::zeros(&[1, 2 * dh])),
                ff2: p.add(name("ff2"), Tensor::randn(&[2 * dh, dh], glorot(2 * dh), rng)),
                ff2_bias: p.add(name("ff2_bias"), Tensor::zeros(&[1, dh])),
            });
        }
        let final_gain = p.add("final_gain", Tensor::full(&[1, dh], 1.0));
        let final_bias = p.add("final_bias", Tensor::zeros(&[1, dh]));
        let w_out = p.add("w_out", Tensor::randn(&[dh, d_out], glorot(dh), rng));
        let b_out = p.add("b_out", Tensor::zeros(&[1, d_out]));
        let attention = p.add("attention", Tensor::randn(&[3 * d_out, 1], glorot(3 * d_out), rng));
        let mlp_in = if predictor.scalar_dot { 1 } else { d_out };
        let w1 = p.add("w1", Tensor::randn(&[mlp_in, predictor.d_mlp], glorot(mlp_in), rng));
        let w2 = p.add("w2", Tensor::randn(&[predictor.d_mlp, 1], glorot(predictor.d_mlp), rng));
        let ids = ModelIds {
            node_embeddings,
            distance_table,
            edg,
            connections,
            w_in,
            blocks,
            final_gain,
            final_bias,
            w_out,
            b_out,
            attention,
            w1,
            w2,
        };
        Ok(Self { config, predictor, params: p, ids, vocab, node_rows })
    }

    /// Rebuilds the node-row mapping for a graph with the same node set.
    pub fn with_node_rows(mut self, graph: &HetGraph) -> Result<Self, EncoderError> {
        let rows = interest_rows(graph);
        let n = rows.iter().filter(|&&r| r != NO_ROW).count();
        if n.max(1) != self.params.value(self.ids.node_embeddings).rows() {
            return Err(EncoderError::Data(format!(
                "graph has {n} interest nodes, model has {} embedding rows",
                self.params.value(self.ids.node_embeddings).rows()
            )));
        }
        self.node_rows = rows;
        Ok(self)
    }

    pub fn node_row(&self, node: NodeId) -> Option<usize> {
        self.node_rows.get(node.index()).copied().filter(|&r| r != NO_ROW).map(|r| r as usize)
    }

    /// Distance-table row for a hop count: exact up to the cap, last row for UNREACHABLE.
    pub fn distance_row(&self, dist: u16) -> usize {
        let cap = self.config.distance_cap;
        if dist == UNREACHABLE {
            cap as usize + 1
        } else {
            dist.min(cap) as usize
        }
    }
}

/// Builds the `(2n - 1) x d_in` token matrix of a sequence.
pub fn embed_sequence(tape: &mut Tape, model: &ChatModel, seq: &ConcentratedSequence) -> Result<Var, EncoderError> {
    let n = seq.node_count();
    if seq.distances.len() != n {
        return Err(EncoderError::Data(format!(
            "sequence has {n} nodes but {} distance labels",
            seq.distances.len()
        )));
    }
    let mut node_rows = Vec::with_capacity(n);
    for v in seq.nodes() {
        node_rows.push(model.node_row(v).ok_or_else(|| EncoderError::Data(format!("node {} has no embedding", v.0)))?);
    }
    let mut dist_rows: Vec<usize> = seq.distances.iter().map(|&d| model.distance_row(d)).collect();
    // The head always takes the zero-distance row.
    dist_rows[0] = 0;
    let conn_rows: Vec<usize> = seq.steps.iter().map(|s| model.vocab.get(&s.connection)).collect();

    let ids = &model.ids;
    let x = tape.lookup(&model.params, ids.node_embeddings, &node_rows)?;
    let d = tape.lookup(&model.params, ids.distance_table, &dist_rows)?;
    let node_tokens = tape.add(x, d)?;
    if n == 1 {
        return Ok(node_tokens);
    }
    let c = tape.lookup(&model.params, ids.connections, &conn_rows)?;
    let edg = tape.param(&model.params, ids.edg);
    let conn_tokens = tape.add_row(c, edg)?;
    let stacked = tape.concat_rows(&[node_tokens, conn_tokens])?;
    // Interleave: node 0, conn 0, node 1, conn 1, ..., node n-1.
    let order: Vec<usize> = (0..2 * n - 1).map(|t| if t % 2 == 0 { t / 2 } else { n + t / 2 }).collect();
    Ok(tape.gather_rows(stacked, &order)?)
}

/// Padded batch layout: `lengths[b]` valid tokens per sequence, each padded to `width` rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchLayout {
    pub lengths: Vec<usize>,
    pub width: usize,
}

impl BatchLayout {
    pub fn mask(&self, b: usize) -> Vec<bool> {
        (0..self.width).map(|j| j < self.lengths[b]).collect()
    }
}

/// Multi-head self-attention sublayer over a padded batch `x` of shape `(B * width) x d_hidden`.
pub fn self_attention(
    tape: &mut Tape,
    model: &ChatModel,
    block: &BlockIds,
    x: Var,
    layout: &BatchLayout,
) -> Result<Var, EncoderError> {
    let p = &model.params;
    let heads = model.config.heads;
    let hd = model.config.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let wq = tape.param(p, block.wq);
    let wk = tape.param(p, block.wk);
    let wv = tape.param(p, block.wv);
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let batch = layout.lengths.len();
    let mut per_seq = Vec::with_capacity(batch);
    for b in 0..batch {
        let (qb, kb, vb) = if batch == 1 {
            (q, k, v)
        } else {
            let start = b * layout.width;
            (
                tape.slice_rows(q, start, layout.width)?,
                tape.slice_rows(k, start, layout.width)?,
                tape.slice_rows(v, start, layout.width)?,
            )
        };
        let mask = layout.mask(b);
        let mut head_out = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (qb, kb, vb)
            } else {
                (tape.slice_cols(qb, h * hd, hd)?, tape.slice_cols(kb, h * hd, hd)?, tape.slice_cols(vb, h * hd, hd)?)
            };
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let weights = tape.masked_softmax_rows(scores, &mask)?;
            head_out.push(tape.matmul(weights, vh)?);
        }
        per_seq.push(if heads == 1 { head_out[0] } else { tape.concat_cols(&head_out)? });
    }
    let joined = if batch == 1 { per_seq[0] } else { tape.concat_rows(&per_seq)? };
    let wo = tape.param(p, block.wo);
    let bo = tape.param(p, block.bo);
    let out = tape.matmul(joined, wo)?;
    Ok(tape.add_row(out, bo)?)
}

fn dropout<R: Rng + ?Sized>(tape: &mut Tape, x: Var, rate: f64, rng: Option<&mut R>) -> Result<Var, EncoderError> {
    let Some(rng) = rng else { return Ok(x) };
    if rate == 0.0 {
        return Ok(x);
    }
    let shape = tape.value(x).shape().to_vec();
    let keep = 1.0 / (1.0 - rate);
    let n = shape.iter().product();
    let mask: Vec<f64> = (0..n).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
    let m = tape.input(Tensor::new(shape, mask)?);
    Ok(tape.mul(x, m)?)
}

/// Runs the transformer over a padded token batch of shape `(B * width) x d_in`.
///
/// Returns `(B * width) x d_out` with entries in `(-1, 1)`; rows past each sequence's length are padding
/// and carry no meaning. Valid rows never depend on padding rows.
pub fn encode_padded<R: Rng + ?Sized>(
    tape: &mut Tape,
    model: &ChatModel,
    tokens: Var,
    layout: &BatchLayout,
    mut rng: Option<&mut R>,
) -> Result<Var, EncoderError> {
    let cfg = &model.config;
    let (rows, cols) = (tape.value(tokens).rows(), tape.value(tokens).cols());
    if cols != cfg.d_in {
        return Err(EncoderError::Tensor(TensorError::Shape {
            op: "encode",
            detail: format!("token dimension {cols} does not match d_in {}", cfg.d_in),
        }));
    }
    if rows != layout.lengths.len() * layout.width || layout.lengths.iter().any(|&l| l > layout.width) {
        return Err(EncoderError::Data(format!(
            "batch of {rows} rows does not match layout {:?} x {}",
            layout.lengths, layout.width
        )));
    }
    let p = &model.params;
    let ids = &model.ids;
    let w_in = tape.param(p, ids.w_in);
    let mut x = tape.matmul(tokens, w_in)?;
    for block in &ids.blocks {
        let g = tape.param(p, block.ln1_gain);
        let b = tape.param(p, block.ln1_bias);
        let h = tape.layer_norm(x, g, b)?;
        let a = self_attention(tape, model, block, h, layout)?;
        let a = dropout(tape, a, cfg.dropout, rng.as_deref_mut())?;
        x = tape.add(x, a)?;

        let g = tape.param(p, block.ln2_gain);
        let b = tape.param(p, block.ln2_bias);
        let h = tape.layer_norm(x, g, b)?;
        let w1 = tape.param(p, block.ff1);
        let b1 = tape.param(p, block.ff1_bias);
        let w2 = tape.param(p, block.ff2);
        let b2 = tape.param(p, block.ff2_bias);
        let f = tape.matmul(h, w1)?;
        let f = tape.add_row(f, b1)?;
        let f = tape.relu(f);
        let f = tape.matmul(f, w2)?;
        let f = tape.add_row(f, b2)?;
        let f = dropout(tape, f, cfg.dropout, rng.as_deref_mut())?;
        x = tape.add(x, f)?;
    }
    let g = tape.param(p, ids.final_gain);
    let b = tape.param(p, ids.final_bias);
    let h = tape.layer_norm(x, g, b)?;
    let w_out = tape.param(p, ids.w_out);
    let b_out = tape.param(p, ids.b_out);
    let out = tape.matmul(h, w_out)?;
    let out = tape.add_row(out, b_out)?;
    Ok(tape.tanh(out))
}

/// Embeds and encodes one sequence without padding: `(2n - 1) x d_out`.
pub fn encode_sequence(tape: &mut Tape, model: &ChatModel, seq: &ConcentratedSequence) -> Result<Var, EncoderError> {
    let tokens = embed_sequence(tape, model, seq)?;
    let layout = BatchLayout { lengths: vec![seq.token_count()], width: seq.token_count() };
    encode_padded::<rand_chacha::ChaCha8Rng>(tape, model, tokens, &layout, None)
}

/// Pads token matrices with zero rows, encodes them as one batch and returns the valid rows of each.
pub fn encode_batch(tape: &mut Tape, model: &ChatModel, tokens: &[Var]) -> Result<Vec<Var>, EncoderError> {
    let lengths: Vec<usize> = tokens.iter().map(|&t| tape.value(t).rows()).collect();
    let width = lengths.iter().copied().max().unwrap_or(0);
    let d_in = model.config.d_in;
    let mut parts = Vec::with_capacity(tokens.len() * 2);
    for (&t, &len) in tokens.iter().zip(&lengths) {
        parts.push(t);
        if len < width {
            parts.push(tape.input(Tensor::zeros(&[width - len, d_in])));
        }
    }
    let batch = tape.concat_rows(&parts)?;
    let layout = BatchLayout { lengths: lengths.clone(), width };
    let out = encode_padded::<rand_chacha::ChaCha8Rng>(tape, model, batch, &layout, None)?;
    lengths
        .iter()
        .enumerate()
        .map(|(b, &len)| Ok(tape.slice_rows(out, b * width, len)?))
        .collect()
}

/// Operation count of one self-attention sublayer over `tokens` valid tokens.
pub fn attention_flops(model: &ChatModel, tokens: usize) -> Result<u64, EncoderError> {
    let block = model
        .ids
        .blocks
        .first()
        .ok_or_else(|| EncoderError::Config("model has no blocks".into()))?;
    let mut tape = Tape::new();
    let x = tape.input(Tensor::full(&[tokens, model.config.d_hidden], 0.5));
    let layout = BatchLayout { lengths: vec![tokens], width: tokens };
    let before = tape.flops();
    self_attention(&mut tape, model, block, x, &layout)?;
    Ok(tape.flops() - before)
}

/// Forward-only hidden matrix of one sequence.
pub fn hidden(model: &ChatModel, seq: &ConcentratedSequence) -> Result<Tensor, EncoderError> {
    let mut tape = Tape::new();
    let h = encode_sequence(&mut tape, model, seq)?;
    Ok(tape.value(h).clone())
}
