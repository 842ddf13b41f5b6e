//! Pair scoring and the per-occurrence ensemble over sampled sequences.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::encoder::{hidden, ChatModel, EncoderError};
use crate::graph::{HetGraph, NodeId};
use crate::sampler::ConcentratedSequence;
use crate::tensor::TensorError;

/// Probabilities are kept this far from 0 and 1.
pub const PROB_EPS: f64 = 1e-15;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("invalid predictor configuration: {0}")]
    Config(String),
    #[error("head {0} has no sampled sequences; re-sample the inference corpus with this head included")]
    NoSequences(String),
    #[error("node {0} is not a tail of interest")]
    NotTail(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    pub d_mlp: usize,
    /// Feed the scalar inner product instead of the elementwise product.
    pub scalar_dot: bool,
    /// Add a cross-entropy term on sequence tails to the encoder objective.
    pub joint: bool,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Occurrences per training link used when fitting the predictor.
    pub max_occurrences: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self { d_mlp: 64, scalar_dot: false, joint: false, learning_rate: 1e-2, epochs: 200, max_occurrences: 16 }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<(), PredictorError> {
        if self.d_mlp == 0 || self.max_occurrences == 0 {
            return Err(PredictorError::Config("d_mlp and max_occurrences must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(PredictorError::Config(format!("learning_rate must be non-negative, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Pair logits for row-aligned head and tail matrices: `r x 1`.
pub fn pair_logits(tape: &mut Tape, model: &ChatModel, heads: Var, tails: Var) -> Result<Var, PredictorError> {
    let prod = tape.mul(heads, tails)?;
    let x = if model.predictor.scalar_dot { tape.sum_cols(prod) } else { prod };
    let w1 = tape.param(&model.params, model.ids.w1);
    let w2 = tape.param(&model.params, model.ids.w2);
    let z = tape.matmul(x, w1)?;
    let z = tape.relu(z);
    Ok(tape.matmul(z, w2)?)
}

/// Weighted binary cross-entropy on logits: `sum_i w_i * (softplus(z_i) - y_i z_i)`.
pub fn bce_with_logits(tape: &mut Tape, logits: Var, labels: &[f64], weights: &[f64]) -> Result<Var, PredictorError> {
    let r = labels.len();
    let y = tape.input(crate::tensor::Tensor::new(vec![r, 1], labels.to_vec())?);
    let w = tape.input(crate::tensor::Tensor::new(vec![r, 1], weights.to_vec())?);
    let sp = tape.softplus(logits);
    let yz = tape.mul(y, logits)?;
    let per = tape.sub(sp, yz)?;
    Ok(tape.dot(per, w)?)
}

fn sigmoid(z: f64) -> f64 {
    (1.0 / (1.0 + (-z).exp())).clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Raw logit of one pair, computed directly from the parameter values.
pub fn pair_logit(model: &ChatModel, h_head: &[f64], h_tail: &[f64]) -> Result<f64, PredictorError> {
    let d = model.config.d_out;
    if h_head.len() != d || h_tail.len() != d {
        return Err(PredictorError::Tensor(TensorError::Shape {
            op: "predict_pair",
            detail: format!("expected vectors of length {d}, got {} and {}", h_head.len(), h_tail.len()),
        }));
    }
    let w1 = model.params.value(model.ids.w1);
    let w2 = model.params.value(model.ids.w2);
    let x: Vec<f64> = if model.predictor.scalar_dot {
        vec![h_head.iter().zip(h_tail).map(|(a, b)| a * b).sum()]
    } else {
        h_head.iter().zip(h_tail).map(|(a, b)| a * b).collect()
    };
    let m = w1.cols();
    let mut hidden = vec![0.0; m];
    for (i, &xi) in x.iter().enumerate() {
        let row = w1.row_slice(i);
        for (hj, &w) in hidden.iter_mut().zip(row) {
            *hj += xi * w;
        }
    }
    Ok(hidden.iter().zip(w2.data()).map(|(&h, &w)| h.max(0.0) * w).sum())
}

pub fn predict_pair(model: &ChatModel, h_head: &[f64], h_tail: &[f64]) -> Result<f64, PredictorError> {
    pair_logit(model, h_head, h_tail).map(sigmoid)
}

/// Mean that depends only on the multiset of values: equal values are grouped
/// and each distinct value is weighted by its exact frequency.
pub fn multiset_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let z = values.len() as f64;
    let mut total = 0.0;
    let mut i = 0;
    while i < values.len() {
        let j = i + values[i..].iter().take_while(|&&v| v.to_bits() == values[i].to_bits()).count();
        total += ((j - i) as f64 / z) * values[i];
        i = j;
    }
    total
}

fn mean_vector<'a>(rows: impl Iterator<Item = &'a [f64]>, d: usize) -> Vec<f64> {
    let rows: Vec<&[f64]> = rows.collect();
    (0..d)
        .map(|c| {
            let mut col: Vec<f64> = rows.iter().map(|r| r[c]).collect();
            multiset_mean(&mut col)
        })
        .collect()
}

/// Hidden representations of one encoded sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceReps {
    pub head: NodeId,
    pub head_rep: Vec<f64>,
    pub tails: Vec<(NodeId, Vec<f64>)>,
}

impl SequenceReps {
    pub fn from_hidden(seq: &ConcentratedSequence, h: &crate::tensor::Tensor) -> Self {
        let tails = seq.steps.iter().enumerate().map(|(j, s)| (s.tail, h.row_slice(2 * (j + 1)).to_vec())).collect();
        Self { head: seq.head, head_rep: h.row_slice(0).to_vec(), tails }
    }
}

/// Representations of every node occurrence in an inference corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationIndex {
    pub sequences: Vec<SequenceReps>,
    by_head: HashMap<NodeId, Vec<usize>>,
    /// `(head, tail) -> (sequence, tail position)` occurrences.
    pairs: HashMap<(NodeId, NodeId), Vec<(usize, usize)>>,
    tail_occurrences: HashMap<NodeId, Vec<(usize, usize)>>,
    /// Singleton encodings of tails absent from the corpus.
    singletons: HashMap<NodeId, Vec<f64>>,
    d: usize,
}

impl RepresentationIndex {
    /// Encodes `corpus` and every tail node of `graph` that never occurs in it.
    pub fn build(model: &ChatModel, graph: &HetGraph, corpus: &[ConcentratedSequence]) -> Result<Self, PredictorError> {
        let sequences = corpus
            .par_iter()
            .map(|seq| Ok(SequenceReps::from_hidden(seq, &hidden(model, seq)?)))
            .collect::<Result<Vec<_>, PredictorError>>()?;
        let mut index = Self::from_reps(sequences, model.config.d_out);
        let missing: Vec<NodeId> =
            graph.tail_nodes().into_iter().filter(|t| !index.tail_occurrences.contains_key(t)).collect();
        let encoded = missing
            .par_iter()
            .map(|&t| {
                let seq = ConcentratedSequence { head: t, steps: Vec::new(), distances: vec![0] };
                Ok((t, hidden(model, &seq)?.row_slice(0).to_vec()))
            })
            .collect::<Result<Vec<_>, PredictorError>>()?;
        index.singletons.extend(encoded);
        Ok(index)
    }

    pub fn from_reps(sequences: Vec<SequenceReps>, d: usize) -> Self {
        let mut by_head: HashMap<NodeId, Vec<usize>> = HashMap::new();
        let mut pairs: HashMap<(NodeId, NodeId), Vec<(usize, usize)>> = HashMap::new();
        let mut tail_occurrences: HashMap<NodeId, Vec<(usize, usize)>> = HashMap::new();
        for (i, s) in sequences.iter().enumerate() {
            by_head.entry(s.head).or_default().push(i);
            for (j, (t, _)) in s.tails.iter().enumerate() {
                pairs.entry((s.head, *t)).or_default().push((i, j));
                tail_occurrences.entry(*t).or_default().push((i, j));
            }
        }
        Self { sequences, by_head, pairs, tail_occurrences, singletons: HashMap::new(), d }
    }

    pub fn insert_singleton(&mut self, tail: NodeId, rep: Vec<f64>) {
        self.singletons.insert(tail, rep);
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn has_head(&self, head: NodeId) -> bool {
        self.by_head.contains_key(&head)
    }

    /// Head and tail representations of every occurrence of `tail` in `head`'s sequences.
    pub fn occurrences(&self, head: NodeId, tail: NodeId) -> Vec<(&[f64], &[f64])> {
        self.pairs
            .get(&(head, tail))
            .map(|occ| {
                occ.iter()
                    .map(|&(i, j)| {
                        let s = &self.sequences[i];
                        (s.head_rep.as_slice(), s.tails[j].1.as_slice())
                    })
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn mean_head_rep(&self, head: NodeId) -> Option<Vec<f64>> {
        let seqs = self.by_head.get(&head)?;
        Some(mean_vector(seqs.iter().map(|&i| self.sequences[i].head_rep.as_slice()), self.d))
    }

    /// Mean over all corpus occurrences, or the singleton encoding when there are none.
    pub fn mean_tail_rep(&self, tail: NodeId) -> Option<Vec<f64>> {
        match self.tail_occurrences.get(&tail) {
            Some(occ) => Some(mean_vector(occ.iter().map(|&(i, j)| self.sequences[i].tails[j].1.as_slice()), self.d)),
            None => self.singletons.get(&tail).cloned(),
        }
    }
}

/// Averaged pair score over every occurrence of `tail` within `head`'s sequences.
pub fn ensemble_predict(
    model: &ChatModel,
    graph: &HetGraph,
    index: &RepresentationIndex,
    head: NodeId,
    tail: NodeId,
) -> Result<f64, PredictorError> {
    if !index.has_head(head) {
        return Err(PredictorError::NoSequences(graph.display(head)));
    }
    let occ = index.occurrences(head, tail);
    if occ.is_empty() {
        return fallback_predict(model, graph, index, head, tail);
    }
    let mut scores = occ
        .iter()
        .map(|(h, t)| predict_pair(model, h, t))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(multiset_mean(&mut scores))
}

/// Score from the averaged head and tail representations.
pub fn fallback_predict(
    model: &ChatModel,
    graph: &HetGraph,
    index: &RepresentationIndex,
    head: NodeId,
    tail: NodeId,
) -> Result<f64, PredictorError> {
    let h = index.mean_head_rep(head).ok_or_else(|| PredictorError::NoSequences(graph.display(head)))?;
    let t = index.mean_tail_rep(tail).ok_or_else(|| PredictorError::NotTail(graph.display(tail)))?;
    predict_pair(model, &h, &t)
}
