//! Training objectives: the supervised contrastive link term, pairwise
//! connection attention, and the attention-weighted observation term.
//!
//! All functions take the hidden matrix `H` of one sequence, laid out as
//! produced by the encoder: node rows at even indices, connection rows at
//! odd indices.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::graph::NodeId;
use crate::sampler::ConcentratedSequence;
use crate::tensor::TensorError;

/// Negative slope of the activation applied to pair attention logits.
pub const ATTENTION_SLOPE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error("label error: {0}")]
    Labels(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub temperature: f64,
    /// Weight of the observation term.
    pub obs_weight: f64,
    pub normalize_contrastive: bool,
    /// Use cosine instead of raw dot products in the observation term.
    pub normalize_observation: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { temperature: 0.1, obs_weight: 1.0, normalize_contrastive: true, normalize_observation: true }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(ObjectiveError::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.obs_weight >= 0.0) || !self.obs_weight.is_finite() {
            return Err(ObjectiveError::Config(format!("obs_weight must be non-negative, got {}", self.obs_weight)));
        }
        Ok(())
    }
}

/// Tail positions of one sequence that carry a known positive link with its head.
///
/// Position `j` refers to the `j`-th tail (0-based), i.e. row `2 * (j + 1)` of `H`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SequenceLabels {
    pub positives: Vec<usize>,
}

/// Labels every tail occurrence whose `(head, tail)` pair is in `positives`.
pub fn label_sequence(seq: &ConcentratedSequence, positives: &HashSet<(NodeId, NodeId)>) -> SequenceLabels {
    let positives = seq
        .steps
        .iter()
        .enumerate()
        .filter(|(_, s)| positives.contains(&(seq.head, s.tail)))
        .map(|(j, _)| j)
        .collect();
    SequenceLabels { positives }
}

pub fn label_corpus(corpus: &[ConcentratedSequence], positives: &HashSet<(NodeId, NodeId)>) -> Vec<SequenceLabels> {
    corpus.iter().map(|s| label_sequence(s, positives)).collect()
}

fn node_count(tape: &Tape, h: Var) -> Result<usize, ObjectiveError> {
    let rows = tape.value(h).rows();
    if rows % 2 == 0 {
        return Err(ObjectiveError::Tensor(TensorError::Shape {
            op: "objective",
            detail: format!("hidden matrix has {rows} rows, expected an odd token count"),
        }));
    }
    Ok(rows / 2 + 1)
}

/// Contrastive term of one sequence, `None` when it has no positive tail.
pub fn contrastive_term(
    tape: &mut Tape,
    h: Var,
    labels: &SequenceLabels,
    config: &LossConfig,
) -> Result<Option<Var>, ObjectiveError> {
    config.validate()?;
    if labels.positives.is_empty() {
        return Ok(None);
    }
    let tails = node_count(tape, h)? - 1;
    if let Some(&bad) = labels.positives.iter().find(|&&p| p >= tails) {
        return Err(ObjectiveError::Labels(format!("positive position {bad} but sequence has {tails} tails")));
    }
    let tail_rows: Vec<usize> = (1..=tails).map(|j| 2 * j).collect();
    let mut head = tape.slice_rows(h, 0, 1)?;
    let mut tail = tape.gather_rows(h, &tail_rows)?;
    if config.normalize_contrastive {
        head = tape.normalize_rows(head);
        tail = tape.normalize_rows(tail);
    }
    let sim = tape.matmul_nt(head, tail)?;
    let logits = tape.scale(sim, 1.0 / config.temperature);
    let log_p = tape.log_softmax_rows(logits);
    let col = tape.transpose(log_p);
    let picked = tape.gather_rows(col, &labels.positives)?;
    let total = tape.sum(picked);
    Ok(Some(tape.scale(total, -1.0 / labels.positives.len() as f64)))
}

/// Sum of [`contrastive_term`] over sequences; zero when no sequence has a positive.
pub fn contrastive_loss(
    tape: &mut Tape,
    hs: &[Var],
    labels: &[SequenceLabels],
    config: &LossConfig,
) -> Result<Var, ObjectiveError> {
    if hs.len() != labels.len() {
        return Err(ObjectiveError::Labels(format!("{} hidden matrices but {} label sets", hs.len(), labels.len())));
    }
    let mut terms = Vec::new();
    for (&h, l) in hs.iter().zip(labels) {
        if let Some(t) = contrastive_term(tape, h, l, config)? {
            terms.push(t);
        }
    }
    Ok(sum_terms(tape, &terms))
}

fn sum_terms(tape: &mut Tape, terms: &[Var]) -> Var {
    match terms.split_first() {
        None => tape.input(crate::tensor::Tensor::scalar(0.0)),
        Some((&first, rest)) => rest.iter().fold(first, |acc, &t| tape.add(acc, t).expect("scalar terms")),
    }
}

/// Left node, connection and right node rows of every consecutive pair.
fn pair_rows(tape: &mut Tape, h: Var, pairs: usize) -> Result<(Var, Var, Var), ObjectiveError> {
    let left: Vec<usize> = (0..pairs).map(|j| 2 * j).collect();
    let mid: Vec<usize> = (0..pairs).map(|j| 2 * j + 1).collect();
    let right: Vec<usize> = (0..pairs).map(|j| 2 * j + 2).collect();
    Ok((tape.gather_rows(h, &left)?, tape.gather_rows(h, &mid)?, tape.gather_rows(h, &right)?))
}

fn attention_from_rows(tape: &mut Tape, left: Var, mid: Var, right: Var, a: Var) -> Result<Var, ObjectiveError> {
    let d = tape.value(left).cols();
    if tape.value(a).shape() != [3 * d, 1] {
        return Err(ObjectiveError::Tensor(TensorError::Shape {
            op: "connection_attention",
            detail: format!("attention vector has shape {:?}, expected [{}, 1]", tape.value(a).shape(), 3 * d),
        }));
    }
    let cat = tape.concat_cols(&[left, mid, right])?;
    let z = tape.matmul(cat, a)?;
    let z = tape.leaky_relu(z, ATTENTION_SLOPE);
    let z = tape.transpose(z);
    Ok(tape.softmax_rows(z))
}

/// Pair attention `1 x (n - 1)` over the consecutive node pairs of one sequence.
pub fn connection_attention(tape: &mut Tape, h: Var, a: Var) -> Result<Option<Var>, ObjectiveError> {
    let pairs = node_count(tape, h)? - 1;
    if pairs == 0 {
        return Ok(None);
    }
    let (l, m, r) = pair_rows(tape, h, pairs)?;
    attention_from_rows(tape, l, m, r, a).map(Some)
}

/// Observation term of one sequence, `None` for a lone head.
pub fn observation_term(tape: &mut Tape, h: Var, a: Var, normalize: bool) -> Result<Option<Var>, ObjectiveError> {
    let pairs = node_count(tape, h)? - 1;
    if pairs == 0 {
        return Ok(None);
    }
    let (mut l, m, mut r) = pair_rows(tape, h, pairs)?;
    let alpha = attention_from_rows(tape, l, m, r, a)?;
    if normalize {
        l = tape.normalize_rows(l);
        r = tape.normalize_rows(r);
    }
    let prod = tape.mul(l, r)?;
    let dots = tape.sum_cols(prod);
    let weighted = tape.matmul(alpha, dots)?;
    Ok(Some(tape.scale(weighted, -1.0)))
}

pub fn observation_loss(tape: &mut Tape, hs: &[Var], a: Var, normalize: bool) -> Result<Var, ObjectiveError> {
    let mut terms = Vec::new();
    for &h in hs {
        if let Some(t) = observation_term(tape, h, a, normalize)? {
            terms.push(t);
        }
    }
    Ok(sum_terms(tape, &terms))
}

/// `contrastive + obs_weight * observation`.
pub fn total_loss(
    tape: &mut Tape,
    hs: &[Var],
    labels: &[SequenceLabels],
    a: Var,
    config: &LossConfig,
) -> Result<Var, ObjectiveError> {
    let con = contrastive_loss(tape, hs, labels, config)?;
    if config.obs_weight == 0.0 {
        return Ok(con);
    }
    let obs = observation_loss(tape, hs, a, config.normalize_observation)?;
    let obs = tape.scale(obs, config.obs_weight);
    Ok(tape.add(con, obs)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn cfg(t: f64, norm: bool) -> LossConfig {
        LossConfig { temperature: t, obs_weight: 1.0, normalize_contrastive: norm, normalize_observation: false }
    }

    #[test]
    fn uniform_similarity_gives_log_count() {
        // Head plus 4 tails, all rows identical.
        let mut t = Tape::new();
        let h = t.input(Tensor::full(&[9, 3], 0.7));
        let term = contrastive_term(&mut t, h, &SequenceLabels { positives: vec![1, 3] }, &cfg(0.1, true))
            .unwrap()
            .unwrap();
        assert!((t.scalar(term) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_tail_closed_form() {
        let mut t = Tape::new();
        let h = t.input(Tensor::from_rows(&[vec![1.0, 0.0], vec![5.0, 5.0], vec![1.0, 0.0], vec![-2.0, 3.0], vec![0.0, 1.0]]).unwrap());
        let term = contrastive_term(&mut t, h, &SequenceLabels { positives: vec![0] }, &cfg(1.0, false))
            .unwrap()
            .unwrap();
        assert!((t.scalar(term) - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((t.scalar(term) - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn no_positives_contribute_zero() {
        let mut t = Tape::new();
        let h = t.input(Tensor::full(&[5, 2], 1.0));
        let loss = contrastive_loss(&mut t, &[h, h], &[SequenceLabels::default(), SequenceLabels::default()], &cfg(0.1, true))
            .unwrap();
        assert_eq!(t.scalar(loss), 0.0);
    }

    #[test]
    fn bad_config_and_labels() {
        let mut t = Tape::new();
        let h = t.input(Tensor::full(&[3, 2], 1.0));
        let one = SequenceLabels { positives: vec![0] };
        assert!(matches!(contrastive_term(&mut t, h, &one, &cfg(0.0, true)), Err(ObjectiveError::Config(_))));
        assert!(matches!(
            contrastive_term(&mut t, h, &SequenceLabels { positives: vec![1] }, &cfg(1.0, true)),
            Err(ObjectiveError::Labels(_))
        ));
        let even = t.input(Tensor::full(&[4, 2], 1.0));
        assert!(contrastive_term(&mut t, even, &one, &cfg(1.0, true)).is_err());
        assert!(LossConfig { obs_weight: -1.0, ..LossConfig::default() }.validate().is_err());
    }

    #[test]
    fn attention_uniform_and_single() {
        let mut t = Tape::new();
        let h = t.input(Tensor::full(&[7, 2], 0.3));
        let a = t.input(Tensor::full(&[6, 1], 0.4));
        let alpha = connection_attention(&mut t, h, a).unwrap().unwrap();
        for &v in t.value(alpha).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let h1 = t.input(Tensor::randn(&[3, 2], 1.0, &mut crate::seed::rng(2)));
        let alpha = connection_attention(&mut t, h1, a).unwrap().unwrap();
        assert_eq!(t.value(alpha).data(), &[1.0]);
        let lone = t.input(Tensor::full(&[1, 2], 1.0));
        assert!(connection_attention(&mut t, lone, a).unwrap().is_none());
        let wrong = t.input(Tensor::full(&[5, 1], 1.0));
        assert!(connection_attention(&mut t, h, wrong).is_err());
    }

    #[test]
    fn observation_examples() {
        let mut t = Tape::new();
        let h = t.input(
            Tensor::from_rows(&[vec![1.0, 0.0], vec![3.0, 3.0], vec![0.0, 1.0], vec![1.0, 2.0], vec![2.0, 0.0]]).unwrap(),
        );
        let a = t.input(Tensor::randn(&[6, 1], 1.0, &mut crate::seed::rng(8)));
        let loss = observation_loss(&mut t, &[h], a, false).unwrap();
        assert_eq!(t.scalar(loss), 0.0);

        let h = t.input(Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap());
        let loss = observation_loss(&mut t, &[h], a, false).unwrap();
        assert_eq!(t.scalar(loss), -2.0);
    }

    #[test]
    fn attention_shift_invariance() {
        // Positive logits stay in the linear part of the activation, so a
        // shift of every logit leaves the softmax unchanged.
        let d = 2;
        let base = vec![vec![1.0, 0.5], vec![0.2, 0.1], vec![0.3, 0.8], vec![0.4, 0.4], vec![0.9, 0.1]];
        let a = Tensor::full(&[3 * d, 1], 1.0);
        let run = |shift: f64| {
            let rows: Vec<Vec<f64>> =
                base.iter().enumerate().map(|(i, r)| if i % 2 == 1 { vec![r[0] + shift, r[1]] } else { r.clone() }).collect();
            let mut t = Tape::new();
            let h = t.input(Tensor::from_rows(&rows).unwrap());
            let a = t.input(a.clone());
            let alpha = connection_attention(&mut t, h, a).unwrap().unwrap();
            t.value(alpha).clone()
        };
        let x = run(0.0);
        let y = run(2.5);
        for (p, q) in x.data().iter().zip(y.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
