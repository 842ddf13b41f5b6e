//! Optimization: Adam, shuffled mini-batch epochs, predictor fitting and
//! early stopping on a validation score.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::encoder::{embed_sequence, encode_padded, BatchLayout, ChatModel, ConnectionVocab, EncoderConfig, EncoderError};
use crate::graph::{HetGraph, NodeId};
use crate::metrics;
use crate::objectives::{contrastive_term, observation_term, LossConfig, ObjectiveError, SequenceLabels};
use crate::predictor::{bce_with_logits, ensemble_predict, pair_logits, PredictorConfig, PredictorError, RepresentationIndex};
use crate::sampler::{ConcentratedSequence, Connection};
use crate::seed;
use crate::tensor::{read_json, write_json, Gradients, ParamId, ParamSet, Tensor, TensorError, TensorRecord};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss {loss} in epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize, loss: f64 },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, max_epochs: 1000, patience: 20, batch_size: 64, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.max_epochs == 0 || self.patience == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("max_epochs, patience and batch_size must be positive".into()));
        }
        if self.patience >= self.max_epochs {
            return Err(TrainError::Config(format!(
                "patience {} must be smaller than max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(TrainError::Config(format!("learning_rate must be non-negative, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Adam moments for every parameter of a [`ParamSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One update of `ids` from the gradients stored in `params`.
    pub fn update(&mut self, params: &mut ParamSet, ids: &[ParamId]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for &id in ids {
            let p = params.get_mut(id);
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                value[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Parameters updated by the encoder objective.
pub fn encoder_param_ids(model: &ChatModel) -> Vec<ParamId> {
    let skip = [model.ids.w1, model.ids.w2];
    model.params.ids().filter(|id| model.predictor.joint || !skip.contains(id)).collect()
}

/// Loss of one sequence: contrastive + weighted observation, plus the
/// cross-entropy term in joint mode. `None` for sequences without a pair.
pub fn sequence_loss(
    tape: &mut Tape,
    model: &ChatModel,
    seq: &ConcentratedSequence,
    labels: &SequenceLabels,
    loss: &LossConfig,
    dropout_seed: Option<u64>,
) -> Result<Option<Var>, TrainError> {
    if seq.node_count() < 2 {
        return Ok(None);
    }
    let tokens = embed_sequence(tape, model, seq)?;
    let layout = BatchLayout { lengths: vec![seq.token_count()], width: seq.token_count() };
    let mut rng = dropout_seed.map(seed::rng);
    let h = encode_padded(tape, model, tokens, &layout, rng.as_mut())?;
    let mut total = match contrastive_term(tape, h, labels, loss)? {
        Some(c) => c,
        None => tape.input(Tensor::scalar(0.0)),
    };
    if loss.obs_weight != 0.0 {
        let a = tape.param(&model.params, model.ids.attention);
        if let Some(o) = observation_term(tape, h, a, loss.normalize_observation)? {
            let o = tape.scale(o, loss.obs_weight);
            total = tape.add(total, o)?;
        }
    }
    if model.predictor.joint {
        let tails = seq.steps.len();
        let heads = tape.gather_rows(h, &vec![0; tails])?;
        let rows: Vec<usize> = (1..=tails).map(|j| 2 * j).collect();
        let tail_h = tape.gather_rows(h, &rows)?;
        let z = pair_logits(tape, model, heads, tail_h)?;
        let y: Vec<f64> = (0..tails).map(|j| if labels.positives.contains(&j) { 1.0 } else { 0.0 }).collect();
        let bce = bce_with_logits(tape, z, &y, &vec![1.0 / tails as f64; tails])?;
        total = tape.add(total, bce)?;
    }
    Ok(Some(total))
}

/// Mean loss and summed gradients of a batch, reduced in batch order.
pub fn batch_gradients(
    model: &ChatModel,
    corpus: &[ConcentratedSequence],
    labels: &[SequenceLabels],
    batch: &[usize],
    loss: &LossConfig,
    dropout_seed: Option<u64>,
) -> Result<(f64, Gradients, usize), TrainError> {
    let parts = batch
        .par_iter()
        .map(|&i| {
            let mut tape = Tape::new();
            let ds = dropout_seed.map(|s| seed::derive(s, i as u64));
            match sequence_loss(&mut tape, model, &corpus[i], &labels[i], loss, ds)? {
                Some(l) => Ok(Some((tape.scalar(l), tape.backward(l)?))),
                None => Ok(None),
            }
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let mut total = 0.0;
    let mut grads = Gradients::default();
    let mut n = 0;
    for (l, g) in parts.into_iter().flatten() {
        total += l;
        grads.merge(&g);
        n += 1;
    }
    Ok((total, grads, n))
}

fn is_non_finite(e: &TrainError) -> bool {
    use TensorError::NonFinite as N;
    matches!(
        e,
        TrainError::Tensor(N { .. })
            | TrainError::Encoder(EncoderError::Tensor(N { .. }))
            | TrainError::Objective(ObjectiveError::Tensor(N { .. }))
            | TrainError::Predictor(PredictorError::Tensor(N { .. }))
            | TrainError::Predictor(PredictorError::Encoder(EncoderError::Tensor(N { .. })))
    )
}

/// One pass over the corpus in seeded shuffled batches. Returns the mean batch loss.
pub fn train_epoch(
    model: &mut ChatModel,
    optimizer: &mut Adam,
    corpus: &[ConcentratedSequence],
    labels: &[SequenceLabels],
    loss: &LossConfig,
    config: &TrainConfig,
    epoch: usize,
) -> Result<f64, TrainError> {
    if corpus.len() != labels.len() {
        return Err(TrainError::Config(format!("{} sequences but {} label sets", corpus.len(), labels.len())));
    }
    let mut order: Vec<usize> = (0..corpus.len()).filter(|&i| corpus[i].node_count() >= 2).collect();
    if order.is_empty() {
        return Err(TrainError::Config("corpus has no sequence with at least two nodes".into()));
    }
    let epoch_seed = seed::derive(config.seed, epoch as u64);
    order.shuffle(&mut seed::rng(epoch_seed));
    let ids = encoder_param_ids(model);
    let dropout = (model.config.dropout > 0.0).then_some(epoch_seed);
    let mut sum = 0.0;
    let mut batches = 0;
    for (b, batch) in order.chunks(config.batch_size).enumerate() {
        let (total, grads, n) = batch_gradients(model, corpus, labels, batch, loss, dropout.map(|s| seed::derive(s, b as u64)))
            .map_err(|e| if is_non_finite(&e) { TrainError::NonFinite { epoch, batch: b, loss: f64::NAN } } else { e })?;
        let mean = total / n as f64;
        if !mean.is_finite() {
            return Err(TrainError::NonFinite { epoch, batch: b, loss: mean });
        }
        model.params.zero_grad();
        model.params.accumulate(&grads, 1.0 / n as f64);
        optimizer.update(&mut model.params, &ids);
        sum += mean;
        batches += 1;
    }
    Ok(sum / batches as f64)
}

/// A labeled head-tail query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabeledLink {
    pub head: NodeId,
    pub tail: NodeId,
    pub label: bool,
}

/// Fits the pair predictor on frozen representations by full-batch Adam.
///
/// Each link contributes equally; its occurrences (at most `max_occurrences`)
/// share the link's weight. Returns the final loss.
pub fn train_predictor(
    model: &mut ChatModel,
    index: &RepresentationIndex,
    links: &[LabeledLink],
) -> Result<f64, TrainError> {
    let cfg = model.predictor;
    let d = index.dim();
    let mut heads = Vec::new();
    let mut tails = Vec::new();
    let mut y = Vec::new();
    let mut w = Vec::new();
    let usable: Vec<&LabeledLink> = links.iter().filter(|l| index.has_head(l.head)).collect();
    for link in &usable {
        let occ = index.occurrences(link.head, link.tail);
        let rows: Vec<(Vec<f64>, Vec<f64>)> = if occ.is_empty() {
            match (index.mean_head_rep(link.head), index.mean_tail_rep(link.tail)) {
                (Some(h), Some(t)) => vec![(h, t)],
                _ => continue,
            }
        } else {
            occ.iter().take(cfg.max_occurrences).map(|(h, t)| (h.to_vec(), t.to_vec())).collect()
        };
        let weight = 1.0 / (rows.len() * usable.len()) as f64;
        for (h, t) in rows {
            heads.extend(h);
            tails.extend(t);
            y.push(if link.label { 1.0 } else { 0.0 });
            w.push(weight);
        }
    }
    if y.is_empty() {
        return Err(TrainError::Validation("no training link has a sampled head".into()));
    }
    let r = y.len();
    let hh = Tensor::new(vec![r, d], heads)?;
    let ht = Tensor::new(vec![r, d], tails)?;
    let ids = [model.ids.w1, model.ids.w2];
    let mut adam = Adam::new(&model.params, cfg.learning_rate);
    let mut last = f64::NAN;
    for _ in 0..cfg.epochs {
        let mut tape = Tape::new();
        let a = tape.input(hh.clone());
        let b = tape.input(ht.clone());
        let z = pair_logits(&mut tape, model, a, b)?;
        let l = bce_with_logits(&mut tape, z, &y, &w)?;
        last = tape.scalar(l);
        let grads = tape.backward(l)?;
        model.params.zero_grad();
        model.params.accumulate(&grads, 1.0);
        adam.update(&mut model.params, &ids);
    }
    Ok(last)
}

/// Scores links with the ensemble predictor, in parallel and in input order.
pub fn score_links(
    model: &ChatModel,
    graph: &HetGraph,
    index: &RepresentationIndex,
    links: &[LabeledLink],
) -> Result<Vec<(f64, bool)>, TrainError> {
    links
        .par_iter()
        .map(|l| Ok((ensemble_predict(model, graph, index, l.head, l.tail)?, l.label)))
        .collect()
}

/// Per-epoch validation score; higher is better.
pub trait Validator {
    fn score(&mut self, model: &mut ChatModel, epoch: usize) -> Result<f64, TrainError>;
}

/// Validation AUC of the ensemble predictor refitted on the training links.
pub struct LinkValidator<'a> {
    pub graph: &'a HetGraph,
    pub corpus: &'a [ConcentratedSequence],
    pub train_links: &'a [LabeledLink],
    pub val_links: &'a [LabeledLink],
}

impl Validator for LinkValidator<'_> {
    fn score(&mut self, model: &mut ChatModel, _epoch: usize) -> Result<f64, TrainError> {
        let index = RepresentationIndex::build(model, self.graph, self.corpus)?;
        train_predictor(model, &index, self.train_links)?;
        let scores = score_links(model, self.graph, &index, self.val_links)?;
        metrics::auc(&scores).ok_or_else(|| TrainError::Validation("validation links contain a single class".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    /// Model at the best validation epoch.
    pub model: ChatModel,
    pub optimizer: Adam,
    pub log: Vec<LogRow>,
    pub best_epoch: usize,
    pub best_score: f64,
}

/// Trains until `patience` epochs pass without a validation improvement.
pub fn fit<V: Validator>(
    mut model: ChatModel,
    corpus: &[ConcentratedSequence],
    labels: &[SequenceLabels],
    loss: &LossConfig,
    config: &TrainConfig,
    validator: &mut V,
) -> Result<FitResult, TrainError> {
    config.validate()?;
    loss.validate()?;
    let mut optimizer = Adam::new(&model.params, config.learning_rate);
    let mut log = Vec::new();
    let mut best: Option<(ChatModel, Adam, usize, f64)> = None;
    let mut bad = 0;
    for epoch in 1..=config.max_epochs {
        let train_loss = train_epoch(&mut model, &mut optimizer, corpus, labels, loss, config, epoch)?;
        let score = validator.score(&mut model, epoch)?;
        log.push(LogRow { epoch, train_loss, val_auc: score });
        if best.as_ref().map_or(true, |b| score > b.3) {
            best = Some((model.clone(), optimizer.clone(), epoch, score));
            bad = 0;
        } else {
            bad += 1;
            if bad >= config.patience {
                break;
            }
        }
    }
    let (model, optimizer, best_epoch, best_score) = best.expect("at least one epoch runs");
    Ok(FitResult { model, optimizer, log, best_epoch, best_score })
}

pub fn write_train_log<W: Write>(rows: &[LogRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "epoch,train_loss,val_auc")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.epoch, r.train_loss, r.val_auc)?;
    }
    Ok(())
}

/// Serialized model, vocabulary and optional optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub encoder: EncoderConfig,
    pub predictor: PredictorConfig,
    pub vocab: Vec<Connection>,
    pub params: Vec<TensorRecord>,
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    pub fn capture(model: &ChatModel, optimizer: Option<&Adam>) -> Self {
        Self {
            encoder: model.config,
            predictor: model.predictor,
            vocab: model.vocab.tuples().to_vec(),
            params: model.params.to_records(),
            optimizer: optimizer.cloned(),
        }
    }

    /// Rebuilds the model over `graph`, which must have the training node set.
    pub fn restore(&self, graph: &HetGraph) -> Result<ChatModel, TrainError> {
        let vocab = ConnectionVocab::from_tuples(self.vocab.clone());
        let mut model = ChatModel::new(self.encoder, self.predictor, graph, vocab, &mut seed::rng(0))?;
        model.params.load_records(&self.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        Ok(write_json(path, self)?)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Ok(read_json(path)?)
    }
}
