//! End-to-end experiments: data loading or synthesis, fold preparation,
//! training, ensemble evaluation, reports and the sample-size sweep.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tape;
use crate::encoder::{encode_sequence, ChatModel, ConnectionVocab, EncoderConfig, EncoderError};
use crate::graph::{
    build_graph, parse_edge_file, parse_link_file, split_links, split_with_negatives, EdgeList, EdgeMask, GraphError,
    HetGraph, Interest, Link, LinkDataset, NodeId,
};
use crate::metrics::{self, Metrics};
use crate::objectives::{connection_attention, label_corpus, LossConfig, ObjectiveError, SequenceLabels};
use crate::predictor::{PredictorConfig, RepresentationIndex};
use crate::sampler::{sample_corpus_masked, ConcentratedSequence, Connection, SamplerConfig, SamplerError};
use crate::seed;
use crate::trainer::{fit, score_links, Checkpoint, FitResult, LabeledLink, LinkValidator, LogRow, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("invalid experiment configuration: {0}")]
    Config(String),
    #[error("leakage detected: {0}")]
    Leakage(String),
    #[error("{0}")]
    Data(String),
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

/// Planted two-level community graph with a non-interest bridge type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub heads: usize,
    pub tails: usize,
    pub bridges: usize,
    pub communities: usize,
    /// Bridges each head and tail attaches to, inside its community.
    pub bridges_per_node: usize,
    /// Edge probability between two bridges of the same community.
    pub bridge_link_prob: f64,
    /// Link probability for same-community pairs sharing a bridge.
    pub shared_prob: f64,
    /// Link probability for other same-community pairs.
    pub intra_prob: f64,
    pub inter_prob: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            heads: 100,
            tails: 80,
            bridges: 40,
            communities: 2,
            bridges_per_node: 3,
            bridge_link_prob: 0.1,
            shared_prob: 0.7,
            intra_prob: 0.03,
            inter_prob: 0.01,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let per = |n: usize| n / self.communities.max(1);
        if self.communities == 0 || self.heads == 0 || self.tails == 0 {
            return Err(ExperimentError::Config("synthetic graph needs heads, tails and communities".into()));
        }
        if self.bridges_per_node > per(self.bridges) {
            return Err(ExperimentError::Config(format!(
                "{} bridges per node but only {} bridges per community",
                self.bridges_per_node,
                per(self.bridges)
            )));
        }
        for p in [self.bridge_link_prob, self.shared_prob, self.intra_prob, self.inter_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ExperimentError::Config(format!("probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

pub const SYNTHETIC_HEAD: &str = "head";
pub const SYNTHETIC_TAIL: &str = "tail";
pub const SYNTHETIC_BRIDGE: &str = "bridge";
pub const SYNTHETIC_LINK: &str = "interacts";

/// Generates the planted graph. Returns its edges and the head-tail links among them.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<(EdgeList, Vec<Link>), ExperimentError> {
    config.validate()?;
    let mut rng = seed::rng(seed);
    let c = config.communities;
    let community = |i: usize| i % c;
    let bridges_of: Vec<Vec<usize>> =
        (0..c).map(|k| (0..config.bridges).filter(|&b| community(b) == k).collect()).collect();
    let attach = |i: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<usize> {
        let mut own = bridges_of[community(i)].clone();
        own.shuffle(rng);
        own.truncate(config.bridges_per_node);
        own.sort_unstable();
        own
    };
    let head_bridges: Vec<Vec<usize>> = (0..config.heads).map(|i| attach(i, &mut rng)).collect();
    let tail_bridges: Vec<Vec<usize>> = (0..config.tails).map(|i| attach(i, &mut rng)).collect();

    let mut edges = EdgeList::new();
    let name = |p: &str, i: usize| format!("{p}{i}");
    for (h, bs) in head_bridges.iter().enumerate() {
        for &b in bs {
            edges.push_named(SYNTHETIC_HEAD, &name("h", h), "head_bridge", SYNTHETIC_BRIDGE, &name("b", b));
        }
    }
    for (t, bs) in tail_bridges.iter().enumerate() {
        for &b in bs {
            edges.push_named(SYNTHETIC_TAIL, &name("t", t), "tail_bridge", SYNTHETIC_BRIDGE, &name("b", b));
        }
    }
    for a in 0..config.bridges {
        for b in a + 1..config.bridges {
            if community(a) == community(b) && rng.gen::<f64>() < config.bridge_link_prob {
                edges.push_named(SYNTHETIC_BRIDGE, &name("b", a), "bridge_bridge", SYNTHETIC_BRIDGE, &name("b", b));
            }
        }
    }
    let mut pairs = Vec::new();
    for h in 0..config.heads {
        for t in 0..config.tails {
            let p = if community(h) != community(t) {
                config.inter_prob
            } else if head_bridges[h].iter().any(|b| tail_bridges[t].contains(b)) {
                config.shared_prob
            } else {
                config.intra_prob
            };
            if rng.gen::<f64>() < p {
                edges.push_named(SYNTHETIC_HEAD, &name("h", h), SYNTHETIC_LINK, SYNTHETIC_TAIL, &name("t", t));
                pairs.push((h, t));
            }
        }
    }
    let vocab = &edges.vocab;
    let links = pairs
        .into_iter()
        .map(|(h, t)| {
            Link::new(
                vocab.lookup_node(SYNTHETIC_HEAD, &name("h", h)).expect("interned"),
                vocab.lookup_node(SYNTHETIC_TAIL, &name("t", t)).expect("interned"),
            )
        })
        .collect();
    Ok((edges, links))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Files {
        edges: PathBuf,
        /// Label file; rows labeled 1 are positives, 0 are fixed negatives.
        links: PathBuf,
        head_types: Vec<String>,
        tail_types: Vec<String>,
        #[serde(default)]
        directed: bool,
    },
    Synthetic(SyntheticConfig),
}

fn default_folds() -> usize {
    10
}
fn default_ratio() -> f64 {
    1.0
}
fn default_validation() -> f64 {
    0.1
}
fn default_top() -> usize {
    30
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub predictor: PredictorConfig,
    #[serde(default = "default_folds")]
    pub folds: usize,
    /// Evaluate only the first `run_folds` folds.
    #[serde(default)]
    pub run_folds: Option<usize>,
    /// Negatives drawn per positive when the label file has none.
    #[serde(default = "default_ratio")]
    pub negative_ratio: f64,
    /// Share of training links held out for early stopping.
    #[serde(default = "default_validation")]
    pub validation_fraction: f64,
    /// Keep training positives as edges of the training graph.
    #[serde(default = "default_true")]
    pub train_links_in_graph: bool,
    /// Ignore a head's own training-positive edges when computing its distance labels.
    #[serde(default)]
    pub mask_own_links: bool,
    #[serde(default = "default_top")]
    pub importance_top: usize,
    #[serde(default)]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text).map_err(|source| ExperimentError::Json { path: path.to_path_buf(), source })
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.sampler.validate()?;
        self.encoder.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.predictor.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        if self.sampler.distance_cap != self.encoder.distance_cap {
            return Err(ExperimentError::Config(format!(
                "sampler distance_cap {} differs from encoder distance_cap {}",
                self.sampler.distance_cap, self.encoder.distance_cap
            )));
        }
        if self.folds < 2 {
            return Err(ExperimentError::Config(format!("folds must be at least 2, got {}", self.folds)));
        }
        if let Some(n) = self.run_folds {
            if n == 0 || n > self.folds {
                return Err(ExperimentError::Config(format!("run_folds must be in 1..={}, got {n}", self.folds)));
            }
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(ExperimentError::Config(format!(
                "validation_fraction must be in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        match &self.data {
            DataSource::Files { edges, links, .. } => {
                for p in [edges, links] {
                    if !p.is_file() {
                        return Err(ExperimentError::Config(format!("file {} does not exist", p.display())));
                    }
                }
            }
            DataSource::Synthetic(s) => s.validate()?,
        }
        Ok(())
    }

    pub fn fold_count_to_run(&self) -> usize {
        self.run_folds.unwrap_or(self.folds)
    }
}

/// Full graph plus the fold assignment of its labeled links.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub graph: HetGraph,
    pub links: LinkDataset,
}

pub fn load_dataset(config: &ExperimentConfig) -> Result<Dataset, ExperimentError> {
    let split_seed = seed::derive_named(config.seed, "split");
    match &config.data {
        DataSource::Synthetic(s) => {
            let (edges, positives) = generate_synthetic(s, seed::derive_named(config.seed, "synthetic"))?;
            let graph = build_graph(&edges, &Interest::new(&[SYNTHETIC_HEAD], &[SYNTHETIC_TAIL]), false)?;
            let links = split_links(&graph, &positives, config.folds, config.negative_ratio, split_seed)?;
            Ok(Dataset { graph, links })
        }
        DataSource::Files { edges, links, head_types, tail_types, directed } => {
            let list = parse_edge_file(edges)?;
            let heads: Vec<&str> = head_types.iter().map(String::as_str).collect();
            let tails: Vec<&str> = tail_types.iter().map(String::as_str).collect();
            let graph = build_graph(&list, &Interest::new(&heads, &tails), *directed)?;
            let (pos, neg) = parse_link_file(links, graph.vocab())?;
            let links = if neg.is_empty() {
                split_links(&graph, &pos, config.folds, config.negative_ratio, split_seed)?
            } else {
                split_with_negatives(&graph, &pos, &neg, config.folds, split_seed)?
            };
            Ok(Dataset { graph, links })
        }
    }
}

/// Seeds of one fold, all derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FoldSeeds {
    pub validation: u64,
    pub sampler: u64,
    pub init: u64,
    pub trainer: u64,
}

impl FoldSeeds {
    pub fn new(master: u64, fold: usize) -> Self {
        let f = seed::derive(seed::derive_named(master, "fold"), fold as u64);
        Self {
            validation: seed::derive_named(f, "validation"),
            sampler: seed::derive_named(f, "sampler"),
            init: seed::derive_named(f, "init"),
            trainer: seed::derive_named(f, "trainer"),
        }
    }
}

/// Everything one fold trains and evaluates on.
#[derive(Debug, Clone)]
pub struct FoldData {
    pub fold: usize,
    pub seeds: FoldSeeds,
    /// Training graph: held-out positives removed.
    pub graph: HetGraph,
    pub corpus: Vec<ConcentratedSequence>,
    pub labels: Vec<SequenceLabels>,
    pub train_positives: HashSet<(NodeId, NodeId)>,
    pub train_links: Vec<LabeledLink>,
    pub val_links: Vec<LabeledLink>,
    pub test_links: Vec<LabeledLink>,
}

fn carve<T: Clone>(items: &[T], fraction: f64, rng: &mut rand_chacha::ChaCha8Rng) -> (Vec<T>, Vec<T>) {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(rng);
    let n = ((items.len() as f64) * fraction).ceil() as usize;
    let n = n.min(items.len().saturating_sub(1));
    let mut held: Vec<usize> = order[..n].to_vec();
    let mut kept: Vec<usize> = order[n..].to_vec();
    held.sort_unstable();
    kept.sort_unstable();
    (kept.iter().map(|&i| items[i].clone()).collect(), held.iter().map(|&i| items[i].clone()).collect())
}

fn labeled(graph: &HetGraph, links: &[Link], label: bool) -> Vec<LabeledLink> {
    links.iter().map(|l| LabeledLink { head: graph.id(l.head), tail: graph.id(l.tail), label }).collect()
}

pub fn prepare_fold(config: &ExperimentConfig, data: &Dataset, fold: usize) -> Result<FoldData, ExperimentError> {
    let seeds = FoldSeeds::new(config.seed, fold);
    let mut rng = seed::rng(seeds.validation);
    let (train_pos, val_pos) = carve(&data.links.train_positives(fold), config.validation_fraction, &mut rng);
    let (train_neg, val_neg) = carve(&data.links.train_negatives(fold), config.validation_fraction, &mut rng);
    let test_pos = data.links.fold_positives(fold);
    let test_neg = data.links.fold_negatives(fold);

    let mut removed: Vec<Link> = test_pos.iter().chain(&val_pos).copied().collect();
    if !config.train_links_in_graph {
        removed.extend(&train_pos);
    }
    let graph = data.graph.without_links(&removed)?;

    let train_positives: HashSet<(NodeId, NodeId)> =
        train_pos.iter().map(|l| (graph.id(l.head), graph.id(l.tail))).collect();
    let mut own: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
    for &(h, t) in &train_positives {
        own.entry(h).or_default().push(t);
    }
    let sampler = SamplerConfig { seed: seeds.sampler, ..config.sampler };
    let mask = |head: NodeId| {
        if !config.mask_own_links {
            return None;
        }
        own.get(&head).map(|tails| {
            let mut m = EdgeMask::new();
            for &t in tails {
                m.insert(head, t);
            }
            m
        })
    };
    let corpus = sample_corpus_masked(&graph, &graph.head_nodes(), &sampler, mask)?;
    let labels = label_corpus(&corpus, &train_positives);

    let mut train_links = labeled(&graph, &train_pos, true);
    train_links.extend(labeled(&graph, &train_neg, false));
    let mut val_links = labeled(&graph, &val_pos, true);
    val_links.extend(labeled(&graph, &val_neg, false));
    let mut test_links = labeled(&graph, &test_pos, true);
    test_links.extend(labeled(&graph, &test_neg, false));

    let fold_data = FoldData { fold, seeds, graph, corpus, labels, train_positives, train_links, val_links, test_links };
    leakage_audit(&fold_data)?;
    Ok(fold_data)
}

/// Held-out positives must be absent from the training graph and from every label set.
pub fn leakage_audit(fold: &FoldData) -> Result<(), ExperimentError> {
    let held = fold.test_links.iter().chain(&fold.val_links).filter(|l| l.label);
    for l in held {
        if fold.graph.adjacent(l.head, l.tail) {
            return Err(ExperimentError::Leakage(format!(
                "held-out link {} -> {} is an edge of the training graph",
                fold.graph.display(l.head),
                fold.graph.display(l.tail)
            )));
        }
        if fold.train_positives.contains(&(l.head, l.tail)) {
            return Err(ExperimentError::Leakage(format!(
                "held-out link {} -> {} is a training label",
                fold.graph.display(l.head),
                fold.graph.display(l.tail)
            )));
        }
    }
    for (seq, lab) in fold.corpus.iter().zip(&fold.labels) {
        for &p in &lab.positives {
            if !fold.train_positives.contains(&(seq.head, seq.steps[p].tail)) {
                return Err(ExperimentError::Leakage("sequence label outside the training positives".into()));
            }
        }
    }
    Ok(())
}

/// Fresh model for a fold, with the connection vocabulary of its corpus.
pub fn init_model(config: &ExperimentConfig, fold: &FoldData) -> Result<ChatModel, ExperimentError> {
    let mut vocab = ConnectionVocab::new();
    vocab.extend_from_corpus(&fold.corpus);
    Ok(ChatModel::new(config.encoder, config.predictor, &fold.graph, vocab, &mut seed::rng(fold.seeds.init))?)
}

pub fn train_fold(config: &ExperimentConfig, fold: &FoldData) -> Result<FitResult, ExperimentError> {
    let model = init_model(config, fold)?;
    let train = TrainConfig { seed: fold.seeds.trainer, ..config.train };
    let mut validator = LinkValidator {
        graph: &fold.graph,
        corpus: &fold.corpus,
        train_links: &fold.train_links,
        val_links: &fold.val_links,
    };
    Ok(fit(model, &fold.corpus, &fold.labels, &config.loss, &train, &mut validator)?)
}

/// Degree-product scores on the training positives.
pub fn degree_baseline(fold: &FoldData) -> Vec<(f64, bool)> {
    let mut degree: HashMap<NodeId, u64> = HashMap::new();
    for &(h, t) in &fold.train_positives {
        *degree.entry(h).or_default() += 1;
        *degree.entry(t).or_default() += 1;
    }
    let d = |n: NodeId| degree.get(&n).copied().unwrap_or(0) as f64;
    fold.test_links.iter().map(|l| (d(l.head) * d(l.tail), l.label)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub accuracy: f64,
    pub f1: f64,
    pub auc: Option<f64>,
    pub aupr: Option<f64>,
    pub baseline_auc: Option<f64>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub head: String,
    pub tail: String,
    pub score: f64,
    pub label: bool,
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub report: FoldReport,
    pub predictions: Vec<Prediction>,
    pub log: Vec<LogRow>,
    pub checkpoint: Checkpoint,
    pub importance: Vec<ImportanceRow>,
}

/// Scores the fold's test links with a trained model.
pub fn evaluate_fold(model: &ChatModel, fold: &FoldData) -> Result<(Metrics, Vec<Prediction>), ExperimentError> {
    let index = RepresentationIndex::build(model, &fold.graph, &fold.corpus).map_err(TrainError::from)?;
    let scores = score_links(model, &fold.graph, &index, &fold.test_links)?;
    let predictions = fold
        .test_links
        .iter()
        .zip(&scores)
        .map(|(l, &(score, label))| Prediction {
            head: fold.graph.display(l.head),
            tail: fold.graph.display(l.tail),
            score,
            label,
        })
        .collect();
    Ok((metrics::evaluate_metrics(&scores), predictions))
}

pub fn run_fold(config: &ExperimentConfig, data: &Dataset, fold: usize) -> Result<FoldOutcome, ExperimentError> {
    let fd = prepare_fold(config, data, fold)?;
    let fitted = train_fold(config, &fd)?;
    let (m, predictions) = evaluate_fold(&fitted.model, &fd)?;
    let baseline_auc = metrics::auc(&degree_baseline(&fd));
    let importance = importance_report(&fitted.model, &fd.corpus, config.importance_top)?;
    let report = FoldReport {
        fold,
        accuracy: m.accuracy,
        f1: m.f1,
        auc: m.auc,
        aupr: m.aupr,
        baseline_auc,
        best_epoch: fitted.best_epoch,
        best_val_auc: fitted.best_score,
    };
    let checkpoint = Checkpoint::capture(&fitted.model, Some(&fitted.optimizer));
    Ok(FoldOutcome { report, predictions, log: fitted.log, checkpoint, importance })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation.
pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some(Summary { mean, std: var.sqrt() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub accuracy: Option<Summary>,
    pub f1: Option<Summary>,
    pub auc: Option<Summary>,
    pub aupr: Option<Summary>,
    pub baseline_auc: Option<Summary>,
}

impl Aggregate {
    pub fn of(folds: &[FoldReport]) -> Self {
        let col = |f: &dyn Fn(&FoldReport) -> Option<f64>| summarize(&folds.iter().filter_map(f).collect::<Vec<_>>());
        Self {
            accuracy: col(&|r| Some(r.accuracy)),
            f1: col(&|r| Some(r.f1)),
            auc: col(&|r| r.auc),
            aupr: col(&|r| r.aupr),
            baseline_auc: col(&|r| r.baseline_auc),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub folds: Vec<FoldOutcome>,
    pub aggregate: Aggregate,
}

/// Runs every configured fold. Fold results do not depend on `parallel_folds`.
pub fn run_experiment(config: &ExperimentConfig, parallel_folds: usize) -> Result<ExperimentReport, ExperimentError> {
    config.validate()?;
    let data = load_dataset(config)?;
    let folds: Vec<usize> = (0..config.fold_count_to_run()).collect();
    let outcomes = if parallel_folds > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel_folds)
            .build()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        pool.install(|| folds.par_iter().map(|&f| run_fold(config, &data, f)).collect::<Result<Vec<_>, _>>())?
    } else {
        folds.iter().map(|&f| run_fold(config, &data, f)).collect::<Result<Vec<_>, _>>()?
    };
    let reports: Vec<FoldReport> = outcomes.iter().map(|o| o.report.clone()).collect();
    Ok(ExperimentReport { aggregate: Aggregate::of(&reports), folds: outcomes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRow {
    pub rank: usize,
    pub tuple: String,
    pub mean_alpha: f64,
    pub occurrences: usize,
}

/// Mean pair attention per connection tuple over the corpus, top `top` by mean.
pub fn connection_importance(
    model: &ChatModel,
    corpus: &[ConcentratedSequence],
) -> Result<Vec<(Connection, f64, usize)>, ExperimentError> {
    let per_seq = corpus
        .par_iter()
        .filter(|s| s.node_count() >= 2)
        .map(|seq| {
            let mut tape = Tape::new();
            let h = encode_sequence(&mut tape, model, seq)?;
            let a = tape.param(&model.params, model.ids.attention);
            let alpha = connection_attention(&mut tape, h, a)?.expect("sequence has a pair");
            Ok(tape.value(alpha).data().to_vec())
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    let mut sums: BTreeMap<&Connection, (f64, usize)> = BTreeMap::new();
    for (seq, alpha) in corpus.iter().filter(|s| s.node_count() >= 2).zip(&per_seq) {
        for (step, &a) in seq.steps.iter().zip(alpha) {
            let e = sums.entry(&step.connection).or_insert((0.0, 0));
            e.0 += a;
            e.1 += 1;
        }
    }
    let mut rows: Vec<(Connection, f64, usize)> =
        sums.into_iter().map(|(c, (s, n))| (c.clone(), s / n as f64, n)).collect();
    rows.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(rows)
}

pub fn importance_report(
    model: &ChatModel,
    corpus: &[ConcentratedSequence],
    top: usize,
) -> Result<Vec<ImportanceRow>, ExperimentError> {
    if corpus.iter().all(|s| s.node_count() < 2) {
        return Err(ExperimentError::Data("corpus has no connection to rank".into()));
    }
    Ok(connection_importance(model, corpus)?
        .into_iter()
        .take(top)
        .enumerate()
        .map(|(i, (c, mean_alpha, occurrences))| ImportanceRow {
            rank: i + 1,
            tuple: c.to_string(),
            mean_alpha,
            occurrences,
        })
        .collect())
}

/// Replaces edge-type ids in importance rows with names.
pub fn name_importance(rows: &mut [ImportanceRow], corpus_tuples: &[(Connection, String)]) {
    let names: HashMap<String, &String> = corpus_tuples.iter().map(|(c, n)| (c.to_string(), n)).collect();
    for r in rows {
        if let Some(n) = names.get(&r.tuple) {
            r.tuple = (*n).clone();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub m: usize,
    pub auc_mean: f64,
    pub auc_std: f64,
}

/// Reruns sampling, training and evaluation for every `(m, repeat)`.
///
/// Repeat `r` uses the same derived seed for every `m`, so rows differ only in sample size.
pub fn sensitivity_sweep(
    config: &ExperimentConfig,
    ms: &[usize],
    repeats: usize,
) -> Result<Vec<SweepRow>, ExperimentError> {
    if ms.is_empty() || ms.iter().any(|&m| m == 0) || ms.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ExperimentError::Config("m values must be positive and strictly ascending".into()));
    }
    if repeats == 0 {
        return Err(ExperimentError::Config("repeats must be at least 1".into()));
    }
    let sweep_seed = seed::derive_named(config.seed, "sweep");
    ms.iter()
        .map(|&m| {
            let aucs = (0..repeats)
                .map(|r| {
                    let mut c = config.clone();
                    c.sampler.samples_per_head = m;
                    c.seed = seed::derive(sweep_seed, r as u64);
                    let report = run_experiment(&c, 1)?;
                    report
                        .aggregate
                        .auc
                        .map(|s| s.mean)
                        .ok_or_else(|| ExperimentError::Data("test folds contain a single class".into()))
                })
                .collect::<Result<Vec<f64>, ExperimentError>>()?;
            let s = summarize(&aucs).expect("repeats > 0");
            Ok(SweepRow { m, auc_mean: s.mean, auc_std: s.std })
        })
        .collect()
}

/// Tolerance of [`gradient_suite`] on the relative gradient error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Finite-difference check of every parameter through embedding, encoder and
/// total loss, on a small synthetic graph with 3-node sequences.
pub fn gradient_suite(seed: u64) -> Result<crate::autodiff::GradCheck, ExperimentError> {
    let syn = SyntheticConfig {
        heads: 3,
        tails: 4,
        bridges: 3,
        communities: 1,
        bridges_per_node: 2,
        bridge_link_prob: 0.5,
        shared_prob: 0.6,
        intra_prob: 0.3,
        inter_prob: 0.0,
    };
    let (edges, positives) = generate_synthetic(&syn, seed::derive_named(seed, "synthetic"))?;
    let graph = build_graph(&edges, &Interest::new(&[SYNTHETIC_HEAD], &[SYNTHETIC_TAIL]), false)?;
    let sampler = SamplerConfig { max_inner: 2, length: 3, samples_per_head: 1, seed, ..SamplerConfig::default() };
    let corpus = crate::sampler::sample_corpus(&graph, &graph.head_nodes(), &sampler)?;
    let pos: HashSet<(NodeId, NodeId)> = positives.iter().map(|l| (graph.id(l.head), graph.id(l.tail))).collect();
    let labels = label_corpus(&corpus, &pos);
    let mut vocab = ConnectionVocab::new();
    vocab.extend_from_corpus(&corpus);
    let enc = EncoderConfig { layers: 2, heads: 2, d_in: 16, d_hidden: 8, d_out: 8, distance_cap: 10, dropout: 0.0 };
    let pred = PredictorConfig { d_mlp: 4, ..PredictorConfig::default() };
    let model = ChatModel::new(enc, pred, &graph, vocab, &mut seed::rng(seed::derive_named(seed, "init")))?;
    let loss = LossConfig { temperature: 0.5, ..LossConfig::default() };
    let ids: Vec<_> = model.params.ids().collect();
    let lift = |e: ObjectiveError| match e {
        ObjectiveError::Tensor(t) => t,
        other => crate::tensor::TensorError::Usage(other.to_string()),
    };
    Ok(crate::autodiff::check_gradients(&model.params, &ids, 1e-5, |tape, params| {
        let mut m = model.clone();
        m.params = params.clone();
        let mut hs = Vec::with_capacity(corpus.len());
        for seq in &corpus {
            hs.push(encode_sequence(tape, &m, seq).map_err(|e| match e {
                EncoderError::Tensor(t) => t,
                other => crate::tensor::TensorError::Usage(other.to_string()),
            })?);
        }
        let a = tape.param(&m.params, m.ids.attention);
        crate::objectives::total_loss(tape, &hs, &labels, a, &loss).map_err(lift)
    })?)
}

fn csv_field(text: &str) -> String {
    if text.contains([',', '"', '\n']) {
        format!("\"{}\"", text.replace('"', "\"\""))
    } else {
        text.to_string()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

fn create(path: &Path) -> Result<BufWriter<File>, ExperimentError> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), ExperimentError> {
    let mut out = create(path)?;
    f(&mut out).and_then(|_| out.flush()).map_err(io_err(path))
}

pub fn write_importance(path: &Path, rows: &[ImportanceRow]) -> Result<(), ExperimentError> {
    write_with(path, |out| {
        writeln!(out, "rank,tuple,mean_alpha,occurrences")?;
        for r in rows {
            writeln!(out, "{},{},{},{}", r.rank, csv_field(&r.tuple), r.mean_alpha, r.occurrences)?;
        }
        Ok(())
    })
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<(), ExperimentError> {
    write_with(path, |out| {
        writeln!(out, "m,auc_mean,auc_std")?;
        for r in rows {
            writeln!(out, "{},{},{}", r.m, r.auc_mean, r.auc_std)?;
        }
        Ok(())
    })
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<(), ExperimentError> {
    write_with(path, |out| {
        writeln!(out, "head\ttail\tscore\tlabel")?;
        for p in predictions {
            writeln!(out, "{}\t{}\t{}\t{}", p.head, p.tail, p.score, u8::from(p.label))?;
        }
        Ok(())
    })
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<(), ExperimentError> {
    write_with(path, |out| crate::trainer::write_train_log(rows, out))
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    folds: Vec<&'a FoldReport>,
    aggregate: &'a Aggregate,
}

/// Writes `metrics.json`, `metrics.csv`, `predictions.tsv`, `importance.csv`,
/// `train_log.csv` and one checkpoint per fold into `dir`.
pub fn write_report(dir: &Path, graph_names: &HetGraph, report: &ExperimentReport) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let metrics = MetricsFile { folds: report.folds.iter().map(|f| &f.report).collect(), aggregate: &report.aggregate };
    let json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    let path = dir.join("metrics.json");
    std::fs::write(&path, json + "\n").map_err(io_err(&path))?;

    write_with(&dir.join("metrics.csv"), |out| {
        writeln!(out, "fold,accuracy,f1,auc,aupr,baseline_auc")?;
        for f in &report.folds {
            let r = &f.report;
            writeln!(out, "{},{},{},{},{},{}", r.fold, r.accuracy, r.f1, opt(r.auc), opt(r.aupr), opt(r.baseline_auc))?;
        }
        let a = &report.aggregate;
        for (label, pick) in [("mean", (|s: Summary| s.mean) as fn(Summary) -> f64), ("std", |s: Summary| s.std)] {
            let g = |s: Option<Summary>| opt(s.map(pick));
            writeln!(out, "{label},{},{},{},{},{}", g(a.accuracy), g(a.f1), g(a.auc), g(a.aupr), g(a.baseline_auc))?;
        }
        Ok(())
    })?;

    let predictions: Vec<Prediction> = report.folds.iter().flat_map(|f| f.predictions.iter().cloned()).collect();
    write_predictions(&dir.join("predictions.tsv"), &predictions)?;

    if let Some(first) = report.folds.first() {
        let mut rows = first.importance.clone();
        let named: Vec<(Connection, String)> = first
            .checkpoint
            .vocab
            .iter()
            .map(|c| (c.clone(), c.display(graph_names.vocab())))
            .collect();
        name_importance(&mut rows, &named);
        write_importance(&dir.join("importance.csv"), &rows)?;
        write_log(&dir.join("train_log.csv"), &first.log)?;
    }
    for f in &report.folds {
        if f.report.fold != 0 {
            write_log(&dir.join(format!("train_log_fold{}.csv", f.report.fold)), &f.log)?;
        }
        let path = dir.join(format!("checkpoint_fold{}.json", f.report.fold));
        f.checkpoint.save(&path)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_shape() {
        let cfg = SyntheticConfig::default();
        let (edges, links) = generate_synthetic(&cfg, 1).unwrap();
        let g = build_graph(&edges, &Interest::new(&[SYNTHETIC_HEAD], &[SYNTHETIC_TAIL]), false).unwrap();
        assert_eq!(g.head_nodes().len(), 100);
        assert_eq!(g.tail_nodes().len(), 80);
        assert_eq!(g.node_count(), 220);
        // Roughly 0.3 of 4000 intra pairs plus 0.01 of 4000 inter pairs.
        assert!(links.len() > 1000 && links.len() < 1500, "{}", links.len());
        let (again, links2) = generate_synthetic(&cfg, 1).unwrap();
        assert_eq!(links, links2);
        assert_eq!(edges.edges.len(), again.edges.len());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let ok = r#"{"data": {"synthetic": {}}, "folds": 5}"#;
        let c = ExperimentConfig::from_json(ok).unwrap();
        assert_eq!(c.folds, 5);
        assert!(c.validate().is_ok());
        assert!(ExperimentConfig::from_json(r#"{"data": {"synthetic": {}}, "fold": 5}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"data": {"synthetic": {"head": 3}}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"data": {"synthetic": {}}, "sampler": {"k": 3}}"#).is_err());
    }

    #[test]
    fn missing_files_fail_validation() {
        let c = ExperimentConfig::from_json(
            r#"{"data": {"files": {"edges": "/nonexistent/e.tsv", "links": "/nonexistent/l.tsv",
                "head_types": ["drug"], "tail_types": ["protein"]}}}"#,
        )
        .unwrap();
        assert!(matches!(c.validate(), Err(ExperimentError::Config(_))));
    }

    #[test]
    fn summaries() {
        assert_eq!(summarize(&[0.5]).unwrap(), Summary { mean: 0.5, std: 0.0 });
        let s = summarize(&[1.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.std), (2.0, 1.0));
        assert!(summarize(&[]).is_none());
    }

    #[test]
    fn csv_quoting() {
        assert_eq!(csv_field("(a,b)"), "\"(a,b)\"");
        assert_eq!(csv_field("(a)"), "(a)");
    }
}
