use std::collections::HashSet;

use chat::encoder::{ChatModel, ConnectionVocab, EncoderConfig};
use chat::experiment::{init_model, load_dataset, prepare_fold, ExperimentConfig, FoldData};
use chat::graph::{build_graph, EdgeList, Interest};
use chat::objectives::{label_corpus, LossConfig};
use chat::predictor::PredictorConfig;
use chat::sampler::{sample_corpus, SamplerConfig};
use chat::seed;
use chat::trainer::{fit, train_epoch, Adam, Checkpoint, TrainConfig, TrainError, Validator};

fn fold() -> (ExperimentConfig, FoldData) {
    let config = ExperimentConfig::from_json(
        r#"{
            "data": {"synthetic": {"heads": 20, "tails": 16, "bridges": 10}},
            "sampler": {"max_inner": 2, "length": 4, "samples_per_head": 6},
            "encoder": {"layers": 1, "heads": 2, "d_in": 8, "d_hidden": 8, "d_out": 4},
            "predictor": {"d_mlp": 4, "epochs": 5},
            "folds": 3,
            "seed": 21
        }"#,
    )
    .unwrap();
    let data = load_dataset(&config).unwrap();
    let f = prepare_fold(&config, &data, 0).unwrap();
    (config, f)
}

fn train_cfg(lr: f64) -> TrainConfig {
    TrainConfig { learning_rate: lr, max_epochs: 10, patience: 3, batch_size: 16, seed: 5 }
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let (config, f) = fold();
    let mut model = init_model(&config, &f).unwrap();
    let before = model.params.to_records();
    let cfg = TrainConfig { batch_size: 10_000, ..train_cfg(0.0) };
    let mut adam = Adam::new(&model.params, 0.0);
    let losses: Vec<f64> =
        (1..=3).map(|e| train_epoch(&mut model, &mut adam, &f.corpus, &f.labels, &config.loss, &cfg, e).unwrap()).collect();
    assert_eq!(model.params.to_records(), before);
    for l in &losses {
        assert!((l - losses[0]).abs() < 1e-12, "{losses:?}");
    }
}

#[test]
fn trajectory_is_reproducible() {
    let (config, f) = fold();
    let run = || {
        let mut model = init_model(&config, &f).unwrap();
        let mut adam = Adam::new(&model.params, 1e-2);
        let losses: Vec<u64> = (1..=3)
            .map(|e| train_epoch(&mut model, &mut adam, &f.corpus, &f.labels, &config.loss, &train_cfg(1e-2), e).unwrap().to_bits())
            .collect();
        (losses, model.params.to_records())
    };
    assert_eq!(run(), run());
}

#[test]
fn tiny_task_overfits() {
    let mut list = EdgeList::new();
    for t in ["t1", "t2", "t3"] {
        list.push_named("h", "h1", "r", "t", t);
    }
    let g = build_graph(&list, &Interest::new(&["h"], &["t"]), false).unwrap();
    let sampler = SamplerConfig { max_inner: 1, length: 4, samples_per_head: 8, seed: 3, ..Default::default() };
    let corpus = sample_corpus(&g, &g.head_nodes(), &sampler).unwrap();
    let v = g.vocab();
    let positive = (g.id(v.lookup_node("h", "h1").unwrap()), g.id(v.lookup_node("t", "t1").unwrap()));
    let labels = label_corpus(&corpus, &HashSet::from([positive]));
    let mut vocab = ConnectionVocab::new();
    vocab.extend_from_corpus(&corpus);
    let enc = EncoderConfig { layers: 1, heads: 2, d_in: 8, d_hidden: 8, d_out: 8, distance_cap: 4, dropout: 0.0 };
    let mut model = ChatModel::new(enc, PredictorConfig::default(), &g, vocab, &mut seed::rng(6)).unwrap();
    let mut adam = Adam::new(&model.params, 1e-2);
    let loss = LossConfig::default();
    let cfg = TrainConfig { batch_size: 4, ..train_cfg(1e-2) };
    let losses: Vec<f64> =
        (1..=50).map(|e| train_epoch(&mut model, &mut adam, &corpus, &labels, &loss, &cfg, e).unwrap()).collect();
    assert!(losses[49] < losses[0], "{} -> {}", losses[0], losses[49]);
}

struct Scripted(Vec<f64>);

impl Validator for Scripted {
    fn score(&mut self, _: &mut ChatModel, epoch: usize) -> Result<f64, TrainError> {
        Ok(self.0[epoch - 1])
    }
}

#[test]
fn patience_one_stops_after_two_worsening_epochs() {
    let (config, f) = fold();
    let model = init_model(&config, &f).unwrap();
    let cfg = TrainConfig { patience: 1, ..train_cfg(1e-3) };
    let mut v = Scripted(vec![0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1, 0.0]);
    let r = fit(model, &f.corpus, &f.labels, &config.loss, &cfg, &mut v).unwrap();
    assert_eq!(r.log.len(), 2);
    assert_eq!(r.best_epoch, 1);
}

#[test]
fn best_checkpoint_beats_last_epoch() {
    let (config, f) = fold();
    let model = init_model(&config, &f).unwrap();
    let mut v = Scripted(vec![0.5, 0.7, 0.6, 0.9, 0.4, 0.3, 0.2, 0.8, 0.1, 0.0]);
    let r = fit(model, &f.corpus, &f.labels, &config.loss, &train_cfg(1e-3), &mut v).unwrap();
    assert_eq!(r.best_epoch, 4);
    assert!(r.best_score >= r.log.last().unwrap().val_auc);
    let epochs: Vec<usize> = r.log.iter().map(|l| l.epoch).collect();
    assert_eq!(epochs, (1..=r.log.len()).collect::<Vec<_>>());
}

#[test]
fn checkpoint_round_trip_resumes_identically() {
    let (config, f) = fold();
    let mut model = init_model(&config, &f).unwrap();
    let cfg = train_cfg(1e-2);
    let mut adam = Adam::new(&model.params, 1e-2);
    for e in 1..=2 {
        train_epoch(&mut model, &mut adam, &f.corpus, &f.labels, &config.loss, &cfg, e).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    Checkpoint::capture(&model, Some(&adam)).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let mut restored = loaded.restore(&f.graph).unwrap();
    let mut adam2 = loaded.optimizer.clone().unwrap();
    assert_eq!(restored.params.to_records(), model.params.to_records());
    assert_eq!(adam2, adam);

    let a = train_epoch(&mut model, &mut adam, &f.corpus, &f.labels, &config.loss, &cfg, 3).unwrap();
    let b = train_epoch(&mut restored, &mut adam2, &f.corpus, &f.labels, &config.loss, &cfg, 3).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(restored.params.to_records(), model.params.to_records());
}

#[test]
fn non_finite_loss_names_the_batch() {
    let (config, f) = fold();
    let mut model = init_model(&config, &f).unwrap();
    model.params.value_mut(model.ids.w_out).fill(f64::NAN);
    let mut adam = Adam::new(&model.params, 1e-3);
    let err = train_epoch(&mut model, &mut adam, &f.corpus, &f.labels, &config.loss, &train_cfg(1e-3), 1).unwrap_err();
    assert!(matches!(err, TrainError::NonFinite { epoch: 1, batch: 0, .. }), "{err}");
}
