use chat::encoder::{ChatModel, ConnectionVocab, EncoderConfig};
use chat::experiment::{
    importance_report, leakage_audit, load_dataset, prepare_fold, sensitivity_sweep, train_fold, ExperimentConfig,
    ExperimentError,
};
use chat::graph::{build_graph, EdgeList, Interest};
use chat::predictor::PredictorConfig;
use chat::sampler::{sample_corpus, ConcentratedSequence, Connection, SamplerConfig, Step};
use chat::seed;
use chat::tensor::Tensor;

fn small(extra: &str) -> ExperimentConfig {
    ExperimentConfig::from_json(&format!(
        r#"{{
            "data": {{"synthetic": {{"heads": 20, "tails": 16, "bridges": 10}}}},
            "sampler": {{"max_inner": 2, "length": 4, "samples_per_head": 6}},
            "encoder": {{"layers": 1, "heads": 2, "d_in": 8, "d_hidden": 8, "d_out": 4}},
            "train": {{"max_epochs": 2, "patience": 1, "batch_size": 32}},
            "predictor": {{"d_mlp": 4, "epochs": 5}},
            "folds": 3,
            "run_folds": 1,
            {extra}
            "seed": 3
        }}"#
    ))
    .unwrap()
}

#[test]
fn negative_ratio_sets_pool_size() {
    let mut config = small(r#""negative_ratio": 5.0,"#);
    config.data = ExperimentConfig::from_json(
        r#"{"data": {"synthetic": {"heads": 40, "tails": 40, "bridges": 20, "shared_prob": 0.2, "intra_prob": 0.01}}}"#,
    )
    .unwrap()
    .data;
    let data = load_dataset(&config).unwrap();
    assert_eq!(data.links.negatives.len(), 5 * data.links.positives.len());
    for fold in 0..3 {
        let p = data.links.fold_positives(fold).len() as i64;
        let n = data.links.fold_negatives(fold).len() as i64;
        assert!((n - 5 * p).abs() <= 5, "fold {fold}: {p} positives, {n} negatives");
    }
}

#[test]
fn held_out_links_never_leak() {
    for own in [false, true] {
        let config = small(&format!(r#""mask_own_links": {own},"#));
        let data = load_dataset(&config).unwrap();
        for fold in 0..3 {
            let f = prepare_fold(&config, &data, fold).unwrap();
            leakage_audit(&f).unwrap();
            for l in f.test_links.iter().chain(&f.val_links).filter(|l| l.label) {
                assert!(!f.graph.adjacent(l.head, l.tail));
                for (seq, lab) in f.corpus.iter().zip(&f.labels).filter(|(s, _)| s.head == l.head) {
                    for (j, step) in seq.steps.iter().enumerate() {
                        assert!(step.tail != l.tail || !lab.positives.contains(&j));
                    }
                }
            }
        }
    }
}

#[test]
fn leakage_audit_rejects_a_planted_leak() {
    let config = small("");
    let data = load_dataset(&config).unwrap();
    let mut f = prepare_fold(&config, &data, 0).unwrap();
    let leak = *f.test_links.iter().find(|l| l.label).unwrap();
    f.train_positives.insert((leak.head, leak.tail));
    assert!(matches!(leakage_audit(&f), Err(ExperimentError::Leakage(_))));
}

fn single_pair_corpus() -> (chat::graph::HetGraph, Vec<ConcentratedSequence>) {
    let mut list = EdgeList::new();
    for (h, t) in [("a", "x"), ("a", "y"), ("b", "y")] {
        list.push_named("h", h, "r", "t", t);
    }
    let g = build_graph(&list, &Interest::new(&["h"], &["t"]), false).unwrap();
    let cfg = SamplerConfig { max_inner: 0, length: 2, samples_per_head: 5, ..Default::default() };
    let corpus = sample_corpus(&g, &g.head_nodes(), &cfg).unwrap();
    (g, corpus)
}

fn model_for(g: &chat::graph::HetGraph, corpus: &[ConcentratedSequence], d: usize) -> ChatModel {
    let mut vocab = ConnectionVocab::new();
    vocab.extend_from_corpus(corpus);
    let enc = EncoderConfig { layers: 1, heads: 1, d_in: d, d_hidden: d, d_out: d, distance_cap: 3, dropout: 0.0 };
    ChatModel::new(enc, PredictorConfig::default(), g, vocab, &mut seed::rng(2)).unwrap()
}

#[test]
fn lone_connection_type_has_full_importance() {
    let (g, corpus) = single_pair_corpus();
    let model = model_for(&g, &corpus, 4);
    let rows = importance_report(&model, &corpus, 30).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].mean_alpha, 1.0);
    assert_eq!(rows[0].occurrences, corpus.len());
}

#[test]
fn empty_corpus_is_an_error() {
    let (g, corpus) = single_pair_corpus();
    let model = model_for(&g, &corpus, 4);
    assert!(importance_report(&model, &[], 30).is_err());
}

#[test]
fn hand_set_attention_ranks_the_stronger_connection_first() {
    let mut list = EdgeList::new();
    list.push_named("h", "a", "p", "t", "x");
    list.push_named("t", "x", "q", "t", "y");
    let g = build_graph(&list, &Interest::new(&["h"], &["t"]), false).unwrap();
    let id = |t: &str, n: &str| g.id(g.vocab().lookup_node(t, n).unwrap());
    let (p, q) = (g.vocab().edge_type_id("p").unwrap(), g.vocab().edge_type_id("q").unwrap());
    let seq = |first: u16, second: u16| ConcentratedSequence {
        head: id("h", "a"),
        steps: vec![
            Step { connection: Connection(vec![first]), tail: id("t", "x") },
            Step { connection: Connection(vec![second]), tail: id("t", "y") },
        ],
        distances: vec![0, 1, 2],
    };
    let corpus = vec![seq(p, q), seq(q, p), seq(p, q)];
    let mut model = model_for(&g, &corpus, 4);

    // Identity blocks, so each connection row reaches the output as tanh(layer_norm(row)).
    let zero = |m: &mut ChatModel, ids: Vec<chat::tensor::ParamId>| {
        for i in ids {
            m.params.value_mut(i).fill(0.0);
        }
    };
    let b = model.ids.blocks[0].clone();
    let extra = vec![b.wo, b.bo, b.ff2, b.ff2_bias, model.ids.edg, model.ids.b_out];
    zero(&mut model, extra);
    *model.params.value_mut(model.ids.w_in) = Tensor::identity(4);
    *model.params.value_mut(model.ids.w_out) = Tensor::identity(4);
    let conn = model.ids.connections;
    let (rp, rq) = (model.vocab.get(&Connection(vec![p])), model.vocab.get(&Connection(vec![q])));
    model.params.value_mut(conn).data_mut()[rp * 4..rp * 4 + 4].copy_from_slice(&[1.0, -1.0, 0.0, 0.0]);
    model.params.value_mut(conn).data_mut()[rq * 4..rq * 4 + 4].copy_from_slice(&[0.0, 0.0, 1.0, -1.0]);
    // Only the middle block of `a` is non-zero: p scores 10 times q.
    let mut a = vec![0.0; 12];
    a[4..8].copy_from_slice(&[1.0, -1.0, 0.1, -0.1]);
    *model.params.value_mut(model.ids.attention) = Tensor::new(vec![12, 1], a).unwrap();

    let rows = importance_report(&model, &corpus, 30).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].tuple, Connection(vec![p]).to_string());
    assert!(rows[0].mean_alpha > rows[1].mean_alpha);
    assert!(rows.windows(2).all(|w| w[0].mean_alpha >= w[1].mean_alpha));
    assert_eq!(rows.iter().map(|r| r.rank).collect::<Vec<_>>(), vec![1, 2]);
}

#[test]
fn importance_is_sorted_after_training() {
    let config = small("");
    let data = load_dataset(&config).unwrap();
    let f = prepare_fold(&config, &data, 0).unwrap();
    let fitted = train_fold(&config, &f).unwrap();
    let rows = importance_report(&fitted.model, &f.corpus, 5).unwrap();
    assert!(rows.len() <= 5);
    assert!(rows.windows(2).all(|w| w[0].mean_alpha >= w[1].mean_alpha));
    assert!(rows.iter().all(|r| r.mean_alpha > 0.0 && r.mean_alpha <= 1.0));
}

#[test]
fn single_repeat_sweep_has_zero_spread() {
    let config = small("");
    let rows = sensitivity_sweep(&config, &[2, 4], 1).unwrap();
    assert_eq!(rows.iter().map(|r| r.m).collect::<Vec<_>>(), vec![2, 4]);
    assert!(rows.iter().all(|r| r.auc_std == 0.0 && (0.0..=1.0).contains(&r.auc_mean)));
    assert!(sensitivity_sweep(&config, &[4, 2], 1).is_err());
}

fn planted() -> ExperimentConfig {
    ExperimentConfig::from_json(include_str!("../../../configs/synthetic.json")).unwrap()
}

#[test]
fn more_samples_do_not_hurt() {
    let config = planted();
    let rows = sensitivity_sweep(&config, &[10, 200], 1).unwrap();
    assert!(rows[1].auc_mean >= rows[0].auc_mean - 0.02, "{rows:?}");
}

#[test]
fn validation_gains_over_first_epoch() {
    let config = ExperimentConfig { train: chat::trainer::TrainConfig { learning_rate: 1e-3, ..planted().train }, ..planted() };
    let data = load_dataset(&config).unwrap();
    let f = prepare_fold(&config, &data, 0).unwrap();
    let fitted = train_fold(&config, &f).unwrap();
    let first = fitted.log[0].val_auc;
    assert!(
        fitted.best_score >= first + 0.15,
        "epoch 1 validation AUC {first:.4}, best {:.4}",
        fitted.best_score
    );
}
