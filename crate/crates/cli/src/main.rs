use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use chat::experiment::{
    self, evaluate_fold, importance_report, load_dataset, name_importance, prepare_fold, run_experiment,
    sensitivity_sweep, train_fold, write_importance, write_log, write_predictions, write_report, write_sweep,
    ExperimentConfig,
};
use chat::sampler::{sample_corpus, write_corpus, Connection};
use chat::trainer::Checkpoint;

#[derive(Parser)]
#[command(name = "chat", version, about = "Link prediction on heterogeneous graphs with concentrated sampling and a connection-aware transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a concentrated corpus on the full graph and write it as TSV.
    Sample(Common),
    /// Train on the first fold and write a checkpoint and training log.
    Train(Common),
    /// Evaluate a checkpoint on the first fold's test links.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the full cross-validated experiment.
    Run {
        #[command(flatten)]
        common: Common,
        /// Folds trained concurrently.
        #[arg(long, default_value_t = 1)]
        parallel_folds: usize,
    },
    /// Rank connection tuples by mean pair attention.
    Importance {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Sample-size sensitivity sweep.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Ascending samples-per-head values.
        #[arg(long, value_delimiter = ',', default_values_t = [10, 50, 100, 200])]
        m: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Finite-difference check of every gradient in the full pipeline.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut config = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    config.validate().with_context(|| format!("invalid configuration {}", common.config.display()))?;
    let out = if config.output_dir.as_os_str().is_empty() { PathBuf::from("out") } else { config.output_dir.clone() };
    std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    Ok((config, out))
}

fn writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?))
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("CHAT_THREADS") {
        let n: usize = v.parse().with_context(|| format!("CHAT_THREADS must be a positive integer, got `{v}`"))?;
        if n == 0 {
            bail!("CHAT_THREADS must be a positive integer, got 0");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    init_threads()?;
    let cli = Cli::parse();
    let started = Instant::now();
    match cli.command {
        Command::Sample(common) => {
            let (config, out) = load(&common)?;
            let data = load_dataset(&config)?;
            let mut sampler = config.sampler;
            sampler.seed = chat::seed::derive_named(config.seed, "sampler");
            let corpus = sample_corpus(&data.graph, &data.graph.head_nodes(), &sampler)?;
            let path = out.join("corpus.tsv");
            write_corpus(&data.graph, &corpus, writer(&path)?)?;
            println!("wrote {} sequences to {}", corpus.len(), path.display());
        }
        Command::Train(common) => {
            let (config, out) = load(&common)?;
            let data = load_dataset(&config)?;
            let fold = prepare_fold(&config, &data, 0)?;
            let fitted = train_fold(&config, &fold)?;
            Checkpoint::capture(&fitted.model, Some(&fitted.optimizer)).save(&out.join("checkpoint.json"))?;
            write_log(&out.join("train_log.csv"), &fitted.log)?;
            println!(
                "best epoch {} of {}, validation AUC {:.4}",
                fitted.best_epoch,
                fitted.log.len(),
                fitted.best_score
            );
        }
        Command::Evaluate { common, checkpoint } => {
            let (config, out) = load(&common)?;
            let data = load_dataset(&config)?;
            let fold = prepare_fold(&config, &data, 0)?;
            let model = Checkpoint::load(&checkpoint)?.restore(&fold.graph)?;
            let (m, predictions) = evaluate_fold(&model, &fold)?;
            write_predictions(&out.join("predictions.tsv"), &predictions)?;
            let json = serde_json::json!({
                "fold": 0, "accuracy": m.accuracy, "f1": m.f1, "auc": m.auc, "aupr": m.aupr,
            });
            std::fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&json)? + "\n")?;
            println!("{}", serde_json::to_string(&json)?);
        }
        Command::Run { common, parallel_folds } => {
            let (config, out) = load(&common)?;
            let report = run_experiment(&config, parallel_folds.max(1))?;
            let data = load_dataset(&config)?;
            write_report(&out, &data.graph, &report)?;
            for f in &report.folds {
                let r = &f.report;
                println!(
                    "fold {}: auc {} aupr {} acc {:.4} f1 {:.4} (degree baseline auc {})",
                    r.fold,
                    fmt(r.auc),
                    fmt(r.aupr),
                    r.accuracy,
                    r.f1,
                    fmt(r.baseline_auc)
                );
            }
            if let Some(a) = report.aggregate.auc {
                println!("auc {:.4} +- {:.4} over {} folds", a.mean, a.std, report.folds.len());
            }
            println!("outputs in {}", out.display());
        }
        Command::Importance { common, checkpoint } => {
            let (config, out) = load(&common)?;
            let data = load_dataset(&config)?;
            let fold = prepare_fold(&config, &data, 0)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let model = ckpt.restore(&fold.graph)?;
            let mut rows = importance_report(&model, &fold.corpus, config.importance_top)?;
            let named: Vec<(Connection, String)> =
                ckpt.vocab.iter().map(|c| (c.clone(), c.display(fold.graph.vocab()))).collect();
            name_importance(&mut rows, &named);
            write_importance(&out.join("importance.csv"), &rows)?;
            for r in &rows {
                println!("{:>3} {:<40} {:.4} ({})", r.rank, r.tuple, r.mean_alpha, r.occurrences);
            }
        }
        Command::Sweep { common, m, repeats } => {
            let (config, out) = load(&common)?;
            let rows = sensitivity_sweep(&config, &m, repeats)?;
            write_sweep(&out.join("sweep.csv"), &rows)?;
            for r in &rows {
                println!("m={:<6} auc {:.4} +- {:.4}", r.m, r.auc_mean, r.auc_std);
            }
        }
        Command::Gradcheck { seed } => {
            let report = experiment::gradient_suite(seed)?;
            println!(
                "checked {} entries, max relative error {:.3e} at {:?}",
                report.entries_checked, report.max_rel_error, report.worst
            );
            if report.max_rel_error >= experiment::GRADCHECK_TOLERANCE {
                bail!("gradient check failed: {:.3e} >= {:e}", report.max_rel_error, experiment::GRADCHECK_TOLERANCE);
            }
        }
    }
    eprintln!("done in {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:.4}"))
}
