use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deduce_core::pipeline::{
    prepare, read_embeddings, read_labels, run_ablate, run_cluster, run_embed_from_checkpoint, run_evaluate,
    run_pipeline, run_simulate, run_train, PipelineConfig,
};
use deduce_core::synthetic::{read_truth_labels, write_truth_labels};
use deduce_core::{Error, Result};

#[derive(Parser)]
#[command(name = "deduce", version, about = "Contrastive multi-block clustering pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; every stage seed is derived from it
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// k-means restarts per k
    #[arg(long, global = true)]
    restarts: Option<usize>,
    /// Inclusive cluster-count range, e.g. 2..6
    #[arg(long = "k-range", global = true)]
    k_range: Option<String>,
    /// Config override as dotted.key=value; repeatable
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and its true labels
    Simulate,
    /// Train the encoder and write the checkpoint and loss curve
    Train,
    /// Embed the configured data with a checkpoint
    Embed {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run k-means over an embedding CSV for every k in the range
    Cluster {
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Score labels against embeddings (and truth, when available)
    Evaluate {
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Run the pipeline with both instance losses and compare them
    Ablate,
    /// train, embed, cluster and evaluate in one go
    Pipeline,
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut overrides = Vec::new();
    if let Some(out) = &common.out {
        overrides.push(format!("out_dir={:?}", out.display().to_string()));
    }
    if let Some(r) = common.restarts {
        overrides.push(format!("kmeans.restarts={r}"));
    }
    if let Some(k) = &common.k_range {
        overrides.push(format!("k_range={k:?}"));
    }
    overrides.extend(common.set.iter().cloned());
    PipelineConfig::load(common.config.as_deref(), &overrides, common.seed)
}

fn truth_for(cfg: &PipelineConfig, explicit: Option<PathBuf>) -> Option<PathBuf> {
    explicit
        .or_else(|| cfg.data.truth.clone())
        .or_else(|| Some(cfg.paths().truth()).filter(|p| p.exists()))
}

fn aligned_truth(path: &Path, ids: &[String]) -> Result<Vec<usize>> {
    let table = read_truth_labels(path)?;
    ids.iter()
        .map(|id| {
            table
                .get(id)
                .copied()
                .ok_or_else(|| Error::Data(format!("{}: no label for sample {id:?}", path.display())))
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let paths = cfg.paths();
    match cli.command {
        Command::Simulate => {
            for p in run_simulate(&cfg)? {
                println!("{}", p.display());
            }
        }
        Command::Train => {
            cfg.validate()?;
            let prepared = prepare(&cfg)?;
            if let Some(t) = &prepared.truth {
                write_truth_labels(&paths.truth(), &prepared.dataset.sample_ids, t)?;
            }
            let trained = run_train(&cfg, &prepared)?;
            let h = &trained.report.history;
            println!(
                "trained {} epochs, loss {:.5} -> {:.5}, checkpoint {}",
                trained.report.stopped_epoch,
                h.first().map_or(f64::NAN, |e| e.total),
                h.last().map_or(f64::NAN, |e| e.total),
                paths.checkpoint().display()
            );
        }
        Command::Embed { checkpoint } => {
            let ck = checkpoint.unwrap_or_else(|| paths.checkpoint());
            let emb = run_embed_from_checkpoint(&cfg, &ck)?;
            println!("{} x {} embeddings -> {}", emb.rows(), emb.cols(), paths.embeddings().display());
        }
        Command::Cluster { embeddings } => {
            let path = embeddings.unwrap_or_else(|| paths.embeddings());
            let (ids, emb) = read_embeddings(&path)?;
            for r in run_cluster(&cfg, &ids, &emb)? {
                println!("k = {}  inertia {:.6}  restart {}", r.k, r.inertia, r.restart_index);
            }
        }
        Command::Evaluate {
            embeddings,
            labels,
            truth,
        } => {
            let (ids, emb) = read_embeddings(&embeddings.unwrap_or_else(|| paths.embeddings()))?;
            let labels = read_labels(&labels.unwrap_or_else(|| paths.labels()), &ids)?;
            let truth = truth_for(&cfg, truth).map(|p| aligned_truth(&p, &ids)).transpose()?;
            print_report(&run_evaluate(&cfg, &emb, &labels, truth.as_deref())?);
        }
        Command::Ablate => {
            let outcome = run_ablate(&cfg)?;
            for (kind, run) in &outcome.runs {
                println!("[{kind}]");
                print_report(&run.metrics);
            }
            println!("{}", cfg.out_dir.join("ablation.csv").display());
        }
        Command::Pipeline => {
            let outcome = run_pipeline(&cfg)?;
            print_report(&outcome.metrics);
        }
    }
    Ok(())
}

fn print_report(report: &deduce_core::metrics::MetricsReport) {
    println!("k  c_index   silhouette  davies_bouldin  ari");
    for r in &report.rows {
        let ari = r.ari.map_or_else(|| "NA".to_string(), |a| format!("{a:.4}"));
        println!(
            "{:<2} {:<9.4} {:<11.4} {:<15.4} {ari}",
            r.k, r.c_index, r.silhouette, r.davies_bouldin
        );
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
