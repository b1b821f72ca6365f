use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use contracluster::data;
use contracluster::pipeline::{Pipeline, PipelineConfig, PipelineMetrics};
use contracluster::Result;

#[derive(Parser)]
#[command(name = "contracluster", version, about = "Unsupervised classification with contrastive pre-training, prototype sampling and fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Pipeline config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output.dir` in the config.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Global seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cluster raw samples; fine-tune from random weights.
    #[arg(long, global = true)]
    skip_cpt: bool,
    /// Cluster the embedding without reduction or sweep.
    #[arg(long, global = true)]
    skip_dr: bool,
    /// Report the stage-2 clusters as the prediction.
    #[arg(long, global = true)]
    skip_sft: bool,
    /// Only report errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run all three stages and evaluate.
    Pipeline,
    /// Stage 1: contrastive pre-training.
    Pretrain,
    /// Score the reduction grid by silhouette.
    SweepSilhouette,
    /// Stage 2: sweep, cluster and select prototypes.
    SamplePrototypes,
    /// Stage 3: fine-tune on prototypes and predict.
    Finetune,
    /// Score assignments.csv against the dataset labels.
    Evaluate,
    /// Write the configured dataset as CSV (features, then label).
    Generate {
        /// Destination file.
        #[arg(long)]
        csv: PathBuf,
    },
}

fn load(common: &Common) -> Result<Pipeline> {
    let path = common
        .config
        .as_deref()
        .ok_or_else(|| contracluster::Error::Config("--config is required".into()))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.ablation.skip_cpt |= common.skip_cpt;
    cfg.ablation.skip_dr |= common.skip_dr;
    cfg.ablation.skip_sft |= common.skip_sft;
    let mut p = Pipeline::new(cfg)?;
    if let Some(dir) = &common.output {
        p = p.with_output(dir);
    }
    Ok(p)
}

fn print_metrics(m: &PipelineMetrics) {
    println!("accuracy {:.4}  nmi {:.4}  (n = {}, k = {})", m.report.accuracy, m.report.nmi, m.n_samples, m.k);
    if let (Some(c), Some(p)) = (m.cps_accuracy, m.prototype_accuracy) {
        println!("cluster accuracy {c:.4}  prototype accuracy {p:.4}");
    }
}

fn run(cli: &Cli) -> Result<()> {
    let p = load(&cli.common)?;
    let quiet = cli.common.quiet;
    let say = |msg: String| {
        if !quiet {
            println!("{msg}");
        }
    };
    p.in_pool(|| {
        match &cli.command {
            Command::Pipeline => {
                let losses = p.pretrain()?;
                if let Some(l) = losses.last() {
                    say(format!("pretrain: {} epochs, final loss {l:.4}", losses.len()));
                }
                let (sweep, protos) = p.sample_prototypes()?;
                say(format!("prototypes: {} selected with {} ({} rows swept)", protos.len(), sweep.best.method.name(), sweep.table.len()));
                let (_, trace) = p.finetune()?;
                if let Some(t) = trace.last() {
                    say(format!("finetune: {} epochs, final loss {:.4}", trace.len(), t.total));
                }
                let m = p.evaluate()?;
                if !quiet {
                    print_metrics(&m);
                }
            }
            Command::Pretrain => {
                let losses = p.pretrain()?;
                say(format!("pretrain: {} epochs, losses {losses:?}", losses.len()));
            }
            Command::SweepSilhouette => {
                let sweep = p.sweep()?;
                for row in &sweep.table {
                    let score = row.silhouette.map_or_else(|| "failed".to_owned(), |s| format!("{s:.4}"));
                    say(format!("{:<10} n_neighbors {:>3} out_dim {:>3} {:<11} {score}", row.config.method.name(), row.config.n_neighbors, row.config.out_dim, row.config.metric.name()));
                }
                say(format!("best: row {}", sweep.best_index));
            }
            Command::SamplePrototypes => {
                let (sweep, protos) = p.sample_prototypes()?;
                say(format!("prototypes: {} selected with {}", protos.len(), sweep.best.method.name()));
            }
            Command::Finetune => {
                let (pred, _) = p.finetune()?;
                say(format!("finetune: wrote {} assignments", pred.len()));
            }
            Command::Evaluate => {
                let m = p.evaluate()?;
                if !quiet {
                    print_metrics(&m);
                }
            }
            Command::Generate { csv } => {
                let store = p.load_dataset()?;
                data::export_csv(&store, csv, true)?;
                say(format!("wrote {} samples to {}", store.len(), csv.display()));
            }
        }
        Ok(())
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
