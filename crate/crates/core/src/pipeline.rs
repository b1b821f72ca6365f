//! Config-driven orchestration of the three stages.
//!
//! Every stage reads its inputs from and writes its outputs to the output
//! directory, so running the stages one by one gives the same files as
//! [`Pipeline::run`].

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::cps::{self, DrConfig, DrMethod, EmbeddingSet, Metric, PrototypeSet, SweepResult};
use crate::cpt::{self, CptConfig};
use crate::data::{self, SampleStore, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{self, MetricsReport};
use crate::numerics::{Activation, NetConfig, ParamSet};
use crate::sft::{self, SftConfig, SftEpoch};
use crate::{par, rng};

pub const CHECKPOINT_CPT: &str = "checkpoint_cpt.cckp";
pub const CHECKPOINT_SFT: &str = "checkpoint_sft.cckp";
pub const PROTOTYPES: &str = "prototypes.csv";
pub const SILHOUETTE_TABLE: &str = "silhouette_table.csv";
pub const ASSIGNMENTS: &str = "assignments.csv";
pub const CPS_ASSIGNMENTS: &str = "cps_assignments.csv";
pub const METRICS: &str = "metrics.json";
pub const LOSS_CPT: &str = "loss_cpt.csv";
pub const LOSS_SFT: &str = "loss_sft.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Worker threads; `None` uses every available core.
    #[serde(default)]
    pub threads: Option<usize>,
    pub dataset: DatasetConfig,
    pub cpt: CptSection,
    pub cps: CpsSection,
    pub sft: SftConfig,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub ablation: Ablation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic(SynthConfig),
    Csv { path: PathBuf, has_labels: bool },
}

/// Network widths; the input width comes from the data and the class count
/// from `cps.k_part`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub encoder_widths: Vec<usize>,
    #[serde(default = "linear")]
    pub encoder_output_activation: Activation,
    #[serde(default)]
    pub encoder_dropout: f64,
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub cls_hidden: usize,
    #[serde(default = "head_dropout")]
    pub head_dropout: f64,
}

fn linear() -> Activation {
    Activation::Linear
}

fn head_dropout() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CptSection {
    #[serde(default = "cpt::default_temperature")]
    pub temperature: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default = "cpt::default_momentum")]
    pub momentum: f64,
    pub network: NetworkSection,
    /// Used by both training stages.
    #[serde(default)]
    pub augment: AugmentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CpsSection {
    pub grid: Vec<DrConfig>,
    pub k_part: usize,
    /// Total number of prototypes over all clusters.
    pub n_proto: usize,
    #[serde(default = "restarts")]
    pub restarts: usize,
}

fn restarts() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Cluster the raw samples and fine-tune from a randomly initialized encoder.
    pub skip_cpt: bool,
    /// Cluster the embedding itself, with no reduction and no sweep.
    pub skip_dr: bool,
    /// Report the prototype-sampling clusters as the final prediction.
    pub skip_sft: bool,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if let DatasetConfig::Synthetic(s) = &self.dataset {
            s.validate()?;
        }
        self.cpt_config().validate()?;
        self.cpt.augment.validate()?;
        self.sft_config().validate()?;
        if self.cps.k_part < 2 {
            return Err(Error::Config("cps.k_part must be >= 2".into()));
        }
        if self.cps.n_proto < self.cps.k_part {
            return Err(Error::Config(format!(
                "cps.n_proto {} is smaller than k_part {}",
                self.cps.n_proto, self.cps.k_part
            )));
        }
        if self.cps.grid.is_empty() && !self.ablation.skip_dr {
            return Err(Error::Config("cps.grid is empty".into()));
        }
        for g in &self.cps.grid {
            g.validate()?;
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        Ok(())
    }

    pub fn net_config(&self, input_dim: usize) -> NetConfig {
        let n = &self.cpt.network;
        NetConfig {
            input_dim,
            encoder_widths: n.encoder_widths.clone(),
            encoder_output_activation: n.encoder_output_activation,
            encoder_dropout: n.encoder_dropout,
            proj_hidden: n.proj_hidden,
            proj_dim: n.proj_dim,
            cls_hidden: n.cls_hidden,
            classes: self.cps.k_part,
            head_dropout: n.head_dropout,
            ema_decay: self.sft.ema_decay,
        }
    }

    pub fn cpt_config(&self) -> CptConfig {
        CptConfig {
            temperature: self.cpt.temperature,
            batch_size: self.cpt.batch_size,
            epochs: self.cpt.epochs,
            learning_rate: self.cpt.learning_rate,
            momentum: self.cpt.momentum,
            seed: rng::derive(self.seed, 101),
        }
    }

    pub fn sft_config(&self) -> SftConfig {
        SftConfig {
            seed: rng::derive(self.seed, 103),
            ..self.sft.clone()
        }
    }

    fn init_seed(&self) -> u64 {
        rng::derive(self.seed, 100)
    }

    fn cps_seed(&self) -> u64 {
        rng::derive(self.seed, 102)
    }
}

/// Metrics document written to `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineMetrics {
    pub n_samples: usize,
    pub k: usize,
    #[serde(flatten)]
    pub report: MetricsReport,
    /// Accuracy of the prototype-sampling clusters, when available.
    pub cps_accuracy: Option<f64>,
    /// Share of prototypes whose pseudo-label matches their class.
    pub prototype_accuracy: Option<f64>,
    pub n_prototypes: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub out_dir: PathBuf,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        let out_dir = config.output.dir.clone();
        Ok(Self { config, out_dir })
    }

    pub fn with_output(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = dir.into();
        self
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn require(&self, name: &str) -> Result<PathBuf> {
        let p = self.artifact(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact(p))
        }
    }

    fn ensure_out_dir(&self) -> Result<()> {
        fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))
    }

    /// Runs `f` on a pool sized by the configured thread count.
    pub fn in_pool<T: Send>(&self, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
        par::with_threads(self.config.threads, f)?
    }

    pub fn load_dataset(&self) -> Result<SampleStore> {
        match &self.config.dataset {
            DatasetConfig::Synthetic(s) => data::generate(s),
            DatasetConfig::Csv { path, has_labels } => {
                if !path.is_file() {
                    return Err(Error::Config(format!("dataset file {} does not exist", path.display())));
                }
                data::ingest_csv(path, *has_labels)
            }
        }
    }

    /// Stage 1. Writes the pre-trained checkpoint and the per-epoch loss.
    /// With `skip_cpt` the checkpoint holds the initial weights.
    pub fn pretrain(&self) -> Result<Vec<f64>> {
        self.ensure_out_dir()?;
        let store = self.load_dataset()?;
        let view = store.unlabeled();
        let params = ParamSet::init(&self.config.net_config(view.dim()), self.config.init_seed())?;
        let (params, losses) = if self.config.ablation.skip_cpt {
            (params, Vec::new())
        } else {
            let out = cpt::run_cpt(&view, params, &self.config.cpt_config(), &self.config.cpt.augment)?;
            (out.params, out.epoch_loss)
        };
        data::save_checkpoint(&params, &self.artifact(CHECKPOINT_CPT))?;
        let rows = losses.iter().enumerate().map(|(e, l)| format!("{e},{l}"));
        write_lines(&self.artifact(LOSS_CPT), "epoch,loss", rows)?;
        Ok(losses)
    }

    fn embedding(&self, store: &SampleStore) -> Result<EmbeddingSet> {
        let params = data::load_checkpoint(&self.require(CHECKPOINT_CPT)?)?;
        let view = store.unlabeled();
        if self.config.ablation.skip_cpt {
            Ok(cps::raw_embedding(&view))
        } else {
            cps::embed_all(&view, &params)
        }
    }

    /// The reduction grid actually swept, with per-entry seeds.
    pub fn grid(&self, embed_dim: usize) -> Vec<DrConfig> {
        let grid = if self.config.ablation.skip_dr {
            vec![DrConfig::new(DrMethod::Identity, 2, embed_dim, Metric::Euclidean)]
        } else {
            self.config.cps.grid.clone()
        };
        grid.into_iter()
            .enumerate()
            .map(|(i, g)| DrConfig {
                seed: rng::derive(self.config.cps_seed(), i as u64),
                ..g
            })
            .collect()
    }

    /// Silhouette sweep over the grid; writes the score table.
    pub fn sweep(&self) -> Result<SweepResult> {
        self.ensure_out_dir()?;
        let store = self.load_dataset()?;
        let emb = self.embedding(&store)?;
        let grid = self.grid(emb.h_high.cols());
        let result = cps::sweep_silhouette(
            &emb,
            &grid,
            self.config.cps.k_part,
            self.config.cps.restarts,
            rng::derive(self.config.cps_seed(), 1000),
        )?;
        let rows = result.table.iter().map(|r| {
            let c = &r.config;
            format!(
                "{},{},{},{},{},{}",
                c.method.name(),
                c.n_neighbors,
                c.out_dim,
                c.min_dist,
                c.metric.name(),
                r.silhouette.map_or_else(String::new, |s| s.to_string())
            )
        });
        write_lines(
            &self.artifact(SILHOUETTE_TABLE),
            "method,n_neighbors,out_dim,min_dist,metric,silhouette",
            rows,
        )?;
        Ok(result)
    }

    /// Stage 2. Sweep, cluster, and write prototypes plus cluster assignments.
    pub fn sample_prototypes(&self) -> Result<(SweepResult, PrototypeSet)> {
        let sweep = self.sweep()?;
        let protos = cps::sample_prototypes(&sweep.z_low, &sweep.model, self.config.cps.n_proto)?;
        write_pairs(
            &self.artifact(PROTOTYPES),
            "sample_index,pseudo_label",
            protos.indices.iter().copied().zip(protos.pseudo_labels.iter().copied()),
        )?;
        write_pairs(
            &self.artifact(CPS_ASSIGNMENTS),
            "sample_index,predicted_cluster",
            sweep.model.assignments.iter().copied().enumerate(),
        )?;
        Ok((sweep, protos))
    }

    /// Stage 3 and prediction. With `skip_sft` the cluster assignments of
    /// stage 2 become the prediction.
    pub fn finetune(&self) -> Result<(Vec<usize>, Vec<SftEpoch>)> {
        self.ensure_out_dir()?;
        if self.config.ablation.skip_sft {
            let cps = read_pairs(&self.require(CPS_ASSIGNMENTS)?)?;
            let pred: Vec<usize> = cps.into_iter().map(|(_, c)| c).collect();
            write_pairs(&self.artifact(ASSIGNMENTS), "sample_index,predicted_cluster", pred.iter().copied().enumerate())?;
            return Ok((pred, Vec::new()));
        }
        let params = data::load_checkpoint(&self.require(CHECKPOINT_CPT)?)?;
        let pairs = read_pairs(&self.require(PROTOTYPES)?)?;
        let protos = PrototypeSet {
            indices: pairs.iter().map(|p| p.0).collect(),
            pseudo_labels: pairs.iter().map(|p| p.1).collect(),
            n_total: self.config.cps.n_proto,
        };
        let store = self.load_dataset()?;
        let view = store.unlabeled();
        let out = sft::run_sft(&view, &protos, params, &self.config.sft_config(), &self.config.cpt.augment)?;
        data::save_checkpoint(&out.params, &self.artifact(CHECKPOINT_SFT))?;
        let rows = out
            .trace
            .iter()
            .enumerate()
            .map(|(e, t)| format!("{e},{},{},{}", t.proto_loss, t.consi_loss, t.total));
        write_lines(&self.artifact(LOSS_SFT), "epoch,proto_loss,consi_loss,total", rows)?;
        let pred = sft::predict(&view, &out.params, true)?;
        write_pairs(&self.artifact(ASSIGNMENTS), "sample_index,predicted_cluster", pred.iter().copied().enumerate())?;
        Ok((pred, out.trace))
    }

    /// Scores `assignments.csv` against the dataset's held-out labels and
    /// writes `metrics.json`.
    pub fn evaluate(&self) -> Result<PipelineMetrics> {
        let pairs = read_pairs(&self.require(ASSIGNMENTS)?)?;
        let store = self.load_dataset()?;
        let truth = store
            .evaluation_labels()
            .ok_or_else(|| Error::Config("dataset has no labels to evaluate against".into()))?;
        let pred = ordered(&pairs, truth.len(), ASSIGNMENTS)?;
        let k = self.config.cps.k_part.max(max_id(&pred)).max(max_id(truth));
        let report = eval::report(&pred, truth, k)?;

        let (mut cps_accuracy, mut prototype_accuracy, mut n_prototypes) = (None, None, None);
        let (cps_path, proto_path) = (self.artifact(CPS_ASSIGNMENTS), self.artifact(PROTOTYPES));
        if cps_path.is_file() && proto_path.is_file() {
            let cps_pred = ordered(&read_pairs(&cps_path)?, truth.len(), CPS_ASSIGNMENTS)?;
            let (acc, matching) = eval::hungarian_accuracy(&cps_pred, truth, k)?;
            let protos = read_pairs(&proto_path)?;
            let labels: Vec<usize> = protos.iter().map(|p| p.1).collect();
            let proto_truth = protos
                .iter()
                .map(|p| {
                    truth.get(p.0).copied().ok_or(Error::OutOfRange {
                        what: "prototype index",
                        value: p.0,
                        bound: truth.len(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            cps_accuracy = Some(acc);
            prototype_accuracy = Some(eval::prototype_accuracy(&labels, &proto_truth, &matching)?);
            n_prototypes = Some(protos.len());
        }
        let metrics = PipelineMetrics {
            n_samples: pred.len(),
            k,
            report,
            cps_accuracy,
            prototype_accuracy,
            n_prototypes,
        };
        self.ensure_out_dir()?;
        let path = self.artifact(METRICS);
        let mut text = serde_json::to_string_pretty(&metrics).map_err(|e| Error::Contract(e.to_string()))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(metrics)
    }

    /// All stages in order.
    pub fn run(&self) -> Result<PipelineMetrics> {
        self.in_pool(|| {
            self.pretrain()?;
            self.sample_prototypes()?;
            self.finetune()?;
            self.evaluate()
        })
    }
}

fn max_id(ids: &[usize]) -> usize {
    ids.iter().max().map_or(0, |m| m + 1)
}

/// Values of `(index, value)` pairs that must list `0..n` in order.
fn ordered(pairs: &[(usize, usize)], n: usize, what: &str) -> Result<Vec<usize>> {
    if pairs.len() != n || pairs.iter().enumerate().any(|(i, p)| p.0 != i) {
        return Err(Error::Contract(format!(
            "{what} must list sample indices 0..{n} in order"
        )));
    }
    Ok(pairs.iter().map(|p| p.1).collect())
}

fn write_lines(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    writeln!(w, "{header}").map_err(io)?;
    for r in rows {
        writeln!(w, "{r}").map_err(io)?;
    }
    w.flush().map_err(io)
}

fn write_pairs(path: &Path, header: &str, pairs: impl Iterator<Item = (usize, usize)>) -> Result<()> {
    write_lines(path, header, pairs.map(|(a, b)| format!("{a},{b}")))
}

/// Reads a two-column integer CSV with a header line.
pub fn read_pairs(path: &Path) -> Result<Vec<(usize, usize)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| -> Result<usize> {
            record
                .get(i)
                .ok_or_else(|| Error::Parse {
                    line,
                    msg: format!("expected 2 columns in {}", path.display()),
                })?
                .parse()
                .map_err(|e| Error::Parse {
                    line,
                    msg: format!("{}: {e}", path.display()),
                })
        };
        out.push((field(0)?, field(1)?));
    }
    Ok(out)
}
