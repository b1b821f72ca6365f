//! Sample stores, synthetic generators, CSV ingestion and checkpoint files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::checkpoint;
use crate::numerics::{LayerParams, Matrix, ParamSet};
use crate::rng;

/// The unlabeled dataset, optionally carrying evaluation-only labels.
///
/// Training stages only ever see an [`UnlabeledView`], which has no label
/// accessor.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleStore {
    samples: Matrix,
    hidden_labels: Option<Vec<usize>>,
    pub name: String,
    pub seed: u64,
}

/// Label-free view of a [`SampleStore`] handed to the training stages.
#[derive(Clone, Copy, Debug)]
pub struct UnlabeledView<'a> {
    samples: &'a Matrix,
}

impl<'a> UnlabeledView<'a> {
    pub fn samples(&self) -> &'a Matrix {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }
}

impl SampleStore {
    pub fn new(samples: Matrix, hidden_labels: Option<Vec<usize>>, name: impl Into<String>) -> Result<Self> {
        if let Some(l) = &hidden_labels {
            if l.len() != samples.rows() {
                return Err(Error::dim("SampleStore::new", samples.rows(), l.len()));
            }
        }
        if !samples.is_finite() {
            return Err(Error::Contract("samples must be finite".into()));
        }
        Ok(Self {
            samples,
            hidden_labels,
            name: name.into(),
            seed: 0,
        })
    }

    pub fn unlabeled(&self) -> UnlabeledView<'_> {
        UnlabeledView {
            samples: &self.samples,
        }
    }

    /// Ground-truth labels, for evaluation only.
    pub fn evaluation_labels(&self) -> Option<&[usize]> {
        self.hidden_labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    WarpedBlobs,
    Rings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub kind: SynthKind,
    pub classes: usize,
    pub per_class: usize,
    pub latent_dim: usize,
    pub ambient_dim: usize,
    pub warp_strength: f64,
    pub noise_sigma: f64,
    /// Spacing of blob centers along the first latent axis (ring spacing for
    /// `rings`), in units of the per-blob standard deviation.
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// Standard deviation of each blob along the remaining latent axes.
    #[serde(default = "default_elongation")]
    pub elongation: f64,
    pub seed: u64,
}

fn default_separation() -> f64 {
    5.0
}

fn default_elongation() -> f64 {
    1.0
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("synthetic data needs at least 2 classes".into()));
        }
        if self.per_class == 0 || self.latent_dim == 0 {
            return Err(Error::Config("per_class and latent_dim must be positive".into()));
        }
        if self.ambient_dim < self.latent_dim {
            return Err(Error::Config(format!(
                "ambient_dim {} < latent_dim {}",
                self.ambient_dim, self.latent_dim
            )));
        }
        if self.kind == SynthKind::Rings && self.latent_dim < 2 {
            return Err(Error::Config("rings need latent_dim >= 2".into()));
        }
        for (name, v) in [
            ("warp_strength", self.warp_strength),
            ("noise_sigma", self.noise_sigma),
            ("separation", self.separation),
            ("elongation", self.elongation),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Generates a class-balanced synthetic store.
///
/// Latent points `x` are embedded as `y = P·x + w·A₂·tanh(A₁·x + b₁) + ε`,
/// where `P` zero-pads into the ambient space, `A₁`, `A₂`, `b₁` are fixed
/// random maps drawn from the seed, `w` is the warp strength and `ε` is
/// isotropic noise. With `w = 0`, zero noise and equal dimensions the raw
/// latent points are returned. Samples are ordered class by class.
///
/// Blob centers sit on the first latent axis, `separation` apart; each blob
/// has unit spread along that axis and `elongation` along the others.
pub fn generate(cfg: &SynthConfig) -> Result<SampleStore> {
    cfg.validate()?;
    let mut r = rng::seeded(cfg.seed);
    let (k, dl, da) = (cfg.classes, cfg.latent_dim, cfg.ambient_dim);
    let normal = |r: &mut rng::Rng| -> f64 { r.sample(StandardNormal) };

    // fixed warp map
    let a1 = LayerParams::glorot(dl, da, &mut r).weight;
    let b1: Vec<f64> = (0..da).map(|_| normal(&mut r)).collect();
    let a2 = LayerParams::glorot(da, da, &mut r).weight;

    // centers on a line along the first latent axis
    let centers: Vec<f64> = (0..k)
        .map(|c| cfg.separation * (c as f64 - (k as f64 - 1.0) / 2.0))
        .collect();

    let n = k * cfg.per_class;
    let mut data = Vec::with_capacity(n * da);
    let mut labels = Vec::with_capacity(n);
    for c in 0..k {
        for _ in 0..cfg.per_class {
            let latent: Vec<f64> = match cfg.kind {
                SynthKind::WarpedBlobs => (0..dl)
                    .map(|i| {
                        let z = normal(&mut r);
                        if i == 0 {
                            centers[c] + z
                        } else {
                            cfg.elongation * z
                        }
                    })
                    .collect(),
                SynthKind::Rings => {
                    let radius = cfg.separation * (c + 1) as f64 + 0.3 * normal(&mut r);
                    let theta = r.random_range(0.0..2.0 * std::f64::consts::PI);
                    let mut v = vec![0.0; dl];
                    v[0] = radius * theta.cos();
                    v[1] = radius * theta.sin();
                    for x in v.iter_mut().skip(2) {
                        *x = 0.3 * normal(&mut r);
                    }
                    v
                }
            };
            let mut y = vec![0.0; da];
            y[..dl].copy_from_slice(&latent);
            if cfg.warp_strength > 0.0 {
                let u: Vec<f64> = (0..da)
                    .map(|j| b1[j] + (0..dl).map(|i| latent[i] * a1[(i, j)]).sum::<f64>())
                    .map(f64::tanh)
                    .collect();
                for (j, yj) in y.iter_mut().enumerate() {
                    *yj += cfg.warp_strength * (0..da).map(|i| u[i] * a2[(i, j)]).sum::<f64>();
                }
            }
            for yj in y.iter_mut() {
                *yj += cfg.noise_sigma * normal(&mut r);
            }
            data.extend(y);
            labels.push(c);
        }
    }
    let name = match cfg.kind {
        SynthKind::WarpedBlobs => "warped_blobs",
        SynthKind::Rings => "rings",
    };
    let mut store = SampleStore::new(Matrix::from_vec(n, da, data)?, Some(labels), name)?;
    store.seed = cfg.seed;
    Ok(store)
}

/// Reads one sample per line, comma-separated, with an optional integer
/// label as the last column.
pub fn ingest_csv(path: &Path, has_labels: bool) -> Result<SampleStore> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Parse {
                line,
                msg: e.to_string(),
            }
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let mut fields: Vec<&str> = record.iter().collect();
        if has_labels {
            let label = fields.pop().ok_or_else(|| Error::Parse {
                line,
                msg: "missing label column".into(),
            })?;
            labels.push(label.parse::<usize>().map_err(|e| Error::Parse {
                line,
                msg: format!("label {label:?}: {e}"),
            })?);
        }
        let values = fields
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|e| Error::Parse {
                    line,
                    msg: format!("value {f:?}: {e}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if values.is_empty() {
            return Err(Error::Parse {
                line,
                msg: "row has no feature columns".into(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line,
                msg: "non-finite value".into(),
            });
        }
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 0,
            msg: format!("{} contains no samples", path.display()),
        });
    }
    let name = path
        .file_stem()
        .map_or_else(|| "csv".to_owned(), |s| s.to_string_lossy().into_owned());
    SampleStore::new(Matrix::from_rows(&rows)?, has_labels.then_some(labels), name)
}

/// Writes the store in the format read by [`ingest_csv`].
pub fn export_csv(store: &SampleStore, path: &Path, include_labels: bool) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let labels = store.evaluation_labels().filter(|_| include_labels);
    let io = |e| Error::io(path, e);
    for (i, row) in store.samples.iter_rows().enumerate() {
        let mut line = row.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        if let Some(l) = labels {
            line.push(',');
            line.push_str(&l[i].to_string());
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn save_checkpoint(params: &ParamSet, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    checkpoint::write_tensors(BufWriter::new(file), &params.to_tensors()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ParamSet::from_tensors(&checkpoint::decode(&bytes)?)
}
