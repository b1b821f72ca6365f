//! Browser bindings for the label-free half of the pipeline: generate a
//! dataset, reduce it, cluster it, pick prototypes, and score reductions by
//! silhouette. [`Session`] is plain Rust; [`Demo`] wraps it for JavaScript.

use contracluster::cps::{self, DrConfig, DrMethod, Metric};
use contracluster::data::{self, SampleStore, SynthConfig, SynthKind};
use contracluster::eval;
use contracluster::numerics::Matrix;
use contracluster::{Error, Result};
use wasm_bindgen::prelude::*;

const RESTARTS: usize = 5;

fn method(name: &str) -> Result<DrMethod> {
    match name {
        "identity" => Ok(DrMethod::Identity),
        "pca" => Ok(DrMethod::Pca),
        "spectral" => Ok(DrMethod::Spectral),
        "exact_tsne" => Ok(DrMethod::ExactTsne),
        other => Err(Error::Config(format!("unknown reduction {other:?}"))),
    }
}

/// First two columns, zero-padded for 1-D inputs, as interleaved `x, y`.
fn xy(m: &Matrix) -> Vec<f64> {
    m.iter_rows()
        .flat_map(|r| [r.first().copied().unwrap_or(0.0), r.get(1).copied().unwrap_or(0.0)])
        .collect()
}

/// One row of a silhouette sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepEntry {
    pub label: String,
    pub silhouette: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Session {
    store: SampleStore,
    /// Space that clustering runs in.
    space: Matrix,
    /// What the page draws.
    view: Matrix,
    assignments: Vec<usize>,
    prototypes: Vec<usize>,
    seed: u64,
}

impl Session {
    pub fn generate(rings: bool, classes: usize, per_class: usize, warp: f64, elongation: f64, seed: u64) -> Result<Self> {
        let cfg = SynthConfig {
            kind: if rings { SynthKind::Rings } else { SynthKind::WarpedBlobs },
            classes,
            per_class,
            latent_dim: 2,
            ambient_dim: 8,
            warp_strength: warp,
            noise_sigma: 0.1,
            separation: 5.0,
            elongation,
            seed,
        };
        let store = data::generate(&cfg)?;
        let raw = store.unlabeled().samples().clone();
        let view = cps::dr::reduce(&raw, &DrConfig::new(DrMethod::Pca, 15, 2, Metric::Euclidean))?;
        Ok(Self {
            store,
            space: raw,
            view,
            assignments: Vec::new(),
            prototypes: Vec::new(),
            seed,
        })
    }

    fn raw(&self) -> &Matrix {
        self.store.unlabeled().samples()
    }

    /// Reduces the raw samples to two dimensions; clustering then runs there.
    pub fn project(&mut self, method_name: &str, n_neighbors: usize) -> Result<()> {
        let m = method(method_name)?;
        if m == DrMethod::Identity {
            self.space = self.raw().clone();
            self.view = cps::dr::reduce(self.raw(), &DrConfig::new(DrMethod::Pca, 15, 2, Metric::Euclidean))?;
        } else {
            let mut cfg = DrConfig::new(m, n_neighbors, 2, Metric::Euclidean);
            cfg.seed = self.seed;
            self.space = cps::dr::reduce(self.raw(), &cfg)?;
            self.view = self.space.clone();
        }
        self.assignments.clear();
        self.prototypes.clear();
        Ok(())
    }

    /// k-means in the current space, then the `n_proto` members nearest the
    /// centroids.
    pub fn cluster(&mut self, k: usize, n_proto: usize) -> Result<()> {
        let model = cps::kmeans(&self.space, k, RESTARTS, self.seed)?;
        let protos = cps::sample_prototypes(&self.space, &model, n_proto)?;
        self.assignments = model.assignments;
        self.prototypes = protos.indices;
        Ok(())
    }

    /// Scores identity plus spectral at each neighbor count and adopts the
    /// winner, as the pipeline does. Uses no labels.
    pub fn sweep(&mut self, k: usize, neighbors: &[usize]) -> Result<Vec<SweepEntry>> {
        let mut grid = vec![DrConfig::new(DrMethod::Identity, 15, self.raw().cols(), Metric::Euclidean)];
        grid.extend(neighbors.iter().map(|&n| DrConfig::new(DrMethod::Spectral, n, 2, Metric::Euclidean)));
        let emb = cps::raw_embedding(&self.store.unlabeled());
        let result = cps::sweep_silhouette(&emb, &grid, k, RESTARTS, self.seed)?;
        self.view = if result.best.method == DrMethod::Identity {
            cps::dr::reduce(self.raw(), &DrConfig::new(DrMethod::Pca, 15, 2, Metric::Euclidean))?
        } else {
            result.z_low.clone()
        };
        self.space = result.z_low;
        self.assignments = result.model.assignments;
        self.prototypes.clear();
        Ok(result
            .table
            .iter()
            .map(|row| SweepEntry {
                label: match row.config.method {
                    DrMethod::Identity => "identity".to_owned(),
                    m => format!("{} n={}", m.name(), row.config.n_neighbors),
                },
                silhouette: row.silhouette,
            })
            .collect())
    }

    pub fn points(&self) -> Vec<f64> {
        xy(&self.view)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.store.evaluation_labels().map(<[usize]>::to_vec).unwrap_or_default()
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn prototypes(&self) -> &[usize] {
        &self.prototypes
    }

    /// Hungarian accuracy of the current clustering against the generator's
    /// labels, shown for reference only.
    pub fn accuracy(&self) -> Result<f64> {
        let truth = self.labels();
        let k = self.assignments.iter().chain(&truth).max().map_or(1, |m| m + 1);
        Ok(eval::hungarian_accuracy(&self.assignments, &truth, k)?.0)
    }
}

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

fn to_u32(v: &[usize]) -> Vec<u32> {
    v.iter().map(|&x| x as u32).collect()
}

#[wasm_bindgen]
pub struct Demo {
    inner: Session,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(rings: bool, classes: usize, per_class: usize, warp: f64, elongation: f64, seed: u32) -> std::result::Result<Demo, JsError> {
        Session::generate(rings, classes, per_class, warp, elongation, u64::from(seed))
            .map(|inner| Demo { inner })
            .map_err(js)
    }

    pub fn project(&mut self, method: &str, n_neighbors: usize) -> std::result::Result<(), JsError> {
        self.inner.project(method, n_neighbors).map_err(js)
    }

    pub fn cluster(&mut self, k: usize, n_proto: usize) -> std::result::Result<(), JsError> {
        self.inner.cluster(k, n_proto).map_err(js)
    }

    /// Returns the sweep table as `label,silhouette` lines.
    pub fn sweep(&mut self, k: usize, neighbors: Vec<u32>) -> std::result::Result<String, JsError> {
        let n: Vec<usize> = neighbors.into_iter().map(|v| v as usize).collect();
        let rows = self.inner.sweep(k, &n).map_err(js)?;
        Ok(rows
            .iter()
            .map(|r| format!("{},{}", r.label, r.silhouette.map_or_else(|| "failed".into(), |s| format!("{s:.4}"))))
            .collect::<Vec<_>>()
            .join("\n"))
    }

    pub fn points(&self) -> Vec<f64> {
        self.inner.points()
    }

    pub fn labels(&self) -> Vec<u32> {
        to_u32(&self.inner.labels())
    }

    pub fn assignments(&self) -> Vec<u32> {
        to_u32(self.inner.assignments())
    }

    pub fn prototypes(&self) -> Vec<u32> {
        to_u32(self.inner.prototypes())
    }

    pub fn accuracy(&self) -> f64 {
        self.inner.accuracy().unwrap_or(f64::NAN)
    }
}
