//! Stage 2: contrastive prototype sampling.
//!
//! Embed every sample with the frozen encoder, reduce the embedding, run
//! k-means on the reduced points, and keep the members nearest to each
//! centroid as prototypes. The reduction hyperparameters are chosen by the
//! label-free silhouette score.

pub mod dr;
pub mod kmeans;
pub mod prototypes;
pub mod silhouette;

pub use dr::{DrConfig, DrMethod, Metric};
pub use kmeans::{kmeans, ClusterModel};
pub use prototypes::{sample_prototypes, PrototypeSet};
pub use silhouette::silhouette;

use crate::data::UnlabeledView;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Mode, ParamSet};

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub h_high: Matrix,
    pub z_low: Option<Matrix>,
}

/// Eval-mode encoder output for every sample.
pub fn embed_all(view: &UnlabeledView<'_>, params: &ParamSet) -> Result<EmbeddingSet> {
    let (h, _) = params.live.forward_encoder(&params.spec, view.samples(), Mode::Eval)?;
    Ok(EmbeddingSet { h_high: h, z_low: None })
}

/// Uses the raw samples as the embedding (no encoder).
pub fn raw_embedding(view: &UnlabeledView<'_>) -> EmbeddingSet {
    EmbeddingSet {
        h_high: view.samples().clone(),
        z_low: None,
    }
}

pub fn project(emb: &EmbeddingSet, cfg: &DrConfig) -> Result<EmbeddingSet> {
    let z = dr::reduce(&emb.h_high, cfg)?;
    Ok(EmbeddingSet {
        h_high: emb.h_high.clone(),
        z_low: Some(z),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub config: DrConfig,
    /// `None` when projection or clustering failed for this configuration.
    pub silhouette: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub best_index: usize,
    pub best: DrConfig,
    pub table: Vec<SweepRow>,
    /// Projection and clustering of the winning configuration.
    pub z_low: Matrix,
    pub model: ClusterModel,
}

/// Projects, clusters and scores every grid entry; returns the highest
/// silhouette (ties: earliest in the grid). Entries whose projection fails
/// are recorded and skipped; if all fail, the first error is returned.
pub fn sweep_silhouette(
    emb: &EmbeddingSet,
    grid: &[DrConfig],
    k_part: usize,
    restarts: usize,
    seed: u64,
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::Config("silhouette sweep grid is empty".into()));
    }
    let mut table = Vec::with_capacity(grid.len());
    let mut best: Option<(usize, f64, Matrix, ClusterModel)> = None;
    let mut first_error = None;
    for (i, cfg) in grid.iter().enumerate() {
        let outcome = dr::reduce(&emb.h_high, cfg).and_then(|z| {
            let model = kmeans(&z, k_part, restarts, seed)?;
            let s = silhouette(&z, &model.assignments)?;
            Ok((z, model, s))
        });
        match outcome {
            Ok((z, model, s)) => {
                table.push(SweepRow {
                    config: cfg.clone(),
                    silhouette: Some(s),
                    error: None,
                });
                if best.as_ref().is_none_or(|b| s > b.1) {
                    best = Some((i, s, z, model));
                }
            }
            Err(e) => {
                table.push(SweepRow {
                    config: cfg.clone(),
                    silhouette: None,
                    error: Some(e.to_string()),
                });
                first_error.get_or_insert(e);
            }
        }
    }
    match best {
        Some((best_index, _, z_low, model)) => Ok(SweepResult {
            best_index,
            best: grid[best_index].clone(),
            table,
            z_low,
            model,
        }),
        None => Err(first_error.expect("non-empty grid")),
    }
}
