//! End-to-end analysis of one checkpoint and of a whole run.

use std::collections::BTreeMap;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curvature::{mean_curvature, CurvatureConfig};
use crate::diagnostics::{anisotropy, feature_norm, CheckpointMetrics, ClassFailure, ClassMetrics};
use crate::error::{Error, Result};
use crate::graph::{build_class_graph_with, ClassGraph, DEFAULT_K};
use crate::ingest::{
    class_balanced_subsample, l2_normalize, load_embeddings, pca_whiten, EmbeddingSet, RunManifest,
    DEFAULT_N_PER_CLASS, DEFAULT_WHITEN_EPS,
};
use crate::spectral::{spectral_summary, ZeroTol, DEFAULT_HEAT_TIMES};
use crate::topology::{point_cloud_summary, TopologyConfig};

/// Every knob of the analysis; echoed verbatim into reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    pub k: usize,
    /// Neighbour rank used for the kernel scale; `None` means `k`.
    pub sigma_k: Option<usize>,
    pub n_per_class: usize,
    pub seed: u64,
    pub whiten: bool,
    /// Output dimension of whitening; `None` keeps the input dimension.
    pub whiten_dim: Option<usize>,
    pub whiten_eps: f64,
    pub zero_tol: ZeroTol,
    pub heat_times: Vec<f64>,
    pub curvature: CurvatureConfig,
    /// `None` skips persistent homology.
    pub topology: Option<TopologyConfig>,
    pub layer_tag: Option<String>,
    pub keep_eigenvalues: bool,
    /// Keep per-edge curvature in the per-class summaries.
    pub keep_edge_curvature: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            k: DEFAULT_K,
            sigma_k: None,
            n_per_class: DEFAULT_N_PER_CLASS,
            seed: 0,
            whiten: false,
            whiten_dim: None,
            whiten_eps: DEFAULT_WHITEN_EPS,
            zero_tol: ZeroTol::default(),
            heat_times: DEFAULT_HEAT_TIMES.to_vec(),
            curvature: CurvatureConfig::default(),
            topology: Some(TopologyConfig::default()),
            layer_tag: None,
            keep_eigenvalues: false,
            keep_edge_curvature: false,
        }
    }
}

/// Preprocessing shared by every diagnostic: subsample, l2-normalize, optionally whiten.
pub fn preprocess(set: &EmbeddingSet, cfg: &AnalysisConfig) -> Result<(EmbeddingSet, crate::ingest::SubsampleReport)> {
    let (sub, report) = class_balanced_subsample(set, cfg.n_per_class, cfg.seed)?;
    let mut prepared = l2_normalize(&sub)?;
    if cfg.whiten {
        let dim = cfg.whiten_dim.unwrap_or(prepared.dim());
        prepared = pca_whiten(&prepared, dim, cfg.whiten_eps)?;
    }
    Ok((prepared, report))
}

/// Rewrites a class graph (isolated nodes already removed) before its metrics
/// are taken. The matrix holds the class points that `node_ids` index.
pub type GraphHook<'a> = dyn Fn(ClassGraph, &crate::matrix::Matrix) -> Result<ClassGraph> + Sync + 'a;

fn class_metrics(
    points: &crate::matrix::Matrix,
    class_id: u32,
    cfg: &AnalysisConfig,
    hook: Option<&GraphHook>,
) -> Result<ClassMetrics> {
    let full = build_class_graph_with(points, class_id, cfg.k, cfg.sigma_k)?;
    let (g, n_isolated) = full.without_isolated();
    let g = match hook {
        Some(h) => h(g, points)?,
        None => g,
    };
    if g.n_nodes() < 2 {
        return Err(Error::Degenerate(format!(
            "class {class_id}: fewer than 2 connected nodes"
        )));
    }
    let spectral = spectral_summary(&g, cfg.zero_tol, &cfg.heat_times, cfg.keep_eigenvalues)?;
    let mut curvature = mean_curvature(&g, &cfg.curvature)?;
    if !cfg.keep_edge_curvature {
        curvature.per_edge.clear();
    }
    let topology = cfg
        .topology
        .as_ref()
        .map(|t| point_cloud_summary(points, t))
        .transpose()?;
    Ok(ClassMetrics {
        n_samples: points.rows(),
        n_isolated,
        spectral,
        curvature,
        topology,
    })
}

/// Diagnostics of one checkpoint. Classes that fail are recorded and left out
/// of the averages; the call fails only when no class survives.
pub fn checkpoint_metrics(set: &EmbeddingSet, cfg: &AnalysisConfig) -> Result<CheckpointMetrics> {
    checkpoint_metrics_with(set, cfg, None)
}

/// [`checkpoint_metrics`] with an optional per-class graph rewrite.
pub fn checkpoint_metrics_with(
    set: &EmbeddingSet,
    cfg: &AnalysisConfig,
    hook: Option<&GraphHook>,
) -> Result<CheckpointMetrics> {
    let aniso = anisotropy(set)?;
    let fnorm = feature_norm(set);
    let (prepared, subsample) = preprocess(set, cfg)?;
    let need = cfg.k.max(cfg.sigma_k.unwrap_or(cfg.k)) + 1;

    let mut failures = Vec::new();
    let mut eligible = Vec::new();
    for (class_id, rows) in prepared.class_rows() {
        if rows.len() < need {
            failures.push(ClassFailure {
                class_id,
                reason: format!("{} samples, need at least {need}", rows.len()),
            });
        } else {
            eligible.push((class_id, rows));
        }
    }
    if eligible.is_empty() {
        return Err(Error::NoRetainableClass { needed: need });
    }
    let outcomes: Vec<(u32, Result<ClassMetrics>)> = eligible
        .par_iter()
        .map(|(c, rows)| (*c, class_metrics(&prepared.embeddings.select_rows(rows), *c, cfg, hook)))
        .collect();

    let mut per_class = BTreeMap::new();
    for (class_id, outcome) in outcomes {
        match outcome {
            Ok(m) => {
                per_class.insert(class_id, m);
            }
            Err(e) => {
                warn!("{}: class {class_id} failed: {e}", set.checkpoint_id);
                failures.push(ClassFailure {
                    class_id,
                    reason: e.to_string(),
                });
            }
        }
    }
    if per_class.is_empty() {
        return Err(Error::NoRetainableClass { needed: need });
    }
    failures.sort_by_key(|f| f.class_id);
    let mut metrics = CheckpointMetrics::from_classes(set.checkpoint_id.clone(), per_class, aniso, fnorm)?;
    metrics.skipped_classes = failures;
    metrics.subsample = subsample;
    Ok(metrics)
}

/// A checkpoint that could not be analysed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointFailure {
    pub checkpoint_id: String,
    pub reason: String,
}

/// Analysis of a whole run, in manifest order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAnalysis {
    pub checkpoints: Vec<CheckpointMetrics>,
    pub failures: Vec<CheckpointFailure>,
}

fn analyze_entry(entry: &crate::ingest::ManifestEntry, cfg: &AnalysisConfig) -> Result<CheckpointMetrics> {
    let set = load_embeddings(&entry.embeddings_path, &entry.labels_path)?.with_tags(
        entry.checkpoint_id.clone(),
        cfg.layer_tag.clone().unwrap_or_default(),
    );
    let mut m = checkpoint_metrics(&set, cfg)?;
    m.epoch = entry.epoch;
    m.ood_accuracy = entry.ood_accuracy;
    Ok(m)
}

/// Analyses every checkpoint of a manifest in parallel. GeoScore is filled when
/// at least two checkpoints succeed.
pub fn analyze_run(manifest: &RunManifest, cfg: &AnalysisConfig) -> RunAnalysis {
    let outcomes: Vec<Result<CheckpointMetrics>> = manifest
        .checkpoints
        .par_iter()
        .map(|e| analyze_entry(e, cfg))
        .collect();
    let mut checkpoints = Vec::new();
    let mut failures = Vec::new();
    for (entry, outcome) in manifest.checkpoints.iter().zip(outcomes) {
        match outcome {
            Ok(m) => checkpoints.push(m),
            Err(e) => {
                warn!("{}: {e}", entry.checkpoint_id);
                failures.push(CheckpointFailure {
                    checkpoint_id: entry.checkpoint_id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    fill_geoscore(&mut checkpoints);
    RunAnalysis { checkpoints, failures }
}

/// Analyses in-memory checkpoints (no files); ids and epochs come from the sets.
pub fn analyze_sets(sets: &[(EmbeddingSet, Option<i64>, Option<f64>)], cfg: &AnalysisConfig) -> Result<Vec<CheckpointMetrics>> {
    let mut run = sets
        .par_iter()
        .map(|(s, epoch, acc)| {
            checkpoint_metrics(s, cfg).map(|mut m| {
                m.epoch = *epoch;
                m.ood_accuracy = *acc;
                m
            })
        })
        .collect::<Result<Vec<_>>>()?;
    fill_geoscore(&mut run);
    Ok(run)
}

fn fill_geoscore(run: &mut [CheckpointMetrics]) {
    if run.len() >= 2 {
        if let Ok(degenerate) = crate::diagnostics::geoscore(run) {
            for col in degenerate {
                warn!("{col} has no spread across checkpoints; its z-score is zero");
            }
        }
    }
}
