//! Checkpoint-level metrics, GeoScore, baselines and checkpoint selection.

pub mod stats;

use std::collections::BTreeMap;

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::curvature::CurvatureSummary;
use crate::error::{Error, Result};
use crate::ingest::{EmbeddingSet, SubsampleReport};
use crate::matrix::{self, norm};
use crate::spectral::{HeatTrace, SpectralSummary};
use crate::topology::PhSummary;
pub use stats::{correlate, kendall_tau, spearman, zscore, CorrelationReport, Method};

/// Everything computed for one class of one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub n_samples: usize,
    /// Nodes without mutual neighbours, dropped before spectra and curvature.
    pub n_isolated: usize,
    pub spectral: SpectralSummary,
    pub curvature: CurvatureSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topology: Option<PhSummary>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassFailure {
    pub class_id: u32,
    pub reason: String,
}

/// Class-averaged diagnostics of one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetrics {
    pub checkpoint_id: String,
    #[serde(default)]
    pub epoch: Option<i64>,
    #[serde(default)]
    pub ood_accuracy: Option<f64>,
    pub tau: f64,
    pub mean_kappa: f64,
    pub lambda2: f64,
    pub entropy: f64,
    pub heat_traces: Vec<HeatTrace>,
    #[serde(default)]
    pub life0: Option<f64>,
    #[serde(default)]
    pub life1: Option<f64>,
    pub anisotropy: f64,
    pub feature_norm: f64,
    pub per_class: BTreeMap<u32, ClassMetrics>,
    #[serde(default)]
    pub geoscore: Option<f64>,
    #[serde(default)]
    pub skipped_classes: Vec<ClassFailure>,
    #[serde(default)]
    pub subsample: SubsampleReport,
}

impl CheckpointMetrics {
    /// Recomputes every class-averaged field from `per_class` (unweighted means,
    /// accumulated in class-id order).
    pub fn from_classes(
        checkpoint_id: String,
        per_class: BTreeMap<u32, ClassMetrics>,
        anisotropy: f64,
        feature_norm: f64,
    ) -> Result<Self> {
        if per_class.is_empty() {
            return Err(Error::NoRetainableClass { needed: 1 });
        }
        let k = per_class.len() as f64;
        let mean = |f: &dyn Fn(&ClassMetrics) -> f64| per_class.values().map(f).sum::<f64>() / k;
        let first = per_class.values().next().expect("non-empty");
        let heat_traces = first
            .spectral
            .heat_traces
            .iter()
            .enumerate()
            .map(|(i, h)| HeatTrace {
                t: h.t,
                value: mean(&|c| c.spectral.heat_traces[i].value),
            })
            .collect();
        let has_topology = per_class.values().all(|c| c.topology.is_some());
        let (life0, life1) = if has_topology {
            (
                Some(mean(&|c| c.topology.as_ref().map_or(0.0, |t| t.life0))),
                Some(mean(&|c| c.topology.as_ref().map_or(0.0, |t| t.life1))),
            )
        } else {
            (None, None)
        };
        Ok(CheckpointMetrics {
            checkpoint_id,
            epoch: None,
            ood_accuracy: None,
            tau: mean(&|c| c.spectral.tau),
            mean_kappa: mean(&|c| c.curvature.mean_kappa),
            lambda2: mean(&|c| c.spectral.lambda2),
            entropy: mean(&|c| c.spectral.entropy),
            heat_traces,
            life0,
            life1,
            anisotropy,
            feature_norm,
            geoscore: None,
            skipped_classes: Vec::new(),
            subsample: SubsampleReport::default(),
            per_class,
        })
    }

    /// Named scalar metrics in report order; `None` when not computed.
    pub fn scalar_metrics(&self) -> Vec<(String, Option<f64>)> {
        let mut out = vec![
            ("tau".to_string(), Some(self.tau)),
            ("mean_kappa".to_string(), Some(self.mean_kappa)),
            ("lambda2".to_string(), Some(self.lambda2)),
            ("entropy".to_string(), Some(self.entropy)),
        ];
        for h in &self.heat_traces {
            out.push((format!("heat_trace_t{}", h.t), Some(h.value)));
        }
        out.push(("life0".to_string(), self.life0));
        out.push(("life1".to_string(), self.life1));
        out.push(("anisotropy".to_string(), Some(self.anisotropy)));
        out.push(("feature_norm".to_string(), Some(self.feature_norm)));
        out.push(("geoscore".to_string(), self.geoscore));
        out
    }
}

/// Share of total variance on the leading principal axis, `λ_max / tr(Cov)`.
pub fn anisotropy(set: &EmbeddingSet) -> Result<f64> {
    if set.len() < 2 {
        return Err(Error::range("N", set.len(), ">= 2"));
    }
    let cov = matrix::covariance(&set.embeddings);
    let trace = cov.trace();
    if trace <= 0.0 {
        return Err(Error::Degenerate("covariance has zero trace".into()));
    }
    let top = SymmetricEigen::new(cov).eigenvalues.max();
    Ok((top / trace).clamp(0.0, 1.0))
}

/// Mean Euclidean row norm.
pub fn feature_norm(set: &EmbeddingSet) -> f64 {
    set.embeddings.iter_rows().map(norm).sum::<f64>() / set.len() as f64
}

/// Fills `geoscore = z(tau) - z(mean_kappa)` across a run. Returns the names
/// of columns whose spread was degenerate.
pub fn geoscore(run: &mut [CheckpointMetrics]) -> Result<Vec<&'static str>> {
    if run.len() < 2 {
        return Err(Error::range("checkpoints", run.len(), ">= 2"));
    }
    let tau: Vec<f64> = run.iter().map(|c| c.tau).collect();
    let kappa: Vec<f64> = run.iter().map(|c| c.mean_kappa).collect();
    let (zt, dt) = zscore(&tau)?;
    let (zk, dk) = zscore(&kappa)?;
    for (c, (a, b)) in run.iter_mut().zip(zt.iter().zip(&zk)) {
        c.geoscore = Some(a - b);
    }
    let mut degenerate = Vec::new();
    if dt {
        degenerate.push("tau");
    }
    if dk {
        degenerate.push("mean_kappa");
    }
    Ok(degenerate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Criterion {
    TorsionOnly,
    CurvatureOnly,
    Geoscore,
    Oracle,
}

impl Criterion {
    pub const ALL: [Criterion; 4] = [
        Criterion::Oracle,
        Criterion::TorsionOnly,
        Criterion::CurvatureOnly,
        Criterion::Geoscore,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Criterion::TorsionOnly => "Torsion-only",
            Criterion::CurvatureOnly => "Curvature-only",
            Criterion::Geoscore => "GeoScore",
            Criterion::Oracle => "Oracle",
        }
    }
}

impl std::str::FromStr for Criterion {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "torsion-only" | "torsion" => Ok(Criterion::TorsionOnly),
            "curvature-only" | "curvature" => Ok(Criterion::CurvatureOnly),
            "geoscore" => Ok(Criterion::Geoscore),
            "oracle" => Ok(Criterion::Oracle),
            other => Err(format!("unknown criterion '{other}'")),
        }
    }
}

/// Checkpoint indices from best to worst under `criterion`.
///
/// Torsion and GeoScore are minimised, curvature and accuracy maximised.
/// Ties go to the later epoch, then to the lexicographically smallest id.
pub fn rank_checkpoints(run: &[CheckpointMetrics], criterion: Criterion) -> Result<Vec<usize>> {
    if run.is_empty() {
        return Err(Error::range("checkpoints", 0, ">= 1"));
    }
    // larger score wins
    let score = |c: &CheckpointMetrics| -> Result<f64> {
        Ok(match criterion {
            Criterion::TorsionOnly => -c.tau,
            Criterion::CurvatureOnly => c.mean_kappa,
            Criterion::Geoscore => -c
                .geoscore
                .ok_or_else(|| Error::Degenerate("geoscore not computed".into()))?,
            Criterion::Oracle => c
                .ood_accuracy
                .ok_or_else(|| Error::MissingAccuracy(c.checkpoint_id.clone()))?,
        })
    };
    let scores = run.iter().map(score).collect::<Result<Vec<f64>>>()?;
    let mut order: Vec<usize> = (0..run.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .total_cmp(&scores[a])
            .then(run[b].epoch.cmp(&run[a].epoch))
            .then(run[a].checkpoint_id.cmp(&run[b].checkpoint_id))
    });
    Ok(order)
}

/// Index of the checkpoint chosen by `criterion`; the head of [`rank_checkpoints`].
pub fn select_checkpoint(run: &[CheckpointMetrics], criterion: Criterion) -> Result<usize> {
    Ok(rank_checkpoints(run, criterion)?[0])
}

/// One row of a selection table: selector, epoch, checkpoint, accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub selector: String,
    pub epoch: Option<i64>,
    pub checkpoint_id: String,
    pub accuracy: Option<f64>,
}

/// Selection table over the given criteria; oracle rows are skipped when no
/// accuracies are present.
pub fn selection_table(run: &[CheckpointMetrics], criteria: &[Criterion]) -> Result<Vec<SelectionRow>> {
    let have_acc = run.iter().all(|c| c.ood_accuracy.is_some());
    let mut rows = Vec::new();
    for &c in criteria {
        if c == Criterion::Oracle && !have_acc {
            continue;
        }
        let i = select_checkpoint(run, c)?;
        rows.push(SelectionRow {
            selector: c.label().to_string(),
            epoch: run[i].epoch,
            checkpoint_id: run[i].checkpoint_id.clone(),
            accuracy: run[i].ood_accuracy,
        });
    }
    Ok(rows)
}

/// Outcome of joining checkpoint metrics with an external target table.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinReport {
    /// Target ids with no matching checkpoint.
    pub unknown_ids: Vec<String>,
    /// Checkpoints with no target value.
    pub missing_ids: Vec<String>,
}

/// Rank correlations of every scalar metric against a target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub rows: Vec<CorrelationReport>,
    /// Metrics left out, with the reason.
    pub skipped: Vec<(String, String)>,
    pub join: JoinReport,
}

/// Correlates each scalar metric of `run` with `targets` (checkpoint id, value).
/// Needs at least 3 joined checkpoints.
pub fn correlation_table(
    run: &[CheckpointMetrics],
    targets: &[(String, f64)],
    target_name: &str,
    method: Method,
) -> Result<CorrelationTable> {
    let by_id: BTreeMap<&str, f64> = targets.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    let known: std::collections::BTreeSet<&str> = run.iter().map(|c| c.checkpoint_id.as_str()).collect();
    let join = JoinReport {
        unknown_ids: targets
            .iter()
            .filter(|(k, _)| !known.contains(k.as_str()))
            .map(|(k, _)| k.clone())
            .collect(),
        missing_ids: run
            .iter()
            .filter(|c| !by_id.contains_key(c.checkpoint_id.as_str()))
            .map(|c| c.checkpoint_id.clone())
            .collect(),
    };
    let joined: Vec<(&CheckpointMetrics, f64)> = run
        .iter()
        .filter_map(|c| by_id.get(c.checkpoint_id.as_str()).map(|&t| (c, t)))
        .collect();
    if joined.len() < 3 {
        return Err(Error::range("joined checkpoints", joined.len(), ">= 3"));
    }
    let target: Vec<f64> = joined.iter().map(|p| p.1).collect();
    let names: Vec<String> = joined[0].0.scalar_metrics().into_iter().map(|m| m.0).collect();
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for (idx, name) in names.into_iter().enumerate() {
        let column: Option<Vec<f64>> = joined.iter().map(|(c, _)| c.scalar_metrics()[idx].1).collect();
        let Some(column) = column else {
            skipped.push((name, "not computed for every checkpoint".to_string()));
            continue;
        };
        match correlate(method, &column, &target) {
            Ok(mut r) => {
                r.metric_name = name;
                r.target_name = target_name.to_string();
                rows.push(r);
            }
            Err(Error::Degenerate(reason)) => skipped.push((name, reason)),
            Err(e) => return Err(e),
        }
    }
    Ok(CorrelationTable { rows, skipped, join })
}
