//! Embedding dumps, run manifests and preprocessing.

pub mod npy;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::SymmetricEigen;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{self, Matrix};
use npy::NpyData;

pub const DEFAULT_N_PER_CLASS: usize = 500;
pub const DEFAULT_WHITEN_EPS: f64 = 1e-8;

/// Embeddings of one checkpoint, one row per sample, with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub embeddings: Matrix,
    pub labels: Vec<u32>,
    pub checkpoint_id: String,
    pub layer_tag: String,
}

impl EmbeddingSet {
    /// Validates shapes and finiteness.
    pub fn new(embeddings: Matrix, labels: Vec<u32>) -> Result<Self> {
        if embeddings.rows() == 0 || embeddings.cols() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "embeddings must be non-empty, got {}x{}",
                embeddings.rows(),
                embeddings.cols()
            )));
        }
        if labels.len() != embeddings.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} embedding rows",
                labels.len(),
                embeddings.rows()
            )));
        }
        for (i, r) in embeddings.iter_rows().enumerate() {
            if let Some((j, &v)) = r.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(Error::NonFinite {
                    row: i,
                    col: j,
                    value: v,
                });
            }
        }
        Ok(EmbeddingSet {
            embeddings,
            labels,
            checkpoint_id: String::new(),
            layer_tag: String::new(),
        })
    }

    pub fn with_tags(mut self, checkpoint_id: impl Into<String>, layer_tag: impl Into<String>) -> Self {
        self.checkpoint_id = checkpoint_id.into();
        self.layer_tag = layer_tag.into();
        self
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    /// Sorted distinct labels.
    pub fn classes(&self) -> Vec<u32> {
        let mut c: Vec<u32> = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Row indices of each class, ascending, keyed by class.
    pub fn class_rows(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &c) in self.labels.iter().enumerate() {
            out.entry(c).or_default().push(i);
        }
        out
    }

    fn with_embeddings(&self, embeddings: Matrix) -> Self {
        EmbeddingSet {
            embeddings,
            labels: self.labels.clone(),
            checkpoint_id: self.checkpoint_id.clone(),
            layer_tag: self.layer_tag.clone(),
        }
    }

    fn select(&self, rows: &[usize]) -> Self {
        EmbeddingSet {
            embeddings: self.embeddings.select_rows(rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            checkpoint_id: self.checkpoint_id.clone(),
            layer_tag: self.layer_tag.clone(),
        }
    }
}

/// Loads an embedding matrix and its labels from two NPY files.
pub fn load_embeddings(embeddings_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let ep = embeddings_path.as_ref();
    let lp = labels_path.as_ref();
    let emb = npy::read(ep)?;
    let (rows, cols) = match emb.shape[..] {
        [r, c] => (r, c),
        _ => {
            return Err(Error::Npy {
                path: ep.to_path_buf(),
                field: "shape",
                reason: format!("expected a 2-D array, got shape {:?}", emb.shape),
            })
        }
    };
    let values = match emb.data {
        NpyData::Float(v) => v,
        NpyData::Int(_) => {
            return Err(Error::Npy {
                path: ep.to_path_buf(),
                field: "descr",
                reason: "embeddings must be f4 or f8".into(),
            })
        }
    };
    let lab = npy::read(lp)?;
    if lab.shape.len() != 1 {
        return Err(Error::Npy {
            path: lp.to_path_buf(),
            field: "shape",
            reason: format!("expected a 1-D array, got shape {:?}", lab.shape),
        });
    }
    let raw = match lab.data {
        NpyData::Int(v) => v,
        NpyData::Float(_) => {
            return Err(Error::Npy {
                path: lp.to_path_buf(),
                field: "descr",
                reason: "labels must be i4 or i8".into(),
            })
        }
    };
    if raw.len() != rows {
        return Err(Error::ShapeMismatch(format!(
            "{}: {} labels but {} has {} rows",
            lp.display(),
            raw.len(),
            ep.display(),
            rows
        )));
    }
    let labels = raw
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            u32::try_from(v).map_err(|_| Error::Npy {
                path: lp.to_path_buf(),
                field: "data",
                reason: format!("label {v} at index {i} is not a non-negative 32-bit integer"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let m = Matrix::new(rows, cols, values)?;
    EmbeddingSet::new(m, labels).map_err(|e| match e {
        Error::NonFinite { row, col, value } => Error::Npy {
            path: ep.to_path_buf(),
            field: "data",
            reason: format!("non-finite value {value} at row {row}, col {col}"),
        },
        other => other,
    })
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize(set: &EmbeddingSet) -> Result<EmbeddingSet> {
    let mut m = set.embeddings.clone();
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let n = matrix::norm(row);
        if n == 0.0 {
            return Err(Error::ZeroNorm { row: i });
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(set.with_embeddings(m))
}

/// Projects the centred data onto its top `out_dim` principal axes and
/// rescales each axis by `1/sqrt(variance + eps)`.
pub fn pca_whiten(set: &EmbeddingSet, out_dim: usize, eps: f64) -> Result<EmbeddingSet> {
    if !(eps > 0.0) {
        return Err(Error::range("eps", eps, "> 0"));
    }
    let pcs = principal_axes(set, out_dim)?;
    let mut proj = pcs.axes;
    for r in 0..proj.rows() {
        for (v, var) in proj.row_mut(r).iter_mut().zip(&pcs.variances) {
            *v /= (var + eps).sqrt();
        }
    }
    Ok(set.with_embeddings(pcs.centred.matmul(&proj)))
}

/// Leading principal axes of a data set.
pub(crate) struct PrincipalAxes {
    /// Column-centred data.
    pub centred: Matrix,
    /// `d x out_dim`, one unit axis per column, largest variance first.
    pub axes: Matrix,
    /// Variance (divisor N) along each axis, clamped at 0.
    pub variances: Vec<f64>,
}

pub(crate) fn principal_axes(set: &EmbeddingSet, out_dim: usize) -> Result<PrincipalAxes> {
    let (n, d) = (set.len(), set.dim());
    let max_dim = d.min(n.saturating_sub(1));
    if out_dim == 0 || out_dim > max_dim {
        return Err(Error::range("out_dim", out_dim, format!("1..={max_dim}")));
    }
    let cov = matrix::covariance(&set.embeddings);
    if cov.trace() <= 0.0 {
        return Err(Error::Degenerate("all rows are identical".into()));
    }
    let eig = SymmetricEigen::try_new(cov, f64::EPSILON, 0)
        .ok_or_else(|| Error::Eigen("covariance eigen-decomposition did not converge".into()))?;
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut axes = Matrix::zeros(d, out_dim);
    let mut variances = Vec::with_capacity(out_dim);
    for (c, &k) in order.iter().take(out_dim).enumerate() {
        let axis = eig.eigenvectors.column(k);
        // sign convention: largest-magnitude coordinate positive
        let pivot = (0..d)
            .max_by(|&a, &b| axis[a].abs().total_cmp(&axis[b].abs()).then(b.cmp(&a)))
            .unwrap_or(0);
        let sign = if axis[pivot] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..d {
            axes.set(r, c, axis[r] * sign);
        }
        variances.push(eig.eigenvalues[k].max(0.0));
    }
    let mean = matrix::column_means(&set.embeddings);
    let mut centred = set.embeddings.clone();
    for i in 0..n {
        for (v, mu) in centred.row_mut(i).iter_mut().zip(&mean) {
            *v -= mu;
        }
    }
    Ok(PrincipalAxes {
        centred,
        axes,
        variances,
    })
}

/// Classes that had fewer than the requested number of samples.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsampleReport {
    pub shortfalls: Vec<Shortfall>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub class_id: u32,
    pub available: usize,
    pub requested: usize,
}

/// Draws `n_per_class` rows per class uniformly without replacement.
///
/// Classes with fewer rows keep all of them and are listed in the report.
/// Selected rows keep their original relative order.
pub fn class_balanced_subsample(
    set: &EmbeddingSet,
    n_per_class: usize,
    seed: u64,
) -> Result<(EmbeddingSet, SubsampleReport)> {
    if n_per_class < 2 {
        return Err(Error::range("n_per_class", n_per_class, ">= 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(set.len());
    let mut report = SubsampleReport::default();
    for (class_id, rows) in set.class_rows() {
        if rows.len() <= n_per_class {
            if rows.len() < n_per_class {
                warn!(
                    "class {class_id}: only {} samples, wanted {n_per_class}",
                    rows.len()
                );
                report.shortfalls.push(Shortfall {
                    class_id,
                    available: rows.len(),
                    requested: n_per_class,
                });
            }
            keep.extend_from_slice(&rows);
        } else {
            let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, rows.len(), n_per_class)
                .into_iter()
                .map(|j| rows[j])
                .collect();
            picked.sort_unstable();
            keep.extend(picked);
        }
    }
    keep.sort_unstable();
    Ok((set.select(&keep), report))
}

/// One checkpoint entry of a run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub checkpoint_id: String,
    pub embeddings_path: PathBuf,
    pub labels_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epoch: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood_accuracy: Option<f64>,
}

/// Ordered list of checkpoints making up one training run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub checkpoints: Vec<ManifestEntry>,
}

impl RunManifest {
    /// Parses and validates a manifest. Relative paths are resolved against
    /// the manifest's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: RunManifest = serde_json::from_str(&text)?;
        if let Some(base) = path.parent() {
            for e in &mut m.checkpoints {
                if e.embeddings_path.is_relative() {
                    e.embeddings_path = base.join(&e.embeddings_path);
                }
                if e.labels_path.is_relative() {
                    e.labels_path = base.join(&e.labels_path);
                }
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.checkpoints {
            if !seen.insert(e.checkpoint_id.as_str()) {
                return Err(Error::Manifest(format!(
                    "duplicate checkpoint_id '{}'",
                    e.checkpoint_id
                )));
            }
            if let Some(a) = e.ood_accuracy {
                if !(0.0..=1.0).contains(&a) {
                    return Err(Error::Manifest(format!(
                        "ood_accuracy {a} of '{}' outside [0, 1]",
                        e.checkpoint_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Number of entries carrying an accuracy.
    pub fn n_with_accuracy(&self) -> usize {
        self.checkpoints
            .iter()
            .filter(|e| e.ood_accuracy.is_some())
            .count()
    }
}
