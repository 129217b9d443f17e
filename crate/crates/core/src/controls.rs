//! Structure-breaking and isometric interventions used as falsification controls.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use log::warn;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diagnostics::{correlate, Method};
use crate::error::{Error, Result};
use crate::graph::{ClassGraph, Edge};
use crate::ingest::{load_embeddings, EmbeddingSet, RunManifest};
use crate::matrix::Matrix;
use crate::pipeline::{checkpoint_metrics_with, AnalysisConfig};

/// Labels permuted uniformly at random; embeddings untouched.
pub fn shuffle_labels(set: &EmbeddingSet, seed: u64) -> EmbeddingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = set.labels.clone();
    labels.shuffle(&mut rng);
    EmbeddingSet {
        labels,
        ..set.clone()
    }
}

/// What the feature-shuffle control permutes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureShuffleMode {
    /// Each column permuted independently across rows: every per-feature
    /// marginal is kept, the joint geometry is destroyed.
    #[default]
    Columns,
    /// Coordinates permuted within each row: row norms are kept.
    Rows,
    /// All entries of the matrix permuted together.
    Entries,
}

/// Every column permuted independently across rows; labels untouched.
pub fn shuffle_features(set: &EmbeddingSet, seed: u64) -> EmbeddingSet {
    shuffle_features_with(set, FeatureShuffleMode::Columns, seed)
}

pub fn shuffle_features_with(set: &EmbeddingSet, mode: FeatureShuffleMode, seed: u64) -> EmbeddingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (set.len(), set.dim());
    let src = &set.embeddings;
    let mut out = src.clone();
    match mode {
        FeatureShuffleMode::Columns => {
            let mut order: Vec<usize> = (0..n).collect();
            for col in 0..d {
                order.shuffle(&mut rng);
                for (dst, &from) in order.iter().enumerate() {
                    out.set(dst, col, src.get(from, col));
                }
            }
        }
        FeatureShuffleMode::Rows => {
            for r in 0..n {
                out.row_mut(r).shuffle(&mut rng);
            }
        }
        FeatureShuffleMode::Entries => {
            let mut flat = src.as_slice().to_vec();
            flat.shuffle(&mut rng);
            out = Matrix::new(n, d, flat).expect("same shape");
        }
    }
    EmbeddingSet {
        embeddings: out,
        ..set.clone()
    }
}

/// Edge weights after degree-preserving rewiring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewireWeights {
    /// Each weight moves with its edge, so the weight multiset is unchanged.
    #[default]
    Carry,
    /// Weights recomputed with the self-tuning kernel for the new endpoints.
    Recompute,
}

/// Options of the structure-breaking controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlConfig {
    pub feature_shuffle: FeatureShuffleMode,
    pub rewire_weights: RewireWeights,
}

/// Sets every weight to `exp(-|x_i - x_j|^2 / (sigma_i sigma_j))`, where
/// `points` holds the rows indexed by `node_ids`.
pub fn recompute_kernel_weights(g: &ClassGraph, points: &Matrix) -> ClassGraph {
    let mut out = g.clone();
    for e in &mut out.edges {
        let d2 = crate::matrix::sq_dist(points.row(g.node_ids[e.i]), points.row(g.node_ids[e.j]));
        e.w = (-d2 / (g.sigma[e.i] * g.sigma[e.j])).exp();
    }
    out
}

/// Double-edge swaps `(a,b),(c,d) -> (a,d),(c,b)` that keep every unweighted
/// degree. Swaps creating self-loops or multi-edges are rejected. Each weight
/// moves with the edge it belonged to. `n_swaps` is the number of attempts.
pub fn rewire_degree_preserving(g: &ClassGraph, n_swaps: usize, seed: u64) -> ClassGraph {
    let mut out = g.clone();
    if g.edges.len() < 2 {
        warn!("class {}: fewer than 2 edges, rewiring skipped", g.class_id);
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let key = |a: usize, b: usize| (a.min(b), a.max(b));
    let mut present: HashSet<(usize, usize)> = g.edges.iter().map(|e| key(e.i, e.j)).collect();
    let m = out.edges.len();
    let mut accepted = 0usize;
    for _ in 0..n_swaps {
        let x = rng.random_range(0..m);
        let y = rng.random_range(0..m);
        if x == y {
            continue;
        }
        let (a, b) = (out.edges[x].i, out.edges[x].j);
        let (c, d) = if rng.random::<bool>() {
            (out.edges[y].i, out.edges[y].j)
        } else {
            (out.edges[y].j, out.edges[y].i)
        };
        if a == d || c == b || present.contains(&key(a, d)) || present.contains(&key(c, b)) {
            continue;
        }
        present.remove(&key(a, b));
        present.remove(&key(c, d));
        present.insert(key(a, d));
        present.insert(key(c, b));
        let (wx, wy) = (out.edges[x].w, out.edges[y].w);
        let (i, j) = key(a, d);
        out.edges[x] = Edge { i, j, w: wx };
        let (i, j) = key(c, b);
        out.edges[y] = Edge { i, j, w: wy };
        accepted += 1;
    }
    if accepted == 0 {
        warn!(
            "class {}: no valid degree-preserving swap among {n_swaps} attempts; graph unchanged",
            g.class_id
        );
    }
    out.edges.sort_by_key(|e| (e.i, e.j));
    out
}

/// Seeded random orthogonal `d x d` matrix (QR of a Gaussian matrix, sign-fixed).
pub fn random_orthogonal(d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
    let qr = gauss.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn transform(set: &EmbeddingSet, m: &DMatrix<f64>) -> EmbeddingSet {
    let out = set.embeddings.to_nalgebra() * m;
    EmbeddingSet {
        embeddings: Matrix::from_nalgebra(&out),
        ..set.clone()
    }
}

/// Rows right-multiplied by a random orthogonal matrix.
pub fn random_orthogonal_rotation(set: &EmbeddingSet, seed: u64) -> EmbeddingSet {
    transform(set, &random_orthogonal(set.dim(), seed))
}

/// Rows multiplied by a `d x out_dim` Gaussian matrix scaled by `1/sqrt(out_dim)`.
pub fn random_projection(set: &EmbeddingSet, out_dim: usize, seed: u64) -> Result<EmbeddingSet> {
    if out_dim == 0 || out_dim > set.dim() {
        return Err(Error::range("out_dim", out_dim, format!("1..={}", set.dim())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (out_dim as f64).sqrt();
    let proj = DMatrix::from_fn(set.dim(), out_dim, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        scale * z
    });
    Ok(transform(set, &proj))
}

/// An intervention applied to every checkpoint of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Control {
    Identity,
    LabelShuffle,
    FeatureShuffle,
    Rewire,
    Rotate,
    /// Random projection to the given dimension.
    Project(usize),
}

impl Control {
    pub const STANDARD: [Control; 5] = [
        Control::LabelShuffle,
        Control::FeatureShuffle,
        Control::Rewire,
        Control::Rotate,
        Control::Identity,
    ];
}

impl fmt::Display for Control {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Control::Identity => f.write_str("identity"),
            Control::LabelShuffle => f.write_str("label-shuffle"),
            Control::FeatureShuffle => f.write_str("feature-shuffle"),
            Control::Rewire => f.write_str("rewire"),
            Control::Rotate => f.write_str("rotate"),
            Control::Project(d) => write!(f, "project-{d}"),
        }
    }
}

impl FromStr for Control {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "identity" => Ok(Control::Identity),
            "label-shuffle" => Ok(Control::LabelShuffle),
            "feature-shuffle" => Ok(Control::FeatureShuffle),
            "rewire" => Ok(Control::Rewire),
            "rotate" => Ok(Control::Rotate),
            other => other
                .strip_prefix("project-")
                .and_then(|d| d.parse().ok())
                .map(Control::Project)
                .ok_or_else(|| format!("unknown control '{other}'")),
        }
    }
}

/// One checkpoint as consumed by the control suite.
#[derive(Debug, Clone)]
pub struct ControlInput {
    pub set: EmbeddingSet,
    pub epoch: Option<i64>,
    pub target: f64,
}

/// One row of the control table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlRow {
    pub control: String,
    pub metric: String,
    pub rho_original: f64,
    pub rho_control: f64,
}

/// Swap attempts per edge used by the rewire control.
pub const REWIRE_ATTEMPTS_PER_EDGE: usize = 10;

fn mix(seed: u64, salt: u64) -> u64 {
    seed ^ salt.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Per-checkpoint tau and mean curvature under `control`; checkpoint `t` uses
/// a seed derived from `cfg.seed` and `t`.
pub fn control_metrics(
    inputs: &[ControlInput],
    cfg: &AnalysisConfig,
    opts: &ControlConfig,
    control: Control,
) -> Result<(Vec<f64>, Vec<f64>)> {
    use rayon::prelude::*;
    let cfg = AnalysisConfig {
        topology: None,
        ..cfg.clone()
    };
    let per: Vec<(f64, f64)> = inputs
        .par_iter()
        .enumerate()
        .map(|(t, inp)| {
            let seed = mix(cfg.seed, t as u64);
            let set = match control {
                Control::LabelShuffle => shuffle_labels(&inp.set, seed),
                Control::FeatureShuffle => shuffle_features_with(&inp.set, opts.feature_shuffle, seed),
                Control::Rotate => random_orthogonal_rotation(&inp.set, seed),
                Control::Project(d) => random_projection(&inp.set, d, seed)?,
                Control::Identity | Control::Rewire => inp.set.clone(),
            };
            let m = if control == Control::Rewire {
                let hook = |g: ClassGraph, points: &Matrix| {
                    let attempts = REWIRE_ATTEMPTS_PER_EDGE * g.n_edges();
                    let rewired = rewire_degree_preserving(&g, attempts, mix(seed, u64::from(g.class_id)));
                    Ok(match opts.rewire_weights {
                        RewireWeights::Carry => rewired,
                        RewireWeights::Recompute => recompute_kernel_weights(&rewired, points),
                    })
                };
                checkpoint_metrics_with(&set, &cfg, Some(&hook))?
            } else {
                checkpoint_metrics_with(&set, &cfg, None)?
            };
            Ok((m.tau, m.mean_kappa))
        })
        .collect::<Result<_>>()?;
    Ok(per.into_iter().unzip())
}

/// Spearman correlation of tau and mean curvature with the target, before and
/// after each control. Persistent homology is not computed.
pub fn control_suite_sets(
    inputs: &[ControlInput],
    cfg: &AnalysisConfig,
    opts: &ControlConfig,
    controls: &[Control],
) -> Result<Vec<ControlRow>> {
    if inputs.len() < 3 {
        return Err(Error::range("checkpoints", inputs.len(), ">= 3"));
    }
    let target: Vec<f64> = inputs.iter().map(|i| i.target).collect();
    let (tau0, kappa0) = control_metrics(inputs, cfg, opts, Control::Identity)?;
    let rho_tau0 = correlate(Method::Spearman, &tau0, &target)?.rho;
    let rho_kappa0 = correlate(Method::Spearman, &kappa0, &target)?.rho;
    let mut rows = Vec::new();
    for &control in controls {
        let (tau, kappa) = if control == Control::Identity {
            (tau0.clone(), kappa0.clone())
        } else {
            control_metrics(inputs, cfg, opts, control)?
        };
        let rho = |x: &[f64]| -> Result<f64> {
            match correlate(Method::Spearman, x, &target) {
                Ok(r) => Ok(r.rho),
                // a control that flattens a metric leaves no rank signal
                Err(Error::Degenerate(_)) => Ok(0.0),
                Err(e) => Err(e),
            }
        };
        rows.push(ControlRow {
            control: control.to_string(),
            metric: "tau".into(),
            rho_original: rho_tau0,
            rho_control: rho(&tau)?,
        });
        rows.push(ControlRow {
            control: control.to_string(),
            metric: "mean_kappa".into(),
            rho_original: rho_kappa0,
            rho_control: rho(&kappa)?,
        });
    }
    Ok(rows)
}

/// Loads every checkpoint of a manifest (all must carry accuracy) and runs the control suite.
pub fn control_suite(
    manifest: &RunManifest,
    cfg: &AnalysisConfig,
    opts: &ControlConfig,
    controls: &[Control],
) -> Result<Vec<ControlRow>> {
    let inputs = manifest
        .checkpoints
        .iter()
        .map(|e| {
            let target = e
                .ood_accuracy
                .ok_or_else(|| Error::MissingAccuracy(e.checkpoint_id.clone()))?;
            let set = load_embeddings(&e.embeddings_path, &e.labels_path)?
                .with_tags(e.checkpoint_id.clone(), cfg.layer_tag.clone().unwrap_or_default());
            Ok(ControlInput {
                set,
                epoch: e.epoch,
                target,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    control_suite_sets(&inputs, cfg, opts, controls)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_class_graph;
    use crate::matrix::dist;

    fn random_set(n: usize, d: usize, seed: u64) -> EmbeddingSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let labels = (0..n).map(|i| (i % 3) as u32).collect();
        EmbeddingSet::new(Matrix::from_rows(&rows), labels).unwrap()
    }

    #[test]
    fn label_shuffle_properties() {
        let s = random_set(30, 4, 1);
        let a = shuffle_labels(&s, 9);
        let mut before = s.labels.clone();
        let mut after = a.labels.clone();
        before.sort_unstable();
        after.sort_unstable();
        assert_eq!(before, after);
        assert_ne!(a.labels, s.labels);
        assert_eq!(a.embeddings, s.embeddings);
        assert_eq!(a, shuffle_labels(&s, 9));
    }

    #[test]
    fn feature_shuffle_properties() {
        let s = random_set(40, 3, 2);
        let f = shuffle_features(&s, 4);
        assert_eq!(f.labels, s.labels);
        for c in 0..3 {
            let mut x: Vec<f64> = (0..40).map(|r| s.embeddings.get(r, c)).collect();
            let mut y: Vec<f64> = (0..40).map(|r| f.embeddings.get(r, c)).collect();
            let mean = |v: &[f64]| v.iter().sum::<f64>();
            x.sort_by(f64::total_cmp);
            y.sort_by(f64::total_cmp);
            assert_eq!(x, y);
            assert_eq!(mean(&x), mean(&y));
        }
        assert_ne!(f.embeddings, s.embeddings);
        let one = EmbeddingSet::new(Matrix::from_rows(&[[1.0, 2.0]]), vec![0]).unwrap();
        assert_eq!(shuffle_features(&one, 3), one);
    }

    #[test]
    fn feature_shuffle_modes() {
        let s = random_set(25, 5, 3);
        let sorted = |v: &[f64]| {
            let mut v = v.to_vec();
            v.sort_by(f64::total_cmp);
            v
        };
        let rows = shuffle_features_with(&s, FeatureShuffleMode::Rows, 6);
        for r in 0..25 {
            assert_eq!(sorted(rows.embeddings.row(r)), sorted(s.embeddings.row(r)));
        }
        let entries = shuffle_features_with(&s, FeatureShuffleMode::Entries, 6);
        assert_eq!(sorted(entries.embeddings.as_slice()), sorted(s.embeddings.as_slice()));
        assert_ne!(entries.embeddings, s.embeddings);
        assert_eq!(entries, shuffle_features_with(&s, FeatureShuffleMode::Entries, 6));
        assert_eq!(shuffle_features(&s, 6), shuffle_features_with(&s, FeatureShuffleMode::Columns, 6));
    }

    #[test]
    fn recomputed_weights_match_the_kernel() {
        let s = random_set(60, 3, 12);
        let g = build_class_graph(&s.embeddings, 0, 5).unwrap();
        assert_eq!(recompute_kernel_weights(&g, &s.embeddings), g);
        let rewired = rewire_degree_preserving(&g, 500, 2);
        let fresh = recompute_kernel_weights(&rewired, &s.embeddings);
        assert_eq!(fresh.degree_counts(), g.degree_counts());
        for e in &fresh.edges {
            let d2 = dist(s.embeddings.row(e.i), s.embeddings.row(e.j)).powi(2);
            assert!((e.w - (-d2 / (g.sigma[e.i] * g.sigma[e.j])).exp()).abs() < 1e-12);
        }
    }

    fn sorted_weights(g: &ClassGraph) -> Vec<f64> {
        let mut w: Vec<f64> = g.edges.iter().map(|e| e.w).collect();
        w.sort_by(f64::total_cmp);
        w
    }

    #[test]
    fn rewire_preserves_degrees_and_weights() {
        let s = random_set(60, 3, 5);
        let g = build_class_graph(&s.embeddings, 0, 6).unwrap();
        let r = rewire_degree_preserving(&g, 10 * g.n_edges(), 1);
        assert_eq!(r.n_nodes(), g.n_nodes());
        assert_eq!(r.degree_counts(), g.degree_counts());
        assert_eq!(sorted_weights(&r), sorted_weights(&g));
        assert_ne!(r.edges, g.edges);
        let keys: HashSet<_> = r.edges.iter().map(|e| (e.i, e.j)).collect();
        assert_eq!(keys.len(), r.n_edges());
        assert!(r.edges.iter().all(|e| e.i < e.j));
        assert_eq!(r, rewire_degree_preserving(&g, 10 * g.n_edges(), 1));
    }

    #[test]
    fn rewire_triangle_has_no_valid_swap() {
        let k3 = ClassGraph::from_edges(3, [(0, 1, 1.0), (0, 2, 2.0), (1, 2, 3.0)]);
        assert_eq!(rewire_degree_preserving(&k3, 1000, 0), k3);
        let k2 = ClassGraph::from_edges(2, [(0, 1, 1.0)]);
        assert_eq!(rewire_degree_preserving(&k2, 10, 0), k2);
    }

    #[test]
    fn rotation_is_an_isometry() {
        let s = random_set(25, 6, 7);
        let q = random_orthogonal(6, 3);
        let eye = DMatrix::<f64>::identity(6, 6);
        assert!((&q * q.transpose() - eye).abs().max() <= 1e-10);
        let r = random_orthogonal_rotation(&s, 3);
        for a in 0..25 {
            let na = crate::matrix::norm(s.embeddings.row(a));
            assert!((na - crate::matrix::norm(r.embeddings.row(a))).abs() <= 1e-10);
            for b in 0..25 {
                let d0 = dist(s.embeddings.row(a), s.embeddings.row(b));
                let d1 = dist(r.embeddings.row(a), r.embeddings.row(b));
                assert!((d0 - d1).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn projection_shape_and_distances() {
        let s = random_set(20, 8, 8);
        assert_eq!(random_projection(&s, 8, 1).unwrap().embeddings.cols(), 8);
        assert_eq!(random_projection(&s, 3, 1).unwrap().embeddings.rows(), 20);
        assert!(random_projection(&s, 0, 1).is_err());
        assert!(random_projection(&s, 9, 1).is_err());

        // Johnson-Lindenstrauss: squared distances preserved in expectation
        let big = random_set(30, 128, 1000);
        let mut ratios = Vec::new();
        for seed in 0..10 {
            let p = random_projection(&big, 64, seed).unwrap();
            for a in 0..30 {
                for b in a + 1..30 {
                    let d0 = crate::matrix::sq_dist(big.embeddings.row(a), big.embeddings.row(b));
                    let d1 = crate::matrix::sq_dist(p.embeddings.row(a), p.embeddings.row(b));
                    ratios.push(d1 / d0);
                }
            }
        }
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!((0.8..=1.2).contains(&mean), "mean ratio {mean}");
    }

    #[test]
    fn control_names_round_trip() {
        for c in Control::STANDARD.into_iter().chain([Control::Project(16)]) {
            assert_eq!(c.to_string().parse::<Control>().unwrap(), c);
        }
        assert!("nope".parse::<Control>().is_err());
    }

    #[test]
    fn identity_control_reproduces_original() {
        use crate::synth::{generate_sets, SynthConfig};
        let sc = SynthConfig {
            n_per_class: 30,
            n_classes: 2,
            dim: 4,
            ..SynthConfig::linear(4, 1)
        };
        let inputs: Vec<ControlInput> = generate_sets(&sc)
            .unwrap()
            .into_iter()
            .map(|c| ControlInput {
                set: c.set,
                epoch: Some(c.epoch),
                target: c.coherence,
            })
            .collect();
        let cfg = AnalysisConfig {
            k: 5,
            n_per_class: 30,
            ..Default::default()
        };
        let rows = control_suite_sets(&inputs, &cfg, &ControlConfig::default(), &[Control::Identity]).unwrap();
        assert_eq!(rows.len(), 2);
        for r in rows {
            assert_eq!(r.rho_original, r.rho_control);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn rewire_keeps_degrees_and_weights(data_seed in 0u64..1000, swap_seed in any::<u64>()) {
                let s = random_set(50, 3, data_seed);
                let g = build_class_graph(&s.embeddings, 0, 4).unwrap();
                let r = rewire_degree_preserving(&g, 200, swap_seed);
                prop_assert_eq!(r.n_nodes(), g.n_nodes());
                prop_assert_eq!(r.degree_counts(), g.degree_counts());
                prop_assert_eq!(sorted_weights(&r), sorted_weights(&g));
                let distinct: HashSet<(usize, usize)> = r.edges.iter().map(|e| (e.i, e.j)).collect();
                prop_assert_eq!(distinct.len(), r.n_edges());
                prop_assert!(r.edges.iter().all(|e| e.i < e.j));
            }

            #[test]
            fn rotation_keeps_the_mutual_knn_graph(data_seed in 0u64..1000, rot_seed in any::<u64>()) {
                let s = random_set(40, 4, data_seed);
                let rotated = random_orthogonal_rotation(&s, rot_seed);
                let g = build_class_graph(&s.embeddings, 0, 5).unwrap();
                let h = build_class_graph(&rotated.embeddings, 0, 5).unwrap();
                let pairs = |g: &ClassGraph| g.edges.iter().map(|e| (e.i, e.j)).collect::<Vec<_>>();
                prop_assert_eq!(pairs(&g), pairs(&h));
                for (a, b) in g.edges.iter().zip(&h.edges) {
                    prop_assert!((a.w - b.w).abs() <= 1e-9 * a.w.max(1e-300));
                }
            }
        }
    }
}
