//! Vertex-Rips persistence in dimensions 0 and 1.
//!
//! An edge enters the filtration at the Euclidean distance between its
//! endpoints; a triangle enters at its longest edge. H0 pairs come from a
//! minimum spanning tree, H1 pairs from reducing the coboundary matrix of
//! edges against triangles (persistent cohomology with clearing).

use std::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{principal_axes, EmbeddingSet};
use crate::matrix::{dist, Matrix};
use crate::union_find::UnionFind;

pub const DEFAULT_H1_POINT_BUDGET: usize = 256;
pub const DEFAULT_SIMPLEX_BUDGET: usize = 5_000_000;

/// Persistence diagrams and total lifetimes of one point cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhSummary {
    pub life0: f64,
    pub life1: f64,
    pub n_points: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagram0: Vec<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagram1: Vec<(f64, f64)>,
}

/// Sum of lifetimes, accumulated over ascending lifetimes.
fn total_life(diagram: &[(f64, f64)]) -> f64 {
    let mut l: Vec<f64> = diagram.iter().map(|(b, d)| d - b).collect();
    l.sort_by(f64::total_cmp);
    l.iter().sum()
}

fn pairwise(points: &Matrix) -> Vec<f64> {
    let n = points.rows();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = dist(points.row(i), points.row(j));
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// H0 diagram: every finite class is born at 0 and dies at an MST edge
/// length. The component that never dies is left out.
pub fn rips_h0(points: &Matrix) -> Result<(Vec<(f64, f64)>, f64)> {
    let n = points.rows();
    if n < 2 {
        return Err(Error::range("points", n, ">= 2"));
    }
    // dense Prim
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    in_tree[0] = true;
    for j in 1..n {
        best[j] = dist(points.row(0), points.row(j));
    }
    let mut deaths = Vec::with_capacity(n - 1);
    for _ in 1..n {
        let (next, d) = (0..n)
            .filter(|&j| !in_tree[j])
            .map(|j| (j, best[j]))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .expect("vertices remain");
        in_tree[next] = true;
        deaths.push(d);
        let row = points.row(next);
        for j in 0..n {
            if !in_tree[j] {
                let dj = dist(row, points.row(j));
                if dj < best[j] {
                    best[j] = dj;
                }
            }
        }
    }
    deaths.sort_by(f64::total_cmp);
    let diagram: Vec<(f64, f64)> = deaths.into_iter().map(|d| (0.0, d)).collect();
    let life = total_life(&diagram);
    Ok((diagram, life))
}

/// Filtration key: value first, then a combinatorial index.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Key {
    value: f64,
    index: u64,
}

impl Eq for Key {}

impl Ord for Key {
    fn cmp(&self, o: &Self) -> Ordering {
        self.value.total_cmp(&o.value).then(self.index.cmp(&o.index))
    }
}

impl PartialOrd for Key {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

struct Rips {
    n: usize,
    d: Vec<f64>,
    max_radius: f64,
}

impl Rips {
    #[inline]
    fn dist(&self, a: usize, b: usize) -> f64 {
        self.d[a * self.n + b]
    }

    fn tri_key(&self, a: usize, b: usize, c: usize) -> Key {
        // a < b < c
        let n = self.n as u64;
        Key {
            value: self.dist(a, b).max(self.dist(a, c)).max(self.dist(b, c)),
            index: (a as u64 * n + b as u64) * n + c as u64,
        }
    }

    /// Triangles containing edge (a, b) that enter the filtration, sorted.
    fn coboundary(&self, a: usize, b: usize) -> Vec<Key> {
        let mut out = Vec::new();
        for c in 0..self.n {
            if c == a || c == b {
                continue;
            }
            let mut t = [a, b, c];
            t.sort_unstable();
            let k = self.tri_key(t[0], t[1], t[2]);
            if k.value <= self.max_radius {
                out.push(k);
            }
        }
        out.sort_unstable();
        out
    }
}

/// Symmetric difference of two sorted columns.
fn add_columns(a: &[Key], b: &[Key]) -> Vec<Key> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            Ordering::Less => {
                out.push(a[i]);
                i += 1;
            }
            Ordering::Greater => {
                out.push(b[j]);
                j += 1;
            }
            Ordering::Equal => {
                i += 1;
                j += 1;
            }
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

/// H1 persistence pairs of the Rips filtration truncated at `max_radius`.
/// Classes still alive at `max_radius` are not reported.
pub fn rips_h1(points: &Matrix, max_radius: f64, simplex_budget: usize) -> Result<(Vec<(f64, f64)>, f64)> {
    let n = points.rows();
    if n < 3 {
        return Err(Error::range("points", n, ">= 3"));
    }
    if !(max_radius > 0.0) {
        return Err(Error::range("max_radius", max_radius, "> 0"));
    }
    let rips = Rips {
        n,
        d: pairwise(points),
        max_radius,
    };
    let mut edges: Vec<(Key, usize, usize)> = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let v = rips.dist(a, b);
            if v <= max_radius {
                edges.push((
                    Key {
                        value: v,
                        index: (a * n + b) as u64,
                    },
                    a,
                    b,
                ));
            }
        }
    }
    // budget counts vertices + edges + worst-case triangles over the kept edges
    let n_tri_bound = edges.len().saturating_mul(n.saturating_sub(2)) / 3;
    let count = n + edges.len() + n_tri_bound;
    if count > simplex_budget {
        return Err(Error::SimplexBudget {
            count,
            budget: simplex_budget,
        });
    }
    edges.sort_unstable_by(|a, b| a.0.cmp(&b.0));

    // negative edges (those merging components) never create H1 and are cleared
    let mut uf = UnionFind::new(n);
    let positive: Vec<bool> = edges.iter().map(|&(_, a, b)| !uf.union(a, b)).collect();

    // reduce coboundaries of positive edges in reverse filtration order;
    // the pivot of a column is its earliest triangle
    let mut pivot_owner: std::collections::HashMap<u64, usize> = std::collections::HashMap::new();
    let mut reduced: Vec<Vec<Key>> = vec![Vec::new(); edges.len()];
    let mut pairs = Vec::new();
    for idx in (0..edges.len()).rev() {
        if !positive[idx] {
            continue;
        }
        let (ek, a, b) = edges[idx];
        let mut col = rips.coboundary(a, b);
        while let Some(&p) = col.first() {
            match pivot_owner.get(&p.index) {
                Some(&other) => col = add_columns(&col, &reduced[other]),
                None => break,
            }
        }
        if let Some(&p) = col.first() {
            pivot_owner.insert(p.index, idx);
            pairs.push((ek.value, p.value));
            reduced[idx] = col;
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
    let life = total_life(&pairs);
    Ok((pairs, life))
}

/// Settings for [`ph_summary`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopologyConfig {
    /// Points per class used for H1 (seeded random subsample).
    pub h1_point_budget: usize,
    pub simplex_budget: usize,
    /// H1 radius; `None` means twice the longest MST edge of the H1 sample.
    pub max_radius: Option<f64>,
    /// Optional PCA projection before H1.
    pub h1_projection_dim: Option<usize>,
    pub keep_diagrams: bool,
    pub seed: u64,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        TopologyConfig {
            h1_point_budget: DEFAULT_H1_POINT_BUDGET,
            simplex_budget: DEFAULT_SIMPLEX_BUDGET,
            max_radius: None,
            h1_projection_dim: None,
            keep_diagrams: false,
            seed: 0,
        }
    }
}

/// Both diagrams of a single point cloud.
pub fn point_cloud_summary(points: &Matrix, cfg: &TopologyConfig) -> Result<PhSummary> {
    let (d0, life0) = rips_h0(points)?;
    let mut h1_points = if points.rows() > cfg.h1_point_budget {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut idx = rand::seq::index::sample(&mut rng, points.rows(), cfg.h1_point_budget).into_vec();
        idx.sort_unstable();
        points.select_rows(&idx)
    } else {
        points.clone()
    };
    if let Some(dim) = cfg.h1_projection_dim {
        if dim < h1_points.cols() {
            let tmp = EmbeddingSet::new(h1_points.clone(), vec![0; h1_points.rows()])?;
            h1_points = project_principal(&tmp, dim)?;
        }
    }
    let (d1, life1) = if h1_points.rows() >= 3 {
        let radius = match cfg.max_radius {
            Some(r) => r,
            None => {
                let (mst, _) = rips_h0(&h1_points)?;
                2.0 * mst.last().map_or(0.0, |p| p.1)
            }
        };
        if radius > 0.0 {
            rips_h1(&h1_points, radius, cfg.simplex_budget)?
        } else {
            (Vec::new(), 0.0)
        }
    } else {
        (Vec::new(), 0.0)
    };
    Ok(PhSummary {
        life0,
        life1,
        n_points: points.rows(),
        diagram0: if cfg.keep_diagrams { d0 } else { Vec::new() },
        diagram1: if cfg.keep_diagrams { d1 } else { Vec::new() },
    })
}

/// Centred projection onto the top `dim` principal axes (variances kept).
fn project_principal(set: &EmbeddingSet, dim: usize) -> Result<Matrix> {
    let pcs = principal_axes(set, dim)?;
    Ok(pcs.centred.matmul(&pcs.axes))
}

/// Per-class summaries and their unweighted mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAveragedPh {
    pub life0: f64,
    pub life1: f64,
    pub per_class: Vec<(u32, PhSummary)>,
}

/// Persistence summaries of every class with at least two points.
pub fn ph_summary(set: &EmbeddingSet, cfg: &TopologyConfig) -> Result<ClassAveragedPh> {
    let mut per_class = Vec::new();
    for (c, rows) in set.class_rows() {
        if rows.len() < 2 {
            continue;
        }
        let pts = set.embeddings.select_rows(&rows);
        per_class.push((c, point_cloud_summary(&pts, cfg)?));
    }
    if per_class.is_empty() {
        return Err(Error::NoRetainableClass { needed: 2 });
    }
    let k = per_class.len() as f64;
    Ok(ClassAveragedPh {
        life0: per_class.iter().map(|p| p.1.life0).sum::<f64>() / k,
        life1: per_class.iter().map(|p| p.1.life1).sum::<f64>() / k,
        per_class,
    })
}
