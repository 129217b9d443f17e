//! Class-conditional mutual k-NN graphs with self-tuning Gaussian weights.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::EmbeddingSet;
use crate::matrix::{sq_dist, Matrix};
use crate::union_find::UnionFind;

pub const DEFAULT_K: usize = 10;

/// Undirected weighted edge between local node indices, `i < j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub w: f64,
}

/// Mutual k-NN graph of one class.
///
/// Edges refer to positions in `node_ids`; `node_ids[p]` is the row of the
/// source embedding set. `sigma[p]` is the distance from node `p` to its
/// k-th nearest neighbour.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGraph {
    pub class_id: u32,
    pub node_ids: Vec<usize>,
    pub edges: Vec<Edge>,
    pub sigma: Vec<f64>,
    pub k: usize,
}

/// Neighbour lists: `(neighbour index, distance)` sorted by distance, then index.
pub type KnnLists = Vec<Vec<(usize, f64)>>;

/// Brute-force exact k nearest neighbours of every row, excluding itself.
pub fn exact_knn(points: &Matrix, k: usize) -> Result<KnnLists> {
    let m = points.rows();
    if k >= m {
        return Err(Error::range("k", k, format!("< number of points ({m})")));
    }
    Ok((0..m)
        .into_par_iter()
        .map(|i| {
            let pi = points.row(i);
            let mut cand: Vec<(f64, usize)> = (0..m)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(pi, points.row(j)), j))
                .collect();
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < cand.len() {
                cand.select_nth_unstable_by(k - 1, cmp);
                cand.truncate(k);
            }
            cand.sort_unstable_by(cmp);
            cand.into_iter().map(|(d2, j)| (j, d2.sqrt())).collect()
        })
        .collect())
}

/// Builds the mutual k-NN graph of `points`; `sigma_k` (default `k`) picks
/// which neighbour sets the per-node kernel scale.
pub fn build_class_graph_with(
    points: &Matrix,
    class_id: u32,
    k: usize,
    sigma_k: Option<usize>,
) -> Result<ClassGraph> {
    let m = points.rows();
    if k == 0 {
        return Err(Error::range("k", k, ">= 1"));
    }
    let sk = sigma_k.unwrap_or(k);
    if sk == 0 {
        return Err(Error::range("sigma_k", sk, ">= 1"));
    }
    if m <= k.max(sk) {
        return Err(Error::range(
            "points",
            m,
            format!("> k ({})", k.max(sk)),
        ));
    }
    let knn = exact_knn(points, k.max(sk))?;
    let sigma: Vec<f64> = knn.iter().map(|l| l[sk - 1].1).collect();
    if let Some(node) = sigma.iter().position(|&s| s <= 0.0) {
        return Err(Error::ZeroScale { node });
    }
    let in_knn = |a: usize, b: usize| knn[a][..k].iter().any(|&(j, _)| j == b);
    let mut edges = Vec::new();
    for (i, list) in knn.iter().enumerate() {
        for &(j, _) in &list[..k] {
            if j > i && in_knn(j, i) {
                let d2 = sq_dist(points.row(i), points.row(j));
                edges.push(Edge {
                    i,
                    j,
                    w: (-d2 / (sigma[i] * sigma[j])).exp(),
                });
            }
        }
    }
    edges.sort_by_key(|e| (e.i, e.j));
    Ok(ClassGraph {
        class_id,
        node_ids: (0..m).collect(),
        edges,
        sigma,
        k,
    })
}

pub fn build_class_graph(points: &Matrix, class_id: u32, k: usize) -> Result<ClassGraph> {
    build_class_graph_with(points, class_id, k, None)
}

/// A class left out of graph construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedClass {
    pub class_id: u32,
    pub n_samples: usize,
    pub reason: String,
}

/// One graph per class with at least `k + 1` samples.
pub fn split_by_class(set: &EmbeddingSet, k: usize) -> Result<(Vec<ClassGraph>, Vec<SkippedClass>)> {
    split_by_class_with(set, k, None)
}

pub fn split_by_class_with(
    set: &EmbeddingSet,
    k: usize,
    sigma_k: Option<usize>,
) -> Result<(Vec<ClassGraph>, Vec<SkippedClass>)> {
    let need = k.max(sigma_k.unwrap_or(k)) + 1;
    let classes: Vec<(u32, Vec<usize>)> = set.class_rows().into_iter().collect();
    let mut skipped = Vec::new();
    let mut eligible = Vec::new();
    for (c, rows) in classes {
        if rows.len() < need {
            warn!("class {c}: {} samples < k+1 = {need}, skipped", rows.len());
            skipped.push(SkippedClass {
                class_id: c,
                n_samples: rows.len(),
                reason: format!("fewer than {need} samples"),
            });
        } else {
            eligible.push((c, rows));
        }
    }
    if eligible.is_empty() {
        return Err(Error::NoRetainableClass { needed: need });
    }
    let graphs = eligible
        .par_iter()
        .map(|(c, rows)| {
            let pts = set.embeddings.select_rows(rows);
            build_class_graph_with(&pts, *c, k, sigma_k).map(|mut g| {
                g.node_ids = rows.clone();
                g
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((graphs, skipped))
}

/// Component labelling of a graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Components {
    pub labels: Vec<usize>,
    pub count: usize,
}

pub fn connected_components(g: &ClassGraph) -> Components {
    let mut uf = UnionFind::new(g.n_nodes());
    for e in &g.edges {
        uf.union(e.i, e.j);
    }
    Components {
        count: uf.n_sets(),
        labels: uf.labels(),
    }
}

impl ClassGraph {
    /// Graph over `n` nodes with the given edges; `sigma` is set to 1.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Self {
        let mut es: Vec<Edge> = edges
            .into_iter()
            .map(|(a, b, w)| {
                assert!(a != b && a < n && b < n, "bad edge ({a}, {b})");
                Edge {
                    i: a.min(b),
                    j: a.max(b),
                    w,
                }
            })
            .collect();
        es.sort_by_key(|e| (e.i, e.j));
        es.dedup_by(|a, b| (a.i, a.j) == (b.i, b.j));
        ClassGraph {
            class_id: 0,
            node_ids: (0..n).collect(),
            edges: es,
            sigma: vec![1.0; n],
            k: 0,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Weighted adjacency lists, neighbours ascending.
    pub fn adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.n_nodes()];
        for e in &self.edges {
            adj[e.i].push((e.j, e.w));
            adj[e.j].push((e.i, e.w));
        }
        for l in &mut adj {
            l.sort_by_key(|&(v, _)| v);
        }
        adj
    }

    /// Weighted degrees.
    pub fn degrees(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n_nodes()];
        for e in &self.edges {
            d[e.i] += e.w;
            d[e.j] += e.w;
        }
        d
    }

    /// Local indices of nodes without edges.
    pub fn isolated(&self) -> Vec<usize> {
        let mut touched = vec![false; self.n_nodes()];
        for e in &self.edges {
            touched[e.i] = true;
            touched[e.j] = true;
        }
        (0..self.n_nodes()).filter(|&i| !touched[i]).collect()
    }

    /// Copy with isolated nodes removed and indices compacted; also returns
    /// how many nodes were dropped.
    pub fn without_isolated(&self) -> (ClassGraph, usize) {
        let iso = self.isolated();
        if iso.is_empty() {
            return (self.clone(), 0);
        }
        let mut remap = vec![usize::MAX; self.n_nodes()];
        let mut node_ids = Vec::new();
        let mut sigma = Vec::new();
        let mut next = 0;
        let mut iso_iter = iso.iter().peekable();
        for p in 0..self.n_nodes() {
            if iso_iter.peek() == Some(&&p) {
                iso_iter.next();
                continue;
            }
            remap[p] = next;
            next += 1;
            node_ids.push(self.node_ids[p]);
            sigma.push(self.sigma[p]);
        }
        let edges = self
            .edges
            .iter()
            .map(|e| Edge {
                i: remap[e.i],
                j: remap[e.j],
                w: e.w,
            })
            .collect();
        (
            ClassGraph {
                class_id: self.class_id,
                node_ids,
                edges,
                sigma,
                k: self.k,
            },
            iso.len(),
        )
    }

    /// Copy with every edge weight set to 1.
    pub fn unweighted(&self) -> ClassGraph {
        let mut g = self.clone();
        g.edges.iter_mut().for_each(|e| e.w = 1.0);
        g
    }

    /// Node degrees ignoring weights.
    pub fn degree_counts(&self) -> Vec<usize> {
        let mut d = vec![0; self.n_nodes()];
        for e in &self.edges {
            d[e.i] += 1;
            d[e.j] += 1;
        }
        d
    }

    pub fn to_dump(&self) -> GraphDump {
        GraphDump {
            class_id: self.class_id,
            k: self.k,
            nodes: self.node_ids.clone(),
            edges: self.edges.iter().map(|e| (e.i, e.j, e.w)).collect(),
            sigma: self.sigma.clone(),
        }
    }
}

/// JSON-friendly graph dump: `{class_id, k, nodes, edges: [[i, j, w], ...], sigma}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDump {
    pub class_id: u32,
    #[serde(default)]
    pub k: usize,
    pub nodes: Vec<usize>,
    pub edges: Vec<(usize, usize, f64)>,
    pub sigma: Vec<f64>,
}

impl From<GraphDump> for ClassGraph {
    fn from(d: GraphDump) -> Self {
        let mut g = ClassGraph::from_edges(d.nodes.len(), d.edges);
        g.class_id = d.class_id;
        g.node_ids = d.nodes;
        g.sigma = d.sigma;
        g.k = d.k;
        g
    }
}
