//! Ollivier-Ricci curvature of class-graph edges.
//!
//! Each node spreads unit mass over its neighbours in proportion to edge
//! weight; the curvature of an edge compares the transport cost between the
//! two endpoint distributions with the distance between the endpoints.

pub mod transport;

use std::collections::{BinaryHeap, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::ClassGraph;
use crate::matrix::Matrix;
pub use transport::{median_positive_cost, w1_exact, w1_sinkhorn, SinkhornOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Exact,
    Sinkhorn,
}

/// Ground metric between nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroundMetric {
    /// Shortest-path hop count; adjacent nodes are at distance 1.
    Hop,
    /// Shortest path with edge length equal to the embedding distance,
    /// recovered from the kernel weight and the node scales.
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvatureConfig {
    pub solver: Solver,
    /// Entropic regularization; `None` means 0.01 x median positive cost.
    pub sinkhorn_eps: Option<f64>,
    pub max_iters: usize,
    pub tol: f64,
    /// Mass kept on the centre node.
    pub alpha: f64,
    pub metric: GroundMetric,
}

impl Default for CurvatureConfig {
    fn default() -> Self {
        CurvatureConfig {
            solver: Solver::Sinkhorn,
            sinkhorn_eps: None,
            max_iters: 2000,
            tol: 1e-9,
            alpha: 0.0,
            metric: GroundMetric::Hop,
        }
    }
}

impl CurvatureConfig {
    pub fn exact() -> Self {
        CurvatureConfig {
            solver: Solver::Exact,
            ..Default::default()
        }
    }
}

/// Probability mass over a node's neighbourhood.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborDistribution {
    pub support: Vec<usize>,
    pub mass: Vec<f64>,
}

fn distribution_from_adj(adj: &[Vec<(usize, f64)>], u: usize, alpha: f64) -> Result<NeighborDistribution> {
    let nbrs = &adj[u];
    if nbrs.is_empty() {
        return Err(Error::IsolatedNode(u));
    }
    let total: f64 = nbrs.iter().map(|p| p.1).sum();
    let mut support = Vec::with_capacity(nbrs.len() + 1);
    let mut mass = Vec::with_capacity(nbrs.len() + 1);
    if alpha > 0.0 {
        support.push(u);
        mass.push(alpha);
    }
    for &(x, w) in nbrs {
        support.push(x);
        mass.push((1.0 - alpha) * w / total);
    }
    Ok(NeighborDistribution { support, mass })
}

/// `mu_u(x) = w_ux / sum_z w_uz` over the neighbours of `u`.
pub fn neighbor_distribution(g: &ClassGraph, u: usize) -> Result<NeighborDistribution> {
    distribution_from_adj(&g.adjacency(), u, 0.0)
}

/// Curvature of every edge plus the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureSummary {
    pub mean_kappa: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_edge: Vec<(usize, usize, f64)>,
    pub solver: Solver,
    /// Fixed eps if configured, otherwise the median of the per-edge eps values.
    pub sinkhorn_eps: f64,
    pub fallback_count: usize,
    pub n_edges: usize,
}

/// Precomputed graph view shared by all edge computations.
struct CurvatureContext<'a> {
    adj: Vec<Vec<(usize, f64)>>,
    lengths: Option<Vec<Vec<f64>>>,
    cfg: &'a CurvatureConfig,
}

impl<'a> CurvatureContext<'a> {
    fn new(g: &ClassGraph, cfg: &'a CurvatureConfig) -> Result<Self> {
        if !(0.0..1.0).contains(&cfg.alpha) {
            return Err(Error::range("alpha", cfg.alpha, "[0, 1)"));
        }
        let adj = g.adjacency();
        let lengths = match cfg.metric {
            GroundMetric::Hop => None,
            GroundMetric::Euclidean => Some(
                adj.iter()
                    .enumerate()
                    .map(|(a, l)| {
                        l.iter()
                            .map(|&(b, w)| (-w.ln() * g.sigma[a] * g.sigma[b]).max(0.0).sqrt())
                            .collect()
                    })
                    .collect(),
            ),
        };
        Ok(CurvatureContext { adj, lengths, cfg })
    }

    /// Distances from `src` to each target; hop BFS stops after `max_hops`.
    fn distances_from(&self, src: usize, targets: &[usize], max_hops: usize) -> Vec<f64> {
        let n = self.adj.len();
        let mut dist = vec![f64::INFINITY; n];
        dist[src] = 0.0;
        match &self.lengths {
            None => {
                let mut q = VecDeque::from([src]);
                while let Some(x) = q.pop_front() {
                    if dist[x] >= max_hops as f64 {
                        continue;
                    }
                    for &(y, _) in &self.adj[x] {
                        if dist[y] == f64::INFINITY {
                            dist[y] = dist[x] + 1.0;
                            q.push_back(y);
                        }
                    }
                }
            }
            Some(len) => {
                #[derive(PartialEq)]
                struct Item(f64, usize);
                impl Eq for Item {}
                impl PartialOrd for Item {
                    fn partial_cmp(&self, o: &Self) -> Option<std::cmp::Ordering> {
                        Some(self.cmp(o))
                    }
                }
                impl Ord for Item {
                    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
                        o.0.total_cmp(&self.0).then(o.1.cmp(&self.1))
                    }
                }
                let mut heap = BinaryHeap::from([Item(0.0, src)]);
                while let Some(Item(d, x)) = heap.pop() {
                    if d > dist[x] {
                        continue;
                    }
                    for (k, &(y, _)) in self.adj[x].iter().enumerate() {
                        let nd = d + len[x][k];
                        if nd < dist[y] {
                            dist[y] = nd;
                            heap.push(Item(nd, y));
                        }
                    }
                }
            }
        }
        targets.iter().map(|&t| dist[t]).collect()
    }

    fn edge(&self, u: usize, v: usize) -> Result<(f64, bool, f64)> {
        // canonical orientation makes kappa(u,v) == kappa(v,u) bit for bit
        let (u, v) = (u.min(v), u.max(v));
        if !self.adj[u].iter().any(|p| p.0 == v) {
            return Err(Error::range("edge", format!("({u}, {v})"), "an edge of the graph"));
        }
        let mu = distribution_from_adj(&self.adj, u, self.cfg.alpha)?;
        let nu = distribution_from_adj(&self.adj, v, self.cfg.alpha)?;
        let mut cost = Matrix::zeros(mu.support.len(), nu.support.len());
        for (a, &x) in mu.support.iter().enumerate() {
            let d = self.distances_from(x, &nu.support, 3);
            for (b, dv) in d.into_iter().enumerate() {
                cost.set(a, b, dv);
            }
        }
        let d_uv = match &self.lengths {
            None => 1.0,
            Some(_) => self.distances_from(u, &[v], usize::MAX)[0],
        };
        let eps = self
            .cfg
            .sinkhorn_eps
            .unwrap_or_else(|| 0.01 * median_positive_cost(&cost));
        let (w1, fell_back) = match self.cfg.solver {
            Solver::Exact => (w1_exact(&mu.mass, &nu.mass, &cost)?, false),
            Solver::Sinkhorn => {
                let s = w1_sinkhorn(&mu.mass, &nu.mass, &cost, eps, self.cfg.max_iters, self.cfg.tol)?;
                if s.converged {
                    (s.cost, false)
                } else {
                    (w1_exact(&mu.mass, &nu.mass, &cost)?, true)
                }
            }
        };
        Ok((1.0 - w1 / d_uv, fell_back, eps))
    }
}

/// `kappa(u, v) = 1 - W1(mu_u, mu_v) / d(u, v)` for an edge `(u, v)`.
pub fn edge_curvature(g: &ClassGraph, u: usize, v: usize, cfg: &CurvatureConfig) -> Result<f64> {
    CurvatureContext::new(g, cfg)?.edge(u, v).map(|r| r.0)
}

/// Curvature of every edge and their arithmetic mean.
pub fn mean_curvature(g: &ClassGraph, cfg: &CurvatureConfig) -> Result<CurvatureSummary> {
    if g.edges.is_empty() {
        return Err(Error::Degenerate("graph has no edges".into()));
    }
    let ctx = CurvatureContext::new(g, cfg)?;
    let results = g
        .edges
        .par_iter()
        .map(|e| ctx.edge(e.i, e.j).map(|r| (e.i, e.j, r)))
        .collect::<Result<Vec<_>>>()?;
    let per_edge: Vec<(usize, usize, f64)> = results.iter().map(|&(i, j, r)| (i, j, r.0)).collect();
    let fallback_count = results.iter().filter(|r| r.2 .1).count();
    let mean_kappa = per_edge.iter().map(|e| e.2).sum::<f64>() / per_edge.len() as f64;
    let sinkhorn_eps = match cfg.sinkhorn_eps {
        Some(e) => e,
        None => {
            let mut eps: Vec<f64> = results.iter().map(|r| r.2 .2).collect();
            eps.sort_by(f64::total_cmp);
            eps[eps.len() / 2]
        }
    };
    Ok(CurvatureSummary {
        mean_kappa,
        n_edges: per_edge.len(),
        per_edge,
        solver: cfg.solver,
        sinkhorn_eps,
        fallback_count,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn complete(n: usize) -> ClassGraph {
        ClassGraph::from_edges(n, (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j, 1.0))))
    }

    #[test]
    fn distributions() {
        let g = ClassGraph::from_edges(4, [(0, 1, 1.0), (0, 2, 3.0), (2, 3, 2.0)]);
        let d = neighbor_distribution(&g, 0).unwrap();
        assert_eq!(d.support, vec![1, 2]);
        assert_abs_diff_eq!(d.mass[0], 0.25);
        assert_abs_diff_eq!(d.mass[1], 0.75);
        assert_eq!(neighbor_distribution(&g, 1).unwrap().mass, vec![1.0]);
        let eq = neighbor_distribution(&complete(3), 0).unwrap();
        assert_eq!(eq.mass, vec![0.5, 0.5]);
        let iso = ClassGraph::from_edges(3, [(0, 1, 1.0)]);
        assert!(neighbor_distribution(&iso, 2).is_err());
    }

    #[test]
    fn k2_and_path() {
        let cfg = CurvatureConfig::exact();
        let k2 = ClassGraph::from_edges(2, [(0, 1, 1.0)]);
        assert_abs_diff_eq!(edge_curvature(&k2, 0, 1, &cfg).unwrap(), 0.0, epsilon = 1e-12);
        let path = ClassGraph::from_edges(3, [(0, 1, 1.0), (1, 2, 1.0)]);
        let s = mean_curvature(&path, &cfg).unwrap();
        for e in &s.per_edge {
            assert_abs_diff_eq!(e.2, 0.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(s.mean_kappa, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn complete_graphs() {
        for n in 3..=6 {
            let s = mean_curvature(&complete(n), &CurvatureConfig::exact()).unwrap();
            let want = (n as f64 - 2.0) / (n as f64 - 1.0);
            for e in &s.per_edge {
                assert_abs_diff_eq!(e.2, want, epsilon = 1e-9);
            }
            assert_abs_diff_eq!(s.mean_kappa, want, epsilon = 1e-9);
        }
    }

    #[test]
    fn sinkhorn_close_to_exact_on_k5() {
        let s = mean_curvature(&complete(5), &CurvatureConfig::default()).unwrap();
        assert!((s.mean_kappa - 0.75).abs() < 0.02, "{s:?}");
        assert_eq!(s.solver, Solver::Sinkhorn);
    }

    #[test]
    fn fallback_counts_non_converged_edges() {
        let cfg = CurvatureConfig {
            max_iters: 1,
            ..Default::default()
        };
        let g = ClassGraph::from_edges(5, [(0, 1, 1.0), (1, 2, 2.0), (2, 3, 1.0), (1, 3, 0.5), (3, 4, 1.0)]);
        let s = mean_curvature(&g, &cfg).unwrap();
        let exact = mean_curvature(&g, &CurvatureConfig::exact()).unwrap();
        assert!(s.fallback_count > 0);
        for (a, b) in s.per_edge.iter().zip(&exact.per_edge) {
            assert!(a.2.is_finite() && a.2 <= 1.0);
            if s.fallback_count == s.n_edges {
                assert_eq!(a.2, b.2);
            }
        }
    }

    #[test]
    fn symmetric_in_endpoints() {
        let g = ClassGraph::from_edges(5, [(0, 1, 1.0), (1, 2, 2.0), (2, 3, 1.0), (1, 3, 0.5), (3, 4, 1.0)]);
        for cfg in [CurvatureConfig::exact(), CurvatureConfig::default()] {
            for e in &g.edges {
                let a = edge_curvature(&g, e.i, e.j, &cfg).unwrap();
                let b = edge_curvature(&g, e.j, e.i, &cfg).unwrap();
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert!(edge_curvature(&g, 0, 4, &CurvatureConfig::exact()).is_err());
        assert!(mean_curvature(&ClassGraph::from_edges(3, []), &CurvatureConfig::exact()).is_err());
    }

    #[test]
    fn lazy_and_euclidean_options() {
        let lazy = CurvatureConfig {
            alpha: 0.5,
            ..CurvatureConfig::exact()
        };
        // lazy K2: each side keeps 1/2 at home, 1/2 on the other endpoint -> W1 = 0
        let k2 = ClassGraph::from_edges(2, [(0, 1, 1.0)]);
        assert_abs_diff_eq!(edge_curvature(&k2, 0, 1, &lazy).unwrap(), 1.0, epsilon = 1e-12);
        let euc = CurvatureConfig {
            metric: GroundMetric::Euclidean,
            ..CurvatureConfig::exact()
        };
        // with unit edge lengths (w = e^-1, sigma = 1) the Euclidean metric equals hops
        let g = ClassGraph::from_edges(4, (0..4).flat_map(|i| (i + 1..4).map(move |j| (i, j, (-1f64).exp()))));
        assert_abs_diff_eq!(mean_curvature(&g, &euc).unwrap().mean_kappa, 2.0 / 3.0, epsilon = 1e-9);
    }
}
