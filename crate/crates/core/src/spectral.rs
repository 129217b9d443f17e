//! Normalized-Laplacian spectra and the invariants derived from them.
//!
//! All reductions run over the ascending spectrum so results do not depend on
//! the order in which the eigen-solver returns values.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{connected_components, ClassGraph};
use crate::union_find::UnionFind;

pub const DEFAULT_HEAT_TIMES: [f64; 4] = [0.1, 0.3, 1.0, 3.0];

/// Threshold below which an eigenvalue counts as zero:
/// `max(abs, rel * lambda_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZeroTol {
    pub abs: f64,
    pub rel: f64,
}

impl Default for ZeroTol {
    fn default() -> Self {
        ZeroTol {
            abs: 1e-9,
            rel: 1e-8,
        }
    }
}

impl ZeroTol {
    pub fn threshold(&self, eigs: &[f64]) -> f64 {
        let max = eigs.iter().copied().fold(0.0, f64::max);
        self.abs.max(self.rel * max)
    }

    pub fn count_zero(&self, eigs: &[f64]) -> usize {
        let th = self.threshold(eigs);
        eigs.iter().filter(|&&l| l <= th).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatTrace {
    pub t: f64,
    pub value: f64,
}

/// Spectral invariants of one class graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralSummary {
    pub tau: f64,
    pub lambda2: f64,
    pub entropy: f64,
    pub heat_traces: Vec<HeatTrace>,
    pub n_nodes: usize,
    pub n_components: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub eigenvalues: Vec<f64>,
}

/// `I - D^{-1/2} W D^{-1/2}` as a dense matrix.
pub fn normalized_laplacian(g: &ClassGraph) -> Result<DMatrix<f64>> {
    let n = g.n_nodes();
    let deg = g.degrees();
    if let Some(i) = deg.iter().position(|&d| d <= 0.0) {
        return Err(Error::IsolatedNode(i));
    }
    let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut l = DMatrix::<f64>::identity(n, n);
    for e in &g.edges {
        let v = -e.w * inv_sqrt[e.i] * inv_sqrt[e.j];
        l[(e.i, e.j)] = v;
        l[(e.j, e.i)] = v;
    }
    Ok(l)
}

/// Full spectrum of a symmetric matrix, ascending.
pub fn eigenvalues(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    if !m.is_square() {
        return Err(Error::ShapeMismatch(format!(
            "matrix is {}x{}, not square",
            m.nrows(),
            m.ncols()
        )));
    }
    let n = m.nrows();
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            asym = asym.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if asym > 1e-9 {
        return Err(Error::Eigen(format!("matrix not symmetric (max |a_ij - a_ji| = {asym:e})")));
    }
    let eig = SymmetricEigen::try_new(m.clone(), f64::EPSILON, 0).ok_or_else(|| {
        Error::Eigen(format!(
            "symmetric QR did not converge (n = {n}, max |a_ij| = {:e})",
            m.amax()
        ))
    })?;
    let mut v: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Reduced log-determinant: sum of `ln λ` over eigenvalues above the zero
/// threshold. The number of excluded eigenvalues must equal `n_components`.
pub fn torsion(eigs: &[f64], tol: ZeroTol, n_components: usize) -> Result<f64> {
    let th = tol.threshold(eigs);
    let excluded = eigs.iter().filter(|&&l| l <= th).count();
    if excluded == eigs.len() {
        return Err(Error::Degenerate("all eigenvalues are numerically zero".into()));
    }
    if excluded != n_components {
        return Err(Error::ZeroCountMismatch {
            excluded,
            components: n_components,
        });
    }
    Ok(eigs.iter().filter(|&&l| l > th).map(|l| l.ln()).sum())
}

/// Algebraic connectivity; 0 when more than one eigenvalue is numerically zero.
pub fn lambda2(eigs: &[f64], tol: ZeroTol) -> f64 {
    if eigs.len() < 2 {
        return 0.0;
    }
    let th = tol.threshold(eigs);
    if eigs.iter().filter(|&&l| l <= th).count() >= 2 {
        return 0.0;
    }
    eigs.iter().copied().find(|&l| l > th).unwrap_or(0.0)
}

/// Shannon entropy of the spectrum normalized to unit sum (`0 ln 0 = 0`).
pub fn spectral_entropy(eigs: &[f64]) -> Result<f64> {
    let total: f64 = eigs.iter().map(|l| l.max(0.0)).sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("spectrum sums to zero".into()));
    }
    Ok(-eigs
        .iter()
        .map(|l| l.max(0.0) / total)
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>())
}

/// `Tr exp(-t L) = Σ exp(-t λ)`. Negative eigenvalues are roundoff of a
/// positive semidefinite spectrum and count as zero, which keeps the trace
/// non-increasing in `t`.
pub fn heat_trace(eigs: &[f64], t: f64) -> f64 {
    eigs.iter().map(|l| (-t * l.max(0.0)).exp()).sum()
}

/// Computes every spectral invariant of a graph without isolated nodes.
pub fn spectral_summary(
    g: &ClassGraph,
    tol: ZeroTol,
    heat_times: &[f64],
    keep_eigenvalues: bool,
) -> Result<SpectralSummary> {
    let l = normalized_laplacian(g)?;
    let eigs = eigenvalues(&l)?;
    let comps = connected_components(g).count;
    let tau = torsion(&eigs, tol, comps)?;
    Ok(SpectralSummary {
        tau,
        lambda2: lambda2(&eigs, tol),
        entropy: spectral_entropy(&eigs)?,
        heat_traces: heat_times
            .iter()
            .map(|&t| HeatTrace {
                t,
                value: heat_trace(&eigs, t),
            })
            .collect(),
        n_nodes: g.n_nodes(),
        n_components: comps,
        eigenvalues: if keep_eigenvalues { eigs } else { Vec::new() },
    })
}

/// Counts spanning trees of a small connected simple graph by enumerating
/// every `(n-1)`-edge subset.
pub fn spanning_tree_oracle(n: usize, edges: &[(usize, usize)]) -> Result<u64> {
    if n > 10 {
        return Err(Error::range("n", n, "<= 10"));
    }
    let mut uf = UnionFind::new(n);
    for &(a, b) in edges {
        uf.union(a, b);
    }
    if n == 0 || uf.n_sets() != 1 {
        return Err(Error::Degenerate("graph is not connected".into()));
    }
    let m = edges.len();
    let r = n - 1;
    let mut count = 0u64;
    let mut pick: Vec<usize> = (0..r).collect();
    loop {
        let mut uf = UnionFind::new(n);
        if pick.iter().all(|&e| uf.union(edges[e].0, edges[e].1)) {
            count += 1;
        }
        // next combination in lexicographic order
        let Some(i) = (0..r).rev().find(|&i| pick[i] < i + m - r) else {
            return Ok(count);
        };
        pick[i] += 1;
        for j in i + 1..r {
            pick[j] = pick[j - 1] + 1;
        }
    }
}
