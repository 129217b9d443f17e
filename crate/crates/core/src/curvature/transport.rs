//! Wasserstein-1 between small discrete distributions: an exact min-cost-flow
//! solver and a log-domain Sinkhorn solver.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

const FLOW_EPS: f64 = 1e-14;

fn check_masses(name: &'static str, m: &[f64]) -> Result<()> {
    if m.is_empty() {
        return Err(Error::range(name, "[]", "non-empty distribution"));
    }
    if m.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::range(name, format!("{m:?}"), "non-negative masses"));
    }
    let s: f64 = m.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::range(name, s, "masses summing to 1"));
    }
    Ok(())
}

fn check_cost(mu: &[f64], nu: &[f64], cost: &Matrix) -> Result<()> {
    check_masses("mu", mu)?;
    check_masses("nu", nu)?;
    if cost.rows() != mu.len() || cost.cols() != nu.len() {
        return Err(Error::ShapeMismatch(format!(
            "cost is {}x{}, distributions have {} and {} atoms",
            cost.rows(),
            cost.cols(),
            mu.len(),
            nu.len()
        )));
    }
    if cost.as_slice().iter().any(|&c| c < 0.0 || c.is_nan()) {
        return Err(Error::range("cost", "negative or NaN entry", ">= 0"));
    }
    Ok(())
}

struct Arc {
    to: usize,
    cap: f64,
    cost: f64,
    rev: usize,
}

struct FlowNet {
    arcs: Vec<Vec<Arc>>,
}

impl FlowNet {
    fn new(n: usize) -> Self {
        FlowNet {
            arcs: (0..n).map(|_| Vec::new()).collect(),
        }
    }

    fn add(&mut self, a: usize, b: usize, cap: f64, cost: f64) -> (usize, usize) {
        let ia = self.arcs[a].len();
        let ib = self.arcs[b].len();
        self.arcs[a].push(Arc {
            to: b,
            cap,
            cost,
            rev: ib,
        });
        self.arcs[b].push(Arc {
            to: a,
            cap: 0.0,
            cost: -cost,
            rev: ia,
        });
        (a, ia)
    }

    /// Bellman-Ford shortest path over arcs with residual capacity.
    fn shortest_path(&self, s: usize, t: usize) -> Option<Vec<(usize, usize)>> {
        let n = self.arcs.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut prev: Vec<Option<(usize, usize)>> = vec![None; n];
        dist[s] = 0.0;
        for _ in 0..n {
            let mut changed = false;
            for u in 0..n {
                if dist[u] == f64::INFINITY {
                    continue;
                }
                for (k, a) in self.arcs[u].iter().enumerate() {
                    if a.cap > FLOW_EPS && dist[u] + a.cost < dist[a.to] - 1e-12 {
                        dist[a.to] = dist[u] + a.cost;
                        prev[a.to] = Some((u, k));
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        if dist[t] == f64::INFINITY {
            return None;
        }
        let mut path = Vec::new();
        let mut v = t;
        while v != s {
            let (u, k) = prev[v]?;
            path.push((u, k));
            v = u;
        }
        path.reverse();
        Some(path)
    }
}

/// Exact W1 by successive shortest augmenting paths on the transportation
/// network. `cost[i][j]` may be infinite to forbid a route.
pub fn w1_exact(mu: &[f64], nu: &[f64], cost: &Matrix) -> Result<f64> {
    check_cost(mu, nu, cost)?;
    let (m, n) = (mu.len(), nu.len());
    let s = 0;
    let t = m + n + 1;
    let mut net = FlowNet::new(m + n + 2);
    for (i, &a) in mu.iter().enumerate() {
        net.add(s, 1 + i, a, 0.0);
    }
    for (j, &b) in nu.iter().enumerate() {
        net.add(1 + m + j, t, b, 0.0);
    }
    let mut routes = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            let c = cost.get(i, j);
            if c.is_finite() {
                routes.push((i, j, net.add(1 + i, 1 + m + j, f64::INFINITY, c)));
            }
        }
    }
    let mut remaining: f64 = mu.iter().sum::<f64>().min(nu.iter().sum());
    let mut guard = 0;
    while remaining > 1e-12 {
        guard += 1;
        if guard > 16 * (m + n + 2) * (m + n + 2) {
            return Err(Error::Infeasible("augmentation did not terminate".into()));
        }
        let Some(path) = net.shortest_path(s, t) else {
            return Err(Error::Infeasible(format!(
                "{remaining:e} mass cannot be routed (disconnected supports)"
            )));
        };
        let push = path
            .iter()
            .map(|&(u, k)| net.arcs[u][k].cap)
            .fold(f64::INFINITY, f64::min);
        for &(u, k) in &path {
            let (to, rev) = (net.arcs[u][k].to, net.arcs[u][k].rev);
            net.arcs[u][k].cap -= push;
            net.arcs[to][rev].cap += push;
        }
        remaining -= push;
    }
    let mut total = 0.0;
    for &(i, j, (u, k)) in &routes {
        let a = &net.arcs[u][k];
        let flow = net.arcs[a.to][a.rev].cap;
        if flow > 0.0 {
            total += flow * cost.get(i, j);
        }
    }
    Ok(total.max(0.0))
}

/// Sweeps per warm-start stage.
const WARM_ITERS: usize = 20;
const MAX_WARM_STAGES: usize = 30;
/// Marginal error is evaluated every this many sweeps.
const CHECK_EVERY: usize = 10;
/// Scalings outside `[1/ABSORB, ABSORB]` are folded into the log potentials.
const ABSORB: f64 = 1e30;

/// Result of a Sinkhorn solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornOutcome {
    /// `<P, C>` for the final coupling, without the entropy term.
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// L1 violation of the row marginal after the last column update.
    pub marginal_error: f64,
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Sinkhorn state on the positive-mass part of the problem.
///
/// The plan is `P_ij = u_i K_ij v_j` with `K_ij = exp((f_i + g_j - c_ij) / eps)`.
/// Log potentials `f`, `g` carry the large dynamic range; `u`, `v` stay near 1
/// and are absorbed into `f`, `g` whenever they leave `[1/ABSORB, ABSORB]`.
struct Sinkhorn<'a> {
    a: &'a [f64],
    b: &'a [f64],
    c: &'a [f64],
    m: usize,
    n: usize,
    eps: f64,
    f: Vec<f64>,
    g: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    kernel: Vec<f64>,
}

impl Sinkhorn<'_> {
    fn set_eps(&mut self, eps: f64) {
        self.absorb();
        self.eps = eps;
        self.rebuild();
    }

    fn absorb(&mut self) {
        for (f, u) in self.f.iter_mut().zip(&mut self.u) {
            *f += self.eps * u.ln();
            *u = 1.0;
        }
        for (g, v) in self.g.iter_mut().zip(&mut self.v) {
            *g += self.eps * v.ln();
            *v = 1.0;
        }
    }

    fn rebuild(&mut self) {
        let n = self.n;
        for i in 0..self.m {
            for j in 0..n {
                self.kernel[i * n + j] = ((self.f[i] + self.g[j] - self.c[i * n + j]) / self.eps).exp();
            }
        }
    }

    /// One exact log-domain sweep; used when the scaled kernel under- or overflows.
    fn log_sweep(&mut self) {
        self.absorb();
        let (m, n, eps) = (self.m, self.n, self.eps);
        for i in 0..m {
            let lse = logsumexp((0..n).map(|j| (self.g[j] - self.c[i * n + j]) / eps));
            self.f[i] = eps * (self.a[i].ln() - lse);
        }
        for j in 0..n {
            let lse = logsumexp((0..m).map(|i| (self.f[i] - self.c[i * n + j]) / eps));
            self.g[j] = eps * (self.b[j].ln() - lse);
        }
        self.rebuild();
    }

    fn sweep(&mut self) {
        let (m, n) = (self.m, self.n);
        let (u_prev, v_prev) = (self.u.clone(), self.v.clone());
        let mut ok = true;
        for i in 0..m {
            let row = &self.kernel[i * n..(i + 1) * n];
            let s: f64 = row.iter().zip(&self.v).map(|(k, v)| k * v).sum();
            self.u[i] = self.a[i] / s;
            ok &= self.u[i].is_finite() && self.u[i] > 0.0;
        }
        if ok {
            for j in 0..n {
                let s: f64 = (0..m).map(|i| self.kernel[i * n + j] * self.u[i]).sum();
                self.v[j] = self.b[j] / s;
                ok &= self.v[j].is_finite() && self.v[j] > 0.0;
            }
        }
        if !ok {
            self.u = u_prev;
            self.v = v_prev;
            self.log_sweep();
            return;
        }
        let out_of_range = |x: &f64| !(1.0 / ABSORB..=ABSORB).contains(x);
        if self.u.iter().any(out_of_range) || self.v.iter().any(out_of_range) {
            self.absorb();
            self.rebuild();
        }
    }

    fn plan(&self, i: usize, j: usize) -> f64 {
        self.u[i] * self.kernel[i * self.n + j] * self.v[j]
    }

    fn row_error(&self) -> f64 {
        (0..self.m)
            .map(|i| ((0..self.n).map(|j| self.plan(i, j)).sum::<f64>() - self.a[i]).abs())
            .sum()
    }
}

/// Entropic W1 via log-stabilized Sinkhorn iterations, warm-started along a
/// halving eps schedule. `iterations` counts sweeps over all stages.
pub fn w1_sinkhorn(
    mu: &[f64],
    nu: &[f64],
    cost: &Matrix,
    eps: f64,
    max_iters: usize,
    tol: f64,
) -> Result<SinkhornOutcome> {
    check_cost(mu, nu, cost)?;
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::range("eps", eps, "> 0"));
    }
    // zero-mass atoms carry no plan mass; solve on the positive part
    let rows: Vec<usize> = (0..mu.len()).filter(|&i| mu[i] > 0.0).collect();
    let cols: Vec<usize> = (0..nu.len()).filter(|&j| nu[j] > 0.0).collect();
    let (m, n) = (rows.len(), cols.len());
    let c: Vec<f64> = rows
        .iter()
        .flat_map(|&i| cols.iter().map(move |&j| cost.get(i, j)))
        .collect();
    let a: Vec<f64> = rows.iter().map(|&i| mu[i]).collect();
    let b: Vec<f64> = cols.iter().map(|&j| nu[j]).collect();

    let c_max = c.iter().copied().filter(|x| x.is_finite()).fold(0.0, f64::max);
    let n_stages = if c_max > eps {
        ((c_max / eps).log2().ceil() as usize).min(MAX_WARM_STAGES)
    } else {
        0
    };
    let mut state = Sinkhorn {
        a: &a,
        b: &b,
        c: &c,
        m,
        n,
        eps: eps * f64::powi(2.0, n_stages as i32),
        f: vec![0.0; m],
        g: vec![0.0; n],
        u: vec![1.0; m],
        v: vec![1.0; n],
        kernel: vec![0.0; m * n],
    };
    state.rebuild();

    let mut iterations = 0;
    for stage in (1..=n_stages).rev() {
        state.set_eps(eps * f64::powi(2.0, stage as i32));
        for _ in 0..WARM_ITERS.min(max_iters.saturating_sub(iterations)) {
            state.sweep();
            iterations += 1;
        }
    }
    state.set_eps(eps);

    let mut err = f64::INFINITY;
    let mut since_check = 0;
    while iterations < max_iters {
        state.sweep();
        iterations += 1;
        since_check += 1;
        if since_check == CHECK_EVERY || iterations == max_iters {
            since_check = 0;
            err = state.row_error();
            if err <= tol {
                break;
            }
        }
    }
    if err.is_infinite() {
        err = state.row_error();
    }
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..n {
            let cij = c[i * n + j];
            if cij.is_finite() {
                total += state.plan(i, j) * cij;
            }
        }
    }
    Ok(SinkhornOutcome {
        cost: total,
        iterations,
        converged: err <= tol,
        marginal_error: err,
    })
}

/// Median of the strictly positive finite entries (1 when there are none).
pub fn median_positive_cost(cost: &Matrix) -> f64 {
    let mut v: Vec<f64> = cost
        .as_slice()
        .iter()
        .copied()
        .filter(|&c| c > 0.0 && c.is_finite())
        .collect();
    if v.is_empty() {
        return 1.0;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Vertex enumeration of the transportation polytope: every basic
    /// solution uses at most m+n-1 cells; solve each candidate basis and keep
    /// the cheapest feasible one. Only usable for tiny supports.
    pub(crate) fn w1_vertex_oracle(mu: &[f64], nu: &[f64], cost: &Matrix) -> f64 {
        let (m, n) = (mu.len(), nu.len());
        let cells: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
        let r = m + n - 1;
        let mut best = f64::INFINITY;
        let total = cells.len();
        let mut pick: Vec<usize> = (0..r).collect();
        loop {
            // equations: row sums (m), column sums (n-1 independent)
            let mut a = nalgebra::DMatrix::<f64>::zeros(r, r);
            let mut b = nalgebra::DVector::<f64>::zeros(r);
            for i in 0..m {
                b[i] = mu[i];
            }
            for j in 0..n - 1 {
                b[m + j] = nu[j];
            }
            for (col, &ci) in pick.iter().enumerate() {
                let (i, j) = cells[ci];
                a[(i, col)] = 1.0;
                if j < n - 1 {
                    a[(m + j, col)] = 1.0;
                }
            }
            if let Some(x) = a.lu().solve(&b) {
                if x.iter().all(|&v| v >= -1e-12) {
                    let c: f64 = pick
                        .iter()
                        .zip(x.iter())
                        .map(|(&ci, &v)| v * cost.get(cells[ci].0, cells[ci].1))
                        .sum();
                    best = best.min(c);
                }
            }
            let Some(i) = (0..r).rev().find(|&i| pick[i] < i + total - r) else {
                return best;
            };
            pick[i] += 1;
            for j in i + 1..r {
                pick[j] = pick[j - 1] + 1;
            }
        }
    }

    #[test]
    fn identical_distributions() {
        let c = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
        assert_abs_diff_eq!(w1_exact(&[0.3, 0.7], &[0.3, 0.7], &c).unwrap(), 0.0, epsilon = 1e-15);
        let s = w1_sinkhorn(&[0.3, 0.7], &[0.3, 0.7], &c, 0.01, 2000, 1e-9).unwrap();
        assert!(s.converged);
        assert!(s.cost <= 1e-6, "{}", s.cost);
    }

    #[test]
    fn point_masses_two_hops() {
        let c = Matrix::from_rows(&[[2.0]]);
        assert_abs_diff_eq!(w1_exact(&[1.0], &[1.0], &c).unwrap(), 2.0);
    }

    #[test]
    fn k3_edge_distributions() {
        // edge (0,1) of K3: mu_0 on {1,2}, mu_1 on {0,2}; hop costs
        let c = Matrix::from_rows(&[[1.0, 1.0], [1.0, 0.0]]);
        let (mu, nu) = ([0.5, 0.5], [0.5, 0.5]);
        let oracle = w1_vertex_oracle(&mu, &nu, &c);
        assert_abs_diff_eq!(oracle, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(w1_exact(&mu, &nu, &c).unwrap(), oracle, epsilon = 1e-12);
        let s = w1_sinkhorn(&mu, &nu, &c, 0.01, 2000, 1e-9).unwrap();
        assert!((s.cost - 0.5).abs() <= 0.02, "{s:?}");
    }

    #[test]
    fn sinkhorn_flags_non_convergence() {
        let c = Matrix::from_rows(&[[0.0, 1.0, 2.0], [1.0, 0.0, 1.0]]);
        let s = w1_sinkhorn(&[0.9, 0.1], &[0.2, 0.3, 0.5], &c, 0.01, 1, 1e-9).unwrap();
        assert!(!s.converged);
        assert_eq!(s.iterations, 1);
    }

    #[test]
    fn infeasible_routes() {
        let c = Matrix::from_rows(&[[f64::INFINITY, 1.0], [f64::INFINITY, 1.0]]);
        assert!(matches!(w1_exact(&[0.5, 0.5], &[0.5, 0.5], &c), Err(Error::Infeasible(_))));
    }

    #[test]
    fn rejects_bad_masses() {
        let c = Matrix::from_rows(&[[1.0]]);
        assert!(w1_exact(&[0.5], &[1.0], &c).is_err());
        assert!(w1_sinkhorn(&[1.0], &[1.0], &c, 0.0, 10, 1e-9).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn dist(n: usize) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(0.05f64..1.0, n).prop_map(|v| {
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect()
            })
        }

        proptest! {
            #[test]
            fn exact_matches_vertex_oracle(
                (mu, nu, c) in (1usize..4, 1usize..4).prop_flat_map(|(m, n)| {
                    (dist(m), dist(n), prop::collection::vec(0u8..4, m * n))
                })
            ) {
                let cost = Matrix::new(mu.len(), nu.len(), c.into_iter().map(f64::from).collect()).unwrap();
                let exact = w1_exact(&mu, &nu, &cost).unwrap();
                let oracle = w1_vertex_oracle(&mu, &nu, &cost);
                prop_assert!((exact - oracle).abs() <= 1e-10, "{exact} vs {oracle}");
            }
        }
    }
}
