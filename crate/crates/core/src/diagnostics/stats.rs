//! Z-scores and rank correlations.

use log::warn;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

/// Sample counts up to this size get exact permutation p-values.
pub const EXACT_PERMUTATION_MAX_N: usize = 9;

/// Spread below which `zscore` reports a degenerate column.
pub const DEGENERATE_STD: f64 = 1e-12;

/// `(x - mean) / std` with the population standard deviation.
///
/// Returns the scores and whether the spread was degenerate, in which case
/// all scores are 0.
pub fn zscore(values: &[f64]) -> Result<(Vec<f64>, bool)> {
    if values.len() < 2 {
        return Err(Error::range("values", values.len(), ">= 2 values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < DEGENERATE_STD {
        warn!("z-score of a column with no spread; all scores set to 0");
        return Ok((vec![0.0; values.len()], true));
    }
    Ok((values.iter().map(|v| (v - mean) / std).collect(), false))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Spearman,
    Kendall,
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "spearman" => Ok(Method::Spearman),
            "kendall" => Ok(Method::Kendall),
            other => Err(format!("unknown correlation method '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub metric_name: String,
    pub target_name: String,
    pub rho: f64,
    pub p_value: f64,
    pub n: usize,
    pub method: Method,
}

/// 1-based ranks with ties replaced by their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "correlation inputs have lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 3 {
        return Err(Error::range("n", x.len(), ">= 3 paired observations"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite value in correlation input".into()));
    }
    Ok(())
}

/// Heap's algorithm over all permutations of `v`, calling `f` on each.
fn for_each_permutation(v: &mut [f64], f: &mut impl FnMut(&[f64])) {
    let n = v.len();
    let mut c = vec![0usize; n];
    f(v);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                v.swap(0, i);
            } else {
                v.swap(c[i], i);
            }
            f(v);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

/// Two-sided exact permutation p-value of a statistic.
fn permutation_p(x: &[f64], y: &[f64], observed: f64, stat: impl Fn(&[f64], &[f64]) -> f64) -> f64 {
    let mut perm = y.to_vec();
    let (mut hits, mut total) = (0u64, 0u64);
    let thresh = observed.abs() - 1e-12;
    for_each_permutation(&mut perm, &mut |p| {
        total += 1;
        if stat(x, p).abs() >= thresh {
            hits += 1;
        }
    });
    hits as f64 / total as f64
}

/// Spearman rank correlation with average ranks for ties.
///
/// p-value: exact permutation test for n <= 9, otherwise the Student-t
/// approximation with n - 2 degrees of freedom.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<CorrelationReport> {
    check_pair(x, y)?;
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let rho = pearson(&rx, &ry).ok_or_else(|| Error::Degenerate("zero rank variance".into()))?;
    let n = x.len();
    let p = if n <= EXACT_PERMUTATION_MAX_N {
        permutation_p(&rx, &ry, rho, |a, b| pearson(a, b).unwrap_or(0.0))
    } else if rho.abs() >= 1.0 {
        0.0
    } else {
        let df = (n - 2) as f64;
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Ok(CorrelationReport {
        metric_name: String::new(),
        target_name: String::new(),
        rho,
        p_value: p.clamp(f64::MIN_POSITIVE, 1.0),
        n,
        method: Method::Spearman,
    })
}

fn tau_b(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    let (mut conc, mut disc, mut tie_x, mut tie_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i].total_cmp(&x[j]) as i64;
            let dy = y[i].total_cmp(&y[j]) as i64;
            if dx == 0 {
                tie_x += 1;
            }
            if dy == 0 {
                tie_y += 1;
            }
            match dx * dy {
                1 => conc += 1,
                -1 => disc += 1,
                _ => {}
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    let denom = (((n0 - tie_x) * (n0 - tie_y)) as f64).sqrt();
    if denom == 0.0 {
        return None;
    }
    Some(((conc - disc) as f64 / denom).clamp(-1.0, 1.0))
}

/// Kendall tau-b. p-value: exact permutation test for n <= 9, otherwise
/// the normal approximation.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<CorrelationReport> {
    check_pair(x, y)?;
    let tau = tau_b(x, y).ok_or_else(|| Error::Degenerate("zero rank variance".into()))?;
    let n = x.len();
    let p = if n <= EXACT_PERMUTATION_MAX_N {
        permutation_p(x, y, tau, |a, b| tau_b(a, b).unwrap_or(0.0))
    } else {
        let nf = n as f64;
        let z = 3.0 * tau * (nf * (nf - 1.0)).sqrt() / (2.0 * (2.0 * nf + 5.0)).sqrt();
        let dist = Normal::new(0.0, 1.0).expect("unit normal");
        2.0 * (1.0 - dist.cdf(z.abs()))
    };
    Ok(CorrelationReport {
        metric_name: String::new(),
        target_name: String::new(),
        rho: tau,
        p_value: p.clamp(f64::MIN_POSITIVE, 1.0),
        n,
        method: Method::Kendall,
    })
}

pub fn correlate(method: Method, x: &[f64], y: &[f64]) -> Result<CorrelationReport> {
    match method {
        Method::Spearman => spearman(x, y),
        Method::Kendall => kendall_tau(x, y),
    }
}
