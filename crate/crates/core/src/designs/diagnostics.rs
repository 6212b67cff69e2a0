//! Entropy-type diagnostics on enumerated designs.

use std::collections::HashMap;

use super::{DesignDistribution, SecondOrderMatrix};
use crate::error::{invalid, Result};

/// Largest population for which quadruple inclusion probabilities are
/// tabulated densely (`N^4` entries).
pub const A5_MAX_UNITS: usize = 16;

/// `H(p) = -sum_s p(s) ln p(s)`, with `0 ln 0 = 0`.
pub fn entropy(dist: &DesignDistribution) -> f64 {
    -dist
        .probs()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// `K(p, q) = sum_s p(s) ln(p(s) / q(s))`; infinite when `p` charges a
/// sample that `q` does not.
pub fn kl_divergence(p: &DesignDistribution, q: &DesignDistribution) -> f64 {
    let mut k = 0.0;
    for (s, ps) in p.iter() {
        if ps <= 0.0 {
            continue;
        }
        let qs = q.prob_of(s);
        if qs <= 0.0 {
            return f64::INFINITY;
        }
        k += ps * (ps / qs).ln();
    }
    k.max(0.0)
}

/// Total-variation distance `(1/2) sum_s |p(s) - q(s)|`.
pub fn total_variation(p: &DesignDistribution, q: &DesignDistribution) -> f64 {
    let mut sum = 0.0;
    for (s, ps) in p.iter() {
        sum += (ps - q.prob_of(s)).abs();
    }
    for (s, qs) in q.iter() {
        if p.prob_of(s) == 0.0 {
            sum += qs;
        }
    }
    0.5 * sum
}

/// Total-variation distance between observed sample frequencies and `dist`.
pub fn tv_from_counts(counts: &HashMap<Vec<usize>, u64>, dist: &DesignDistribution) -> f64 {
    let total: u64 = counts.values().sum();
    if total == 0 {
        return 1.0;
    }
    let total = total as f64;
    let mut sum = 0.0;
    for (s, p) in dist.iter() {
        let c = counts.get(s).copied().unwrap_or(0) as f64;
        sum += (c / total - p).abs();
    }
    for (s, &c) in counts {
        if dist.prob_of(s) == 0.0 {
            sum += c as f64 / total;
        }
    }
    0.5 * sum
}

/// `pi_{abcd}` for every 4-subset, tabulated over sorted index tuples.
#[derive(Debug, Clone)]
pub struct QuadrupleInclusion {
    n_units: usize,
    table: Vec<f64>,
}

impl QuadrupleInclusion {
    pub fn get(&self, units: [usize; 4]) -> f64 {
        let mut u = units;
        u.sort_unstable();
        let n = self.n_units;
        self.table[((u[0] * n + u[1]) * n + u[2]) * n + u[3]]
    }
}

pub fn quadruple_inclusion(dist: &DesignDistribution) -> Result<QuadrupleInclusion> {
    let n = dist.n_units();
    if n > A5_MAX_UNITS {
        return invalid(format!(
            "quadruple inclusion probabilities are limited to {A5_MAX_UNITS} units, got {n}"
        ));
    }
    let mut table = vec![0.0; n.pow(4)];
    for (s, p) in dist.iter() {
        let m = s.len();
        for a in 0..m {
            for b in a + 1..m {
                for c in b + 1..m {
                    for d in c + 1..m {
                        table[((s[a] * n + s[b]) * n + s[c]) * n + s[d]] += p;
                    }
                }
            }
        }
    }
    Ok(QuadrupleInclusion { n_units: n, table })
}

/// `max |E[(1_{k1 l1} - pi_k1 pi_l1)(1_{k2 l2} - pi_k2 pi_l2)]|` over all
/// quadruples of distinct units.
pub fn a5_statistic(dist: &DesignDistribution, pikl: &SecondOrderMatrix) -> Result<f64> {
    let n = dist.n_units();
    if n < 4 {
        return invalid(format!("the A5 statistic needs at least 4 units, got {n}"));
    }
    if pikl.n_units() != n {
        return invalid("second-order matrix does not match the design");
    }
    let quad = quadruple_inclusion(dist)?;
    let pi: Vec<f64> = (0..n).map(|k| pikl.get(k, k)).collect();
    let term = |k1: usize, l1: usize, k2: usize, l2: usize| {
        quad.get([k1, l1, k2, l2]) - pi[k1] * pi[l1] * pikl.get(k2, l2)
            - pi[k2] * pi[l2] * pikl.get(k1, l1)
            + pi[k1] * pi[l1] * pi[k2] * pi[l2]
    };
    let mut worst: f64 = 0.0;
    for a in 0..n {
        for b in a + 1..n {
            for c in b + 1..n {
                for d in c + 1..n {
                    worst = worst
                        .max(term(a, b, c, d).abs())
                        .max(term(a, c, b, d).abs())
                        .max(term(a, d, b, c).abs());
                }
            }
        }
    }
    Ok(worst)
}
