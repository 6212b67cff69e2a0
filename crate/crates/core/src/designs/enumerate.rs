use std::collections::HashMap;

use itertools::Itertools;
use nalgebra::DMatrix;

use super::{InclusionProfile, PairSource, SecondOrderMatrix};
use crate::error::{invalid, Error, Result};
use crate::util::log_sum_exp;

pub const DEFAULT_MAX_SUPPORT: u128 = 1_000_000;

/// A design whose full distribution over samples can be written down.
#[derive(Debug, Clone, PartialEq)]
pub enum EnumerableDesign {
    /// Conditional Poisson with working probabilities `p` (`p = 1` forced).
    Rejective { p: Vec<f64> },
    /// Sampford with target probabilities `pi` (`pi = 1` forced).
    Sampford { pi: Vec<f64> },
    Srswor,
    /// Systematic pi-ps sampling in the given unit order; a low-entropy
    /// fixed-size design with first-order probabilities `pi`.
    Systematic { pi: Vec<f64> },
}

/// Exact distribution `p(s)` over size-`n` samples of `{0..N-1}`.
#[derive(Debug, Clone)]
pub struct DesignDistribution {
    n_units: usize,
    n: usize,
    support: Vec<Vec<usize>>,
    probs: Vec<f64>,
    index: HashMap<Vec<usize>, usize>,
}

impl DesignDistribution {
    pub fn new(n_units: usize, n: usize, support: Vec<Vec<usize>>, probs: Vec<f64>) -> Result<Self> {
        if support.len() != probs.len() {
            return invalid("support and probabilities differ in length");
        }
        if probs.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
            return invalid("design probabilities must be finite and nonnegative");
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return invalid(format!("design probabilities sum to {total}"));
        }
        let mut index = HashMap::with_capacity(support.len());
        for (i, s) in support.iter().enumerate() {
            if s.len() != n || s.windows(2).any(|w| w[0] >= w[1]) || s.iter().any(|&k| k >= n_units) {
                return invalid(format!("malformed sample {s:?}"));
            }
            if index.insert(s.clone(), i).is_some() {
                return invalid(format!("sample {s:?} listed twice"));
            }
        }
        Ok(Self {
            n_units,
            n,
            support,
            probs,
            index,
        })
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn support(&self) -> &[Vec<usize>] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Probability of a sorted sample; zero if outside the support.
    pub fn prob_of(&self, sample: &[usize]) -> f64 {
        self.index.get(sample).map_or(0.0, |&i| self.probs[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[usize], f64)> {
        self.support
            .iter()
            .map(Vec::as_slice)
            .zip(self.probs.iter().copied())
    }

    /// `pi_k = sum_{s contains k} p(s)`.
    pub fn first_order(&self) -> Vec<f64> {
        let mut pi = vec![0.0; self.n_units];
        for (s, p) in self.iter() {
            for &k in s {
                pi[k] += p;
            }
        }
        pi
    }

    /// `E_p[f(s)]`.
    pub fn expectation<F: FnMut(&[usize]) -> f64>(&self, mut f: F) -> f64 {
        self.iter().map(|(s, p)| p * f(s)).sum()
    }
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u128::MAX;
        }
    }
    acc
}

fn partition_forced(values: &[f64]) -> (Vec<usize>, Vec<usize>) {
    (0..values.len()).partition(|&k| values[k] >= 1.0)
}

fn check_support(free: usize, m: usize, limit: u128) -> Result<()> {
    let size = binomial(free, m);
    if size > limit {
        return Err(Error::SupportTooLarge { size, limit });
    }
    Ok(())
}

fn normalized(log_weights: Vec<f64>) -> Vec<f64> {
    let total = log_sum_exp(log_weights.iter().copied());
    let mut probs: Vec<f64> = log_weights.iter().map(|w| (w - total).exp()).collect();
    let s: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= s;
    }
    probs
}

/// Samples made of all forced units plus every size-`m` subset of `free`,
/// with a log-weight per sample.
fn enumerate_weighted<F>(
    n_units: usize,
    n: usize,
    forced: &[usize],
    free: &[usize],
    limit: u128,
    mut log_weight: F,
) -> Result<DesignDistribution>
where
    F: FnMut(&[usize]) -> f64,
{
    if forced.len() > n {
        return invalid(format!("{} forced units exceed sample size {n}", forced.len()));
    }
    let m = n - forced.len();
    if m > free.len() {
        return invalid(format!("sample size {n} exceeds population size {n_units}"));
    }
    check_support(free.len(), m, limit)?;
    let mut support = Vec::new();
    let mut weights = Vec::new();
    for combo in free.iter().copied().combinations(m) {
        weights.push(log_weight(&combo));
        let mut s = combo;
        s.extend_from_slice(forced);
        s.sort_unstable();
        support.push(s);
    }
    DesignDistribution::new(n_units, n, support, normalized(weights))
}

fn check_probabilities(values: &[f64], what: &str) -> Result<()> {
    if let Some(k) = values.iter().position(|v| !(*v > 0.0 && *v <= 1.0)) {
        return invalid(format!("{what} of unit {k} must be in (0, 1], got {}", values[k]));
    }
    Ok(())
}

/// Exact distribution of `design` over samples of size `n` from `n_units`.
pub fn enumerate_design(
    design: &EnumerableDesign,
    n_units: usize,
    n: usize,
    max_support: u128,
) -> Result<DesignDistribution> {
    match design {
        EnumerableDesign::Srswor => {
            if n > n_units {
                return invalid(format!("sample size {n} exceeds population size {n_units}"));
            }
            let all: Vec<usize> = (0..n_units).collect();
            enumerate_weighted(n_units, n, &[], &all, max_support, |_| 0.0)
        }
        EnumerableDesign::Rejective { p } => {
            if p.len() != n_units {
                return invalid("working probabilities do not match the population size");
            }
            check_probabilities(p, "working probability")?;
            let (forced, free) = partition_forced(p);
            let logw: Vec<f64> = p.iter().map(|v| (v / (1.0 - v)).ln()).collect();
            enumerate_weighted(n_units, n, &forced, &free, max_support, |s| {
                s.iter().map(|&k| logw[k]).sum()
            })
        }
        EnumerableDesign::Sampford { pi } => {
            if pi.len() != n_units {
                return invalid("inclusion probabilities do not match the population size");
            }
            check_probabilities(pi, "inclusion probability")?;
            let (forced, free) = partition_forced(pi);
            // p(s) is proportional to sum_{k in s} (1 - pi_k) * prod_{k in s} pi_k / (1 - pi_k).
            let log_odds: Vec<f64> = pi.iter().map(|v| (v / (1.0 - v)).ln()).collect();
            enumerate_weighted(n_units, n, &forced, &free, max_support, |s| {
                let slack: f64 = s.iter().map(|&k| 1.0 - pi[k]).sum();
                slack.ln() + s.iter().map(|&k| log_odds[k]).sum::<f64>()
            })
        }
        EnumerableDesign::Systematic { pi } => enumerate_systematic(pi, n),
    }
}

fn enumerate_systematic(pi: &[f64], n: usize) -> Result<DesignDistribution> {
    check_probabilities(pi, "inclusion probability")?;
    let n_units = pi.len();
    let mut cum = Vec::with_capacity(n_units + 1);
    cum.push(0.0);
    for p in pi {
        cum.push(cum.last().unwrap() + p);
    }
    let total = cum[n_units];
    if (total - n as f64).abs() > 1e-9 {
        return invalid(format!("inclusion probabilities sum to {total}, expected {n}"));
    }
    for c in &mut cum {
        *c *= n as f64 / total;
    }
    cum[n_units] = n as f64;

    let mut cuts: Vec<f64> = cum.iter().map(|c| c - c.floor()).collect();
    cuts.push(0.0);
    cuts.push(1.0);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-14);

    let mut acc: HashMap<Vec<usize>, f64> = HashMap::new();
    for w in cuts.windows(2) {
        let width = w[1] - w[0];
        if width < 1e-14 {
            continue;
        }
        let u = 0.5 * (w[0] + w[1]);
        let sample: Vec<usize> = (0..n_units)
            .filter(|&k| (cum[k + 1] - u).floor() > (cum[k] - u).floor())
            .collect();
        if sample.len() != n {
            return Err(Error::Numeric(format!(
                "systematic enumeration produced a sample of size {}",
                sample.len()
            )));
        }
        *acc.entry(sample).or_insert(0.0) += width;
    }
    let mut entries: Vec<(Vec<usize>, f64)> = acc.into_iter().collect();
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    let total: f64 = entries.iter().map(|e| e.1).sum();
    let (support, probs) = entries.into_iter().map(|(s, p)| (s, p / total)).unzip();
    DesignDistribution::new(n_units, n, support, probs)
}

/// `pi_kl = sum_{s contains k, l} p(s)`.
pub fn second_order_exact(dist: &DesignDistribution) -> SecondOrderMatrix {
    let big_n = dist.n_units();
    let mut m = DMatrix::<f64>::zeros(big_n, big_n);
    for (s, p) in dist.iter() {
        for &k in s {
            for &l in s {
                m[(k, l)] += p;
            }
        }
    }
    SecondOrderMatrix::new(m, PairSource::ExactEnumeration)
}

/// Hájek's approximation
/// `pi_kl = pi_k pi_l (1 - (1 - pi_k)(1 - pi_l) / d(pi))` off the diagonal.
pub fn second_order_hajek(profile: &InclusionProfile) -> Result<SecondOrderMatrix> {
    let d = profile.d_pi();
    if d <= 0.0 {
        return invalid("d(pi) is zero; the Hajek approximation is undefined");
    }
    let pi = profile.pi();
    let big_n = pi.len();
    let m = DMatrix::from_fn(big_n, big_n, |k, l| {
        if k == l {
            pi[k]
        } else {
            pi[k] * pi[l] * (1.0 - (1.0 - pi[k]) * (1.0 - pi[l]) / d)
        }
    });
    Ok(SecondOrderMatrix::new(m, PairSource::HajekApprox))
}
