//! Conditional Poisson (rejective) design: inclusion probabilities from
//! working probabilities, and the inverse calibration.
//!
//! With odds `w_k = p_k / (1 - p_k)` the design puts mass proportional to
//! `prod_{k in s} w_k` on every size-`m` sample, so
//!
//! ```text
//! pi_k  = w_k e_{m-1}(w without k) / e_m(w)
//! pi_kl = w_k w_l e_{m-2}(w without k, l) / e_m(w)
//! ```
//!
//! where `e_j` is the elementary symmetric polynomial of degree `j`. All
//! polynomials are held as logarithms and built by prefix and suffix passes
//! that only ever add nonnegative terms, so nothing cancels.

use nalgebra::DMatrix;

use super::{InclusionProfile, PairSource, SecondOrderMatrix};
use crate::error::{invalid, Error, Result};
use crate::util::log_add;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 200;
const POLISH_STEPS: usize = 8;

/// Poisson working probabilities whose rejective design has the target
/// first-order inclusion probabilities. Forced units carry `p = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkingProbs {
    pub p: Vec<f64>,
    pub n: usize,
    /// Final sup-norm gap between achieved and target inclusion probabilities.
    pub gap: f64,
    pub iterations: usize,
}

/// `(rows + 1) x (order + 1)` table; row `i` holds `ln e_j` of `logw[..i]`.
fn prefix_table(logw: &[f64], order: usize) -> Vec<f64> {
    let width = order + 1;
    let mut table = vec![f64::NEG_INFINITY; (logw.len() + 1) * width];
    table[0] = 0.0;
    for (i, &lw) in logw.iter().enumerate() {
        let (done, rest) = table.split_at_mut((i + 1) * width);
        add_unit(&done[i * width..], lw, &mut rest[..width]);
    }
    table
}

/// Row `i` holds `ln e_j` of `logw[i..]`.
fn suffix_table(logw: &[f64], order: usize) -> Vec<f64> {
    let width = order + 1;
    let n = logw.len();
    let mut table = vec![f64::NEG_INFINITY; (n + 1) * width];
    table[n * width] = 0.0;
    for i in (0..n).rev() {
        let (head, tail) = table.split_at_mut((i + 1) * width);
        add_unit(&tail[..width], logw[i], &mut head[i * width..]);
    }
    table
}

/// `out_j = ln(e^{row_j} + w e^{row_{j-1}})`.
#[inline]
fn add_unit(row: &[f64], lw: f64, out: &mut [f64]) {
    out[0] = row[0];
    for j in 1..out.len() {
        out[j] = log_add(row[j], lw + row[j - 1]);
    }
}

/// `ln sum_a e^{left_a + right_{target-a}}`.
#[inline]
fn log_convolve_at(left: &[f64], right: &[f64], target: usize) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for a in 0..=target {
        max = max.max(left[a] + right[target - a]);
    }
    if max == f64::NEG_INFINITY {
        return max;
    }
    let s: f64 = (0..=target)
        .map(|a| (left[a] + right[target - a] - max).exp())
        .sum();
    max + s.ln()
}

/// Inclusion probabilities of the size-`m` conditional Poisson design with
/// log-odds `logw`.
pub(crate) fn cp_inclusion_logodds(logw: &[f64], m: usize) -> Vec<f64> {
    let n = logw.len();
    if m == 0 {
        return vec![0.0; n];
    }
    if m == n {
        return vec![1.0; n];
    }
    let width = m + 1;
    let prefix = prefix_table(logw, m);
    let suffix = suffix_table(logw, m);
    let log_total = prefix[n * width + m];
    (0..n)
        .map(|k| {
            let left = &prefix[k * width..(k + 1) * width];
            let right = &suffix[(k + 1) * width..(k + 2) * width];
            let v = logw[k] + log_convolve_at(left, right, m - 1) - log_total;
            v.exp().min(1.0)
        })
        .collect()
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-300, 1.0 - 1e-16);
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sup_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Shifts all log-odds by a common constant so that the working
/// probabilities sum to `m`. The rejective design is unchanged.
fn normalize_logodds(logw: &mut [f64], m: usize) {
    let target = m as f64;
    let mut shift = 0.0;
    for _ in 0..200 {
        let (mut f, mut df) = (-target, 0.0);
        for &lw in logw.iter() {
            let p = sigmoid(lw + shift);
            f += p;
            df += p * (1.0 - p);
        }
        if f.abs() <= 1e-14 * target || df <= 0.0 {
            break;
        }
        shift -= (f / df).clamp(-5.0, 5.0);
    }
    for lw in logw.iter_mut() {
        *lw += shift;
    }
}

/// Calibrates working probabilities for target `pi` (all strictly inside
/// `(0, 1)`, summing to `n`).
///
/// The update is a damped fixed-point step on the log-odds,
/// `ln w_k += theta (logit pi_k - logit pi_k(w))`, with `theta` halved
/// whenever a step fails to shrink the sup-norm gap.
pub fn calibrate_conditional_poisson(
    pi: &[f64],
    n: usize,
    tol: f64,
    max_iter: usize,
) -> Result<WorkingProbs> {
    if let Some(k) = pi.iter().position(|&v| !(v > 0.0 && v < 1.0)) {
        return invalid(format!(
            "calibration needs every pi in (0, 1); unit {k} has {}",
            pi[k]
        ));
    }
    let total: f64 = pi.iter().sum();
    if (total - n as f64).abs() > 1e-9 {
        return invalid(format!("inclusion probabilities sum to {total}, expected {n}"));
    }
    if n == 0 || n >= pi.len() {
        return invalid(format!("sample size {n} must lie in 1..{}", pi.len()));
    }
    let target_logit: Vec<f64> = pi.iter().map(|&v| logit(v)).collect();
    let mut logw = target_logit.clone();
    let mut current = cp_inclusion_logodds(&logw, n);
    let mut gap = sup_gap(&current, pi);
    let mut theta = 1.0;
    let mut iterations = 0;
    while gap >= tol {
        if iterations >= max_iter {
            return Err(Error::NonConvergence { iterations, gap });
        }
        iterations += 1;
        let proposal: Vec<f64> = logw
            .iter()
            .zip(&target_logit)
            .zip(&current)
            .map(|((lw, t), c)| lw + theta * (t - logit(*c)))
            .collect();
        let achieved = cp_inclusion_logodds(&proposal, n);
        let new_gap = sup_gap(&achieved, pi);
        if new_gap < gap {
            logw = proposal;
            current = achieved;
            gap = new_gap;
            theta = (2.0 * theta).min(1.0);
        } else {
            theta *= 0.5;
            if theta < 1e-8 {
                return Err(Error::NonConvergence { iterations, gap });
            }
        }
    }
    // Polish past the tolerance while full steps still help, so that exact
    // enumerations built on `p` match `pi` to rounding level.
    for _ in 0..POLISH_STEPS {
        let proposal: Vec<f64> = logw
            .iter()
            .zip(&target_logit)
            .zip(&current)
            .map(|((lw, t), c)| lw + (t - logit(*c)))
            .collect();
        let achieved = cp_inclusion_logodds(&proposal, n);
        let new_gap = sup_gap(&achieved, pi);
        if new_gap >= gap {
            break;
        }
        logw = proposal;
        current = achieved;
        gap = new_gap;
    }
    normalize_logodds(&mut logw, n);
    Ok(WorkingProbs {
        p: logw.iter().map(|&lw| sigmoid(lw)).collect(),
        n,
        gap,
        iterations,
    })
}

/// Calibrates the stochastic part of `profile`; capped units get `p = 1`.
pub fn calibrate_cp_working_probs(
    profile: &InclusionProfile,
    tol: f64,
    max_iter: usize,
) -> Result<WorkingProbs> {
    let units = profile.stochastic_units();
    let m = profile.stochastic_size();
    let mut p = vec![1.0; profile.n_units()];
    if m == 0 {
        for &k in &units {
            p[k] = 0.0;
        }
        return Ok(WorkingProbs {
            p,
            n: profile.n(),
            gap: 0.0,
            iterations: 0,
        });
    }
    let sub: Vec<f64> = units.iter().map(|&k| profile.pi()[k]).collect();
    let w = calibrate_conditional_poisson(&sub, m, tol, max_iter)?;
    for (&k, &pk) in units.iter().zip(&w.p) {
        p[k] = pk;
    }
    Ok(WorkingProbs {
        p,
        n: profile.n(),
        gap: w.gap,
        iterations: w.iterations,
    })
}

fn split_forced(p: &[f64], n: usize) -> Result<(Vec<usize>, Vec<usize>, usize)> {
    if let Some(k) = p.iter().position(|&v| !(v > 0.0 && v <= 1.0)) {
        return invalid(format!("working probability of unit {k} must be in (0, 1], got {}", p[k]));
    }
    let (forced, free): (Vec<usize>, Vec<usize>) = (0..p.len()).partition(|&k| p[k] >= 1.0);
    if forced.len() > n || n - forced.len() > free.len() {
        return invalid(format!(
            "sample size {n} incompatible with {} forced and {} free units",
            forced.len(),
            free.len()
        ));
    }
    let m = n - forced.len();
    Ok((forced, free, m))
}

/// First-order inclusion probabilities of the rejective design with working
/// probabilities `p` and size `n`. Units with `p = 1` are always included.
pub fn conditional_poisson_inclusion(p: &[f64], n: usize) -> Result<Vec<f64>> {
    let (forced, free, m) = split_forced(p, n)?;
    let mut pi = vec![0.0; p.len()];
    for &k in &forced {
        pi[k] = 1.0;
    }
    let logw: Vec<f64> = free.iter().map(|&k| logit(p[k])).collect();
    for (&k, v) in free.iter().zip(cp_inclusion_logodds(&logw, m)) {
        pi[k] = v;
    }
    Ok(pi)
}

/// Exact second-order inclusion probabilities of the rejective design,
/// without enumerating samples. Cost is `O(N^2 n)`.
pub fn second_order_cp(p: &[f64], n: usize) -> Result<SecondOrderMatrix> {
    let (forced, free, m) = split_forced(p, n)?;
    let big_n = p.len();
    let pi = conditional_poisson_inclusion(p, n)?;
    let mut out = DMatrix::<f64>::zeros(big_n, big_n);
    for k in 0..big_n {
        out[(k, k)] = pi[k];
    }
    for &k in &forced {
        for l in 0..big_n {
            if l != k {
                out[(k, l)] = pi[l];
                out[(l, k)] = pi[l];
            }
        }
    }
    if m >= 2 {
        let logw: Vec<f64> = free.iter().map(|&k| logit(p[k])).collect();
        let f = free.len();
        let width = m + 1;
        let prefix = prefix_table(&logw, m);
        let suffix = suffix_table(&logw, m);
        let log_total = prefix[f * width + m];
        let mut running = vec![f64::NEG_INFINITY; width];
        let mut scratch = vec![f64::NEG_INFINITY; width];
        for a in 0..f {
            running.copy_from_slice(&prefix[a * width..(a + 1) * width]);
            for b in a + 1..f {
                let right = &suffix[(b + 1) * width..(b + 2) * width];
                let v = logw[a] + logw[b] + log_convolve_at(&running, right, m - 2) - log_total;
                let (ka, kb) = (free[a], free[b]);
                out[(ka, kb)] = v.exp();
                out[(kb, ka)] = v.exp();
                add_unit(&running, logw[b], &mut scratch);
                std::mem::swap(&mut running, &mut scratch);
            }
        }
    }
    Ok(SecondOrderMatrix::new(out, PairSource::CpRecursion))
}
