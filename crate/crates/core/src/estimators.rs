//! Horvitz-Thompson mean curves and covariance surfaces on the time grid.
//!
//! Every surface stores the covariance of the mean estimator itself (`gamma`,
//! not `n * gamma`). The band module applies the factor `n`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::designs::{InclusionProfile, SampleDraw, SecondOrderMatrix};
use crate::error::{invalid, Result};
use crate::population::{CurvePopulation, TimeGrid};

/// Linear interpolation of a discretized trajectory at `t`.
pub fn interpolate_curve(values: &[f64], grid: &TimeGrid, t: f64) -> Result<f64> {
    let pts = grid.points();
    if values.len() != pts.len() {
        return invalid(format!(
            "curve has {} values on a grid of {} points",
            values.len(),
            pts.len()
        ));
    }
    if !(t >= 0.0 && t <= grid.horizon()) {
        return invalid(format!("t = {t} outside [0, {}]", grid.horizon()));
    }
    // First index with pts[i] > t; t lies in [pts[i-1], pts[i]).
    let i = pts.partition_point(|&p| p <= t);
    if i == pts.len() {
        return Ok(values[pts.len() - 1]);
    }
    let (t0, t1) = (pts[i - 1], pts[i]);
    if t == t0 {
        return Ok(values[i - 1]);
    }
    Ok(values[i - 1] + (values[i] - values[i - 1]) / (t1 - t0) * (t - t0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanCurveEstimate {
    pub grid: TimeGrid,
    pub values: Vec<f64>,
    pub n: usize,
    /// `sum_{k in s} (1 - pi_k)`, the HT estimate of `d(pi)`.
    pub d_hat: f64,
}

fn check_sample(sample: &SampleDraw, profile: &InclusionProfile, pop: &CurvePopulation) -> Result<()> {
    let big_n = pop.n_units();
    if profile.n_units() != big_n || sample.n_units() != big_n {
        return invalid(format!(
            "population has {big_n} units but the profile has {} and the sample {}",
            profile.n_units(),
            sample.n_units()
        ));
    }
    if let Some(&k) = sample.indices().iter().find(|&&k| profile.pi()[k] <= 0.0) {
        return invalid(format!("sampled unit {k} has zero inclusion probability"));
    }
    Ok(())
}

/// Sampled rows evaluated on the grid, through the interpolant when
/// `discretized` (which reproduces the node values exactly).
fn sampled_rows(sample: &SampleDraw, pop: &CurvePopulation, discretized: bool) -> Result<Vec<Vec<f64>>> {
    let grid = pop.grid();
    sample
        .indices()
        .iter()
        .map(|&k| {
            let row = pop.row(k);
            if discretized {
                grid.points()
                    .iter()
                    .map(|&t| interpolate_curve(row, grid, t))
                    .collect()
            } else {
                Ok(row.to_vec())
            }
        })
        .collect()
}

/// `mu_hat(t_j) = (1/N) sum_{k in s} Y_k(t_j) / pi_k`.
pub fn ht_mean_curve(
    sample: &SampleDraw,
    profile: &InclusionProfile,
    pop: &CurvePopulation,
) -> Result<MeanCurveEstimate> {
    check_sample(sample, profile, pop)?;
    let d = pop.n_points();
    let pi = profile.pi();
    let mut values = vec![0.0; d];
    for &k in sample.indices() {
        for (v, y) in values.iter_mut().zip(pop.row(k)) {
            *v += y / pi[k];
        }
    }
    let big_n = pop.n_units() as f64;
    for v in &mut values {
        *v /= big_n;
    }
    let d_hat = sample.indices().iter().map(|&k| 1.0 - pi[k]).sum();
    Ok(MeanCurveEstimate {
        grid: pop.grid().clone(),
        values,
        n: sample.n(),
        d_hat,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceKind {
    YatesGrundyExact,
    HajekPopulation,
    HajekEstimate,
    HajekEstimateStar,
    Empirical,
}

/// A symmetric `D x D` covariance surface on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceSurface {
    pub grid: TimeGrid,
    pub matrix: DMatrix<f64>,
    pub kind: SurfaceKind,
}

impl CovarianceSurface {
    pub fn diagonal(&self) -> Vec<f64> {
        self.matrix.diagonal().iter().copied().collect()
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn max_asymmetry(&self) -> f64 {
        let m = &self.matrix;
        let mut worst: f64 = 0.0;
        for i in 0..m.nrows() {
            for j in 0..i {
                worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
            }
        }
        worst
    }
}

/// `sum_k a_k (u_k - ubar)(u_k - ubar)^T` with `ubar` the `a`-weighted mean.
///
/// The mean is formed from differences to the first row, so rows that are
/// identical give an exactly zero result. Weights must be nonnegative; the
/// diagonal is then a sum of nonnegative terms.
pub(crate) fn weighted_scatter(weights: &[f64], rows: &[Vec<f64>], d: usize) -> DMatrix<f64> {
    let mut out = DMatrix::<f64>::zeros(d, d);
    let total: f64 = weights.iter().sum();
    if rows.is_empty() || total <= 0.0 {
        return out;
    }
    let anchor = &rows[0];
    let mut center = anchor.clone();
    for j in 0..d {
        let shift: f64 = weights
            .iter()
            .zip(rows)
            .map(|(a, u)| a * (u[j] - anchor[j]))
            .sum();
        center[j] += shift / total;
    }
    let mut dev = vec![0.0; d];
    for (a, u) in weights.iter().zip(rows) {
        if *a == 0.0 {
            continue;
        }
        for j in 0..d {
            dev[j] = u[j] - center[j];
        }
        for i in 0..d {
            let ai = a * dev[i];
            if ai == 0.0 {
                continue;
            }
            for j in i..d {
                out[(i, j)] += ai * dev[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            out[(i, j)] = out[(j, i)];
        }
    }
    out
}

/// Yates-Grundy covariance of the HT mean from exact second-order
/// probabilities:
/// `-(1/2N^2) sum_{k != l} Delta_kl (Y_k(r)/pi_k - Y_l(r)/pi_l)(Y_k(t)/pi_k - Y_l(t)/pi_l)`.
pub fn yates_grundy_surface(
    pikl: &SecondOrderMatrix,
    profile: &InclusionProfile,
    pop: &CurvePopulation,
) -> Result<CovarianceSurface> {
    if !pikl.source().is_exact() {
        return invalid("the Yates-Grundy surface needs exact second-order probabilities");
    }
    let big_n = pop.n_units();
    if pikl.n_units() != big_n || profile.n_units() != big_n {
        return invalid("second-order matrix, profile and population sizes differ");
    }
    let d = pop.n_points();
    let pi = profile.pi();
    let expanded: Vec<Vec<f64>> = (0..big_n)
        .map(|k| pop.row(k).iter().map(|y| y / pi[k]).collect())
        .collect();
    let mut m = DMatrix::<f64>::zeros(d, d);
    let mut diff = vec![0.0; d];
    for k in 0..big_n {
        for l in k + 1..big_n {
            let delta = pikl.get(k, l) - pi[k] * pi[l];
            if delta == 0.0 {
                continue;
            }
            for j in 0..d {
                diff[j] = expanded[k][j] - expanded[l][j];
            }
            // Each unordered pair appears twice in the double sum.
            for i in 0..d {
                let w = -delta * diff[i];
                for j in i..d {
                    m[(i, j)] += w * diff[j];
                }
            }
        }
    }
    let scale = 1.0 / (big_n as f64 * big_n as f64);
    for i in 0..d {
        for j in i..d {
            m[(i, j)] *= scale;
            m[(j, i)] = m[(i, j)];
        }
    }
    Ok(CovarianceSurface {
        grid: pop.grid().clone(),
        matrix: m,
        kind: SurfaceKind::YatesGrundyExact,
    })
}

/// Hájek's approximation to the covariance of the HT mean, computed on the
/// whole population:
/// `(1/N^2)[sum_k (1-pi_k) Y_k(t) Y_k(r) / pi_k - (1/d) (sum_k (1-pi_k) Y_k(t)) (sum_l (1-pi_l) Y_l(r))]`.
pub fn hajek_population_surface(profile: &InclusionProfile, pop: &CurvePopulation) -> Result<CovarianceSurface> {
    let big_n = pop.n_units();
    if profile.n_units() != big_n {
        return invalid("profile and population sizes differ");
    }
    if profile.d_pi() <= 0.0 {
        return invalid("d(pi) is zero");
    }
    let pi = profile.pi();
    // Written as a weighted scatter of Y_k / pi_k with weights pi_k (1 - pi_k).
    let weights: Vec<f64> = pi.iter().map(|p| p * (1.0 - p)).collect();
    let rows: Vec<Vec<f64>> = (0..big_n)
        .map(|k| pop.row(k).iter().map(|y| y / pi[k]).collect())
        .collect();
    let mut m = weighted_scatter(&weights, &rows, pop.n_points());
    m /= big_n as f64 * big_n as f64;
    Ok(CovarianceSurface {
        grid: pop.grid().clone(),
        matrix: m,
        kind: SurfaceKind::HajekPopulation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct HajekOptions {
    /// Evaluate through the linear interpolant of each sampled curve.
    pub discretized: bool,
    /// Rescale by `d(pi) / d_hat(pi)`.
    pub star: bool,
    /// Multiply by `n / (n - 1)`.
    pub berger_correction: bool,
}

/// Sample-based Hájek covariance estimate:
/// `(1/N^2)(d_hat/d)[sum_{k in s} (1-pi_k) Y_k(t) Y_k(r) / pi_k^2 - (1/d_hat) (sum_{k in s} (1-pi_k) Y_k(t)/pi_k)(sum_{l in s} (1-pi_l) Y_l(r)/pi_l)]`,
/// optionally multiplied by `d / d_hat`.
pub fn hajek_estimate_surface(
    sample: &SampleDraw,
    profile: &InclusionProfile,
    pop: &CurvePopulation,
    options: HajekOptions,
) -> Result<CovarianceSurface> {
    check_sample(sample, profile, pop)?;
    let d_pi = profile.d_pi();
    if d_pi <= 0.0 {
        return invalid("d(pi) is zero");
    }
    let pi = profile.pi();
    let d_hat: f64 = sample.indices().iter().map(|&k| 1.0 - pi[k]).sum();
    if options.star && d_hat <= 0.0 {
        return invalid("d_hat(pi) is zero: every sampled unit has pi = 1");
    }
    let rows: Vec<Vec<f64>> = sampled_rows(sample, pop, options.discretized)?
        .into_iter()
        .zip(sample.indices())
        .map(|(row, &k)| row.into_iter().map(|y| y / pi[k]).collect())
        .collect();
    let weights: Vec<f64> = sample.indices().iter().map(|&k| 1.0 - pi[k]).collect();
    let mut m = weighted_scatter(&weights, &rows, pop.n_points());
    let big_n = pop.n_units() as f64;
    let mut scale = 1.0 / (big_n * big_n);
    if !options.star {
        scale *= d_hat / d_pi;
    }
    if options.berger_correction {
        let n = sample.n() as f64;
        if sample.n() < 2 {
            return invalid("the n/(n-1) correction needs at least 2 sampled units");
        }
        scale *= n / (n - 1.0);
    }
    m *= scale;
    Ok(CovarianceSurface {
        grid: pop.grid().clone(),
        matrix: m,
        kind: if options.star {
            SurfaceKind::HajekEstimateStar
        } else {
            SurfaceKind::HajekEstimate
        },
    })
}

/// `m_k = max_j |Y_k(t_j)| / pi_k`, with units ranked by decreasing `m_k`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InfluenceReport {
    /// Scored unit indices, aligned with `m`.
    pub units: Vec<usize>,
    pub m: Vec<f64>,
    /// Unit indices sorted by descending `m_k` (ties by index).
    pub top_ids: Vec<usize>,
}

impl InfluenceReport {
    pub fn top(&self, count: usize) -> &[usize] {
        &self.top_ids[..count.min(self.top_ids.len())]
    }
}

/// Scores `units` (the whole population when `None`, or a sample).
pub fn influence_report(
    pop: &CurvePopulation,
    profile: &InclusionProfile,
    units: Option<&[usize]>,
) -> Result<InfluenceReport> {
    if profile.n_units() != pop.n_units() {
        return invalid("profile and population sizes differ");
    }
    let units: Vec<usize> = match units {
        Some(u) => u.to_vec(),
        None => (0..pop.n_units()).collect(),
    };
    let pi = profile.pi();
    let mut m = Vec::with_capacity(units.len());
    for &k in &units {
        if k >= pop.n_units() {
            return invalid(format!("unit index {k} out of range"));
        }
        let peak = pop.row(k).iter().fold(0.0f64, |acc, y| acc.max(y.abs()));
        m.push(peak / pi[k]);
    }
    let mut order: Vec<usize> = (0..units.len()).collect();
    order.sort_by(|&a, &b| m[b].total_cmp(&m[a]).then(units[a].cmp(&units[b])));
    let top_ids = order.iter().map(|&i| units[i]).collect();
    Ok(InfluenceReport { units, m, top_ids })
}
