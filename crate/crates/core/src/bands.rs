//! Simultaneous confidence bands from the simulated supremum of a studentized
//! Gaussian process.
//!
//! Surfaces arrive on the `gamma` scale. The process is simulated with
//! covariance `n * gamma` and `sigma_hat(t) = sqrt(n * gamma(t, t))` uses the
//! raw diagonal; the eigenvalue repair only feeds the factorization.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::estimators::{CovarianceSurface, MeanCurveEstimate};
use crate::population::TimeGrid;
use crate::rng::{substream, Purpose};

/// Bands whose largest half-width falls below this multiple of the largest
/// `|mean|` are reported as degenerate.
pub const DEGENERATE_RELATIVE_WIDTH: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GaussianSimConfig {
    pub replications: usize,
    pub alpha: f64,
    /// Eigenvalues below `eigen_floor * trace / D` are raised to that value.
    pub eigen_floor: f64,
    /// Points with `sigma_hat < sigma_floor * max sigma_hat` are excluded.
    pub sigma_floor: f64,
    pub seed: u64,
}

impl Default for GaussianSimConfig {
    fn default() -> Self {
        Self {
            replications: 3000,
            alpha: 0.05,
            eigen_floor: 0.0,
            sigma_floor: 1e-8,
            seed: 0,
        }
    }
}

impl GaussianSimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replications < 100 {
            return invalid(format!(
                "at least 100 replications are required, got {}",
                self.replications
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return invalid(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if !(self.eigen_floor >= 0.0 && self.eigen_floor.is_finite()) {
            return invalid(format!("eigen_floor must be nonnegative, got {}", self.eigen_floor));
        }
        if !(self.sigma_floor >= 0.0 && self.sigma_floor < 1.0) {
            return invalid(format!("sigma_floor must lie in [0, 1), got {}", self.sigma_floor));
        }
        Ok(())
    }
}

/// Result of the eigenvalue repair: `factor * factor^T == repaired`.
#[derive(Debug, Clone)]
pub struct RepairedFactor {
    /// `D x r`, one column per non-negligible repaired eigenvalue, largest first.
    pub factor: DMatrix<f64>,
    pub repaired: DMatrix<f64>,
    pub clipped: usize,
    pub min_eigenvalue: f64,
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return invalid(format!("covariance must be square, got {}x{}", m.nrows(), m.ncols()));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("covariance has non-finite entries".into()));
    }
    let scale = m.amax();
    let tol = 1e-12 * scale;
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > tol {
                return invalid(format!("covariance is not symmetric at ({i}, {j})"));
            }
        }
    }
    Ok(())
}

/// Symmetric eigendecomposition with eigenvalue clipping at
/// `eigen_floor * trace / D`.
pub fn repair_and_factor(matrix: &DMatrix<f64>, eigen_floor: f64) -> Result<RepairedFactor> {
    check_symmetric(matrix)?;
    if !(eigen_floor >= 0.0) {
        return invalid(format!("eigen_floor must be nonnegative, got {eigen_floor}"));
    }
    let d = matrix.nrows();
    let sym = (matrix + matrix.transpose()) * 0.5;
    let floor = eigen_floor * (sym.trace() / d as f64).max(0.0);
    let eig = SymmetricEigen::new(sym);
    let mut clipped = 0;
    let mut min_eigenvalue = f64::INFINITY;
    let mut values = eig.eigenvalues.clone();
    for v in values.iter_mut() {
        min_eigenvalue = min_eigenvalue.min(*v);
        if *v < floor {
            *v = floor;
            clipped += 1;
        }
    }
    // Eigenvalues at rounding level are treated as zero; the leading
    // direction takes the first normal variate.
    let top = values.max().max(0.0);
    let tiny = d as f64 * f64::EPSILON * top;
    let mut keep: Vec<usize> = (0..d).filter(|&i| values[i] > tiny).collect();
    keep.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut factor = DMatrix::<f64>::zeros(d, keep.len());
    for (c, &i) in keep.iter().enumerate() {
        let s = values[i].sqrt();
        factor.set_column(c, &(eig.eigenvectors.column(i) * s));
    }
    let repaired = &factor * factor.transpose();
    Ok(RepairedFactor {
        factor,
        repaired,
        clipped,
        min_eigenvalue,
    })
}

/// `sigma_hat(t_j) = sqrt(n * gamma(t_j, t_j))` from the raw diagonal.
pub fn sigma_hat(surface: &CovarianceSurface, n: usize) -> Result<Vec<f64>> {
    let nf = n as f64;
    surface
        .diagonal()
        .into_iter()
        .enumerate()
        .map(|(j, v)| {
            if v < 0.0 || !v.is_finite() {
                Err(Error::Numeric(format!("variance at grid point {j} is {v}")))
            } else {
                Ok((nf * v).sqrt())
            }
        })
        .collect()
}

/// Grid points retained for studentization, and those excluded.
fn split_by_floor(sigma: &[f64], sigma_floor: f64) -> (Vec<usize>, Vec<usize>) {
    let top = sigma.iter().cloned().fold(0.0, f64::max);
    let cut = sigma_floor * top;
    (0..sigma.len()).partition(|&j| top > 0.0 && sigma[j] >= cut && sigma[j] > 0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupQuantile {
    pub c_alpha: f64,
    pub sup_draws: Vec<f64>,
    pub sigma_hat: Vec<f64>,
    pub excluded_points: Vec<usize>,
    pub clipped_eigenvalues: usize,
}

/// Index (0-based) of the `ceil((1 - alpha) M)`-th order statistic.
pub fn order_statistic_index(m: usize, alpha: f64) -> usize {
    let rank = ((1.0 - alpha) * m as f64).ceil() as usize;
    rank.clamp(1, m) - 1
}

/// Simulates `M` draws of `sup_j |Z(t_j)| / sigma_hat(t_j)` with `Z` centred
/// Gaussian of covariance `n * gamma`, and returns their upper order
/// statistic at level `1 - alpha`. Draw `m` uses its own substream, so the
/// result does not depend on the thread count.
pub fn simulate_sup_quantile(surface: &CovarianceSurface, n: usize, cfg: &GaussianSimConfig) -> Result<SupQuantile> {
    cfg.validate()?;
    if n == 0 {
        return invalid("sample size must be positive");
    }
    let sigma = sigma_hat(surface, n)?;
    let (retained, excluded) = split_by_floor(&sigma, cfg.sigma_floor);
    if retained.is_empty() {
        return Err(Error::Numeric("every grid point has sigma_hat below the floor".into()));
    }
    let rep = repair_and_factor(&surface.matrix, cfg.eigen_floor)?;
    let scale = (n as f64).sqrt();
    // Only the retained rows of the factor are needed.
    let rows: Vec<(f64, Vec<f64>)> = retained
        .iter()
        .map(|&j| (sigma[j], rep.factor.row(j).iter().map(|v| v * scale).collect()))
        .collect();
    let rank = rep.factor.ncols();

    let mut sup_draws: Vec<f64> = (0..cfg.replications)
        .into_par_iter()
        .map(|m| {
            let mut rng = substream(cfg.seed, Purpose::BandSimulation, m as u64);
            let xi: Vec<f64> = (0..rank).map(|_| StandardNormal.sample(&mut rng)).collect();
            rows.iter()
                .map(|(s, row)| {
                    let z: f64 = row.iter().zip(&xi).map(|(a, b)| a * b).sum();
                    z.abs() / s
                })
                .fold(0.0, f64::max)
        })
        .collect();
    let mut sorted = sup_draws.clone();
    sorted.sort_by(f64::total_cmp);
    let c_alpha = sorted[order_statistic_index(sorted.len(), cfg.alpha)];
    sup_draws.shrink_to_fit();
    Ok(SupQuantile {
        c_alpha,
        sup_draws,
        sigma_hat: sigma,
        excluded_points: excluded,
        clipped_eigenvalues: rep.clipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandResult {
    pub grid: TimeGrid,
    pub n: usize,
    pub alpha: f64,
    pub mean: Vec<f64>,
    pub sigma_hat: Vec<f64>,
    pub c_alpha: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub excluded_points: Vec<usize>,
    /// Zero-width band from a vanishing covariance estimate.
    pub degenerate: bool,
}

impl BandResult {
    pub fn half_width(&self, j: usize) -> f64 {
        self.c_alpha * self.sigma_hat[j] / (self.n as f64).sqrt()
    }

    /// Whether `curve` lies inside the band at every retained grid point.
    pub fn covers(&self, curve: &[f64]) -> bool {
        let mut excluded = self.excluded_points.iter().peekable();
        for (j, y) in curve.iter().enumerate() {
            if excluded.peek() == Some(&&j) {
                excluded.next();
                continue;
            }
            if !(self.lower[j] <= *y && *y <= self.upper[j]) {
                return false;
            }
        }
        true
    }
}

/// Assembles `[mu_hat(t) -+ c_alpha sigma_hat(t) / sqrt(n)]`.
pub fn build_band(mean: &MeanCurveEstimate, surface: &CovarianceSurface, cfg: &GaussianSimConfig) -> Result<BandResult> {
    cfg.validate()?;
    if mean.grid != surface.grid {
        return invalid("mean curve and covariance surface are on different grids");
    }
    if surface.dim() != mean.values.len() {
        return invalid("covariance dimension does not match the mean curve");
    }
    let n = mean.n;
    if n == 0 {
        return invalid("empty sample");
    }
    let sigma = sigma_hat(surface, n)?;
    let root_n = (n as f64).sqrt();
    let widest = sigma.iter().cloned().fold(0.0, f64::max) / root_n;
    let level = mean.values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if widest == 0.0 || widest <= DEGENERATE_RELATIVE_WIDTH * level {
        return Ok(BandResult {
            grid: mean.grid.clone(),
            n,
            alpha: cfg.alpha,
            mean: mean.values.clone(),
            sigma_hat: sigma,
            c_alpha: 0.0,
            lower: mean.values.clone(),
            upper: mean.values.clone(),
            excluded_points: (0..mean.values.len()).collect(),
            degenerate: true,
        });
    }
    let sim = simulate_sup_quantile(surface, n, cfg)?;
    let c = sim.c_alpha;
    let (lower, upper) = mean
        .values
        .iter()
        .zip(&sim.sigma_hat)
        .map(|(m, s)| {
            let h = c * s / root_n;
            (m - h, m + h)
        })
        .unzip();
    Ok(BandResult {
        grid: mean.grid.clone(),
        n,
        alpha: cfg.alpha,
        mean: mean.values.clone(),
        sigma_hat: sim.sigma_hat,
        c_alpha: c,
        lower,
        upper,
        excluded_points: sim.excluded_points,
        degenerate: false,
    })
}

/// Sample covariance of simulated draws `Z = sqrt(n) L xi`, for checking the
/// simulator against its target.
pub fn simulated_covariance(surface: &CovarianceSurface, n: usize, cfg: &GaussianSimConfig) -> Result<DMatrix<f64>> {
    let rep = repair_and_factor(&surface.matrix, cfg.eigen_floor)?;
    let d = surface.dim();
    let scale = (n as f64).sqrt();
    let draws: Vec<DVector<f64>> = (0..cfg.replications)
        .into_par_iter()
        .map(|m| {
            let mut rng = substream(cfg.seed, Purpose::BandSimulation, m as u64);
            let xi = DVector::from_fn(rep.factor.ncols(), |_, _| StandardNormal.sample(&mut rng));
            &rep.factor * xi * scale
        })
        .collect();
    let mut acc = DMatrix::<f64>::zeros(d, d);
    for z in &draws {
        acc += z * z.transpose();
    }
    Ok(acc / cfg.replications as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::SurfaceKind;
    use statrs::distribution::{ContinuousCDF, Normal};

    fn surface(m: DMatrix<f64>) -> CovarianceSurface {
        let d = m.nrows().max(2);
        CovarianceSurface {
            grid: TimeGrid::uniform(d, 1.0).unwrap(),
            matrix: m,
            kind: SurfaceKind::Empirical,
        }
    }

    fn frob(m: &DMatrix<f64>) -> f64 {
        m.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn identity_factor() {
        let rep = repair_and_factor(&DMatrix::identity(4, 4), 0.0).unwrap();
        assert!(frob(&(&rep.repaired - DMatrix::<f64>::identity(4, 4))) < 1e-14);
        assert_eq!(rep.clipped, 0);
        // Up to column signs and order the factor is the identity.
        for j in 0..4 {
            let col = rep.factor.column(j);
            assert!((col.amax() - 1.0).abs() < 1e-14);
            assert!((col.norm() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn rank_one_reconstruction() {
        let v = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0, 0.25]);
        let m = &v * v.transpose();
        let rep = repair_and_factor(&m, 0.0).unwrap();
        let rel = frob(&(&rep.repaired - &m)) / frob(&m);
        assert!(rel < 1e-12, "{rel}");
        assert!(rep.factor.ncols() <= 5);
    }

    #[test]
    fn small_negative_eigenvalue_is_clipped() {
        let q = nalgebra::linalg::QR::new(DMatrix::from_fn(5, 5, |i, j| ((i * 7 + j * 3) % 11) as f64 + 0.1 * i as f64)).q();
        let lambda = DVector::from_vec(vec![3.0, 2.0, 1.0, 0.5, -1e-6]);
        let m = &q * DMatrix::from_diagonal(&lambda) * q.transpose();
        let m = (&m + m.transpose()) * 0.5;
        let rep = repair_and_factor(&m, 0.0).unwrap();
        let eig = SymmetricEigen::new(rep.repaired.clone());
        assert!(eig.eigenvalues.min() > -1e-12);
        assert!(frob(&(&rep.repaired - &m)) <= 1e-6 * 5.0);
        assert_eq!(rep.clipped, 1);
    }

    #[test]
    fn rejects_asymmetric_and_nan() {
        let mut m = DMatrix::<f64>::identity(3, 3);
        m[(0, 1)] = 0.5;
        assert!(repair_and_factor(&m, 0.0).is_err());
        m[(0, 1)] = f64::NAN;
        m[(1, 0)] = f64::NAN;
        assert!(repair_and_factor(&m, 0.0).is_err());
    }

    #[test]
    fn eigen_floor_raises_small_eigenvalues() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-9, 2.0]));
        let rep = repair_and_factor(&m, 0.01).unwrap();
        let floor = 0.01 * (3.0 + 1e-9) / 3.0;
        assert!((rep.repaired[(1, 1)] - floor).abs() < 1e-14);
    }

    #[test]
    fn order_statistic_is_upper() {
        assert_eq!(order_statistic_index(100, 0.05), 94);
        assert_eq!(order_statistic_index(3000, 0.05), 2849);
        assert_eq!(order_statistic_index(101, 0.05), 95);
    }

    #[test]
    fn scalar_case_gives_normal_quantile() {
        let s = surface(DMatrix::from_element(1, 1, 2.5));
        let cfg = GaussianSimConfig {
            replications: 100_000,
            seed: 3,
            ..GaussianSimConfig::default()
        };
        let q = simulate_sup_quantile(&s, 40, &cfg).unwrap();
        assert!((q.c_alpha - 1.959964).abs() < 0.02, "{}", q.c_alpha);
    }

    #[test]
    fn independent_points_closed_form() {
        let normal = Normal::new(0.0, 1.0).unwrap();
        for d in [5usize, 20] {
            let diag: Vec<f64> = (0..d).map(|j| 0.5 + j as f64).collect();
            let s = surface(DMatrix::from_diagonal(&DVector::from_vec(diag)));
            let cfg = GaussianSimConfig {
                replications: 50_000,
                seed: 11,
                ..GaussianSimConfig::default()
            };
            let q = simulate_sup_quantile(&s, 10, &cfg).unwrap();
            let want = normal.inverse_cdf((1.0 + 0.95f64.powf(1.0 / d as f64)) / 2.0);
            assert!((q.c_alpha - want).abs() < 0.03, "D={d}: {} vs {want}", q.c_alpha);
            assert!(q.c_alpha >= 1.959964 - 0.03);
        }
    }

    #[test]
    fn perfectly_correlated_matches_scalar() {
        let v = DVector::from_vec(vec![1.0, 2.0, 0.5, 4.0, 1.5, 3.0]);
        let s = surface(&v * v.transpose());
        let cfg = GaussianSimConfig {
            replications: 20_000,
            seed: 5,
            ..GaussianSimConfig::default()
        };
        let q = simulate_sup_quantile(&s, 7, &cfg).unwrap();
        let scalar = simulate_sup_quantile(&surface(DMatrix::from_element(1, 1, 1.0)), 7, &cfg).unwrap();
        assert!((q.c_alpha - scalar.c_alpha).abs() < 1e-9, "{} vs {}", q.c_alpha, scalar.c_alpha);
    }

    #[test]
    fn alpha_monotone_and_deterministic() {
        let m = DMatrix::from_fn(8, 8, |i, j| (-((i as f64 - j as f64).abs()) / 3.0).exp());
        let s = surface(m);
        let a = GaussianSimConfig {
            replications: 2000,
            seed: 9,
            ..GaussianSimConfig::default()
        };
        let b = GaussianSimConfig { alpha: 0.01, ..a };
        let qa = simulate_sup_quantile(&s, 30, &a).unwrap();
        let qb = simulate_sup_quantile(&s, 30, &b).unwrap();
        assert!(qb.c_alpha >= qa.c_alpha);
        let again = simulate_sup_quantile(&s, 30, &a).unwrap();
        assert_eq!(qa.c_alpha.to_bits(), again.c_alpha.to_bits());
        assert_eq!(qa.sup_draws, again.sup_draws);
    }

    #[test]
    fn thread_count_does_not_matter() {
        let m = DMatrix::from_fn(6, 6, |i, j| 1.0 / (1.0 + (i as f64 - j as f64).abs()));
        let s = surface(m);
        let cfg = GaussianSimConfig {
            replications: 1000,
            seed: 21,
            ..GaussianSimConfig::default()
        };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| simulate_sup_quantile(&s, 12, &cfg).unwrap())
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn draw_covariance_matches_target() {
        let m = DMatrix::from_fn(5, 5, |i, j| 0.8f64.powi((i as i32 - j as i32).abs()) * 0.01);
        let s = surface(m.clone());
        let cfg = GaussianSimConfig {
            replications: 20_000,
            seed: 4,
            ..GaussianSimConfig::default()
        };
        let n = 50;
        let emp = simulated_covariance(&s, n, &cfg).unwrap();
        let target = m * n as f64;
        let err = frob(&(emp - &target));
        assert!(err <= 5.0 / (cfg.replications as f64).sqrt() * frob(&target), "{err}");
    }

    #[test]
    fn low_variance_points_are_excluded() {
        let s = surface(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0, 4.0])));
        let q = simulate_sup_quantile(&s, 5, &GaussianSimConfig::default()).unwrap();
        assert_eq!(q.excluded_points, vec![1]);
        let zero = surface(DMatrix::zeros(3, 3));
        assert!(simulate_sup_quantile(&zero, 5, &GaussianSimConfig::default()).is_err());
    }

    #[test]
    fn band_shape_and_degenerate_flag() {
        let grid = TimeGrid::uniform(3, 1.0).unwrap();
        let mean = MeanCurveEstimate {
            grid: grid.clone(),
            values: vec![1.0, 2.0, 3.0],
            n: 16,
            d_hat: 4.0,
        };
        let m = DMatrix::from_fn(3, 3, |i, j| if i == j { 0.04 } else { 0.01 });
        let surf = CovarianceSurface {
            grid: grid.clone(),
            matrix: m,
            kind: SurfaceKind::HajekEstimate,
        };
        let band = build_band(&mean, &surf, &GaussianSimConfig::default()).unwrap();
        assert!(!band.degenerate && band.c_alpha > 0.0);
        for j in 0..3 {
            let h = band.c_alpha * band.sigma_hat[j] / 4.0;
            assert!((band.upper[j] - band.mean[j] - h).abs() < 1e-15);
            assert!((band.mean[j] - band.lower[j] - h).abs() < 1e-15);
        }
        assert!(band.covers(&[1.0, 2.0, 3.0]));
        assert!(!band.covers(&[1.0, 100.0, 3.0]));

        let zero = CovarianceSurface {
            grid,
            matrix: DMatrix::zeros(3, 3),
            kind: SurfaceKind::HajekEstimate,
        };
        let band = build_band(&mean, &zero, &GaussianSimConfig::default()).unwrap();
        assert!(band.degenerate);
        assert_eq!(band.lower, band.upper);
    }

    #[test]
    fn config_validation() {
        let bad = GaussianSimConfig {
            replications: 99,
            ..GaussianSimConfig::default()
        };
        assert!(bad.validate().is_err());
        for alpha in [0.0, 1.0, -0.1, f64::NAN] {
            let bad = GaussianSimConfig {
                alpha,
                ..GaussianSimConfig::default()
            };
            assert!(bad.validate().is_err());
        }
    }
}
