//! Replicated-sampling experiments: empirical covariance, the relative
//! diagonal risk of the covariance estimator, band coverage and
//! convergence-rate studies on enumerable designs.
//!
//! Replicate `i` of each experiment draws from its own substream of the
//! master seed and results are gathered in replicate order, so reports do not
//! depend on the number of worker threads.

use rayon::prelude::*;
use serde::Serialize;

use crate::bands::{build_band, GaussianSimConfig};
use crate::designs::{
    a5_statistic, calibrate_cp_working_probs, enumerate_design, second_order_exact, second_order_hajek,
    DesignDistribution, DesignKind, EnumerableDesign, InclusionProfile, PreparedDesign, SampleDraw,
    DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use crate::error::{invalid, Error, Result};
use crate::estimators::{
    hajek_estimate_surface, hajek_population_surface, ht_mean_curve, weighted_scatter, yates_grundy_surface,
    CovarianceSurface, HajekOptions, MeanCurveEstimate, SurfaceKind,
};
use crate::population::{CurvePopulation, TimeGrid};
use crate::rng::{derive_seed, substream, Purpose};
use crate::util::{fit_line, quantile_sorted};

/// `(1/(J-1)) sum_m (mu_m - mu_bar)(mu_m - mu_bar)^T` over replicate curves.
pub fn empirical_covariance(estimates: &[MeanCurveEstimate]) -> Result<CovarianceSurface> {
    let Some(first) = estimates.first() else {
        return invalid("no replicates");
    };
    if estimates.iter().any(|e| e.grid != first.grid) {
        return invalid("replicates are on different grids");
    }
    let rows: Vec<Vec<f64>> = estimates.iter().map(|e| e.values.clone()).collect();
    empirical_covariance_rows(&first.grid, &rows)
}

pub fn empirical_covariance_rows(grid: &TimeGrid, rows: &[Vec<f64>]) -> Result<CovarianceSurface> {
    if rows.len() < 2 {
        return invalid(format!("at least 2 replicates are required, got {}", rows.len()));
    }
    let d = grid.len();
    if rows.iter().any(|r| r.len() != d) {
        return invalid("replicate length does not match the grid");
    }
    let ones = vec![1.0; rows.len()];
    let matrix = weighted_scatter(&ones, rows, d) / (rows.len() - 1) as f64;
    Ok(CovarianceSurface {
        grid: grid.clone(),
        matrix,
        kind: SurfaceKind::Empirical,
    })
}

fn retained_points(reference: &[f64]) -> Result<Vec<usize>> {
    let keep: Vec<usize> = (0..reference.len()).filter(|&j| reference[j] > 0.0).collect();
    if keep.is_empty() {
        return Err(Error::Numeric("reference variance is zero at every grid point".into()));
    }
    Ok(keep)
}

fn risk_on(diag: &[f64], reference: &[f64], keep: &[usize]) -> f64 {
    keep.iter()
        .map(|&j| {
            let r = (diag[j] - reference[j]) / reference[j];
            r * r
        })
        .sum::<f64>()
        / keep.len() as f64
}

/// `R = (1/D') sum_j (gamma_hat(t_j,t_j) - gamma_ref(t_j,t_j))^2 / gamma_ref(t_j,t_j)^2`
/// over the `D'` points where the reference variance is positive.
pub fn risk_r(estimate: &CovarianceSurface, reference: &CovarianceSurface) -> Result<f64> {
    if estimate.dim() != reference.dim() {
        return invalid("surfaces differ in dimension");
    }
    let r = reference.diagonal();
    let keep = retained_points(&r)?;
    Ok(risk_on(&estimate.diagonal(), &r, &keep))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RiskQuantiles {
    pub p05: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub p95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskSummary {
    pub risks: Vec<f64>,
    pub rmse: f64,
    pub rb2: f64,
    /// `rmse - rb2`.
    pub rv: f64,
    pub quantiles: RiskQuantiles,
    pub excluded_points: Vec<usize>,
    /// Replicate whose risk is closest to the median (lowest index on ties).
    pub median_replicate: usize,
}

/// RMSE, squared relative bias of the replicate-mean diagonal, and their
/// difference, from per-replicate diagonals.
pub fn risk_decomposition_diagonals(diagonals: &[Vec<f64>], reference: &[f64]) -> Result<RiskSummary> {
    if diagonals.len() < 2 {
        return invalid(format!("at least 2 replicates are required, got {}", diagonals.len()));
    }
    let d = reference.len();
    if diagonals.iter().any(|g| g.len() != d) {
        return invalid("replicate diagonal length does not match the reference");
    }
    let keep = retained_points(reference)?;
    let excluded_points = (0..d).filter(|j| !keep.contains(j)).collect();
    let risks: Vec<f64> = diagonals.iter().map(|g| risk_on(g, reference, &keep)).collect();
    let count = diagonals.len() as f64;
    let rmse = risks.iter().sum::<f64>() / count;
    let mut mean_diag = vec![0.0; d];
    for g in diagonals {
        for (m, v) in mean_diag.iter_mut().zip(g) {
            *m += v;
        }
    }
    for m in &mut mean_diag {
        *m /= count;
    }
    let rb2 = risk_on(&mean_diag, reference, &keep);
    let mut sorted = risks.clone();
    sorted.sort_by(f64::total_cmp);
    let q = |p| quantile_sorted(&sorted, p);
    let quantiles = RiskQuantiles {
        p05: q(0.05),
        q1: q(0.25),
        median: q(0.5),
        q3: q(0.75),
        p95: q(0.95),
    };
    let median_replicate = (0..risks.len())
        .min_by(|&a, &b| {
            let da = (risks[a] - quantiles.median).abs();
            let db = (risks[b] - quantiles.median).abs();
            da.total_cmp(&db).then(a.cmp(&b))
        })
        .unwrap_or(0);
    Ok(RiskSummary {
        risks,
        rmse,
        rb2,
        rv: rmse - rb2,
        quantiles,
        excluded_points,
        median_replicate,
    })
}

pub fn risk_decomposition(surfaces: &[CovarianceSurface], reference: &CovarianceSurface) -> Result<RiskSummary> {
    let diagonals: Vec<Vec<f64>> = surfaces.iter().map(|s| s.diagonal()).collect();
    risk_decomposition_diagonals(&diagonals, &reference.diagonal())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McConfig {
    pub design: DesignKind,
    pub n: usize,
    /// Capping threshold passed to the inclusion profile.
    pub delta: f64,
    /// Replicates `J` for the empirical covariance.
    pub reps_gamma: usize,
    /// Replicates `I` for the risk distribution.
    pub reps_risk: usize,
    /// Outer replicates of the coverage study; 0 skips it.
    pub reps_coverage: usize,
    pub estimator: HajekOptions,
    /// Alpha, simulation count and floors for the bands; the seed is
    /// derived per replicate from `master_seed`.
    pub band: GaussianSimConfig,
    pub master_seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            design: DesignKind::Rejective,
            n: 200,
            delta: 0.0,
            reps_gamma: 10_000,
            reps_risk: 10_000,
            reps_coverage: 0,
            estimator: HajekOptions::default(),
            band: GaussianSimConfig::default(),
            master_seed: 0,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps_gamma < 2 {
            return invalid(format!("reps_gamma must be at least 2, got {}", self.reps_gamma));
        }
        if self.reps_risk < 1 {
            return invalid("reps_risk must be at least 1");
        }
        if self.n == 0 {
            return invalid("sample size must be positive");
        }
        if self.reps_coverage > 0 {
            self.band.validate()?;
        }
        Ok(())
    }

    pub fn prepare(&self, pop: &CurvePopulation) -> Result<PreparedDesign> {
        let profile = InclusionProfile::from_auxiliary(pop.auxiliary(), self.n, self.delta)?;
        PreparedDesign::new(self.design, profile)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplicateOutcome {
    Hit,
    Miss,
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageReport {
    pub alpha: f64,
    pub outcomes: Vec<ReplicateOutcome>,
    /// Hit fraction over non-degenerate replicates; `None` when every band
    /// was degenerate.
    pub coverage: Option<f64>,
    pub degenerate: usize,
    pub mean_c_alpha: Option<f64>,
}

/// Outer replicates of draw, estimate and band; replicate `i` hits when
/// the true mean curve lies in the band at every retained grid point.
pub fn coverage_experiment(pop: &CurvePopulation, design: &PreparedDesign, cfg: &McConfig) -> Result<CoverageReport> {
    cfg.band.validate()?;
    let truth = pop.mean_curve();
    let outcomes: Vec<(ReplicateOutcome, f64)> = (0..cfg.reps_coverage)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(cfg.master_seed, Purpose::CoverageReplicate, i as u64);
            let sample = design.draw(&mut rng)?;
            let mean = ht_mean_curve(&sample, design.profile(), pop)?;
            let surface = hajek_estimate_surface(&sample, design.profile(), pop, cfg.estimator)?;
            let band_cfg = GaussianSimConfig {
                seed: derive_seed(cfg.master_seed, Purpose::BandSimulation, i as u64),
                ..cfg.band
            };
            let band = build_band(&mean, &surface, &band_cfg)?;
            let outcome = if band.degenerate {
                ReplicateOutcome::Degenerate
            } else if band.covers(&truth) {
                ReplicateOutcome::Hit
            } else {
                ReplicateOutcome::Miss
            };
            Ok((outcome, band.c_alpha))
        })
        .collect::<Result<_>>()?;
    let degenerate = outcomes.iter().filter(|(o, _)| *o == ReplicateOutcome::Degenerate).count();
    let live = outcomes.len() - degenerate;
    let (coverage, mean_c_alpha) = if live == 0 {
        (None, None)
    } else {
        let hits = outcomes.iter().filter(|(o, _)| *o == ReplicateOutcome::Hit).count();
        let c_sum: f64 = outcomes
            .iter()
            .filter(|(o, _)| *o != ReplicateOutcome::Degenerate)
            .map(|(_, c)| c)
            .sum();
        (Some(hits as f64 / live as f64), Some(c_sum / live as f64))
    };
    Ok(CoverageReport {
        alpha: cfg.band.alpha,
        outcomes: outcomes.into_iter().map(|(o, _)| o).collect(),
        coverage,
        degenerate,
        mean_c_alpha,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McReport {
    pub design: DesignKind,
    pub n: usize,
    pub d_pi: f64,
    #[serde(skip)]
    pub gamma_emp: CovarianceSurface,
    #[serde(skip)]
    pub gamma_hajek: CovarianceSurface,
    /// Estimated surface of the replicate closest to the median risk.
    #[serde(skip)]
    pub median_surface: CovarianceSurface,
    pub risk: RiskSummary,
    /// `max_j |mean_m mu_hat_m(t_j) - mu_N(t_j)| / se_j` over the `J`
    /// replicates, with `se_j = sqrt(gamma_emp(t_j,t_j) / J)`.
    pub mean_gap_in_se: f64,
    pub coverage: Option<CoverageReport>,
}

fn draw_replicate(
    design: &PreparedDesign,
    seed: u64,
    purpose: Purpose,
    i: usize,
) -> Result<SampleDraw> {
    let mut rng = substream(seed, purpose, i as u64);
    design.draw(&mut rng)
}

/// Runs the full protocol for one sample size: `J` replicates for the
/// empirical covariance, `I` fresh replicates for the risk of the Hájek
/// estimator, and the optional coverage study.
pub fn run_mc_study(pop: &CurvePopulation, cfg: &McConfig) -> Result<McReport> {
    cfg.validate()?;
    let design = cfg.prepare(pop)?;
    let profile = design.profile();

    let curves: Vec<Vec<f64>> = (0..cfg.reps_gamma)
        .into_par_iter()
        .map(|i| {
            let s = draw_replicate(&design, cfg.master_seed, Purpose::GammaReplicate, i)?;
            Ok(ht_mean_curve(&s, profile, pop)?.values)
        })
        .collect::<Result<_>>()?;
    let gamma_emp = empirical_covariance_rows(pop.grid(), &curves)?;

    let truth = pop.mean_curve();
    let j_count = cfg.reps_gamma as f64;
    let mut mean_gap_in_se: f64 = 0.0;
    for (j, mu) in truth.iter().enumerate() {
        let avg = curves.iter().map(|c| c[j]).sum::<f64>() / j_count;
        let se = (gamma_emp.matrix[(j, j)] / j_count).sqrt();
        let gap = (avg - mu).abs();
        if se > 0.0 {
            mean_gap_in_se = mean_gap_in_se.max(gap / se);
        } else if gap > 0.0 {
            mean_gap_in_se = f64::INFINITY;
        }
    }
    drop(curves);

    let diagonals: Vec<Vec<f64>> = (0..cfg.reps_risk)
        .into_par_iter()
        .map(|i| {
            let s = draw_replicate(&design, cfg.master_seed, Purpose::RiskReplicate, i)?;
            Ok(hajek_estimate_surface(&s, profile, pop, cfg.estimator)?.diagonal())
        })
        .collect::<Result<_>>()?;
    let risk = risk_decomposition_diagonals(&diagonals, &gamma_emp.diagonal())?;
    let median_sample = draw_replicate(
        &design,
        cfg.master_seed,
        Purpose::RiskReplicate,
        risk.median_replicate,
    )?;
    let median_surface = hajek_estimate_surface(&median_sample, profile, pop, cfg.estimator)?;
    let gamma_hajek = hajek_population_surface(profile, pop)?;

    let coverage = if cfg.reps_coverage > 0 {
        Some(coverage_experiment(pop, &design, cfg)?)
    } else {
        None
    };
    Ok(McReport {
        design: cfg.design,
        n: cfg.n,
        d_pi: profile.d_pi(),
        gamma_emp,
        gamma_hajek,
        median_surface,
        risk,
        mean_gap_in_se,
        coverage,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RateQuantity {
    A5,
    HajekPiklError,
    VarEstimatorMse,
}

/// Populations for a rate study: unit `k` of a size-`N` population takes
/// `x[k % L]` and `curves[k % L]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateTemplate {
    pub x: Vec<f64>,
    pub curves: Vec<Vec<f64>>,
    pub grid: TimeGrid,
    /// Grid pair `(r, t)` for the estimator MSE.
    pub cell: (usize, usize),
}

const BASE_X: [f64; 4] = [1.0, 2.0, 3.0, 4.0];
const BASE_CURVES: [[f64; 3]; 4] = [
    [1.0, 1.5, 0.8],
    [2.2, 2.8, 1.9],
    [2.9, 4.6, 3.2],
    [4.3, 5.5, 3.7],
];

impl RateTemplate {
    /// Three-point curves roughly proportional to `x`: entry `l` reuses one of
    /// four fixed shapes, rescaled by `x[l]` over that shape's own size.
    pub fn with_pattern(x: Vec<f64>) -> Result<Self> {
        if x.is_empty() || x.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return invalid("pattern values must be positive");
        }
        let curves = x
            .iter()
            .enumerate()
            .map(|(l, &v)| {
                let scale = v / BASE_X[l % 4];
                BASE_CURVES[l % 4].iter().map(|y| y * scale).collect()
            })
            .collect();
        Ok(Self {
            x,
            curves,
            grid: TimeGrid::uniform(3, 1.0)?,
            cell: (1, 2),
        })
    }

    pub fn population(&self, n_units: usize) -> Result<CurvePopulation> {
        let l = self.x.len();
        if l == 0 || self.curves.len() != l {
            return invalid("template needs one curve per auxiliary value");
        }
        let rows: Vec<Vec<f64>> = (0..n_units).map(|k| self.curves[k % l].clone()).collect();
        let aux = (0..n_units).map(|k| self.x[k % l]).collect();
        CurvePopulation::from_rows(self.grid.clone(), &rows, aux)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatePoint {
    pub n_units: usize,
    pub n: usize,
    pub d_pi: f64,
    pub value: f64,
    /// `n^3 * value` for the estimator MSE, `value` otherwise.
    pub scaled: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateStudy {
    pub quantity: RateQuantity,
    pub design: DesignKind,
    pub points: Vec<RatePoint>,
    /// Least-squares slope of `ln value` against `ln d(pi)`.
    pub slope: f64,
    pub intercept: f64,
    pub residuals: Vec<f64>,
}

fn enumerate_for(design: DesignKind, profile: &InclusionProfile, max_support: u128) -> Result<DesignDistribution> {
    let enumerable = match design {
        DesignKind::Rejective => {
            let w = calibrate_cp_working_probs(profile, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
            EnumerableDesign::Rejective { p: w.p }
        }
        DesignKind::Sampford => EnumerableDesign::Sampford {
            pi: profile.pi().to_vec(),
        },
        DesignKind::Srswor => EnumerableDesign::Srswor,
        DesignKind::Poisson => return invalid("rate studies need a fixed-size design"),
    };
    enumerate_design(&enumerable, profile.n_units(), profile.n(), max_support)
}

fn rate_value(
    quantity: RateQuantity,
    template: &RateTemplate,
    profile: &InclusionProfile,
    dist: &DesignDistribution,
) -> Result<f64> {
    let exact = second_order_exact(dist);
    match quantity {
        RateQuantity::A5 => a5_statistic(dist, &exact),
        RateQuantity::HajekPiklError => Ok(exact.max_offdiag_diff(&second_order_hajek(profile)?)),
        RateQuantity::VarEstimatorMse => {
            let pop = template.population(profile.n_units())?;
            let (r, t) = template.cell;
            if r >= pop.n_points() || t >= pop.n_points() {
                return invalid(format!("cell ({r}, {t}) outside the grid"));
            }
            let gamma = yates_grundy_surface(&exact, profile, &pop)?.matrix[(r, t)];
            let mut mse = 0.0;
            for (s, p) in dist.iter() {
                let draw = SampleDraw::new(s.to_vec(), pop.n_units())?;
                let est = hajek_estimate_surface(&draw, profile, &pop, HajekOptions::default())?;
                let e = est.matrix[(r, t)] - gamma;
                mse += p * e * e;
            }
            Ok(mse)
        }
    }
}

/// Evaluates `quantity` exactly at each `(N, n)` and fits its log-log slope
/// against `d(pi)`.
pub fn rate_study(
    design: DesignKind,
    template: &RateTemplate,
    sizes: &[(usize, usize)],
    quantity: RateQuantity,
    max_support: u128,
) -> Result<RateStudy> {
    if sizes.len() < 3 {
        return invalid(format!("a rate study needs at least 3 sizes, got {}", sizes.len()));
    }
    let points: Vec<RatePoint> = sizes
        .par_iter()
        .map(|&(n_units, n)| {
            let x: Vec<f64> = (0..n_units).map(|k| template.x[k % template.x.len()]).collect();
            let profile = InclusionProfile::from_auxiliary(&x, n, 0.0)?;
            let dist = enumerate_for(design, &profile, max_support)?;
            let value = rate_value(quantity, template, &profile, &dist)?;
            let scaled = match quantity {
                RateQuantity::VarEstimatorMse => (n as f64).powi(3) * value,
                _ => value,
            };
            Ok(RatePoint {
                n_units,
                n,
                d_pi: profile.d_pi(),
                value,
                scaled,
            })
        })
        .collect::<Result<_>>()?;
    if let Some(p) = points.iter().find(|p| !(p.value > 0.0)) {
        return Err(Error::Numeric(format!(
            "quantity is {} at N = {}; no log-log fit",
            p.value, p.n_units
        )));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.d_pi.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.value.ln()).collect();
    let fit = fit_line(&xs, &ys).ok_or_else(|| Error::Numeric("d(pi) does not vary across sizes".into()))?;
    Ok(RateStudy {
        quantity,
        design,
        points,
        slope: fit.slope,
        intercept: fit.intercept,
        residuals: fit.residuals,
    })
}
