//! Fixed-size unequal-probability sampling designs.
//!
//! Inclusion probabilities proportional to an auxiliary size, the rejective
//! (conditional Poisson), Sampford, SRSWOR and Poisson samplers, exact
//! enumeration of small designs, second-order inclusion probabilities, and
//! entropy diagnostics.

mod conditional_poisson;
mod diagnostics;
mod enumerate;
mod samplers;

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub use conditional_poisson::{
    calibrate_conditional_poisson, calibrate_cp_working_probs, conditional_poisson_inclusion,
    second_order_cp, WorkingProbs, DEFAULT_MAX_ITER, DEFAULT_TOL,
};
pub use diagnostics::{
    a5_statistic, entropy, kl_divergence, quadruple_inclusion, total_variation,
    tv_from_counts, QuadrupleInclusion, A5_MAX_UNITS,
};
pub use enumerate::{
    enumerate_design, second_order_exact, second_order_hajek, DesignDistribution,
    EnumerableDesign, DEFAULT_MAX_SUPPORT,
};
pub use samplers::{draw_poisson, draw_rejective, draw_sampford, draw_srswor, MAX_ATTEMPTS};

/// First-order inclusion probabilities of a fixed-size design.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InclusionProfile {
    pi: Vec<f64>,
    n: usize,
    d_pi: f64,
    capped: Vec<usize>,
}

impl InclusionProfile {
    pub fn new(pi: Vec<f64>, n: usize) -> Result<Self> {
        if let Some(k) = pi.iter().position(|&v| !(v > 0.0 && v <= 1.0)) {
            return invalid(format!("pi of unit {k} must lie in (0, 1], got {}", pi[k]));
        }
        let total: f64 = pi.iter().sum();
        if (total - n as f64).abs() > 1e-9 {
            return invalid(format!("inclusion probabilities sum to {total}, expected {n}"));
        }
        let d_pi = pi.iter().map(|p| p * (1.0 - p)).sum();
        let capped = (0..pi.len()).filter(|&k| pi[k] == 1.0).collect();
        Ok(Self {
            pi,
            n,
            d_pi,
            capped,
        })
    }

    /// Equal probabilities `n / N`.
    pub fn uniform(n_units: usize, n: usize) -> Result<Self> {
        if n == 0 || n > n_units {
            return invalid(format!("sample size {n} must lie in 1..={n_units}"));
        }
        Self::new(vec![n as f64 / n_units as f64; n_units], n)
    }

    /// `pi_k = n max(delta, x_k) / sum_j max(delta, x_j)`, with any value
    /// above one capped at one and the remaining mass re-proportioned over
    /// the other units until every probability is at most one.
    pub fn from_auxiliary(x: &[f64], n: usize, delta: f64) -> Result<Self> {
        let big_n = x.len();
        if n == 0 {
            return invalid("sample size must be positive");
        }
        if n >= big_n {
            return invalid(format!("sample size {n} must be below the population size {big_n}"));
        }
        if let Some(k) = x.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
            return invalid(format!("auxiliary value of unit {k} must be positive, got {}", x[k]));
        }
        if !(delta >= 0.0 && delta.is_finite()) {
            return invalid(format!("threshold must be nonnegative, got {delta}"));
        }
        let size: Vec<f64> = x.iter().map(|&v| v.max(delta)).collect();
        let mut pi = vec![0.0; big_n];
        let mut capped = vec![false; big_n];
        loop {
            let n_capped = capped.iter().filter(|&&c| c).count();
            let remaining = (n - n_capped) as f64;
            let mass: f64 = (0..big_n).filter(|&k| !capped[k]).map(|k| size[k]).sum();
            let mut changed = false;
            for k in 0..big_n {
                if capped[k] {
                    pi[k] = 1.0;
                    continue;
                }
                pi[k] = remaining * size[k] / mass;
                if pi[k] >= 1.0 {
                    capped[k] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        Self::new(pi, n)
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_units(&self) -> usize {
        self.pi.len()
    }

    /// `d(pi) = sum_k pi_k (1 - pi_k)`.
    pub fn d_pi(&self) -> f64 {
        self.d_pi
    }

    /// Units with `pi_k = 1`.
    pub fn capped(&self) -> &[usize] {
        &self.capped
    }

    pub fn stochastic_units(&self) -> Vec<usize> {
        (0..self.pi.len()).filter(|&k| self.pi[k] < 1.0).collect()
    }

    /// Sample size left for the random part once capped units are included.
    pub fn stochastic_size(&self) -> usize {
        self.n - self.capped.len()
    }
}

/// Where a second-order matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairSource {
    ExactEnumeration,
    CpRecursion,
    HajekApprox,
}

impl PairSource {
    pub fn is_exact(self) -> bool {
        !matches!(self, PairSource::HajekApprox)
    }
}

/// Symmetric `N x N` matrix of `pi_kl`, with `pi_k` on the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrderMatrix {
    pikl: DMatrix<f64>,
    source: PairSource,
}

impl SecondOrderMatrix {
    pub(crate) fn new(pikl: DMatrix<f64>, source: PairSource) -> Self {
        Self { pikl, source }
    }

    pub fn get(&self, k: usize, l: usize) -> f64 {
        self.pikl[(k, l)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.pikl
    }

    pub fn source(&self) -> PairSource {
        self.source
    }

    pub fn n_units(&self) -> usize {
        self.pikl.nrows()
    }

    /// Largest off-diagonal `|a_kl - b_kl|`.
    pub fn max_offdiag_diff(&self, other: &SecondOrderMatrix) -> f64 {
        let n = self.n_units();
        let mut worst: f64 = 0.0;
        for k in 0..n {
            for l in 0..n {
                if k != l {
                    worst = worst.max((self.get(k, l) - other.get(k, l)).abs());
                }
            }
        }
        worst
    }
}

/// A drawn sample: sorted unit indices and the membership indicator.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SampleDraw {
    indices: Vec<usize>,
    membership: Vec<bool>,
}

impl SampleDraw {
    pub fn new(mut indices: Vec<usize>, n_units: usize) -> Result<Self> {
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return invalid("sample contains a repeated unit");
        }
        if let Some(&k) = indices.iter().find(|&&k| k >= n_units) {
            return invalid(format!("unit index {k} outside a population of {n_units}"));
        }
        let mut membership = vec![false; n_units];
        for &k in &indices {
            membership[k] = true;
        }
        Ok(Self {
            indices,
            membership,
        })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn membership(&self) -> &[bool] {
        &self.membership
    }

    pub fn n(&self) -> usize {
        self.indices.len()
    }

    pub fn n_units(&self) -> usize {
        self.membership.len()
    }

    pub fn contains(&self, k: usize) -> bool {
        self.membership[k]
    }
}

/// The drawing mechanisms available to the CLI and Monte Carlo harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DesignKind {
    Rejective,
    Sampford,
    Srswor,
    Poisson,
}

impl fmt::Display for DesignKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DesignKind::Rejective => "rejective",
            DesignKind::Sampford => "sampford",
            DesignKind::Srswor => "srswor",
            DesignKind::Poisson => "poisson",
        })
    }
}

impl FromStr for DesignKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rejective" | "cps" | "conditional-poisson" => Ok(DesignKind::Rejective),
            "sampford" => Ok(DesignKind::Sampford),
            "srswor" => Ok(DesignKind::Srswor),
            "poisson" => Ok(DesignKind::Poisson),
            other => invalid(format!("unknown design {other:?}")),
        }
    }
}

/// A design ready to draw from: the inclusion profile it realizes plus any
/// calibrated working probabilities.
#[derive(Debug, Clone)]
pub struct PreparedDesign {
    kind: DesignKind,
    profile: InclusionProfile,
    working: Option<WorkingProbs>,
}

impl PreparedDesign {
    /// SRSWOR ignores the unequal probabilities in `profile` and realizes
    /// `n / N`; Poisson uses `profile.pi()` as its Bernoulli probabilities.
    pub fn new(kind: DesignKind, profile: InclusionProfile) -> Result<Self> {
        match kind {
            DesignKind::Rejective => {
                let working = calibrate_cp_working_probs(&profile, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
                Ok(Self {
                    kind,
                    profile,
                    working: Some(working),
                })
            }
            DesignKind::Srswor => Ok(Self {
                kind,
                profile: InclusionProfile::uniform(profile.n_units(), profile.n())?,
                working: None,
            }),
            DesignKind::Sampford | DesignKind::Poisson => Ok(Self {
                kind,
                profile,
                working: None,
            }),
        }
    }

    pub fn kind(&self) -> DesignKind {
        self.kind
    }

    pub fn profile(&self) -> &InclusionProfile {
        &self.profile
    }

    pub fn working(&self) -> Option<&WorkingProbs> {
        self.working.as_ref()
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SampleDraw> {
        match self.kind {
            DesignKind::Rejective => {
                let w = self.working.as_ref().expect("rejective design is calibrated");
                draw_rejective(&self.profile, w, rng)
            }
            DesignKind::Sampford => draw_sampford(&self.profile, rng),
            DesignKind::Srswor => draw_srswor(self.profile.n_units(), self.profile.n(), rng),
            DesignKind::Poisson => draw_poisson(self.profile.pi(), rng),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &[f64], b: &[f64]) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn equal_sizes_give_equal_probabilities() {
        let p = InclusionProfile::from_auxiliary(&[1.0, 1.0, 1.0, 1.0], 2, 0.0).unwrap();
        assert_close(p.pi(), &[0.5; 4]);
        assert_eq!(p.d_pi(), 1.0);
    }

    #[test]
    fn proportional_probabilities() {
        let p = InclusionProfile::from_auxiliary(&[1.0, 2.0, 3.0, 4.0], 2, 0.0).unwrap();
        assert_close(p.pi(), &[0.2, 0.4, 0.6, 0.8]);
        assert!(p.capped().is_empty());
    }

    #[test]
    fn iterative_capping() {
        let p = InclusionProfile::from_auxiliary(&[10.0, 1.0, 1.0], 2, 0.0).unwrap();
        assert_close(p.pi(), &[1.0, 0.5, 0.5]);
        assert_eq!(p.capped(), &[0]);
        assert_eq!(p.stochastic_size(), 1);
        assert!((p.pi().iter().sum::<f64>() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn cascading_caps_keep_proportionality() {
        let x = [100.0, 40.0, 3.0, 2.0, 1.0, 1.0, 1.0];
        let p = InclusionProfile::from_auxiliary(&x, 4, 0.0).unwrap();
        assert_eq!(p.capped(), &[0, 1]);
        assert!((p.pi().iter().sum::<f64>() - 4.0).abs() < 1e-12);
        let ratio = p.pi()[2] / x[2];
        for k in 3..7 {
            assert!((p.pi()[k] / x[k] - ratio).abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_lifts_small_units() {
        let p = InclusionProfile::from_auxiliary(&[0.01, 1.0, 1.0, 1.0], 2, 0.5).unwrap();
        assert_close(p.pi(), &[2.0 * 0.5 / 3.5, 2.0 / 3.5, 2.0 / 3.5, 2.0 / 3.5]);
    }

    #[test]
    fn invalid_auxiliary_inputs() {
        assert!(InclusionProfile::from_auxiliary(&[1.0, 1.0], 2, 0.0).is_err());
        assert!(InclusionProfile::from_auxiliary(&[1.0, 0.0, 1.0], 1, 0.0).is_err());
        assert!(InclusionProfile::new(vec![0.5, 0.6], 1).is_err());
    }

    #[test]
    fn sample_draw_membership() {
        let s = SampleDraw::new(vec![3, 0], 5).unwrap();
        assert_eq!(s.indices(), &[0, 3]);
        assert_eq!(s.membership(), &[true, false, false, true, false]);
        assert!(SampleDraw::new(vec![1, 1], 5).is_err());
        assert!(SampleDraw::new(vec![5], 5).is_err());
    }

    #[test]
    fn design_names_parse() {
        for kind in [
            DesignKind::Rejective,
            DesignKind::Sampford,
            DesignKind::Srswor,
            DesignKind::Poisson,
        ] {
            assert_eq!(kind.to_string().parse::<DesignKind>().unwrap(), kind);
        }
        assert!("cube".parse::<DesignKind>().is_err());
    }
}
