use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use rand::Rng;

use super::{InclusionProfile, SampleDraw, WorkingProbs};
use crate::error::{invalid, Error, Result};

/// Rejection loops give up after this many attempts.
pub const MAX_ATTEMPTS: u64 = 1_000_000;

/// Rejective sampling: independent Bernoulli(p_k) draws over the stochastic
/// units, repeated until exactly `n - #capped` are selected. Capped units
/// are always included.
pub fn draw_rejective<R: Rng + ?Sized>(
    profile: &InclusionProfile,
    working: &WorkingProbs,
    rng: &mut R,
) -> Result<SampleDraw> {
    let big_n = profile.n_units();
    if working.p.len() != big_n {
        return invalid(format!(
            "{} working probabilities for {big_n} units",
            working.p.len()
        ));
    }
    let units = profile.stochastic_units();
    let m = profile.stochastic_size();
    let mut chosen = Vec::with_capacity(profile.n());
    for _ in 0..MAX_ATTEMPTS {
        chosen.clear();
        let mut overflow = false;
        for &k in &units {
            if rng.random::<f64>() < working.p[k] {
                chosen.push(k);
                if chosen.len() > m {
                    overflow = true;
                    break;
                }
            }
        }
        if !overflow && chosen.len() == m {
            chosen.extend_from_slice(profile.capped());
            return SampleDraw::new(chosen, big_n);
        }
    }
    Err(Error::AttemptsExceeded {
        attempts: MAX_ATTEMPTS,
    })
}

/// Sampford sampling: one unit with probability `pi_k / n`, the rest with
/// replacement proportional to `pi_k / (1 - pi_k)`; the draw is kept only if
/// all units are distinct. Capped units are included outright.
pub fn draw_sampford<R: Rng + ?Sized>(profile: &InclusionProfile, rng: &mut R) -> Result<SampleDraw> {
    let big_n = profile.n_units();
    let units = profile.stochastic_units();
    let m = profile.stochastic_size();
    if m == 0 {
        return SampleDraw::new(profile.capped().to_vec(), big_n);
    }
    let pi: Vec<f64> = units.iter().map(|&k| profile.pi()[k]).collect();
    let first = WeightedIndex::new(&pi).map_err(|e| Error::Numeric(format!("sampford weights: {e}")))?;
    let odds: Vec<f64> = pi.iter().map(|p| p / (1.0 - p)).collect();
    let rest = WeightedIndex::new(&odds).map_err(|e| Error::Numeric(format!("sampford weights: {e}")))?;

    let mut taken = vec![false; units.len()];
    let mut chosen = Vec::with_capacity(m);
    for _ in 0..MAX_ATTEMPTS {
        for &i in &chosen {
            taken[i] = false;
        }
        chosen.clear();
        let i = first.sample(rng);
        taken[i] = true;
        chosen.push(i);
        let mut distinct = true;
        for _ in 1..m {
            let j = rest.sample(rng);
            if taken[j] {
                distinct = false;
                break;
            }
            taken[j] = true;
            chosen.push(j);
        }
        if distinct {
            let mut indices: Vec<usize> = chosen.iter().map(|&i| units[i]).collect();
            indices.extend_from_slice(profile.capped());
            return SampleDraw::new(indices, big_n);
        }
    }
    Err(Error::AttemptsExceeded {
        attempts: MAX_ATTEMPTS,
    })
}

/// Simple random sampling without replacement.
pub fn draw_srswor<R: Rng + ?Sized>(n_units: usize, n: usize, rng: &mut R) -> Result<SampleDraw> {
    if n > n_units {
        return invalid(format!("sample size {n} exceeds population size {n_units}"));
    }
    SampleDraw::new(index::sample(rng, n_units, n).into_vec(), n_units)
}

/// Poisson sampling: independent Bernoulli(p_k); the size is random.
pub fn draw_poisson<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> Result<SampleDraw> {
    if let Some(k) = p.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return invalid(format!("probability of unit {k} outside [0, 1]: {}", p[k]));
    }
    let indices = (0..p.len())
        .filter(|&k| rng.random::<f64>() < p[k])
        .collect();
    SampleDraw::new(indices, p.len())
}
