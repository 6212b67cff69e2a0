use std::collections::HashMap;
use std::path::PathBuf;

use curveband_core::bands::{build_band, GaussianSimConfig};
use curveband_core::designs::{
    a5_statistic, calibrate_cp_working_probs, entropy, enumerate_design, kl_divergence, second_order_exact,
    total_variation, tv_from_counts, DesignKind, EnumerableDesign, InclusionProfile, PreparedDesign, A5_MAX_UNITS,
    DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use curveband_core::estimators::{hajek_estimate_surface, ht_mean_curve, CovarianceSurface, HajekOptions, SurfaceKind};
use curveband_core::montecarlo::{rate_study, run_mc_study, McConfig, McReport, RateQuantity, RateStudy, RateTemplate};
use curveband_core::population::{
    generate_synthetic_with_plants, population_profile, write_population, GeneratorConfig, PopulationProfile, TimeGrid,
};
use curveband_core::rng::{substream, Purpose};
use rayon::prelude::*;
use serde::Serialize;

use crate::args::{
    BandsArgs, EstimateArgs, EstimatorFlags, Format, GenPopArgs, McStudyArgs, OracleArgs, QuantityArg, RateArgs,
    SampleArgs,
};
use crate::error::{CliError, CliResult};
use crate::io::{
    csv_bytes, curve_table, json_bytes, pi_table, read_pi, read_population, read_sample, sample_table, surface_table,
};
use crate::manifest::RunRecord;

fn hajek_options(flags: &EstimatorFlags) -> HajekOptions {
    HajekOptions {
        discretized: flags.discretized,
        star: flags.star,
        berger_correction: flags.berger_correction,
    }
}

fn support_limit(max_support: f64) -> CliResult<u128> {
    if !(max_support >= 1.0 && max_support.is_finite()) {
        return Err(CliError::Config(format!("max-support must be at least 1, got {max_support}")));
    }
    Ok(max_support as u128)
}

#[derive(Serialize)]
struct PopulationReport<'a> {
    units: usize,
    grid_points: usize,
    planted_ids: Vec<&'a str>,
    generator: &'a GeneratorConfig,
    profile: PopulationProfile,
}

pub fn gen_pop(a: &GenPopArgs, record: &mut RunRecord) -> CliResult<()> {
    let mut cfg = if a.proportional {
        GeneratorConfig::proportional()
    } else {
        GeneratorConfig::default()
    };
    if let Some(v) = a.size_sigma {
        cfg.size_sigma = v;
    }
    if let Some(v) = a.idio_scale {
        cfg.idio_scale = v;
    }
    if let Some(v) = a.x_noise {
        cfg.x_noise = v;
    }
    if let Some(v) = a.influential_units {
        cfg.influential_units = v;
    }
    if let Some(v) = a.influential_peak {
        cfg.influential_peak = v;
    }
    let grid = TimeGrid::uniform(a.grid_points, a.horizon)?;
    let synth = generate_synthetic_with_plants(a.units, &grid, &cfg, a.seed)?;
    let mut bytes = Vec::new();
    write_population(&synth.population, &mut bytes)?;
    record.write(&a.out, &bytes)?;
    if let Some(path) = &a.report {
        let pop = &synth.population;
        let report = PopulationReport {
            units: pop.n_units(),
            grid_points: pop.n_points(),
            planted_ids: synth.planted.iter().map(|&k| pop.ids()[k].as_str()).collect(),
            generator: &cfg,
            profile: population_profile(pop),
        };
        record.write(path, &json_bytes(&report)?)?;
    }
    Ok(())
}

pub fn sample(a: &SampleArgs, record: &mut RunRecord) -> CliResult<()> {
    let pop = read_population(&a.pop, None, record)?;
    let profile = InclusionProfile::from_auxiliary(pop.auxiliary(), a.n, a.delta)?;
    let design = PreparedDesign::new(a.design, profile)?;
    let mut rng = substream(a.seed, Purpose::Sampling, 0);
    let draw = design.draw(&mut rng)?;
    record.write(&a.out, &sample_table(&pop, &draw)?)?;
    if let Some(path) = &a.pi_out {
        record.write(path, &pi_table(&pop, design.profile())?)?;
    }
    Ok(())
}

pub fn estimate(a: &EstimateArgs, record: &mut RunRecord) -> CliResult<()> {
    let pop = read_population(&a.pop, a.grid.as_deref(), record)?;
    let draw = read_sample(&a.sample, &pop, record)?;
    let profile = read_pi(&a.pi, &pop, record)?;
    let mean = ht_mean_curve(&draw, &profile, &pop)?;
    let cov = hajek_estimate_surface(&draw, &profile, &pop, hajek_options(&a.estimator))?;
    record.write(&a.out_mean, &curve_table(pop.grid(), &[("mean", &mean.values)])?)?;
    record.write(&a.out_cov, &surface_table(&cov)?)?;
    Ok(())
}

#[derive(Serialize)]
struct BandSidecar<'a> {
    c_alpha: f64,
    alpha: f64,
    reps: usize,
    seed: u64,
    n: usize,
    degenerate: bool,
    excluded_points: &'a [usize],
}

fn sidecar_path(out: &std::path::Path) -> PathBuf {
    let p = out.with_extension("json");
    if p == out {
        let mut name = out.as_os_str().to_owned();
        name.push(".json");
        PathBuf::from(name)
    } else {
        p
    }
}

pub fn bands(a: &BandsArgs, record: &mut RunRecord) -> CliResult<()> {
    let pop = read_population(&a.pop, a.grid.as_deref(), record)?;
    let draw = read_sample(&a.sample, &pop, record)?;
    let profile = read_pi(&a.pi, &pop, record)?;
    let mean = ht_mean_curve(&draw, &profile, &pop)?;
    let cov = hajek_estimate_surface(&draw, &profile, &pop, hajek_options(&a.estimator))?;
    let cfg = GaussianSimConfig {
        replications: a.reps,
        alpha: a.alpha,
        eigen_floor: a.eigen_floor,
        sigma_floor: a.sigma_floor,
        seed: a.seed,
    };
    let band = build_band(&mean, &cov, &cfg)?;
    let table = curve_table(
        pop.grid(),
        &[
            ("mean", &band.mean),
            ("sigma_hat", &band.sigma_hat),
            ("lower", &band.lower),
            ("upper", &band.upper),
        ],
    )?;
    record.write(&a.out, &table)?;
    let sidecar = BandSidecar {
        c_alpha: band.c_alpha,
        alpha: a.alpha,
        reps: a.reps,
        seed: a.seed,
        n: band.n,
        degenerate: band.degenerate,
        excluded_points: &band.excluded_points,
    };
    record.write(&sidecar_path(&a.out), &json_bytes(&sidecar)?)?;
    Ok(())
}

#[derive(Serialize)]
struct CoverageSummary {
    replicates: usize,
    coverage: Option<f64>,
    degenerate: usize,
    mean_c_alpha: Option<f64>,
}

#[derive(Serialize)]
struct McSummary<'a> {
    design: DesignKind,
    n: usize,
    d_pi: f64,
    reps_gamma: usize,
    reps_risk: usize,
    rmse: f64,
    rb2: f64,
    rv: f64,
    risk_p05: f64,
    risk_q1: f64,
    risk_median: f64,
    risk_q3: f64,
    risk_p95: f64,
    median_replicate: usize,
    excluded_points: &'a [usize],
    mean_gap_in_se: f64,
    coverage: Option<CoverageSummary>,
}

fn summarize<'a>(r: &'a McReport, cfg: &McConfig) -> McSummary<'a> {
    let q = r.risk.quantiles;
    McSummary {
        design: r.design,
        n: r.n,
        d_pi: r.d_pi,
        reps_gamma: cfg.reps_gamma,
        reps_risk: cfg.reps_risk,
        rmse: r.risk.rmse,
        rb2: r.risk.rb2,
        rv: r.risk.rv,
        risk_p05: q.p05,
        risk_q1: q.q1,
        risk_median: q.median,
        risk_q3: q.q3,
        risk_p95: q.p95,
        median_replicate: r.risk.median_replicate,
        excluded_points: &r.risk.excluded_points,
        mean_gap_in_se: r.mean_gap_in_se,
        coverage: r.coverage.as_ref().map(|c| CoverageSummary {
            replicates: c.outcomes.len(),
            coverage: c.coverage,
            degenerate: c.degenerate,
            mean_c_alpha: c.mean_c_alpha,
        }),
    }
}

fn difference(a: &CovarianceSurface, b: &CovarianceSurface) -> CovarianceSurface {
    CovarianceSurface {
        grid: a.grid.clone(),
        matrix: &a.matrix - &b.matrix,
        kind: SurfaceKind::Empirical,
    }
}

fn opt_string(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn mc_study(a: &McStudyArgs, record: &mut RunRecord) -> CliResult<()> {
    let pop = read_population(&a.pop, a.grid.as_deref(), record)?;
    if a.n.is_empty() {
        return Err(CliError::Config("--n needs at least one sample size".into()));
    }
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for &n in &a.n {
        let cfg = McConfig {
            design: a.design,
            n,
            delta: a.delta,
            reps_gamma: a.reps_gamma,
            reps_risk: a.reps_risk,
            reps_coverage: a.reps_coverage,
            estimator: hajek_options(&a.estimator),
            band: GaussianSimConfig {
                replications: a.band_reps,
                alpha: a.alpha,
                ..GaussianSimConfig::default()
            },
            master_seed: a.seed,
        };
        let report = run_mc_study(&pop, &cfg)?;
        let dir = &a.out_dir;
        record.write(&dir.join(format!("gamma_emp_n{n}.csv")), &surface_table(&report.gamma_emp)?)?;
        record.write(&dir.join(format!("gamma_hajek_n{n}.csv")), &surface_table(&report.gamma_hajek)?)?;
        record.write(
            &dir.join(format!("approx_error_n{n}.csv")),
            &surface_table(&difference(&report.gamma_emp, &report.gamma_hajek))?,
        )?;
        record.write(
            &dir.join(format!("estimation_error_n{n}.csv")),
            &surface_table(&difference(&report.gamma_emp, &report.median_surface))?,
        )?;
        let summary = summarize(&report, &cfg);
        record.write(&dir.join(format!("report_n{n}.json")), &json_bytes(&summary)?)?;
        let cov = summary.coverage.as_ref();
        rows.push(vec![
            n.to_string(),
            summary.rmse.to_string(),
            summary.rb2.to_string(),
            summary.rv.to_string(),
            summary.risk_p05.to_string(),
            summary.risk_q1.to_string(),
            summary.risk_median.to_string(),
            summary.risk_q3.to_string(),
            summary.risk_p95.to_string(),
            opt_string(cov.and_then(|c| c.coverage)),
        ]);
        summaries.push(serde_json::to_value(&summary)?);
    }
    match a.format {
        Format::Csv => {
            let header = ["n", "rmse", "rb2", "rv", "p05", "q1", "median", "q3", "p95", "coverage"];
            record.write(&a.out_dir.join("summary.csv"), &csv_bytes(&header, rows)?)?;
        }
        Format::Json => record.write(&a.out_dir.join("summary.json"), &json_bytes(&summaries)?)?,
    }
    Ok(())
}

#[derive(Serialize)]
struct OracleReport {
    design: DesignKind,
    #[serde(rename = "N")]
    big_n: usize,
    n: usize,
    pi: Vec<f64>,
    support_size: usize,
    /// Sup-norm gap between enumerated first-order and target probabilities.
    pi_gap: f64,
    draws: usize,
    /// Empirical sample frequencies against the enumerated distribution.
    tv_distance: f64,
    entropy: f64,
    entropy_rejective: f64,
    kl_vs_rejective: f64,
    tv_vs_rejective: f64,
    pinsker_bound: f64,
    a5: Option<f64>,
}

pub fn oracle_check(a: &OracleArgs, record: &mut RunRecord) -> CliResult<()> {
    let limit = support_limit(a.max_support)?;
    let x: Vec<f64> = if a.x.is_empty() {
        (1..=a.big_n).map(|k| k as f64).collect()
    } else {
        (0..a.big_n).map(|k| a.x[k % a.x.len()]).collect()
    };
    let profile = match a.design {
        DesignKind::Srswor => InclusionProfile::uniform(a.big_n, a.n)?,
        DesignKind::Poisson => {
            return Err(CliError::Config("oracle-check needs a fixed-size design".into()));
        }
        _ => InclusionProfile::from_auxiliary(&x, a.n, 0.0)?,
    };
    let working = calibrate_cp_working_probs(&profile, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let rejective = enumerate_design(&EnumerableDesign::Rejective { p: working.p }, a.big_n, a.n, limit)?;
    let dist = match a.design {
        DesignKind::Rejective => rejective.clone(),
        DesignKind::Sampford => enumerate_design(
            &EnumerableDesign::Sampford {
                pi: profile.pi().to_vec(),
            },
            a.big_n,
            a.n,
            limit,
        )?,
        _ => enumerate_design(&EnumerableDesign::Srswor, a.big_n, a.n, limit)?,
    };
    let pi_gap = dist
        .first_order()
        .iter()
        .zip(profile.pi())
        .map(|(e, t)| (e - t).abs())
        .fold(0.0, f64::max);

    let design = PreparedDesign::new(a.design, profile.clone())?;
    let samples: Vec<Vec<usize>> = (0..a.draws)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(a.seed, Purpose::OracleDraws, i as u64);
            design.draw(&mut rng).map(|s| s.indices().to_vec())
        })
        .collect::<Result<_, _>>()?;
    let mut counts: HashMap<Vec<usize>, u64> = HashMap::new();
    for s in samples {
        *counts.entry(s).or_insert(0) += 1;
    }
    let tv_distance = if a.draws > 0 {
        tv_from_counts(&counts, &dist)
    } else {
        f64::NAN
    };
    let a5 = if (4..=A5_MAX_UNITS).contains(&a.big_n) {
        Some(a5_statistic(&dist, &second_order_exact(&dist))?)
    } else {
        None
    };
    let kl = kl_divergence(&dist, &rejective);
    let report = OracleReport {
        design: a.design,
        big_n: a.big_n,
        n: a.n,
        pi: profile.pi().to_vec(),
        support_size: dist.support().len(),
        pi_gap,
        draws: a.draws,
        tv_distance,
        entropy: entropy(&dist),
        entropy_rejective: entropy(&rejective),
        kl_vs_rejective: kl,
        tv_vs_rejective: total_variation(&dist, &rejective),
        pinsker_bound: (kl / 2.0).sqrt(),
        a5,
    };
    let bytes = match a.format {
        Format::Json => json_bytes(&report)?,
        Format::Csv => {
            let value = serde_json::to_value(&report)?;
            let rows = value
                .as_object()
                .expect("report is an object")
                .iter()
                .filter(|(k, _)| k.as_str() != "pi")
                .map(|(k, v)| vec![k.clone(), v.as_str().map(String::from).unwrap_or_else(|| v.to_string())]);
            csv_bytes(&["key", "value"], rows)?
        }
    };
    record.emit(a.out.as_deref(), &bytes)
}

pub fn rate(a: &RateArgs, record: &mut RunRecord) -> CliResult<()> {
    let limit = support_limit(a.max_support)?;
    let template = RateTemplate::with_pattern(a.pattern.clone())?;
    let sizes: Vec<(usize, usize)> = a.sizes.iter().map(|&n_units| (n_units, n_units / 2)).collect();
    let quantities = match a.quantity {
        QuantityArg::A5 => vec![RateQuantity::A5],
        QuantityArg::HajekPiklError => vec![RateQuantity::HajekPiklError],
        QuantityArg::VarEstimatorMse => vec![RateQuantity::VarEstimatorMse],
        QuantityArg::All => vec![
            RateQuantity::HajekPiklError,
            RateQuantity::A5,
            RateQuantity::VarEstimatorMse,
        ],
    };
    let studies: Vec<RateStudy> = quantities
        .into_iter()
        .map(|q| rate_study(a.design, &template, &sizes, q, limit))
        .collect::<Result<_, _>>()?;
    let bytes = match a.format {
        Format::Json => json_bytes(&studies)?,
        Format::Csv => {
            let mut rows = Vec::new();
            for s in &studies {
                let name = serde_json::to_value(s.quantity)?;
                let name = name.as_str().unwrap_or_default().to_string();
                for p in &s.points {
                    rows.push(vec![
                        name.clone(),
                        p.n_units.to_string(),
                        p.n.to_string(),
                        p.d_pi.to_string(),
                        p.value.to_string(),
                        p.scaled.to_string(),
                        s.slope.to_string(),
                    ]);
                }
            }
            csv_bytes(&["quantity", "N", "n", "d_pi", "value", "scaled", "slope"], rows)?
        }
    };
    record.emit(a.out.as_deref(), &bytes)
}
