//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use curveband_core::bands::{simulate_sup_quantile, GaussianSimConfig};
use curveband_core::designs::{
    calibrate_cp_working_probs, conditional_poisson_inclusion, entropy, enumerate_design, kl_divergence,
    second_order_exact, total_variation, tv_from_counts, DesignDistribution, DesignKind, EnumerableDesign,
    InclusionProfile, PreparedDesign, SampleDraw, DEFAULT_MAX_ITER, DEFAULT_MAX_SUPPORT, DEFAULT_TOL,
};
use curveband_core::estimators::{
    hajek_estimate_surface, hajek_population_surface, ht_mean_curve, yates_grundy_surface, CovarianceSurface,
    HajekOptions, SurfaceKind,
};
use curveband_core::montecarlo::{rate_study, run_mc_study, McConfig, RateQuantity, RateTemplate};
use curveband_core::population::{
    generate_synthetic, generate_synthetic_with_plants, CurvePopulation, GeneratorConfig, TimeGrid,
};
use curveband_core::rng::{substream, Purpose};
use nalgebra::DMatrix;
use serde_json::Value;
use statrs::distribution::{ContinuousCDF, Normal};

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rejective(x: &[f64], n: usize) -> (InclusionProfile, Vec<f64>, DesignDistribution) {
    let profile = InclusionProfile::from_auxiliary(x, n, 0.0).unwrap();
    let w = calibrate_cp_working_probs(&profile, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
    let dist = enumerate_design(&EnumerableDesign::Rejective { p: w.p.clone() }, x.len(), n, DEFAULT_MAX_SUPPORT)
        .unwrap();
    (profile, w.p, dist)
}

fn sup_abs(a: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter().map(f64::abs).fold(0.0, f64::max)
}

fn exact_oracle() -> Outcome {
    let started = Instant::now();
    let (big_n, n, d) = (8, 3, 6);
    let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
    let (profile, p, dist) = rejective(&x, n);
    let pi = profile.pi();

    let calib = sup_abs(conditional_poisson_inclusion(&p, n).unwrap().iter().zip(pi).map(|(a, b)| a - b));
    check!(calib <= 1e-10, "calibrated working probabilities miss pi by {calib:e}");

    let total = dist.probs().iter().sum::<f64>();
    check!((total - 1.0).abs() <= 1e-12, "probabilities sum to 1 + {:e}", total - 1.0);
    let first = sup_abs(dist.first_order().iter().zip(pi).map(|(a, b)| a - b));
    check!(first <= 1e-12, "first-order margins miss pi by {first:e}");
    let pikl = second_order_exact(&dist);
    let pair_gap = sup_abs((0..big_n).map(|k| {
        let s: f64 = (0..big_n).filter(|&l| l != k).map(|l| pikl.get(k, l)).sum();
        s - (n as f64 - 1.0) * pi[k]
    }));
    check!(pair_gap <= 1e-12, "pair sums miss (n-1) pi_k by {pair_gap:e}");

    let grid = TimeGrid::uniform(d, 1.0).unwrap();
    let pop = generate_synthetic(big_n, &grid, &GeneratorConfig::default(), 2024)
        .unwrap()
        .with_auxiliary(x.to_vec())
        .unwrap();
    let truth = pop.mean_curve();
    let estimates: Vec<(Vec<f64>, f64)> = dist
        .iter()
        .map(|(s, prob)| {
            let draw = SampleDraw::new(s.to_vec(), big_n).unwrap();
            (ht_mean_curve(&draw, &profile, &pop).unwrap().values, prob)
        })
        .collect();
    let mut bias: f64 = 0.0;
    let mut var_gap: f64 = 0.0;
    let yg = yates_grundy_surface(&pikl, &profile, &pop).unwrap();
    for j in 0..d {
        let mean: f64 = estimates.iter().map(|(v, p)| p * v[j]).sum();
        bias = bias.max((mean - truth[j]).abs());
        let var: f64 = estimates.iter().map(|(v, p)| p * (v[j] - truth[j]).powi(2)).sum();
        var_gap = var_gap.max((yg.matrix[(j, j)] - var).abs());
    }
    check!(bias <= 1e-12, "HT mean is off its expectation by {bias:e}");
    check!(var_gap <= 1e-12, "Yates-Grundy diagonal is off the enumerated variance by {var_gap:e}");
    let elapsed = started.elapsed();
    check!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!(
        "calib {calib:.1e}, margins {first:.1e}, pairs {pair_gap:.1e}, bias {bias:.1e}, var {var_gap:.1e}, {elapsed:.1?}"
    ))
}

fn all_zero(s: &CovarianceSurface) -> bool {
    s.matrix.iter().all(|&v| v == 0.0)
}

fn proportional_zeros() -> Outcome {
    // Dyadic pi and levels keep Y/pi exact.
    let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 5.0, 6.0];
    let n = 4;
    let levels = [0.5, 1.25, 3.0, 0.75, 2.5];
    let profile = InclusionProfile::from_auxiliary(&x, n, 0.0).unwrap();
    let rows: Vec<Vec<f64>> = profile.pi().iter().map(|p| levels.iter().map(|c| c * p).collect()).collect();
    let pop = CurvePopulation::from_rows(TimeGrid::uniform(levels.len(), 1.0).unwrap(), &rows, x.to_vec()).unwrap();
    check!(all_zero(&hajek_population_surface(&profile, &pop).unwrap()), "population surface is not zero");
    let mut samples = 0;
    for (s, _) in rejective(&x, n).2.iter() {
        let draw = SampleDraw::new(s.to_vec(), x.len()).unwrap();
        for star in [false, true] {
            let opts = HajekOptions {
                star,
                ..HajekOptions::default()
            };
            let est = hajek_estimate_surface(&draw, &profile, &pop, opts).unwrap();
            check!(all_zero(&est), "estimate (star = {star}) is not zero on sample {s:?}");
        }
        samples += 1;
    }
    Ok(format!("exact zeros on the population surface and {samples} samples x 2 estimators"))
}

fn rate_checks() -> Outcome {
    let started = Instant::now();
    let template = RateTemplate::with_pattern(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let sizes = [(8, 4), (12, 6), (16, 8)];
    let run = |q| rate_study(DesignKind::Rejective, &template, &sizes, q, DEFAULT_MAX_SUPPORT).unwrap();
    let pikl = run(RateQuantity::HajekPiklError);
    let a5 = run(RateQuantity::A5);
    let mse = run(RateQuantity::VarEstimatorMse);
    check!(pikl.slope <= -1.5, "pair-probability error slope {:.3} > -1.5", pikl.slope);
    check!(a5.slope <= -0.8, "a5 slope {:.3} > -0.8", a5.slope);
    let scaled: Vec<f64> = mse.points.iter().map(|p| p.scaled).collect();
    check!(scaled.windows(2).all(|w| w[1] <= w[0]), "n^3 MSE increases: {scaled:?}");
    let elapsed = started.elapsed();
    check!(elapsed < Duration::from_secs(600), "took {elapsed:?}");
    Ok(format!(
        "pikl slope {:.3}, a5 slope {:.3}, n^3 MSE {:?}",
        pikl.slope,
        a5.slope,
        scaled.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>()
    ))
}

fn pinsker() -> Outcome {
    let mut worst: f64 = f64::INFINITY;
    for x in [vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![1.0, 1.0, 1.5, 4.0, 7.0, 9.0]] {
        let (profile, _, rej) = rejective(&x, 2);
        let pi = profile.pi().to_vec();
        let samp = enumerate_design(&EnumerableDesign::Sampford { pi }, 6, 2, DEFAULT_MAX_SUPPORT).unwrap();
        let tv = total_variation(&samp, &rej);
        for kl in [kl_divergence(&samp, &rej), kl_divergence(&rej, &samp)] {
            let bound = (kl / 2.0).sqrt();
            check!(tv <= bound, "x = {x:?}: TV {tv:e} exceeds sqrt(KL/2) = {bound:e}");
            worst = worst.min(bound - tv);
        }
        let (h_rej, h_samp) = (entropy(&rej), entropy(&samp));
        check!(h_rej >= h_samp, "x = {x:?}: rejective entropy {h_rej} < Sampford entropy {h_samp}");
    }
    Ok(format!("smallest slack sqrt(KL/2) - TV = {worst:.2e}, rejective entropy maximal"))
}

fn sampler_fidelity() -> Outcome {
    let draws = 1_000_000;
    let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let (profile, _, rej) = rejective(&x, 2);
    let samp = enumerate_design(
        &EnumerableDesign::Sampford {
            pi: profile.pi().to_vec(),
        },
        6,
        2,
        DEFAULT_MAX_SUPPORT,
    )
    .unwrap();
    let srs = enumerate_design(&EnumerableDesign::Srswor, 6, 2, DEFAULT_MAX_SUPPORT).unwrap();
    let mut report = Vec::new();
    for (kind, dist, prof) in [
        (DesignKind::Rejective, &rej, profile.clone()),
        (DesignKind::Sampford, &samp, profile.clone()),
        (DesignKind::Srswor, &srs, InclusionProfile::uniform(6, 2).unwrap()),
    ] {
        let design = PreparedDesign::new(kind, prof).unwrap();
        let mut counts: HashMap<Vec<usize>, u64> = HashMap::new();
        for i in 0..draws {
            let mut rng = substream(99, Purpose::OracleDraws, i);
            *counts.entry(design.draw(&mut rng).unwrap().indices().to_vec()).or_insert(0) += 1;
        }
        let tv = tv_from_counts(&counts, dist);
        check!(tv < 0.01, "{kind:?}: TV {tv:e} at {draws} draws");
        report.push(format!("{kind:?} {tv:.2e}"));
    }
    Ok(format!("TV at 1e6 draws: {}", report.join(", ")))
}

fn diagonal_surface(d: usize) -> CovarianceSurface {
    let scales: Vec<f64> = (0..d).map(|j| 0.5 + j as f64).collect();
    CovarianceSurface {
        grid: TimeGrid::uniform(d, 1.0).unwrap(),
        matrix: DMatrix::from_diagonal(&nalgebra::DVector::from_vec(scales)),
        kind: SurfaceKind::Empirical,
    }
}

fn band_oracles() -> Outcome {
    let alpha = 0.05;
    let cfg = GaussianSimConfig {
        replications: 100_000,
        alpha,
        seed: 17,
        ..GaussianSimConfig::default()
    };
    // Two perfectly correlated points: the supremum is a single |Z|.
    let rank_one = CovarianceSurface {
        grid: TimeGrid::uniform(2, 1.0).unwrap(),
        matrix: DMatrix::from_element(2, 2, 2.5),
        kind: SurfaceKind::Empirical,
    };
    let scalar = simulate_sup_quantile(&rank_one, 40, &cfg).unwrap().c_alpha;
    check!((scalar - 1.960).abs() <= 0.02, "scalar c = {scalar:.4}");
    let normal = Normal::standard();
    let mut parts = vec![format!("scalar {scalar:.4}")];
    for d in [5, 20] {
        let c = simulate_sup_quantile(&diagonal_surface(d), 40, &cfg).unwrap().c_alpha;
        let exact = normal.inverse_cdf((1.0 + (1.0 - alpha).powf(1.0 / d as f64)) / 2.0);
        check!((c - exact).abs() <= 0.03, "D = {d}: c = {c:.4}, closed form {exact:.4}");
        parts.push(format!("D={d} {c:.4} vs {exact:.4}"));
    }
    Ok(parts.join(", "))
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_curveband")
}

fn cli(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn curveband")
}

fn cli_ok(args: &[&str]) -> Result<Output, String> {
    let out = cli(args);
    if out.status.success() {
        Ok(out)
    } else {
        Err(format!(
            "curveband {} exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

fn coverage() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let pop = dir.path().join("pop.csv");
    let out = dir.path().join("study");
    cli_ok(&["gen-pop", "--units", "2000", "--grid-points", "50", "--seed", "11", "--out", s(&pop)])?;
    let started = Instant::now();
    cli_ok(&[
        "--threads", "8", "mc-study", "--pop", s(&pop), "--design", "rejective", "--n", "200", "--alpha", "0.05",
        "--reps-coverage", "1000", "--band-reps", "2000", "--reps-gamma", "200", "--reps-risk", "200", "--seed", "5",
        "--out-dir", s(&out), "--format", "json",
    ])?;
    let elapsed = started.elapsed();
    let report = read_json(&out.join("report_n200.json"));
    let cov = report["coverage"]["coverage"]
        .as_f64()
        .ok_or_else(|| format!("no coverage in report: {report}"))?;
    check!((0.92..=0.97).contains(&cov), "coverage {cov}");
    check!(elapsed <= Duration::from_secs(900), "took {elapsed:?}");
    let before = snapshot(&out.join("manifest.json"))?;
    cli_ok(&["--threads", "1", "replay", "--from", s(&out.join("manifest.json"))])?;
    let after = snapshot(&out.join("manifest.json"))?;
    check!(before == after, "replayed outputs differ from the original run");
    Ok(format!("coverage {cov:.3} over 1000 replicates in {elapsed:.1?}, replay identical"))
}

fn table_pattern() -> Outcome {
    let grid = TimeGrid::uniform(50, 1.0).unwrap();
    let plain = generate_synthetic(2000, &grid, &GeneratorConfig::default(), 11).unwrap();
    let planted_cfg = GeneratorConfig {
        influential_units: 3,
        ..GeneratorConfig::default()
    };
    let planted = generate_synthetic_with_plants(2000, &grid, &planted_cfg, 11).unwrap().population;
    let mut lines = Vec::new();
    for (label, pop, spiky) in [("plain", &plain, false), ("planted", &planted, true)] {
        let mut medians = Vec::new();
        for n in [50, 100, 200] {
            let cfg = McConfig {
                n,
                reps_gamma: 10_000,
                reps_risk: 2000,
                master_seed: 5,
                ..McConfig::default()
            };
            let r = run_mc_study(pop, &cfg).unwrap().risk;
            let med = r.quantiles.median;
            check!(r.rb2 < 0.1 * med, "{label} n = {n}: RB2 {:.3e} >= 0.1 x median R {med:.3e}", r.rb2);
            if spiky {
                check!(r.rmse > 3.0 * med, "{label} n = {n}: RMSE {:.3e} <= 3 x median R {med:.3e}", r.rmse);
            }
            medians.push(med);
            lines.push(format!("{label} n={n} med {med:.3e} RMSE {:.3e} RB2 {:.1e}", r.rmse, r.rb2));
        }
        check!(
            medians.windows(2).all(|w| w[1] < w[0]),
            "{label}: median R not strictly decreasing: {medians:?}"
        );
    }
    Ok(lines.join("; "))
}

/// Bytes of every output listed in a manifest, keyed by path.
fn snapshot(manifest: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>, String> {
    let m = read_json(manifest);
    m["outputs"]
        .as_array()
        .ok_or("manifest has no outputs")?
        .iter()
        .filter(|o| o["path"] != "-")
        .map(|o| {
            let p = PathBuf::from(o["path"].as_str().unwrap());
            std::fs::read(&p).map(|b| (p, b)).map_err(|e| e.to_string())
        })
        .collect()
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let (pop, smp, pi, band) = (p("pop.csv"), p("s.csv"), p("pi.csv"), p("band.csv"));
    let (mean, cov, study) = (p("mean.csv"), p("cov.csv"), p("study"));
    let (oracle_m, rate_m) = (p("oracle.manifest.json"), p("rate.manifest.json"));
    let runs: Vec<(Vec<&str>, PathBuf)> = vec![
        (
            vec!["gen-pop", "--units", "300", "--grid-points", "12", "--seed", "3", "--influential-units", "2", "--out", s(&pop)],
            p("pop.csv.manifest.json"),
        ),
        (
            vec!["sample", "--pop", s(&pop), "--design", "sampford", "--n", "30", "--seed", "4", "--out", s(&smp), "--pi-out", s(&pi)],
            p("s.csv.manifest.json"),
        ),
        (
            vec!["estimate", "--pop", s(&pop), "--sample", s(&smp), "--pi", s(&pi), "--out-mean", s(&mean), "--out-cov", s(&cov)],
            p("mean.csv.manifest.json"),
        ),
        (
            vec!["bands", "--pop", s(&pop), "--sample", s(&smp), "--pi", s(&pi), "--seed", "6", "--reps", "500", "--out", s(&band)],
            p("band.csv.manifest.json"),
        ),
        (
            vec![
                "mc-study", "--pop", s(&pop), "--n", "20,40", "--reps-gamma", "300", "--reps-risk", "200",
                "--reps-coverage", "40", "--band-reps", "200", "--seed", "8", "--out-dir", s(&study),
            ],
            study.join("manifest.json"),
        ),
        (
            vec!["--manifest", s(&oracle_m), "oracle-check", "--design", "rejective", "--N", "7", "--n", "3", "--seed", "9", "--draws", "5000"],
            oracle_m.clone(),
        ),
        (vec!["--manifest", s(&rate_m), "rate-study", "--design", "sampford"], rate_m.clone()),
    ];
    let mut checked = 0;
    for (args, manifest) in &runs {
        let mut full = vec!["--threads", "4"];
        full.extend(args.iter().copied());
        let first = cli_ok(&full)?;
        let before = snapshot(manifest)?;
        for threads in ["1", "3"] {
            let again = cli_ok(&["--threads", threads, "replay", "--from", s(manifest)])?;
            check!(again.stdout == first.stdout, "{}: stdout differs at {threads} threads", args[0]);
            check!(snapshot(manifest)? == before, "{}: outputs differ at {threads} threads", args[0]);
        }
        checked += 1;
    }
    Ok(format!("{checked} commands replayed byte-identically at 1 and 3 threads"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("exact oracle (rejective, N=8, n=3)", exact_oracle),
        ("proportional population gives zero surfaces", proportional_zeros),
        ("rate checks under doubling", rate_checks),
        ("Pinsker bound and maximal entropy", pinsker),
        ("sampler fidelity at 1e6 draws", sampler_fidelity),
        ("band quantile oracles", band_oracles),
        ("simultaneous coverage", coverage),
        ("risk pattern across sample sizes", table_pattern),
        ("replay determinism across thread counts", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("PASS {}: {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {}: {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
