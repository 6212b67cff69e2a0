use curveband_core::designs::{
    calibrate_cp_working_probs, conditional_poisson_inclusion, enumerate_design, second_order_cp, second_order_exact,
    DesignDistribution, DesignKind, EnumerableDesign, InclusionProfile, PreparedDesign, SampleDraw, DEFAULT_MAX_ITER,
    DEFAULT_MAX_SUPPORT, DEFAULT_TOL,
};
use curveband_core::estimators::{ht_mean_curve, yates_grundy_surface};
use curveband_core::montecarlo::empirical_covariance_rows;
use curveband_core::population::{generate_synthetic, CurvePopulation, GeneratorConfig, TimeGrid};
use curveband_core::rng::{substream, Purpose};

fn rejective_setup(x: &[f64], n: usize) -> (InclusionProfile, DesignDistribution) {
    let profile = InclusionProfile::from_auxiliary(x, n, 0.0).unwrap();
    let w = calibrate_cp_working_probs(&profile, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
    let dist = enumerate_design(&EnumerableDesign::Rejective { p: w.p }, x.len(), n, DEFAULT_MAX_SUPPORT).unwrap();
    (profile, dist)
}

#[test]
fn recursion_matches_enumeration_for_pairs() {
    let x = [1.0, 2.5, 0.7, 3.1, 1.9, 0.4, 2.2];
    let profile = InclusionProfile::from_auxiliary(&x, 3, 0.0).unwrap();
    let w = calibrate_cp_working_probs(&profile, DEFAULT_TOL, DEFAULT_MAX_ITER).unwrap();
    let dist = enumerate_design(&EnumerableDesign::Rejective { p: w.p.clone() }, 7, 3, DEFAULT_MAX_SUPPORT).unwrap();
    let exact = second_order_exact(&dist);
    let rec = second_order_cp(&w.p, 3).unwrap();
    assert!(exact.max_offdiag_diff(&rec) < 1e-13);
    let pi = conditional_poisson_inclusion(&w.p, 3).unwrap();
    for (a, b) in pi.iter().zip(profile.pi()) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn horvitz_thompson_is_unbiased_with_capped_units() {
    let grid = TimeGrid::uniform(5, 2.0).unwrap();
    let pop = generate_synthetic(9, &grid, &GeneratorConfig::default(), 31).unwrap();
    let mut x = pop.auxiliary().to_vec();
    x[4] = 100.0;
    let pop = pop.with_auxiliary(x.clone()).unwrap();
    let (profile, dist) = rejective_setup(&x, 4);
    assert_eq!(profile.capped(), &[4]);
    let truth = pop.mean_curve();
    for j in 0..5 {
        let e = dist.expectation(|s| {
            let draw = SampleDraw::new(s.to_vec(), 9).unwrap();
            ht_mean_curve(&draw, &profile, &pop).unwrap().values[j]
        });
        assert!((e - truth[j]).abs() < 1e-12 * truth[j].abs().max(1.0));
    }
}

#[test]
fn yates_grundy_is_the_enumerated_covariance() {
    let grid = TimeGrid::uniform(4, 1.0).unwrap();
    let pop = generate_synthetic(8, &grid, &GeneratorConfig::default(), 12).unwrap();
    let (profile, dist) = rejective_setup(pop.auxiliary(), 3);
    let yg = yates_grundy_surface(&second_order_exact(&dist), &profile, &pop).unwrap();
    let est: Vec<(Vec<f64>, f64)> = dist
        .iter()
        .map(|(s, p)| {
            let draw = SampleDraw::new(s.to_vec(), 8).unwrap();
            (ht_mean_curve(&draw, &profile, &pop).unwrap().values, p)
        })
        .collect();
    let mean: Vec<f64> = (0..4).map(|j| est.iter().map(|(v, p)| p * v[j]).sum()).collect();
    for i in 0..4 {
        for j in 0..4 {
            let cov: f64 = est.iter().map(|(v, p)| p * (v[i] - mean[i]) * (v[j] - mean[j])).sum();
            assert!((cov - yg.matrix[(i, j)]).abs() < 1e-10 * cov.abs().max(1e-6), "({i},{j})");
        }
    }
}

fn tiny_population() -> CurvePopulation {
    let grid = TimeGrid::uniform(3, 1.0).unwrap();
    let rows = vec![
        vec![1.0, 2.0, 0.5],
        vec![2.5, 1.0, 1.5],
        vec![0.3, 0.9, 2.0],
        vec![4.0, 3.5, 1.0],
        vec![1.2, 0.2, 0.8],
        vec![2.0, 2.2, 2.4],
        vec![0.7, 1.7, 0.1],
        vec![3.3, 0.6, 1.9],
    ];
    let x = vec![1.0, 2.0, 0.8, 3.5, 0.9, 2.1, 1.1, 2.6];
    CurvePopulation::from_rows(grid, &rows, x).unwrap()
}

#[test]
fn empirical_covariance_converges_to_exact() {
    let pop = tiny_population();
    let (profile, dist) = rejective_setup(pop.auxiliary(), 3);
    let exact = yates_grundy_surface(&second_order_exact(&dist), &profile, &pop).unwrap();
    let design = PreparedDesign::new(DesignKind::Rejective, profile.clone()).unwrap();
    let reps = 100_000;
    let rows: Vec<Vec<f64>> = (0..reps)
        .map(|i| {
            let mut rng = substream(44, Purpose::GammaReplicate, i);
            let s = design.draw(&mut rng).unwrap();
            ht_mean_curve(&s, &profile, &pop).unwrap().values
        })
        .collect();
    let emp = empirical_covariance_rows(pop.grid(), &rows).unwrap();
    let d = pop.n_points();
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / reps as f64).collect();
    for i in 0..d {
        for j in 0..d {
            let prods: Vec<f64> = rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).collect();
            let m = prods.iter().sum::<f64>() / reps as f64;
            let var = prods.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (reps - 1) as f64;
            let se = (var / reps as f64).sqrt();
            let gap = (emp.matrix[(i, j)] - exact.matrix[(i, j)]).abs();
            assert!(gap < 5.0 * se, "({i},{j}) gap {gap} se {se}");
        }
    }
}
