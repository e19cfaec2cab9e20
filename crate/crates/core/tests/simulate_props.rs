use frrr::model::{Dataset, FamilySpec};
use frrr::simulate::{
    compute_kappa, generate_dataset, make_design, make_low_rank_truth, prediction_error, DesignMode, SyntheticTruth,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn fixed_truth(b0: DMatrix<f64>) -> SyntheticTruth<f64> {
    let rank = if b0.norm() == 0.0 { 0 } else { 1 };
    SyntheticTruth { b0, rank, scale: 1.0, eta_range: (0.0, 0.0), theta_clip_events: 0 }
}

#[test]
fn iid_design_columns_are_uncorrelated() {
    let x: DMatrix<f64> = make_design(10_000, 2, DesignMode::Iid, &mut rng(1)).unwrap();
    let (a, b) = (x.column(0), x.column(1));
    let (ma, mb) = (a.mean(), b.mean());
    let cov: f64 = a.iter().zip(b.iter()).map(|(u, v)| (u - ma) * (v - mb)).sum();
    let va: f64 = a.iter().map(|u| (u - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|v| (v - mb).powi(2)).sum();
    assert!((cov / (va * vb).sqrt()).abs() < 0.03);
}

#[test]
fn gaussian_noise_is_centred() {
    let mut r = rng(2);
    let x: DMatrix<f64> = make_design(25_000, 3, DesignMode::Iid, &mut r).unwrap();
    let mut truth = make_low_rank_truth(3, 4, 2, 0.5, &mut r).unwrap();
    let fam = FamilySpec::gaussian(1.0).unwrap();
    let data = generate_dataset(&x, &mut truth, &fam, &mut r).unwrap();
    let resid = data.y() - &x * &truth.b0;
    assert_eq!(resid.len(), 100_000);
    assert!(resid.mean().abs() < 0.02);
    assert_eq!(truth.theta_clip_events, 0);
}

#[test]
fn logit_with_zero_truth_is_a_fair_coin() {
    let mut r = rng(3);
    let x: DMatrix<f64> = make_design(2500, 3, DesignMode::Iid, &mut r).unwrap();
    let mut truth = fixed_truth(DMatrix::zeros(3, 4));
    let data = generate_dataset(&x, &mut truth, &FamilySpec::bernoulli_logit(), &mut r).unwrap();
    assert!((data.y().mean() - 0.5).abs() < 0.01);
    assert_eq!(truth.eta_range, (0.0, 0.0));
}

#[test]
fn poisson_single_cell_mean_is_one() {
    let mut r = rng(4);
    let fam = FamilySpec::poisson_log();
    let x = DMatrix::from_element(1, 1, 1.0);
    let mut truth = fixed_truth(DMatrix::zeros(1, 1));
    let mut total = 0.0;
    for _ in 0..10_000 {
        total += generate_dataset(&x, &mut truth, &fam, &mut r).unwrap().y()[(0, 0)];
    }
    assert!((total / 10_000.0 - 1.0).abs() < 0.03);
}

#[test]
fn clipping_is_counted() {
    let mut r = rng(5);
    let fam = FamilySpec::poisson_log().with_domain(-1.0, 1.0).unwrap();
    let x = DMatrix::from_column_slice(4, 1, &[-3.0, -0.5, 0.5, 3.0]);
    let mut truth = fixed_truth(DMatrix::from_element(1, 1, 1.0));
    generate_dataset(&x, &mut truth, &fam, &mut r).unwrap();
    assert_eq!(truth.theta_clip_events, 2);
    assert_eq!(truth.eta_range, (-3.0, 3.0));

    let wide = FamilySpec::bernoulli_logit().with_domain(-10.0, 10.0).unwrap();
    generate_dataset(&x, &mut truth, &wide, &mut r).unwrap();
    assert_eq!(truth.theta_clip_events, 0);
}

#[test]
fn kappa_is_the_minimum_over_directions() {
    let mut r = rng(6);
    let x = DMatrix::<f64>::identity(2, 2) * 2.0;
    let k = compute_kappa(&x);
    let mut best = f64::INFINITY;
    for _ in 0..1000 {
        let b = DMatrix::from_fn(2, 3, |_, _| r.sample::<f64, _>(StandardNormal));
        best = best.min((&x * &b).norm() / (2f64.sqrt() * b.norm()));
    }
    assert!((best - k).abs() < 1e-6);

    let x: DMatrix<f64> = make_design(30, 4, DesignMode::Iid, &mut r).unwrap();
    let k = compute_kappa(&x);
    assert!(k > 0.0);
    for _ in 0..1000 {
        let b = DMatrix::from_fn(4, 3, |_, _| r.sample::<f64, _>(StandardNormal));
        assert!(k * k * b.norm_squared() <= (&x * &b).norm_squared() / 30.0 * (1.0 + 1e-12));
    }
}

#[test]
fn prediction_error_matches_naive_sum_and_norm_bound() {
    let mut r = rng(7);
    for _ in 0..50 {
        let x: DMatrix<f64> = make_design(12, 3, DesignMode::Iid, &mut r).unwrap();
        let b0 = DMatrix::from_fn(3, 2, |_, _| r.sample::<f64, _>(StandardNormal));
        let bh = DMatrix::from_fn(3, 2, |_, _| r.sample::<f64, _>(StandardNormal));
        let v = prediction_error(&x, &bh, &b0).unwrap();
        let mut naive = 0.0;
        for i in 0..12 {
            for j in 0..2 {
                let mut e = 0.0;
                for k in 0..3 {
                    e += x[(i, k)] * (bh[(k, j)] - b0[(k, j)]);
                }
                naive += e * e;
            }
        }
        assert!((v - naive / 24.0).abs() < 1e-12 * naive.max(1.0));
        let spec = x.clone().svd(false, false).singular_values.max();
        assert!(v <= spec * spec * (&bh - &b0).norm_squared() / 24.0 * (1.0 + 1e-12));
    }
    let x = DMatrix::<f64>::zeros(2, 3);
    assert!(prediction_error(&x, &DMatrix::zeros(2, 2), &DMatrix::zeros(3, 2)).is_err());
}

#[test]
fn generation_is_reproducible() {
    let make = || {
        let mut r = rng(8);
        let x: DMatrix<f64> = make_design(20, 3, DesignMode::ColumnNormalized, &mut r).unwrap();
        let mut t = make_low_rank_truth(3, 2, 1, 0.3, &mut r).unwrap();
        let d: Dataset<f64> = generate_dataset(&x, &mut t, &FamilySpec::negbin_log(2.0).unwrap(), &mut r).unwrap();
        d.y().clone()
    };
    assert_eq!(make(), make());
}
