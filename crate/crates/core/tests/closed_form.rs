use icl_lab::closed_form::*;
use icl_lab::linalg::Matrix;
use icl_lab::loss::{single_layer_loss, single_layer_sq_error, Batch};
use icl_lab::rng::RngStream;
use icl_lab::sampler::{make_covariance, Basis, CovarianceSpec, WeightPrior};
use proptest::prelude::*;

#[test]
fn isotropic_optimum_matches_scalar_formula() {
    let spec = CovarianceSpec::<f64>::isotropic(5).unwrap();
    let opt = optimal_single_layer(&spec, 20).unwrap();
    let want = isotropic_scale::<f64>(20, 5);
    assert!((want - 0.769_230_769_230_769_2).abs() < 1e-15);
    for &s in &opt.s {
        assert!((s - want).abs() < 1e-15);
    }
    assert!((&opt.top_block() + &Matrix::identity(5).scale(want)).max_abs() < 1e-15);
    let one = optimal_single_layer(&CovarianceSpec::<f64>::isotropic(1).unwrap(), 1).unwrap();
    assert!((one.s[0] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn optimum_is_stationary_on_large_batch() {
    let spec = CovarianceSpec::<f64>::isotropic(3).unwrap();
    let batch = Batch::sample(&spec, 10, WeightPrior::Isotropic, 2024, 200_000).unwrap();
    let opt = optimal_single_layer(&spec, 10).unwrap();
    let report = stationarity_check(&opt, &batch).unwrap();
    assert!(report.max_z() < 4.0, "max z = {}", report.max_z());
    assert!(report.grad_norm.is_finite() && report.standard_error > 0.0);
}

#[test]
fn stationarity_rejects_non_isotropic_prior() {
    let spec = CovarianceSpec::<f64>::isotropic(2).unwrap();
    let batch = Batch::sample(&spec, 4, WeightPrior::InverseCovariance, 1, 10).unwrap();
    let opt = optimal_single_layer(&spec, 4).unwrap();
    assert!(matches!(
        stationarity_check(&opt, &batch),
        Err(icl_lab::Error::Config(_))
    ));
}

#[test]
fn optimum_beats_perturbations_on_shared_batch() {
    let spec = CovarianceSpec::<f64>::isotropic(3).unwrap();
    let batch = Batch::sample(&spec, 10, WeightPrior::Isotropic, 7, 200_000).unwrap();
    let opt = optimal_single_layer(&spec, 10).unwrap().params();
    let base = single_layer_loss(&opt, &batch).unwrap();

    let mut shifted = opt.clone();
    for i in 0..3 {
        shifted.a[(i, i)] += 0.1;
    }
    assert!(single_layer_loss(&shifted, &batch).unwrap() > base);

    let mut g = RngStream::new(99, 0).generator();
    for _ in 0..50 {
        let db: Vec<f64> = g.normals(4);
        let da: Vec<f64> = g.normals(12);
        let norm = db.iter().chain(&da).map(|x| x * x).sum::<f64>().sqrt();
        let mut p = opt.clone();
        for (x, y) in p.b.iter_mut().zip(&db) {
            *x += 0.05 * y / norm;
        }
        for (x, y) in p.a.as_mut_slice().iter_mut().zip(&da) {
            *x += 0.05 * y / norm;
        }
        assert!(single_layer_loss(&p, &batch).unwrap() >= base);
    }
}

#[test]
fn rescaled_optimum_has_identical_per_sample_losses() {
    let spec = make_covariance::<f64>(3, &[1.0, 0.5, 2.0], Basis::Haar(4)).unwrap();
    let batch = Batch::sample(&spec, 6, WeightPrior::Isotropic, 3, 50).unwrap();
    let opt = optimal_single_layer(&spec, 6).unwrap().params();
    let scaled = opt.rescaled(2.0);
    for p in batch.prompts() {
        let a = single_layer_sq_error(&opt, p).unwrap();
        let b = single_layer_sq_error(&scaled, p).unwrap();
        assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }
}

#[test]
fn optimum_json_has_named_fields() {
    let spec = CovarianceSpec::<f64>::isotropic(2).unwrap();
    let opt = optimal_single_layer(&spec, 5).unwrap();
    let v: serde_json::Value = serde_json::to_value(&opt).unwrap();
    assert!(v.get("s").is_some() && v.get("b").is_some() && v.get("A").is_some());
    let back: OptimalSingleLayer<f64> = serde_json::from_value(v).unwrap();
    assert_eq!(back, opt);
}

proptest! {
    #[test]
    fn basis_equivariance(seed in 0u64..10_000, e in proptest::collection::vec(0.2f64..3.0, 1..5), n in 1usize..30) {
        let d = e.len();
        let rotated = make_covariance::<f64>(d, &e, Basis::Haar(seed)).unwrap();
        let plain = make_covariance::<f64>(d, &e, Basis::Identity).unwrap();
        let or = optimal_single_layer(&rotated, n).unwrap().top_block();
        let op = optimal_single_layer(&plain, n).unwrap().top_block();
        // Σ = Uᵀ D² U, so the optimum conjugates the same way
        let u = rotated.u();
        let conj = u.tr_matmul(&op).matmul(u);
        prop_assert!((&or - &conj).max_abs() < 1e-12);
        prop_assert!(or.asymmetry() == 0.0);
    }

    #[test]
    fn scales_positive_and_monotone(e in proptest::collection::vec(0.1f64..5.0, 1..6), n in 1usize..50, k in 0usize..6, bump in 0.01f64..2.0) {
        let s = eigen_scales(&e, n);
        let lmin = e.iter().cloned().fold(f64::INFINITY, f64::min);
        for &si in &s {
            prop_assert!(si > 0.0 && si < n as f64 / lmin);
        }
        let k = k % e.len();
        let mut e2 = e.clone();
        e2[k] += bump;
        let s2 = eigen_scales(&e2, n);
        for (a, b) in s.iter().zip(&s2) {
            prop_assert!(b < a);
        }
    }
}
