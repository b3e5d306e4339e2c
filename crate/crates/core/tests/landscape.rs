use icl_lab::landscape::*;
use icl_lab::linalg::Matrix;
use icl_lab::loss::{mean_and_se, moment_loss, Batch, GradientBundle};
use icl_lab::rng::RngStream;
use icl_lab::sampler::{make_covariance, sample_prompt, Basis, CovarianceSpec, WeightPrior};
use proptest::prelude::*;

fn aniso(seed: u64) -> CovarianceSpec<f64> {
    make_covariance(3, &[1.0, 0.6, 1.5], Basis::Haar(seed)).unwrap()
}

fn random_sym(seed: u64, d: usize) -> Matrix<f64> {
    let mut g = RngStream::new(seed, 31).generator();
    Matrix::from_vec(d, d, g.normals(d * d)).symmetrized()
}

#[test]
fn whitened_dist_cases() {
    let spec = aniso(3);
    for c in [0.3, -2.0, 7.0] {
        assert!(whitened_dist(&spec.sigma_inv().scale(c), &spec).unwrap() < 1e-10);
    }
    let iso = CovarianceSpec::<f64>::isotropic(3).unwrap();
    let m = random_sym(1, 3);
    assert!((whitened_dist(&m, &iso).unwrap() - dist_to_identity(&m).unwrap()).abs() < 1e-15);

    let diag = make_covariance::<f64>(2, &[1.0, 2.0], Basis::Identity).unwrap();
    let mut m = diag.sigma_inv().clone();
    m[(0, 1)] += 0.1;
    m[(1, 0)] += 0.1;
    // Σ^{1/2} M Σ^{1/2} = [[1, 0.2], [0.2, 1]] ⇒ Dist = √0.08 / √2.08
    let want = (0.08f64 / 2.08).sqrt();
    assert!((whitened_dist(&m, &diag).unwrap() - want).abs() < 1e-14);
}

#[test]
fn projections_of_simple_bundles() {
    let iso = CovarianceSpec::<f64>::isotropic(3).unwrap();
    let eye = GradientBundle::Sparse {
        da: vec![Matrix::identity(3); 2],
    };
    assert_eq!(s_project_sparse(&eye, &iso).unwrap(), vec![1.0, 1.0]);
    let skew = Matrix::from_rows(&[vec![0.0, 1.0, 2.0], vec![-1.0, 0.0, 3.0], vec![-2.0, -3.0, 0.0]]).unwrap();
    let spec = aniso(5);
    let r = s_project_sparse(&GradientBundle::Sparse { da: vec![skew] }, &spec).unwrap();
    assert!(r[0].abs() < 1e-14);
    let zero = GradientBundle::Gdpp {
        da: vec![Matrix::zeros(3, 3)],
        db: vec![Matrix::zeros(3, 3)],
    };
    assert_eq!(s_project_full(&zero, &spec).unwrap(), (vec![0.0], vec![0.0]));
    let id = GradientBundle::Gdpp {
        da: vec![Matrix::identity(3)],
        db: vec![Matrix::identity(3)],
    };
    assert_eq!(s_project_full(&id, &iso).unwrap(), (vec![1.0], vec![1.0]));
}

#[test]
fn directional_derivative_trivia() {
    let spec = aniso(2);
    let batch = Batch::sample(&spec, 6, WeightPrior::InverseCovariance, 1, 200).unwrap();
    let p = SPointSparse {
        a: vec![-0.3, -0.2],
        spec: &spec,
    }
    .materialize()
    .unwrap();
    let zero = GradientBundle::zeros_like(&p);
    assert_eq!(directional_derivative(&p, &zero, &batch).unwrap(), 0.0);
    let (_, g) = icl_lab::loss::loss_and_grad(&p, &batch).unwrap();
    let dd = directional_derivative(&p, &g, &batch).unwrap();
    assert!((dd - g.norm() * g.norm()).abs() < 1e-12 * dd);
    let samples = directional_derivative_samples(&p, &g, &batch).unwrap();
    let (mean, _) = mean_and_se(&samples);
    assert!((mean - dd).abs() < 1e-10 * dd.abs());
    let bad = GradientBundle::Sparse {
        da: vec![Matrix::zeros(3, 3)],
    };
    assert!(directional_derivative(&p, &bad, &batch).is_err());
}

#[test]
fn swap_invariance_is_exact_per_prompt() {
    let spec = aniso(8);
    let point = SPointSparse {
        a: vec![0.3, -0.7, 1.1],
        spec: &spec,
    };
    let mut worst = 0.0f64;
    for s in 0..50 {
        let p = sample_prompt(&spec, 9, WeightPrior::InverseCovariance, RngStream::new(4, s)).unwrap();
        let scale = icl_lab::loss::per_prompt_sq_error(&point.materialize().unwrap(), &p)
            .unwrap()
            .max(1.0);
        worst = worst.max(swap_invariance_check(&p, &point, 0, 2).unwrap() / scale);
        assert_eq!(swap_invariance_check(&p, &point, 1, 1).unwrap(), 0.0);
    }
    assert!(worst <= 1e-12, "{worst}");
    let p = sample_prompt(&spec, 9, WeightPrior::InverseCovariance, RngStream::new(4, 0)).unwrap();
    assert!(swap_invariance_check(&p, &point, 0, 3).is_err());
}

#[test]
fn flow_zero_step_is_constant_and_small_step_descends() {
    let spec = aniso(1);
    let batch = Batch::sample(&spec, 10, WeightPrior::InverseCovariance, 3, 2000).unwrap();
    let init = SPointSparse {
        a: vec![0.0; 3],
        spec: &spec,
    };
    let rec = constrained_flow(init.clone(), &batch, 0.0, 3).unwrap();
    assert!(rec.a.iter().all(|a| a == &rec.a[0]));
    assert!(rec.loss.iter().all(|&l| l == rec.loss[0]));
    let rec = constrained_flow(init, &batch, 1e-3, 1).unwrap();
    assert!(rec.loss[1] < rec.loss[0]);
    assert!(rec.step.windows(2).all(|w| w[1] > w[0]));
    let csv = rec.to_csv();
    assert!(csv.starts_with("step,time,loss,r_0,r_1,r_2,a_0,a_1,a_2\n"));
}

#[test]
fn gdpp_flow_descends() {
    let spec = aniso(6);
    let batch = Batch::sample(&spec, 10, WeightPrior::InverseCovariance, 9, 2000).unwrap();
    let init = SPointFull {
        a: vec![0.0; 3],
        b: vec![0.0; 3],
        spec: &spec,
    };
    let rec = constrained_flow(init, &batch, 0.05, 100).unwrap();
    assert!(rec.loss.windows(2).all(|w| w[1] <= w[0]));
    assert!(rec.final_loss() < 0.5 * rec.loss[0]);
    assert!(rec.to_csv().starts_with("step,time,loss,r_0,r_1,r_2,s_0,s_1,s_2,a_0"));
    let last = rec.a.last().unwrap().clone();
    let b = rec.b.as_ref().unwrap().last().unwrap().clone();
    let p = SPointFull {
        a: last,
        b,
        spec: &spec,
    }
    .materialize()
    .unwrap();
    assert!((moment_loss(&p, &batch).unwrap() - rec.final_loss()).abs() < 1e-12);
}

#[test]
fn alignment_cases() {
    let a0 = random_sym(3, 4);
    let a1 = a0.matmul(&a0);
    let al = diagonal_alignment(&a0, &a1).unwrap();
    assert!(al.value < 1e-10 && !al.degenerate);
    let al = diagonal_alignment(&Matrix::identity(4), &random_sym(4, 4)).unwrap();
    assert!(al.degenerate);
    let mut asym = random_sym(5, 4);
    asym[(0, 1)] += 1.0;
    assert!(diagonal_alignment(&asym, &a0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dist_scale_invariant(seed in 0u64..10_000, c in prop_oneof![-50.0f64..-0.01, 0.01f64..50.0]) {
        let m = random_sym(seed, 3);
        let a = dist_to_identity(&m).unwrap();
        let b = dist_to_identity(&m.scale(c)).unwrap();
        prop_assert!((a - b).abs() <= 1e-14);
        prop_assert!((0.0..=2f64.sqrt() + 1e-12).contains(&a));
    }

    #[test]
    fn projections_are_linear(seed in 0u64..10_000) {
        let spec = aniso(seed);
        let g1 = GradientBundle::Gdpp { da: vec![random_sym(seed, 3)], db: vec![random_sym(seed + 1, 3)] };
        let g2 = GradientBundle::Gdpp { da: vec![random_sym(seed + 2, 3)], db: vec![random_sym(seed + 3, 3)] };
        let mut sum = g1.clone();
        sum.add_assign(&g2);
        let (r1, s1) = s_project_full(&g1, &spec).unwrap();
        let (r2, s2) = s_project_full(&g2, &spec).unwrap();
        let (r, s) = s_project_full(&sum, &spec).unwrap();
        prop_assert!((r[0] - r1[0] - r2[0]).abs() < 1e-12);
        prop_assert!((s[0] - s1[0] - s2[0]).abs() < 1e-12);
    }

    #[test]
    fn whitened_inverse_covariance_vanishes(seed in 0u64..10_000, e in proptest::collection::vec(0.2f64..3.0, 1..6), c in 0.1f64..10.0) {
        let spec = make_covariance::<f64>(e.len(), &e, Basis::Haar(seed)).unwrap();
        prop_assert!(whitened_dist(&spec.sigma_inv().scale(c), &spec).unwrap() < 1e-10);
    }

    #[test]
    fn swap_invariance_all_pairs(seed in 0u64..10_000, k in 2usize..5) {
        let spec = make_covariance::<f64>(3, &[1.0, 0.5, 1.8], Basis::Haar(seed)).unwrap();
        let mut g = RngStream::new(seed, 12).generator();
        let a: Vec<f64> = g.normals(k);
        let point = SPointSparse { a, spec: &spec };
        let p = sample_prompt(&spec, 7, WeightPrior::InverseCovariance, RngStream::new(seed, 13)).unwrap();
        let scale = icl_lab::loss::per_prompt_sq_error(&point.materialize().unwrap(), &p).unwrap().max(1.0);
        for i in 0..k {
            for j in 0..k {
                prop_assert!(swap_invariance_check(&p, &point, i, j).unwrap() <= 1e-12 * scale);
            }
        }
    }
}
