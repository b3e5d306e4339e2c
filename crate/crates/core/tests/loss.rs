use icl_lab::linalg::Matrix;
use icl_lab::loss::*;
use icl_lab::rng::RngStream;
use icl_lab::sampler::{make_covariance, Basis, CovarianceSpec, WeightPrior};
use icl_lab::transformer::{TransformerParams, Variant};
use proptest::prelude::*;

fn random_params(variant: Variant, d: usize, depth: usize, seed: u64, scale: f64) -> TransformerParams<f64> {
    let mut g = RngStream::new(seed, 77).generator();
    let mut rand = |m: usize| Matrix::from_vec(m, m, g.normals::<f64>(m * m)).scale(scale);
    match variant {
        Variant::Sparse => TransformerParams::sparse((0..depth).map(|_| rand(d).symmetrized()).collect()),
        Variant::Gdpp => TransformerParams::gdpp((0..depth).map(|_| (rand(d).symmetrized(), rand(d))).collect()),
        Variant::Full => TransformerParams::full((0..depth).map(|_| (rand(d + 1), rand(d + 1))).collect()),
    }
    .unwrap()
}

fn fd_check(params: &TransformerParams<f64>, batch: &Batch<f64>) {
    let (_, g) = loss_and_grad(params, batch).unwrap();
    let grad = g.flatten();
    let theta = params.flatten();
    let h = 1e-4;
    let scale = grad.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-3);
    for i in 0..theta.len() {
        let mut plus = theta.clone();
        plus[i] += h;
        let mut minus = theta.clone();
        minus[i] -= h;
        let lp = mc_loss(&params.unflatten(&plus).unwrap(), batch).unwrap();
        let lm = mc_loss(&params.unflatten(&minus).unwrap(), batch).unwrap();
        let fd = (lp - lm) / (2.0 * h);
        assert!(
            (fd - grad[i]).abs() <= 1e-5 * scale,
            "{:?} coordinate {i}: fd {fd} vs analytic {}",
            params.variant(),
            grad[i]
        );
    }
}

#[test]
fn gradients_match_central_differences() {
    let spec = make_covariance(3, &[1.0, 0.5, 1.5], Basis::Haar(11)).unwrap();
    let batch = Batch::sample(&spec, 7, WeightPrior::InverseCovariance, 3, 64).unwrap();
    fd_check(&random_params(Variant::Sparse, 3, 3, 1, 0.3), &batch);
    fd_check(&random_params(Variant::Gdpp, 3, 3, 2, 0.3), &batch);
    fd_check(&random_params(Variant::Full, 3, 2, 3, 0.3), &batch);
}

#[test]
fn single_layer_gradient_is_block_of_full_gradient() {
    let spec = make_covariance(2, &[1.0, 0.7], Basis::Haar(5)).unwrap();
    let batch = Batch::sample(&spec, 5, WeightPrior::Isotropic, 4, 50).unwrap();
    let full = random_params(Variant::Full, 2, 1, 9, 0.5);
    let slp = single_layer_reduce(&full.embedded()[0]);
    // the reduced loss only sees b and A, so zero out the rest first
    let reduced = slp.to_params();
    let (l, g) = loss_and_grad(&reduced, &batch).unwrap();
    assert!((l - single_layer_loss(&slp, &batch).unwrap()).abs() < 1e-12 * l);
    let GradientBundle::Full { dp, dq } = g else { panic!() };
    let mut db = vec![0.0; 3];
    let mut da = Matrix::zeros(3, 2);
    for m in batch.moments() {
        let (_, gi) = single_layer_prompt_grad(&slp, m, batch.n());
        for (x, y) in db.iter_mut().zip(&gi.b) {
            *x += y / batch.len() as f64;
        }
        da.axpy(1.0 / batch.len() as f64, &gi.a);
    }
    for j in 0..3 {
        assert!((dp[0][(2, j)] - db[j]).abs() < 1e-12);
    }
    assert!((&dq[0].block(0, 0, 3, 2) - &da).max_abs() < 1e-12);
}

#[test]
fn reduced_loss_equals_full_layer_loss_for_any_layer() {
    // Only the last row of P and the first d columns of Q matter.
    let spec = CovarianceSpec::<f64>::isotropic(3).unwrap();
    let batch = Batch::sample(&spec, 4, WeightPrior::Isotropic, 8, 30).unwrap();
    let full = random_params(Variant::Full, 3, 1, 21, 0.6);
    let slp = single_layer_reduce(&full.embedded()[0]);
    let a = mc_loss(&full, &batch).unwrap();
    let b = single_layer_loss(&slp, &batch).unwrap();
    assert!((a - b).abs() < 1e-12 * a.max(1.0), "{a} vs {b}");
}

#[test]
fn trace_form_matches_for_structured_stacks() {
    let spec = make_covariance(3, &[1.2, 0.4, 1.0], Basis::Haar(2)).unwrap();
    let batch = Batch::sample(&spec, 6, WeightPrior::InverseCovariance, 12, 20).unwrap();
    for params in [
        random_params(Variant::Sparse, 3, 3, 5, 0.4),
        random_params(Variant::Gdpp, 3, 3, 6, 0.4),
    ] {
        let embedded = params.to_full();
        for p in batch.prompts() {
            let direct = per_prompt_sq_error(&params, p).unwrap();
            for q in [&params, &embedded] {
                let t = trace_form_loss(q, p).unwrap();
                assert!((t - direct).abs() <= 1e-10 * direct.max(1.0), "{t} vs {direct}");
            }
        }
    }
}

#[test]
fn reductions_are_thread_count_invariant() {
    let spec = make_covariance(3, &[1.0, 0.5, 1.5], Basis::Haar(1)).unwrap();
    let batch = Batch::sample(&spec, 5, WeightPrior::InverseCovariance, 2, 3000).unwrap();
    let params = random_params(Variant::Gdpp, 3, 2, 4, 0.3);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                let b = Batch::sample(&spec, 5, WeightPrior::InverseCovariance, 2, 3000).unwrap();
                let (l, g) = loss_and_grad(&params, &b).unwrap();
                (l, g.flatten(), mc_loss(&params, &b).unwrap(), b.prompts()[2999].clone())
            })
    };
    let one = run(1);
    let four = run(4);
    assert_eq!(one.0.to_bits(), four.0.to_bits());
    assert_eq!(one.2.to_bits(), four.2.to_bits());
    assert!(one.1.iter().zip(&four.1).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(one.3, four.3);
    assert_eq!(batch.prompts()[2999], one.3);
}

#[test]
fn batch_manifest_round_trip() {
    let spec = make_covariance(2, &[1.0, 2.0], Basis::Haar(3)).unwrap();
    let batch = Batch::<f64>::sample(&spec, 4, WeightPrior::Isotropic, 5, 10).unwrap();
    let json = serde_json::to_string(batch.manifest().unwrap()).unwrap();
    let back: BatchManifest = serde_json::from_str(&json).unwrap();
    let again = back.sample::<f64>().unwrap();
    assert_eq!(again.prompts(), batch.prompts());
}

#[test]
fn gradient_dump_round_trip() {
    let spec = CovarianceSpec::<f64>::isotropic(2).unwrap();
    let batch = Batch::sample(&spec, 4, WeightPrior::Isotropic, 5, 10).unwrap();
    let params = random_params(Variant::Gdpp, 2, 2, 1, 0.2);
    let (loss, gradient) = loss_and_grad(&params, &batch).unwrap();
    let dump = LossGradDump {
        loss,
        grad_norm: gradient.norm(),
        gradient,
        batch: batch.manifest().cloned(),
    };
    let json = serde_json::to_string(&dump).unwrap();
    assert!(json.contains("\"variant\":\"gdpp\""));
    let back: LossGradDump<f64> = serde_json::from_str(&json).unwrap();
    assert_eq!(back.gradient, dump.gradient);
}

#[test]
fn f32_path_runs() {
    let spec = CovarianceSpec::<f32>::isotropic(2).unwrap();
    let batch = Batch::sample(&spec, 4, WeightPrior::Isotropic, 5, 100).unwrap();
    let params = TransformerParams::<f32>::sparse(vec![Matrix::identity(2).scale(-0.5)]).unwrap();
    let (l, g) = loss_and_grad(&params, &batch).unwrap();
    let token = mc_loss(&params, &batch).unwrap();
    assert!((l - token).abs() <= 1e-4 * token);
    assert!(g.norm().is_finite());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn losses_are_nonnegative(seed in 0u64..1000, depth in 1usize..4) {
        let spec = CovarianceSpec::<f64>::isotropic(2).unwrap();
        let batch = Batch::sample(&spec, 3, WeightPrior::Isotropic, seed, 8).unwrap();
        for v in [Variant::Sparse, Variant::Gdpp, Variant::Full] {
            let p = random_params(v, 2, depth, seed, 0.5);
            prop_assert!(mc_loss(&p, &batch).unwrap() >= 0.0);
            prop_assert!(moment_loss(&p, &batch).unwrap() >= 0.0);
        }
    }

    #[test]
    fn sparse_loss_is_rotation_equivariant(seed in 0u64..1000) {
        // rotating every prompt by Q and conjugating each A by Q leaves the loss unchanged
        let spec = make_covariance(3, &[1.0, 0.5, 2.0], Basis::Haar(seed)).unwrap();
        let batch = Batch::sample(&spec, 4, WeightPrior::InverseCovariance, seed, 16).unwrap();
        let q = icl_lab::sampler::haar_orthogonal::<f64>(3, RngStream::new(seed, 9)).unwrap();
        let p = random_params(Variant::Sparse, 3, 2, seed, 0.4);
        let conj = TransformerParams::sparse(
            p.a_matrices().unwrap().into_iter().map(|a| q.matmul(a).matmul_tr(&q)).collect(),
        ).unwrap();
        let l0 = mc_loss(&p, &batch).unwrap();
        let l1 = mc_loss(&conj, &batch.rotated(&q).unwrap()).unwrap();
        prop_assert!((l0 - l1).abs() <= 1e-10 * l0.max(1.0));
    }

    #[test]
    fn moment_and_token_routes_agree(seed in 0u64..1000, depth in 1usize..4) {
        let spec = make_covariance(2, &[1.0, 0.6], Basis::Haar(seed)).unwrap();
        let batch = Batch::sample(&spec, 5, WeightPrior::InverseCovariance, seed, 8).unwrap();
        for v in [Variant::Sparse, Variant::Gdpp, Variant::Full] {
            let p = random_params(v, 2, depth, seed + 1, 0.4);
            let a = mc_loss(&p, &batch).unwrap();
            let b = moment_loss(&p, &batch).unwrap();
            prop_assert!((a - b).abs() <= 1e-11 * a.max(1.0));
        }
    }
}
