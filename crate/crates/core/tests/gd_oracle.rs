use icl_lab::gd_oracle::*;
use icl_lab::linalg::Matrix;
use icl_lab::rng::RngStream;
use icl_lab::sampler::{make_covariance, sample_prompt, Basis, CovarianceSpec, Prompt, WeightPrior};
use icl_lab::transformer::{forward_xy_recorded, TransformerParams};

fn hand_prompt() -> Prompt<f64> {
    Prompt::from_parts(Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(), vec![2.0]).unwrap()
}

fn random_prompt(seed: u64, d: usize, n: usize) -> Prompt<f64> {
    let mut g = RngStream::new(seed, 1).generator();
    let e: Vec<f64> = (0..d).map(|_| 0.5 + g.uniform::<f64>()).collect();
    let spec = make_covariance(d, &e, Basis::Haar(seed)).unwrap();
    sample_prompt(&spec, n, WeightPrior::Isotropic, RngStream::new(seed, 2)).unwrap()
}

fn random_sym(g: &mut icl_lab::rng::StreamRng, d: usize, scale: f64) -> Matrix<f64> {
    Matrix::from_vec(d, d, g.normals(d * d)).scale(scale).symmetrized()
}

#[test]
fn hand_values() {
    let p = hand_prompt();
    let (v, g) = regression_objective(&p, &[0.0]).unwrap();
    assert_eq!((v, g), (2.0, vec![-2.0]));
    let (v, g) = regression_objective(&p, &[2.0]).unwrap();
    assert_eq!((v, g), (0.0, vec![0.0]));
    let t = precond_gd(&p, &[Matrix::from_rows(&[vec![-1.0]]).unwrap()]).unwrap();
    assert_eq!(t.iterates, vec![vec![0.0], vec![2.0]]);
    assert_eq!(precond_gd(&p, &[]).unwrap().iterates, vec![vec![0.0]]);
    let params = TransformerParams::sparse(vec![Matrix::from_rows(&[vec![-1.0]]).unwrap()]).unwrap();
    assert_eq!(check_lemma1(&p, &params).unwrap(), 0.0);
    let zero = TransformerParams::sparse(vec![Matrix::zeros(1, 1); 3]).unwrap();
    assert_eq!(check_lemma1(&p, &zero).unwrap(), 0.0);
}

#[test]
fn objective_gradient_matches_central_differences() {
    for seed in 0..20 {
        let p = random_prompt(seed, 4, 7);
        let mut g = RngStream::new(seed, 3).generator();
        let w: Vec<f64> = g.normals(4);
        let (_, grad) = regression_objective(&p, &w).unwrap();
        let h = 1e-5;
        for j in 0..4 {
            let mut wp = w.clone();
            wp[j] += h;
            let mut wm = w.clone();
            wm[j] -= h;
            let fd = (regression_objective(&p, &wp).unwrap().0 - regression_objective(&p, &wm).unwrap().0) / (2.0 * h);
            assert!(
                (fd - grad[j]).abs() <= 1e-7 * grad[j].abs().max(1.0),
                "{fd} vs {}",
                grad[j]
            );
        }
    }
}

#[test]
fn small_steps_descend() {
    for seed in 0..20 {
        let p = random_prompt(seed, 3, 12);
        let a = vec![Matrix::identity(3).scale(-0.2); 6];
        let t = precond_gd(&p, &a).unwrap();
        assert!(t.objective.windows(2).all(|w| w[1] <= w[0]), "{:?}", t.objective);
    }
}

#[test]
fn lemma1_on_random_instances() {
    let mut worst = 0.0f64;
    for seed in 0..200u64 {
        let mut g = RngStream::new(seed, 5).generator();
        let d = 1 + g.index(6);
        let n = 1 + g.index(30);
        let k = 1 + g.index(4);
        let p = random_prompt(seed, d, n);
        let a: Vec<Matrix<f64>> = (0..k).map(|_| random_sym(&mut g, d, 0.3)).collect();
        let params = TransformerParams::sparse(a).unwrap();
        worst = worst.max(check_lemma1(&p, &params).unwrap());
    }
    assert!(worst <= 1e-9, "worst gap {worst}");
}

#[test]
fn lemma1_rejects_other_variants() {
    let params = TransformerParams::gdpp(vec![(Matrix::identity(1), Matrix::identity(1))]).unwrap();
    assert!(check_lemma1(&hand_prompt(), &params).is_err());
}

#[test]
fn covariate_step_matches_forward_xy() {
    for seed in 0..100u64 {
        let mut g = RngStream::new(seed, 6).generator();
        let d = 1 + g.index(4);
        let n = 1 + g.index(10);
        let p = random_prompt(seed, d, n);
        let layers: Vec<(Matrix<f64>, Matrix<f64>)> = (0..3)
            .map(|_| {
                (
                    random_sym(&mut g, d, 0.4),
                    Matrix::from_vec(d, d, g.normals(d * d)).scale(0.4),
                )
            })
            .collect();
        let params = TransformerParams::gdpp(layers.clone()).unwrap();
        let mut y0 = p.y.clone();
        y0.push(0.0);
        let rec = forward_xy_recorded(&p.x, &y0, &params).unwrap();
        for (i, (a, b)) in layers.iter().enumerate() {
            let mine = gdpp_covariate_step(&rec[i].0, a, b).unwrap();
            let scale = rec[i + 1].0.max_abs().max(1.0);
            assert!((&mine - &rec[i + 1].0).max_abs() <= 1e-12 * scale);
        }
    }
}

#[test]
fn covariate_step_special_cases() {
    let p = random_prompt(3, 3, 8);
    let a = Matrix::identity(3).scale(0.7);
    assert_eq!(gdpp_covariate_step(&p.x, &a, &Matrix::zeros(3, 3)).unwrap(), p.x);
    let (ca, cb) = (0.7, -0.4);
    let got = gdpp_covariate_step(&p.x, &a, &Matrix::identity(3).scale(cb)).unwrap();
    let mut m = Matrix::identity(9);
    m[(8, 8)] = 0.0;
    let xtx = m.matmul(&p.x.tr_matmul(&p.x));
    let mut t = Matrix::identity(9);
    t.axpy(ca * cb / 8.0, &xtx);
    let want = p.x.matmul(&t);
    assert!((&got - &want).max_abs() < 1e-12);
}

#[test]
fn trajectory_csv_layout() {
    let p = hand_prompt();
    let t = precond_gd(&p, &[Matrix::from_rows(&[vec![-1.0]]).unwrap()]).unwrap();
    let csv = t.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "iteration,R,w_0");
    assert_eq!(lines[1], "0,2.0000000000000000e0,0.0000000000000000e0");
    assert_eq!(lines.len(), 3);
    let _ = CovarianceSpec::<f64>::isotropic(1).unwrap();
}
