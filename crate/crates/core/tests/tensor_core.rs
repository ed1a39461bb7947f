mod common;

use common::randn;
use nalgebra::DMatrix;
use proptest::prelude::*;
use tba_core::adam::{adam_step, AdamConfig, AdamState};
use tba_core::linalg::{lstsq, matmul, pca_project};
use tba_core::ops::{gelu, layernorm, silu, softmax, GeluVariant};
use tba_core::rng::Rng;
use tba_core::{Error, Tensor};

fn to_na(t: &Tensor) -> DMatrix<f64> {
    let (r, c) = t.dims2().unwrap();
    DMatrix::from_row_slice(r, c, &t.to_f64())
}

fn residual_sq(a: &DMatrix<f64>, b: &DMatrix<f64>, t: &DMatrix<f64>) -> f64 {
    (b - a * t).norm_squared()
}

#[test]
fn matmul_small_cases() {
    let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
    let b = Tensor::from_rows(&[[5.0], [6.0]]).unwrap();
    assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);
    let d = Tensor::from_rows(&[[2.0, 0.0], [0.0, 3.0]]).unwrap();
    assert!(matmul(&Tensor::eye(2), &d).unwrap().bitwise_eq(&d));
    let z = matmul(&Tensor::zeros(&[3, 4]), &randn(&[4, 2], &mut Rng::new(0))).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));
    assert!(matches!(matmul(&a, &Tensor::zeros(&[3, 1])), Err(Error::Dimension(_))));
}

#[test]
fn matmul_is_associative() {
    let mut rng = Rng::new(11);
    for _ in 0..50 {
        let a = randn(&[8, 8], &mut rng);
        let b = randn(&[8, 8], &mut rng);
        let c = randn(&[8, 8], &mut rng);
        let l = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let r = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        assert!(l.max_abs_diff(&r) < 1e-4);
    }
}

#[test]
fn matmul_matches_nalgebra() {
    let mut rng = Rng::new(12);
    let a = randn(&[13, 7], &mut rng);
    let b = randn(&[7, 5], &mut rng);
    let got = to_na(&matmul(&a, &b).unwrap());
    assert!((got - to_na(&a) * to_na(&b)).amax() < 1e-5);
}

#[test]
fn lstsq_small_cases() {
    let b = Tensor::from_rows(&[[2.0, 0.0], [0.0, 3.0]]).unwrap();
    assert!(lstsq(&Tensor::eye(2), &b, 1e-6).unwrap().max_abs_diff(&b) < 1e-6);

    let a = Tensor::full(&[3, 2], 1.0);
    let t = lstsq(&a, &Tensor::full(&[3, 1], 2.0), 1e-6).unwrap();
    assert!(t.max_abs_diff(&Tensor::full(&[2, 1], 1.0)) < 1e-5);
}

#[test]
fn lstsq_recovers_known_map() {
    let mut rng = Rng::new(13);
    let a = randn(&[50, 4], &mut rng);
    let t0 = randn(&[4, 3], &mut rng);
    let b = matmul(&a, &t0).unwrap();
    assert!(lstsq(&a, &b, 1e-6).unwrap().max_abs_diff(&t0) < 1e-5);
}

#[test]
fn lstsq_errors() {
    let a = Tensor::zeros(&[0, 2]);
    assert!(lstsq(&a, &Tensor::zeros(&[0, 1]), 1e-6).is_err());
    let mut nan = Tensor::eye(2);
    nan.set2(0, 1, f32::NAN);
    assert!(matches!(lstsq(&nan, &Tensor::eye(2), 1e-6), Err(Error::Numeric(_))));
    assert!(lstsq(&Tensor::eye(2), &Tensor::eye(3), 1e-6).is_err());
    assert!(lstsq(&Tensor::eye(2), &Tensor::eye(2), 0.0).is_err());
}

#[test]
fn lstsq_matches_pseudo_inverse() {
    let mut rng = Rng::new(14);
    for trial in 0..30 {
        let n = 5 + rng.below(60);
        let p = 1 + rng.below(8);
        let q = 1 + rng.below(5);
        let mut a = randn(&[n, p], &mut rng);
        if trial % 3 == 0 && p > 1 {
            // duplicate a column to force rank deficiency
            for i in 0..n {
                let v = a.get2(i, 0);
                a.set2(i, p - 1, v);
            }
        }
        let b = randn(&[n, q], &mut rng);
        let got = to_na(&lstsq(&a, &b, 1e-6).unwrap());
        let svd = to_na(&a).svd(true, true);
        let want = svd.solve(&to_na(&b), 1e-6 * svd.singular_values.max()).unwrap();
        assert!((got - want).amax() < 1e-4, "trial {trial}");
    }
}

#[test]
fn lstsq_normal_equations_on_1000_instances() {
    let mut rng = Rng::new(15);
    for trial in 0..1000 {
        let n = 1 + rng.below(80);
        let p = 1 + rng.below(10);
        let q = 1 + rng.below(6);
        let a = randn(&[n, p], &mut rng);
        let b = randn(&[n, q], &mut rng);
        let t = to_na(&lstsq(&a, &b, 1e-6).unwrap());
        let (an, bn) = (to_na(&a), to_na(&b));
        let r = an.transpose() * (&bn - &an * t);
        let bound = 1e-4 * (an.norm() * bn.norm() + 1.0);
        assert!(r.amax() <= bound, "trial {trial}: {} > {bound}", r.amax());
    }
}

#[test]
fn lstsq_is_optimal_under_perturbation() {
    let mut rng = Rng::new(16);
    for _ in 0..100 {
        let n = 20 + rng.below(40);
        let p = 1 + rng.below(6);
        let q = 1 + rng.below(4);
        let a = randn(&[n, p], &mut rng);
        let b = randn(&[n, q], &mut rng);
        let (an, bn) = (to_na(&a), to_na(&b));
        let t = to_na(&lstsq(&a, &b, 1e-6).unwrap());
        let base = residual_sq(&an, &bn, &t);
        for _ in 0..10 {
            let mut dt = DMatrix::from_fn(p, q, |_, _| rng.normal());
            dt *= 1e-2 / dt.norm();
            assert!(residual_sq(&an, &bn, &(&t + dt)) >= base - 1e-9);
        }
    }
}

#[test]
fn pca_small_cases() {
    let x = Tensor::from_rows(&[[1.0, 0.0], [-1.0, 0.0], [2.0, 0.0], [-2.0, 0.0]]).unwrap();
    let p = pca_project(&x, 1).unwrap();
    assert!((p.components.get2(0, 0) - 1.0).abs() < 1e-6);
    assert!(p.components.get2(1, 0).abs() < 1e-6);
    for (got, want) in p.projected.data().iter().zip([1.0, -1.0, 2.0, -2.0]) {
        assert!((got - want).abs() < 1e-5);
    }
    let same = Tensor::from_rows(&[[3.0, 1.0], [3.0, 1.0], [3.0, 1.0]]).unwrap();
    assert!(pca_project(&same, 1).unwrap().projected.data().iter().all(|v| v.abs() < 1e-6));
    assert!(matches!(pca_project(&x, 3), Err(Error::Dimension(_))));
    assert!(pca_project(&x, 0).is_err());
}

#[test]
fn pca_full_rank_reconstructs() {
    let mut rng = Rng::new(17);
    for _ in 0..10 {
        let (n, d) = (30 + rng.below(30), 2 + rng.below(7));
        let x = randn(&[n, d], &mut rng);
        let p = pca_project(&x, d).unwrap();
        let c = to_na(&p.components);
        assert!((c.transpose() * &c - DMatrix::identity(d, d)).amax() < 1e-5);
        let recon = to_na(&p.projected) * c.transpose();
        let mut centered = to_na(&x);
        for j in 0..d {
            let m = centered.column(j).mean();
            centered.column_mut(j).add_scalar_mut(-m);
        }
        assert!((recon - centered).amax() < 1e-4);
        assert!(p.explained_variance.windows(2).all(|w| w[0] >= w[1]));
        for t in 0..d {
            let col: Vec<f32> = (0..d).map(|i| p.components.get2(i, t)).collect();
            let big = col.iter().copied().fold(0.0f32, |a, v| if v.abs() > a.abs() { v } else { a });
            assert!(big >= 0.0);
        }
    }
}

#[test]
fn pca_variance_matches_nalgebra_eigen() {
    let x = randn(&[200, 5], &mut Rng::new(18));
    let p = pca_project(&x, 5).unwrap();
    let mut c = to_na(&x);
    for j in 0..5 {
        let m = c.column(j).mean();
        c.column_mut(j).add_scalar_mut(-m);
    }
    let cov = c.transpose() * &c / 199.0;
    let mut ev: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    for (got, want) in p.explained_variance.iter().zip(ev) {
        assert!((got - want).abs() < 1e-6 * want.max(1.0));
    }
}

#[test]
fn rng_streams_repeat() {
    let mut a = Rng::new(123456789);
    let mut b = Rng::new(123456789);
    for _ in 0..10_000 {
        assert_eq!(a.next_u64(), b.next_u64());
    }
    let mut c = Rng::new(123456790);
    let mut a = Rng::new(123456789);
    assert!((0..8).any(|_| a.next_u64() != c.next_u64()));
}

#[test]
fn rng_forks_are_reproducible_and_distinct() {
    let mut a = Rng::new(5).fork(1);
    let mut b = Rng::new(5).fork(1);
    let mut c = Rng::new(5).fork(2);
    let xa: Vec<u64> = (0..100).map(|_| a.next_u64()).collect();
    let xb: Vec<u64> = (0..100).map(|_| b.next_u64()).collect();
    let xc: Vec<u64> = (0..100).map(|_| c.next_u64()).collect();
    assert_eq!(xa, xb);
    assert_ne!(xa, xc);
}

#[test]
fn adam_zero_gradient_is_noop() {
    let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
    let before = p.clone();
    let mut st = AdamState::new(3, AdamConfig::default()).unwrap();
    for _ in 0..10 {
        adam_step(&mut p, &Tensor::zeros(&[3]), &mut st).unwrap();
    }
    assert!(p.bitwise_eq(&before));
    assert_eq!(st.step(), 10);
}

#[test]
fn adam_first_step_by_hand() {
    let mut p = Tensor::new(vec![1], vec![1.0]).unwrap();
    let mut st = AdamState::new(1, AdamConfig::with_lr(1e-3)).unwrap();
    adam_step(&mut p, &Tensor::new(vec![1], vec![1.0]).unwrap(), &mut st).unwrap();
    let (m, v) = (0.1 / (1.0 - 0.9), 0.001 / (1.0 - 0.999));
    let want = 1.0 - 1e-3 * m / (f64::sqrt(v) + 1e-8);
    assert!((p.data()[0] as f64 - want).abs() < 1e-7);
    assert!((p.data()[0] - 0.999).abs() < 1e-6);
}

#[test]
fn adam_minimizes_square() {
    let mut x = [1.0f64];
    let mut st = AdamState::new(1, AdamConfig::with_lr(0.01)).unwrap();
    for _ in 0..500 {
        let g = [2.0 * x[0]];
        st.update(&mut x, &g).unwrap();
    }
    assert!(x[0].abs() < 0.05, "{}", x[0]);
}

#[test]
fn adam_rejects_bad_input() {
    assert!(AdamState::new(1, AdamConfig::with_lr(0.0)).is_err());
    let mut st = AdamState::new(2, AdamConfig::default()).unwrap();
    let mut p = Tensor::zeros(&[2]);
    assert!(matches!(adam_step(&mut p, &Tensor::zeros(&[3]), &mut st), Err(Error::Dimension(_))));
}

#[test]
fn layernorm_cases() {
    let one = [1.0f32; 2];
    let zero = [0.0f32; 2];
    let c = layernorm(&Tensor::full(&[1, 2], 4.0), &one, &zero, 1e-6).unwrap();
    assert!(c.data().iter().all(|v| v.abs() < 1e-6));
    let x = Tensor::from_rows(&[[1.0, 3.0]]).unwrap();
    let y = layernorm(&x, &one, &zero, 1e-12).unwrap();
    assert!(y.max_abs_diff(&Tensor::from_rows(&[[-1.0, 1.0]]).unwrap()) < 1e-6);
    let yb = layernorm(&x, &one, &[0.5, -2.0], 1e-12).unwrap();
    assert!(yb.max_abs_diff(&y.add_row_vector(&[0.5, -2.0]).unwrap()) < 1e-6);
    assert!(layernorm(&Tensor::zeros(&[2, 0]), &[], &[], 1e-6).is_err());
}

#[test]
fn kernel_values() {
    let s = softmax(&Tensor::zeros(&[1, 2]));
    assert_eq!(s.data(), &[0.5, 0.5]);
    assert_eq!(silu(0.0), 0.0);
    let g = gelu(&Tensor::new(vec![1], vec![1.0]).unwrap(), GeluVariant::Tanh);
    assert!((g.data()[0] - 0.8412).abs() < 1e-4);
    let ge = GeluVariant::Erf.eval(1.0);
    assert!((ge - 0.841_344_746).abs() < 1e-6);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(v in prop::collection::vec(-30.0f32..30.0, 1..40)) {
        let n = v.len();
        let s = softmax(&Tensor::new(vec![1, n], v).unwrap());
        let sum: f64 = s.data().iter().map(|&x| x as f64).sum();
        prop_assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layernorm_rows_are_centered(v in prop::collection::vec(-100.0f32..100.0, 2..30)) {
        let d = v.len();
        let g = vec![1.0f32; d];
        let b = vec![0.0f32; d];
        let y = layernorm(&Tensor::new(vec![1, d], v).unwrap(), &g, &b, 1e-6).unwrap();
        let mean: f64 = y.data().iter().map(|&x| x as f64).sum::<f64>() / d as f64;
        prop_assert!(mean.abs() <= 1e-5);
    }

    #[test]
    fn silu_matches_definition(x in -20.0f64..20.0) {
        prop_assert!((silu(x) - x / (1.0 + (-x).exp())).abs() < 1e-12);
    }

    #[test]
    fn tensor_shape_checked(dims in prop::collection::vec(1usize..5, 1..4), extra in 1usize..3) {
        let n: usize = dims.iter().product();
        prop_assert!(Tensor::new(dims.clone(), vec![0.0; n]).is_ok());
        prop_assert!(Tensor::new(dims, vec![0.0; n + extra]).is_err());
    }
}
