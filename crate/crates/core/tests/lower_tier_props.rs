mod common;

use common::*;
use hybridfit_core::linalg::{matmul, CholeskyFactor};
use hybridfit_core::lower_tier::{
    accumulate_streaming, solve_ridge, FeatureMap, NormalEqAccumulator, Nonlinearity, RidgeSolution,
};
use hybridfit_core::Matrix;
use proptest::prelude::*;
use rand::seq::SliceRandom;

/// ‖ΦW − Y‖² + λ‖W‖²
fn ridge_objective(phi: &Matrix, y: &Matrix, w: &Matrix, lambda: f64) -> f64 {
    let r = naive_matmul(phi, w).sub(y).unwrap().frobenius_norm();
    let wn = w.frobenius_norm();
    r * r + lambda * wn * wn
}

/// Full-batch gradient descent on the ridge objective from W = 0 with step
/// 1/L, where L = 2(trace(ΦᵀΦ) + λ) bounds the gradient's Lipschitz constant.
fn gradient_descent(phi: &Matrix, y: &Matrix, lambda: f64, steps: usize) -> Matrix {
    let g = naive_matmul(&phi.transpose(), phi);
    let c = naive_matmul(&phi.transpose(), y);
    let lip = 2.0 * (g.trace() + lambda);
    let (h, k) = (phi.cols(), y.cols());
    let mut w = vec![0.0; h * k];
    for _ in 0..steps {
        let wm = Matrix::from_vec(h, k, w.clone()).unwrap();
        let gw = naive_matmul(&g, &wm);
        for i in 0..h {
            for j in 0..k {
                let grad = 2.0 * (gw.get(i, j) - c.get(i, j) + lambda * w[i * k + j]);
                w[i * k + j] -= grad / lip;
            }
        }
    }
    Matrix::from_vec(h, k, w).unwrap()
}

fn batch_fit(phi: &Matrix, y: &Matrix, lambda: f64) -> (NormalEqAccumulator, RidgeSolution) {
    let mut acc = NormalEqAccumulator::new(phi.cols(), y.cols());
    acc.accumulate(phi, y).unwrap();
    let sol = solve_ridge(&acc, lambda).unwrap();
    (acc, sol)
}

#[test]
fn closed_form_beats_or_matches_gradient_descent() {
    let mut r = rng(21);
    for case in 0..6 {
        let n = 20 + 80 * case;
        let h = 4 + 5 * case;
        let x = gaussian(&mut r, n, 6);
        let map = FeatureMap::init(6, h, Nonlinearity::Tanh, case as u64).unwrap();
        let phi = map.apply(&x).unwrap();
        let y = gaussian(&mut r, n, 2);
        let lambda = 1e-3;
        let (_, sol) = batch_fit(&phi, &y, lambda);
        let w_gd = gradient_descent(&phi, &y, lambda, 1000);
        let f_cf = ridge_objective(&phi, &y, sol.weights(), lambda);
        let f_gd = ridge_objective(&phi, &y, &w_gd, lambda);
        assert!(f_cf <= f_gd + 1e-8 * f_gd.max(1.0), "case {case}: {f_cf} > {f_gd}");
    }
}

#[test]
fn chunked_ingestion_matches_batch() {
    let mut r = rng(8);
    let n = 123;
    let x = gaussian(&mut r, n, 5);
    let y = gaussian(&mut r, n, 3);
    let map = FeatureMap::init(5, 16, Nonlinearity::Relu, 4).unwrap();
    let phi = map.apply(&x).unwrap();
    let (batch_acc, batch_sol) = batch_fit(&phi, &y, 1e-3);
    for chunk in [1, 7, n] {
        let acc = accumulate_streaming(&map, &x, &y, chunk).unwrap();
        assert_eq!(acc.count(), n);
        assert!(acc.gram().sub(batch_acc.gram()).unwrap().max_abs() < 1e-12 * batch_acc.gram().max_abs());
        let sol = solve_ridge(&acc, 1e-3).unwrap();
        assert!(sol.weights().relative_error(batch_sol.weights()).unwrap() < 1e-10);
    }
}

#[test]
fn accumulator_matches_direct_products() {
    let mut r = rng(99);
    let phi = gaussian(&mut r, 40, 7);
    let y = gaussian(&mut r, 40, 2);
    let mut acc = NormalEqAccumulator::new(7, 2);
    for s in (0..40).step_by(9) {
        acc.accumulate(&phi.slice_rows(s, s + 9), &y.slice_rows(s, s + 9)).unwrap();
    }
    let g = naive_matmul(&phi.transpose(), &phi);
    let c = naive_matmul(&phi.transpose(), &y);
    assert!(acc.gram().relative_error(&g).unwrap() < 1e-10);
    assert!(acc.cross().relative_error(&c).unwrap() < 1e-10);
}

#[test]
fn merge_is_associative_and_matches_single_stream() {
    let mut r = rng(1);
    let phi = gaussian(&mut r, 30, 4);
    let y = gaussian(&mut r, 30, 1);
    let part = |a: usize, b: usize| {
        let mut acc = NormalEqAccumulator::new(4, 1);
        acc.accumulate(&phi.slice_rows(a, b), &y.slice_rows(a, b)).unwrap();
        acc
    };
    let (p, q, s) = (part(0, 10), part(10, 25), part(25, 30));
    let mut left = p.clone();
    left.merge(&q).unwrap();
    left.merge(&s).unwrap();
    let mut qs = q.clone();
    qs.merge(&s).unwrap();
    let mut right = p.clone();
    right.merge(&qs).unwrap();
    assert_eq!(left.count(), 30);
    assert!(left.gram().sub(right.gram()).unwrap().max_abs() < 1e-12);
    assert!(left.cross().sub(right.cross()).unwrap().max_abs() < 1e-12);
    let whole = part(0, 30);
    assert!(left.gram().relative_error(whole.gram()).unwrap() < 1e-12);
}

#[test]
fn residual_is_optional_second_pass() {
    let mut r = rng(4);
    let phi = gaussian(&mut r, 50, 3);
    let w_true = Matrix::column(&[1.0, -2.0, 0.5]).unwrap();
    let y = matmul(&phi, &w_true).unwrap();
    let (_, mut sol) = batch_fit(&phi, &y, 1e-9);
    assert_eq!(sol.train_residual(), None);
    let res = sol.attach_residual(&phi, &y).unwrap();
    assert!((0.0..1e-12).contains(&res));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn accumulator_stays_symmetric_and_psd(seed in any::<u64>(), n in 0usize..60, h in 1usize..12) {
        let mut r = rng(seed);
        let phi = uniform(&mut r, n, h, -3.0, 3.0);
        let y = gaussian(&mut r, n, 2);
        let mut acc = NormalEqAccumulator::new(h, 2);
        acc.accumulate(&phi, &y).unwrap();
        let g = acc.gram();
        for i in 0..h {
            for j in 0..h {
                prop_assert!((g.get(i, j) - g.get(j, i)).abs() <= 1e-12);
            }
        }
        let mut shifted = g.clone().into_vec();
        for i in 0..h {
            shifted[i * h + i] += 1e-9;
        }
        prop_assert!(CholeskyFactor::factor(&Matrix::from_vec(h, h, shifted).unwrap()).is_ok());
    }

    #[test]
    fn row_order_does_not_change_weights(seed in any::<u64>(), n in 5usize..80) {
        let mut r = rng(seed);
        let x = gaussian(&mut r, n, 4);
        let y = gaussian(&mut r, n, 2);
        let map = FeatureMap::init(4, 10, Nonlinearity::Tanh, seed).unwrap();
        let a = solve_ridge(&accumulate_streaming(&map, &x, &y, 7).unwrap(), 1e-3).unwrap();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut r);
        let b = solve_ridge(&accumulate_streaming(&map, &x.select_rows(&idx), &y.select_rows(&idx), 7).unwrap(), 1e-3)
            .unwrap();
        prop_assert!(b.weights().relative_error(a.weights()).unwrap() < 1e-10);
    }

    #[test]
    fn solution_satisfies_regularized_system(seed in any::<u64>(), n in 1usize..60, h in 1usize..10) {
        let mut r = rng(seed);
        let phi = gaussian(&mut r, n, h);
        let y = gaussian(&mut r, n, 3);
        let (acc, sol) = batch_fit(&phi, &y, 1e-2);
        let mut lhs = matmul(acc.gram(), sol.weights()).unwrap().into_vec();
        for (i, v) in lhs.iter_mut().enumerate() {
            *v += 1e-2 * sol.weights().as_slice()[i];
        }
        let lhs = Matrix::from_vec(h, 3, lhs).unwrap();
        let scale = acc.cross().frobenius_norm().max(1e-300);
        prop_assert!(lhs.sub(acc.cross()).unwrap().frobenius_norm() / scale < 1e-8 || acc.cross().max_abs() == 0.0);
    }
}
