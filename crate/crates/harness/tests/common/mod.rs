#![allow(dead_code)]

use hybridfit_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Naive triple loop, independent of the crate's product kernel.
pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    let mut out = vec![0.0; a.rows() * b.cols()];
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for p in 0..a.cols() {
                s += a.get(i, p) * b.get(p, j);
            }
            out[i * b.cols() + j] = s;
        }
    }
    Matrix::from_vec(a.rows(), b.cols(), out).unwrap()
}

/// Gauss-Jordan elimination with partial pivoting on `[A | B]`.
pub fn gauss_jordan_solve(a: &Matrix, b: &Matrix) -> Matrix {
    let n = a.rows();
    let m = b.cols();
    let w = n + m;
    let mut aug = vec![0.0; n * w];
    for i in 0..n {
        for j in 0..n {
            aug[i * w + j] = a.get(i, j);
        }
        for j in 0..m {
            aug[i * w + n + j] = b.get(i, j);
        }
    }
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| aug[x * w + col].abs().total_cmp(&aug[y * w + col].abs()))
            .unwrap();
        if piv != col {
            for j in 0..w {
                aug.swap(col * w + j, piv * w + j);
            }
        }
        let p = aug[col * w + col];
        for j in 0..w {
            aug[col * w + j] /= p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = aug[r * w + col];
            if f == 0.0 {
                continue;
            }
            for j in 0..w {
                aug[r * w + j] -= f * aug[col * w + j];
            }
        }
    }
    let mut x = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            x[i * m + j] = aug[i * w + n + j];
        }
    }
    Matrix::from_vec(n, m, x).unwrap()
}

/// Orthonormal `n×n` matrix from modified Gram-Schmidt on a Gaussian draw.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    let g = gaussian(rng, n, n);
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| g.get(i, j)).collect()).collect();
    for j in 0..n {
        for p in 0..j {
            let (done, rest) = cols.split_at_mut(j);
            let q = &done[p];
            let dot: f64 = rest[0].iter().zip(q).map(|(a, b)| a * b).sum();
            for (a, b) in rest[0].iter_mut().zip(q) {
                *a -= dot * b;
            }
        }
        let norm: f64 = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut cols[j] {
            *v /= norm;
        }
    }
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            data[i * n + j] = cols[j][i];
        }
    }
    Matrix::from_vec(n, n, data).unwrap()
}

/// Symmetric matrix `Q·diag(eigs)·Qᵀ`, exactly symmetrized.
pub fn spd_with_spectrum(rng: &mut ChaCha8Rng, eigs: &[f64]) -> Matrix {
    let n = eigs.len();
    let q = random_orthogonal(rng, n);
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..n).map(|p| q.get(i, p) * eigs[p] * q.get(j, p)).sum();
            data[i * n + j] = s;
            data[j * n + i] = s;
        }
    }
    Matrix::from_vec(n, n, data).unwrap()
}

/// Log-uniform spectrum in `[lo, hi]` with both ends hit.
pub fn log_spectrum(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut e: Vec<f64> = (0..n)
        .map(|_| (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp())
        .collect();
    e[0] = lo;
    if n > 1 {
        e[n - 1] = hi;
    }
    e
}
