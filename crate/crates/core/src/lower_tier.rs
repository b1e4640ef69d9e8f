//! Feature tier: a frozen random projection followed by a linear readout that
//! is fit in one pass over the data.
//!
//! Fitting streams `(Φ, Y)` chunks into a [`NormalEqAccumulator`], which keeps
//! only `G = ΦᵀΦ` and `C = ΦᵀY`, and then solves `(G + λI)·W = C` once. The
//! identity nonlinearity with an identity projection recovers plain ridge
//! regression on the raw inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{add_scaled_identity, matmul, solve_spd, Matrix};

/// Default ridge strength, absolute (not trace-scaled).
pub const DEFAULT_LAMBDA_RIDGE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl Nonlinearity {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => v.tanh(),
            Nonlinearity::Relu => v.max(0.0),
            Nonlinearity::Identity => v,
        }
    }
}

/// Glorot-uniform bound `sqrt(6/(d_in+h))`.
pub fn glorot_bound(d_in: usize, h: usize) -> f64 {
    (6.0 / (d_in + h) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    projection: Matrix,
    bias: Vec<f64>,
    nonlinearity: Nonlinearity,
    seed: u64,
}

impl FeatureMap {
    /// Draws projection and bias uniformly from `[-s, s]`, `s = sqrt(6/(d_in+h))`.
    /// Identical arguments always give a bit-identical map.
    pub fn init(d_in: usize, h: usize, nonlinearity: Nonlinearity, seed: u64) -> Result<Self> {
        if d_in == 0 {
            return Err(Error::param("d_in", "must be >= 1"));
        }
        if h == 0 {
            return Err(Error::param("h", "must be >= 1"));
        }
        let s = glorot_bound(d_in, h);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj: Vec<f64> = (0..d_in * h).map(|_| rng.random_range(-s..=s)).collect();
        let bias: Vec<f64> = (0..h).map(|_| rng.random_range(-s..=s)).collect();
        Ok(Self {
            projection: Matrix::from_vec(d_in, h, proj)?,
            bias,
            nonlinearity,
            seed,
        })
    }

    /// Assembles a map from explicit parts. `seed` is recorded as 0.
    pub fn from_parts(projection: Matrix, bias: Vec<f64>, nonlinearity: Nonlinearity) -> Result<Self> {
        if bias.len() != projection.cols() {
            return Err(Error::shape(
                "FeatureMap::from_parts",
                projection.dim_str(),
                format!("bias of length {}", bias.len()),
            ));
        }
        if let Some(index) = bias.iter().position(|b| !b.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            projection,
            bias,
            nonlinearity,
            seed: 0,
        })
    }

    pub fn d_in(&self) -> usize {
        self.projection.rows()
    }

    pub fn h(&self) -> usize {
        self.projection.cols()
    }

    pub fn projection(&self) -> &Matrix {
        &self.projection
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn nonlinearity(&self) -> Nonlinearity {
        self.nonlinearity
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `nonlinearity(x·projection + bias)`, bias broadcast per row.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.d_in() {
            return Err(Error::shape("apply_features", x.dim_str(), self.projection.dim_str()));
        }
        let mut phi = matmul(x, &self.projection)?;
        for r in 0..phi.rows() {
            for (v, b) in phi.row_mut(r).iter_mut().zip(&self.bias) {
                *v = self.nonlinearity.apply(*v + b);
            }
        }
        phi.check_finite()?;
        Ok(phi)
    }

    /// Little-endian byte image of the map, used for freeze checks.
    pub fn write_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.d_in() as u64).to_le_bytes());
        out.extend_from_slice(&(self.h() as u64).to_le_bytes());
        out.push(self.nonlinearity as u8);
        out.extend_from_slice(&self.seed.to_le_bytes());
        for v in self.projection.as_slice().iter().chain(&self.bias) {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
}

/// Running sums `G = ΦᵀΦ` and `C = ΦᵀY` over all absorbed rows.
///
/// Single writer. Parallel ingestion uses one accumulator per worker and
/// [`merge`](Self::merge)s them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalEqAccumulator {
    gram: Matrix,
    cross: Matrix,
    count: usize,
}

impl NormalEqAccumulator {
    pub fn new(h: usize, k: usize) -> Self {
        Self {
            gram: Matrix::zeros(h, h),
            cross: Matrix::zeros(h, k),
            count: 0,
        }
    }

    /// Builds an accumulator from precomputed sums. `gram` must be square and
    /// symmetric.
    pub fn from_parts(gram: Matrix, cross: Matrix, count: usize) -> Result<Self> {
        if !gram.is_square() || gram.rows() != cross.rows() {
            return Err(Error::shape("NormalEqAccumulator::from_parts", gram.dim_str(), cross.dim_str()));
        }
        for i in 0..gram.rows() {
            for j in 0..i {
                if gram.get(i, j) != gram.get(j, i) {
                    return Err(Error::param("gram", format!("not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { gram, cross, count })
    }

    pub fn h(&self) -> usize {
        self.gram.rows()
    }

    pub fn k(&self) -> usize {
        self.cross.cols()
    }

    pub fn gram(&self) -> &Matrix {
        &self.gram
    }

    pub fn cross(&self) -> &Matrix {
        &self.cross
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Absorbs one chunk: `G += ΦcᵀΦc`, `C += ΦcᵀYc`.
    pub fn accumulate(&mut self, phi: &Matrix, y: &Matrix) -> Result<()> {
        let (h, k) = (self.h(), self.k());
        if phi.cols() != h {
            return Err(Error::shape("accumulate", phi.dim_str(), self.gram.dim_str()));
        }
        if y.cols() != k || y.rows() != phi.rows() {
            return Err(Error::shape("accumulate", phi.dim_str(), y.dim_str()));
        }
        // Upper triangle only, mirrored afterwards so G stays exactly symmetric.
        for r in 0..phi.rows() {
            let prow = phi.row(r);
            let yrow = y.row(r);
            for i in 0..h {
                let pi = prow[i];
                if pi == 0.0 {
                    continue;
                }
                let grow = self.gram.row_mut(i);
                for j in i..h {
                    grow[j] += pi * prow[j];
                }
                for (c, &yv) in self.cross.row_mut(i).iter_mut().zip(yrow) {
                    *c += pi * yv;
                }
            }
        }
        self.mirror_upper();
        self.count += phi.rows();
        self.gram.check_finite()?;
        self.cross.check_finite()
    }

    /// Entry-wise sum of two accumulators.
    pub fn merge(&mut self, other: &NormalEqAccumulator) -> Result<()> {
        if self.gram.dims() != other.gram.dims() || self.cross.dims() != other.cross.dims() {
            return Err(Error::shape("merge", self.cross.dim_str(), other.cross.dim_str()));
        }
        let h = self.h();
        for i in 0..h {
            for j in i..h {
                let v = self.gram.get(i, j) + other.gram.get(i, j);
                self.gram.set(i, j, v);
            }
            for c in 0..self.k() {
                let v = self.cross.get(i, c) + other.cross.get(i, c);
                self.cross.set(i, c, v);
            }
        }
        self.mirror_upper();
        self.count += other.count;
        Ok(())
    }

    fn mirror_upper(&mut self) {
        let h = self.h();
        for i in 0..h {
            for j in i + 1..h {
                let v = self.gram.get(i, j);
                self.gram.set(j, i, v);
            }
        }
    }
}

/// Closed-form readout weights `W = (G + λI)⁻¹ C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeSolution {
    weights: Matrix,
    lambda_ridge: f64,
    /// Mean squared training residual over all `N·k` target entries; only
    /// present if a second pass was requested.
    train_residual: Option<f64>,
}

impl RidgeSolution {
    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn lambda_ridge(&self) -> f64 {
        self.lambda_ridge
    }

    pub fn train_residual(&self) -> Option<f64> {
        self.train_residual
    }

    /// Optional second pass: records the mean squared residual of `Φ·W − Y`.
    pub fn attach_residual(&mut self, phi: &Matrix, y: &Matrix) -> Result<f64> {
        let pred = matmul(phi, &self.weights)?;
        let diff = pred.sub(y)?;
        let n = diff.as_slice().len();
        let mse = if n == 0 {
            0.0
        } else {
            diff.as_slice().iter().map(|v| v * v).sum::<f64>() / n as f64
        };
        self.train_residual = Some(mse);
        Ok(mse)
    }

    pub fn write_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.weights.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(self.weights.cols() as u64).to_le_bytes());
        out.extend_from_slice(&self.lambda_ridge.to_bits().to_le_bytes());
        for v in self.weights.as_slice() {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
}

/// Solves `(G + λI)·W = C` from the accumulator state.
pub fn solve_ridge(acc: &NormalEqAccumulator, lambda_ridge: f64) -> Result<RidgeSolution> {
    if acc.count == 0 {
        return Err(Error::param("accumulator", "no rows absorbed"));
    }
    if !(lambda_ridge > 0.0 && lambda_ridge.is_finite()) {
        return Err(Error::param("lambda_ridge", format!("must be > 0, got {lambda_ridge}")));
    }
    let system = add_scaled_identity(&acc.gram, lambda_ridge)?;
    let weights = solve_spd(&system, &acc.cross)?;
    Ok(RidgeSolution {
        weights,
        lambda_ridge,
        train_residual: None,
    })
}

/// One-hot target matrix, `N×k`.
pub fn one_hot(labels: &[usize], k: usize) -> Result<Matrix> {
    let mut y = Matrix::zeros(labels.len(), k);
    for (r, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::param("labels", format!("label {l} at row {r} is out of range for k={k}")));
        }
        y.set(r, l, 1.0);
    }
    Ok(y)
}

/// Per-row argmax; the smallest index wins ties.
pub fn argmax_rows(scores: &Matrix) -> Vec<usize> {
    (0..scores.rows())
        .map(|r| {
            let row = scores.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Streams `(x, targets)` through the map in `chunk_rows` slices and returns
/// the filled accumulator.
pub fn accumulate_streaming(
    map: &FeatureMap,
    x: &Matrix,
    targets: &Matrix,
    chunk_rows: usize,
) -> Result<NormalEqAccumulator> {
    if chunk_rows == 0 {
        return Err(Error::param("chunk_rows", "must be >= 1"));
    }
    if x.rows() != targets.rows() {
        return Err(Error::shape("accumulate_streaming", x.dim_str(), targets.dim_str()));
    }
    let mut acc = NormalEqAccumulator::new(map.h(), targets.cols());
    let mut start = 0;
    while start < x.rows() {
        let end = (start + chunk_rows).min(x.rows());
        let phi = map.apply(&x.slice_rows(start, end))?;
        acc.accumulate(&phi, &targets.slice_rows(start, end))?;
        start = end;
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub scores: Matrix,
    pub labels: Vec<usize>,
}

pub fn predict(map: &FeatureMap, sol: &RidgeSolution, x: &Matrix) -> Result<Prediction> {
    let phi = map.apply(x)?;
    let scores = matmul(&phi, &sol.weights)?;
    let labels = argmax_rows(&scores);
    Ok(Prediction { scores, labels })
}
