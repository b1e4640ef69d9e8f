//! Adaptive head: a softmax classifier trained incrementally with plain SGD
//! and an elastic-weight-consolidation (EWC) penalty.
//!
//! The update is gradient *descent*, `θ ← θ − η·∇L_EWC`. The source
//! formulation prints the step with a plus sign, which would ascend the loss;
//! that sign is treated as an erratum.
//!
//! The EWC state keeps one anchor (the most recent consolidated optimum) and a
//! running sum of diagonal Fisher estimates, so memory stays `O(|θ|)` however
//! many tasks are consolidated.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::lower_tier::{argmax_rows, glorot_bound};

/// Head architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadShape {
    /// `linear h→k`
    #[default]
    Linear,
    /// `linear h→m, tanh, linear m→k`
    Hidden { units: usize },
}

impl HeadShape {
    pub fn from_hidden_units(units: usize) -> Self {
        if units == 0 {
            HeadShape::Linear
        } else {
            HeadShape::Hidden { units }
        }
    }

    pub fn num_params(self, input: usize, output: usize) -> usize {
        match self {
            HeadShape::Linear => input * output + output,
            HeadShape::Hidden { units } => input * units + units + units * output + output,
        }
    }
}

/// Classification head over a flat parameter vector.
///
/// Layout, row-major: `W (in×k), b (k)` for a linear head, and
/// `W1 (in×m), b1 (m), W2 (m×k), b2 (k)` with a hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    shape: HeadShape,
    input: usize,
    output: usize,
    params: Vec<f64>,
}

impl Head {
    pub fn zeros(shape: HeadShape, input: usize, output: usize) -> Result<Self> {
        check_head_dims(shape, input, output)?;
        Ok(Self {
            shape,
            input,
            output,
            params: vec![0.0; shape.num_params(input, output)],
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn random(shape: HeadShape, input: usize, output: usize, seed: u64) -> Result<Self> {
        let mut head = Self::zeros(shape, input, output)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |slice: &mut [f64], fan_in: usize, fan_out: usize| {
            let s = glorot_bound(fan_in, fan_out);
            for v in slice {
                *v = rng.random_range(-s..=s);
            }
        };
        match shape {
            HeadShape::Linear => fill(&mut head.params[..input * output], input, output),
            HeadShape::Hidden { units } => {
                let w1 = input * units;
                let w2 = w1 + units;
                fill(&mut head.params[..w1], input, units);
                fill(&mut head.params[w2..w2 + units * output], units, output);
            }
        }
        Ok(head)
    }

    /// Rebuilds a head from a flat parameter vector.
    pub fn from_flat(shape: HeadShape, input: usize, output: usize, params: Vec<f64>) -> Result<Self> {
        check_head_dims(shape, input, output)?;
        let expected = shape.num_params(input, output);
        if params.len() != expected {
            return Err(Error::shape(
                "Head::from_flat",
                format!("{expected} parameters"),
                format!("{} values", params.len()),
            ));
        }
        if let Some(index) = params.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            shape,
            input,
            output,
            params,
        })
    }

    pub fn shape(&self) -> HeadShape {
        self.shape
    }

    pub fn input_dim(&self) -> usize {
        self.input
    }

    pub fn output_dim(&self) -> usize {
        self.output
    }

    /// Flat view `θ_H`.
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.logits)
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }

    pub fn accuracy(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Err(Error::param("labels", "cannot score an empty set"));
        }
        let pred = self.predict(x)?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    fn forward(&self, x: &Matrix) -> Result<Forward> {
        if x.cols() != self.input {
            return Err(Error::shape("head forward", x.dim_str(), format!("{}x{}", self.input, self.output)));
        }
        let (n, k) = (x.rows(), self.output);
        match self.shape {
            HeadShape::Linear => {
                let (w, b) = self.params.split_at(self.input * k);
                let logits = affine(x.as_slice(), n, self.input, w, b, k);
                Ok(Forward {
                    hidden: None,
                    logits: Matrix::from_vec(n, k, logits)?,
                })
            }
            HeadShape::Hidden { units: m } => {
                let p = &self.params;
                let (w1, rest) = p.split_at(self.input * m);
                let (b1, rest) = rest.split_at(m);
                let (w2, b2) = rest.split_at(m * k);
                let mut a = affine(x.as_slice(), n, self.input, w1, b1, m);
                for v in &mut a {
                    *v = v.tanh();
                }
                let logits = affine(&a, n, m, w2, b2, k);
                Ok(Forward {
                    hidden: Some(a),
                    logits: Matrix::from_vec(n, k, logits)?,
                })
            }
        }
    }

    /// Mean softmax cross-entropy and its gradient with respect to `θ_H`.
    fn cross_entropy_grad(&self, x: &Matrix, labels: &[usize]) -> Result<(f64, Vec<f64>, Matrix)> {
        let fwd = self.forward(x)?;
        let (n, k) = (x.rows(), self.output);
        let inv_n = 1.0 / n as f64;
        let mut dz = vec![0.0; n * k];
        let mut ce = 0.0;
        for r in 0..n {
            let z = fwd.logits.row(r);
            let (lse, probs) = log_softmax_parts(z);
            ce += lse - z[labels[r]];
            let drow = &mut dz[r * k..(r + 1) * k];
            for (d, p) in drow.iter_mut().zip(probs) {
                *d = p * inv_n;
            }
            drow[labels[r]] -= inv_n;
        }
        ce *= inv_n;

        let mut grad = vec![0.0; self.params.len()];
        match self.shape {
            HeadShape::Linear => {
                let (gw, gb) = grad.split_at_mut(self.input * k);
                affine_backward(x.as_slice(), n, self.input, &dz, k, gw, gb);
            }
            HeadShape::Hidden { units: m } => {
                let a = fwd.hidden.as_deref().expect("hidden activations");
                let w2 = &self.params[self.input * m + m..self.input * m + m + m * k];
                let (g1, g2) = grad.split_at_mut(self.input * m + m);
                let (gw2, gb2) = g2.split_at_mut(m * k);
                affine_backward(a, n, m, &dz, k, gw2, gb2);
                // back through W2 and tanh
                let mut dpre = vec![0.0; n * m];
                for r in 0..n {
                    let drow = &dz[r * k..(r + 1) * k];
                    for j in 0..m {
                        let wrow = &w2[j * k..(j + 1) * k];
                        let s: f64 = drow.iter().zip(wrow).map(|(d, w)| d * w).sum();
                        let aj = a[r * m + j];
                        dpre[r * m + j] = s * (1.0 - aj * aj);
                    }
                }
                let (gw1, gb1) = g1.split_at_mut(self.input * m);
                affine_backward(x.as_slice(), n, self.input, &dpre, m, gw1, gb1);
            }
        }
        Ok((ce, grad, fwd.logits))
    }

    pub fn write_bytes(&self, out: &mut Vec<u8>) {
        for v in &self.params {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
}

fn check_head_dims(shape: HeadShape, input: usize, output: usize) -> Result<()> {
    if input == 0 {
        return Err(Error::param("head input", "must be >= 1"));
    }
    if output == 0 {
        return Err(Error::param("head output", "must be >= 1"));
    }
    if shape == (HeadShape::Hidden { units: 0 }) {
        return Err(Error::param("head_hidden", "hidden layer needs >= 1 unit"));
    }
    Ok(())
}

struct Forward {
    hidden: Option<Vec<f64>>,
    logits: Matrix,
}

/// `x (n×i) · w (i×o) + b`, row-major.
fn affine(x: &[f64], n: usize, i: usize, w: &[f64], b: &[f64], o: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * o);
    for r in 0..n {
        out.extend_from_slice(b);
        let orow = &mut out[r * o..(r + 1) * o];
        for (p, &xv) in x[r * i..(r + 1) * i].iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (ov, &wv) in orow.iter_mut().zip(&w[p * o..(p + 1) * o]) {
                *ov += xv * wv;
            }
        }
    }
    out
}

/// Accumulates `gw += xᵀ·dz`, `gb += Σ_rows dz`.
fn affine_backward(x: &[f64], n: usize, i: usize, dz: &[f64], o: usize, gw: &mut [f64], gb: &mut [f64]) {
    for r in 0..n {
        let drow = &dz[r * o..(r + 1) * o];
        for (g, d) in gb.iter_mut().zip(drow) {
            *g += d;
        }
        for (p, &xv) in x[r * i..(r + 1) * i].iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (g, d) in gw[p * o..(p + 1) * o].iter_mut().zip(drow) {
                *g += xv * d;
            }
        }
    }
}

/// Returns `(logsumexp(z), softmax(z))`.
fn log_softmax_parts(z: &[f64]) -> (f64, Vec<f64>) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let lse = max + sum.ln();
    (lse, exps.into_iter().map(|e| e / sum).collect())
}

/// Labeled features for the head: `X' (N×h)` and class indices `< k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    features: Matrix,
    labels: Vec<usize>,
}

impl TaskBatch {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::shape(
                "TaskBatch",
                features.dim_str(),
                format!("{} labels", labels.len()),
            ));
        }
        if let Some((r, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::param(
                "labels",
                format!("label {l} at row {r} is out of range for k={num_classes}"),
            ));
        }
        Ok(Self { features, labels })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> TaskBatch {
        TaskBatch {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    fn check_head(&self, head: &Head) -> Result<()> {
        if self.features.cols() != head.input {
            return Err(Error::shape(
                "TaskBatch vs head",
                self.features.dim_str(),
                format!("head input {}", head.input),
            ));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= head.output) {
            return Err(Error::param("labels", format!("label {l} exceeds head output {}", head.output)));
        }
        Ok(())
    }
}

/// EWC anchor `θ*`, accumulated diagonal Fisher `F`, and strength `λ_ewc`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EwcState {
    anchor: Vec<f64>,
    fisher: Vec<f64>,
    lambda_ewc: f64,
    consolidations: usize,
}

impl EwcState {
    /// Empty state: zero Fisher, so the penalty is zero everywhere.
    pub fn new(num_params: usize, lambda_ewc: f64) -> Result<Self> {
        check_lambda_ewc(lambda_ewc)?;
        Ok(Self {
            anchor: vec![0.0; num_params],
            fisher: vec![0.0; num_params],
            lambda_ewc,
            consolidations: 0,
        })
    }

    pub fn from_parts(anchor: Vec<f64>, fisher: Vec<f64>, lambda_ewc: f64) -> Result<Self> {
        check_lambda_ewc(lambda_ewc)?;
        if anchor.len() != fisher.len() {
            return Err(Error::shape(
                "EwcState",
                format!("anchor of length {}", anchor.len()),
                format!("fisher of length {}", fisher.len()),
            ));
        }
        if let Some(index) = fisher.iter().position(|f| !(*f >= 0.0 && f.is_finite())) {
            return Err(Error::param("fisher", format!("entry {index} must be finite and >= 0")));
        }
        Ok(Self {
            anchor,
            fisher,
            lambda_ewc,
            consolidations: 0,
        })
    }

    pub fn anchor(&self) -> &[f64] {
        &self.anchor
    }

    pub fn fisher(&self) -> &[f64] {
        &self.fisher
    }

    pub fn lambda_ewc(&self) -> f64 {
        self.lambda_ewc
    }

    pub fn set_lambda_ewc(&mut self, lambda_ewc: f64) -> Result<()> {
        check_lambda_ewc(lambda_ewc)?;
        self.lambda_ewc = lambda_ewc;
        Ok(())
    }

    pub fn consolidations(&self) -> usize {
        self.consolidations
    }

    pub fn len(&self) -> usize {
        self.anchor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchor.is_empty()
    }

    /// `(λ_ewc/2)·Σ Fᵢ(θᵢ − θ*ᵢ)²`
    pub fn penalty(&self, theta: &[f64]) -> Result<f64> {
        self.check_len("ewc_penalty", theta.len())?;
        if self.lambda_ewc == 0.0 {
            return Ok(0.0);
        }
        let s: f64 = self
            .fisher
            .iter()
            .zip(theta.iter().zip(&self.anchor))
            .map(|(f, (t, a))| f * (t - a) * (t - a))
            .sum();
        Ok(0.5 * self.lambda_ewc * s)
    }

    /// Adds `λ_ewc·Fᵢ(θᵢ − θ*ᵢ)` into `grad`.
    fn add_penalty_grad(&self, theta: &[f64], grad: &mut [f64]) {
        if self.lambda_ewc == 0.0 {
            return;
        }
        for (i, g) in grad.iter_mut().enumerate() {
            *g += self.lambda_ewc * self.fisher[i] * (theta[i] - self.anchor[i]);
        }
    }

    /// Moves the anchor to the current head and adds `f_task` into `F`.
    pub fn consolidate(&mut self, head: &Head, f_task: &[f64]) -> Result<()> {
        self.check_len("consolidate", head.num_params())?;
        self.check_len("consolidate", f_task.len())?;
        if let Some(index) = f_task.iter().position(|f| !(*f >= 0.0 && f.is_finite())) {
            return Err(Error::param("fisher", format!("entry {index} must be finite and >= 0")));
        }
        self.anchor.copy_from_slice(head.params());
        for (f, t) in self.fisher.iter_mut().zip(f_task) {
            *f += t;
        }
        self.consolidations += 1;
        Ok(())
    }

    fn check_len(&self, op: &'static str, len: usize) -> Result<()> {
        if len != self.anchor.len() {
            return Err(Error::shape(
                op,
                format!("EWC state of length {}", self.anchor.len()),
                format!("vector of length {len}"),
            ));
        }
        Ok(())
    }
}

fn check_lambda_ewc(lambda_ewc: f64) -> Result<()> {
    if !(lambda_ewc >= 0.0 && lambda_ewc.is_finite()) {
        return Err(Error::param("lambda_ewc", format!("must be finite and >= 0, got {lambda_ewc}")));
    }
    Ok(())
}

/// Standalone penalty, `(λ_ewc/2)·Σ Fᵢ(θᵢ − θ*ᵢ)²`.
pub fn ewc_penalty(ewc: &EwcState, theta: &[f64]) -> Result<f64> {
    ewc.penalty(theta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    /// `cross_entropy + penalty`
    pub loss: f64,
    pub cross_entropy: f64,
    pub penalty: f64,
    pub logits: Matrix,
}

/// Mean softmax cross-entropy over the batch plus the EWC penalty.
pub fn forward_loss(head: &Head, batch: &TaskBatch, ewc: &EwcState) -> Result<LossEval> {
    let (ce, _, logits) = checked_ce_grad(head, batch, ewc)?;
    let penalty = ewc.penalty(head.params())?;
    Ok(LossEval {
        loss: ce + penalty,
        cross_entropy: ce,
        penalty,
        logits,
    })
}

/// `L_EWC` and `∇_θ L_EWC` by backpropagation.
pub fn loss_and_grad(head: &Head, batch: &TaskBatch, ewc: &EwcState) -> Result<(f64, Vec<f64>)> {
    let (ce, mut grad, _) = checked_ce_grad(head, batch, ewc)?;
    let penalty = ewc.penalty(head.params())?;
    ewc.add_penalty_grad(head.params(), &mut grad);
    Ok((ce + penalty, grad))
}

fn checked_ce_grad(head: &Head, batch: &TaskBatch, ewc: &EwcState) -> Result<(f64, Vec<f64>, Matrix)> {
    if batch.is_empty() {
        return Err(Error::param("batch", "must contain at least one sample"));
    }
    batch.check_head(head)?;
    ewc.check_len("forward_loss", head.num_params())?;
    head.cross_entropy_grad(&batch.features, &batch.labels)
}

/// In-place descent update `θ ← θ − η·g`. Rejects non-finite gradients
/// before touching `θ`.
pub fn sgd_update(theta: &mut [f64], grad: &[f64], eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::param("eta", format!("must be > 0, got {eta}")));
    }
    if theta.len() != grad.len() {
        return Err(Error::shape(
            "sgd_update",
            format!("θ of length {}", theta.len()),
            format!("gradient of length {}", grad.len()),
        ));
    }
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    for (t, g) in theta.iter_mut().zip(grad) {
        *t -= eta * g;
    }
    Ok(())
}

/// One descent step on `L_EWC` for this batch. Returns the loss before the step.
pub fn sgd_step(head: &mut Head, batch: &TaskBatch, ewc: &EwcState, eta: f64) -> Result<f64> {
    let (loss, grad) = loss_and_grad(head, batch, ewc)?;
    sgd_update(&mut head.params, &grad, eta)?;
    Ok(loss)
}

/// Empirical diagonal Fisher: mean over samples of the squared per-sample
/// gradient of `log p(yₙ | xₙ; θ)`, using the observed labels.
pub fn estimate_fisher(head: &Head, data: &TaskBatch) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::param("data", "Fisher estimation needs at least one sample"));
    }
    data.check_head(head)?;
    let mut fisher = vec![0.0; head.num_params()];
    for r in 0..data.len() {
        let x = data.features.slice_rows(r, r + 1);
        let (_, g, _) = head.cross_entropy_grad(&x, &data.labels[r..r + 1])?;
        for (f, gi) in fisher.iter_mut().zip(&g) {
            *f += gi * gi;
        }
    }
    let inv_n = 1.0 / data.len() as f64;
    for f in &mut fisher {
        *f *= inv_n;
    }
    Ok(fisher)
}

/// Plain minibatch SGD settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds the per-epoch minibatch shuffle.
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    /// Full-batch cross-entropy at the end of the epoch.
    pub train_loss: f64,
    /// EWC penalty at the end of the epoch.
    pub ewc_penalty: f64,
}

/// Runs `cfg.epochs` epochs of shuffled minibatch SGD on `L_EWC`.
///
/// `on_epoch` sees the head after every epoch.
pub fn train_head<F>(
    head: &mut Head,
    data: &TaskBatch,
    ewc: &EwcState,
    cfg: &SgdConfig,
    mut on_epoch: F,
) -> Result<Vec<EpochSummary>>
where
    F: FnMut(&EpochSummary, &Head) -> Result<()>,
{
    if cfg.epochs == 0 {
        return Err(Error::param("epochs", "must be >= 1"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::param("batch_size", "must be >= 1"));
    }
    if data.is_empty() {
        return Err(Error::param("data", "training set is empty"));
    }
    data.check_head(head)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            sgd_step(head, &data.select(idx), ewc, cfg.eta)?;
        }
        let eval = forward_loss(head, data, ewc)?;
        let summary = EpochSummary {
            epoch,
            train_loss: eval.cross_entropy,
            ewc_penalty: eval.penalty,
        };
        on_epoch(&summary, head)?;
        out.push(summary);
    }
    Ok(out)
}
