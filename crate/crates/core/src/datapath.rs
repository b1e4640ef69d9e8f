//! Desk-scale model of a hardware solver datapath.
//!
//! Three pieces live here:
//!
//! * a signed Q-format fixed-point emulator (round-to-nearest-even,
//!   saturating) with an instrumented operation counter,
//! * a fixed-point direct solve of `(G + λI)·W = C`,
//! * closed-form operation and memory-traffic counts for the direct solve and
//!   for iterative SGD training of the same readout, turned into relative
//!   energy figures by a [`CostModel`].
//!
//! All energy numbers are model units, never joules.
//!
//! # Counting conventions
//!
//! One counted operation is a multiply-accumulate, a plain multiply, or a
//! divide/reciprocal. Additions without a product are free.
//!
//! Direct solve for `N` rows, `d_in` inputs, `h` features, `k` outputs:
//!
//! | term       | count                    |
//! |------------|--------------------------|
//! | featurize  | `N·d_in·h`               |
//! | gram       | `N·h(h+1)/2` (upper triangle) |
//! | cross      | `N·h·k`                  |
//! | factor     | `h(h+1)(h+2)/6`          |
//! | solve      | `h²·k`                   |
//!
//! The factor is the square-root-free Cholesky variant `A = M·D·Mᵀ` with `M`
//! unit lower triangular. Entry `(i, j)` of the lower triangle costs `j`
//! MACs plus one finishing op (a divide off the diagonal, the pivot
//! reciprocal on it), which sums to `h(h+1)(h+2)/6`. Each right-hand column
//! then costs `h(h−1)/2` MACs forward, `h` pivot scalings, and `h(h−1)/2`
//! MACs backward: `h²`. The emulator executes exactly this schedule, so its
//! tally equals the factor + solve terms.
//!
//! Direct-solve memory words, streaming inputs read once with `G` and `C`
//! resident on chip:
//! `N·d_in + N·k` (inputs and targets) `+ d_in·h + h` (projection and bias)
//! `+ h(h+1)/2 + h·k` (resident state handed to the solver) `+ h·k` (weights
//! written back).
//!
//! SGD training of the same readout, per epoch:
//!
//! * linear head: forward `N·h·k`, weight gradients `N·h·k`, update `h·k`.
//!   Input gradients are not needed for the topmost layer and are not
//!   counted. Bias arithmetic is additions only.
//! * one hidden layer of `m` units: forward `N(h·m + m·k)`, weight gradients
//!   `N(h·m + m·k)`, hidden-activation gradients `N·m·k`, update `h·m + m·k`.
//! * memory words: `N·h + N` (features and labels) `+ 2·P` (weights read and
//!   written once), `P` the weight count.
//!
//! Everything scales linearly in epochs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{add_scaled_identity, solve_spd, Matrix};
use crate::lower_tier::NormalEqAccumulator;
use crate::upper_tier::HeadShape;

/// Signed fixed-point format with `int_bits` integer and `frac_bits`
/// fractional bits plus a sign bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedPointFormat {
    pub int_bits: u32,
    pub frac_bits: u32,
}

impl Default for FixedPointFormat {
    fn default() -> Self {
        Self::Q16_16
    }
}

impl FixedPointFormat {
    pub const Q16_16: FixedPointFormat = FixedPointFormat {
        int_bits: 16,
        frac_bits: 16,
    };

    pub fn new(int_bits: u32, frac_bits: u32) -> Result<Self> {
        let fmt = Self { int_bits, frac_bits };
        fmt.validate()?;
        Ok(fmt)
    }

    pub fn validate(&self) -> Result<()> {
        if self.int_bits + self.frac_bits + 1 > 64 {
            return Err(Error::param(
                "fixed_format",
                format!("int_bits + frac_bits + 1 must be <= 64, got {}", self.int_bits + self.frac_bits + 1),
            ));
        }
        if self.int_bits + self.frac_bits == 0 {
            return Err(Error::param("fixed_format", "needs at least one magnitude bit"));
        }
        Ok(())
    }

    pub fn max_raw(&self) -> i64 {
        ((1i128 << (self.int_bits + self.frac_bits)) - 1) as i64
    }

    pub fn min_raw(&self) -> i64 {
        (-(1i128 << (self.int_bits + self.frac_bits))) as i64
    }

    /// `2^-frac_bits`
    pub fn resolution(&self) -> f64 {
        (-(self.frac_bits as f64)).exp2()
    }

    pub fn max_value(&self) -> f64 {
        self.max_raw() as f64 * self.resolution()
    }

    pub fn min_value(&self) -> f64 {
        self.min_raw() as f64 * self.resolution()
    }
}

/// A raw two's-complement fixed-point word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Fixed(pub i64);

impl Fixed {
    pub fn raw(self) -> i64 {
        self.0
    }

    pub fn to_f64(self, fmt: FixedPointFormat) -> f64 {
        self.0 as f64 * fmt.resolution()
    }
}

/// Arithmetic in one fixed-point format, counting executed operations and
/// saturation events. One instance per thread.
#[derive(Debug, Clone)]
pub struct FixedPointEmulator {
    fmt: FixedPointFormat,
    saturations: u64,
    ops: u64,
}

impl FixedPointEmulator {
    pub fn new(fmt: FixedPointFormat) -> Result<Self> {
        fmt.validate()?;
        Ok(Self {
            fmt,
            saturations: 0,
            ops: 0,
        })
    }

    pub fn format(&self) -> FixedPointFormat {
        self.fmt
    }

    pub fn saturations(&self) -> u64 {
        self.saturations
    }

    /// Counted multiply/MAC/divide operations.
    pub fn ops(&self) -> u64 {
        self.ops
    }

    /// 1.0, or the largest representable value when `int_bits == 0`.
    pub fn one(&self) -> Fixed {
        Fixed((1i64 << self.fmt.frac_bits).min(self.fmt.max_raw()))
    }

    /// Nearest representable value, ties to even, saturating. NaN maps to
    /// zero and counts as a saturation.
    pub fn quantize(&mut self, x: f64) -> Fixed {
        if x.is_nan() {
            self.saturations += 1;
            return Fixed(0);
        }
        let scaled = (x * (self.fmt.frac_bits as f64).exp2()).round_ties_even();
        if scaled > self.fmt.max_raw() as f64 {
            self.saturations += 1;
            return Fixed(self.fmt.max_raw());
        }
        if scaled < self.fmt.min_raw() as f64 {
            self.saturations += 1;
            return Fixed(self.fmt.min_raw());
        }
        // `as` saturates at the i64 edges, which coincide with the format
        // edges for 63-bit magnitudes.
        Fixed((scaled as i64).clamp(self.fmt.min_raw(), self.fmt.max_raw()))
    }

    pub fn to_f64(&self, v: Fixed) -> f64 {
        v.to_f64(self.fmt)
    }

    /// `acc + a·b`: the product is kept at double fractional precision and
    /// the sum is rounded once.
    pub fn mac(&mut self, acc: Fixed, a: Fixed, b: Fixed) -> Fixed {
        self.ops += 1;
        let f = self.fmt.frac_bits;
        let wide = ((acc.0 as i128) << f) + (a.0 as i128) * (b.0 as i128);
        let v = round_shift(wide, f);
        self.saturate(v)
    }

    /// `acc − a·b`, single rounding.
    pub fn msub(&mut self, acc: Fixed, a: Fixed, b: Fixed) -> Fixed {
        self.ops += 1;
        let f = self.fmt.frac_bits;
        let wide = ((acc.0 as i128) << f) - (a.0 as i128) * (b.0 as i128);
        let v = round_shift(wide, f);
        self.saturate(v)
    }

    pub fn mul(&mut self, a: Fixed, b: Fixed) -> Fixed {
        self.mac(Fixed(0), a, b)
    }

    /// `a / b`, rounded to nearest even. Division by zero saturates toward
    /// the sign of `a` (zero for `0/0`).
    pub fn div(&mut self, a: Fixed, b: Fixed) -> Fixed {
        self.ops += 1;
        if b.0 == 0 {
            self.saturations += 1;
            return Fixed(match a.0.signum() {
                1 => self.fmt.max_raw(),
                -1 => self.fmt.min_raw(),
                _ => 0,
            });
        }
        let num = (a.0 as i128) << self.fmt.frac_bits;
        let den = b.0 as i128;
        let negative = (num < 0) != (den < 0);
        let (n, d) = (num.abs(), den.abs());
        let mut q = n / d;
        let r = n % d;
        if 2 * r > d || (2 * r == d && q & 1 == 1) {
            q += 1;
        }
        self.saturate(if negative { -q } else { q })
    }

    fn saturate(&mut self, v: i128) -> Fixed {
        if v > self.fmt.max_raw() as i128 {
            self.saturations += 1;
            Fixed(self.fmt.max_raw())
        } else if v < self.fmt.min_raw() as i128 {
            self.saturations += 1;
            Fixed(self.fmt.min_raw())
        } else {
            Fixed(v as i64)
        }
    }
}

/// `v / 2^shift` rounded to nearest, ties to even.
fn round_shift(v: i128, shift: u32) -> i128 {
    if shift == 0 {
        return v;
    }
    let q = v >> shift; // floor
    let rem = v - (q << shift);
    let half = 1i128 << (shift - 1);
    if rem > half || (rem == half && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

/// Single-shot helpers for callers that do not need an emulator instance.
pub fn quantize(x: f64, fmt: FixedPointFormat) -> Result<(Fixed, bool)> {
    let mut emu = FixedPointEmulator::new(fmt)?;
    let v = emu.quantize(x);
    Ok((v, emu.saturations() > 0))
}

pub fn fixed_mac(acc: Fixed, a: Fixed, b: Fixed, fmt: FixedPointFormat) -> Result<(Fixed, bool)> {
    let mut emu = FixedPointEmulator::new(fmt)?;
    let v = emu.mac(acc, a, b);
    Ok((v, emu.saturations() > 0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmulationReport {
    pub weights: Matrix,
    /// Element-wise max `|W_fixed − W_float|`.
    pub max_abs_err_vs_float: f64,
    pub saturations: u64,
    /// Counted factor + solve operations.
    pub ops: u64,
}

/// Solves `(G + λI)·W = C` entirely in `fmt` arithmetic and compares the
/// result to the 64-bit float solve.
pub fn emulate_direct_solve(acc: &NormalEqAccumulator, lambda: f64, fmt: FixedPointFormat) -> Result<EmulationReport> {
    let system = add_scaled_identity(acc.gram(), lambda)?;
    let reference = solve_spd(&system, acc.cross())?;

    let mut emu = FixedPointEmulator::new(fmt)?;
    let n = system.rows();
    let k = acc.cross().cols();
    let q = |emu: &mut FixedPointEmulator, m: &Matrix| -> Vec<Fixed> {
        m.as_slice().iter().map(|&v| emu.quantize(v)).collect()
    };
    let a = q(&mut emu, &system);
    let b = q(&mut emu, acc.cross());

    // A = M·D·Mᵀ. `t[i][j]` holds M[i][j]·D[j] for j < i.
    let mut unit = vec![Fixed(0); n * n];
    let mut scaled = vec![Fixed(0); n * n];
    let mut recip = vec![Fixed(0); n];
    for j in 0..n {
        let mut s = a[j * n + j];
        for p in 0..j {
            s = emu.msub(s, scaled[j * n + p], unit[j * n + p]);
        }
        if s.0 <= 0 {
            return Err(Error::NotPositiveDefiniteQuantized { pivot: j });
        }
        let one = emu.one();
        recip[j] = emu.div(one, s);
        for i in j + 1..n {
            let mut t = a[i * n + j];
            for p in 0..j {
                t = emu.msub(t, scaled[i * n + p], unit[j * n + p]);
            }
            scaled[i * n + j] = t;
            unit[i * n + j] = emu.div(t, s);
        }
    }

    let mut w = vec![0.0; n * k];
    let mut col = vec![Fixed(0); n];
    for c in 0..k {
        // M p = b
        for i in 0..n {
            let mut v = b[i * k + c];
            for j in 0..i {
                v = emu.msub(v, unit[i * n + j], col[j]);
            }
            col[i] = v;
        }
        // D⁻¹
        for i in 0..n {
            col[i] = emu.mul(col[i], recip[i]);
        }
        // Mᵀ x = q
        for i in (0..n).rev() {
            let mut v = col[i];
            for j in i + 1..n {
                v = emu.msub(v, unit[j * n + i], col[j]);
            }
            col[i] = v;
        }
        for i in 0..n {
            w[i * k + c] = emu.to_f64(col[i]);
        }
    }
    let weights = Matrix::from_vec(n, k, w)?;
    let max_abs_err_vs_float = weights.sub(&reference)?.max_abs();
    Ok(EmulationReport {
        weights,
        max_abs_err_vs_float,
        saturations: emu.saturations(),
        ops: emu.ops(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectOpCount {
    pub featurize: u64,
    pub gram: u64,
    pub cross: u64,
    pub factor: u64,
    pub solve: u64,
    pub macs: u64,
    pub mem_words: u64,
}

impl DirectOpCount {
    /// Operations the fixed-point emulator executes.
    pub fn solver_macs(&self) -> u64 {
        self.factor + self.solve
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SgdOpCount {
    pub per_epoch_macs: u64,
    pub per_epoch_mem_words: u64,
    pub epochs: u64,
    pub macs: u64,
    pub mem_words: u64,
}

fn mul_all(terms: &[u64]) -> Result<u64> {
    terms
        .iter()
        .try_fold(1u64, |acc, &t| acc.checked_mul(t))
        .ok_or_else(|| Error::param("dims", "operation count overflows u64"))
}

fn sum_all(terms: &[u64]) -> Result<u64> {
    terms
        .iter()
        .try_fold(0u64, |acc, &t| acc.checked_add(t))
        .ok_or_else(|| Error::param("dims", "operation count overflows u64"))
}

fn require_positive(name: &'static str, v: usize) -> Result<u64> {
    if v == 0 {
        Err(Error::param(name, "must be >= 1"))
    } else {
        Ok(v as u64)
    }
}

/// Direct-solve operation and memory-word counts.
pub fn count_direct_ops(n: usize, d_in: usize, h: usize, k: usize) -> Result<DirectOpCount> {
    let n = require_positive("N", n)?;
    let d = require_positive("d_in", d_in)?;
    let h = require_positive("h", h)?;
    let k = require_positive("k", k)?;
    let featurize = mul_all(&[n, d, h])?;
    let gram = mul_all(&[n, h, h + 1])? / 2;
    let cross = mul_all(&[n, h, k])?;
    let factor = mul_all(&[h, h + 1, h + 2])? / 6;
    let solve = mul_all(&[h, h, k])?;
    let macs = sum_all(&[featurize, gram, cross, factor, solve])?;
    let mem_words = sum_all(&[
        mul_all(&[n, d])?,
        mul_all(&[n, k])?,
        mul_all(&[d, h])?,
        h,
        mul_all(&[h, h + 1])? / 2,
        mul_all(&[h, k])?,
        mul_all(&[h, k])?,
    ])?;
    Ok(DirectOpCount {
        featurize,
        gram,
        cross,
        factor,
        solve,
        macs,
        mem_words,
    })
}

/// Iterative-training counts for the same `h→k` readout over `epochs`.
pub fn count_sgd_ops(n: usize, h: usize, k: usize, epochs: usize, head: HeadShape) -> Result<SgdOpCount> {
    let n = require_positive("N", n)?;
    let h = require_positive("h", h)?;
    let k = require_positive("k", k)?;
    let e = require_positive("epochs", epochs)?;
    let (per_epoch_macs, weights) = match head {
        HeadShape::Linear => {
            let layer = mul_all(&[n, h, k])?;
            (sum_all(&[layer, layer, mul_all(&[h, k])?])?, mul_all(&[h, k])?)
        }
        HeadShape::Hidden { units } => {
            let m = require_positive("head_hidden", units)?;
            let w = sum_all(&[mul_all(&[h, m])?, mul_all(&[m, k])?])?;
            let pass = mul_all(&[n, w])?;
            let hidden_grad = mul_all(&[n, m, k])?;
            (sum_all(&[pass, pass, hidden_grad, w])?, w)
        }
    };
    let per_epoch_mem_words = sum_all(&[mul_all(&[n, h])?, n, mul_all(&[2, weights])?])?;
    Ok(SgdOpCount {
        per_epoch_macs,
        per_epoch_mem_words,
        epochs: e,
        macs: mul_all(&[per_epoch_macs, e])?,
        mem_words: mul_all(&[per_epoch_mem_words, e])?,
    })
}

/// Relative unit costs. Values are configurable model parameters, not
/// measurements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    pub e_mac: f64,
    pub e_mem: f64,
    pub word_bytes: u64,
    pub onchip_budget_bytes: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            e_mac: 1.0,
            e_mem: 5.0,
            word_bytes: 8,
            onchip_budget_bytes: 4 * 1024 * 1024,
        }
    }
}

impl CostModel {
    /// Every field must be positive. `e_mem = 0` is accepted so that a
    /// compute-only model can be expressed.
    pub fn validate(&self) -> Result<()> {
        if !(self.e_mac > 0.0 && self.e_mac.is_finite()) {
            return Err(Error::param("e_mac", format!("must be > 0, got {}", self.e_mac)));
        }
        if !(self.e_mem >= 0.0 && self.e_mem.is_finite()) {
            return Err(Error::param("e_mem", format!("must be >= 0, got {}", self.e_mem)));
        }
        if self.word_bytes == 0 {
            return Err(Error::param("word_bytes", "must be >= 1"));
        }
        if self.onchip_budget_bytes == 0 {
            return Err(Error::param("onchip_budget_bytes", "must be >= 1"));
        }
        Ok(())
    }
}

/// Shape of the workload a report describes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub n: usize,
    pub d_in: usize,
    pub h: usize,
    pub k: usize,
    pub epochs: usize,
    pub head: HeadShape,
    pub chunk_rows: usize,
}

pub const COST_REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostReport {
    pub schema_version: u32,
    pub units: String,
    pub direct_macs: u64,
    pub sgd_macs: u64,
    pub direct_mem_words: u64,
    pub sgd_mem_words: u64,
    pub direct_energy: f64,
    pub sgd_energy: f64,
    pub peak_bytes: u64,
    pub fits_onchip: bool,
    /// Smallest epoch count with `sgd_macs(E) > direct_macs`.
    pub crossover_epochs: f64,
}

/// Smallest `E ≥ 1` with `E·per_epoch > direct`.
pub fn crossover_epochs(direct_macs: u64, per_epoch_macs: u64) -> u64 {
    direct_macs / per_epoch_macs + 1
}

/// `word_bytes·(h² + h·k + chunk_rows·h)`: Gram, cross term, one input chunk.
pub fn peak_bytes(h: usize, k: usize, chunk_rows: usize, word_bytes: u64) -> u64 {
    let (h, k, c) = (h as u64, k as u64, chunk_rows as u64);
    word_bytes * (h * h + h * k + c * h)
}

pub fn build_cost_report(
    work: &Workload,
    direct: &DirectOpCount,
    sgd: &SgdOpCount,
    model: &CostModel,
) -> Result<CostReport> {
    model.validate()?;
    let energy = |macs: u64, words: u64| macs as f64 * model.e_mac + words as f64 * model.e_mem;
    let peak = peak_bytes(work.h, work.k, work.chunk_rows, model.word_bytes);
    Ok(CostReport {
        schema_version: COST_REPORT_SCHEMA_VERSION,
        units: "model units".into(),
        direct_macs: direct.macs,
        sgd_macs: sgd.macs,
        direct_mem_words: direct.mem_words,
        sgd_mem_words: sgd.mem_words,
        direct_energy: energy(direct.macs, direct.mem_words),
        sgd_energy: energy(sgd.macs, sgd.mem_words),
        peak_bytes: peak,
        fits_onchip: peak <= model.onchip_budget_bytes,
        crossover_epochs: crossover_epochs(direct.macs, sgd.per_epoch_macs) as f64,
    })
}

/// Counts both routes for `work` and builds the report.
pub fn cost_report_for(work: &Workload, model: &CostModel) -> Result<CostReport> {
    let direct = count_direct_ops(work.n, work.d_in, work.h, work.k)?;
    let sgd = count_sgd_ops(work.n, work.h, work.k, work.epochs, work.head)?;
    build_cost_report(work, &direct, &sgd, model)
}
