mod common;

use common::*;
use hybridfit_core::datapath::{
    build_cost_report, count_direct_ops, count_sgd_ops, emulate_direct_solve, quantize, CostModel,
    FixedPointEmulator, FixedPointFormat, Workload,
};
use hybridfit_core::lower_tier::NormalEqAccumulator;
use hybridfit_core::upper_tier::HeadShape;
use proptest::prelude::*;

fn well_conditioned(seed: u64, h: usize, k: usize) -> NormalEqAccumulator {
    let mut r = rng(seed);
    let eigs = log_spectrum(&mut r, h, 1.0, 100.0);
    let g = spd_with_spectrum(&mut r, &eigs);
    let c = uniform(&mut r, h, k, -1.0, 1.0);
    NormalEqAccumulator::from_parts(g, c, h).unwrap()
}

#[test]
fn one_third_rounds_to_nearest_raw() {
    // 65536/3 = 21845.33…
    let (v, sat) = quantize(1.0 / 3.0, FixedPointFormat::Q16_16).unwrap();
    assert_eq!(v.raw(), (65536.0f64 / 3.0).round() as i64);
    assert!(!sat);
    assert!(quantize(1e9, FixedPointFormat::Q16_16).unwrap().1);
}

#[test]
fn emulator_tally_equals_formula() {
    for (h, k) in [(1, 1), (2, 1), (3, 4), (8, 2), (16, 10), (33, 3)] {
        let acc = well_conditioned(h as u64 * 31 + k as u64, h, k);
        let rep = emulate_direct_solve(&acc, 1e-3, FixedPointFormat::Q16_16).unwrap();
        let counts = count_direct_ops(500, 4, h, k).unwrap();
        assert_eq!(rep.ops, counts.factor + counts.solve, "h={h} k={k}");
    }
}

#[test]
fn q16_16_fidelity_on_well_conditioned_systems() {
    let mut worst: f64 = 0.0;
    for trial in 0..50u64 {
        let h = 1 + (trial as usize % 16);
        let acc = well_conditioned(1000 + trial, h, 2);
        let rep = emulate_direct_solve(&acc, 0.0, FixedPointFormat::Q16_16).unwrap();
        assert_eq!(rep.saturations, 0, "trial {trial}");
        worst = worst.max(rep.max_abs_err_vs_float);
    }
    eprintln!("Q16.16 worst max_abs_err over 50 trials: {worst:e}");
    assert!(worst <= 1e-2, "worst {worst}");
}

#[test]
fn wider_fraction_reduces_error() {
    let acc = well_conditioned(77, 12, 3);
    let coarse = emulate_direct_solve(&acc, 0.0, FixedPointFormat::new(16, 8).unwrap()).unwrap();
    let fine = emulate_direct_solve(&acc, 0.0, FixedPointFormat::new(16, 30).unwrap()).unwrap();
    assert!(fine.max_abs_err_vs_float < coarse.max_abs_err_vs_float);
}

#[test]
fn sgd_cost_grows_with_epochs_direct_does_not() {
    let direct = count_direct_ops(1000, 32, 64, 10).unwrap();
    let mut prev = 0;
    for e in 1..50 {
        let s = count_sgd_ops(1000, 64, 10, e, HeadShape::Linear).unwrap();
        assert!(s.macs > prev);
        prev = s.macs;
    }
    assert_eq!(direct, count_direct_ops(1000, 32, 64, 10).unwrap());
}

#[test]
fn energy_scales_linearly_in_mac_cost() {
    let work = Workload {
        n: 300,
        d_in: 8,
        h: 32,
        k: 4,
        epochs: 7,
        head: HeadShape::Linear,
        chunk_rows: 64,
    };
    let direct = count_direct_ops(work.n, work.d_in, work.h, work.k).unwrap();
    let sgd = count_sgd_ops(work.n, work.h, work.k, work.epochs, work.head).unwrap();
    let base = CostModel::default();
    let mem_only = |r: &hybridfit_core::datapath::CostReport, m: &CostModel| {
        (
            r.direct_energy - r.direct_mem_words as f64 * m.e_mem,
            r.sgd_energy - r.sgd_mem_words as f64 * m.e_mem,
        )
    };
    let r1 = build_cost_report(&work, &direct, &sgd, &base).unwrap();
    for c in [2.0, 0.5, 8.0] {
        let scaled = CostModel {
            e_mac: base.e_mac * c,
            ..base
        };
        let rc = build_cost_report(&work, &direct, &sgd, &scaled).unwrap();
        let (d1, s1) = mem_only(&r1, &base);
        let (dc, sc) = mem_only(&rc, &scaled);
        assert_eq!(dc, c * d1);
        assert_eq!(sc, c * s1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn quantization_error_is_half_a_step(x in -65536.0f64..65535.0, frac in 1u32..30) {
        let fmt = FixedPointFormat::new(16, frac).unwrap();
        let mut emu = FixedPointEmulator::new(fmt).unwrap();
        let v = emu.quantize(x);
        prop_assert_eq!(emu.saturations(), 0);
        prop_assert!((emu.to_f64(v) - x).abs() <= fmt.resolution() / 2.0);
    }

    #[test]
    fn crossover_is_tight(n in 1usize..5000, d in 1usize..64, h in 1usize..128, k in 1usize..20) {
        let direct = count_direct_ops(n, d, h, k).unwrap();
        let work = Workload { n, d_in: d, h, k, epochs: 1, head: HeadShape::Linear, chunk_rows: 1 };
        let sgd1 = count_sgd_ops(n, h, k, 1, HeadShape::Linear).unwrap();
        let rep = build_cost_report(&work, &direct, &sgd1, &CostModel::default()).unwrap();
        let e = rep.crossover_epochs as usize;
        prop_assert!(count_sgd_ops(n, h, k, e, HeadShape::Linear).unwrap().macs > direct.macs);
        if e > 1 {
            prop_assert!(count_sgd_ops(n, h, k, e - 1, HeadShape::Linear).unwrap().macs <= direct.macs);
        }
    }
}

#[test]
fn cost_report_json_is_stable_and_strict() {
    let work = Workload {
        n: 1000,
        d_in: 16,
        h: 64,
        k: 10,
        epochs: 5,
        head: HeadShape::Linear,
        chunk_rows: 64,
    };
    let direct = count_direct_ops(work.n, work.d_in, work.h, work.k).unwrap();
    let sgd = count_sgd_ops(work.n, work.h, work.k, work.epochs, work.head).unwrap();
    let report = build_cost_report(&work, &direct, &sgd, &CostModel::default()).unwrap();
    let text = serde_json::to_string(&report).unwrap();
    let back: hybridfit_core::datapath::CostReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, report);
    assert_eq!(serde_json::to_string(&back).unwrap(), text);
    let extra = text.replacen('{', "{\"bogus\":1,", 1);
    assert!(serde_json::from_str::<hybridfit_core::datapath::CostReport>(&extra).is_err());
}
