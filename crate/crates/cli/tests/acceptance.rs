//! One test per acceptance criterion. Each prints a single
//! `[PASS]`/`[FAIL]` line with the measured numbers and its tolerance,
//! written straight to stderr so it shows even when output is captured.

use std::io::Write;
use std::process::Command;
use std::time::Instant;

use sla_core::aggregation::{count_operations, OpCounter};
use sla_core::analysis::{decompose_weights, sparse_approx_error, split_weights, synthetic_attention};
use sla_core::check::{
    aggregation_disagreement, degenerate_mask_suite, fd_elementwise, forward_oracle_case, random_mask_with,
    random_sums, FdCase, AGGREGATION_TOL, BACKWARD_TOL, FORWARD_TOL_F32, FORWARD_TOL_F64, GRADIENT_NAMES,
};
use sla_core::config::AggregationStrategy;
use sla_core::feature_maps::FeatureMapKind;
use sla_core::finetune::{toy_finetune, FinetuneConfig, GRAD_CHECK_TOL};
use sla_core::flops::flops_report;
use sla_core::layout::make_block_layout;
use sla_core::mask::{classify_mask, predict_compressed_weights, BlockLabel};
use sla_core::rng::{gaussian_tensor, SplitMix64};
use sla_core::tensor::Tensor;
use sla_core::SlaConfig;

fn report(pass: bool, name: &str, detail: String) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let line = format!("[{tag}] {name}: {detail}\n");
    std::io::stderr().lock().write_all(line.as_bytes()).unwrap();
}

#[test]
fn forward_oracle_equivalence() {
    let started = Instant::now();
    let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
    for case in 0..50u64 {
        let n = [64, 128, 256][case as usize % 3];
        let d = [8, 16][(case as usize / 3) % 2];
        let b_kv = [8, 16, 32][(case as usize / 2) % 3];
        let phi = FeatureMapKind::ALL[(case as usize / 6) % 3];
        let layout = make_block_layout(n, d, 16, b_kv).unwrap();
        let cfg = SlaConfig { phi, ..Default::default() };
        forward_oracle_case::<f64>(&mut |e, _| worst64 = worst64.max(e), &layout, &cfg, 1000 + case).unwrap();
        forward_oracle_case::<f32>(&mut |e, _| worst32 = worst32.max(e), &layout, &cfg, 1000 + case).unwrap();
    }
    let pass = worst64 <= FORWARD_TOL_F64 && worst32 <= FORWARD_TOL_F32;
    report(
        pass,
        "forward oracle equivalence",
        format!(
            "50 cases, max rel err f64 {worst64:.2e} (tol {FORWARD_TOL_F64:e}), f32 {worst32:.2e} (tol {FORWARD_TOL_F32:e}), {:.1}s",
            started.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn degenerate_mask_identities() {
    let mut worst = 0.0f64;
    for (idx, &phi) in FeatureMapKind::ALL.iter().enumerate() {
        for (n, d, b) in [(64, 8, 16), (128, 16, 32), (256, 16, 64)] {
            let layout = make_block_layout(n, d, b, b / 2).unwrap();
            let cfg = SlaConfig { phi, ..Default::default() };
            let seeds: Vec<u64> = (0..3).map(|s| 77 + s + 10 * idx as u64).collect();
            let r = degenerate_mask_suite(&layout, &cfg, &seeds).unwrap();
            worst = worst.max(r.max_error);
        }
    }
    let pass = worst <= FORWARD_TOL_F64;
    report(
        pass,
        "degenerate-mask identities",
        format!("all-critical vs full and all-marginal vs global linear, max rel err {worst:.2e} (tol {FORWARD_TOL_F64:e})"),
    );
    assert!(pass);
}

#[test]
fn backward_finite_differences() {
    let started = Instant::now();
    let mut worst = [0.0f64; 4];
    for seed in 0..20u64 {
        let n = [32, 64][seed as usize % 2];
        let d = [4, 8][(seed as usize / 2) % 2];
        let phi = FeatureMapKind::ALL[seed as usize % 3];
        let layout = make_block_layout(n, d, 16, 8).unwrap();
        let case = FdCase::random(layout, SlaConfig { phi, ..Default::default() }, 500 + seed).unwrap();
        for (w, (err, _)) in worst.iter_mut().zip(fd_elementwise(&case).unwrap()) {
            *w = w.max(err);
        }
    }
    let pass = worst.iter().all(|&e| e <= BACKWARD_TOL);
    let parts: Vec<String> = GRADIENT_NAMES.iter().zip(worst).map(|(n, e)| format!("{n} {e:.2e}")).collect();
    report(
        pass,
        "backward finite differences",
        format!("20 seeds, N<=64, d<=8, {} (tol {BACKWARD_TOL:e}), {:.1}s", parts.join(", "), started.elapsed().as_secs_f64()),
    );
    assert!(pass);
}

#[test]
fn aggregation_equivalence_and_op_counts() {
    let mut rng = SplitMix64::new(2024);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let t_m = 1 + rng.next_below(8);
        let t_n = 1 + rng.next_below(24);
        let d = 1 + rng.next_below(6);
        let sums = random_sums(&mut rng, t_n, d).unwrap();
        let p_marg = rng.next_f64();
        let mask = random_mask_with(&mut rng, t_m, t_n, (1.0 - p_marg) / 2.0, p_marg).unwrap();
        worst = worst.max(aggregation_disagreement(&sums, &mask, &[2, 3, 4]).unwrap());
    }
    let equivalent = worst <= AGGREGATION_TOL;

    // T_n = 64 with exactly half of every row marginal
    let (t_m, t_n, g) = (64usize, 64usize, 4usize);
    let rows: Vec<Vec<bool>> = (0..t_m)
        .map(|_| {
            let mut row: Vec<bool> = (0..t_n).map(|j| j < t_n / 2).collect();
            rng.shuffle(&mut row);
            row
        })
        .collect();
    let direct = count_operations(AggregationStrategy::Direct, g, t_n, rows.iter().map(Vec::as_slice));
    let fr: OpCounter = count_operations(AggregationStrategy::FourRussians, g, t_n, rows.iter().map(Vec::as_slice));
    let bound = direct.additions as f64 / g as f64 + fr.table_build as f64;
    let fr_ops = (fr.additions + fr.table_build) as f64;
    let within = fr_ops <= bound;

    let pass = equivalent && within;
    report(
        pass,
        "aggregation equivalence",
        format!(
            "200 masks, g in {{2,3,4}}, max rel err {worst:.2e} (tol {AGGREGATION_TOL:e}); \
             T_n=64 T_m=64 marginal 0.5 g=4: four-russians {fr_ops} ops ({} adds + {} table) vs bound direct/g + table = {bound} \
             (direct {}), {}",
            fr.additions,
            fr.table_build,
            direct.additions,
            if within { "within bound" } else { "bound exceeded" }
        ),
    );
    assert!(pass);
}

#[test]
fn flops_ratio() {
    let layout = make_block_layout(32768, 128, 64, 64).unwrap();
    let mut rng = SplitMix64::new(0);
    let q: Tensor<f32> = gaussian_tensor(&mut rng, 32768, 128, 1.0);
    let k: Tensor<f32> = gaussian_tensor(&mut rng, 32768, 128, 1.0);
    let mask = classify_mask(&predict_compressed_weights(&q, &k, &layout).unwrap(), 5.0, 10.0).unwrap();
    let r = flops_report(&layout, &mask).unwrap();
    let ratio_ok = (0.050..=0.055).contains(&r.ratio);
    let sparsity_ok = r.sparsity == 0.95;
    let pass = ratio_ok && sparsity_ok;
    report(
        pass,
        "FLOPs ratio",
        format!(
            "N=32768 d=128 b=64 k_h=5 k_l=10: ratio {:.5} (want [0.050, 0.055]), sparsity {:.5} (want 0.95); \
             sparse {} linear {} proj {} mask {} of full {}; critical fraction {:.5}",
            r.ratio,
            r.sparsity,
            r.sparse_flops,
            r.linear_flops,
            r.proj_flops,
            r.mask_flops,
            r.full_flops,
            mask.fraction(BlockLabel::Critical)
        ),
    );
    assert!(pass);
}

/// Std of the Gaussian `Q`, `K` entries for the decomposition diagnostics.
const DECOMPOSITION_QK_STD: f64 = 1.75;

#[test]
fn decomposition_diagnostics() {
    let mut worst_ratio = 0.0f64;
    let mut identity_exact = true;
    for seed in 0..10u64 {
        let p = synthetic_attention(seed, 512, 64, DECOMPOSITION_QK_STD).unwrap();
        let (top, rest) = split_weights(&p, 0.08).unwrap();
        identity_exact &= top.add(&rest).unwrap() == p;
        let r = decompose_weights(&p, 0.08).unwrap();
        worst_ratio = worst_ratio.max(r.stable_rank_rest / r.stable_rank_full);
    }
    let pass = worst_ratio < 0.5 && identity_exact;
    report(
        pass,
        "decomposition diagnostics",
        format!(
            "10 matrices N=512 d=64 (Q, K std {DECOMPOSITION_QK_STD}), top 8%: max sr(rest)/sr(full) {worst_ratio:.4} (want < 0.5), identity exact: {identity_exact}"
        ),
    );
    assert!(pass);
}

#[test]
fn sparse_error_monotonicity() {
    let fractions = [0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9, 1.0];
    let mut monotone = true;
    let mut zero_at_one = true;
    let mut worst_rise = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = SplitMix64::new(300 + seed);
        let q: Tensor<f64> = gaussian_tensor(&mut rng, 256, 32, 1.0);
        let k: Tensor<f64> = gaussian_tensor(&mut rng, 256, 32, 1.0);
        let v: Tensor<f64> = gaussian_tensor(&mut rng, 256, 32, 1.0);
        let curve: Vec<f64> = fractions.iter().map(|&f| sparse_approx_error(&q, &k, &v, f).unwrap()).collect();
        for w in curve.windows(2) {
            if w[1] > w[0] {
                monotone = false;
                worst_rise = worst_rise.max(w[1] - w[0]);
            }
        }
        zero_at_one &= *curve.last().unwrap() == 0.0;
    }
    let pass = monotone && zero_at_one;
    report(
        pass,
        "sparse-error monotonicity",
        format!("10 seeds x 10 keep fractions: non-increasing {monotone} (largest rise {worst_rise:.2e}), error at 1 exactly 0: {zero_at_one}"),
    );
    assert!(pass);
}

#[test]
fn toy_finetune_halves_loss() {
    let started = Instant::now();
    let mut ratios = Vec::new();
    let mut worst_check = 0.0f64;
    for seed in 0..5u64 {
        let cfg = FinetuneConfig { n: 128, d: 16, d_model: 32, steps: 200, seed, ..Default::default() };
        let r = toy_finetune(&cfg).unwrap();
        ratios.push(r.final_loss / r.initial_loss);
        worst_check = worst_check.max(r.grad_check_error);
    }
    let halved = ratios.iter().filter(|&&r| r <= 0.5).count();
    let pass = halved == 5 && worst_check <= GRAD_CHECK_TOL;
    let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.3}")).collect();
    report(
        pass,
        "toy fine-tune",
        format!(
            "N=128 d=16 200 steps lr {}: final/initial [{}], {halved}/5 <= 0.5; step-0 gradient check {worst_check:.2e} (tol {GRAD_CHECK_TOL:e}), {:.1}s",
            FinetuneConfig::default().lr,
            shown.join(", "),
            started.elapsed().as_secs_f64()
        ),
    );
    assert!(pass);
}

fn run_cli(args: &[&str]) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_sla")).args(args).output().expect("run sla");
    assert!(out.status.code().is_some(), "sla terminated by a signal");
    out.stdout
}

#[test]
fn cli_determinism() {
    let check = ["check", "--seed", "11", "--threads", "1"];
    let bench = ["bench", "--seed", "11", "--threads", "1", "--n", "1024", "--bq", "64", "--bkv", "64", "--execute"];
    let (c1, c2) = (run_cli(&check), run_cli(&check));
    let (b1, b2) = (run_cli(&bench), run_cli(&bench));
    let pass = !c1.is_empty() && !b1.is_empty() && c1 == c2 && b1 == b2;
    report(
        pass,
        "determinism",
        format!(
            "check: {} bytes, identical {}; bench: {} bytes, identical {}",
            c1.len(),
            c1 == c2,
            b1.len(),
            b1 == b2
        ),
    );
    assert!(pass);
}
