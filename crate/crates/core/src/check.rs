//! Self-check suites: each compares a kernel against an independent
//! reference and reports the worst error with the seed and coordinates
//! where it occurred.

use serde::{Deserialize, Serialize};

use crate::aggregation::{
    aggregate_complement, aggregate_direct, aggregate_four_russians, build_four_russians_tables, BlockSums,
    OpCounter,
};
use crate::analysis::{split_weights, synthetic_attention};
use crate::backward::sla_backward_with_projection;
use crate::config::SlaConfig;
use crate::error::Result;
use crate::feature_maps::apply_feature_map;
use crate::forward::{combine_outputs, sla_forward, sla_forward_with_mask, OutputProjection};
use crate::layout::BlockLayout;
use crate::mask::{build_lookup, BlockLabel, CompressedMask};
use crate::oracle::{dense_attention_forward, dense_masked_attention_forward, dense_masked_linear_forward, global_linear_attention};
use crate::rng::{derive_seed, gaussian_tensor, SplitMix64};
use crate::tensor::{max_rel_error, DType, Real, Tensor};

pub const FORWARD_TOL_F64: f64 = 1e-10;
pub const FORWARD_TOL_F32: f64 = 1e-4;
pub const BACKWARD_TOL: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-5;
pub const AGGREGATION_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub suite: String,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Seed of the worst case.
    pub worst_seed: u64,
    /// Where the worst error occurred, e.g. `O_s[12, 3]`.
    pub worst_at: String,
}

#[derive(Default)]
struct Worst {
    cases: usize,
    err: f64,
    seed: u64,
    at: String,
}

impl Worst {
    fn record(&mut self, err: f64, seed: u64, at: impl FnOnce() -> String) {
        self.cases += 1;
        // NaN counts as worst
        if !(err <= self.err) || self.cases == 1 {
            self.err = err;
            self.seed = seed;
            self.at = at();
        }
    }

    fn finish(self, suite: &str, tolerance: f64) -> SuiteResult {
        SuiteResult {
            suite: suite.to_string(),
            cases: self.cases,
            max_error: self.err,
            tolerance,
            passed: self.err <= tolerance,
            worst_seed: self.seed,
            worst_at: self.at,
        }
    }
}

/// Location of the largest absolute difference.
fn argmax_diff<A: Real, B: Real>(a: &Tensor<A>, b: &Tensor<B>) -> (usize, usize) {
    let mut best = (0, 0.0);
    for (idx, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        let diff = (x.as_f64() - y.as_f64()).abs();
        if !(diff <= best.1) {
            best = (idx, diff);
        }
    }
    (best.0 / a.cols().max(1), best.0 % a.cols().max(1))
}

fn compare<A: Real, B: Real>(w: &mut Worst, name: &str, seed: u64, actual: &Tensor<A>, expected: &Tensor<B>) {
    let err = max_rel_error(actual, expected);
    w.record(err, seed, || {
        let (r, c) = argmax_diff(actual, expected);
        format!("{name}[{r}, {c}]")
    });
}

/// Uniformly random labels.
pub fn random_mask(rng: &mut SplitMix64, t_m: usize, t_n: usize) -> Result<CompressedMask> {
    let labels: Vec<i8> = (0..t_m * t_n).map(|_| rng.next_below(3) as i8 - 1).collect();
    build_lookup(t_m, t_n, &labels)
}

/// Labels drawn with the given probabilities of critical and marginal.
pub fn random_mask_with(rng: &mut SplitMix64, t_m: usize, t_n: usize, p_crit: f64, p_marg: f64) -> Result<CompressedMask> {
    let labels: Vec<i8> = (0..t_m * t_n)
        .map(|_| {
            let u = rng.next_f64();
            if u < p_crit {
                1
            } else if u < p_crit + p_marg {
                0
            } else {
                -1
            }
        })
        .collect();
    build_lookup(t_m, t_n, &labels)
}

fn qkv<T: Real>(seed: u64, n: usize, d: usize) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let mut rng = SplitMix64::new(seed);
    (
        gaussian_tensor(&mut rng, n, d, 1.0),
        gaussian_tensor(&mut rng, n, d, 1.0),
        gaussian_tensor(&mut rng, n, d, 1.0),
    )
}

/// One forward case: kernel in `T`, oracles in f64 on the same values.
/// Odd seeds use a uniformly random mask, even seeds the predicted one.
pub fn forward_oracle_case<T: Real>(
    w_s: &mut impl FnMut(f64, String),
    layout: &BlockLayout,
    cfg: &SlaConfig,
    seed: u64,
) -> Result<()> {
    let (q, k, v) = qkv::<T>(seed, layout.n, layout.d);
    let st = if seed % 2 == 1 {
        let mut rng = SplitMix64::new(derive_seed(seed, 7));
        let mask = random_mask(&mut rng, layout.t_m, layout.t_n)?;
        sla_forward_with_mask(&q, &k, &v, &mask, cfg, layout)?
    } else {
        sla_forward(&q, &k, &v, cfg, layout)?
    };
    let (q, k, v) = (q.cast::<f64>(), k.cast::<f64>(), v.cast::<f64>());
    let o_s = dense_masked_attention_forward(&q, &k, &v, &st.mask)?;
    let qphi = apply_feature_map(&q, cfg.phi);
    let kphi = apply_feature_map(&k, cfg.phi);
    let o_l = dense_masked_linear_forward(&qphi, &kphi, &v, &st.mask)?;
    for (name, a, b) in [("O_s", &st.o_s, &o_s), ("O_l", &st.o_l, &o_l)] {
        let (r, c) = argmax_diff(a, b);
        w_s(max_rel_error(a, b), format!("{name}[{r}, {c}]"));
    }
    Ok(())
}

pub fn forward_oracle_tolerance(dtype: DType) -> f64 {
    match dtype {
        DType::F32 => FORWARD_TOL_F32,
        DType::F64 => FORWARD_TOL_F64,
    }
}

pub fn forward_oracle_suite(layout: &BlockLayout, cfg: &SlaConfig, seeds: &[u64]) -> Result<SuiteResult> {
    let mut w = Worst::default();
    for &seed in seeds {
        let mut sink = |err: f64, at: String| w.record(err, seed, || at);
        match cfg.dtype {
            DType::F32 => forward_oracle_case::<f32>(&mut sink, layout, cfg, seed)?,
            DType::F64 => forward_oracle_case::<f64>(&mut sink, layout, cfg, seed)?,
        }
    }
    Ok(w.finish("forward_oracle", forward_oracle_tolerance(cfg.dtype)))
}

/// All-critical against dense attention and all-marginal against global
/// linear attention, in f64.
pub fn degenerate_mask_suite(layout: &BlockLayout, cfg: &SlaConfig, seeds: &[u64]) -> Result<SuiteResult> {
    let mut w = Worst::default();
    for &seed in seeds {
        let (q, k, v) = qkv::<f64>(seed, layout.n, layout.d);
        let crit = CompressedMask::uniform(layout.t_m, layout.t_n, BlockLabel::Critical);
        let st = sla_forward_with_mask(&q, &k, &v, &crit, cfg, layout)?;
        let full = dense_attention_forward(&q, &k, &v)?.o;
        compare(&mut w, "all_critical O_s", seed, &st.o_s, &full);

        let marg = CompressedMask::uniform(layout.t_m, layout.t_n, BlockLabel::Marginal);
        let st = sla_forward_with_mask(&q, &k, &v, &marg, cfg, layout)?;
        let lin = global_linear_attention(&apply_feature_map(&q, cfg.phi), &apply_feature_map(&k, cfg.phi), &v)?;
        compare(&mut w, "all_marginal O_l", seed, &st.o_l, &lin);
    }
    Ok(w.finish("degenerate_masks", FORWARD_TOL_F64))
}

/// Inputs of one finite-difference case.
#[derive(Clone, Debug)]
pub struct FdCase {
    pub layout: BlockLayout,
    pub cfg: SlaConfig,
    pub mask: CompressedMask,
    pub q: Tensor<f64>,
    pub k: Tensor<f64>,
    pub v: Tensor<f64>,
    pub w: Tensor<f64>,
}

impl FdCase {
    /// Gaussian inputs and projection with a uniformly random frozen mask.
    pub fn random(layout: BlockLayout, cfg: SlaConfig, seed: u64) -> Result<FdCase> {
        let mut rng = SplitMix64::new(seed);
        let (n, d) = (layout.n, layout.d);
        let q = gaussian_tensor(&mut rng, n, d, 1.0);
        let k = gaussian_tensor(&mut rng, n, d, 1.0);
        let v = gaussian_tensor(&mut rng, n, d, 1.0);
        let w = gaussian_tensor(&mut rng, d, d, 1.0 / (d as f64).sqrt());
        let mask = random_mask(&mut rng, layout.t_m, layout.t_n)?;
        Ok(FdCase { layout, cfg, mask, q, k, v, w })
    }

    /// `½‖O_s + O_l W‖²` with the mask frozen.
    pub fn loss(&self, q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, w: &Tensor<f64>) -> Result<f64> {
        let st = sla_forward_with_mask(q, k, v, &self.mask, &self.cfg, &self.layout)?;
        let o = combine_outputs(&st, &OutputProjection { w: w.clone() })?;
        Ok(0.5 * o.frobenius_sq())
    }

    /// Analytic `[dQ_total, dK_total, dV, dW]`.
    pub fn gradients(&self) -> Result<[Tensor<f64>; 4]> {
        let st = sla_forward_with_mask(&self.q, &self.k, &self.v, &self.mask, &self.cfg, &self.layout)?;
        let proj = OutputProjection { w: self.w.clone() };
        let o = combine_outputs(&st, &proj)?;
        let g = sla_backward_with_projection(&st, &proj, &o, &self.cfg)?;
        Ok([g.dq_total, g.dk_total, g.dv, g.dw.expect("dW is set")])
    }

    fn inputs(&self) -> [&Tensor<f64>; 4] {
        [&self.q, &self.k, &self.v, &self.w]
    }

    fn perturbed_loss(&self, which: usize, dir: &Tensor<f64>, h: f64) -> Result<f64> {
        let mut args: [Tensor<f64>; 4] = self.inputs().map(|t| t.clone());
        args[which] = args[which].add(&dir.scale(h))?;
        self.loss(&args[0], &args[1], &args[2], &args[3])
    }
}

pub const GRADIENT_NAMES: [&str; 4] = ["dQ_total", "dK_total", "dV", "dW"];

/// Central differences of every entry; per-gradient max relative error.
pub fn fd_elementwise(case: &FdCase) -> Result<[(f64, (usize, usize)); 4]> {
    let grads = case.gradients()?;
    let mut out = [(0.0, (0, 0)); 4];
    for (which, grad) in grads.iter().enumerate() {
        let (rows, cols) = grad.shape();
        let mut fd = Tensor::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let mut e = Tensor::zeros(rows, cols);
                e.set(r, c, 1.0);
                let lp = case.perturbed_loss(which, &e, FD_STEP)?;
                let lm = case.perturbed_loss(which, &e, -FD_STEP)?;
                fd.set(r, c, (lp - lm) / (2.0 * FD_STEP));
            }
        }
        out[which] = (max_rel_error(grad, &fd), argmax_diff(grad, &fd));
    }
    Ok(out)
}

/// Directional derivatives along random unit-variance directions; relative
/// error of `<grad, U>` against the central difference.
pub fn fd_directional(case: &FdCase, directions: usize, seed: u64) -> Result<[f64; 4]> {
    let grads = case.gradients()?;
    let mut rng = SplitMix64::new(derive_seed(seed, 11));
    let mut out = [0.0f64; 4];
    for (which, grad) in grads.iter().enumerate() {
        for _ in 0..directions {
            let dir: Tensor<f64> = gaussian_tensor(&mut rng, grad.rows(), grad.cols(), 1.0);
            let analytic = grad.dot(&dir)?;
            let lp = case.perturbed_loss(which, &dir, FD_STEP)?;
            let lm = case.perturbed_loss(which, &dir, -FD_STEP)?;
            let fd = (lp - lm) / (2.0 * FD_STEP);
            let err = (analytic - fd).abs() / fd.abs().max(analytic.abs()).max(f64::MIN_POSITIVE);
            out[which] = out[which].max(err);
        }
    }
    Ok(out)
}

/// Directional finite differences of `½‖O‖²` in f64.
pub fn backward_fd_suite(layout: &BlockLayout, cfg: &SlaConfig, seeds: &[u64]) -> Result<SuiteResult> {
    let mut w = Worst::default();
    let cfg = SlaConfig { dtype: DType::F64, ..cfg.clone() };
    for &seed in seeds {
        let case = FdCase::random(*layout, cfg.clone(), seed)?;
        let errs = fd_directional(&case, 3, seed)?;
        for (name, err) in GRADIENT_NAMES.iter().zip(errs) {
            w.record(err, seed, || name.to_string());
        }
    }
    Ok(w.finish("backward_finite_difference", BACKWARD_TOL))
}

/// Random per-block summaries of the given shape.
pub fn random_sums(rng: &mut SplitMix64, t_n: usize, d: usize) -> Result<BlockSums<f64>> {
    let mats = (0..t_n).map(|_| gaussian_tensor(rng, d, d, 1.0)).collect();
    let vecs = (0..t_n).map(|_| (0..d).map(|_| rng.next_normal().abs()).collect()).collect();
    BlockSums::new(mats, vecs)
}

/// Worst relative disagreement between strategies over every row of one
/// mask, against direct aggregation.
pub fn aggregation_disagreement(sums: &BlockSums<f64>, mask: &CompressedMask, groups: &[usize]) -> Result<f64> {
    let mut worst: f64 = 0.0;
    let mut scratch = OpCounter::default();
    let tables: Vec<_> = groups
        .iter()
        .map(|&g| build_four_russians_tables(sums, g, &mut scratch))
        .collect::<Result<_>>()?;
    for i in 0..mask.t_m() {
        let (h, z) = aggregate_direct(sums, mask.marginal_idx(i), &mut scratch);
        let zt = Tensor::from_vec(1, z.len(), z)?;
        let (hc, zc) = aggregate_complement(sums, &mask.non_marginal_idx(i), &mut scratch);
        worst = worst.max(max_rel_error(&hc, &h)).max(max_rel_error(&Tensor::from_vec(1, zc.len(), zc)?, &zt));
        let members: Vec<bool> = (0..mask.t_n()).map(|j| mask.label(i, j) == BlockLabel::Marginal).collect();
        for t in &tables {
            let (hf, zf) = aggregate_four_russians(t, &members, &mut scratch)?;
            worst = worst.max(max_rel_error(&hf, &h)).max(max_rel_error(&Tensor::from_vec(1, zf.len(), zf)?, &zt));
        }
    }
    Ok(worst)
}

pub fn aggregation_suite(layout: &BlockLayout, cfg: &SlaConfig, seeds: &[u64]) -> Result<SuiteResult> {
    let mut w = Worst::default();
    let mut groups = vec![2, 3, 4];
    if !groups.contains(&cfg.g) {
        groups.push(cfg.g);
    }
    for &seed in seeds {
        let mut rng = SplitMix64::new(seed);
        let sums = random_sums(&mut rng, layout.t_n, layout.d)?;
        let mask = random_mask(&mut rng, layout.t_m, layout.t_n)?;
        let err = aggregation_disagreement(&sums, &mask, &groups)?;
        w.record(err, seed, || "H_i/Z_i".to_string());
    }
    Ok(w.finish("aggregation_cross_strategy", AGGREGATION_TOL))
}

/// `P ⊙ M + P ⊙ (1 - M) = P` bit for bit.
pub fn decomposition_suite(layout: &BlockLayout, seeds: &[u64]) -> Result<SuiteResult> {
    let mut w = Worst::default();
    for &seed in seeds {
        let p = synthetic_attention(seed, layout.n, layout.d, 1.0)?;
        let (top, rest) = split_weights(&p, 0.08)?;
        let sum = top.add(&rest)?;
        let mismatches = sum.data().iter().zip(p.data()).filter(|(a, b)| a != b).count();
        w.record(mismatches as f64, seed, || {
            let (r, c) = argmax_diff(&sum, &p);
            format!("P[{r}, {c}]")
        });
    }
    Ok(w.finish("decomposition_identity", 0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub layout: BlockLayout,
    pub config: SlaConfig,
    pub suites: Vec<SuiteResult>,
    pub passed: bool,
}

/// Every suite at the given shapes, seeded from `cfg.seed`.
pub fn run_checks(layout: &BlockLayout, cfg: &SlaConfig, cases: usize) -> Result<CheckReport> {
    cfg.validate()?;
    let seeds = |stream: u64| -> Vec<u64> { (0..cases as u64).map(|c| derive_seed(cfg.seed, stream * 1000 + c)).collect() };
    let suites = vec![
        forward_oracle_suite(layout, cfg, &seeds(1))?,
        degenerate_mask_suite(layout, cfg, &seeds(2))?,
        backward_fd_suite(layout, cfg, &seeds(3))?,
        aggregation_suite(layout, cfg, &seeds(4))?,
        decomposition_suite(layout, &seeds(5))?,
    ];
    let passed = suites.iter().all(|s| s.passed);
    Ok(CheckReport { layout: *layout, config: cfg.clone(), suites, passed })
}
