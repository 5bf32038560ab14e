//! Fused sparse-linear forward pass.
//!
//! For each query block-row `i`, critical blocks go through a streaming
//! (online) softmax, marginal blocks contribute through the precomputed
//! summaries `h_j = φ(K_j)ᵀV_j`, `z_j = Σ_t φ(K_j)[t, :]`, and negligible
//! blocks are skipped. The final output is `O = O_s + O_l · W`.
//!
//! Block-rows are independent and run in parallel; within a row the critical
//! blocks are visited in ascending column order unless a test permutation is
//! requested through [`ForwardOptions`].

use rayon::prelude::*;

use crate::aggregation::{clear_cancelled, resolve_strategy, Aggregator, BlockSums, OpCounter};
use crate::config::{AggregationStrategy, SlaConfig};
use crate::error::{Result, SlaError};
use crate::feature_maps::{apply_feature_map, FeatureMapKind};
use crate::layout::BlockLayout;
use crate::mask::{classify_mask, predict_compressed_weights, BlockLabel, CompressedMask};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{dot, Real, Tensor};

/// Per key/value block summaries. `mats[j] = h_j` (`d x d`) and
/// `vecs[j] = z_j` (length `d`); totals are `Σ_j h_j` and `Σ_j z_j`.
pub type KvSummaries<T> = BlockSums<T>;

pub fn precompute_kv_summaries<T: Real>(
    kphi: &Tensor<T>,
    v: &Tensor<T>,
    layout: &BlockLayout,
) -> Result<KvSummaries<T>> {
    layout.check_input("K^φ", kphi.shape())?;
    layout.check_input("V", v.shape())?;
    let d = layout.d;
    let mut mats = Vec::with_capacity(layout.t_n);
    let mut vecs = Vec::with_capacity(layout.t_n);
    for j in 0..layout.t_n {
        let kb = kphi.row_block(j * layout.b_kv, layout.b_kv);
        let vb = v.row_block(j * layout.b_kv, layout.b_kv);
        mats.push(kb.t_matmul(&vb)?);
        let mut z = vec![T::zero(); d];
        for t in 0..layout.b_kv {
            for (acc, &x) in z.iter_mut().zip(kb.row(t)) {
                *acc += x;
            }
        }
        vecs.push(z);
    }
    BlockSums::new(mats, vecs)
}

/// Learnable `d x d` map applied to the linear-path output.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputProjection<T> {
    pub w: Tensor<T>,
}

impl<T: Real> OutputProjection<T> {
    pub fn new(w: Tensor<T>) -> Result<Self> {
        if w.rows() != w.cols() {
            return Err(SlaError::Shape(format!("projection must be square, got {:?}", w.shape())));
        }
        if !w.is_finite() {
            return Err(SlaError::Shape("projection has non-finite entries".into()));
        }
        Ok(OutputProjection { w })
    }

    pub fn zeros(d: usize) -> Self {
        OutputProjection { w: Tensor::zeros(d, d) }
    }

    pub fn identity(d: usize) -> Self {
        OutputProjection { w: Tensor::identity(d) }
    }
}

/// Everything the backward pass needs from a forward call.
#[derive(Clone, Debug)]
pub struct SlaForwardState<T> {
    pub layout: BlockLayout,
    pub phi: FeatureMapKind,
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub qphi: Tensor<T>,
    pub kphi: Tensor<T>,
    pub o_s: Tensor<T>,
    pub o_l: Tensor<T>,
    /// Per-row `m + ln l` over critical blocks; [`Real::EMPTY_LSE`] for rows
    /// with no critical block.
    pub lse: Vec<T>,
    /// Per block-row `H_i`.
    pub h: Vec<Tensor<T>>,
    /// Per block-row `Z_i`.
    pub z: Vec<Vec<T>>,
    pub mask: CompressedMask,
    pub summaries: KvSummaries<T>,
    /// Aggregation strategy actually used (never `Auto`).
    pub strategy: AggregationStrategy,
    pub counter: OpCounter,
    /// Critical `(i, j)` blocks processed, each one `QKᵀ` and one `PV` product.
    pub critical_blocks: u64,
}

/// Test hooks for the forward kernel.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Visit each row's critical blocks in a seeded random order instead of
    /// ascending column order.
    pub critical_order_seed: Option<u64>,
}

/// Predicts the mask from `Q`, `K` and runs the forward pass.
pub fn sla_forward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    cfg: &SlaConfig,
    layout: &BlockLayout,
) -> Result<SlaForwardState<T>> {
    cfg.validate()?;
    let weights = predict_compressed_weights(q, k, layout)?;
    let mask = classify_mask(&weights, cfg.k_h, cfg.k_l)?;
    sla_forward_with_options(q, k, v, &mask, cfg, layout, ForwardOptions::default())
}

/// Forward pass with an externally supplied mask.
pub fn sla_forward_with_mask<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &CompressedMask,
    cfg: &SlaConfig,
    layout: &BlockLayout,
) -> Result<SlaForwardState<T>> {
    sla_forward_with_options(q, k, v, mask, cfg, layout, ForwardOptions::default())
}

struct RowBlockOut<T> {
    o_s: Vec<T>,
    o_l: Vec<T>,
    lse: Vec<T>,
    h: Tensor<T>,
    z: Vec<T>,
    counter: OpCounter,
}

pub fn sla_forward_with_options<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: &CompressedMask,
    cfg: &SlaConfig,
    layout: &BlockLayout,
    opts: ForwardOptions,
) -> Result<SlaForwardState<T>> {
    cfg.validate()?;
    for (name, t) in [("Q", q), ("K", k), ("V", v)] {
        layout.check_input(name, t.shape())?;
    }
    mask.check_layout(layout)?;

    let qphi = apply_feature_map(q, cfg.phi);
    let kphi = apply_feature_map(k, cfg.phi);
    let summaries = precompute_kv_summaries(&kphi, v, layout)?;

    let strategy = resolve_strategy(cfg.aggregation, &cfg.auto, mask.fraction(BlockLabel::Marginal));
    let mut counter = OpCounter::default();
    let aggregator = Aggregator::prepare(strategy, &summaries, cfg.g, &mut counter)?;

    let ctx = RowContext {
        q,
        k,
        v,
        qphi: &qphi,
        mask,
        layout,
        aggregator: &aggregator,
        summaries: &summaries,
        order_seed: opts.critical_order_seed,
    };
    let blocks: Vec<RowBlockOut<T>> = (0..layout.t_m)
        .into_par_iter()
        .map(|i| ctx.process(i))
        .collect::<Result<_>>()?;

    let (n, d) = (layout.n, layout.d);
    let mut o_s = Vec::with_capacity(n * d);
    let mut o_l = Vec::with_capacity(n * d);
    let mut lse = Vec::with_capacity(n);
    let mut h = Vec::with_capacity(layout.t_m);
    let mut z = Vec::with_capacity(layout.t_m);
    for b in blocks {
        o_s.extend(b.o_s);
        o_l.extend(b.o_l);
        lse.extend(b.lse);
        h.push(b.h);
        z.push(b.z);
        counter.merge(&b.counter);
    }
    let critical_blocks = (0..layout.t_m).map(|i| mask.counts(i).critical as u64).sum();
    Ok(SlaForwardState {
        layout: *layout,
        phi: cfg.phi,
        q: q.clone(),
        k: k.clone(),
        v: v.clone(),
        qphi,
        kphi,
        o_s: Tensor::from_vec(n, d, o_s)?,
        o_l: Tensor::from_vec(n, d, o_l)?,
        lse,
        h,
        z,
        mask: mask.clone(),
        summaries,
        strategy,
        counter,
        critical_blocks,
    })
}

struct RowContext<'a, T> {
    q: &'a Tensor<T>,
    k: &'a Tensor<T>,
    v: &'a Tensor<T>,
    qphi: &'a Tensor<T>,
    mask: &'a CompressedMask,
    layout: &'a BlockLayout,
    aggregator: &'a Aggregator<'a, T>,
    summaries: &'a KvSummaries<T>,
    order_seed: Option<u64>,
}

impl<T: Real> RowContext<'_, T> {
    fn process(&self, i: usize) -> Result<RowBlockOut<T>> {
        let BlockLayout { d, b_q, b_kv, .. } = *self.layout;
        let rows = self.layout.q_rows(i);
        let scale = T::one() / T::lit(d as f64).sqrt();

        // Online softmax over critical blocks.
        let mut m = vec![T::neg_infinity(); b_q];
        let mut l = vec![T::zero(); b_q];
        let mut acc = vec![T::zero(); b_q * d];
        let mut s = vec![T::zero(); b_kv];
        let mut order = self.mask.critical_idx(i).to_vec();
        if let Some(seed) = self.order_seed {
            SplitMix64::new(derive_seed(seed, i as u64)).shuffle(&mut order);
        }
        for &j in &order {
            let kv_rows = self.layout.kv_rows(j);
            for (local, r) in rows.clone().enumerate() {
                let q_r = self.q.row(r);
                let mut row_max = T::neg_infinity();
                for (sc, t) in s.iter_mut().zip(kv_rows.clone()) {
                    *sc = dot(q_r, self.k.row(t)) * scale;
                    row_max = row_max.max(*sc);
                }
                let m_new = m[local].max(row_max);
                let alpha = (m[local] - m_new).exp();
                let out = &mut acc[local * d..(local + 1) * d];
                for o in out.iter_mut() {
                    *o *= alpha;
                }
                let mut p_sum = T::zero();
                for (&sc, t) in s.iter().zip(kv_rows.clone()) {
                    let p = (sc - m_new).exp();
                    p_sum += p;
                    for (o, &vv) in out.iter_mut().zip(self.v.row(t)) {
                        *o += p * vv;
                    }
                }
                l[local] = alpha * l[local] + p_sum;
                m[local] = m_new;
                if !l[local].is_finite() || out.iter().any(|x| !x.is_finite()) {
                    return Err(SlaError::NonFinite {
                        stage: "sparse",
                        row: r,
                        block_row: i,
                        block_col: Some(j),
                    });
                }
            }
        }
        let mut lse = vec![T::EMPTY_LSE; b_q];
        if !order.is_empty() {
            for local in 0..b_q {
                let inv = T::one() / l[local];
                for o in &mut acc[local * d..(local + 1) * d] {
                    *o *= inv;
                }
                lse[local] = m[local] + l[local].ln();
            }
        }

        // Linear path over marginal blocks.
        let members: Vec<bool> = (0..self.layout.t_n)
            .map(|j| self.mask.label(i, j) == BlockLabel::Marginal)
            .collect();
        let mut counter = OpCounter::default();
        let (mut h, mut z) = self.aggregator.aggregate(&members, &mut counter)?;
        clear_cancelled(self.aggregator.strategy(), self.summaries, &mut h, &mut z);
        let mut o_l = vec![T::zero(); b_q * d];
        for (local, r) in rows.enumerate() {
            let qp = self.qphi.row(r);
            let den = dot(qp, &z);
            if den == T::zero() {
                continue;
            }
            let out = &mut o_l[local * d..(local + 1) * d];
            for (a, &qa) in qp.iter().enumerate() {
                if qa == T::zero() {
                    continue;
                }
                for (o, &hv) in out.iter_mut().zip(h.row(a)) {
                    *o += qa * hv;
                }
            }
            for o in out.iter_mut() {
                *o /= den;
            }
            if out.iter().any(|x| !x.is_finite()) {
                return Err(SlaError::NonFinite {
                    stage: "linear",
                    row: r,
                    block_row: i,
                    block_col: None,
                });
            }
        }

        Ok(RowBlockOut {
            o_s: acc,
            o_l,
            lse,
            h,
            z,
            counter,
        })
    }
}

/// `O = O_s + O_l · W`.
pub fn combine_outputs<T: Real>(
    state: &SlaForwardState<T>,
    proj: &OutputProjection<T>,
) -> Result<Tensor<T>> {
    state.o_s.add(&state.o_l.matmul(&proj.w)?)
}
