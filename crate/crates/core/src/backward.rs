//! Backward pass through both attention paths and the output projection.
//!
//! Sparse path (critical blocks), with `P_ij = exp(S_ij - L_i)` rebuilt from
//! the cached logsumexp and `Dˢ = rowsum(dOˢ ⊙ Oˢ)`:
//!
//! ```text
//! dV_j += P_ijᵀ dOˢ_i      dP_ij = dOˢ_i V_jᵀ      dS_ij = P_ij ⊙ (dP_ij - Dˢ_i)
//! dQ_i += dS_ij K_j / √d    dK_j += dS_ijᵀ Q_i / √d
//! ```
//!
//! Linear path (marginal blocks), with `Dˡ = rowsum(dOˡ ⊙ Oˡ)`:
//!
//! ```text
//! dH_i  = (Qᵠ_i / Qᵠ_i Z_i)ᵀ dOˡ_i
//! dZ_i  = -(Qᵠ_i / Qᵠ_i Z_i)ᵀ Dˡ_i
//! dQᵠ_i = (dOˡ_i H_iᵀ - Dˡ_i Z_iᵀ) / (Qᵠ_i Z_i)
//! dKᵠ_j = V_j dHᵀ + 1 dZᵀ     dV_j += Kᵠ_j dH     (dH, dZ summed over marginal i)
//! ```
//!
//! `V` feeds both paths, so both contributions accumulate into `dV`. The mask
//! is treated as a constant.
//!
//! `dQ` is accumulated by a row-parallel pass and `dK`/`dV` by a
//! column-parallel pass, so every output element has a single writer and
//! a fixed summation order.

use rayon::prelude::*;

use crate::aggregation::{resolve_strategy, Aggregator, BlockSums, OpCounter};
use crate::config::SlaConfig;
use crate::error::{Result, SlaError};
use crate::feature_maps::feature_map_vjp;
use crate::forward::{OutputProjection, SlaForwardState};
use crate::mask::BlockLabel;
use crate::tensor::{dot, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SlaGradients<T> {
    /// Sparse-path gradient w.r.t. `Q`.
    pub dq: Tensor<T>,
    /// Sparse-path gradient w.r.t. `K`.
    pub dk: Tensor<T>,
    /// Both paths.
    pub dv: Tensor<T>,
    pub dqphi: Tensor<T>,
    pub dkphi: Tensor<T>,
    /// Present when the backward ran through the output projection.
    pub dw: Option<Tensor<T>>,
    /// `dq` plus `dqphi` pulled back through φ.
    pub dq_total: Tensor<T>,
    pub dk_total: Tensor<T>,
    pub counter: OpCounter,
}

/// Backward of `O = O_s + O_l W`: returns `(dO_s, dO_l, dW)`.
pub fn proj_backward<T: Real>(
    d_o: &Tensor<T>,
    o_l: &Tensor<T>,
    w: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if d_o.shape() != o_l.shape() || w.shape() != (o_l.cols(), o_l.cols()) {
        return Err(SlaError::Shape(format!(
            "proj_backward: dO {:?}, O_l {:?}, W {:?}",
            d_o.shape(),
            o_l.shape(),
            w.shape()
        )));
    }
    Ok((d_o.clone(), d_o.matmul_t(w)?, o_l.t_matmul(d_o)?))
}

fn row_dots<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Vec<T> {
    (0..a.rows()).map(|r| dot(a.row(r), b.row(r))).collect()
}

struct LinearRowOut<T> {
    dh: Tensor<T>,
    dz: Vec<T>,
    dqphi: Vec<T>,
}

struct ColumnOut<T> {
    dk: Vec<T>,
    dv: Vec<T>,
    dkphi: Vec<T>,
    counter: OpCounter,
}

pub fn sla_backward<T: Real>(
    state: &SlaForwardState<T>,
    d_o_s: &Tensor<T>,
    d_o_l: &Tensor<T>,
    cfg: &SlaConfig,
) -> Result<SlaGradients<T>> {
    let layout = state.layout;
    let (n, d) = (layout.n, layout.d);
    let (b_q, b_kv) = (layout.b_q, layout.b_kv);
    for (name, t) in [("dO_s", d_o_s), ("dO_l", d_o_l)] {
        layout.check_input(name, t.shape())?;
    }
    if state.lse.len() != n || state.h.len() != layout.t_m || state.z.len() != layout.t_m {
        return Err(SlaError::Shape("forward state is missing cached L, H or Z".into()));
    }
    let mask = &state.mask;
    let scale = T::one() / T::lit(d as f64).sqrt();
    let ds_row = row_dots(d_o_s, &state.o_s);
    let dl_row = row_dots(d_o_l, &state.o_l);

    // Linear path, per block-row.
    let linear: Vec<LinearRowOut<T>> = (0..layout.t_m)
        .into_par_iter()
        .map(|i| {
            let (h, z) = (&state.h[i], &state.z[i]);
            let mut dh = Tensor::zeros(d, d);
            let mut dz = vec![T::zero(); d];
            let mut dqphi = vec![T::zero(); b_q * d];
            for (local, r) in layout.q_rows(i).enumerate() {
                let qp = state.qphi.row(r);
                let den = dot(qp, z);
                if den == T::zero() {
                    continue;
                }
                let g = d_o_l.row(r);
                let dl = dl_row[r];
                for (a, &qa) in qp.iter().enumerate() {
                    let u = qa / den;
                    for (x, &gb) in dh.row_mut(a).iter_mut().zip(g) {
                        *x += u * gb;
                    }
                    dz[a] -= u * dl;
                }
                let out = &mut dqphi[local * d..(local + 1) * d];
                for (a, o) in out.iter_mut().enumerate() {
                    *o = (dot(g, h.row(a)) - dl * z[a]) / den;
                }
            }
            LinearRowOut { dh, dz, dqphi }
        })
        .collect();

    let mut dqphi = Vec::with_capacity(n * d);
    let mut dh_items = Vec::with_capacity(layout.t_m);
    let mut dz_items = Vec::with_capacity(layout.t_m);
    for out in linear {
        dqphi.extend(out.dqphi);
        dh_items.push(out.dh);
        dz_items.push(out.dz);
    }
    let backward_sums = BlockSums::new(dh_items, dz_items)?;
    let strategy = resolve_strategy(cfg.aggregation, &cfg.auto, mask.fraction(BlockLabel::Marginal));
    let mut counter = OpCounter::default();
    let aggregator = Aggregator::prepare(strategy, &backward_sums, cfg.g, &mut counter)?;

    // dK, dV, dKᵠ per block-column.
    let columns: Vec<ColumnOut<T>> = (0..layout.t_n)
        .into_par_iter()
        .map(|j| -> Result<ColumnOut<T>> {
            let kv_rows = layout.kv_rows(j);
            let mut dk = vec![T::zero(); b_kv * d];
            let mut dv = vec![T::zero(); b_kv * d];
            let mut dkphi = vec![T::zero(); b_kv * d];
            let mut p = vec![T::zero(); b_kv];
            let mut dsv = vec![T::zero(); b_kv];
            for i in 0..layout.t_m {
                if mask.label(i, j) != BlockLabel::Critical {
                    continue;
                }
                for r in layout.q_rows(i) {
                    let (q_r, g) = (state.q.row(r), d_o_s.row(r));
                    for ((pt, st), t) in p.iter_mut().zip(dsv.iter_mut()).zip(kv_rows.clone()) {
                        *pt = (dot(q_r, state.k.row(t)) * scale - state.lse[r]).exp();
                        *st = *pt * (dot(g, state.v.row(t)) - ds_row[r]) * scale;
                    }
                    for (local, (&pt, &st)) in p.iter().zip(&dsv).enumerate() {
                        let dv_t = &mut dv[local * d..(local + 1) * d];
                        for (x, &gc) in dv_t.iter_mut().zip(g) {
                            *x += pt * gc;
                        }
                        let dk_t = &mut dk[local * d..(local + 1) * d];
                        for (x, &qc) in dk_t.iter_mut().zip(q_r) {
                            *x += st * qc;
                        }
                    }
                }
            }

            let members: Vec<bool> = (0..layout.t_m)
                .map(|i| mask.label(i, j) == BlockLabel::Marginal)
                .collect();
            let mut counter = OpCounter::default();
            if members.iter().any(|&m| m) {
                let (dh, dz) = aggregator.aggregate(&members, &mut counter)?;
                for (local, t) in kv_rows.enumerate() {
                    let (v_t, kp_t) = (state.v.row(t), state.kphi.row(t));
                    let dkp = &mut dkphi[local * d..(local + 1) * d];
                    for (a, x) in dkp.iter_mut().enumerate() {
                        *x = dot(v_t, dh.row(a)) + dz[a];
                    }
                    let dv_t = &mut dv[local * d..(local + 1) * d];
                    for (a, &ka) in kp_t.iter().enumerate() {
                        for (x, &hb) in dv_t.iter_mut().zip(dh.row(a)) {
                            *x += ka * hb;
                        }
                    }
                }
            }
            Ok(ColumnOut { dk, dv, dkphi, counter })
        })
        .collect::<Result<_>>()?;

    // dQ per block-row, recomputing P.
    let dq_rows: Vec<Vec<T>> = (0..layout.t_m)
        .into_par_iter()
        .map(|i| {
            let mut dq = vec![T::zero(); b_q * d];
            for &j in mask.critical_idx(i) {
                for (local, r) in layout.q_rows(i).enumerate() {
                    let (q_r, g) = (state.q.row(r), d_o_s.row(r));
                    let out = &mut dq[local * d..(local + 1) * d];
                    for t in layout.kv_rows(j) {
                        let p = (dot(q_r, state.k.row(t)) * scale - state.lse[r]).exp();
                        let ds = p * (dot(g, state.v.row(t)) - ds_row[r]) * scale;
                        for (x, &kc) in out.iter_mut().zip(state.k.row(t)) {
                            *x += ds * kc;
                        }
                    }
                }
            }
            dq
        })
        .collect();

    let mut dk = Vec::with_capacity(n * d);
    let mut dv = Vec::with_capacity(n * d);
    let mut dkphi = Vec::with_capacity(n * d);
    for c in columns {
        dk.extend(c.dk);
        dv.extend(c.dv);
        dkphi.extend(c.dkphi);
        counter.merge(&c.counter);
    }
    let dq = Tensor::from_vec_allow_nonfinite(n, d, dq_rows.concat())?;
    let dk = Tensor::from_vec_allow_nonfinite(n, d, dk)?;
    let dv = Tensor::from_vec_allow_nonfinite(n, d, dv)?;
    let dqphi = Tensor::from_vec_allow_nonfinite(n, d, dqphi)?;
    let dkphi = Tensor::from_vec_allow_nonfinite(n, d, dkphi)?;
    for (stage, t) in [("dQ", &dq), ("dK", &dk), ("dV", &dv), ("dQphi", &dqphi), ("dKphi", &dkphi)] {
        if let Some(pos) = t.data().iter().position(|x| !x.is_finite()) {
            let row = pos / d;
            return Err(SlaError::NonFinite {
                stage,
                row,
                block_row: row / b_q,
                block_col: None,
            });
        }
    }
    let dq_total = dq.add(&feature_map_vjp(&state.q, state.phi, &dqphi)?)?;
    let dk_total = dk.add(&feature_map_vjp(&state.k, state.phi, &dkphi)?)?;
    Ok(SlaGradients {
        dq,
        dk,
        dv,
        dqphi,
        dkphi,
        dw: None,
        dq_total,
        dk_total,
        counter,
    })
}

/// Backward from `dO` of the combined output `O_s + O_l W`.
pub fn sla_backward_with_projection<T: Real>(
    state: &SlaForwardState<T>,
    proj: &OutputProjection<T>,
    d_o: &Tensor<T>,
    cfg: &SlaConfig,
) -> Result<SlaGradients<T>> {
    let (d_o_s, d_o_l, dw) = proj_backward(d_o, &state.o_l, &proj.w)?;
    let mut grads = sla_backward(state, &d_o_s, &d_o_l, cfg)?;
    grads.dw = Some(dw);
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_maps::FeatureMapKind;
    use crate::forward::{combine_outputs, sla_forward_with_mask};
    use crate::layout::make_block_layout;
    use crate::mask::{build_lookup, CompressedMask};
    use crate::oracle::{dense_backward, DenseInputs, DensePaths};
    use crate::rng::{gaussian_tensor, SplitMix64};
    use crate::tensor::max_rel_error;

    fn rand(rng: &mut SplitMix64, r: usize, c: usize) -> Tensor<f64> {
        gaussian_tensor(rng, r, c, 1.0)
    }

    #[test]
    fn projection_backward_examples() {
        let mut rng = SplitMix64::new(3);
        let d_o = rand(&mut rng, 6, 3);
        let o_l = rand(&mut rng, 6, 3);
        let (dos, dol, dw) = proj_backward(&d_o, &o_l, &Tensor::zeros(3, 3)).unwrap();
        assert_eq!(dos, d_o);
        assert_eq!(dol.max_abs(), 0.0);
        assert_eq!(dw, o_l.t_matmul(&d_o).unwrap());
        let (_, dol, _) = proj_backward(&d_o, &o_l, &Tensor::identity(3)).unwrap();
        assert_eq!(dol, d_o);
        assert!(proj_backward(&d_o, &o_l, &Tensor::zeros(2, 2)).is_err());
    }

    #[test]
    fn projection_backward_matches_finite_differences() {
        let layout = make_block_layout(16, 4, 4, 4).unwrap();
        let mut rng = SplitMix64::new(8);
        let (q, k, v) = (rand(&mut rng, 16, 4), rand(&mut rng, 16, 4), rand(&mut rng, 16, 4));
        let w = rand(&mut rng, 4, 4);
        let d_o = rand(&mut rng, 16, 4);
        let mask = build_lookup(4, 4, &[1, 0, 0, -1, 0, 1, 0, 0, 1, 0, 1, -1, 0, 0, 0, 1]).unwrap();
        let cfg = SlaConfig::default();
        let st = sla_forward_with_mask(&q, &k, &v, &mask, &cfg, &layout).unwrap();
        let (_, _, dw) = proj_backward(&d_o, &st.o_l, &w).unwrap();
        let h = 1e-5;
        let mut fd = Tensor::zeros(4, 4);
        for a in 0..4 {
            for b in 0..4 {
                let mut wp = w.clone();
                wp.set(a, b, w.get(a, b) + h);
                let mut wm = w.clone();
                wm.set(a, b, w.get(a, b) - h);
                let lp = combine_outputs(&st, &OutputProjection { w: wp }).unwrap().dot(&d_o).unwrap();
                let lm = combine_outputs(&st, &OutputProjection { w: wm }).unwrap().dot(&d_o).unwrap();
                fd.set(a, b, (lp - lm) / (2.0 * h));
            }
        }
        assert!(max_rel_error(&dw, &fd) <= 1e-7);
    }

    #[test]
    fn zero_cotangents_give_zero_gradients() {
        let layout = make_block_layout(16, 4, 4, 4).unwrap();
        let mut rng = SplitMix64::new(1);
        let (q, k, v) = (rand(&mut rng, 16, 4), rand(&mut rng, 16, 4), rand(&mut rng, 16, 4));
        let mask = build_lookup(4, 4, &[1, 0, -1, 0, 0, 1, 0, 0, 0, 0, 1, 0, -1, 0, 0, 1]).unwrap();
        let cfg = SlaConfig::default();
        let st = sla_forward_with_mask(&q, &k, &v, &mask, &cfg, &layout).unwrap();
        let z = Tensor::zeros(16, 4);
        let g = sla_backward(&st, &z, &z, &cfg).unwrap();
        for t in [&g.dq, &g.dk, &g.dv, &g.dqphi, &g.dkphi, &g.dq_total, &g.dk_total] {
            assert_eq!(t.max_abs(), 0.0);
        }
    }

    #[test]
    fn all_critical_matches_dense_full_backward() {
        let layout = make_block_layout(32, 8, 8, 8).unwrap();
        let mut rng = SplitMix64::new(2);
        let (q, k, v) = (rand(&mut rng, 32, 8), rand(&mut rng, 32, 8), rand(&mut rng, 32, 8));
        let dos = rand(&mut rng, 32, 8);
        let mask = CompressedMask::uniform(4, 4, BlockLabel::Critical);
        let cfg = SlaConfig::default();
        let st = sla_forward_with_mask(&q, &k, &v, &mask, &cfg, &layout).unwrap();
        let zero = Tensor::zeros(32, 8);
        let g = sla_backward(&st, &dos, &zero, &cfg).unwrap();
        let inputs = DenseInputs { q: &q, k: &k, v: &v, qphi: &st.qphi, kphi: &st.kphi };
        let dense = dense_backward(&inputs, &mask, &dos, &zero, DensePaths::BOTH).unwrap();
        assert!(max_rel_error(&g.dq, &dense.dq) <= 1e-10);
        assert!(max_rel_error(&g.dk, &dense.dk) <= 1e-10);
        assert!(max_rel_error(&g.dv, &dense.dv()) <= 1e-10);
    }

    #[test]
    fn mixed_mask_matches_dense_oracle_for_every_strategy() {
        let layout = make_block_layout(64, 8, 16, 8).unwrap();
        let mut rng = SplitMix64::new(4);
        let (q, k, v) = (rand(&mut rng, 64, 8), rand(&mut rng, 64, 8), rand(&mut rng, 64, 8));
        let (dos, dol) = (rand(&mut rng, 64, 8), rand(&mut rng, 64, 8));
        let labels: Vec<i8> = (0..32).map(|_| rng.next_below(3) as i8 - 1).collect();
        let mask = build_lookup(4, 8, &labels).unwrap();
        for agg in ["direct", "complement", "four-russians"] {
            let cfg = SlaConfig { aggregation: agg.parse().unwrap(), g: 3, ..Default::default() };
            let st = sla_forward_with_mask(&q, &k, &v, &mask, &cfg, &layout).unwrap();
            let g = sla_backward(&st, &dos, &dol, &cfg).unwrap();
            let inputs = DenseInputs { q: &q, k: &k, v: &v, qphi: &st.qphi, kphi: &st.kphi };
            let dense = dense_backward(&inputs, &mask, &dos, &dol, DensePaths::BOTH).unwrap();
            assert!(max_rel_error(&g.dq, &dense.dq) <= 1e-10, "{agg}");
            assert!(max_rel_error(&g.dk, &dense.dk) <= 1e-10, "{agg}");
            assert!(max_rel_error(&g.dv, &dense.dv()) <= 1e-10, "{agg}");
            assert!(max_rel_error(&g.dqphi, &dense.dqphi) <= 1e-10, "{agg}");
            assert!(max_rel_error(&g.dkphi, &dense.dkphi) <= 1e-10, "{agg}");
        }
    }

    #[test]
    fn linear_in_cotangents_and_dv_accumulates() {
        let layout = make_block_layout(32, 4, 8, 8).unwrap();
        let mut rng = SplitMix64::new(6);
        let (q, k, v) = (rand(&mut rng, 32, 4), rand(&mut rng, 32, 4), rand(&mut rng, 32, 4));
        let mask = build_lookup(4, 4, &[1, 0, -1, 0, 0, 1, 0, 0, 0, -1, 1, 0, 0, 0, 0, 1]).unwrap();
        let cfg = SlaConfig { phi: FeatureMapKind::FeatSoftmax, ..Default::default() };
        let st = sla_forward_with_mask(&q, &k, &v, &mask, &cfg, &layout).unwrap();
        let (a1, b1, a2, b2) = (rand(&mut rng, 32, 4), rand(&mut rng, 32, 4), rand(&mut rng, 32, 4), rand(&mut rng, 32, 4));
        let (alpha, beta) = (0.7, -1.3);
        let g1 = sla_backward(&st, &a1, &b1, &cfg).unwrap();
        let g2 = sla_backward(&st, &a2, &b2, &cfg).unwrap();
        let mix = |x: &Tensor<f64>, y: &Tensor<f64>| x.scale(alpha).add(&y.scale(beta)).unwrap();
        let g = sla_backward(&st, &mix(&a1, &a2), &mix(&b1, &b2), &cfg).unwrap();
        for (got, x, y) in [
            (&g.dq_total, &g1.dq_total, &g2.dq_total),
            (&g.dk_total, &g1.dk_total, &g2.dk_total),
            (&g.dv, &g1.dv, &g2.dv),
        ] {
            assert!(max_rel_error(got, &mix(x, y)) <= 1e-12);
        }

        let zero = Tensor::zeros(32, 4);
        let only_s = sla_backward(&st, &a1, &zero, &cfg).unwrap();
        let only_l = sla_backward(&st, &zero, &b1, &cfg).unwrap();
        assert!(max_rel_error(&g1.dv, &only_s.dv.add(&only_l.dv).unwrap()) <= 1e-14);
    }

    #[test]
    fn negligible_keys_do_not_matter() {
        let layout = make_block_layout(32, 4, 8, 8).unwrap();
        let mut rng = SplitMix64::new(10);
        let (q, k, v) = (rand(&mut rng, 32, 4), rand(&mut rng, 32, 4), rand(&mut rng, 32, 4));
        // Column block 2 is negligible for every row.
        let mask = build_lookup(4, 4, &[1, 0, -1, 0, 0, 1, -1, 0, 0, 0, -1, 1, 1, 0, -1, 0]).unwrap();
        let cfg = SlaConfig::default();
        let (dos, dol) = (rand(&mut rng, 32, 4), rand(&mut rng, 32, 4));
        let st = sla_forward_with_mask(&q, &k, &v, &mask, &cfg, &layout).unwrap();
        let g = sla_backward(&st, &dos, &dol, &cfg).unwrap();
        let mut k2 = k.clone();
        for r in layout.kv_rows(2) {
            for x in k2.row_mut(r) {
                *x += 5.0;
            }
        }
        let st2 = sla_forward_with_mask(&q, &k2, &v, &mask, &cfg, &layout).unwrap();
        let g2 = sla_backward(&st2, &dos, &dol, &cfg).unwrap();
        assert_eq!(st2.o_s, st.o_s);
        assert_eq!(st2.o_l, st.o_l);
        assert_eq!(g2.dq_total, g.dq_total);
        assert_eq!(g2.dv, g.dv);
        for r in (0..32).filter(|r| !layout.kv_rows(2).contains(r)) {
            assert_eq!(g2.dk_total.row(r), g.dk_total.row(r));
        }
        assert!(layout.kv_rows(2).all(|r| g2.dk_total.row(r).iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn relu_dead_rows_contribute_nothing() {
        let layout = make_block_layout(8, 2, 4, 4).unwrap();
        let q = Tensor::from_fn(8, 2, |r, c| (r * 2 + c) as f64 * 0.1);
        let k = Tensor::from_fn(8, 2, |_, _| -1.0);
        let v = Tensor::from_fn(8, 2, |r, c| (r + c) as f64);
        let mask = build_lookup(2, 2, &[1, 0, 0, 1]).unwrap();
        let cfg = SlaConfig { phi: FeatureMapKind::Relu, ..Default::default() };
        let st = sla_forward_with_mask(&q, &k, &v, &mask, &cfg, &layout).unwrap();
        let ones = Tensor::from_fn(8, 2, |_, _| 1.0);
        let g = sla_backward(&st, &Tensor::zeros(8, 2), &ones, &cfg).unwrap();
        assert_eq!(g.dqphi.max_abs(), 0.0);
        assert_eq!(g.dkphi.max_abs(), 0.0);
        assert_eq!(g.dv.max_abs(), 0.0);
    }

    #[test]
    fn cotangent_shape_is_checked() {
        let layout = make_block_layout(8, 2, 4, 4).unwrap();
        let mut rng = SplitMix64::new(1);
        let (q, k, v) = (rand(&mut rng, 8, 2), rand(&mut rng, 8, 2), rand(&mut rng, 8, 2));
        let cfg = SlaConfig::default();
        let st = crate::forward::sla_forward(&q, &k, &v, &cfg, &layout).unwrap();
        assert!(sla_backward(&st, &Tensor::zeros(4, 2), &Tensor::zeros(8, 2), &cfg).is_err());
    }
}
