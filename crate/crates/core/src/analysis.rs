//! Diagnostics on dense attention weights: magnitude histograms, stable
//! rank, the split of `P` into its largest entries and the remainder, and
//! the error of keeping only the largest entries.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SlaError};
use crate::oracle::{restricted_softmax, scores};
use crate::rng::{gaussian_tensor, SplitMix64};
use crate::tensor::{Real, Tensor};

/// Iteration cap for the power iteration in [`stable_rank`].
pub const POWER_MAX_ITERS: usize = 10_000;
/// Relative residual `‖AᵀAv - λv‖ / λ` at which the power iteration stops.
pub const POWER_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightHistogram {
    pub n: usize,
    /// Fraction of entries `> 1/N`.
    pub frac_above_mean: f64,
    /// Fraction of entries `< 1/(100 N)`.
    pub frac_below_tiny: f64,
    pub frac_middle: f64,
    /// Bin edges in `log10(p)`; entries below the first edge (zeros included)
    /// land in the first bin.
    pub log10_edges: Vec<f64>,
    pub counts: Vec<u64>,
}

const HIST_BINS: usize = 48;
/// Lowest histogram edge as a multiple of `1/N`.
const HIST_FLOOR: f64 = 1e-8;

pub fn weight_histogram<T: Real>(p: &Tensor<T>) -> Result<WeightHistogram> {
    let (n, cols) = p.shape();
    if n != cols || n == 0 {
        return Err(SlaError::Shape(format!("weight_histogram expects N x N, got {n}x{cols}")));
    }
    let p = p.cast::<f64>();
    let worst = (0..n)
        .map(|r| (p.row(r).iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    if worst > 1e-6 || p.data().iter().any(|&x| x < 0.0) {
        log::warn!("weight_histogram: input is not row-stochastic (row sum off by {worst:e})");
    }
    let mean = 1.0 / n as f64;
    let tiny = mean / 100.0;
    let lo = (HIST_FLOOR * mean).log10();
    let width = -lo / HIST_BINS as f64;
    let log10_edges: Vec<f64> = (0..=HIST_BINS).map(|b| lo + width * b as f64).collect();
    let mut counts = vec![0u64; HIST_BINS];
    let (mut above, mut below) = (0u64, 0u64);
    for &x in p.data() {
        if x > mean {
            above += 1;
        } else if x < tiny {
            below += 1;
        }
        let bin = if x > 0.0 { ((x.log10() - lo) / width).floor() } else { 0.0 };
        counts[(bin.max(0.0) as usize).min(HIST_BINS - 1)] += 1;
    }
    let total = (n * n) as f64;
    let frac_above_mean = above as f64 / total;
    let frac_below_tiny = below as f64 / total;
    Ok(WeightHistogram {
        n,
        frac_above_mean,
        frac_below_tiny,
        frac_middle: (n * n - above as usize - below as usize) as f64 / total,
        log10_edges,
        counts,
    })
}

/// `‖A‖_F² / ‖A‖₂²`, with the spectral norm from power iteration on `AᵀA`
/// started at a fixed pseudo-random vector.
pub fn stable_rank<T: Real>(a: &Tensor<T>) -> Result<f64> {
    let a = a.cast::<f64>();
    let fro = a.frobenius_sq();
    if fro == 0.0 {
        return Err(SlaError::ZeroMatrix);
    }
    let (rows, cols) = a.shape();
    let mut rng = SplitMix64::new(0x5eed);
    let mut v: Vec<f64> = (0..cols).map(|_| rng.next_normal()).collect();
    normalize(&mut v);
    let mut lambda = 0.0;
    for iter in 0..POWER_MAX_ITERS {
        let mut av = vec![0.0; rows];
        for (r, x) in av.iter_mut().enumerate() {
            *x = a.row(r).iter().zip(&v).map(|(p, q)| p * q).sum();
        }
        let mut w = vec![0.0; cols];
        for (r, &s) in av.iter().enumerate() {
            for (o, &x) in w.iter_mut().zip(a.row(r)) {
                *o += s * x;
            }
        }
        lambda = v.iter().zip(&w).map(|(p, q)| p * q).sum::<f64>();
        let residual = w.iter().zip(&v).map(|(x, y)| (x - lambda * y).powi(2)).sum::<f64>().sqrt();
        if lambda <= 0.0 {
            // start vector in the null space; restart elsewhere
            v = (0..cols).map(|_| rng.next_normal()).collect();
            normalize(&mut v);
            continue;
        }
        v = w;
        normalize(&mut v);
        if residual <= POWER_TOL * lambda {
            break;
        }
        if iter + 1 == POWER_MAX_ITERS {
            log::warn!("stable_rank: power iteration hit {POWER_MAX_ITERS} iterations");
        }
    }
    Ok(fro / lambda)
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Indices of the `count` largest entries, ties broken by lower flat index.
fn top_entries(p: &Tensor<f64>, count: usize) -> Vec<bool> {
    let data = p.data();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&a, &b| data[b].total_cmp(&data[a]).then(a.cmp(&b)));
    let mut keep = vec![false; data.len()];
    for &idx in &order[..count.min(data.len())] {
        keep[idx] = true;
    }
    keep
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub stable_rank_full: f64,
    pub stable_rank_top: f64,
    pub stable_rank_rest: f64,
    pub top_fraction: f64,
}

/// `P ⊙ M` and `P ⊙ (1 - M)` where `M` marks the `round(top_fraction · N²)`
/// largest entries (at least one).
pub fn split_weights<T: Real>(p: &Tensor<T>, top_fraction: f64) -> Result<(Tensor<f64>, Tensor<f64>)> {
    if !(top_fraction > 0.0 && top_fraction < 1.0) {
        return Err(SlaError::Config(format!("top_fraction must be in (0, 1), got {top_fraction}")));
    }
    let p = p.cast::<f64>();
    let total = p.data().len();
    let count = ((top_fraction * total as f64).round() as usize).max(1);
    let keep = top_entries(&p, count);
    let (rows, cols) = p.shape();
    let top = Tensor::from_fn(rows, cols, |r, c| if keep[r * cols + c] { p.get(r, c) } else { 0.0 });
    let rest = Tensor::from_fn(rows, cols, |r, c| if keep[r * cols + c] { 0.0 } else { p.get(r, c) });
    Ok((top, rest))
}

/// An all-zero component reports stable rank 0.
pub fn decompose_weights<T: Real>(p: &Tensor<T>, top_fraction: f64) -> Result<DecompositionReport> {
    let (top, rest) = split_weights(p, top_fraction)?;
    let component = |a: &Tensor<f64>| match stable_rank(a) {
        Err(SlaError::ZeroMatrix) => Ok(0.0),
        other => other,
    };
    Ok(DecompositionReport {
        stable_rank_full: stable_rank(p)?,
        stable_rank_top: component(&top)?,
        stable_rank_rest: component(&rest)?,
        top_fraction,
    })
}

/// Relative L1 error of attention restricted to the largest
/// `round(keep_fraction · N²)` weights plus every row's largest weight,
/// renormalized per row.
pub fn sparse_approx_error<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, keep_fraction: f64) -> Result<f64> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(SlaError::Config(format!("keep_fraction must be in (0, 1], got {keep_fraction}")));
    }
    let (q, k, v) = (q.cast::<f64>(), k.cast::<f64>(), v.cast::<f64>());
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(SlaError::Shape("sparse_approx_error: Q, K, V shapes disagree".into()));
    }
    let s = scores(&q, &k);
    let p = restricted_softmax(&s, |_, _| true);
    let o_full = p.matmul(&v)?;
    let (rows, cols) = p.shape();
    let count = ((keep_fraction * (rows * cols) as f64).round() as usize).max(1);
    let mut keep = top_entries(&p, count);
    for r in 0..rows {
        let row = p.row(r);
        let best = (0..cols).fold(0, |b, c| if row[c] > row[b] { c } else { b });
        keep[r * cols + best] = true;
    }
    let o_masked = restricted_softmax(&s, |r, c| keep[r * cols + c]).matmul(&v)?;
    let num: f64 = o_masked.data().iter().zip(o_full.data()).map(|(a, b)| (a - b).abs()).sum();
    let den: f64 = o_full.data().iter().map(|x| x.abs()).sum();
    Ok(if den == 0.0 { num } else { num / den })
}

/// Softmax weights of Gaussian `Q`, `K` with entries of standard deviation `std`.
pub fn synthetic_attention(seed: u64, n: usize, d: usize, std: f64) -> Result<Tensor<f64>> {
    let mut rng = SplitMix64::new(seed);
    let q: Tensor<f64> = gaussian_tensor(&mut rng, n, d, std);
    let k: Tensor<f64> = gaussian_tensor(&mut rng, n, d, std);
    Ok(restricted_softmax(&scores(&q, &k), |_, _| true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::dense_attention_forward;
    use proptest::prelude::*;

    #[test]
    fn histogram_boundaries() {
        let n = 8;
        let uniform = Tensor::from_fn(n, n, |_, _| 1.0 / n as f64);
        let h = weight_histogram(&uniform).unwrap();
        assert_eq!((h.frac_above_mean, h.frac_below_tiny, h.frac_middle), (0.0, 0.0, 1.0));

        let n = 128;
        let perm = Tensor::<f64>::identity(n);
        let h = weight_histogram(&perm).unwrap();
        assert_eq!(h.frac_above_mean, 1.0 / n as f64);
        assert_eq!(h.frac_below_tiny, 1.0 - 1.0 / n as f64);
        assert_eq!(h.counts.iter().sum::<u64>(), (n * n) as u64);
    }

    #[test]
    fn histogram_matches_naive_scan() {
        let mut rng = SplitMix64::new(5);
        let q: Tensor<f64> = gaussian_tensor(&mut rng, 512, 64, 1.0);
        let k: Tensor<f64> = gaussian_tensor(&mut rng, 512, 64, 1.0);
        let p = dense_attention_forward(&q, &k, &k).unwrap().p;
        let h = weight_histogram(&p).unwrap();
        let (mut above, mut below) = (0, 0);
        for r in 0..512 {
            for c in 0..512 {
                let x = p.get(r, c);
                if x > 1.0 / 512.0 {
                    above += 1;
                }
                if x < 1.0 / 51200.0 {
                    below += 1;
                }
            }
        }
        assert_eq!(h.frac_above_mean, above as f64 / 262144.0);
        assert_eq!(h.frac_below_tiny, below as f64 / 262144.0);
        assert!((h.frac_above_mean + h.frac_below_tiny + h.frac_middle - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn stable_rank_examples() {
        assert!((stable_rank(&Tensor::<f64>::identity(7)).unwrap() - 7.0).abs() < 1e-12);
        let ones = Tensor::from_fn(5, 9, |_, _| 1.0);
        assert!((stable_rank(&ones).unwrap() - 1.0).abs() < 1e-12);
        let diag = Tensor::from_rows(&[&[2.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]).unwrap();
        assert!((stable_rank(&diag).unwrap() - 1.5).abs() < 1e-12);
        assert!(matches!(stable_rank(&Tensor::<f64>::zeros(3, 3)), Err(SlaError::ZeroMatrix)));
    }

    /// 2x2 singular values in closed form.
    #[test]
    fn stable_rank_matches_closed_form_svd() {
        let mut rng = SplitMix64::new(17);
        for _ in 0..50 {
            let a: Tensor<f64> = gaussian_tensor(&mut rng, 2, 2, 1.0);
            let (p, q, r, s) = (a.get(0, 0), a.get(0, 1), a.get(1, 0), a.get(1, 1));
            let fro = p * p + q * q + r * r + s * s;
            let det = p * s - q * r;
            let top = (fro + (fro * fro - 4.0 * det * det).sqrt()) / 2.0;
            assert!((stable_rank(&a).unwrap() - fro / top).abs() <= 1e-9 * fro / top);
        }
    }

    #[test]
    fn decomposition_limits_and_identity() {
        let p = synthetic_attention(3, 64, 16, 1.0).unwrap();
        let (top, rest) = split_weights(&p, 0.08).unwrap();
        assert_eq!(top.add(&rest).unwrap(), p);
        let full = stable_rank(&p).unwrap();
        let near_one = decompose_weights(&p, 1.0 - 1e-9).unwrap();
        assert!((near_one.stable_rank_top - full).abs() < 1e-9 * full);
        assert_eq!(near_one.stable_rank_rest, 0.0);

        let uniform = Tensor::from_fn(8, 8, |_, _| 0.125);
        let (top, rest) = split_weights(&uniform, 0.25).unwrap();
        assert!(top.data().iter().chain(rest.data()).all(|&x| x == 0.0 || x == 0.125));
        assert_eq!(top.data().iter().filter(|&&x| x > 0.0).count(), 16);
        // ties resolve to the first 16 flat indices
        assert!(top.data()[..16].iter().all(|&x| x == 0.125));
        assert_eq!(top.add(&rest).unwrap(), uniform);
        assert!(split_weights(&uniform, 1.0).is_err());
    }

    #[test]
    fn sparse_error_endpoints() {
        let mut rng = SplitMix64::new(9);
        let q: Tensor<f64> = gaussian_tensor(&mut rng, 32, 8, 1.0);
        let k: Tensor<f64> = gaussian_tensor(&mut rng, 32, 8, 1.0);
        let v: Tensor<f64> = gaussian_tensor(&mut rng, 32, 8, 1.0);
        assert_eq!(sparse_approx_error(&q, &k, &v, 1.0).unwrap(), 0.0);

        // one entry per row: hard argmax attention
        let e = sparse_approx_error(&q, &k, &v, 1e-9).unwrap();
        let full = dense_attention_forward(&q, &k, &v).unwrap();
        let mut one_hot = Tensor::zeros(32, 8);
        for r in 0..32 {
            let row = full.p.row(r);
            let best = (0..32).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            one_hot.row_mut(r).copy_from_slice(v.row(best));
        }
        let num: f64 = one_hot.data().iter().zip(full.o.data()).map(|(a, b)| (a - b).abs()).sum();
        let den: f64 = full.o.data().iter().map(|x| x.abs()).sum();
        assert!((e - num / den).abs() <= 1e-14);
        assert!(sparse_approx_error(&q, &k, &v, 0.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn stable_rank_scale_invariant_and_bounded(seed in 0u64..10_000, c in prop_oneof![-50.0..-0.01, 0.01..50.0]) {
            let mut rng = SplitMix64::new(seed);
            let a: Tensor<f64> = gaussian_tensor(&mut rng, 6, 4, 1.0);
            let sr = stable_rank(&a).unwrap();
            let scaled = stable_rank(&a.scale(c)).unwrap();
            prop_assert!((sr - scaled).abs() <= 1e-8 * sr);
            prop_assert!((1.0 - 1e-12..=4.0 + 1e-12).contains(&sr));
        }

        #[test]
        fn split_is_exact_for_any_fraction(seed in 0u64..10_000, frac in 0.001f64..0.999) {
            let p = synthetic_attention(seed, 16, 4, 1.0).unwrap();
            let (top, rest) = split_weights(&p, frac).unwrap();
            prop_assert_eq!(top.add(&rest).unwrap(), p);
        }
    }
}
