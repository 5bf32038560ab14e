//! Dense `O(N²d)` reference computations in f64.
//!
//! Everything here materialises the full `N x N` score or weight matrix and
//! applies block masks element-wise. The kernels in `forward`/`backward`
//! are checked against these.

use crate::error::{Result, SlaError};
use crate::mask::{BlockLabel, CompressedMask};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DenseAttentionArtifacts {
    /// `QKᵀ/√d`.
    pub s: Tensor<f64>,
    pub p: Tensor<f64>,
    pub o: Tensor<f64>,
}

fn check_qkv(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Result<()> {
    if q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(SlaError::Shape(format!(
            "Q {:?}, K {:?}, V {:?} must all be N x d",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    Ok(())
}

/// Element-wise view of a block mask over an `n x n` matrix.
struct ElementMask<'a> {
    mask: &'a CompressedMask,
    b_q: usize,
    b_kv: usize,
}

impl<'a> ElementMask<'a> {
    fn new(mask: &'a CompressedMask, n: usize) -> Result<Self> {
        if !n.is_multiple_of(mask.t_m()) || !n.is_multiple_of(mask.t_n()) {
            return Err(SlaError::Shape(format!(
                "{}x{} mask does not tile N={n}",
                mask.t_m(),
                mask.t_n()
            )));
        }
        Ok(ElementMask {
            mask,
            b_q: n / mask.t_m(),
            b_kv: n / mask.t_n(),
        })
    }

    #[inline]
    fn label(&self, r: usize, c: usize) -> BlockLabel {
        self.mask.label(r / self.b_q, c / self.b_kv)
    }
}

pub(crate) fn scores(q: &Tensor<f64>, k: &Tensor<f64>) -> Tensor<f64> {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    Tensor::from_fn(q.rows(), k.rows(), |r, c| {
        q.row(r).iter().zip(k.row(c)).map(|(a, b)| a * b).sum::<f64>() * scale
    })
}

/// Row softmax restricted to entries where `keep` holds. Rows with nothing
/// kept are all zero.
pub(crate) fn restricted_softmax(s: &Tensor<f64>, keep: impl Fn(usize, usize) -> bool) -> Tensor<f64> {
    let mut p = Tensor::zeros(s.rows(), s.cols());
    for r in 0..s.rows() {
        let max = (0..s.cols())
            .filter(|&c| keep(r, c))
            .map(|c| s.get(r, c))
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut sum = 0.0;
        for c in 0..s.cols() {
            if keep(r, c) {
                let e = (s.get(r, c) - max).exp();
                p.set(r, c, e);
                sum += e;
            }
        }
        for x in p.row_mut(r) {
            *x /= sum;
        }
    }
    p
}

pub fn dense_attention_forward(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
) -> Result<DenseAttentionArtifacts> {
    check_qkv(q, k, v)?;
    let s = scores(q, k);
    let p = restricted_softmax(&s, |_, _| true);
    let o = p.matmul(v)?;
    Ok(DenseAttentionArtifacts { s, p, o })
}

/// Softmax attention restricted to critical blocks.
pub fn dense_masked_attention_forward(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    mask: &CompressedMask,
) -> Result<Tensor<f64>> {
    check_qkv(q, k, v)?;
    let em = ElementMask::new(mask, q.rows())?;
    let p = restricted_softmax(&scores(q, k), |r, c| em.label(r, c) == BlockLabel::Critical);
    p.matmul(v)
}

/// Per-row logsumexp of the scores over critical blocks; `-inf` for rows
/// with none.
pub fn dense_masked_logsumexp(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    mask: &CompressedMask,
) -> Result<Vec<f64>> {
    let em = ElementMask::new(mask, q.rows())?;
    let s = scores(q, k);
    Ok((0..s.rows())
        .map(|r| {
            let kept: Vec<f64> = (0..s.cols())
                .filter(|&c| em.label(r, c) == BlockLabel::Critical)
                .map(|c| s.get(r, c))
                .collect();
            let max = kept.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return max;
            }
            max + kept.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
        })
        .collect())
}

/// `A = (Qφ Kφᵀ) ⊙ [label = 0]`, the un-normalised linear weights.
fn linear_weights(qphi: &Tensor<f64>, kphi: &Tensor<f64>, em: &ElementMask) -> Tensor<f64> {
    Tensor::from_fn(qphi.rows(), kphi.rows(), |r, c| {
        if em.label(r, c) == BlockLabel::Marginal {
            qphi.row(r).iter().zip(kphi.row(c)).map(|(a, b)| a * b).sum()
        } else {
            0.0
        }
    })
}

/// Linear attention restricted to marginal blocks, built element-wise:
/// `O_r = Σ_c A_rc V_c / Σ_c A_rc`. Rows with zero denominator are zero.
pub fn dense_masked_linear_forward(
    qphi: &Tensor<f64>,
    kphi: &Tensor<f64>,
    v: &Tensor<f64>,
    mask: &CompressedMask,
) -> Result<Tensor<f64>> {
    check_qkv(qphi, kphi, v)?;
    let em = ElementMask::new(mask, qphi.rows())?;
    let a = linear_weights(qphi, kphi, &em);
    let mut o = a.matmul(v)?;
    for r in 0..o.rows() {
        let den: f64 = a.row(r).iter().sum();
        for x in o.row_mut(r) {
            *x = if den == 0.0 { 0.0 } else { *x / den };
        }
    }
    Ok(o)
}

/// Unblocked linear attention `φ(Q)(φ(K)ᵀV) / (φ(Q) · colsum φ(K))`.
pub fn global_linear_attention(
    qphi: &Tensor<f64>,
    kphi: &Tensor<f64>,
    v: &Tensor<f64>,
) -> Result<Tensor<f64>> {
    check_qkv(qphi, kphi, v)?;
    let h = kphi.t_matmul(v)?;
    let z: Vec<f64> = (0..kphi.cols())
        .map(|c| (0..kphi.rows()).map(|r| kphi.get(r, c)).sum())
        .collect();
    let mut o = qphi.matmul(&h)?;
    for r in 0..o.rows() {
        let den: f64 = qphi.row(r).iter().zip(&z).map(|(a, b)| a * b).sum();
        for x in o.row_mut(r) {
            *x = if den == 0.0 { 0.0 } else { *x / den };
        }
    }
    Ok(o)
}

/// Which dense paths [`dense_backward`] differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DensePaths {
    pub sparse: bool,
    pub linear: bool,
}

impl DensePaths {
    pub const BOTH: DensePaths = DensePaths {
        sparse: true,
        linear: true,
    };
}

/// Gradients of `<O_s, dO_s> + <O_l, dO_l>` for the dense restricted paths.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGradients {
    pub dq: Tensor<f64>,
    pub dk: Tensor<f64>,
    pub dv_sparse: Tensor<f64>,
    pub dv_linear: Tensor<f64>,
    pub dqphi: Tensor<f64>,
    pub dkphi: Tensor<f64>,
}

impl DenseGradients {
    pub fn dv(&self) -> Tensor<f64> {
        self.dv_sparse.add(&self.dv_linear).expect("same shape")
    }
}

pub struct DenseInputs<'a> {
    pub q: &'a Tensor<f64>,
    pub k: &'a Tensor<f64>,
    pub v: &'a Tensor<f64>,
    pub qphi: &'a Tensor<f64>,
    pub kphi: &'a Tensor<f64>,
}

/// Explicit dense chain rule over the full `N x N` matrices.
pub fn dense_backward(
    inputs: &DenseInputs,
    mask: &CompressedMask,
    d_o_s: &Tensor<f64>,
    d_o_l: &Tensor<f64>,
    paths: DensePaths,
) -> Result<DenseGradients> {
    let DenseInputs { q, k, v, qphi, kphi } = *inputs;
    check_qkv(q, k, v)?;
    check_qkv(qphi, kphi, v)?;
    if d_o_s.shape() != v.shape() || d_o_l.shape() != v.shape() {
        return Err(SlaError::Shape("output cotangents must be N x d".into()));
    }
    let (n, d) = q.shape();
    let em = ElementMask::new(mask, n)?;
    let mut grads = DenseGradients {
        dq: Tensor::zeros(n, d),
        dk: Tensor::zeros(n, d),
        dv_sparse: Tensor::zeros(n, d),
        dv_linear: Tensor::zeros(n, d),
        dqphi: Tensor::zeros(n, d),
        dkphi: Tensor::zeros(n, d),
    };

    if paths.sparse {
        let p = restricted_softmax(&scores(q, k), |r, c| em.label(r, c) == BlockLabel::Critical);
        let dp = d_o_s.matmul_t(v)?;
        // dS_rc = P_rc (dP_rc - Σ_c' P_rc' dP_rc')
        let mut ds = Tensor::zeros(n, n);
        for r in 0..n {
            let inner: f64 = p.row(r).iter().zip(dp.row(r)).map(|(a, b)| a * b).sum();
            for c in 0..n {
                ds.set(r, c, p.get(r, c) * (dp.get(r, c) - inner));
            }
        }
        let scale = 1.0 / (d as f64).sqrt();
        grads.dq = ds.matmul(k)?.scale(scale);
        grads.dk = ds.t_matmul(q)?.scale(scale);
        grads.dv_sparse = p.t_matmul(d_o_s)?;
    }

    if paths.linear {
        let a = linear_weights(qphi, kphi, &em);
        let den: Vec<f64> = (0..n).map(|r| a.row(r).iter().sum()).collect();
        let o = dense_masked_linear_forward(qphi, kphi, v, mask)?;
        // O_r = Σ_c A_rc V_c / den_r  =>  dA_rc = (dO_r·V_c - dO_r·O_r) / den_r
        let mut da = Tensor::zeros(n, n);
        let mut wn = Tensor::zeros(n, n);
        for r in 0..n {
            if den[r] == 0.0 {
                continue;
            }
            let d_oo: f64 = d_o_l.row(r).iter().zip(o.row(r)).map(|(x, y)| x * y).sum();
            for c in 0..n {
                if em.label(r, c) != BlockLabel::Marginal {
                    continue;
                }
                let dov: f64 = d_o_l.row(r).iter().zip(v.row(c)).map(|(x, y)| x * y).sum();
                da.set(r, c, (dov - d_oo) / den[r]);
                wn.set(r, c, a.get(r, c) / den[r]);
            }
        }
        grads.dqphi = da.matmul(kphi)?;
        grads.dkphi = da.t_matmul(qphi)?;
        grads.dv_linear = wn.t_matmul(d_o_l)?;
    }
    Ok(grads)
}
