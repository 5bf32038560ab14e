//! Block classification: pooled compressed weights `P_c` and the three-way
//! label grid (critical / marginal / negligible) with per-row index lists.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SlaError};
use crate::layout::BlockLayout;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(i8)]
pub enum BlockLabel {
    /// Exact softmax attention.
    Critical = 1,
    /// Linear attention.
    Marginal = 0,
    /// Skipped.
    Negligible = -1,
}

impl BlockLabel {
    pub fn as_i8(self) -> i8 {
        self as i8
    }
}

impl TryFrom<i8> for BlockLabel {
    type Error = SlaError;

    fn try_from(v: i8) -> Result<Self> {
        match v {
            1 => Ok(Self::Critical),
            0 => Ok(Self::Marginal),
            -1 => Ok(Self::Negligible),
            other => Err(SlaError::Mask(format!("label {other} not in {{-1, 0, 1}}"))),
        }
    }
}

/// Per-row label counts `(n1, n0, n−1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RowCounts {
    pub critical: usize,
    pub marginal: usize,
    pub negligible: usize,
}

/// `T_m x T_n` label grid plus lookup tables of critical and marginal columns.
///
/// Masks produced by [`classify_mask`] have at least one critical block per
/// row. Masks built directly with [`build_lookup`] may have rows without one;
/// those rows produce zero sparse output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompressedMask {
    t_m: usize,
    t_n: usize,
    labels: Vec<BlockLabel>,
    critical_idx: Vec<Vec<usize>>,
    marginal_idx: Vec<Vec<usize>>,
    counts: Vec<RowCounts>,
}

impl CompressedMask {
    pub fn t_m(&self) -> usize {
        self.t_m
    }
    pub fn t_n(&self) -> usize {
        self.t_n
    }
    #[inline]
    pub fn label(&self, i: usize, j: usize) -> BlockLabel {
        self.labels[i * self.t_n + j]
    }
    pub fn labels(&self) -> &[BlockLabel] {
        &self.labels
    }
    pub fn critical_idx(&self, i: usize) -> &[usize] {
        &self.critical_idx[i]
    }
    pub fn marginal_idx(&self, i: usize) -> &[usize] {
        &self.marginal_idx[i]
    }
    pub fn counts(&self, i: usize) -> RowCounts {
        self.counts[i]
    }

    /// Columns of row `i` not labeled marginal, ascending.
    pub fn non_marginal_idx(&self, i: usize) -> Vec<usize> {
        (0..self.t_n)
            .filter(|&j| self.label(i, j) != BlockLabel::Marginal)
            .collect()
    }

    /// Rows of column `j` carrying `label`, ascending.
    pub fn rows_with(&self, j: usize, label: BlockLabel) -> Vec<usize> {
        (0..self.t_m).filter(|&i| self.label(i, j) == label).collect()
    }

    pub fn uniform(t_m: usize, t_n: usize, label: BlockLabel) -> Self {
        build_lookup(t_m, t_n, &vec![label.as_i8(); t_m * t_n]).expect("uniform grid is valid")
    }

    pub fn fraction(&self, label: BlockLabel) -> f64 {
        let n = self.labels.iter().filter(|&&l| l == label).count();
        n as f64 / self.labels.len() as f64
    }

    pub fn check_layout(&self, layout: &BlockLayout) -> Result<()> {
        if (self.t_m, self.t_n) != (layout.t_m, layout.t_n) {
            return Err(SlaError::Shape(format!(
                "mask is {}x{}, layout has {}x{} blocks",
                self.t_m, self.t_n, layout.t_m, layout.t_n
            )));
        }
        Ok(())
    }

    pub fn to_dump(&self) -> MaskDump {
        MaskDump {
            t_m: self.t_m,
            t_n: self.t_n,
            labels: self.labels.iter().map(|l| l.as_i8()).collect(),
        }
    }
}

/// JSON fixture form: `{"T_m": .., "T_n": .., "labels": [row-major ints]}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskDump {
    #[serde(rename = "T_m")]
    pub t_m: usize,
    #[serde(rename = "T_n")]
    pub t_n: usize,
    pub labels: Vec<i8>,
}

impl MaskDump {
    pub fn into_mask(self) -> Result<CompressedMask> {
        build_lookup(self.t_m, self.t_n, &self.labels)
    }
}

pub fn save_mask_json(path: impl AsRef<Path>, mask: &CompressedMask) -> Result<()> {
    std::fs::write(path, serde_json::to_vec(&mask.to_dump())?)?;
    Ok(())
}

pub fn load_mask_json(path: impl AsRef<Path>) -> Result<CompressedMask> {
    let dump: MaskDump = serde_json::from_slice(&std::fs::read(path)?)?;
    dump.into_mask()
}

/// Builds the index lists and counts for a row-major label grid.
pub fn build_lookup(t_m: usize, t_n: usize, labels: &[i8]) -> Result<CompressedMask> {
    if t_m == 0 || t_n == 0 || labels.len() != t_m * t_n {
        return Err(SlaError::Mask(format!(
            "{} labels for a {t_m}x{t_n} grid",
            labels.len()
        )));
    }
    let labels = labels
        .iter()
        .map(|&v| BlockLabel::try_from(v))
        .collect::<Result<Vec<_>>>()?;
    let mut critical_idx = Vec::with_capacity(t_m);
    let mut marginal_idx = Vec::with_capacity(t_m);
    let mut counts = Vec::with_capacity(t_m);
    for row in labels.chunks(t_n) {
        let mut crit = Vec::new();
        let mut marg = Vec::new();
        let mut neg = 0;
        for (j, l) in row.iter().enumerate() {
            match l {
                BlockLabel::Critical => crit.push(j),
                BlockLabel::Marginal => marg.push(j),
                BlockLabel::Negligible => neg += 1,
            }
        }
        counts.push(RowCounts {
            critical: crit.len(),
            marginal: marg.len(),
            negligible: neg,
        });
        critical_idx.push(crit);
        marginal_idx.push(marg);
    }
    Ok(CompressedMask {
        t_m,
        t_n,
        labels,
        critical_idx,
        marginal_idx,
        counts,
    })
}

/// Row-block compressed attention weights, `T_m x T_n`, rows sum to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedWeights<T> {
    pub p_c: Tensor<T>,
}

/// Mean of each run of `b` consecutive rows.
pub fn pool_mean<T: Real>(x: &Tensor<T>, b: usize) -> Result<Tensor<T>> {
    if b == 0 || !x.rows().is_multiple_of(b) {
        return Err(SlaError::Layout(format!(
            "pool size {b} does not divide {} rows",
            x.rows()
        )));
    }
    let groups = x.rows() / b;
    let inv = T::one() / T::lit(b as f64);
    let mut out = Tensor::zeros(groups, x.cols());
    for g in 0..groups {
        let acc = out.row_mut(g);
        for r in g * b..(g + 1) * b {
            for (a, &v) in acc.iter_mut().zip(x.row(r)) {
                *a += v;
            }
        }
        for a in acc.iter_mut() {
            *a *= inv;
        }
    }
    Ok(out)
}

/// `P_c = softmax_rows(pool(Q) pool(K)ᵀ / √d)`.
pub fn predict_compressed_weights<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    layout: &BlockLayout,
) -> Result<CompressedWeights<T>> {
    layout.check_input("Q", q.shape())?;
    layout.check_input("K", k.shape())?;
    let pq = pool_mean(q, layout.b_q)?;
    let pk = pool_mean(k, layout.b_kv)?;
    let scale = T::one() / T::lit(layout.d as f64).sqrt();
    let mut p_c = pq.matmul_t(&pk)?.scale(scale);
    for i in 0..p_c.rows() {
        let row = p_c.row_mut(i);
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(CompressedWeights { p_c })
}

/// `floor(x + 0.5)`.
fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

/// Per-row block counts `(n1, n−1)` for a row of `t_n` blocks.
///
/// `n1 = max(1, round(k_h·T_n/100))`, `n−1 = round(k_l·T_n/100)` capped so
/// that `n1 + n−1 ≤ T_n`. Rounding is half-up.
pub fn class_counts(t_n: usize, k_h: f64, k_l: f64) -> (usize, usize) {
    let n1 = round_half_up(k_h * t_n as f64 / 100.0).clamp(1, t_n);
    let n_neg = round_half_up(k_l * t_n as f64 / 100.0).min(t_n - n1);
    (n1, n_neg)
}

/// Labels each row independently: the `n1` largest entries critical, the
/// `n−1` smallest negligible, the rest marginal. On ties the lower column
/// index gets the higher class.
pub fn classify_mask<T: Real>(
    weights: &CompressedWeights<T>,
    k_h: f64,
    k_l: f64,
) -> Result<CompressedMask> {
    if !(k_h > 0.0 && k_h <= 100.0 && (0.0..100.0).contains(&k_l) && k_h + k_l <= 100.0) {
        return Err(SlaError::Config(format!(
            "k_h={k_h}, k_l={k_l}: need 0 < k_h, 0 <= k_l, k_h + k_l <= 100"
        )));
    }
    let p = &weights.p_c;
    let (t_m, t_n) = p.shape();
    let (n1, n_neg) = class_counts(t_n, k_h, k_l);
    let mut labels = vec![BlockLabel::Marginal.as_i8(); t_m * t_n];
    let mut order: Vec<usize> = Vec::with_capacity(t_n);
    for i in 0..t_m {
        let row = p.row(i);
        order.clear();
        order.extend(0..t_n);
        // Descending value, ascending index: position in `order` is the rank.
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).expect("finite P_c").then(a.cmp(&b)));
        let out = &mut labels[i * t_n..(i + 1) * t_n];
        for &j in &order[..n1] {
            out[j] = BlockLabel::Critical.as_i8();
        }
        for &j in &order[t_n - n_neg..] {
            out[j] = BlockLabel::Negligible.as_i8();
        }
    }
    build_lookup(t_m, t_n, &labels)
}
