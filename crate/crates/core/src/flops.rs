//! Analytic FLOP accounting.
//!
//! Convention: a multiply-accumulate is 2 flops, a lone add or divide is 1.
//! Every term is a closed form in the layout and the label counts:
//!
//! | term     | count                                                        |
//! |----------|--------------------------------------------------------------|
//! | full     | `4 N² d` (`QKᵀ` and `PV`)                                     |
//! | sparse   | `4 b_q b_kv d` per critical block, i.e. `4 N² d ρ₁`           |
//! | linear   | `2 b_kv d²` for `h_j` of every column block with a marginal label |
//! |          | `+ 2 b_q d²` for `Qᵠ_i H_i` of every row block with a marginal label |
//! |          | `+ N d`: one add per `Kᵠ` entry for the `z_j` token sums      |
//! | proj     | `2 N d²` for `Oˡ W`                                           |
//! | mask     | `2 N d` for mean-pooling `Q` and `K`, `+ 2 T_m T_n d` for the pooled scores |
//!
//! The `N d` term for `z` is charged whenever any block is marginal. The
//! denominators `Qᵠ Z`, the feature maps, the softmax exponentials and
//! the aggregation adds are not charged; all are `O(N d)` or smaller.
//! When every column block has a marginal label the linear term is
//! `2 N d² + 2 b_q d² R + N d` with `R` the number of covered row blocks.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::layout::BlockLayout;
use crate::mask::{BlockLabel, CompressedMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub full_flops: u64,
    pub sparse_flops: u64,
    pub linear_flops: u64,
    pub proj_flops: u64,
    pub mask_flops: u64,
    pub sla_total: u64,
    /// `sla_total / full_flops`.
    pub ratio: f64,
    /// `1 - ρ₁`.
    pub sparsity: f64,
}

pub fn flops_report(layout: &BlockLayout, mask: &CompressedMask) -> Result<FlopsReport> {
    mask.check_layout(layout)?;
    let (n, d) = (layout.n as u64, layout.d as u64);
    let (b_q, b_kv) = (layout.b_q as u64, layout.b_kv as u64);
    let (t_m, t_n) = (layout.t_m, layout.t_n);

    let mut critical = 0u64;
    let mut covered_rows = 0u64;
    let mut covered_cols = vec![false; t_n];
    for i in 0..t_m {
        let mut row_has_marginal = false;
        for (j, col) in covered_cols.iter_mut().enumerate() {
            match mask.label(i, j) {
                BlockLabel::Critical => critical += 1,
                BlockLabel::Marginal => {
                    row_has_marginal = true;
                    *col = true;
                }
                BlockLabel::Negligible => {}
            }
        }
        covered_rows += row_has_marginal as u64;
    }
    let covered_cols = covered_cols.iter().filter(|&&c| c).count() as u64;

    let full_flops = 4 * n * n * d;
    let sparse_flops = 4 * b_q * b_kv * d * critical;
    let z_term = if covered_cols > 0 { n * d } else { 0 };
    let linear_flops = 2 * b_kv * d * d * covered_cols + 2 * b_q * d * d * covered_rows + z_term;
    let proj_flops = 2 * n * d * d;
    let mask_flops = 2 * n * d + 2 * (t_m * t_n) as u64 * d;
    let sla_total = sparse_flops + linear_flops + proj_flops + mask_flops;
    Ok(FlopsReport {
        full_flops,
        sparse_flops,
        linear_flops,
        proj_flops,
        mask_flops,
        sla_total,
        ratio: sla_total as f64 / full_flops as f64,
        sparsity: 1.0 - mask.fraction(BlockLabel::Critical),
    })
}
