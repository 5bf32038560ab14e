use serde::{Deserialize, Serialize};

use crate::error::{Result, SlaError};

/// Partition of a length-`n` sequence into `t_m` query blocks of `b_q` rows
/// and `t_n` key/value blocks of `b_kv` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub n: usize,
    pub d: usize,
    pub b_q: usize,
    pub b_kv: usize,
    pub t_m: usize,
    pub t_n: usize,
}

/// Builds a layout. Non-divisible sizes are rejected, never padded.
pub fn make_block_layout(n: usize, d: usize, b_q: usize, b_kv: usize) -> Result<BlockLayout> {
    for (name, v) in [("N", n), ("d", d), ("b_q", b_q), ("b_kv", b_kv)] {
        if v == 0 {
            return Err(SlaError::Layout(format!("{name} must be positive")));
        }
    }
    if !n.is_multiple_of(b_q) {
        return Err(SlaError::Layout(format!("b_q={b_q} does not divide N={n}")));
    }
    if !n.is_multiple_of(b_kv) {
        return Err(SlaError::Layout(format!("b_kv={b_kv} does not divide N={n}")));
    }
    Ok(BlockLayout {
        n,
        d,
        b_q,
        b_kv,
        t_m: n / b_q,
        t_n: n / b_kv,
    })
}

impl BlockLayout {
    pub fn q_rows(&self, i: usize) -> std::ops::Range<usize> {
        i * self.b_q..(i + 1) * self.b_q
    }

    pub fn kv_rows(&self, j: usize) -> std::ops::Range<usize> {
        j * self.b_kv..(j + 1) * self.b_kv
    }

    pub(crate) fn check_input(&self, what: &str, shape: (usize, usize)) -> Result<()> {
        if shape != (self.n, self.d) {
            return Err(SlaError::Shape(format!(
                "{what} is {}x{}, layout expects {}x{}",
                shape.0, shape.1, self.n, self.d
            )));
        }
        Ok(())
    }
}
