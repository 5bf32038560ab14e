//! Seeded inputs shared by the kernel benchmarks.

use sla_core::layout::{make_block_layout, BlockLayout};
use sla_core::mask::{classify_mask, predict_compressed_weights, CompressedMask};
use sla_core::rng::{gaussian_tensor, SplitMix64};
use sla_core::{Real, SlaConfig, Tensor};

pub struct Inputs<T> {
    pub layout: BlockLayout,
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub mask: CompressedMask,
}

/// Gaussian `Q`, `K`, `V` and the mask predicted from them.
pub fn inputs<T: Real>(n: usize, d: usize, b: usize, cfg: &SlaConfig, seed: u64) -> Inputs<T> {
    let layout = make_block_layout(n, d, b, b).expect("valid layout");
    let mut rng = SplitMix64::new(seed);
    let q = gaussian_tensor(&mut rng, n, d, 1.0);
    let k = gaussian_tensor(&mut rng, n, d, 1.0);
    let v = gaussian_tensor(&mut rng, n, d, 1.0);
    let weights = predict_compressed_weights(&q, &k, &layout).expect("shapes match");
    let mask = classify_mask(&weights, cfg.k_h, cfg.k_l).expect("valid percentages");
    Inputs { layout, q, k, v, mask }
}
