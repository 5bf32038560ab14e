//! Feature maps φ for the linear-attention path.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SlaError};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMapKind {
    /// `x + 1` for `x ≥ 0`, `exp(x)` otherwise. Strictly positive.
    #[default]
    Elu1,
    /// `max(x, 0)`.
    Relu,
    /// Softmax over the feature entries of each row.
    FeatSoftmax,
}

impl std::str::FromStr for FeatureMapKind {
    type Err = SlaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elu1" => Ok(Self::Elu1),
            "relu" => Ok(Self::Relu),
            "softmax" | "feat_softmax" => Ok(Self::FeatSoftmax),
            other => Err(SlaError::Config(format!("unknown feature map {other:?}"))),
        }
    }
}

impl FeatureMapKind {
    pub const ALL: [FeatureMapKind; 3] = [Self::Elu1, Self::Relu, Self::FeatSoftmax];

    pub fn name(self) -> &'static str {
        match self {
            Self::Elu1 => "elu1",
            Self::Relu => "relu",
            Self::FeatSoftmax => "softmax",
        }
    }
}

fn softmax_row_into<T: Real>(x: &[T], out: &mut [T]) {
    let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn apply_feature_map<T: Real>(x: &Tensor<T>, kind: FeatureMapKind) -> Tensor<T> {
    match kind {
        FeatureMapKind::Elu1 => x.map(|v| if v >= T::zero() { v + T::one() } else { v.exp() }),
        FeatureMapKind::Relu => x.map(|v| v.max(T::zero())),
        FeatureMapKind::FeatSoftmax => {
            let mut out = Tensor::zeros(x.rows(), x.cols());
            for r in 0..x.rows() {
                softmax_row_into(x.row(r), out.row_mut(r));
            }
            out
        }
    }
}

/// Row-wise `J_φ(x)ᵀ · dphi`.
///
/// For the softmax map each row uses `(diag(s) - s sᵀ) dphi_row`, i.e.
/// `s ⊙ (dphi - <s, dphi>)`. The relu derivative at 0 is taken as 0.
pub fn feature_map_vjp<T: Real>(
    x: &Tensor<T>,
    kind: FeatureMapKind,
    dphi: &Tensor<T>,
) -> Result<Tensor<T>> {
    if x.shape() != dphi.shape() {
        return Err(SlaError::Shape(format!(
            "feature_map_vjp: x {:?} vs dphi {:?}",
            x.shape(),
            dphi.shape()
        )));
    }
    let mut out = Tensor::zeros(x.rows(), x.cols());
    match kind {
        FeatureMapKind::Elu1 | FeatureMapKind::Relu => {
            for ((o, &v), &g) in out.data_mut().iter_mut().zip(x.data()).zip(dphi.data()) {
                let deriv = match kind {
                    FeatureMapKind::Elu1 if v >= T::zero() => T::one(),
                    FeatureMapKind::Elu1 => v.exp(),
                    _ if v > T::zero() => T::one(),
                    _ => T::zero(),
                };
                *o = deriv * g;
            }
        }
        FeatureMapKind::FeatSoftmax => {
            let mut s = vec![T::zero(); x.cols()];
            for r in 0..x.rows() {
                softmax_row_into(x.row(r), &mut s);
                let g = dphi.row(r);
                let inner = crate::tensor::dot(&s, g);
                for ((o, &si), &gi) in out.row_mut(r).iter_mut().zip(&s).zip(g) {
                    *o = si * (gi - inner);
                }
            }
        }
    }
    Ok(out)
}
