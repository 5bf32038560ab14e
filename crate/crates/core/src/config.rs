use serde::{Deserialize, Serialize};

use crate::error::{Result, SlaError};
use crate::feature_maps::FeatureMapKind;
use crate::tensor::DType;

/// How per-row marginal sums `H_i`, `Z_i` (and their backward mirrors) are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationStrategy {
    #[default]
    Direct,
    Complement,
    FourRussians,
    /// Picks per call from the marginal fraction, see [`AutoThresholds`].
    Auto,
}

impl std::str::FromStr for AggregationStrategy {
    type Err = SlaError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "direct" => Self::Direct,
            "complement" => Self::Complement,
            "four-russians" | "four_russians" => Self::FourRussians,
            "auto" => Self::Auto,
            other => return Err(SlaError::Config(format!("unknown aggregation {other:?}"))),
        })
    }
}

/// Marginal-fraction cutoffs for [`AggregationStrategy::Auto`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoThresholds {
    /// Use direct summation at or below this marginal fraction.
    pub direct_max: f64,
    /// Use complement subtraction at or above this marginal fraction.
    pub complement_min: f64,
}

impl Default for AutoThresholds {
    fn default() -> Self {
        AutoThresholds {
            direct_max: 0.25,
            complement_min: 0.75,
        }
    }
}

impl AutoThresholds {
    pub fn resolve(&self, marginal_fraction: f64) -> AggregationStrategy {
        if marginal_fraction <= self.direct_max {
            AggregationStrategy::Direct
        } else if marginal_fraction >= self.complement_min {
            AggregationStrategy::Complement
        } else {
            AggregationStrategy::FourRussians
        }
    }
}

pub const MAX_GROUP_SIZE: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlaConfig {
    /// Percentage of blocks per row computed with exact softmax, in (0, 100].
    pub k_h: f64,
    /// Percentage of blocks per row skipped, in [0, 100).
    pub k_l: f64,
    pub phi: FeatureMapKind,
    pub aggregation: AggregationStrategy,
    pub auto: AutoThresholds,
    /// Four-Russians group size.
    pub g: usize,
    pub dtype: DType,
    pub seed: u64,
}

impl Default for SlaConfig {
    fn default() -> Self {
        SlaConfig {
            k_h: 25.0,
            k_l: 25.0,
            phi: FeatureMapKind::Elu1,
            aggregation: AggregationStrategy::Direct,
            auto: AutoThresholds::default(),
            g: 4,
            dtype: DType::F64,
            seed: 0,
        }
    }
}

impl SlaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_h > 0.0 && self.k_h <= 100.0) {
            return Err(SlaError::Config(format!("k_h={} outside (0, 100]", self.k_h)));
        }
        if !(self.k_l >= 0.0 && self.k_l < 100.0) {
            return Err(SlaError::Config(format!("k_l={} outside [0, 100)", self.k_l)));
        }
        if self.k_h + self.k_l > 100.0 {
            return Err(SlaError::Config(format!(
                "k_h + k_l = {} exceeds 100",
                self.k_h + self.k_l
            )));
        }
        if self.g == 0 || self.g > MAX_GROUP_SIZE {
            return Err(SlaError::Config(format!(
                "group size g={} outside [1, {MAX_GROUP_SIZE}]",
                self.g
            )));
        }
        Ok(())
    }
}
