//! The detection network: a small U-Net style backbone, four gated
//! information-perception branches fused by a 3×3 convolution, and a
//! differentiable-binarization head, plus the multi-task training loss.

mod loss;
mod net;
mod params;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::autodiff::AutodiffError;

pub use loss::{positive_weights, total_loss, LabelBatch, LossBreakdown, LossTerm};
pub use net::{forward, Forward, IpmOutputs};
pub use params::{ModelParams, ParamGroup, ParamKind, ParamTensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("loss term {term} is not finite")]
    NonFiniteLoss { term: LossTerm },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// The four auxiliary supervision targets, in fusion order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Center,
    Foreground,
    Distance,
    Direction,
}

impl Branch {
    pub const ALL: [Branch; 4] = [Branch::Center, Branch::Foreground, Branch::Distance, Branch::Direction];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Center => "center",
            Branch::Foreground => "foreground",
            Branch::Distance => "distance",
            Branch::Direction => "direction",
        }
    }

    /// Output channels of the auxiliary head.
    pub fn channels(self) -> usize {
        if self == Branch::Direction {
            2
        } else {
            1
        }
    }
}

/// Whether the perception branches sit between backbone and head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Mode {
    /// Head reads the backbone features directly; only the binarization loss trains.
    Baseline,
    #[default]
    Rmipn,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Rmipn => "rmipn",
        })
    }
}

impl FromStr for Mode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "rmipn" => Ok(Mode::Rmipn),
            other => Err(ModelError::Config(format!("unknown mode {other:?} (expected baseline or rmipn)"))),
        }
    }
}

/// Weights of the five loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub center: f64,
    pub foreground: f64,
    pub distance: f64,
    pub direction: f64,
    pub binarization: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { center: 1.0, foreground: 1.0, distance: 1.0, direction: 1.0, binarization: 1.0 }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 5] {
        [self.center, self.foreground, self.distance, self.direction, self.binarization]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub height: usize,
    pub width: usize,
    pub binarize_k: f64,
    pub weights: LossWeights,
    pub mode: Mode,
    /// Multiply the center and foreground terms instead of adding them.
    pub strict_eq6_product: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            height: 256,
            width: 256,
            binarize_k: 50.0,
            weights: LossWeights::default(),
            mode: Mode::Rmipn,
            strict_eq6_product: false,
        }
    }
}

pub const SIZE_MULTIPLE: usize = 32;

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let c = self.base_channels;
        if c < 4 || !c.is_multiple_of(4) {
            return Err(ModelError::Config(format!("base channels must be a positive multiple of 4, got {c}")));
        }
        for (name, v) in [("height", self.height), ("width", self.width)] {
            if v < 64 || v % SIZE_MULTIPLE != 0 {
                return Err(ModelConfig::size_error(name, v));
            }
        }
        if !(self.binarize_k.is_finite() && self.binarize_k > 0.0) {
            return Err(ModelError::Config(format!("binarize_k must be positive, got {}", self.binarize_k)));
        }
        if self.weights.as_array().iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(ModelError::Config(format!("loss weights must be finite and >= 0, got {:?}", self.weights)));
        }
        Ok(())
    }

    fn size_error(name: &str, v: usize) -> ModelError {
        ModelError::Config(format!("{name} must be a multiple of {SIZE_MULTIPLE} and at least 64, got {v}"))
    }

    /// Key/value echo stored alongside checkpoints.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let w = &self.weights;
        [
            ("base_channels", self.base_channels.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("binarize_k", self.binarize_k.to_string()),
            ("alpha_center", w.center.to_string()),
            ("alpha_foreground", w.foreground.to_string()),
            ("alpha_distance", w.distance.to_string()),
            ("alpha_direction", w.direction.to_string()),
            ("alpha_binarization", w.binarization.to_string()),
            ("mode", self.mode.to_string()),
            ("strict_eq6_product", self.strict_eq6_product.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, ModelError> {
        fn get<'a>(pairs: &'a [(String, String)], key: &str) -> Result<&'a str, ModelError> {
            pairs
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| ModelError::Config(format!("missing key {key}")))
        }
        fn num<T: FromStr>(pairs: &[(String, String)], key: &str) -> Result<T, ModelError> {
            let raw = get(pairs, key)?;
            raw.parse().map_err(|_| ModelError::Config(format!("bad value {raw:?} for {key}")))
        }
        let cfg = Self {
            base_channels: num(pairs, "base_channels")?,
            height: num(pairs, "height")?,
            width: num(pairs, "width")?,
            binarize_k: num(pairs, "binarize_k")?,
            weights: LossWeights {
                center: num(pairs, "alpha_center")?,
                foreground: num(pairs, "alpha_foreground")?,
                distance: num(pairs, "alpha_distance")?,
                direction: num(pairs, "alpha_direction")?,
                binarization: num(pairs, "alpha_binarization")?,
            },
            mode: get(pairs, "mode")?.parse()?,
            strict_eq6_product: num(pairs, "strict_eq6_product")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad_c = ModelConfig { base_channels: 18, ..ModelConfig::default() };
        assert!(bad_c.validate().is_err());
        let bad_h = ModelConfig { height: 250, ..ModelConfig::default() };
        assert!(bad_h.validate().unwrap_err().to_string().contains("multiple of 32"));
        let small = ModelConfig { width: 32, ..ModelConfig::default() };
        assert!(small.validate().is_err());
        let neg =
            ModelConfig { weights: LossWeights { distance: -1.0, ..LossWeights::default() }, ..ModelConfig::default() };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn pairs_round_trip() {
        let cfg = ModelConfig { base_channels: 16, mode: Mode::Baseline, binarize_k: 12.5, ..ModelConfig::default() };
        assert_eq!(ModelConfig::from_pairs(&cfg.to_pairs()).unwrap(), cfg);
    }
}
