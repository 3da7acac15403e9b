use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    StemConv,
    MaxPool,
    ResnetBottleneck,
    Mbconv,
    HeadConv,
    /// Global average pool flattening `[N, C, H, W]` to `[N, C]` (headless image branch).
    GlobalPool,
    /// Pool, dropout, dense and softmax.
    Classifier,
    /// Dense, batch standardization, ReLU and dropout over a flat vector.
    DenseLayer,
    /// Final dense projection followed by softmax.
    Output,
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BlockKind::StemConv => "stem_conv",
            BlockKind::MaxPool => "max_pool",
            BlockKind::ResnetBottleneck => "resnet_bottleneck",
            BlockKind::Mbconv => "mbconv",
            BlockKind::HeadConv => "head_conv",
            BlockKind::GlobalPool => "global_pool",
            BlockKind::Classifier => "classifier",
            BlockKind::DenseLayer => "dense_layer",
            BlockKind::Output => "output",
        };
        f.write_str(s)
    }
}

/// One row of a declarative architecture table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub kind: BlockKind,
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
    pub repeats: usize,
    pub expand_ratio: Option<usize>,
    pub se_ratio: Option<f64>,
    pub dropout: Option<f64>,
}

impl StageSpec {
    pub fn new(kind: BlockKind, kernel: usize, stride: usize, out_channels: usize, repeats: usize) -> Self {
        Self {
            kind,
            kernel,
            stride,
            out_channels,
            repeats,
            expand_ratio: None,
            se_ratio: None,
            dropout: None,
        }
    }

    pub fn mbconv(expand_ratio: usize, kernel: usize, stride: usize, out_channels: usize, repeats: usize) -> Self {
        Self {
            expand_ratio: Some(expand_ratio),
            se_ratio: Some(0.25),
            ..Self::new(BlockKind::Mbconv, kernel, stride, out_channels, repeats)
        }
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout = Some(p);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::Config(format!("stage stride must be 1 or 2, got {}", self.stride)));
        }
        if self.out_channels == 0 || self.repeats == 0 || self.kernel == 0 {
            return Err(Error::Config(format!("degenerate stage {self:?}")));
        }
        match (self.kind, self.expand_ratio) {
            (BlockKind::Mbconv, Some(r)) if r >= 1 => {}
            (BlockKind::Mbconv, _) => {
                return Err(Error::Config("mbconv stages need an expansion ratio >= 1".into()))
            }
            (_, Some(_)) => {
                return Err(Error::Config(format!("{} stages take no expansion ratio", self.kind)))
            }
            _ => {}
        }
        if let Some(p) = self.dropout {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::InvalidProbability { name: "stage dropout", value: p });
            }
        }
        Ok(())
    }
}

/// Compound scaling of the EfficientNet base table.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingConfig {
    pub width_mult: f64,
    pub depth_mult: f64,
    pub resolution: usize,
    pub dropout_rate: f64,
}

impl ScalingConfig {
    pub const B0: Self = Self::new(1.0, 1.0, 224, 0.2);

    /// Compact variant for CPU-only experiments on small synthetic images.
    pub const DESK: Self = Self::new(0.375, 0.34, 64, 0.2);

    pub const fn new(width_mult: f64, depth_mult: f64, resolution: usize, dropout_rate: f64) -> Self {
        Self {
            width_mult,
            depth_mult,
            resolution,
            dropout_rate,
        }
    }

    /// Published reference coefficients for B0–B7, plus the desk preset.
    pub fn preset(name: &str) -> Option<Self> {
        let cfg = match name {
            "b0" => Self::B0,
            "b1" => Self::new(1.0, 1.1, 240, 0.2),
            "b2" => Self::new(1.1, 1.2, 260, 0.3),
            "b3" => Self::new(1.2, 1.4, 300, 0.3),
            "b4" => Self::new(1.4, 1.8, 380, 0.4),
            "b5" => Self::new(1.6, 2.2, 456, 0.4),
            "b6" => Self::new(1.8, 2.6, 528, 0.5),
            "b7" => Self::new(2.0, 3.1, 600, 0.5),
            "desk" => Self::DESK,
            _ => return None,
        };
        Some(cfg)
    }

    pub const PRESETS: [&'static str; 9] = ["b0", "b1", "b2", "b3", "b4", "b5", "b6", "b7", "desk"];

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.width_mult) || !positive(self.depth_mult) {
            return Err(Error::Config(format!(
                "scaling multipliers must be positive, got width {} depth {}",
                self.width_mult, self.depth_mult
            )));
        }
        if self.resolution < 16 {
            return Err(Error::Config(format!("resolution {} is below 16", self.resolution)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidProbability { name: "classifier dropout", value: self.dropout_rate });
        }
        Ok(())
    }

    /// Channel count scaled by `width_mult`, rounded to a multiple of 8 and
    /// never more than 10% below the exact target.
    pub fn round_filters(&self, filters: usize) -> usize {
        const DIVISOR: usize = 8;
        let target = filters as f64 * self.width_mult;
        let mut rounded = DIVISOR.max(((target + DIVISOR as f64 / 2.0) as usize) / DIVISOR * DIVISOR);
        if (rounded as f64) < 0.9 * target {
            rounded += DIVISOR;
        }
        rounded
    }

    pub fn round_repeats(&self, repeats: usize) -> usize {
        ((repeats as f64 * self.depth_mult).ceil() as usize).max(1)
    }
}

/// What a graph consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputSpec {
    Image { channels: usize, resolution: usize },
    Vector { width: usize },
}

impl InputSpec {
    pub fn shape(&self, batch: usize) -> Vec<usize> {
        match *self {
            InputSpec::Image { channels, resolution } => vec![batch, channels, resolution, resolution],
            InputSpec::Vector { width } => vec![batch, width],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn width_rounding_matches_reference_rule() {
        let b0 = ScalingConfig::B0;
        for c in [16, 24, 32, 40, 80, 112, 192, 320, 1280] {
            assert_eq!(b0.round_filters(c), c);
        }
        let b2 = ScalingConfig::preset("b2").unwrap();
        assert_eq!(b2.round_filters(32), 32);
        assert_eq!(b2.round_filters(1280), 1408);
        let desk = ScalingConfig::DESK;
        assert_eq!(desk.round_filters(40), 16);
        assert_eq!(desk.round_filters(16), 8);
        assert_eq!(ScalingConfig::preset("b4").unwrap().round_repeats(3), 6);
    }

    #[test]
    fn stage_validation() {
        assert!(StageSpec::mbconv(6, 3, 2, 24, 2).validate().is_ok());
        assert!(StageSpec::mbconv(6, 3, 3, 24, 2).validate().is_err());
        let mut bad = StageSpec::new(BlockKind::StemConv, 3, 2, 32, 1);
        bad.expand_ratio = Some(6);
        assert!(bad.validate().is_err());
        let mut missing = StageSpec::mbconv(6, 3, 1, 16, 1);
        missing.expand_ratio = None;
        assert!(missing.validate().is_err());
        assert!(ScalingConfig::new(0.0, 1.0, 224, 0.2).validate().is_err());
        assert!(ScalingConfig::new(1.0, 1.0, 224, 1.0).validate().is_err());
    }
}
