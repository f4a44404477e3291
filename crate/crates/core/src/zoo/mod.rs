//! Architecture builders and the baseline-to-pruned block transformation.
//!
//! Full-scale builds follow the canonical layer schedules and are only used
//! for cost accounting. Tiny builds keep the block structure at small widths
//! and resolutions so they can be trained and merged in tests.

mod convnext;
mod deit;
mod micro;
mod mobilenet;
mod prune;
mod resnet;

pub use prune::{change_dw_kernel, make_pruned_block, pruned_blocks};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Model;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Resnet34,
    Mobilenetv2,
    ConvnextT,
    DeitTiny,
    MicroCnn,
}

impl Family {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "resnet34" => Ok(Family::Resnet34),
            "mobilenetv2" => Ok(Family::Mobilenetv2),
            "convnext_t" => Ok(Family::ConvnextT),
            "deit_tiny" => Ok(Family::DeitTiny),
            "micro_cnn" => Ok(Family::MicroCnn),
            other => Err(Error::UnknownFamily(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Resnet34 => "resnet34",
            Family::Mobilenetv2 => "mobilenetv2",
            Family::ConvnextT => "convnext_t",
            Family::DeitTiny => "deit_tiny",
            Family::MicroCnn => "micro_cnn",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Full,
    Tiny,
}

pub const TINY_MAX_RESOLUTION: usize = 64;
pub const TINY_MAX_CHANNELS: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub family: String,
    #[serde(default = "one")]
    pub width: f64,
    pub resolution: usize,
    pub classes: usize,
    pub scale: Scale,
    /// Block count override (micro_cnn only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blocks: Option<usize>,
}

fn one() -> f64 {
    1.0
}

impl ArchConfig {
    pub fn new(family: &str, resolution: usize, classes: usize, scale: Scale) -> Self {
        ArchConfig {
            family: family.to_string(),
            width: 1.0,
            resolution,
            classes,
            scale,
            blocks: None,
        }
    }

    pub fn full(family: &str) -> Self {
        Self::new(family, 224, 1000, Scale::Full)
    }

    pub fn tiny(family: &str) -> Self {
        Self::new(family, 32, 10, Scale::Tiny)
    }

    pub fn with_width(mut self, width: f64) -> Self {
        self.width = width;
        self
    }

    pub fn with_blocks(mut self, blocks: usize) -> Self {
        self.blocks = Some(blocks);
        self
    }

    pub fn validate(&self) -> Result<Family> {
        let family = Family::parse(&self.family)?;
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(Error::Config(format!("width multiplier must be positive, got {}", self.width)));
        }
        if self.resolution == 0 || self.classes == 0 {
            return Err(Error::Config("resolution and class count must be positive".into()));
        }
        if self.scale == Scale::Tiny && self.resolution > TINY_MAX_RESOLUTION {
            return Err(Error::Config(format!(
                "tiny scale allows resolution ≤ {TINY_MAX_RESOLUTION}, got {}",
                self.resolution
            )));
        }
        if self.blocks.is_some() && family != Family::MicroCnn {
            return Err(Error::Config("a block count override applies to micro_cnn only".into()));
        }
        Ok(family)
    }

    /// Channel count scaled by the width multiplier.
    pub(crate) fn ch(&self, base: usize) -> usize {
        ((base as f64 * self.width).round() as usize).max(1)
    }
}

pub fn build_model(cfg: &ArchConfig) -> Result<Model> {
    let family = cfg.validate()?;
    let model = match family {
        Family::Resnet34 => resnet::build(cfg),
        Family::Mobilenetv2 => mobilenet::build(cfg),
        Family::ConvnextT => convnext::build(cfg),
        Family::DeitTiny => deit::build(cfg)?,
        Family::MicroCnn => micro::build(cfg)?,
    };
    model.validate()?;
    if cfg.scale == Scale::Tiny {
        let widest = widest_channels(&model)?;
        if widest > TINY_MAX_CHANNELS {
            return Err(Error::Config(format!(
                "tiny {} reaches {widest} channels, limit is {TINY_MAX_CHANNELS}",
                cfg.family
            )));
        }
    }
    Ok(model)
}

/// Largest channel extent among all feature maps and token sequences.
fn widest_channels(model: &Model) -> Result<usize> {
    let shapes = model.infer_shapes()?;
    let all = shapes
        .stem
        .iter()
        .chain(shapes.blocks.iter().flatten())
        .chain(shapes.head.iter());
    Ok(all
        .filter(|s| s.len() >= 2)
        .map(|s| if s.len() == 2 { s[1] } else { s[0] })
        .max()
        .unwrap_or(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_family_is_rejected() {
        let err = build_model(&ArchConfig::tiny("vgg16")).unwrap_err();
        assert!(matches!(err, Error::UnknownFamily(f) if f == "vgg16"));
    }

    #[test]
    fn tiny_limits_are_enforced() {
        let mut cfg = ArchConfig::tiny("micro_cnn");
        cfg.resolution = 96;
        assert!(build_model(&cfg).is_err());
        assert!(build_model(&ArchConfig::tiny("micro_cnn").with_width(20.0)).is_err());
        assert!(build_model(&ArchConfig::tiny("resnet34").with_width(0.0)).is_err());
    }

    #[test]
    fn config_round_trips() {
        let cfg = ArchConfig::tiny("micro_cnn").with_blocks(6);
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ArchConfig>(&s).unwrap(), cfg);
    }
}
