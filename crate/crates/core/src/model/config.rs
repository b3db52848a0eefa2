use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    SigmoidMultilabel,
    SoftmaxMulticlass,
}

/// Target shape of the student-side adapter that reconciles tap shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Tap name that selects the default attention point for the architecture.
pub const AUTO_TAP: &str = "auto";

/// Architecture of a DenseNet-style network.
///
/// Layout: 7x7/2 stem conv, 3x3/2 max pool, dense blocks separated by
/// transition layers, a final norm, then optionally an adaptive pool followed
/// by 1x1 projection convs, global average pool and a fully connected head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub init_channels: usize,
    pub growth_rate: usize,
    pub block_layers: Vec<usize>,
    #[serde(default = "default_compression")]
    pub compression: f64,
    /// Bottleneck width of each dense layer, as a multiple of the growth rate.
    #[serde(default = "default_bottleneck")]
    pub bottleneck_factor: usize,
    pub head: HeadKind,
    pub num_classes: usize,
    /// Spatial size of the adaptive pool placed before the projections.
    #[serde(default)]
    pub projection_pool: Option<usize>,
    #[serde(default)]
    pub projection_widths: Vec<usize>,
    #[serde(default = "default_tap")]
    pub tap: String,
    #[serde(default)]
    pub adapter: Option<AdapterSpec>,
}

fn default_in_channels() -> usize {
    3
}

fn default_compression() -> f64 {
    0.5
}

fn default_bottleneck() -> usize {
    4
}

fn default_tap() -> String {
    AUTO_TAP.to_string()
}

impl ArchConfig {
    /// The two-block network obtained by dropping the last two dense blocks
    /// of DenseNet-121, with two 1x1 projections on an 8x8 pooled map.
    pub fn densenet40(num_classes: usize, head: HeadKind) -> Self {
        Self {
            in_channels: 3,
            init_channels: 64,
            growth_rate: 32,
            block_layers: vec![6, 12],
            compression: 0.5,
            bottleneck_factor: 4,
            head,
            num_classes,
            projection_pool: Some(8),
            projection_widths: vec![1024, 1024],
            tap: AUTO_TAP.into(),
            adapter: None,
        }
    }

    /// Small network for desk-scale experiments.
    pub fn scaled(init_channels: usize, growth_rate: usize, block_layers: Vec<usize>, num_classes: usize, head: HeadKind) -> Self {
        Self {
            in_channels: 3,
            init_channels,
            growth_rate,
            block_layers,
            compression: 0.5,
            bottleneck_factor: 4,
            head,
            num_classes,
            projection_pool: None,
            projection_widths: Vec::new(),
            tap: AUTO_TAP.into(),
            adapter: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.block_layers.is_empty() {
            return fail("block_layers must not be empty".into());
        }
        if self.block_layers.contains(&0) {
            return fail(format!("every dense block needs at least one layer: {:?}", self.block_layers));
        }
        if self.in_channels == 0 || self.init_channels == 0 || self.growth_rate == 0 || self.bottleneck_factor == 0 {
            return fail("channel counts must be positive".into());
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return fail(format!("compression {} outside (0, 1]", self.compression));
        }
        match self.head {
            HeadKind::SoftmaxMulticlass if self.num_classes < 2 => {
                return fail(format!("multiclass head needs at least 2 classes, got {}", self.num_classes))
            }
            HeadKind::SigmoidMultilabel if self.num_classes < 1 => return fail("multilabel head needs at least 1 label".into()),
            _ => {}
        }
        if self.projection_widths.contains(&0) || self.projection_pool == Some(0) {
            return fail("projection sizes must be positive".into());
        }
        if let Some(a) = self.adapter {
            if a.channels == 0 || a.height == 0 || a.width == 0 {
                return fail("adapter target must be positive".into());
            }
        }
        Ok(())
    }

    /// Output channels of a dense block.
    pub fn block_out_channels(in_channels: usize, layers: usize, growth: usize) -> usize {
        in_channels + layers * growth
    }

    /// Output channels of a transition layer.
    pub fn transition_out_channels(&self, in_channels: usize) -> usize {
        ((self.compression * in_channels as f64).floor() as usize).max(1)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
