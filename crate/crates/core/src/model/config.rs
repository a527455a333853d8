use serde::{Deserialize, Serialize};

use crate::prelude::*;
use crate::textpipe::DEFAULT_MAX_CAPTION_LEN;
use crate::{Error, Result};

/// Residual CNN plan: a stride-2 3×3 stem conv and a 2×2 max-pool, then one
/// stage per entry of `widths`, the first at stride 1 and the rest at
/// stride 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stem_width: usize,
    pub widths: Vec<usize>,
    pub blocks: Vec<usize>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            stem_width: 16,
            widths: vec![16, 32, 64, 128],
            blocks: vec![2, 2, 2, 2],
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.in_channels, 1 | 3) {
            return Err(Error::Config(format!("input channels must be 1 or 3, got {}", self.in_channels)));
        }
        if self.widths.is_empty() || self.widths.len() != self.blocks.len() {
            return Err(Error::Config("backbone needs one block count per stage width".into()));
        }
        if self.stem_width == 0 || self.widths.contains(&0) || self.blocks.contains(&0) {
            return Err(Error::Config("backbone widths and block counts must be positive".into()));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_eps must be positive and bn_momentum in [0, 1]".into()));
        }
        Ok(())
    }

    /// Input extent divided by feature-map extent.
    pub fn total_stride(&self) -> usize {
        4 << (self.widths.len() - 1)
    }

    /// Channels of the final feature map.
    pub fn feature_width(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextualHeadConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub max_positions: usize,
}

impl Default for TextualHeadConfig {
    fn default() -> Self {
        Self {
            width: 128,
            layers: 2,
            heads: 4,
            ffn_width: 512,
            dropout: 0.1,
            vocab_size: crate::textpipe::DEFAULT_VOCAB_SIZE,
            max_positions: DEFAULT_MAX_CAPTION_LEN,
        }
    }
}

impl TextualHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        if self.layers == 0 || self.ffn_width == 0 {
            return Err(Error::Config("textual head needs at least one layer and a positive ffn width".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.vocab_size < crate::textpipe::RESERVED.len() {
            return Err(Error::Config(format!("vocab size {} below the reserved tokens", self.vocab_size)));
        }
        if self.max_positions < 2 {
            return Err(Error::Config("max_positions must be at least 2".into()));
        }
        Ok(())
    }
}

/// What the decision head predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// Independent sigmoid outputs trained with binary cross-entropy.
    MultiLabel,
    /// One softmax over classes trained with cross-entropy.
    MultiClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub outputs: usize,
    pub kind: HeadKind,
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.outputs) {
            (_, 0) => Err(Error::Config("decision head needs at least one output".into())),
            (HeadKind::MultiClass, 1) => Err(Error::Config("multiclass head needs at least two classes".into())),
            _ => Ok(()),
        }
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub textual: Option<TextualHeadConfig>,
    #[serde(default)]
    pub classifier: Option<ClassifierConfig>,
}

impl ModelConfig {
    pub fn captioning(backbone: BackboneConfig, textual: TextualHeadConfig) -> Self {
        Self { backbone, textual: Some(textual), classifier: None }
    }

    pub fn classifier(backbone: BackboneConfig, head: ClassifierConfig) -> Self {
        Self { backbone, textual: None, classifier: Some(head) }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if let Some(t) = &self.textual {
            t.validate()?;
        }
        if let Some(c) = &self.classifier {
            c.validate()?;
        }
        Ok(())
    }
}
