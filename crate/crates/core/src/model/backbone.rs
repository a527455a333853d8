use rand::Rng;

use super::config::BackboneConfig;
use super::layers::{BnMode, BnUpdate, ConvBn};
use crate::error::dim_err;
use crate::prelude::*;
use crate::tensor::{ParamStore, Tape, Var};
use crate::Result;

#[derive(Debug, Clone)]
struct Block {
    conv1: ConvBn,
    conv2: ConvBn,
    shortcut: Option<ConvBn>,
}

/// Residual CNN; parameters are named `backbone.*`.
#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    stem: ConvBn,
    blocks: Vec<Block>,
}

pub(crate) const PREFIX: &str = "backbone.";

impl Backbone {
    pub(crate) fn new(store: &mut ParamStore, config: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let stem = ConvBn::new(store, "backbone.stem", config.in_channels, config.stem_width, 3, 2, 1, rng)?;
        let mut blocks = Vec::new();
        let mut cin = config.stem_width;
        for (s, (&width, &count)) in config.widths.iter().zip(&config.blocks).enumerate() {
            for b in 0..count {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let name = format!("backbone.s{s}.b{b}");
                let conv1 = ConvBn::new(store, &format!("{name}.conv1"), cin, width, 3, stride, 1, rng)?;
                let conv2 = ConvBn::new(store, &format!("{name}.conv2"), width, width, 3, 1, 1, rng)?;
                let shortcut = if stride != 1 || cin != width {
                    Some(ConvBn::new(store, &format!("{name}.down"), cin, width, 1, stride, 0, rng)?)
                } else {
                    None
                };
                blocks.push(Block { conv1, conv2, shortcut });
                cin = width;
            }
        }
        Ok(Self { config: config.clone(), stem, blocks })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Feature map `[B, C, H/32, W/32]` of images `[B, in_channels, H, W]`.
    pub fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        x: Var,
        mode: BnMode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let shape = tape.shape(x);
        let stride = self.config.total_stride();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(dim_err!("backbone expects [B, {}, H, W], got {:?}", self.config.in_channels, shape));
        }
        if shape[2] % stride != 0 || shape[3] % stride != 0 || shape[2] == 0 || shape[3] == 0 {
            return Err(dim_err!("image extents {:?} not divisible by total stride {}", &shape[2..], stride));
        }
        let eps = self.config.bn_eps;
        let h = self.stem.forward(tape, store, x, mode, eps, updates)?;
        let h = tape.relu(h)?;
        let mut h = tape.maxpool2d(h, 2, 2)?;
        for block in &self.blocks {
            let a = block.conv1.forward(tape, store, h, mode, eps, updates)?;
            let a = tape.relu(a)?;
            let a = block.conv2.forward(tape, store, a, mode, eps, updates)?;
            let skip = match &block.shortcut {
                Some(s) => s.forward(tape, store, h, mode, eps, updates)?,
                None => h,
            };
            let sum = tape.add(a, skip)?;
            h = tape.relu(sum)?;
        }
        Ok(h)
    }
}
