//! The captioning model and its transfer-time classifier.
//!
//! A [`Model`] owns one [`ParamStore`] holding every tensor under a dotted
//! name: `backbone.*` for the residual CNN (batch-norm running statistics
//! included as buffers), `proj.*`, `embed.*`, `fwd.*` and `bwd.*` for the
//! textual head, and `head.*` for the decision head. Checkpoints are this
//! store plus the [`ModelConfig`] as JSON.

mod backbone;
pub mod checkpoint;
mod config;
mod layers;
mod textual;

pub use backbone::Backbone;
pub use config::{BackboneConfig, ClassifierConfig, HeadKind, ModelConfig, TextualHeadConfig};
pub use layers::{apply_bn_updates, BnMode, BnUpdate};
pub use textual::{reverse_caption, Direction, TextualHead, Visual};

use rand::RngCore;
use rand_chacha::ChaCha8Rng;

use crate::prelude::*;
use crate::synthdata::GrayImage;
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::textpipe::PAD;
use crate::{Error, Result};
use layers::Linear;

fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    backbone: Backbone,
    textual: Option<TextualHead>,
    head: Option<Linear>,
}

impl Model {
    /// Freshly initialized model. Each component draws from its own stream
    /// of `seed`, so the backbone init does not depend on which heads exist.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &config.backbone, &mut init_rng(seed, 1))?;
        let c = config.backbone.feature_width();
        let textual = match &config.textual {
            Some(t) => Some(TextualHead::new(&mut store, t, c, &mut init_rng(seed, 2))?),
            None => None,
        };
        let head = match &config.classifier {
            Some(h) => Some(Linear::new(&mut store, "head", c, h.outputs, &mut init_rng(seed, 3))?),
            None => None,
        };
        Ok(Self { config, store, backbone, textual, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn textual(&self) -> Result<&TextualHead> {
        self.textual.as_ref().ok_or_else(|| Error::Config("model has no textual head".into()))
    }

    /// Names of all backbone tensors.
    pub fn backbone_names(&self) -> impl Iterator<Item = &str> {
        self.store.iter().map(|(_, p)| p.name.as_str()).filter(|n| n.starts_with(backbone::PREFIX))
    }

    /// Marks backbone weights as trainable or not. Running statistics stay
    /// buffers either way.
    pub fn set_backbone_trainable(&mut self, trainable: bool) {
        for (_, p) in self.store.iter_mut() {
            if p.name.starts_with(backbone::PREFIX) && !p.name.ends_with(".bn.mean") && !p.name.ends_with(".bn.var") {
                p.requires_grad = trainable;
            }
        }
    }

    /// Visual features `[B · h·w, d]` of images `[B, C, H, W]`.
    pub fn encode_image<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        images: Var,
        mode: BnMode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Visual> {
        let textual = self.textual()?;
        let features = self.backbone.forward(tape, &self.store, images, mode, updates)?;
        textual.project(tape, &self.store, features)
    }

    /// Logits `[b·t, V]` for equal-length token rows given in natural order.
    /// The backward direction reads each row's non-pad prefix reversed, so
    /// its output position `i` refers to index `i` of the reversed row.
    /// Dropout is active when `rng` is given.
    pub fn decoder_forward<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        tokens: &[Vec<usize>],
        visual: &Visual,
        direction: Direction,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let textual = self.textual()?;
        if tokens.len() != visual.batch {
            return Err(Error::Dimension(format!("{} token rows for {} images", tokens.len(), visual.batch)));
        }
        let t = tokens.first().map_or(0, Vec::len);
        if tokens.iter().any(|r| r.len() != t) {
            return Err(Error::Dimension("token rows differ in length".into()));
        }
        let ids: Vec<usize> = match direction {
            Direction::Forward => tokens.concat(),
            Direction::Backward => tokens.iter().flat_map(|r| reverse_caption(r)).collect(),
        };
        textual.run(tape, &self.store, &ids, t, visual, direction, rng)
    }

    /// Bidirectional captioning loss: mean next-token cross-entropy of the
    /// forward decoder plus that of the backward decoder, `[PAD]` targets
    /// ignored. Captions are padded to the longest one.
    pub fn caption_loss<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        images: Var,
        captions: &[Vec<usize>],
        mode: BnMode,
        mut rng: Option<&mut dyn RngCore>,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        if captions.is_empty() || captions.iter().any(|c| c.iter().filter(|&&t| t != PAD).count() < 2) {
            return Err(Error::Contract("every caption needs at least two non-pad tokens".into()));
        }
        let textual = self.textual()?;
        let t = captions.iter().map(Vec::len).max().unwrap_or(0);
        let padded: Vec<Vec<usize>> = captions
            .iter()
            .map(|c| {
                let mut r = c.clone();
                r.resize(t, PAD);
                r
            })
            .collect();
        let visual = self.encode_image(tape, images, mode, updates)?;
        let mut total = None;
        for direction in [Direction::Forward, Direction::Backward] {
            let rows: Vec<Vec<usize>> = match direction {
                Direction::Forward => padded.clone(),
                Direction::Backward => padded.iter().map(|r| reverse_caption(r)).collect(),
            };
            let inputs: Vec<usize> = rows.iter().flat_map(|r| r[..t - 1].iter().copied()).collect();
            let targets: Vec<usize> = rows.iter().flat_map(|r| r[1..].iter().copied()).collect();
            let rng = rng.as_mut().map(|r| &mut **r as &mut dyn RngCore);
            let logits = textual.run(tape, &self.store, &inputs, t - 1, &visual, direction, rng)?;
            let ce = tape.softmax_cross_entropy(logits, &targets, Some(PAD))?;
            total = Some(match total {
                Some(prev) => tape.add(prev, ce)?,
                None => ce,
            });
        }
        Ok(total.expect("two directions"))
    }

    /// Decision-head logits `[B, outputs]` from globally pooled backbone
    /// features.
    pub fn classify<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        images: Var,
        mode: BnMode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let features = self.backbone.forward(tape, &self.store, images, mode, updates)?;
        let pooled = tape.global_avg_pool(features)?;
        self.head_logits(tape, pooled)
    }

    /// Decision-head logits for already pooled features `[B, C]`.
    pub fn head_logits<'a>(&'a self, tape: &mut Tape<'a>, pooled: Var) -> Result<Var> {
        let head = self.head.as_ref().ok_or_else(|| Error::Config("model has no decision head".into()))?;
        head.forward(tape, &self.store, pooled)
    }

    /// Pooled backbone features `[B, C]`, as the decision head sees them.
    pub fn pooled_features<'a>(&'a self, tape: &mut Tape<'a>, images: Var, mode: BnMode) -> Result<Var> {
        let features = self.backbone.forward(tape, &self.store, images, mode, &mut Vec::new())?;
        tape.global_avg_pool(features)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_string(&self.config).expect("config serializes");
        checkpoint::encode(&json, self.store.iter().map(|(_, p)| (p.name.as_str(), &p.value)))
    }

    /// Rebuilds a model from checkpoint bytes. Every tensor the config
    /// implies must be present with its exact shape, and nothing else.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (json, tensors) = checkpoint::decode(bytes)?;
        let config: ModelConfig =
            serde_json::from_str(&json).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let mut model = Self::new(config, 0)?;
        if tensors.len() != model.store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, config implies {}",
                tensors.len(),
                model.store.len()
            )));
        }
        model.assign(tensors, |_| true)?;
        Ok(model)
    }

    /// Replaces this model's backbone with the one in a checkpoint. Nothing
    /// changes unless every backbone tensor is found with a matching shape.
    pub fn load_backbone(&mut self, bytes: &[u8]) -> Result<()> {
        let (json, tensors) = checkpoint::decode(bytes)?;
        let config: ModelConfig =
            serde_json::from_str(&json).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        if config.backbone != self.config.backbone {
            return Err(Error::Config("checkpoint backbone differs from the model's".into()));
        }
        self.assign(tensors, |name| name.starts_with(backbone::PREFIX))
    }

    fn assign(&mut self, tensors: Vec<(String, Tensor)>, wanted: impl Fn(&str) -> bool) -> Result<()> {
        let mut by_name: BTreeMap<String, Tensor> = tensors.into_iter().collect();
        let mut staged = Vec::new();
        for (id, p) in self.store.iter() {
            if !wanted(&p.name) {
                continue;
            }
            let t = by_name
                .remove(&p.name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            staged.push((id, t));
        }
        for (id, t) in staged {
            self.store.get_mut(id).value = t;
        }
        Ok(())
    }
}

/// Stacks equally sized grayscale images into `[B, 1, H, W]`.
pub fn images_to_tensor(images: &[&GrayImage]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Dimension("empty image batch".into()))?;
    let (w, h) = (first.width, first.height);
    if images.iter().any(|im| im.width != w || im.height != h) {
        return Err(Error::Dimension("images in a batch differ in size".into()));
    }
    let mut data = Vec::with_capacity(images.len() * w * h);
    for im in images {
        data.extend_from_slice(&im.pixels);
    }
    Tensor::new(&[images.len(), 1, h, w], data)
}

#[cfg(test)]
mod tests;
