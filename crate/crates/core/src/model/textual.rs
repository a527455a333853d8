use rand::{Rng, RngCore};

use super::config::TextualHeadConfig;
use super::layers::{normal, LayerNorm, Linear};
use crate::error::dim_err;
use crate::prelude::*;
use crate::tensor::{ParamId, ParamStore, Tape, Var};
use crate::textpipe::PAD;
use crate::Result;

/// Caption reading order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Projected visual features `[batch · len, d]`.
#[derive(Debug, Clone, Copy)]
pub struct Visual {
    pub var: Var,
    pub batch: usize,
    pub len: usize,
}

/// Reverses the non-pad prefix of a caption, leaving trailing pads in place.
pub fn reverse_caption(tokens: &[usize]) -> Vec<usize> {
    let n = tokens.iter().rposition(|&t| t != PAD).map_or(0, |i| i + 1);
    let mut out: Vec<usize> = tokens[..n].iter().rev().copied().collect();
    out.extend_from_slice(&tokens[n..]);
    out
}

fn maybe_dropout(tape: &mut Tape<'_>, x: Var, p: f64, rng: &mut Option<&mut dyn RngCore>) -> Result<Var> {
    match rng.as_deref_mut() {
        Some(r) => tape.dropout(x, p, true, r),
        None => Ok(x),
    }
}

#[derive(Debug, Clone)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, rng)?,
            heads,
        })
    }

    fn split(&self, tape: &mut Tape<'_>, x: Var, b: usize, t: usize) -> Result<Var> {
        let d = tape.shape(x)[1];
        let dh = d / self.heads;
        let x = tape.reshape(x, &[b, t, self.heads, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[b * self.heads, t, dh])
    }

    /// Scaled dot-product attention of `x [b·t, d]` over `mem [b·s, d]`.
    #[allow(clippy::too_many_arguments)]
    fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        x: Var,
        mem: Var,
        b: usize,
        t: usize,
        s: usize,
        causal: bool,
    ) -> Result<Var> {
        let d = tape.shape(x)[1];
        let dh = d / self.heads;
        let q = self.q.forward(tape, store, x)?;
        let q = self.split(tape, q, b, t)?;
        let k = self.k.forward(tape, store, mem)?;
        let k = self.split(tape, k, b, s)?;
        let v = self.v.forward(tape, store, mem)?;
        let v = self.split(tape, v, b, s)?;
        let scores = tape.bmm(q, k, false, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f32).sqrt())?;
        let attn = tape.softmax(scores, causal)?;
        let ctx = tape.bmm(attn, v, false, false)?;
        let ctx = tape.reshape(ctx, &[b, self.heads, t, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b * t, d])?;
        self.o.forward(tape, store, ctx)
    }
}

/// Post-norm decoder layer: causal self-attention, cross-attention over the
/// visual features, feed-forward; each sublayer is followed by a residual
/// sum and LayerNorm.
#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: Attention,
    ln1: LayerNorm,
    cross_attn: Attention,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln3: LayerNorm,
}

impl DecoderLayer {
    fn new(store: &mut ParamStore, name: &str, cfg: &TextualHeadConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.width;
        Ok(Self {
            self_attn: Attention::new(store, &format!("{name}.self"), d, cfg.heads, rng)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d)?,
            cross_attn: Attention::new(store, &format!("{name}.cross"), d, cfg.heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), d, cfg.ffn_width, rng)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), cfg.ffn_width, d, rng)?,
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), d)?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        x: Var,
        visual: &Visual,
        t: usize,
        p: f64,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let b = visual.batch;
        let a = self.self_attn.forward(tape, store, x, x, b, t, t, true)?;
        let a = maybe_dropout(tape, a, p, rng)?;
        let x = tape.add(x, a)?;
        let x = self.ln1.forward(tape, store, x)?;

        let c = self.cross_attn.forward(tape, store, x, visual.var, b, t, visual.len, false)?;
        let c = maybe_dropout(tape, c, p, rng)?;
        let x = tape.add(x, c)?;
        let x = self.ln2.forward(tape, store, x)?;

        let f = self.ff1.forward(tape, store, x)?;
        let f = tape.relu(f)?;
        let f = self.ff2.forward(tape, store, f)?;
        let f = maybe_dropout(tape, f, p, rng)?;
        let x = tape.add(x, f)?;
        self.ln3.forward(tape, store, x)
    }
}

/// Visual projection, shared token/positional embeddings, and separate
/// forward and backward decoder stacks. Output logits reuse the token
/// embedding table.
#[derive(Debug, Clone)]
pub struct TextualHead {
    config: TextualHeadConfig,
    proj: Linear,
    tok: ParamId,
    pos: ParamId,
    embed_ln: LayerNorm,
    forward: Vec<DecoderLayer>,
    backward: Vec<DecoderLayer>,
}

impl TextualHead {
    pub(crate) fn new(
        store: &mut ParamStore,
        config: &TextualHeadConfig,
        visual_width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let proj = Linear::new(store, "proj", visual_width, d, rng)?;
        let tok = store.add("embed.tok", normal(rng, &[config.vocab_size, d], 0.02))?;
        let pos = store.add("embed.pos", normal(rng, &[config.max_positions, d], 0.02))?;
        let embed_ln = LayerNorm::new(store, "embed.ln", d)?;
        let forward = (0..config.layers)
            .map(|l| DecoderLayer::new(store, &format!("fwd.l{l}"), config, rng))
            .collect::<Result<_>>()?;
        let backward = (0..config.layers)
            .map(|l| DecoderLayer::new(store, &format!("bwd.l{l}"), config, rng))
            .collect::<Result<_>>()?;
        Ok(Self { config: config.clone(), proj, tok, pos, embed_ln, forward, backward })
    }

    pub fn config(&self) -> &TextualHeadConfig {
        &self.config
    }

    /// Flattens a feature map `[B, C, h, w]` into `[B · h·w, d]`.
    pub(crate) fn project<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, features: Var) -> Result<Visual> {
        let s = tape.shape(features).to_vec();
        let (b, c, len) = (s[0], s[1], s[2] * s[3]);
        let f = tape.reshape(features, &[b, c, len])?;
        let f = tape.permute(f, &[0, 2, 1])?;
        let f = tape.reshape(f, &[b * len, c])?;
        let var = self.proj.forward(tape, store, f)?;
        Ok(Visual { var, batch: b, len })
    }

    /// Logits `[b·t, V]` for token rows `ids` (row-major `[b, t]`), already in
    /// the reading order of `direction`.
    pub(crate) fn run<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        ids: &[usize],
        t: usize,
        visual: &Visual,
        direction: Direction,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let b = visual.batch;
        if ids.len() != b * t {
            return Err(dim_err!("{} token ids for a batch of {} rows of {}", ids.len(), b, t));
        }
        if t == 0 || t > self.config.max_positions {
            return Err(dim_err!("sequence length {} outside [1, {}]", t, self.config.max_positions));
        }
        let p = self.config.dropout;
        let table = tape.param(store, self.tok);
        let tok = tape.embedding(table, ids)?;
        let pos_table = tape.param(store, self.pos);
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let pos = tape.embedding(pos_table, &positions)?;
        let x = tape.add(tok, pos)?;
        let x = self.embed_ln.forward(tape, store, x)?;
        let mut x = maybe_dropout(tape, x, p, &mut rng)?;
        let stack = match direction {
            Direction::Forward => &self.forward,
            Direction::Backward => &self.backward,
        };
        for layer in stack {
            x = layer.forward(tape, store, x, visual, t, p, &mut rng)?;
        }
        tape.matmul_t(x, table, false, true)
    }
}
