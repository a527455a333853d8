//! Left-to-right caption generation with the forward decoder.
//!
//! A sequence starts at `[SOS]` and is complete once it emits `[EOS]` or
//! reaches `max_len` tokens (the start token included). Scores are summed
//! natural-log probabilities accumulated in `f64`.

use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::model::{images_to_tensor, BnMode, Direction, Model, Visual};
use crate::prelude::*;
use crate::synthdata::GrayImage;
use crate::tensor::{log_softmax_row, Tape, Tensor};
use crate::textpipe::{detokenize, Vocabulary, EOS, SOS};
use crate::{Error, Result};

/// Source of next-token distributions for a batch of equal-length prefixes.
pub trait NextTokenScorer {
    fn vocab_size(&self) -> usize;

    /// Longest sequence the scorer accepts.
    fn max_len(&self) -> usize;

    /// Log-probabilities over the vocabulary following each prefix.
    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

/// A generated token sequence with its cumulative log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

impl Decoded {
    pub fn is_finished(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }
}

fn check_len<S: NextTokenScorer + ?Sized>(scorer: &S, max_len: usize) -> Result<()> {
    if max_len < 2 || max_len > scorer.max_len() {
        return Err(Error::Parameter(format!("max_len {} outside [2, {}]", max_len, scorer.max_len())));
    }
    Ok(())
}

/// Repeatedly appends the most probable token, lowest id on ties.
pub fn greedy_decode<S: NextTokenScorer + ?Sized>(scorer: &mut S, max_len: usize) -> Result<Decoded> {
    check_len(scorer, max_len)?;
    let mut tokens = vec![SOS];
    let mut log_prob = 0.0;
    while tokens.len() < max_len {
        let lp = scorer.next_log_probs(core::slice::from_ref(&tokens))?.remove(0);
        let mut best = 0;
        for (i, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = i;
            }
        }
        log_prob += lp[best];
        tokens.push(best);
        if best == EOS {
            break;
        }
    }
    Ok(Decoded { tokens, log_prob })
}

/// How complete sequences of different lengths are compared.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LengthNorm {
    /// Raw cumulative log-probability.
    #[default]
    None,
    /// Cumulative log-probability per generated token.
    Mean,
}

#[derive(Debug, Clone)]
struct Beam {
    tokens: Vec<usize>,
    log_prob: f64,
    /// Log-probability of the last token.
    last: f64,
    done: bool,
}

/// Higher cumulative score first, then higher last-step score, then lower
/// last token id; this makes a single beam follow the greedy path exactly.
fn rank(a: &Beam, b: &Beam) -> Ordering {
    b.log_prob
        .partial_cmp(&a.log_prob)
        .unwrap_or(Ordering::Equal)
        .then(b.last.partial_cmp(&a.last).unwrap_or(Ordering::Equal))
        .then(a.tokens.last().cmp(&b.tokens.last()))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Length-unnormalized beam search keeping the `beams` best prefixes per
/// step. Returns the best complete sequence, where reaching `max_len`
/// completes a sequence as `[EOS]` does.
///
/// Pruning can discard the greedy path in favor of prefixes that later
/// fare worse, so with more than one beam the greedy completion also
/// competes in the final choice; the result never scores below greedy.
pub fn beam_search<S: NextTokenScorer + ?Sized>(
    scorer: &mut S,
    beams: usize,
    max_len: usize,
    norm: LengthNorm,
) -> Result<Decoded> {
    check_len(scorer, max_len)?;
    if beams == 0 {
        return Err(Error::Parameter("beam search needs at least one beam".into()));
    }
    let mut live = vec![Beam { tokens: vec![SOS], log_prob: 0.0, last: 0.0, done: false }];
    loop {
        let open: Vec<&Beam> = live.iter().filter(|b| !b.done).collect();
        if open.is_empty() {
            break;
        }
        let best_done = live.iter().filter(|b| b.done).map(|b| b.log_prob).fold(f64::NEG_INFINITY, f64::max);
        let best_open = open.iter().map(|b| b.log_prob).fold(f64::NEG_INFINITY, f64::max);
        if norm == LengthNorm::None && best_done >= best_open {
            // extensions only lose probability
            break;
        }
        let prefixes: Vec<Vec<usize>> = open.iter().map(|b| b.tokens.clone()).collect();
        let scores = scorer.next_log_probs(&prefixes)?;
        let mut candidates: Vec<Beam> = live.iter().filter(|b| b.done).cloned().collect();
        for (beam, lp) in open.iter().zip(&scores) {
            for (tok, &l) in lp.iter().enumerate() {
                let mut tokens = beam.tokens.clone();
                tokens.push(tok);
                let done = tok == EOS || tokens.len() >= max_len;
                candidates.push(Beam { tokens, log_prob: beam.log_prob + l, last: l, done });
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(beams);
        live = candidates;
    }
    if beams > 1 {
        let g = greedy_decode(scorer, max_len)?;
        live.push(Beam { tokens: g.tokens, log_prob: g.log_prob, last: 0.0, done: true });
    }
    let score = |b: &Beam| match norm {
        LengthNorm::None => b.log_prob,
        LengthNorm::Mean => b.log_prob / (b.tokens.len() - 1) as f64,
    };
    let best = live
        .into_iter()
        .reduce(|a, b| match score(&b).partial_cmp(&score(&a)) {
            Some(Ordering::Greater) => b,
            Some(Ordering::Less) | None => a,
            Some(Ordering::Equal) => {
                if rank(&b, &a) == Ordering::Less {
                    b
                } else {
                    a
                }
            }
        })
        .expect("at least one beam survives");
    Ok(Decoded { tokens: best.tokens, log_prob: best.log_prob })
}

/// Forward-decoder scorer for one image. The visual features are computed
/// once with frozen batch-norm statistics.
pub struct ModelScorer<'m> {
    model: &'m Model,
    visual: Tensor,
    len: usize,
}

impl<'m> ModelScorer<'m> {
    pub fn new(model: &'m Model, image: &GrayImage) -> Result<Self> {
        model.textual()?;
        let mut tape = Tape::new();
        let x = tape.constant(images_to_tensor(&[image])?);
        let vis = model.encode_image(&mut tape, x, BnMode::Eval, &mut Vec::new())?;
        Ok(Self { model, visual: tape.value(vis.var).clone(), len: vis.len })
    }
}

impl NextTokenScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.textual().map_or(0, |t| t.config().vocab_size)
    }

    fn max_len(&self) -> usize {
        self.model.textual().map_or(0, |t| t.config().max_positions)
    }

    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let b = prefixes.len();
        let t = prefixes.first().map_or(0, Vec::len);
        let d = self.visual.shape()[1];
        let mut rows = Vec::with_capacity(b * self.visual.len());
        for _ in 0..b {
            rows.extend_from_slice(self.visual.data());
        }
        let mut tape = Tape::new();
        let var = tape.constant(Tensor::new(&[b * self.len, d], rows)?);
        let visual = Visual { var, batch: b, len: self.len };
        let logits = self.model.decoder_forward(&mut tape, prefixes, &visual, Direction::Forward, None)?;
        let v = tape.shape(logits)[1];
        let data = tape.value(logits).data();
        Ok((0..b)
            .map(|i| {
                let row: Vec<f64> = data[(i * t + t - 1) * v..][..v].iter().map(|&x| f64::from(x)).collect();
                log_softmax_row(&row)
            })
            .collect())
    }
}

/// Beam-searched caption for `image`, detokenized.
pub fn generate_report(model: &Model, image: &GrayImage, vocab: &Vocabulary, beams: usize, max_len: usize) -> Result<String> {
    let mut scorer = ModelScorer::new(model, image)?;
    if vocab.len() != scorer.vocab_size() {
        return Err(Error::Config(format!(
            "vocabulary has {} pieces, model expects {}",
            vocab.len(),
            scorer.vocab_size()
        )));
    }
    let out = beam_search(&mut scorer, beams, max_len, LengthNorm::None)?;
    Ok(detokenize(&out.tokens, vocab))
}
