use ndarray::ArrayView1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelState;
use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocabulary, SENTINEL_COUNT};

/// Temperatures at or below this decode greedily.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decoded {
    pub tokens: Vec<TokenId>,
    /// The length cap was hit before a stop token.
    pub truncated: bool,
}

fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Tokens that end decoding: `<eos>` and the sentinel after the encoder's last.
fn stop_tokens(vocab: &Vocabulary, encoder: &[TokenId]) -> Result<(TokenId, Option<TokenId>)> {
    if encoder.first().and_then(|&t| vocab.bucket_of(t)).is_none() {
        return Err(Error::Config("encoder input must begin with a property token".into()));
    }
    let k = encoder.iter().filter(|&&t| vocab.sentinel_number(t).is_some()).count();
    let closing = (k < SENTINEL_COUNT).then(|| vocab.sentinel(k + 1));
    Ok((vocab.eos(), closing))
}

fn run<F>(state: &ModelState, vocab: &Vocabulary, encoder: &[TokenId], max_len: usize, mut pick: F) -> Result<Decoded>
where
    F: FnMut(ArrayView1<f64>) -> usize,
{
    let (eos, closing) = stop_tokens(vocab, encoder)?;
    let memory = state.encode_memory(encoder)?;
    let max_len = max_len.min(state.config.max_decoder_len);
    let mut prefix = vec![vocab.pad()];
    let mut tokens = Vec::new();
    while tokens.len() < max_len {
        let logits = state.logits_with_memory(&memory, &prefix)?;
        let next = TokenId::from(pick(logits.row(logits.nrows() - 1)));
        tokens.push(next);
        if next == eos || Some(next) == closing {
            return Ok(Decoded { tokens, truncated: false });
        }
        prefix.push(next);
    }
    Ok(Decoded { tokens, truncated: true })
}

/// Argmax decoding; ties go to the lowest token id.
pub fn greedy_decode(state: &ModelState, vocab: &Vocabulary, encoder: &[TokenId], max_len: usize) -> Result<Decoded> {
    run(state, vocab, encoder, max_len, argmax)
}

/// Ancestral sampling from temperature-scaled distributions.
pub fn sample_decode<R: Rng + ?Sized>(
    state: &ModelState,
    vocab: &Vocabulary,
    encoder: &[TokenId],
    temperature: f64,
    rng: &mut R,
    max_len: usize,
) -> Result<Decoded> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    if temperature <= GREEDY_TEMPERATURE {
        return greedy_decode(state, vocab, encoder, max_len);
    }
    run(state, vocab, encoder, max_len, |row| {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let weights: Vec<f64> = row.iter().map(|&x| ((x - max) / temperature).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                return i;
            }
            u -= w;
        }
        weights.len() - 1
    })
}
