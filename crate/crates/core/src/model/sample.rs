//! Top-k sampling continuation of a prompt.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::SamplerConfig;
use super::vocab::{PAD, UNK};
use super::{Model, ModelError};
use crate::timeline::Token;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedToken {
    pub index: u32,
    /// False for prompt tokens.
    pub generated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub tokens: Vec<GeneratedToken>,
}

impl Generation {
    pub fn indices(&self) -> Vec<u32> {
        self.tokens.iter().map(|t| t.index).collect()
    }

    pub fn generated(&self) -> impl Iterator<Item = u32> + '_ {
        self.tokens.iter().filter(|t| t.generated).map(|t| t.index)
    }
}

/// Indices of the `k` most probable sampleable tokens, ties by index.
pub(crate) fn top_k(probs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).filter(|&i| i != PAD as usize && i != UNK as usize).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn tempered(probs: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 1.0 {
        return probs.to_vec();
    }
    // softmax(logits / T) ∝ p^(1/T)
    let logs: Vec<f64> = probs.iter().map(|p| p.ln() / temperature).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub(crate) fn generate(model: &Model, prompt: &[u32], sc: &SamplerConfig) -> Result<Generation, ModelError> {
    sc.validate()?;
    if prompt.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    model.network.check_tokens(prompt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
    let mut state = model.network.start_decode();
    let mut logits = Vec::new();
    for &t in prompt {
        logits = model.network.decode_step(&mut state, t)?;
    }
    let mut seq = prompt.to_vec();
    let mut tokens: Vec<GeneratedToken> = prompt.iter().map(|&index| GeneratedToken { index, generated: false }).collect();
    let context = model.config().context_len;
    let mut new_tokens = 0;
    let mut new_concepts = 0;
    while new_tokens < sc.max_new_tokens
        && sc.max_new_concepts.is_none_or(|m| new_concepts < m)
        && seq.len() < context
    {
        let probs = tempered(&super::ops::softmax_row(&logits), sc.temperature);
        let pool = top_k(&probs, sc.top_k);
        let mass: f64 = pool.iter().map(|&i| probs[i]).sum();
        let mut u = rng.random::<f64>() * mass;
        let mut choice = *pool.last().expect("vocabulary has real tokens");
        for &i in &pool {
            if u < probs[i] {
                choice = i;
                break;
            }
            u -= probs[i];
        }
        let index = choice as u32;
        seq.push(index);
        tokens.push(GeneratedToken { index, generated: true });
        new_tokens += 1;
        match model.vocab.token(index) {
            Some(Token::Concept(_)) => new_concepts += 1,
            Some(Token::Death) => break,
            _ => {}
        }
        if seq.len() < context {
            logits = model.network.decode_step(&mut state, index)?;
        }
    }
    Ok(Generation { tokens })
}
