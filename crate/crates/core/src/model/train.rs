//! Causal language-model training: AdamW with decoupled weight decay and a
//! linear warmup/decay schedule.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::network::{mix, Batch, Network};
use super::{Model, ModelError};
use crate::timeline::Timeline;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Per-tensor AdamW state over a flat f32 parameter buffer.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<f32>,
    v: Vec<f32>,
    decay: Vec<bool>,
    step: u64,
}

impl AdamW {
    pub fn new(net: &Network<f32>) -> Self {
        let n = net.params().len();
        let mut decay = vec![false; n];
        for spec in net.layout().specs() {
            decay[spec.range()].fill(spec.decay);
        }
        AdamW { m: vec![0.0; n], v: vec![0.0; n], decay, step: 0 }
    }

    pub fn update(&mut self, params: &mut [f32], grads: &[f32], lr: f64, weight_decay: f64) {
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let shrink = (1.0 - lr * weight_decay) as f32;
        let (b1, b2) = (BETA1 as f32, BETA2 as f32);
        for i in 0..params.len() {
            let g = grads[i];
            if self.decay[i] {
                params[i] *= shrink;
            }
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let denom = self.v[i].sqrt() / bc2_sqrt + EPS as f32;
            params[i] -= step_size * self.m[i] / denom;
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean training loss per epoch, weighted by scored targets.
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
}

/// Encodes timelines, cutting each to `context_len + 1` tokens so every input
/// position fits the context.
pub fn encode_corpus(model: &Model, corpus: &[Timeline]) -> Vec<Vec<u32>> {
    let max = model.config().context_len + 1;
    corpus
        .iter()
        .map(|t| {
            let mut s = model.vocab.encode_timeline(t);
            s.truncate(max);
            s
        })
        .filter(|s| s.len() >= 2)
        .collect()
}

/// Trains in place; returns the loss history. Deterministic for a given seed.
pub fn train(model: &mut Model, corpus: &[Timeline], tc: &TrainConfig) -> Result<TrainHistory, ModelError> {
    tc.validate()?;
    let sequences = encode_corpus(model, corpus);
    if sequences.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    let truncated = corpus.iter().filter(|t| t.items.len() > model.config().context_len + 1).count();
    if truncated > 0 {
        tracing::warn!(truncated, "timelines longer than the context were cut");
    }
    model.train_config = Some(tc.clone());
    let mut history = TrainHistory::default();
    if tc.epochs == 0 {
        return Ok(history);
    }

    let batches_per_epoch = sequences.len().div_ceil(tc.batch_size);
    let total_steps = batches_per_epoch * tc.epochs;
    let mut opt = AdamW::new(&model.network);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut step = 0usize;

    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut target_sum = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            let rows: Vec<Vec<u32>> = chunk.iter().map(|&i| sequences[i].clone()).collect();
            let batch = Batch::from_sequences(&rows);
            let n = batch.target_count();
            let dropout_seed = mix(tc.seed, step as u64);
            let (loss, mut grads) = model.network.batch_gradients(&batch, Some(dropout_seed))?;
            if tc.max_grad_norm > 0.0 {
                let norm = grads.values.iter().map(|g| (*g as f64).powi(2)).sum::<f64>().sqrt();
                if norm > tc.max_grad_norm {
                    let s = (tc.max_grad_norm / norm) as f32;
                    grads.values.iter_mut().for_each(|g| *g *= s);
                }
            }
            let lr = tc.lr_at(step, total_steps);
            opt.update(model.network.params_mut(), &grads.values, lr, tc.weight_decay);
            loss_sum += loss * n as f64;
            target_sum += n;
            step += 1;
        }
        let mean = if target_sum > 0 { loss_sum / target_sum as f64 } else { 0.0 };
        tracing::info!(epoch, loss = mean, "epoch finished");
        history.epoch_loss.push(mean);
    }
    history.steps = step;
    if model.network.params().iter().any(|p| !p.is_finite()) {
        return Err(ModelError::NonFinite);
    }
    Ok(history)
}
