//! GPT-2 style pre-norm decoder with hand-derived gradients.
//!
//! All parameters live in one flat buffer; [`Layout`] names the tensors and
//! their offsets in a fixed order, which is also the on-disk order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::ops::{self, cst, LayerNormCache, Scalar};
use super::vocab::{PAD, UNK};
use super::ModelError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub offset: usize,
    /// Matrices are decayed; biases and norm gains are not.
    #[serde(skip)]
    pub decay: bool,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    w_qkv: usize,
    b_qkv: usize,
    w_o: usize,
    b_o: usize,
    ln2_g: usize,
    ln2_b: usize,
    w_in: usize,
    b_in: usize,
    w_out: usize,
    b_out: usize,
}

#[derive(Debug, Clone)]
struct Idx {
    wte: usize,
    wpe: usize,
    layers: Vec<LayerIdx>,
    lnf_g: usize,
    lnf_b: usize,
    head: usize,
}

#[derive(Debug, Clone)]
pub struct Layout {
    specs: Vec<TensorSpec>,
    total: usize,
    idx: Idx,
}

impl Layout {
    pub fn new(cfg: &ModelConfig, vocab_size: usize) -> Layout {
        let (d, f, c) = (cfg.embedding_dim, cfg.feedforward_dim, cfg.context_len);
        let mut specs = Vec::new();
        let mut total = 0;
        let mut add = |name: String, shape: Vec<usize>, decay: bool| {
            let offset = total;
            total += shape.iter().product::<usize>();
            specs.push(TensorSpec { name, shape, offset, decay });
            offset
        };
        let wte = add("wte".into(), vec![vocab_size, d], true);
        let wpe = add("wpe".into(), vec![c, d], true);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = format!("h{l}");
            layers.push(LayerIdx {
                ln1_g: add(format!("{p}.ln1.g"), vec![d], false),
                ln1_b: add(format!("{p}.ln1.b"), vec![d], false),
                w_qkv: add(format!("{p}.attn.w_qkv"), vec![d, 3 * d], true),
                b_qkv: add(format!("{p}.attn.b_qkv"), vec![3 * d], false),
                w_o: add(format!("{p}.attn.w_o"), vec![d, d], true),
                b_o: add(format!("{p}.attn.b_o"), vec![d], false),
                ln2_g: add(format!("{p}.ln2.g"), vec![d], false),
                ln2_b: add(format!("{p}.ln2.b"), vec![d], false),
                w_in: add(format!("{p}.mlp.w_in"), vec![d, f], true),
                b_in: add(format!("{p}.mlp.b_in"), vec![f], false),
                w_out: add(format!("{p}.mlp.w_out"), vec![f, d], true),
                b_out: add(format!("{p}.mlp.b_out"), vec![d], false),
            });
        }
        let lnf_g = add("ln_f.g".into(), vec![d], false);
        let lnf_b = add("ln_f.b".into(), vec![d], false);
        let head = add("lm_head".into(), vec![d, vocab_size], true);
        Layout {
            specs,
            total,
            idx: Idx { wte, wpe, layers, lnf_g, lnf_b, head },
        }
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn spec(&self, name: &str) -> Option<&TensorSpec> {
        self.specs.iter().find(|s| s.name == name)
    }
}

/// Padded token batch. `mask[b][i]` is false on padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub tokens: Vec<Vec<u32>>,
    pub mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn from_sequences(seqs: &[Vec<u32>]) -> Batch {
        let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let tokens = seqs
            .iter()
            .map(|s| {
                let mut row = s.clone();
                row.resize(width, PAD);
                row
            })
            .collect();
        let mask = seqs
            .iter()
            .map(|s| (0..width).map(|i| i < s.len()).collect())
            .collect();
        Batch { tokens, mask }
    }

    /// Input positions whose next token is a scored target.
    fn targets(&self, row: usize) -> Vec<bool> {
        let (toks, mask) = (&self.tokens[row], &self.mask[row]);
        (0..toks.len().saturating_sub(1))
            .map(|i| mask[i] && mask[i + 1] && toks[i + 1] != PAD && toks[i + 1] != UNK)
            .collect()
    }

    pub fn target_count(&self) -> usize {
        (0..self.tokens.len()).map(|r| self.targets(r).iter().filter(|v| **v).count()).sum()
    }
}

/// Gradient buffer laid out like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F> {
    pub values: Vec<F>,
}

struct LayerCache<F> {
    ln1: LayerNormCache<F>,
    qkv: Vec<F>,
    probs: Vec<F>,
    attn: Vec<F>,
    attn_mask: Option<Vec<F>>,
    ln2: LayerNormCache<F>,
    pre: Vec<F>,
    act: Vec<F>,
    mlp_mask: Option<Vec<F>>,
}

struct Cache<F> {
    tokens: Vec<u32>,
    emb_mask: Option<Vec<F>>,
    layers: Vec<LayerCache<F>>,
    lnf: LayerNormCache<F>,
    logits: Vec<F>,
}

fn pair_mut<F>(buf: &mut [F], a: usize, alen: usize, b: usize, blen: usize) -> (&mut [F], &mut [F]) {
    assert!(a + alen <= b);
    let (lo, hi) = buf.split_at_mut(b);
    (&mut lo[a..a + alen], &mut hi[..blen])
}

fn apply_mask<F: Scalar>(x: &mut [F], mask: &Option<Vec<F>>) {
    if let Some(m) = mask {
        for (v, &k) in x.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

/// Per-layer packed `[q | k | v]` rows of the tokens decoded so far.
#[derive(Debug, Clone)]
pub struct DecodeState<F> {
    qkv: Vec<Vec<F>>,
    len: usize,
}

impl<F> DecodeState<F> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone)]
pub struct Network<F: Scalar> {
    config: ModelConfig,
    vocab_size: usize,
    layout: Layout,
    params: Vec<F>,
}

impl<F: Scalar> Network<F> {
    /// GPT-2 initialisation: N(0, 0.02) weights, residual projections scaled
    /// by 1/√(2·layers), zero biases, unit norm gains.
    pub fn new(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self, ModelError> {
        let mut net = Network::zeros(config, vocab_size)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let resid_std = std / (2.0 * net.config.n_layers as f64).sqrt();
        for spec in net.layout.specs.clone() {
            let slice = &mut net.params[spec.range()];
            if spec.name.ends_with(".g") {
                slice.fill(F::one());
            } else if spec.decay {
                let s = if spec.name.ends_with("w_o") || spec.name.ends_with("w_out") { resid_std } else { std };
                let normal = Normal::new(0.0, s).expect("valid std");
                for v in slice.iter_mut() {
                    *v = cst(normal.sample(&mut rng));
                }
            }
        }
        Ok(net)
    }

    /// All-zero parameters with unit norm gains.
    pub fn zeros(config: ModelConfig, vocab_size: usize) -> Result<Self, ModelError> {
        config.validate()?;
        if vocab_size < 3 {
            return Err(ModelError::InvalidConfig("vocabulary needs at least one real token".into()));
        }
        let layout = Layout::new(&config, vocab_size);
        let mut params = vec![F::zero(); layout.total];
        for spec in layout.specs.iter().filter(|s| s.name.ends_with(".g")) {
            params[spec.range()].fill(F::one());
        }
        Ok(Network { config, vocab_size, layout, params })
    }

    pub fn from_params(config: ModelConfig, vocab_size: usize, params: Vec<F>) -> Result<Self, ModelError> {
        let net = Network::zeros(config, vocab_size)?;
        if params.len() != net.layout.total {
            return Err(ModelError::Format(format!(
                "expected {} parameters, found {}",
                net.layout.total,
                params.len()
            )));
        }
        Ok(Network { params, ..net })
    }

    pub fn cast<G: Scalar>(&self) -> Network<G> {
        Network {
            config: self.config.clone(),
            vocab_size: self.vocab_size,
            layout: self.layout.clone(),
            params: self.params.iter().map(|v| cst(v.to_f64().unwrap())).collect(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn tensor(&self, name: &str) -> Option<&[F]> {
        self.layout.spec(name).map(|s| &self.params[s.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [F]> {
        let range = self.layout.spec(name)?.range();
        Some(&mut self.params[range])
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        if tokens.len() > self.config.context_len {
            return Err(ModelError::SequenceTooLong { len: tokens.len(), max: self.config.context_len });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(ModelError::IndexOutOfVocab { index: bad, vocab: self.vocab_size });
        }
        Ok(())
    }

    /// Logits `[len, V]`, row-major.
    pub fn forward(&self, tokens: &[u32]) -> Result<Vec<F>, ModelError> {
        self.check_tokens(tokens)?;
        if tokens.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self.forward_cached(tokens, None).logits)
    }

    pub fn start_decode(&self) -> DecodeState<F> {
        DecodeState { qkv: vec![Vec::new(); self.config.n_layers], len: 0 }
    }

    /// Appends one token to `state` and returns its logits row. Rows equal the
    /// corresponding rows of [`Network::forward`] on the whole sequence.
    pub fn decode_step(&self, state: &mut DecodeState<F>, token: u32) -> Result<Vec<F>, ModelError> {
        let cfg = &self.config;
        let (i, d, f, v, heads) = (state.len, cfg.embedding_dim, cfg.feedforward_dim, self.vocab_size, cfg.n_heads);
        if i >= cfg.context_len {
            return Err(ModelError::SequenceTooLong { len: i + 1, max: cfg.context_len });
        }
        self.check_tokens(&[token])?;
        let p = &self.params;
        let ix = &self.layout.idx;

        let mut x: Vec<F> = (0..d).map(|k| p[ix.wte + token as usize * d + k] + p[ix.wpe + i * d + k]).collect();
        let mut scratch = vec![F::zero(); i + 1];
        for (li, cache) in ix.layers.iter().zip(state.qkv.iter_mut()) {
            let ln1 = ops::layernorm(&x, &p[li.ln1_g..][..d], &p[li.ln1_b..][..d], 1, d);
            let mut row = vec![F::zero(); 3 * d];
            ops::matmul(&mut row, &ln1.out, &p[li.w_qkv..][..d * 3 * d], Some(&p[li.b_qkv..][..3 * d]), 1, d, 3 * d);
            cache.extend_from_slice(&row);
            let mut attn = vec![F::zero(); d];
            for h in 0..heads {
                ops::attend_row(cache, i, d, heads, h, &mut scratch, &mut attn);
            }
            let mut proj = vec![F::zero(); d];
            ops::matmul(&mut proj, &attn, &p[li.w_o..][..d * d], Some(&p[li.b_o..][..d]), 1, d, d);
            for (xv, pv) in x.iter_mut().zip(&proj) {
                *xv += *pv;
            }
            let ln2 = ops::layernorm(&x, &p[li.ln2_g..][..d], &p[li.ln2_b..][..d], 1, d);
            let mut pre = vec![F::zero(); f];
            ops::matmul(&mut pre, &ln2.out, &p[li.w_in..][..d * f], Some(&p[li.b_in..][..f]), 1, d, f);
            let act: Vec<F> = pre.iter().map(|&z| ops::gelu(z)).collect();
            let mut out = vec![F::zero(); d];
            ops::matmul(&mut out, &act, &p[li.w_out..][..f * d], Some(&p[li.b_out..][..d]), 1, f, d);
            for (xv, ov) in x.iter_mut().zip(&out) {
                *xv += *ov;
            }
        }
        state.len += 1;
        let lnf = ops::layernorm(&x, &p[ix.lnf_g..][..d], &p[ix.lnf_b..][..d], 1, d);
        let mut logits = vec![F::zero(); v];
        ops::matmul(&mut logits, &lnf.out, &p[ix.head..][..d * v], None, 1, d, v);
        Ok(logits)
    }

    fn dropout_mask(&self, rng: &mut Option<&mut ChaCha8Rng>, n: usize) -> Option<Vec<F>> {
        let p = self.config.dropout;
        let rng = rng.as_mut()?;
        if p <= 0.0 {
            return None;
        }
        let keep = cst::<F>(1.0 / (1.0 - p));
        Some((0..n).map(|_| if rng.random::<f64>() < p { F::zero() } else { keep }).collect())
    }

    fn forward_cached(&self, tokens: &[u32], mut rng: Option<&mut ChaCha8Rng>) -> Cache<F> {
        let cfg = &self.config;
        let (t, d, f, v, h) = (tokens.len(), cfg.embedding_dim, cfg.feedforward_dim, self.vocab_size, cfg.n_heads);
        let p = &self.params;
        let ix = &self.layout.idx;

        let mut x = vec![F::zero(); t * d];
        for (i, &tok) in tokens.iter().enumerate() {
            let te = &p[ix.wte + tok as usize * d..][..d];
            let pe = &p[ix.wpe + i * d..][..d];
            for k in 0..d {
                x[i * d + k] = te[k] + pe[k];
            }
        }
        let emb_mask = self.dropout_mask(&mut rng, t * d);
        apply_mask(&mut x, &emb_mask);

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for li in &ix.layers {
            let ln1 = ops::layernorm(&x, &p[li.ln1_g..][..d], &p[li.ln1_b..][..d], t, d);
            let mut qkv = vec![F::zero(); t * 3 * d];
            ops::matmul(&mut qkv, &ln1.out, &p[li.w_qkv..][..d * 3 * d], Some(&p[li.b_qkv..][..3 * d]), t, d, 3 * d);
            let (attn, probs) = ops::causal_attention(&qkv, t, d, h);
            let mut proj = vec![F::zero(); t * d];
            ops::matmul(&mut proj, &attn, &p[li.w_o..][..d * d], Some(&p[li.b_o..][..d]), t, d, d);
            let attn_mask = self.dropout_mask(&mut rng, t * d);
            apply_mask(&mut proj, &attn_mask);
            for (xv, pv) in x.iter_mut().zip(&proj) {
                *xv += *pv;
            }

            let ln2 = ops::layernorm(&x, &p[li.ln2_g..][..d], &p[li.ln2_b..][..d], t, d);
            let mut pre = vec![F::zero(); t * f];
            ops::matmul(&mut pre, &ln2.out, &p[li.w_in..][..d * f], Some(&p[li.b_in..][..f]), t, d, f);
            let act: Vec<F> = pre.iter().map(|&z| ops::gelu(z)).collect();
            let mut out = vec![F::zero(); t * d];
            ops::matmul(&mut out, &act, &p[li.w_out..][..f * d], Some(&p[li.b_out..][..d]), t, f, d);
            let mlp_mask = self.dropout_mask(&mut rng, t * d);
            apply_mask(&mut out, &mlp_mask);
            for (xv, ov) in x.iter_mut().zip(&out) {
                *xv += *ov;
            }
            layers.push(LayerCache { ln1, qkv, probs, attn, attn_mask, ln2, pre, act, mlp_mask });
        }

        let lnf = ops::layernorm(&x, &p[ix.lnf_g..][..d], &p[ix.lnf_b..][..d], t, d);
        let mut logits = vec![F::zero(); t * v];
        ops::matmul(&mut logits, &lnf.out, &p[ix.head..][..d * v], None, t, d, v);
        Cache { tokens: tokens.to_vec(), emb_mask, layers, lnf, logits }
    }

    /// Accumulates parameter gradients for upstream `dlogits` into `grads` and
    /// returns the gradient with respect to the summed input embeddings.
    fn backward(&self, cache: &Cache<F>, dlogits: &[F], grads: &mut [F]) -> Vec<F> {
        let cfg = &self.config;
        let (t, d, f, v, h) = (cache.tokens.len(), cfg.embedding_dim, cfg.feedforward_dim, self.vocab_size, cfg.n_heads);
        let p = &self.params;
        let ix = &self.layout.idx;

        let mut dln = vec![F::zero(); t * d];
        ops::matmul_backward(&mut dln, &mut grads[ix.head..ix.head + d * v], None, dlogits, &cache.lnf.out, &p[ix.head..][..d * v], t, d, v);
        let mut dx = vec![F::zero(); t * d];
        {
            let (dg, db) = pair_mut(grads, ix.lnf_g, d, ix.lnf_b, d);
            ops::layernorm_backward(&mut dx, dg, db, &dln, &cache.lnf, &p[ix.lnf_g..][..d], t, d);
        }

        for (li, lc) in ix.layers.iter().zip(&cache.layers).rev() {
            // x_out = x_mid + drop(gelu(ln2(x_mid)·W_in + b_in)·W_out + b_out)
            let mut dbranch = dx.clone();
            apply_mask(&mut dbranch, &lc.mlp_mask);
            let mut dact = vec![F::zero(); t * f];
            {
                let (dw, db) = pair_mut(grads, li.w_out, f * d, li.b_out, d);
                ops::matmul_backward(&mut dact, dw, Some(db), &dbranch, &lc.act, &p[li.w_out..][..f * d], t, f, d);
            }
            for (g, &z) in dact.iter_mut().zip(&lc.pre) {
                *g *= ops::gelu_grad(z);
            }
            let mut dln2 = vec![F::zero(); t * d];
            {
                let (dw, db) = pair_mut(grads, li.w_in, d * f, li.b_in, f);
                ops::matmul_backward(&mut dln2, dw, Some(db), &dact, &lc.ln2.out, &p[li.w_in..][..d * f], t, d, f);
            }
            {
                let (dg, db) = pair_mut(grads, li.ln2_g, d, li.ln2_b, d);
                ops::layernorm_backward(&mut dx, dg, db, &dln2, &lc.ln2, &p[li.ln2_g..][..d], t, d);
            }

            // x_mid = x_in + drop(attn(ln1(x_in))·W_o + b_o)
            let mut dbranch = dx.clone();
            apply_mask(&mut dbranch, &lc.attn_mask);
            let mut dattn = vec![F::zero(); t * d];
            {
                let (dw, db) = pair_mut(grads, li.w_o, d * d, li.b_o, d);
                ops::matmul_backward(&mut dattn, dw, Some(db), &dbranch, &lc.attn, &p[li.w_o..][..d * d], t, d, d);
            }
            let mut dqkv = vec![F::zero(); t * 3 * d];
            ops::causal_attention_backward(&mut dqkv, &dattn, &lc.qkv, &lc.probs, t, d, h);
            let mut dln1 = vec![F::zero(); t * d];
            {
                let (dw, db) = pair_mut(grads, li.w_qkv, d * 3 * d, li.b_qkv, 3 * d);
                ops::matmul_backward(&mut dln1, dw, Some(db), &dqkv, &lc.ln1.out, &p[li.w_qkv..][..d * 3 * d], t, d, 3 * d);
            }
            {
                let (dg, db) = pair_mut(grads, li.ln1_g, d, li.ln1_b, d);
                ops::layernorm_backward(&mut dx, dg, db, &dln1, &lc.ln1, &p[li.ln1_g..][..d], t, d);
            }
        }

        apply_mask(&mut dx, &cache.emb_mask);
        for (i, &tok) in cache.tokens.iter().enumerate() {
            let row = &dx[i * d..(i + 1) * d];
            for (g, &r) in grads[ix.wte + tok as usize * d..][..d].iter_mut().zip(row) {
                *g += r;
            }
            for (g, &r) in grads[ix.wpe + i * d..][..d].iter_mut().zip(row) {
                *g += r;
            }
        }
        dx
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), ModelError> {
        for row in &batch.tokens {
            let len = row.len().saturating_sub(1);
            if len > self.config.context_len {
                return Err(ModelError::SequenceTooLong { len, max: self.config.context_len });
            }
            if let Some(&bad) = row.iter().find(|&&t| t as usize >= self.vocab_size) {
                return Err(ModelError::IndexOutOfVocab { index: bad, vocab: self.vocab_size });
            }
        }
        Ok(())
    }

    /// Mean negative log-likelihood over scored targets, in f64.
    pub fn loss(&self, batch: &Batch) -> Result<f64, ModelError> {
        self.check_batch(batch)?;
        let n = batch.target_count();
        if n == 0 {
            return Ok(0.0);
        }
        let per_row: Vec<f64> = (0..batch.tokens.len())
            .into_par_iter()
            .map(|r| {
                let targets = batch.targets(r);
                let Some(last) = targets.iter().rposition(|v| *v) else { return 0.0 };
                let toks = &batch.tokens[r];
                let logits = self.forward_cached(&toks[..=last], None).logits;
                let v = self.vocab_size;
                (0..=last)
                    .filter(|&i| targets[i])
                    .map(|i| {
                        let row = &logits[i * v..(i + 1) * v];
                        ops::log_sum_exp(row) - row[toks[i + 1] as usize].to_f64().unwrap()
                    })
                    .sum()
            })
            .collect();
        Ok(per_row.iter().sum::<f64>() / n as f64)
    }

    pub fn loss_and_gradients(&self, batch: &Batch) -> Result<(f64, Gradients<F>), ModelError> {
        self.batch_gradients(batch, None)
    }

    /// With `dropout_seed`, each row draws dropout masks from its own stream
    /// derived from the seed and the row index, so results do not depend on
    /// thread scheduling.
    pub fn batch_gradients(&self, batch: &Batch, dropout_seed: Option<u64>) -> Result<(f64, Gradients<F>), ModelError> {
        self.check_batch(batch)?;
        let n = batch.target_count();
        let total = self.layout.total;
        if n == 0 {
            return Ok((0.0, Gradients { values: vec![F::zero(); total] }));
        }
        let scale = 1.0 / n as f64;
        let rows: Vec<Option<(f64, Vec<F>)>> = (0..batch.tokens.len())
            .into_par_iter()
            .map(|r| {
                let targets = batch.targets(r);
                let last = targets.iter().rposition(|v| *v)?;
                let toks = &batch.tokens[r];
                let mut rng = dropout_seed.map(|s| ChaCha8Rng::seed_from_u64(mix(s, r as u64)));
                let cache = self.forward_cached(&toks[..=last], rng.as_mut());
                let v = self.vocab_size;
                let mut dlogits = vec![F::zero(); (last + 1) * v];
                let mut loss = 0.0;
                for i in (0..=last).filter(|&i| targets[i]) {
                    let row = &cache.logits[i * v..(i + 1) * v];
                    let target = toks[i + 1] as usize;
                    let probs = ops::softmax_row(row);
                    loss += ops::log_sum_exp(row) - row[target].to_f64().unwrap();
                    for (k, pk) in probs.iter().enumerate() {
                        let g = if k == target { pk - 1.0 } else { *pk };
                        dlogits[i * v + k] = cst(g * scale);
                    }
                }
                let mut grads = vec![F::zero(); total];
                self.backward(&cache, &dlogits, &mut grads);
                Some((loss, grads))
            })
            .collect();
        let mut values = vec![F::zero(); total];
        let mut loss = 0.0;
        for (l, g) in rows.into_iter().flatten() {
            loss += l;
            for (a, b) in values.iter_mut().zip(g) {
                *a += b;
            }
        }
        Ok((loss * scale, Gradients { values }))
    }

    /// Normalized L2 norms of ∂logit[target]/∂embedding at every prefix position,
    /// with the logit taken at the last position.
    pub fn saliency(&self, prefix: &[u32], target: u32) -> Result<Vec<f64>, ModelError> {
        if prefix.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        self.check_tokens(prefix)?;
        if target as usize >= self.vocab_size {
            return Err(ModelError::IndexOutOfVocab { index: target, vocab: self.vocab_size });
        }
        let cache = self.forward_cached(prefix, None);
        let (t, v, d) = (prefix.len(), self.vocab_size, self.config.embedding_dim);
        let mut dlogits = vec![F::zero(); t * v];
        dlogits[(t - 1) * v + target as usize] = F::one();
        let mut scratch = vec![F::zero(); self.layout.total];
        let demb = self.backward(&cache, &dlogits, &mut scratch);
        let norms: Vec<f64> = demb
            .chunks_exact(d)
            .map(|row| row.iter().map(|g| g.to_f64().unwrap().powi(2)).sum::<f64>().sqrt())
            .collect();
        let total: f64 = norms.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Ok(vec![1.0 / t as f64; t]);
        }
        Ok(norms.into_iter().map(|x| x / total).collect())
    }
}

/// SplitMix64 finalizer over a pair.
pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { n_layers: 1, n_heads: 2, embedding_dim: 8, context_len: 16, feedforward_dim: 16, dropout: 0.0 }
    }

    #[test]
    fn layout_order_and_shapes() {
        let l = Layout::new(&tiny(), 12);
        let names: Vec<&str> = l.specs().iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names[0], "wte");
        assert_eq!(names[1], "wpe");
        assert_eq!(*names.last().unwrap(), "lm_head");
        assert_eq!(l.spec("lm_head").unwrap().shape, vec![8, 12]);
        let sum: usize = l.specs().iter().map(TensorSpec::len).sum();
        assert_eq!(sum, l.total());
    }

    #[test]
    fn incremental_decoding_matches_full_forward() {
        let net = Network::<f32>::new(tiny(), 9, 3).unwrap();
        let tokens = [2u32, 7, 3, 3, 8, 5];
        let full = net.forward(&tokens).unwrap();
        let mut state = net.start_decode();
        for (i, &t) in tokens.iter().enumerate() {
            assert_eq!(net.decode_step(&mut state, t).unwrap(), full[i * 9..(i + 1) * 9]);
        }
        assert_eq!(state.len(), tokens.len());
    }

    #[test]
    fn causal_rows_are_bit_identical() {
        let net = Network::<f32>::new(tiny(), 12, 3).unwrap();
        let a = net.forward(&[2, 3, 4, 5, 6]).unwrap();
        let b = net.forward(&[2, 3, 4, 9, 10]).unwrap();
        assert_eq!(&a[..3 * 12], &b[..3 * 12]);
        assert_ne!(&a[3 * 12..], &b[3 * 12..]);
        let prefix = net.forward(&[2, 3, 4]).unwrap();
        assert_eq!(&a[..3 * 12], &prefix[..]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let net = Network::<f32>::new(tiny(), 12, 3).unwrap();
        assert!(matches!(net.forward(&[12]), Err(ModelError::IndexOutOfVocab { .. })));
        assert!(matches!(net.forward(&[2; 17]), Err(ModelError::SequenceTooLong { .. })));
        assert!(matches!(net.saliency(&[], 2), Err(ModelError::EmptySequence)));
    }

    #[test]
    fn no_targets_means_zero_gradient() {
        let net = Network::<f64>::new(tiny(), 12, 3).unwrap();
        let batch = Batch::from_sequences(&[vec![4], vec![5, UNK]]);
        let (loss, g) = net.loss_and_gradients(&batch).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dropout_is_reproducible() {
        let cfg = ModelConfig { dropout: 0.3, ..tiny() };
        let net = Network::<f32>::new(cfg, 12, 5).unwrap();
        let batch = Batch::from_sequences(&[vec![2, 3, 4, 5], vec![6, 7, 8]]);
        let (la, ga) = net.batch_gradients(&batch, Some(9)).unwrap();
        let (lb, gb) = net.batch_gradients(&batch, Some(9)).unwrap();
        assert_eq!(la, lb);
        assert_eq!(ga, gb);
        let (lc, _) = net.batch_gradients(&batch, Some(10)).unwrap();
        assert_ne!(la, lc);
    }
}
