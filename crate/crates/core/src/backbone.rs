//! Frozen transformer encoder with key/value prefixes, and the growing
//! linear classifier on its class token.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Array, Gradients, Precision, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    /// Sequence length including the class token.
    pub tokens: usize,
    pub mlp_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 5,
            dim: 32,
            heads: 4,
            tokens: 17,
            mlp_dim: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(Error::invalid("EncoderConfig", reason));
        if self.layers == 0 {
            return fail("at least one layer is required".into());
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return fail(format!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        if self.tokens < 2 {
            return fail(format!("need a class token plus content tokens, got {} tokens", self.tokens));
        }
        if self.mlp_dim == 0 {
            return fail("mlp_dim must be positive".into());
        }
        Ok(())
    }

    /// Content tokens per input (everything but the class token).
    pub fn patches(&self) -> usize {
        self.tokens - 1
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Weights of one pre-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub ln1_gamma: Array,
    pub ln1_beta: Array,
    pub wq: Array,
    pub bq: Array,
    pub wk: Array,
    pub bk: Array,
    pub wv: Array,
    pub bv: Array,
    pub wo: Array,
    pub bo: Array,
    pub ln2_gamma: Array,
    pub ln2_beta: Array,
    pub w1: Array,
    pub b1: Array,
    pub w2: Array,
    pub b2: Array,
}

impl EncoderBlock {
    fn random(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.dim;
        let h = cfg.mlp_dim;
        let w = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| Array::normal(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng);
        let b = |n: usize, rng: &mut ChaCha8Rng| Array::normal(&[n], 0.02, rng);
        EncoderBlock {
            ln1_gamma: Array::ones(&[d]),
            ln1_beta: Array::zeros(&[d]),
            wq: w(d, d, rng),
            bq: b(d, rng),
            wk: w(d, d, rng),
            bk: b(d, rng),
            wv: w(d, d, rng),
            bv: b(d, rng),
            wo: w(d, d, rng),
            bo: b(d, rng),
            ln2_gamma: Array::ones(&[d]),
            ln2_beta: Array::zeros(&[d]),
            w1: w(d, h, rng),
            b1: b(h, rng),
            w2: w(h, d, rng),
            b2: b(d, rng),
        }
    }

    fn arrays(&self) -> [&Array; 16] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn from_arrays(mut it: impl Iterator<Item = Array>) -> Option<Self> {
        Some(EncoderBlock {
            ln1_gamma: it.next()?,
            ln1_beta: it.next()?,
            wq: it.next()?,
            bq: it.next()?,
            wk: it.next()?,
            bk: it.next()?,
            wv: it.next()?,
            bv: it.next()?,
            wo: it.next()?,
            bo: it.next()?,
            ln2_gamma: it.next()?,
            ln2_beta: it.next()?,
            w1: it.next()?,
            b1: it.next()?,
            w2: it.next()?,
            b2: it.next()?,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundBlock {
        let [ln1_gamma, ln1_beta, wq, bq, wk, bk, wv, bv, wo, bo, ln2_gamma, ln2_beta, w1, b1, w2, b2] =
            self.arrays().map(|a| tape.constant(a.clone()));
        BoundBlock {
            ln1_gamma,
            ln1_beta,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln2_gamma,
            ln2_beta,
            w1,
            b1,
            w2,
            b2,
        }
    }
}

/// Block weights registered on a tape as constants.
#[derive(Clone, Copy, Debug)]
pub struct BoundBlock {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// A prompt split for prefix tuning: the first half of the rows is prepended
/// to the attention keys, the second half to the values.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixPair {
    pub key: Array,
    pub value: Array,
}

impl PrefixPair {
    pub fn new(key: Array, value: Array) -> Result<Self> {
        if key.ndim() != 2 || key.shape() != value.shape() {
            return Err(Error::shape("PrefixPair", key.shape(), value.shape()));
        }
        Ok(PrefixPair { key, value })
    }

    /// Splits an `L_p × D` prompt into its key and value halves.
    pub fn split(prompt: &Array) -> Result<Self> {
        if prompt.ndim() != 2 || prompt.shape()[0] % 2 != 0 {
            return Err(Error::invalid(
                "PrefixPair::split",
                format!("prompt must be 2-D with an even number of rows, got {:?}", prompt.shape()),
            ));
        }
        let half = prompt.shape()[0] / 2;
        Ok(PrefixPair {
            key: prompt.slice_leading(0, half),
            value: prompt.slice_leading(half, 2 * half),
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> PrefixVars {
        PrefixVars {
            key: tape.constant(self.key.clone()),
            value: tape.constant(self.value.clone()),
        }
    }

    /// Number of prefix rows per half.
    pub fn len(&self) -> usize {
        self.key.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Prefix halves on a tape, shaped `[P, D]` (shared by the batch) or
/// `[B, P, D]` (one prefix per sample).
#[derive(Clone, Copy, Debug)]
pub struct PrefixVars {
    pub key: Var,
    pub value: Var,
}

impl PrefixVars {
    /// Splits a tape prompt (`[L_p, D]` or `[B, L_p, D]`) into halves.
    pub fn split(tape: &mut Tape, prompt: Var) -> Result<Self> {
        let shape = tape.shape(prompt).to_vec();
        let axis = shape.len().checked_sub(2).ok_or_else(|| Error::invalid("PrefixVars::split", "prompt must be at least 2-D"))?;
        let rows = shape[axis];
        if rows % 2 != 0 {
            return Err(Error::invalid("PrefixVars::split", format!("odd prompt length {rows}")));
        }
        Ok(PrefixVars {
            key: tape.slice(prompt, axis, 0..rows / 2)?,
            value: tape.slice(prompt, axis, rows / 2..rows)?,
        })
    }
}

fn prefix_for_batch(tape: &mut Tape, prefix: Var, batch: usize, dim: usize) -> Result<Var> {
    let shape = tape.shape(prefix).to_vec();
    match shape.as_slice() {
        [_, d] if *d == dim => tape.broadcast_leading(prefix, batch),
        [b, _, d] if *b == batch && *d == dim => Ok(prefix),
        _ => Err(Error::shape("prefix_attention", &[batch, 0, dim], &shape)),
    }
}

/// Multi-head self-attention whose keys and values are extended by a prefix.
///
/// `x` is the already normalized `[B, T, D]` input. Queries come only from
/// `x`; keys are `[p_K; x W_K]` and values `[p_V; x W_V]`. Returns the
/// projected output `[B, T, D]` and the attention weights `[B, H, T, P + T]`.
pub fn prefix_attention(
    tape: &mut Tape,
    x: Var,
    block: &BoundBlock,
    heads: usize,
    prefix: Option<&PrefixVars>,
) -> Result<(Var, Var)> {
    let shape = tape.shape(x).to_vec();
    let [batch, tokens, dim] = shape[..] else {
        return Err(Error::invalid("prefix_attention", format!("expected [B, T, D] input, got {shape:?}")));
    };
    if heads == 0 || dim % heads != 0 {
        return Err(Error::invalid("prefix_attention", format!("dim {dim} not divisible by {heads} heads")));
    }
    let head_dim = dim / heads;

    let q = tape.matmul(x, block.wq)?;
    let q = tape.add(q, block.bq)?;
    let k = tape.matmul(x, block.wk)?;
    let k = tape.add(k, block.bk)?;
    let v = tape.matmul(x, block.wv)?;
    let v = tape.add(v, block.bv)?;

    let (k, v, kv_len) = match prefix {
        None => (k, v, tokens),
        Some(p) => {
            let pk = prefix_for_batch(tape, p.key, batch, dim)?;
            let pv = prefix_for_batch(tape, p.value, batch, dim)?;
            if tape.shape(pk) != tape.shape(pv) {
                return Err(Error::shape("prefix_attention", tape.shape(pk), tape.shape(pv)));
            }
            let plen = tape.shape(pk)[1];
            (tape.concat(&[pk, k], 1)?, tape.concat(&[pv, v], 1)?, plen + tokens)
        }
    };

    let split_heads = |tape: &mut Tape, t: Var, len: usize| -> Result<Var> {
        let r = tape.reshape(t, &[batch, len, heads, head_dim])?;
        tape.transpose(r, &[0, 2, 1, 3])
    };
    let qh = split_heads(tape, q, tokens)?;
    let kh = split_heads(tape, k, kv_len)?;
    let vh = split_heads(tape, v, kv_len)?;

    let kt = tape.transpose_last(kh)?;
    let scores = tape.matmul(qh, kt)?;
    let scores = tape.scale(scores, 1.0 / (head_dim as f64).sqrt());
    let attn = tape.softmax(scores, 3)?;
    let ctx = tape.matmul(attn, vh)?;
    let ctx = tape.transpose(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[batch, tokens, dim])?;
    let out = tape.matmul(ctx, block.wo)?;
    let out = tape.add(out, block.bo)?;
    Ok((out, attn))
}

/// Randomly initialized, then frozen, pre-norm transformer encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    pub cls_token: Array,
    pub pos_embed: Array,
    pub blocks: Vec<EncoderBlock>,
    pub final_gamma: Array,
    pub final_beta: Array,
}

/// Encoder weights registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundEncoder {
    cls_token: Var,
    pos_embed: Var,
    blocks: Vec<BoundBlock>,
    final_gamma: Var,
    final_beta: Var,
}

impl Encoder {
    pub fn random(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let cls_token = Array::normal(&[1, d], 1.0, &mut rng);
        let pos_embed = Array::normal(&[config.tokens, d], 0.1, &mut rng);
        let blocks = (0..config.layers).map(|_| EncoderBlock::random(&config, &mut rng)).collect();
        Ok(Encoder {
            config,
            cls_token,
            pos_embed,
            blocks,
            final_gamma: Array::ones(&[d]),
            final_beta: Array::zeros(&[d]),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// All weights in a fixed order (used for snapshots and accounting).
    pub fn arrays(&self) -> Vec<&Array> {
        let mut out = vec![&self.cls_token, &self.pos_embed];
        for b in &self.blocks {
            out.extend(b.arrays());
        }
        out.push(&self.final_gamma);
        out.push(&self.final_beta);
        out
    }

    /// Inverse of [`Encoder::arrays`].
    pub fn from_arrays(config: EncoderConfig, arrays: Vec<Array>) -> Result<Self> {
        config.validate()?;
        let expected = 4 + 16 * config.layers;
        if arrays.len() != expected {
            return Err(Error::invalid(
                "Encoder::from_arrays",
                format!("expected {expected} arrays, got {}", arrays.len()),
            ));
        }
        let mut it = arrays.into_iter();
        let cls_token = it.next().unwrap();
        let pos_embed = it.next().unwrap();
        let blocks = (0..config.layers)
            .map(|_| EncoderBlock::from_arrays(it.by_ref()).unwrap())
            .collect();
        let encoder = Encoder {
            config,
            cls_token,
            pos_embed,
            blocks,
            final_gamma: it.next().unwrap(),
            final_beta: it.next().unwrap(),
        };
        let reference = Encoder::random(config, 0)?;
        for (a, b) in encoder.arrays().iter().zip(reference.arrays()) {
            if a.shape() != b.shape() {
                return Err(Error::shape("Encoder::from_arrays", b.shape(), a.shape()));
            }
        }
        Ok(encoder)
    }

    pub fn parameter_count(&self) -> usize {
        self.arrays().iter().map(|a| a.len()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundEncoder {
        BoundEncoder {
            cls_token: tape.constant(self.cls_token.clone()),
            pos_embed: tape.constant(self.pos_embed.clone()),
            blocks: self.blocks.iter().map(|b| b.bind(tape)).collect(),
            final_gamma: tape.constant(self.final_gamma.clone()),
            final_beta: tape.constant(self.final_beta.clone()),
        }
    }

    /// Class-token features `[B, D]` for inputs `x` (`[B, patches, D]`), with
    /// an optional prefix per layer.
    pub fn features(
        &self,
        tape: &mut Tape,
        bound: &BoundEncoder,
        x: Var,
        prompts: &[Option<PrefixVars>],
    ) -> Result<Var> {
        let cfg = &self.config;
        if prompts.len() != cfg.layers {
            return Err(Error::invalid(
                "Encoder::features",
                format!("expected {} per-layer prompt slots, got {}", cfg.layers, prompts.len()),
            ));
        }
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != cfg.patches() || shape[2] != cfg.dim {
            return Err(Error::shape("Encoder::features", &[0, cfg.patches(), cfg.dim], &shape));
        }
        let batch = shape[0];
        let cls = tape.broadcast_leading(bound.cls_token, batch)?;
        let mut h = tape.concat(&[cls, x], 1)?;
        h = tape.add(h, bound.pos_embed)?;
        for (block, prompt) in bound.blocks.iter().zip(prompts) {
            let n = tape.layer_norm(h, block.ln1_gamma, block.ln1_beta)?;
            let (attn, _) = prefix_attention(tape, n, block, cfg.heads, prompt.as_ref())?;
            h = tape.add(h, attn)?;
            let n = tape.layer_norm(h, block.ln2_gamma, block.ln2_beta)?;
            let m = tape.matmul(n, block.w1)?;
            let m = tape.add(m, block.b1)?;
            let m = tape.gelu(m);
            let m = tape.matmul(m, block.w2)?;
            let m = tape.add(m, block.b2)?;
            h = tape.add(h, m)?;
        }
        let h = tape.layer_norm(h, bound.final_gamma, bound.final_beta)?;
        let cls = tape.slice(h, 1, 0..1)?;
        tape.reshape(cls, &[batch, cfg.dim])
    }

    /// Logits over every class the classifier currently holds.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundEncoder,
        x: Var,
        prompts: &[Option<PrefixVars>],
        classifier: &BoundClassifier,
    ) -> Result<Var> {
        let feats = self.features(tape, bound, x, prompts)?;
        classifier.logits(tape, feats)
    }

    /// The query function: prompt-free class-token features of `x`
    /// (`[B, patches, D]`), returned as `[B, D]`.
    pub fn query_features(&self, x: &Array, precision: Precision) -> Result<Array> {
        let mut tape = Tape::new(precision);
        let bound = self.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let none = vec![None; self.config.layers];
        let f = self.features(&mut tape, &bound, xv, &none)?;
        Ok(tape.value(f).clone())
    }
}

/// Linear classification head that grows by appending class rows. Rows of
/// completed tasks are frozen and never change again.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    frozen: usize,
}

/// Classifier registered on a tape: frozen rows as constants, open rows as
/// parameters.
#[derive(Clone, Copy, Debug)]
pub struct BoundClassifier {
    weight_t: Var,
    bias: Var,
    open_weights: Option<Var>,
    open_bias: Option<Var>,
}

impl BoundClassifier {
    pub fn logits(&self, tape: &mut Tape, feats: Var) -> Result<Var> {
        let z = tape.matmul(feats, self.weight_t)?;
        tape.add(z, self.bias)
    }

    /// Vars of the trainable rows, if any.
    pub fn open_params(&self) -> Option<(Var, Var)> {
        self.open_weights.zip(self.open_bias)
    }
}

impl Classifier {
    pub fn new(dim: usize) -> Self {
        Classifier {
            dim,
            weights: Vec::new(),
            bias: Vec::new(),
            frozen: 0,
        }
    }

    pub fn class_count(&self) -> usize {
        self.bias.len()
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Appends `n` zero-initialized class rows.
    pub fn grow(&mut self, n: usize) {
        self.weights.extend(std::iter::repeat_n(0.0, n * self.dim));
        self.bias.extend(std::iter::repeat_n(0.0, n));
    }

    /// Freezes every current row.
    pub fn freeze_all(&mut self) {
        self.frozen = self.class_count();
    }

    pub fn row(&self, class: usize) -> (&[f64], f64) {
        (&self.weights[class * self.dim..(class + 1) * self.dim], self.bias[class])
    }

    /// Copy of rows `range` for immutability checks.
    pub fn rows_snapshot(&self, range: std::ops::Range<usize>) -> (Vec<f64>, Vec<f64>) {
        (
            self.weights[range.start * self.dim..range.end * self.dim].to_vec(),
            self.bias[range].to_vec(),
        )
    }

    pub fn open_parameter_count(&self) -> usize {
        (self.class_count() - self.frozen) * (self.dim + 1)
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundClassifier> {
        self.bind_with(tape, None)
    }

    /// Like [`Classifier::bind`], but the open rows are the given tape vars.
    pub fn bind_open(&self, tape: &mut Tape, weights: Var, bias: Var) -> Result<BoundClassifier> {
        let open = self.class_count() - self.frozen;
        if tape.shape(weights) != [open, self.dim] || tape.shape(bias) != [open] {
            return Err(Error::shape("Classifier::bind_open", &[open, self.dim], tape.shape(weights)));
        }
        self.bind_with(tape, Some((weights, bias)))
    }

    fn bind_with(&self, tape: &mut Tape, open: Option<(Var, Var)>) -> Result<BoundClassifier> {
        let c = self.class_count();
        if c == 0 {
            return Err(Error::invalid("Classifier::bind", "classifier has no classes"));
        }
        let d = self.dim;
        let f = self.frozen;
        let mut w_parts = Vec::new();
        let mut b_parts = Vec::new();
        if f > 0 {
            w_parts.push(tape.constant(Array::from_parts(vec![f, d], self.weights[..f * d].to_vec())));
            b_parts.push(tape.constant(Array::from_parts(vec![f], self.bias[..f].to_vec())));
        }
        let (open_weights, open_bias) = if let Some((w, b)) = open {
            w_parts.push(w);
            b_parts.push(b);
            (Some(w), Some(b))
        } else if c > f {
            let w = tape.param(
                "classifier.weights",
                Array::from_parts(vec![c - f, d], self.weights[f * d..].to_vec()),
            );
            let b = tape.param("classifier.bias", Array::from_parts(vec![c - f], self.bias[f..].to_vec()));
            w_parts.push(w);
            b_parts.push(b);
            (Some(w), Some(b))
        } else {
            (None, None)
        };
        let w = tape.concat(&w_parts, 0)?;
        let weight_t = tape.transpose_last(w)?;
        let bias = tape.concat(&b_parts, 0)?;
        Ok(BoundClassifier {
            weight_t,
            bias,
            open_weights,
            open_bias,
        })
    }

    /// SGD on the open rows only.
    pub fn apply_gradients(&mut self, bound: &BoundClassifier, grads: &Gradients, rate: f64) {
        let Some((w, b)) = bound.open_params() else { return };
        let f = self.frozen;
        let d = self.dim;
        for (p, g) in self.weights[f * d..].iter_mut().zip(grads.wrt(w).data()) {
            *p -= rate * g;
        }
        for (p, g) in self.bias[f..].iter_mut().zip(grads.wrt(b).data()) {
            *p -= rate * g;
        }
    }

    /// Replaces the open rows with explicit values (used by gradient checks).
    pub fn set_open_rows(&mut self, weights: &Array, bias: &Array) -> Result<()> {
        let open = self.class_count() - self.frozen;
        if weights.shape() != [open, self.dim] || bias.shape() != [open] {
            return Err(Error::shape("Classifier::set_open_rows", &[open, self.dim], weights.shape()));
        }
        let f = self.frozen;
        self.weights[f * self.dim..].copy_from_slice(weights.data());
        self.bias[f..].copy_from_slice(bias.data());
        Ok(())
    }
}
