//! Masked transformer decoder over layout token sequences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use slyt_tensor::{AttentionShape, Float, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::layout::{TokenSequence, Vocab};

pub const INIT_STD: f64 = 0.02;
pub const LAYER_NORM_EPS: f64 = 1e-5;

const LAYER_PARAMS: [&str; 16] = [
    "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo", "ln1.gain",
    "ln1.bias", "ff.w1", "ff.b1", "ff.w2", "ff.b2", "ln2.gain", "ln2.bias",
];

/// Hyperparameters of the decoder and of its token vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_categories: usize,
    pub bits: u32,
    pub max_elements: usize,
    pub d: usize,
    pub n_layer: usize,
    pub n_head: usize,
    pub d_ff: usize,
    pub dropout: f64,
    /// Reuse the token embedding table as the output projection.
    pub tie_embeddings: bool,
    /// Width of the continuous-attribute head (0 disables it).
    pub n_continuous: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_categories: 5,
            bits: 8,
            max_elements: 128,
            d: 512,
            n_layer: 6,
            n_head: 8,
            d_ff: 2048,
            dropout: 0.1,
            tie_embeddings: false,
            n_continuous: 0,
        }
    }
}

impl ModelConfig {
    pub fn vocab(&self) -> Vocab {
        Vocab {
            bits: self.bits,
            num_categories: self.num_categories,
            max_elements: self.max_elements,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab().size()
    }

    pub fn max_seq_len(&self) -> usize {
        self.vocab().max_seq_len()
    }

    pub fn validate(&self) -> Result<()> {
        Vocab::with_max_elements(self.num_categories, self.bits, self.max_elements)?;
        if self.d == 0 || self.n_layer == 0 || self.n_head == 0 || self.d_ff == 0 {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        if !self.d.is_multiple_of(self.n_head) {
            return Err(Error::InvalidConfig(format!(
                "d = {} is not divisible by n_head = {}",
                self.d, self.n_head
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, f) = (self.vocab_size(), self.d, self.d_ff);
        let mut out = vec![
            ("tok_emb".to_string(), vec![v, d]),
            ("pos_emb".to_string(), vec![self.max_seq_len(), d]),
        ];
        for l in 0..self.n_layer {
            let shapes: [Vec<usize>; 16] = [
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d],
                vec![d, f],
                vec![f],
                vec![f, d],
                vec![d],
                vec![d],
                vec![d],
            ];
            for (name, shape) in LAYER_PARAMS.iter().zip(shapes) {
                out.push((format!("layers.{l}.{name}"), shape));
            }
        }
        out.push(("ln_f.gain".into(), vec![d]));
        out.push(("ln_f.bias".into(), vec![d]));
        if !self.tie_embeddings {
            out.push(("head.w".into(), vec![d, v]));
        }
        out.push(("head.b".into(), vec![v]));
        if self.n_continuous > 0 {
            out.push(("cont.w".into(), vec![d, self.n_continuous]));
            out.push(("cont.b".into(), vec![self.n_continuous]));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// A padded batch of token sequences stored row-major as `[batch, seq_len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub tokens: Vec<u32>,
    pub batch: usize,
    pub seq_len: usize,
}

impl TokenBatch {
    /// Pads every sequence to the longest one.
    pub fn from_sequences(seqs: &[TokenSequence]) -> Result<Self> {
        let seq_len = seqs.iter().map(TokenSequence::len).max().ok_or(Error::EmptyBatch)?;
        if seq_len == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut tokens = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            tokens.extend(s.padded(seq_len).tokens);
        }
        Ok(Self {
            tokens,
            batch: seqs.len(),
            seq_len,
        })
    }

    pub fn single(tokens: &[u32]) -> Self {
        Self {
            tokens: tokens.to_vec(),
            batch: 1,
            seq_len: tokens.len(),
        }
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.tokens[b * self.seq_len..(b + 1) * self.seq_len]
    }
}

/// Lower-triangular allow matrix: row `i` may attend to columns `<= i`.
pub fn causal_mask(len: usize) -> Vec<bool> {
    (0..len * len).map(|k| k % len <= k / len).collect()
}

/// Causal mask combined with key padding, `[batch, seq_len, seq_len]`.
pub fn attention_allow(batch: &TokenBatch) -> Vec<bool> {
    let t = batch.seq_len;
    let causal = causal_mask(t);
    let mut allow = Vec::with_capacity(batch.batch * t * t);
    for b in 0..batch.batch {
        let row = batch.row(b);
        allow.extend(causal.iter().enumerate().map(|(k, &c)| c && row[k % t] != Vocab::PAD));
    }
    allow
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Training mode; dropout masks derive from `seed`.
    Train { seed: u64 },
}

/// Handles to the values recorded by [`Model::forward`].
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// One per parameter tensor, in storage order.
    pub params: Vec<Var>,
    /// `[batch * seq_len, V]`; row `j` scores the token at `j + 1`.
    pub logits: Var,
    /// Final hidden states `[batch * seq_len, d]`.
    pub hidden: Var,
    /// Continuous-attribute predictions `[batch * seq_len, n_continuous]`.
    pub continuous: Option<Var>,
    /// Attention outputs per layer; probabilities via [`Tape::attention_probs`].
    pub attention: Vec<Var>,
}

/// Decoder parameters together with their configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Float = f32> {
    pub config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

fn layer_seed(seed: u64, layer: usize) -> u64 {
    seed ^ (layer as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl<T: Float> Model<T> {
    /// Normal(0, 0.02) weights, zero biases, unit layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let (names, params) = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".gain") {
                    Tensor::ones(&shape)
                } else if shape.len() == 1 {
                    Tensor::zeros(&shape)
                } else {
                    Tensor::from_fn(&shape, |_| T::of(normal.sample(&mut rng)))
                };
                (name, t)
            })
            .unzip();
        Ok(Self {
            config,
            names,
            params,
        })
    }

    /// Builds a model from named tensors, checking names and shapes.
    pub fn from_params(config: ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != named.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                named.len()
            )));
        }
        for ((en, es), (n, t)) in expected.iter().zip(&named) {
            if en != n || es.as_slice() != t.shape() {
                return Err(Error::InvalidConfig(format!(
                    "parameter {n} {:?} does not match expected {en} {es:?}",
                    t.shape()
                )));
            }
        }
        let (names, params) = named.into_iter().unzip();
        Ok(Self {
            config,
            names,
            params,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    pub fn vocab(&self) -> Vocab {
        self.config.vocab()
    }

    pub fn cast<U: Float>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(Tensor::all_finite)
    }

    /// Zeroes the output projection so that every position predicts the
    /// uniform distribution over the vocabulary.
    pub fn zero_output_head(&mut self) {
        let target = if self.config.tie_embeddings { "tok_emb" } else { "head.w" };
        for name in [target, "head.b"] {
            if let Some(p) = self.param_mut(name) {
                p.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    fn check_tokens(&self, batch: &TokenBatch) -> Result<()> {
        let v = self.config.vocab_size();
        if batch.batch == 0 || batch.seq_len == 0 || batch.tokens.len() != batch.batch * batch.seq_len {
            return Err(Error::EmptyBatch);
        }
        if batch.seq_len > self.config.max_seq_len() {
            return Err(Error::SequenceTooLong {
                len: batch.seq_len,
                max: self.config.max_seq_len(),
            });
        }
        if let Some(&t) = batch.tokens.iter().find(|&&t| t as usize >= v) {
            return Err(Error::Vocab(format!("token {t} outside vocabulary of size {v}")));
        }
        Ok(())
    }

    /// Records the decoder's forward pass on `tape`.
    ///
    /// With `trainable` set, parameters are registered as gradient-requiring
    /// leaves whose handles are returned in [`ForwardVars::params`].
    pub fn forward<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        batch: &TokenBatch,
        mode: Mode,
        trainable: bool,
    ) -> Result<ForwardVars> {
        self.check_tokens(batch)?;
        let c = &self.config;
        let p: Vec<Var> = self.params.iter().map(|t| tape.borrowed(t, trainable)).collect();
        let (b, t) = (batch.batch, batch.seq_len);
        let ids: Vec<usize> = batch.tokens.iter().map(|&x| x as usize).collect();
        let positions: Vec<usize> = (0..b * t).map(|i| i % t).collect();
        let tok = tape.embedding(p[0], &ids)?;
        let pos = tape.embedding(p[1], &positions)?;
        let mut x = tape.add(tok, pos)?;
        let allow = attention_allow(batch);
        let shape = AttentionShape {
            batch: b,
            seq_len: t,
            n_head: c.n_head,
        };
        let mut attention = Vec::with_capacity(c.n_layer);
        for l in 0..c.n_layer {
            let w = &p[2 + l * LAYER_PARAMS.len()..2 + (l + 1) * LAYER_PARAMS.len()];
            let q = self.linear(tape, x, w[0], w[1])?;
            let k = self.linear(tape, x, w[2], w[3])?;
            let v = self.linear(tape, x, w[4], w[5])?;
            let a = tape.attention(q, k, v, shape, &allow)?;
            attention.push(a);
            let o = self.linear(tape, a, w[6], w[7])?;
            let res = tape.add(x, o)?;
            let h = tape.layer_norm(res, w[8], w[9], LAYER_NORM_EPS)?;
            let f = self.linear(tape, h, w[10], w[11])?;
            let f = tape.relu(f);
            let f = self.linear(tape, f, w[12], w[13])?;
            let f = match mode {
                Mode::Train { seed } => tape.dropout(f, c.dropout, layer_seed(seed, l), true)?,
                Mode::Eval => f,
            };
            let res = tape.add(h, f)?;
            x = tape.layer_norm(res, w[14], w[15], LAYER_NORM_EPS)?;
        }
        let mut next = 2 + c.n_layer * LAYER_PARAMS.len();
        let hidden = tape.layer_norm(x, p[next], p[next + 1], LAYER_NORM_EPS)?;
        next += 2;
        let logits = if c.tie_embeddings {
            tape.matmul_t(hidden, p[0])?
        } else {
            next += 1;
            tape.matmul(hidden, p[next - 1])?
        };
        let logits = tape.add(logits, p[next])?;
        next += 1;
        let continuous = if c.n_continuous > 0 {
            Some(self.linear(tape, hidden, p[next], p[next + 1])?)
        } else {
            None
        };
        Ok(ForwardVars {
            params: p,
            logits,
            hidden,
            continuous,
            attention,
        })
    }

    fn linear(&self, tape: &mut Tape<'_, T>, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = tape.matmul(x, w)?;
        Ok(tape.add(y, b)?)
    }

    /// Inference logits `[batch * seq_len, V]`.
    pub fn logits(&self, batch: &TokenBatch) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch, Mode::Eval, false)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Inference logits together with per-layer attention probabilities,
    /// each `[batch, n_head, seq_len, seq_len]`.
    pub fn logits_and_attention(&self, batch: &TokenBatch) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch, Mode::Eval, false)?;
        let (b, t, h) = (batch.batch, batch.seq_len, self.config.n_head);
        let maps = out
            .attention
            .iter()
            .map(|&a| {
                let (_, probs) = tape.attention_probs(a).expect("attention node");
                Tensor::new(vec![b, h, t, t], probs.to_vec())
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok((tape.value(out.logits).clone(), maps))
    }
}
