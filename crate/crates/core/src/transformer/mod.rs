//! Post-norm Transformer encoder and decoder stacks built on the tape.

mod config;

pub use config::TransformerConfig;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{AttnLayout, ParamId, ParamStore, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Dropout source for one forward pass; `None` means evaluation mode.
pub struct ForwardCtx {
    rng: Option<ChaCha8Rng>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx { rng: None }
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        ForwardCtx { rng: Some(rng) }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    fn dropout(&mut self, tape: &mut Tape, x: Var, p: f64) -> Var {
        match self.rng.as_mut() {
            Some(rng) if p > 0.0 => tape.dropout(x, p, rng),
            _ => x,
        }
    }

    fn attention(&mut self, tape: &mut Tape, q: Var, k: Var, v: Var, layout: AttnLayout, p: f64) -> Var {
        let drop = match self.rng.as_mut() {
            Some(rng) if p > 0.0 => Some((p, rng)),
            _ => None,
        };
        tape.attention(q, k, v, layout, drop)
    }
}

/// Right-padded id matrix, `rows x len`.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub rows: usize,
    pub len: usize,
    pub ids: Vec<u32>,
    pub lengths: Vec<usize>,
}

impl PaddedBatch {
    pub fn from_sequences(seqs: &[Vec<u32>], pad: u32) -> Self {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(pad, len - s.len()));
        }
        PaddedBatch { rows: seqs.len(), len, ids, lengths: seqs.iter().map(Vec::len).collect() }
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.ids[r * self.len..r * self.len + self.lengths[r]]
    }

    fn check(&self, vocab: usize, max_positions: usize) -> Result<()> {
        if self.len > max_positions {
            return Err(Error::contract(format!("sequence length {} exceeds max_positions {max_positions}", self.len)));
        }
        if let Some(&bad) = self.ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(Error::contract(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        Ok(())
    }
}

fn uniform_init(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Tensor::new(vec![fan_in, fan_out], uniform_init(rng, fan_in * fan_out, bound))?;
        Ok(Linear {
            weight: store.add(format!("{name}.weight"), w)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out]))?,
        })
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::new(vec![d], vec![1.0; d])?)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![d]))?,
        })
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    fn new(store: &mut ParamStore, name: &str, cfg: &TransformerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.d_model;
        Ok(MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.q"), d, d, rng)?,
            key: Linear::new(store, &format!("{name}.k"), d, d, rng)?,
            value: Linear::new(store, &format!("{name}.v"), d, d, rng)?,
            output: Linear::new(store, &format!("{name}.o"), d, d, rng)?,
            heads: cfg.num_heads,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(&self, tape: &mut Tape, ctx: &mut ForwardCtx, x: Var, memory: Var, mut layout: AttnLayout, attn_dropout: f64) -> Var {
        let q = self.query.forward(tape, x);
        let k = self.key.forward(tape, memory);
        let v = self.value.forward(tape, memory);
        layout.heads = self.heads;
        let a = ctx.attention(tape, q, k, v, layout, attn_dropout);
        self.output.forward(tape, a)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    fn new(store: &mut ParamStore, name: &str, cfg: &TransformerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(FeedForward {
            fc1: Linear::new(store, &format!("{name}.fc1"), cfg.d_model, cfg.ff_dim, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), cfg.ff_dim, cfg.d_model, rng)?,
        })
    }

    fn forward(&self, tape: &mut Tape, ctx: &mut ForwardCtx, x: Var, act_dropout: f64) -> Var {
        let h = self.fc1.forward(tape, x);
        let h = tape.relu(h);
        let h = ctx.dropout(tape, h, act_dropout);
        self.fc2.forward(tape, h)
    }
}

/// `vocab_size x d_model` lookup table; the padding row is held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub weight: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
    pub pad: u32,
}

impl EmbeddingTable {
    pub fn new(store: &mut ParamStore, name: &str, vocab_size: usize, dim: usize, pad: u32, rng: &mut ChaCha8Rng) -> Result<Self> {
        // uniform with std d^-1/2
        let bound = 3f64.sqrt() / (dim as f64).sqrt();
        let mut values = uniform_init(rng, vocab_size * dim, bound);
        let p = pad as usize;
        values[p * dim..(p + 1) * dim].iter_mut().for_each(|v| *v = 0.0);
        let weight = store.add(format!("{name}.weight"), Tensor::new(vec![vocab_size, dim], values)?)?;
        store.set_fixed_row(weight, Some(p));
        Ok(EmbeddingTable { weight, vocab_size, dim, pad })
    }

    /// Rows for `ids`, scaled by `sqrt(dim)`.
    pub fn lookup(&self, tape: &mut Tape, ids: &[u32]) -> Var {
        let t = tape.param(self.weight);
        tape.embed(t, ids, (self.dim as f64).sqrt())
    }

    /// Tied output projection `hidden x E^T`.
    pub fn project(&self, tape: &mut Tape, hidden: Var) -> Var {
        let t = tape.param(self.weight);
        tape.matmul_nt(hidden, t)
    }
}

/// Fixed sinusoidal position table, `max_positions x d_model`.
pub fn sinusoidal_table(max_positions: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; max_positions * d];
    for pos in 0..max_positions {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            out[pos * d + 2 * i] = (pos as f64 * freq).sin();
            out[pos * d + 2 * i + 1] = (pos as f64 * freq).cos();
        }
    }
    out
}

fn embed_with_positions(
    tape: &mut Tape,
    ctx: &mut ForwardCtx,
    emb: &EmbeddingTable,
    batch: &PaddedBatch,
    positions: &[f64],
    dropout: f64,
) -> Var {
    let d = emb.dim;
    let x = emb.lookup(tape, &batch.ids);
    let mut pe = Vec::with_capacity(batch.ids.len() * d);
    for _ in 0..batch.rows {
        pe.extend_from_slice(&positions[..batch.len * d]);
    }
    let x = tape.add_const(x, &pe);
    ctx.dropout(tape, x, dropout)
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub self_attn: MultiHeadAttention,
    pub attn_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct EncoderStack {
    pub layers: Vec<EncoderLayer>,
    config: TransformerConfig,
    positions: Vec<f64>,
    param_ids: Vec<ParamId>,
}

impl EncoderStack {
    pub fn new(store: &mut ParamStore, prefix: &str, config: &TransformerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let first = store.len();
        let mut layers = Vec::with_capacity(config.num_encoder_layers);
        for i in 0..config.num_encoder_layers {
            let name = format!("{prefix}.layers.{i}");
            layers.push(EncoderLayer {
                self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), config, rng)?,
                attn_norm: LayerNorm::new(store, &format!("{name}.self_attn_norm"), config.d_model)?,
                ffn: FeedForward::new(store, &format!("{name}.ffn"), config, rng)?,
                ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), config.d_model)?,
            });
        }
        let param_ids = store.ids().skip(first).collect();
        Ok(EncoderStack { layers, config: config.clone(), positions: sinusoidal_table(config.max_positions, config.d_model), param_ids })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    /// Replaces the dropout rates; the architecture is unchanged.
    pub fn set_dropout(&mut self, from: &TransformerConfig) {
        self.config.set_dropout(from);
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.param_ids
    }

    /// Encoder states `[rows * len, d_model]` on the tape.
    pub fn forward(&self, tape: &mut Tape, ctx: &mut ForwardCtx, emb: &EmbeddingTable, batch: &PaddedBatch) -> Var {
        let cfg = &self.config;
        let layout = AttnLayout {
            batch: batch.rows,
            q_len: batch.len,
            k_len: batch.len,
            key_lengths: batch.lengths.clone(),
            causal: false,
            heads: cfg.num_heads,
        };
        let mut x = embed_with_positions(tape, ctx, emb, batch, &self.positions, cfg.dropout);
        for layer in &self.layers {
            let a = layer.self_attn.forward(tape, ctx, x, x, layout.clone(), cfg.attention_dropout);
            let a = ctx.dropout(tape, a, cfg.dropout);
            let r = tape.add(x, a);
            x = layer.attn_norm.forward(tape, r);
            let f = layer.ffn.forward(tape, ctx, x, cfg.activation_dropout);
            let f = ctx.dropout(tape, f, cfg.dropout);
            let r = tape.add(x, f);
            x = layer.ffn_norm.forward(tape, r);
        }
        x
    }

    /// Evaluation-mode encoding with input validation.
    pub fn encode(&self, params: &ParamStore, emb: &EmbeddingTable, batch: &PaddedBatch) -> Result<Tensor> {
        batch.check(emb.vocab_size, self.config.max_positions)?;
        let mut tape = Tape::with_params(params);
        let out = self.forward(&mut tape, &mut ForwardCtx::eval(), emb, batch);
        tape.check_finite(out)?;
        Ok(tape.tensor(out))
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub self_attn_norm: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub cross_attn_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

/// Encoder output handed to a decoder, with its padding layout.
#[derive(Debug, Clone, Copy)]
pub struct Memory<'a> {
    pub states: Var,
    pub len: usize,
    pub lengths: &'a [usize],
}

#[derive(Debug, Clone)]
pub struct DecoderStack {
    pub layers: Vec<DecoderLayer>,
    config: TransformerConfig,
    positions: Vec<f64>,
    param_ids: Vec<ParamId>,
}

impl DecoderStack {
    pub fn new(store: &mut ParamStore, prefix: &str, config: &TransformerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let first = store.len();
        let mut layers = Vec::with_capacity(config.num_decoder_layers);
        for i in 0..config.num_decoder_layers {
            let name = format!("{prefix}.layers.{i}");
            layers.push(DecoderLayer {
                self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), config, rng)?,
                self_attn_norm: LayerNorm::new(store, &format!("{name}.self_attn_norm"), config.d_model)?,
                cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), config, rng)?,
                cross_attn_norm: LayerNorm::new(store, &format!("{name}.cross_attn_norm"), config.d_model)?,
                ffn: FeedForward::new(store, &format!("{name}.ffn"), config, rng)?,
                ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), config.d_model)?,
            });
        }
        let param_ids = store.ids().skip(first).collect();
        Ok(DecoderStack { layers, config: config.clone(), positions: sinusoidal_table(config.max_positions, config.d_model), param_ids })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    /// Replaces the dropout rates; the architecture is unchanged.
    pub fn set_dropout(&mut self, from: &TransformerConfig) {
        self.config.set_dropout(from);
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.param_ids
    }

    /// Decoder hidden states `[rows * len, d_model]` for teacher-forced inputs.
    pub fn forward(&self, tape: &mut Tape, ctx: &mut ForwardCtx, emb: &EmbeddingTable, memory: Memory<'_>, inputs: &PaddedBatch) -> Var {
        let cfg = &self.config;
        let self_layout = AttnLayout {
            batch: inputs.rows,
            q_len: inputs.len,
            k_len: inputs.len,
            key_lengths: inputs.lengths.clone(),
            causal: true,
            heads: cfg.num_heads,
        };
        let cross_layout = AttnLayout {
            batch: inputs.rows,
            q_len: inputs.len,
            k_len: memory.len,
            key_lengths: memory.lengths.to_vec(),
            causal: false,
            heads: cfg.num_heads,
        };
        let mut x = embed_with_positions(tape, ctx, emb, inputs, &self.positions, cfg.dropout);
        for layer in &self.layers {
            let a = layer.self_attn.forward(tape, ctx, x, x, self_layout.clone(), cfg.attention_dropout);
            let a = ctx.dropout(tape, a, cfg.dropout);
            let r = tape.add(x, a);
            x = layer.self_attn_norm.forward(tape, r);
            let c = layer.cross_attn.forward(tape, ctx, x, memory.states, cross_layout.clone(), cfg.attention_dropout);
            let c = ctx.dropout(tape, c, cfg.dropout);
            let r = tape.add(x, c);
            x = layer.cross_attn_norm.forward(tape, r);
            let f = layer.ffn.forward(tape, ctx, x, cfg.activation_dropout);
            let f = ctx.dropout(tape, f, cfg.dropout);
            let r = tape.add(x, f);
            x = layer.ffn_norm.forward(tape, r);
        }
        x
    }

    /// Next-token logits for each prefix (all prefixes the same length),
    /// given encoder states `[rows * src_len, d_model]` with one memory row per prefix.
    pub fn next_token_logits(
        &self,
        params: &ParamStore,
        emb: &EmbeddingTable,
        memory: &Tensor,
        memory_lengths: &[usize],
        prefixes: &[Vec<u32>],
    ) -> Result<Vec<Vec<f64>>> {
        if prefixes.is_empty() || prefixes.iter().any(Vec::is_empty) {
            return Err(Error::contract("decoder prefixes must be non-empty"));
        }
        let batch = PaddedBatch::from_sequences(prefixes, emb.pad);
        if batch.lengths.iter().any(|&l| l != batch.len) {
            return Err(Error::contract("decoder prefixes must share one length"));
        }
        batch.check(emb.vocab_size, self.config.max_positions)?;
        if memory_lengths.len() != prefixes.len() || !memory.rows().is_multiple_of(prefixes.len()) {
            return Err(Error::contract("memory rows do not match the prefix count"));
        }
        let mut tape = Tape::with_params(params);
        let mem = tape.constant(memory.shape().to_vec(), memory.values().to_vec());
        let src_len = memory.rows() / prefixes.len();
        let hidden =
            self.forward(&mut tape, &mut ForwardCtx::eval(), emb, Memory { states: mem, len: src_len, lengths: memory_lengths }, &batch);
        // only the last position of each prefix is needed
        let d = self.config.d_model;
        let hv = tape.value(hidden);
        let mut last = Vec::with_capacity(prefixes.len() * d);
        for r in 0..batch.rows {
            let p = (r * batch.len + batch.len - 1) * d;
            last.extend_from_slice(&hv[p..p + d]);
        }
        let last = tape.constant(vec![batch.rows, d], last);
        let logits = emb.project(&mut tape, last);
        tape.check_finite(logits)?;
        Ok(tape.value(logits).chunks(emb.vocab_size).map(<[f64]>::to_vec).collect())
    }

    /// Logits for the token following `prefix` (single sentence).
    pub fn decode_step(&self, params: &ParamStore, emb: &EmbeddingTable, encoder_states: &Tensor, prefix: &[u32]) -> Result<Vec<f64>> {
        let len = encoder_states.rows();
        Ok(self.next_token_logits(params, emb, encoder_states, &[len], &[prefix.to_vec()])?.remove(0))
    }
}
