//! Layers shared by the encoders and heads.

use crate::numerics::{NumericsError, ParamId, ParamStore, Rng, Tape, Var};

type Result<T> = std::result::Result<T, NumericsError>;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weight `[in, out]` uniform in `[-bound, bound]`, bias zero.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        bound: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight = store.add_uniform(format!("{name}.weight"), &[in_dim, out_dim], bound, rng)?;
        let bias = if bias { Some(store.add_zeros(format!("{name}.bias"), &[out_dim])?) } else { None };
        Ok(Self { weight, bias, in_dim, out_dim })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = self.bias.map(|b| tape.param(b));
        tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_ones(format!("{name}.gamma"), &[dim])?,
            beta: store.add_zeros(format!("{name}.beta"), &[dim])?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(self.gamma), tape.param(self.beta));
        tape.layer_norm(x, g, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_width: usize,
}

/// Pre-norm encoder block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    heads: usize,
}

impl EncoderBlock {
    fn new(store: &mut ParamStore, name: &str, cfg: &TransformerConfig, rng: &mut Rng) -> Result<Self> {
        let d = cfg.d_model;
        let bound = 1.0 / (d as f64).sqrt();
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d)?,
            query: Linear::new(store, &format!("{name}.attn.query"), d, d, true, bound, rng)?,
            key: Linear::new(store, &format!("{name}.attn.key"), d, d, true, bound, rng)?,
            value: Linear::new(store, &format!("{name}.attn.value"), d, d, true, bound, rng)?,
            out: Linear::new(store, &format!("{name}.attn.out"), d, d, true, bound, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d)?,
            ff1: Linear::new(store, &format!("{name}.ff1"), d, cfg.ffn_width, true, bound, rng)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), cfg.ffn_width, d, true, bound, rng)?,
            heads: cfg.heads,
        })
    }

    fn forward(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        segments: &[(usize, usize)],
        key_valid: Option<&[bool]>,
    ) -> Result<Var> {
        let h = self.norm1.forward(tape, x)?;
        let q = self.query.forward(tape, h)?;
        let k = self.key.forward(tape, h)?;
        let v = self.value.forward(tape, h)?;
        let a = tape.attention(q, k, v, segments, self.heads, key_valid)?;
        let a = self.out.forward(tape, a)?;
        let x = tape.add(x, a)?;
        let h = self.norm2.forward(tape, x)?;
        let h = self.ff1.forward(tape, h)?;
        let h = tape.relu(h);
        let h = self.ff2.forward(tape, h)?;
        tape.add(x, h)
    }
}

/// Bidirectional Transformer encoder over row segments (one segment per sequence).
#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    pub blocks: Vec<EncoderBlock>,
    pub config: TransformerConfig,
}

impl TransformerEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: TransformerConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.heads == 0 || cfg.d_model % cfg.heads != 0 {
            return Err(NumericsError::InvalidArgument {
                op: "transformer",
                reason: format!("d_model {} not divisible by {} heads", cfg.d_model, cfg.heads),
            });
        }
        let blocks = (0..cfg.layers)
            .map(|i| EncoderBlock::new(store, &format!("{name}.layers.{i}"), &cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self { blocks, config: cfg })
    }

    /// Encodes `x: [rows, d_model]`; keys with `key_valid == false` are never attended to.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        mut x: Var,
        segments: &[(usize, usize)],
        key_valid: Option<&[bool]>,
    ) -> Result<Var> {
        for block in &self.blocks {
            x = block.forward(tape, x, segments, key_valid)?;
        }
        Ok(x)
    }
}
