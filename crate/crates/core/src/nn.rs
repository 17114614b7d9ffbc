//! Transformer building blocks on top of the tape.

use crate::error::TensorError;
use crate::params::{BoundParams, ParamId, ParamSet};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Standard deviation of every normally initialized weight.
pub const INIT_STD: f64 = 0.02;
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Fully connected layer `y = x·Wᵀ + b` with `W: [out, in]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<S: Scalar>(params: &mut ParamSet<S>, name: &str, in_dim: usize, out_dim: usize, rng: &mut RngStream) -> Self {
        let weight = params.insert_normal(format!("{name}.weight"), &[out_dim, in_dim], INIT_STD, rng);
        let bias = params.insert_full(format!("{name}.bias"), &[out_dim], 0.0);
        Linear { weight, bias, in_dim, out_dim }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &BoundParams, x: Var) -> Result<Var, TensorError> {
        tape.linear(x, p.var(self.weight), Some(p.var(self.bias)))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(params: &mut ParamSet<S>, name: &str, width: usize) -> Self {
        let gain = params.insert_full(format!("{name}.gain"), &[width], 1.0);
        let bias = params.insert_full(format!("{name}.bias"), &[width], 0.0);
        LayerNorm { gain, bias }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &BoundParams, x: Var) -> Result<Var, TensorError> {
        tape.layer_norm(x, p.var(self.gain), p.var(self.bias), LAYER_NORM_EPS)
    }
}

/// Sinusoidal position table: `PE[pos, 2i] = sin(pos / 10000^(2i/d))`,
/// `PE[pos, 2i+1] = cos(...)`.
pub fn sinusoidal_pe<S: Scalar>(positions: usize, width: usize) -> Result<Tensor<S>, TensorError> {
    if width % 2 != 0 {
        return Err(TensorError::Invalid(format!("positional encoding width {width} must be even")));
    }
    let mut data = Vec::with_capacity(positions * width);
    for pos in 0..positions {
        for i in 0..width / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / width as f64);
            data.push(S::lit(angle.sin()));
            data.push(S::lit(angle.cos()));
        }
    }
    Tensor::new(vec![positions, width], data)
}

/// Multi-head self-attention. The per-head projections are the column
/// blocks of one `[d, d]` matrix each for queries, keys, and values.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<S: Scalar>(params: &mut ParamSet<S>, name: &str, width: usize, heads: usize, rng: &mut RngStream) -> Self {
        assert!(heads > 0 && width % heads == 0, "width {width} not divisible by {heads} heads");
        MultiHeadAttention {
            query: Linear::new(params, &format!("{name}.query"), width, width, rng),
            key: Linear::new(params, &format!("{name}.key"), width, width, rng),
            value: Linear::new(params, &format!("{name}.value"), width, width, rng),
            output: Linear::new(params, &format!("{name}.output"), width, width, rng),
            heads,
        }
    }

    /// `tokens: [batch, seq, d]` → `[batch, seq, d]`.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &BoundParams,
        tokens: Var,
        key_exclude: Option<&[bool]>,
    ) -> Result<Var, TensorError> {
        let q = self.query.forward(tape, p, tokens)?;
        let k = self.key.forward(tape, p, tokens)?;
        let v = self.value.forward(tape, p, tokens)?;
        let mixed = tape.attention(q, k, v, self.heads, key_exclude)?;
        self.output.forward(tape, p, mixed)
    }
}

/// Pre-norm transformer block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Debug, Clone, Copy)]
pub struct TransformerBlock {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub dropout: f64,
}

impl TransformerBlock {
    pub fn new<S: Scalar>(
        params: &mut ParamSet<S>,
        name: &str,
        width: usize,
        heads: usize,
        dropout: f64,
        rng: &mut RngStream,
    ) -> Self {
        TransformerBlock {
            norm_attn: LayerNorm::new(params, &format!("{name}.norm_attn"), width),
            attn: MultiHeadAttention::new(params, &format!("{name}.attn"), width, heads, rng),
            norm_ffn: LayerNorm::new(params, &format!("{name}.norm_ffn"), width),
            ffn_in: Linear::new(params, &format!("{name}.ffn_in"), width, 4 * width, rng),
            ffn_out: Linear::new(params, &format!("{name}.ffn_out"), 4 * width, width, rng),
            dropout,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &BoundParams,
        x: Var,
        key_exclude: Option<&[bool]>,
        rng: &mut RngStream,
        training: bool,
    ) -> Result<Var, TensorError> {
        let h = self.norm_attn.forward(tape, p, x)?;
        let h = self.attn.forward(tape, p, h, key_exclude)?;
        let h = tape.dropout(h, self.dropout, rng, training)?;
        let x = tape.add(x, h)?;
        let h = self.norm_ffn.forward(tape, p, x)?;
        let h = self.ffn_in.forward(tape, p, h)?;
        let h = tape.gelu(h)?;
        let h = self.ffn_out.forward(tape, p, h)?;
        let h = tape.dropout(h, self.dropout, rng, training)?;
        tape.add(x, h)
    }
}

/// Multi-layer perceptron with ReLU between layers and a linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<S: Scalar>(params: &mut ParamSet<S>, name: &str, widths: &[usize], rng: &mut RngStream) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(params, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &BoundParams, x: Var) -> Result<Var, TensorError> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, p, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}
