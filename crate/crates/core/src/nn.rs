//! Neural building blocks recorded on a [`Tape`]: linear, layer norm,
//! multi-head attention, feed-forward, sinusoidal positions and a pre-norm
//! transformer encoder layer.
//!
//! Blocks only hold [`ParamId`]s; the tensors live in a [`ParamStore`] that
//! the tape borrows during forward.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{DatError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Train/eval switch plus the RNG that drives dropout masks.
pub struct RunMode {
    train: bool,
    rng: ChaCha8Rng,
}

impl RunMode {
    pub fn eval() -> Self {
        RunMode {
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(seed: u64) -> Self {
        RunMode {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn rng(&mut self) -> &mut dyn RngCore {
        &mut self.rng
    }

    pub fn dropout(&mut self, tape: &mut Tape, x: Var, rate: f64) -> Result<Var> {
        tape.dropout(x, rate, self.train, &mut self.rng)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Xavier-uniform weight, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut dyn RngCore) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::uniform(&[in_dim, out_dim], bound, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let last = tape.value(x).last_dim();
        if last != self.in_dim {
            return Err(DatError::Shape {
                op: "linear",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![self.in_dim, self.out_dim],
            });
        }
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, eps: f64) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
            eps,
        }
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b, self.eps)
    }
}

/// Multi-head scaled dot-product attention. Self-attention is the case
/// `q_in == kv_in`.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
    pub dropout: f64,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        dropout: f64,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(DatError::InvalidArgument(format!(
                "{heads} heads do not divide model width {dim}"
            )));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
            dropout,
        })
    }

    pub fn param_count(dim: usize) -> usize {
        4 * Linear::param_count(dim, dim)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn forward(&self, tape: &mut Tape, mode: &mut RunMode, q_in: Var, kv_in: Var) -> Result<Var> {
        Ok(self.forward_with_weights(tape, mode, q_in, kv_in)?.0)
    }

    /// Like [`forward`](Self::forward) but also returns each head's
    /// `[L_q × L_k]` attention matrix.
    pub fn forward_with_weights(
        &self,
        tape: &mut Tape,
        mode: &mut RunMode,
        q_in: Var,
        kv_in: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let (sq, sk) = (tape.shape(q_in).to_vec(), tape.shape(kv_in).to_vec());
        if sq.len() != 2 || sk.len() != 2 || sq[1] != self.dim || sk[1] != self.dim {
            return Err(DatError::shape("attention", &sq, &sk));
        }
        let q = self.query.forward(tape, q_in)?;
        let k = self.key.forward(tape, kv_in)?;
        let v = self.value.forward(tape, kv_in)?;
        let dk = self.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dk, (h + 1) * dk);
            let qh = tape.slice(q, 1, lo, hi)?;
            let kh = tape.slice(k, 1, lo, hi)?;
            let vh = tape.slice(v, 1, lo, hi)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let attn = tape.softmax(scores, 1)?;
            heads.push(tape.matmul(attn, vh)?);
            weights.push(attn);
        }
        let merged = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 1)? };
        let out = self.output.forward(tape, merged)?;
        let out = mode.dropout(tape, out, self.dropout)?;
        Ok((out, weights))
    }
}

/// Position-wise `Linear(D → mD) → GELU → dropout → Linear(mD → D)`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
    pub dropout: f64,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, mult: usize, dropout: f64, rng: &mut dyn RngCore) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), dim, mult * dim, rng),
            down: Linear::new(store, &format!("{name}.down"), mult * dim, dim, rng),
            dropout,
        }
    }

    pub fn param_count(dim: usize, mult: usize) -> usize {
        Linear::param_count(dim, mult * dim) + Linear::param_count(mult * dim, dim)
    }

    pub fn forward(&self, tape: &mut Tape, mode: &mut RunMode, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, x)?;
        let h = tape.gelu(h)?;
        let h = mode.dropout(tape, h, self.dropout)?;
        self.down.forward(tape, h)
    }
}

/// Pre-norm encoder layer: `h = x + Attn(Norm(x))`, `y = h + FFN(Norm(h))`.
#[derive(Clone, Debug)]
pub struct TransformerEncoderLayer {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerDims {
    pub dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub eps: f64,
}

impl TransformerEncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, dims: LayerDims, rng: &mut dyn RngCore) -> Result<Self> {
        Ok(TransformerEncoderLayer {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm1"), dims.dim, dims.eps),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dims.dim, dims.heads, dims.dropout, rng)?,
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm2"), dims.dim, dims.eps),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dims.dim, dims.ffn_mult, dims.dropout, rng),
        })
    }

    pub fn param_count(dim: usize, ffn_mult: usize) -> usize {
        2 * LayerNorm::param_count(dim) + MultiHeadAttention::param_count(dim) + FeedForward::param_count(dim, ffn_mult)
    }

    pub fn forward(&self, tape: &mut Tape, mode: &mut RunMode, x: Var) -> Result<Var> {
        let n = self.norm_attn.forward(tape, x)?;
        let a = self.attn.forward(tape, mode, n, n)?;
        let h = tape.add(x, a)?;
        let n = self.norm_ffn.forward(tape, h)?;
        let f = self.ffn.forward(tape, mode, n)?;
        tape.add(h, f)
    }
}

/// Fixed sinusoidal table: `PE[p, 2i] = sin(p / 10000^(2i/D))`,
/// `PE[p, 2i+1] = cos(p / 10000^(2i/D))`.
#[derive(Clone, Debug)]
pub struct PositionalEncoding {
    table: Tensor,
    max_len: usize,
    dim: usize,
}

impl PositionalEncoding {
    pub fn new(max_len: usize, dim: usize) -> Self {
        let mut data = vec![0.0; max_len * dim];
        for p in 0..max_len {
            for j in 0..dim {
                let i2 = (j - j % 2) as f64;
                let angle = p as f64 / 10000f64.powf(i2 / dim as f64);
                data[p * dim + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
            }
        }
        PositionalEncoding {
            table: Tensor::new(vec![max_len, dim], data).expect("table shape"),
            max_len,
            dim,
        }
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// `x + PE[0..L]`, or `x` unchanged when `enabled` is false.
    pub fn add_positional(&self, tape: &mut Tape, x: Var, enabled: bool) -> Result<Var> {
        if !enabled {
            return Ok(x);
        }
        let s = tape.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.dim {
            return Err(DatError::shape("add_positional", &s, &[self.max_len, self.dim]));
        }
        if s[0] > self.max_len {
            return Err(DatError::InvalidArgument(format!(
                "sequence length {} exceeds positional table length {}",
                s[0], self.max_len
            )));
        }
        let pe = tape.constant(self.table.slice_rows(0, s[0]));
        tape.add(x, pe)
    }
}
