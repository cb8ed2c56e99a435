//! Layers built on the tape: linear maps, layer norm, multi-head attention,
//! transformer blocks and MLPs.
//!
//! Layers hold indices into a party's [`ParamSet`]; `forward` takes the slice
//! of tape variables produced by [`ParamSet::bind`].

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::optim::ParamSet;
use crate::tensor::Tensor;

/// Uniform fan-in initialization, `U(-1/√fan_in, 1/√fan_in)`.
pub fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape matches buffer")
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, name: &str, inp: usize, out: usize, rng: &mut impl Rng) -> Self {
        let w = ps.add(format!("{name}.w"), uniform_fan_in(&[inp, out], inp, rng));
        let b = ps.add(format!("{name}.b"), uniform_fan_in(&[out], inp, rng));
        Self { w, b, inp, out }
    }

    pub fn forward(&self, t: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        t.linear(x, p[self.w], Some(p[self.b]))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: usize,
    pub bias: usize,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, width: usize) -> Self {
        let gain = ps.add(format!("{name}.gain"), Tensor::ones(&[width]));
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[width]));
        Self { gain, bias }
    }

    pub fn forward(&self, t: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        t.layer_norm(x, p[self.gain], p[self.bias])
    }
}

/// Scaled dot-product attention with `heads` heads.
///
/// Queries come from a `[B, Lq, H]` input, keys and values from a
/// `[B, Lk, D]` memory (`D` may differ from `H`, as in the concat
/// aggregator). An optional `[B, Lk]` additive key bias is shared by every
/// head and query.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub hidden: usize,
}

impl MultiHeadAttention {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        hidden: usize,
        memory_width: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !hidden.is_multiple_of(heads) {
            return Err(Error::contract(format!(
                "hidden size {hidden} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), hidden, hidden, rng),
            k: Linear::new(ps, &format!("{name}.k"), memory_width, hidden, rng),
            v: Linear::new(ps, &format!("{name}.v"), memory_width, hidden, rng),
            o: Linear::new(ps, &format!("{name}.o"), hidden, hidden, rng),
            heads,
            hidden,
        })
    }

    fn split_heads(&self, t: &mut Tape, x: Var, b: usize, l: usize) -> Result<Var> {
        let d = self.hidden / self.heads;
        let x = t.reshape(x, &[b, l, self.heads, d])?;
        let x = t.permute_0213(x)?;
        t.reshape(x, &[b * self.heads, l, d])
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        p: &[Var],
        query: Var,
        memory: Var,
        key_bias: Option<Var>,
    ) -> Result<Var> {
        let (sq, sm) = (t.shape(query).to_vec(), t.shape(memory).to_vec());
        if sq.len() != 3 || sm.len() != 3 || sq[0] != sm[0] {
            return Err(Error::dim(format!("attention: query {sq:?} memory {sm:?}")));
        }
        let (b, lq, lk) = (sq[0], sq[1], sm[1]);
        let d = self.hidden / self.heads;

        let q = self.q.forward(t, p, query)?;
        let k = self.k.forward(t, p, memory)?;
        let v = self.v.forward(t, p, memory)?;
        let q = self.split_heads(t, q, b, lq)?;
        let k = self.split_heads(t, k, b, lk)?;
        let v = self.split_heads(t, v, b, lk)?;

        let scores = t.bmm(q, k, true)?;
        let scores = t.scale(scores, 1.0 / (d as f64).sqrt());
        let scores = t.reshape(scores, &[b, self.heads * lq, lk])?;
        let attn = t.softmax(scores, key_bias)?;
        let attn = t.reshape(attn, &[b * self.heads, lq, lk])?;

        let ctx = t.bmm(attn, v, false)?;
        let ctx = t.reshape(ctx, &[b, self.heads, lq, d])?;
        let ctx = t.permute_0213(ctx)?;
        let ctx = t.reshape(ctx, &[b, lq, self.hidden])?;
        self.o.forward(t, p, ctx)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(ps: &mut ParamSet, name: &str, hidden: usize, inner: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: Linear::new(ps, &format!("{name}.up"), hidden, inner, rng),
            down: Linear::new(ps, &format!("{name}.down"), inner, hidden, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, p: &[Var], x: Var) -> Result<Var> {
        let h = self.up.forward(t, p, x)?;
        let h = t.relu(h);
        self.down.forward(t, p, h)
    }
}

/// Pre-norm self-attention block.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        hidden: usize,
        heads: usize,
        ffn_inner: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), hidden),
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), hidden, hidden, heads, rng)?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), hidden),
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), hidden, ffn_inner, rng),
        })
    }

    pub fn forward(&self, t: &mut Tape, p: &[Var], x: Var, key_bias: Option<Var>) -> Result<Var> {
        let h = self.norm1.forward(t, p, x)?;
        let a = self.attn.forward(t, p, h, h, key_bias)?;
        let x = t.add(x, a)?;
        let h = self.norm2.forward(t, p, x)?;
        let f = self.ffn.forward(t, p, h)?;
        t.add(x, f)
    }
}

/// Pre-norm cross-attention block: queries attend over a memory sequence.
///
/// The query sequence has length one in the federated model, so a
/// self-attention sublayer would reduce to a linear map and is omitted.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub norm1: LayerNorm,
    pub cross: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderBlock {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        hidden: usize,
        memory_width: usize,
        heads: usize,
        ffn_inner: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), hidden),
            cross: MultiHeadAttention::new(
                ps,
                &format!("{name}.cross"),
                hidden,
                memory_width,
                heads,
                rng,
            )?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), hidden),
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), hidden, ffn_inner, rng),
        })
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        p: &[Var],
        query: Var,
        memory: Var,
        key_bias: Option<Var>,
    ) -> Result<Var> {
        let h = self.norm1.forward(t, p, query)?;
        let a = self.cross.forward(t, p, h, memory, key_bias)?;
        let x = t.add(query, a)?;
        let h = self.norm2.forward(t, p, x)?;
        let f = self.ffn.forward(t, p, h)?;
        t.add(x, f)
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(ps: &mut ParamSet, name: &str, widths: &[usize], rng: &mut impl Rng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(ps, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, t: &mut Tape, p: &[Var], mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(t, p, x)?;
            if i + 1 < self.layers.len() {
                x = t.relu(x);
            }
        }
        Ok(x)
    }
}
