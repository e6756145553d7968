//! Transformer building blocks on top of the autodiff tape.
//!
//! Layers only store handles into a [`ParamSet`]; a forward pass receives the
//! bound variables (`p[handle]`) so the same layer works for plain gradient
//! passes and for dual-number Hessian-vector products.

use autodiff::{Graph, Mat, ParamSet, RowMask, Scalar, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Uniform Glorot initialisation.
pub fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect())
}

/// Gaussian-ish init with the given scale (sum of uniforms, deterministic
/// across platforms).
pub fn normal(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Mat<f64> {
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| {
                let s: f64 = (0..12).map(|_| rng.gen::<f64>()).sum();
                (s - 6.0) * scale
            })
            .collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamSet, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = ps.add(format!("{name}.w"), glorot(rng, fan_in, fan_out));
        let b = ps.add(format!("{name}.b"), Mat::zeros(1, fan_out));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        let h = g.matmul(x, p[self.w]);
        g.add_row(h, p[self.b])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: usize,
    pub bias: usize,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        let gain = ps.add(format!("{name}.gain"), Mat::filled(1, dim, 1.0));
        let bias = ps.add(format!("{name}.bias"), Mat::zeros(1, dim));
        Self { gain, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        g.layer_norm(x, p[self.gain], p[self.bias])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamSet, rng: &mut impl Rng, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads >= 1 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(ps, rng, &format!("{name}.q"), dim, dim),
            k: Linear::new(ps, rng, &format!("{name}.k"), dim, dim),
            v: Linear::new(ps, rng, &format!("{name}.v"), dim, dim),
            out: Linear::new(ps, rng, &format!("{name}.o"), dim, dim),
            heads,
            dim,
        }
    }

    /// Scaled dot-product attention of `query` rows over `context` rows.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], query: Var, context: Var, causal: bool) -> Var {
        let q = self.q.forward(g, p, query);
        let k = self.k.forward(g, p, context);
        let v = self.v.forward(g, p, context);
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, h * dh, dh), g.slice_cols(k, h * dh, dh), g.slice_cols(v, h * dh, dh))
            };
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let att = g.softmax_rows(scores, if causal { RowMask::Causal } else { RowMask::None });
            outs.push(g.matmul(att, vh));
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        self.out.forward(g, p, cat)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(ps: &mut ParamSet, rng: &mut impl Rng, name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            inner: Linear::new(ps, rng, &format!("{name}.ff1"), dim, hidden),
            outer: Linear::new(ps, rng, &format!("{name}.ff2"), hidden, dim),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        let h = self.inner.forward(g, p, x);
        let h = g.relu(h);
        self.outer.forward(g, p, h)
    }
}

/// Post-norm encoder block: `x = LN(x + MHSA(x)); x = LN(x + FFN(x))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderBlock {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ffn: FeedForward,
    pub ln2: LayerNorm,
}

impl EncoderBlock {
    pub fn new(ps: &mut ParamSet, rng: &mut impl Rng, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            attn: MultiHeadAttention::new(ps, rng, &format!("{name}.attn"), dim, heads),
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim),
            ffn: FeedForward::new(ps, rng, &format!("{name}.ffn"), dim, dim),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var, causal: bool) -> Var {
        let a = self.attn.forward(g, p, x, x, causal);
        let x = g.add(x, a);
        let x = self.ln1.forward(g, p, x);
        let f = self.ffn.forward(g, p, x);
        let x = g.add(x, f);
        self.ln2.forward(g, p, x)
    }
}

/// Post-norm decoder block: causal self-attention, cross-attention to the
/// memory, then feed-forward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderBlock {
    pub self_attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
    pub ln3: LayerNorm,
}

impl DecoderBlock {
    pub fn new(ps: &mut ParamSet, rng: &mut impl Rng, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            self_attn: MultiHeadAttention::new(ps, rng, &format!("{name}.self"), dim, heads),
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim),
            cross_attn: MultiHeadAttention::new(ps, rng, &format!("{name}.cross"), dim, heads),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim),
            ffn: FeedForward::new(ps, rng, &format!("{name}.ffn"), dim, dim),
            ln3: LayerNorm::new(ps, &format!("{name}.ln3"), dim),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &[Var], x: Var, memory: Var) -> Var {
        let a = self.self_attn.forward(g, p, x, x, true);
        let x = g.add(x, a);
        let x = self.ln1.forward(g, p, x);
        let c = self.cross_attn.forward(g, p, x, memory, false);
        let x = g.add(x, c);
        let x = self.ln2.forward(g, p, x);
        let f = self.ffn.forward(g, p, x);
        let x = g.add(x, f);
        self.ln3.forward(g, p, x)
    }
}

/// Inverted dropout with a constant mask drawn from `rng`.
pub fn dropout<T: Scalar>(g: &mut Graph<T>, x: Var, rate: f64, rng: &mut impl Rng) -> Var {
    if rate <= 0.0 {
        return x;
    }
    let (r, c) = g.shape(x);
    let keep = 1.0 / (1.0 - rate);
    let mask = Mat::from_vec(r, c, (0..r * c).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect());
    let m = g.constant_f64(&mask);
    g.mul(x, m)
}
