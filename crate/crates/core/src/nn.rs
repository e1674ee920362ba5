//! Layers shared by the encoder, the Q-Formers, the language model and the
//! heatmap head. A layer only stores parameter names; values live in a
//! [`ParamStore`](crate::params::ParamStore) and are bound through a [`Ctx`].

use lesionlm_tensor::{Float, Var};

use crate::params::{Ctx, ParamBuilder};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    w: String,
    b: Option<String>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new<F: Float>(pb: &mut ParamBuilder<F>, name: &str, din: usize, dout: usize, bias: bool) -> Self {
        Self::with_std(pb, name, din, dout, bias, (1.0 / din as f64).sqrt())
    }

    pub fn with_std<F: Float>(pb: &mut ParamBuilder<F>, name: &str, din: usize, dout: usize, bias: bool, std: f64) -> Self {
        let w = if std == 0.0 {
            pb.full(&format!("{name}.w"), &[din, dout], 0.0)
        } else {
            pb.normal(&format!("{name}.w"), &[din, dout], std)
        };
        let b = bias.then(|| pb.full(&format!("{name}.b"), &[dout], 0.0));
        Self { w, b, din, dout }
    }

    pub fn forward<F: Float>(&self, cx: &Ctx<F>, x: Var) -> Var {
        let b = self.b.as_deref().map(|b| cx.p(b));
        cx.g.linear(x, cx.p(&self.w), b)
    }

    pub fn weight_name(&self) -> &str {
        &self.w
    }

    pub fn bias_name(&self) -> Option<&str> {
        self.b.as_deref()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    g: String,
    b: String,
}

impl LayerNorm {
    pub fn new<F: Float>(pb: &mut ParamBuilder<F>, name: &str, dim: usize) -> Self {
        Self { g: pb.full(&format!("{name}.g"), &[dim], 1.0), b: pb.full(&format!("{name}.b"), &[dim], 0.0) }
    }

    pub fn forward<F: Float>(&self, cx: &Ctx<F>, x: Var) -> Var {
        cx.g.layer_norm(x, cx.p(&self.g), cx.p(&self.b), LN_EPS)
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new<F: Float>(pb: &mut ParamBuilder<F>, name: &str, din: usize, hidden: usize, dout: usize) -> Self {
        Self {
            fc1: Linear::new(pb, &format!("{name}.fc1"), din, hidden, true),
            fc2: Linear::new(pb, &format!("{name}.fc2"), hidden, dout, true),
        }
    }

    pub fn forward<F: Float>(&self, cx: &Ctx<F>, x: Var) -> Var {
        let h = self.fc1.forward(cx, x);
        let h = cx.g.gelu(h);
        self.fc2.forward(cx, h)
    }
}

/// Multi-head attention with separate query and key/value inputs.
#[derive(Clone, Debug)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    pub fn new<F: Float>(pb: &mut ParamBuilder<F>, name: &str, dq: usize, dkv: usize, width: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(pb, &format!("{name}.q"), dq, width, true),
            k: Linear::new(pb, &format!("{name}.k"), dkv, width, true),
            v: Linear::new(pb, &format!("{name}.v"), dkv, width, true),
            o: Linear::new(pb, &format!("{name}.o"), width, dq, true),
            heads,
        }
    }

    pub fn forward<F: Float>(&self, cx: &Ctx<F>, xq: Var, xkv: Var, causal: bool) -> Var {
        let q = self.q.forward(cx, xq);
        let k = self.k.forward(cx, xkv);
        let v = self.v.forward(cx, xkv);
        let a = cx.g.attention(q, k, v, self.heads, causal);
        self.o.forward(cx, a)
    }
}

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    pub fn new<F: Float>(pb: &mut ParamBuilder<F>, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        Self {
            ln1: LayerNorm::new(pb, &format!("{name}.ln1"), dim),
            attn: Attention::new(pb, &format!("{name}.attn"), dim, dim, dim, heads),
            ln2: LayerNorm::new(pb, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(pb, &format!("{name}.mlp"), dim, dim * mlp_ratio, dim),
        }
    }

    pub fn forward<F: Float>(&self, cx: &Ctx<F>, x: Var, causal: bool) -> Var {
        let h = self.ln1.forward(cx, x);
        let h = self.attn.forward(cx, h, h, causal);
        let x = cx.g.add(x, h);
        let h = self.ln2.forward(cx, x);
        let h = self.mlp.forward(cx, h);
        cx.g.add(x, h)
    }
}

/// One Q-Former block: optional self-attention among the queries, then
/// cross-attention from the queries to a key/value sequence, then an MLP.
#[derive(Clone, Debug)]
pub struct QFormerBlock {
    self_attn: Option<(LayerNorm, Attention)>,
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    cross: Attention,
    ln_mlp: LayerNorm,
    mlp: Mlp,
}

impl QFormerBlock {
    pub fn new<F: Float>(pb: &mut ParamBuilder<F>, name: &str, width: usize, dkv: usize, heads: usize, with_self: bool) -> Self {
        let self_attn = with_self.then(|| {
            (
                LayerNorm::new(pb, &format!("{name}.ln_self"), width),
                Attention::new(pb, &format!("{name}.self"), width, width, width, heads),
            )
        });
        Self {
            self_attn,
            ln_q: LayerNorm::new(pb, &format!("{name}.ln_q"), width),
            ln_kv: LayerNorm::new(pb, &format!("{name}.ln_kv"), dkv),
            cross: Attention::new(pb, &format!("{name}.cross"), width, dkv, width, heads),
            ln_mlp: LayerNorm::new(pb, &format!("{name}.ln_mlp"), width),
            mlp: Mlp::new(pb, &format!("{name}.mlp"), width, 2 * width, width),
        }
    }

    pub fn forward<F: Float>(&self, cx: &Ctx<F>, x: Var, kv: Var) -> Var {
        let mut x = x;
        if let Some((ln, attn)) = &self.self_attn {
            let h = ln.forward(cx, x);
            let h = attn.forward(cx, h, h, false);
            x = cx.g.add(x, h);
        }
        let q = self.ln_q.forward(cx, x);
        let kv = self.ln_kv.forward(cx, kv);
        let h = self.cross.forward(cx, q, kv, false);
        let x = cx.g.add(x, h);
        let h = self.ln_mlp.forward(cx, x);
        let h = self.mlp.forward(cx, h);
        cx.g.add(x, h)
    }
}

/// Two-block Q-Former: block 1 is cross-attention only, block 2 adds
/// self-attention among the queries.
#[derive(Clone, Debug)]
pub struct QFormer {
    in_proj: Linear,
    pos: String,
    blocks: Vec<QFormerBlock>,
    ln_out: LayerNorm,
}

impl QFormer {
    pub fn new<F: Float>(
        pb: &mut ParamBuilder<F>,
        name: &str,
        n_queries: usize,
        dq: usize,
        dkv: usize,
        width: usize,
        heads: usize,
    ) -> Self {
        Self {
            in_proj: Linear::new(pb, &format!("{name}.in_proj"), dq, width, true),
            pos: pb.normal(&format!("{name}.query_pos"), &[n_queries, width], 0.02),
            blocks: vec![
                QFormerBlock::new(pb, &format!("{name}.block0"), width, dkv, heads, false),
                QFormerBlock::new(pb, &format!("{name}.block1"), width, dkv, heads, true),
            ],
            ln_out: LayerNorm::new(pb, &format!("{name}.ln_out"), width),
        }
    }

    /// `queries: [B, Nq, dq]`, `kv: [B, T, dkv]` -> `[B, Nq, width]`.
    pub fn forward<F: Float>(&self, cx: &Ctx<F>, queries: Var, kv: Var) -> Var {
        let x = self.in_proj.forward(cx, queries);
        let mut x = cx.g.add(x, cx.p(&self.pos));
        for b in &self.blocks {
            x = b.forward(cx, x, kv);
        }
        self.ln_out.forward(cx, x)
    }
}

/// Fixed sinusoidal position table `[len, dim]`.
pub fn sinusoidal_positions<F: Float>(len: usize, dim: usize) -> lesionlm_tensor::Tensor<F> {
    let mut data = vec![F::zero(); len * dim];
    for pos in 0..len {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            let a = pos as f64 * freq;
            data[pos * dim + 2 * i] = F::from_f64(a.sin());
            data[pos * dim + 2 * i + 1] = F::from_f64(a.cos());
        }
    }
    lesionlm_tensor::Tensor::new(&[len, dim], data)
}
