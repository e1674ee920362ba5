//! `<Diff>` tokens: pooled differences of the two images' modulated grids
//! query the concatenated projected tokens of both images.

use lesionlm_tensor::{Float, Graph, Tensor, Var};

use crate::anomaly::{batch1, pool_queries};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Mlp, QFormer};
use crate::params::{Ctx, ParamBuilder, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct DiffTokenSet {
    /// `[p^2, d_lm]`.
    pub tokens: Tensor<f32>,
    /// `[p^2, d]`.
    pub diff_queries: Tensor<f32>,
    /// Ids of the earlier and the later image.
    pub source_ids: (u64, u64),
}

#[derive(Clone, Debug)]
pub struct DiffProcessor {
    dim: usize,
    lm_dim: usize,
    grid: usize,
    pool: usize,
    image_pos: String,
    qformer: QFormer,
    mlp: Mlp,
}

impl DiffProcessor {
    pub fn new<F: Float>(pb: &mut ParamBuilder<F>, cfg: &ModelConfig) -> Self {
        Self {
            dim: cfg.enc_dim,
            lm_dim: cfg.lm_dim,
            grid: cfg.grid(),
            pool: cfg.pool,
            image_pos: pb.normal("diff.image_pos", &[2, cfg.lm_dim], 0.02),
            qformer: QFormer::new(pb, "diff.qformer", cfg.n_query_tokens(), cfg.enc_dim, cfg.lm_dim, cfg.qformer_dim, cfg.qformer_heads),
            mlp: Mlp::new(pb, "diff.mlp", cfg.qformer_dim, 2 * cfg.lm_dim, cfg.lm_dim),
        }
    }

    /// Pooled `mod2 - mod1`, `[B, p^2, d]`.
    pub fn queries_var<F: Float>(&self, g: &Graph<F>, mod1: Var, mod2: Var) -> Result<Var> {
        let (s1, s2) = (g.shape(mod1), g.shape(mod2));
        if s1 != s2 || s1.len() != 3 || s1[1] != self.grid * self.grid || s1[2] != self.dim {
            return Err(Error::Config(format!("modulated grids {s1:?} and {s2:?} do not match")));
        }
        let d = g.sub(mod2, mod1);
        pool_queries(g, d, self.grid, self.pool)
    }

    /// Batched pass returning `(queries, tokens)`.
    pub fn forward<F: Float>(&self, cx: &Ctx<F>, mod1: Var, mod2: Var, proj1: Var, proj2: Var) -> Result<(Var, Var)> {
        let g = cx.g;
        let queries = self.queries_var(g, mod1, mod2)?;
        let (p1, p2) = (g.shape(proj1), g.shape(proj2));
        if p1 != p2 || p1.len() != 3 || p1[2] != self.lm_dim {
            return Err(Error::Config(format!("projected tokens {p1:?} and {p2:?} do not match")));
        }
        let pos = cx.p(&self.image_pos);
        let e1 = g.reshape(g.slice(pos, 0, 0, 1), &[self.lm_dim]);
        let e2 = g.reshape(g.slice(pos, 0, 1, 1), &[self.lm_dim]);
        let kv = g.concat(&[g.add(proj1, e1), g.add(proj2, e2)], 1);
        let h = self.qformer.forward(cx, queries, kv);
        Ok((queries, self.mlp.forward(cx, h)))
    }

    /// Single-pair tokens from modulated grids `[G, G, d]` and projected
    /// tokens `[G^2, d_lm]`.
    pub fn make_diff_tokens(
        &self,
        store: &ParamStore<f32>,
        mod1: &Tensor<f32>,
        mod2: &Tensor<f32>,
        proj1: &Tensor<f32>,
        proj2: &Tensor<f32>,
        source_ids: (u64, u64),
    ) -> Result<DiffTokenSet> {
        if mod1.shape() != mod2.shape() {
            return Err(Error::Config(format!("grid shapes {:?} and {:?} differ", mod1.shape(), mod2.shape())));
        }
        let g = Graph::no_grad();
        let cx = Ctx::frozen(&g, store);
        let vars = [mod1, mod2, proj1, proj2].map(|t| g.constant(batch1(t)));
        let (q, t) = self.forward(&cx, vars[0], vars[1], vars[2], vars[3])?;
        let unbatch = |v: Var| {
            let t = g.value(v);
            let s = t.shape()[1..].to_vec();
            t.as_ref().clone().reshape(&s)
        };
        let tokens = unbatch(t);
        if !tokens.all_finite() {
            return Err(Error::Usage("non-finite <Diff> tokens".into()));
        }
        Ok(DiffTokenSet { tokens, diff_queries: unbatch(q), source_ids })
    }
}
