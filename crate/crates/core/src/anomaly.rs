//! Anomaly scoring, feature modulation and `<Ano>` token generation.
//!
//! Two learned system tokens are scored against a key projection of every
//! patch of every scored layer; the sigmoid scores give a per-patch map in
//! `(-1, 1)` that rescales the final-layer features before they are pooled
//! into queries for the anomaly Q-Former.

use lesionlm_tensor::{Float, Graph, Tensor, Var};

use crate::backbone::PatchFeatureSet;
use crate::config::{FeatureSource, ModelConfig, Modulation};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, Mlp, QFormer};
use crate::params::{Ctx, ParamBuilder, ParamStore};

/// Logits are clamped to this magnitude so sigmoid scores stay strictly
/// inside `(0, 1)` in single precision.
pub const LOGIT_CLAMP: f64 = 15.0;

pub const SYS_ABNORMAL: &str = "anomaly.sys_abnormal";
pub const SYS_NORMAL: &str = "anomaly.sys_normal";

/// Abnormal and normal sigmoid scores of one layer, each `[G, G]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerScores {
    pub abnormal: Tensor<f32>,
    pub normal: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyAttentionMap {
    /// `[G, G]`, every value in `(-1, 1)`.
    pub values: Tensor<f32>,
    pub layers: Vec<LayerScores>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnoTokenSet {
    /// `[p^2, d_lm]`.
    pub tokens: Tensor<f32>,
    /// Pooled queries `[p^2, d]`.
    pub queries: Tensor<f32>,
    pub map: Option<AnomalyAttentionMap>,
    /// `[G, G, d]`.
    pub modulated: Tensor<f32>,
    pub image_id: u64,
}

/// Graph handles produced by one batched forward pass.
pub struct AnoVars {
    /// Per scored layer: `(abnormal, normal)`, each `[B, G^2]`.
    pub scores: Vec<(Var, Var)>,
    pub map: Var,
    pub modulated: Var,
    pub queries: Var,
    pub tokens: Var,
}

#[derive(Clone, Debug)]
pub struct AnomalyProcessor {
    dim: usize,
    grid: usize,
    pool: usize,
    modulation: Modulation,
    source: FeatureSource,
    key_ln: Vec<LayerNorm>,
    key_proj: Vec<Linear>,
    qformer: QFormer,
    mlp: Mlp,
}

impl AnomalyProcessor {
    pub fn new<F: Float>(pb: &mut ParamBuilder<F>, cfg: &ModelConfig) -> Self {
        let d = cfg.enc_dim;
        pb.normal(SYS_ABNORMAL, &[d], 1.0);
        pb.normal(SYS_NORMAL, &[d], 1.0);
        let n_layers = match cfg.feature_source {
            FeatureSource::Intermediate => 4,
            FeatureSource::LastLayer => 1,
        };
        Self {
            dim: d,
            grid: cfg.grid(),
            pool: cfg.pool,
            modulation: cfg.modulation,
            source: cfg.feature_source,
            key_ln: (0..n_layers).map(|i| LayerNorm::new(pb, &format!("anomaly.key{i}.ln"), d)).collect(),
            key_proj: (0..n_layers).map(|i| Linear::new(pb, &format!("anomaly.key{i}.proj"), d, d, true)).collect(),
            qformer: QFormer::new(pb, "anomaly.qformer", cfg.n_query_tokens(), d, cfg.lm_dim, cfg.qformer_dim, cfg.qformer_heads),
            mlp: Mlp::new(pb, "anomaly.mlp", cfg.qformer_dim, 2 * cfg.lm_dim, cfg.lm_dim),
        }
    }

    pub fn pool(&self) -> usize {
        self.pool
    }

    /// The grids scored against the system tokens.
    pub fn scored_layers<'v>(&self, grids: &'v [Var]) -> &'v [Var] {
        match self.source {
            FeatureSource::Intermediate => &grids[..4],
            FeatureSource::LastLayer => &grids[grids.len() - 1..],
        }
    }

    /// Sigmoid scores of both system tokens against every patch of every
    /// scored layer. `layers[i]: [B, G^2, d]`.
    pub fn score_vars<F: Float>(&self, cx: &Ctx<F>, layers: &[Var]) -> Result<Vec<(Var, Var)>> {
        if layers.len() != self.key_proj.len() {
            return Err(Error::Config(format!("expected {} scored layers, got {}", self.key_proj.len(), layers.len())));
        }
        let g = cx.g;
        let scale = F::from_f64(1.0 / (self.dim as f64).sqrt());
        let clamp = F::from_f64(LOGIT_CLAMP);
        let sys_a = g.reshape(cx.p(SYS_ABNORMAL), &[self.dim, 1]);
        let sys_n = g.reshape(cx.p(SYS_NORMAL), &[self.dim, 1]);
        let mut out = Vec::with_capacity(layers.len());
        for (i, &x) in layers.iter().enumerate() {
            let shape = g.shape(x);
            if shape.len() != 3 || shape[1] != self.grid * self.grid || shape[2] != self.dim {
                return Err(Error::Config(format!("feature grid shape {shape:?} does not match the processor")));
            }
            let k = self.key_ln[i].forward(cx, x);
            let k = self.key_proj[i].forward(cx, k);
            let score = |sys: Var| {
                let z = g.linear(k, sys, None);
                let z = g.scale(z, scale);
                let z = g.clamp(z, -clamp, clamp);
                let s = g.sigmoid(z);
                g.reshape(s, &[shape[0], shape[1]])
            };
            out.push((score(sys_a), score(sys_n)));
        }
        Ok(out)
    }

    /// Full batched pass. `grids` are the five encoder grids and
    /// `projected: [B, G^2, d_lm]` the projected visual tokens.
    pub fn forward<F: Float>(&self, cx: &Ctx<F>, grids: &[Var], projected: Var) -> Result<AnoVars> {
        let scores = self.score_vars(cx, self.scored_layers(grids))?;
        let map = build_map_var(cx.g, &scores);
        assert_map_range(&cx.g.value(map));
        let modulated = modulate_var(cx.g, *grids.last().unwrap(), map, self.modulation);
        let (queries, tokens) = self.tokens_var(cx, modulated, projected)?;
        Ok(AnoVars { scores, map, modulated, queries, tokens })
    }

    /// Pools a modulated grid `[B, G^2, d]` into `p^2` queries and runs the
    /// Q-Former and MLP against `projected: [B, G^2, d_lm]`.
    pub fn tokens_var<F: Float>(&self, cx: &Ctx<F>, modulated: Var, projected: Var) -> Result<(Var, Var)> {
        let queries = pool_queries(cx.g, modulated, self.grid, self.pool)?;
        let h = self.qformer.forward(cx, queries, projected);
        Ok((queries, self.mlp.forward(cx, h)))
    }

    /// Per-layer scores for one image.
    pub fn score_patches(&self, store: &ParamStore<f32>, features: &PatchFeatureSet) -> Result<Vec<LayerScores>> {
        self.check_features(features)?;
        let g = Graph::no_grad();
        let cx = Ctx::frozen(&g, store);
        let grids: Vec<Var> = features.layers.iter().map(|t| g.constant(batch1(t))).collect();
        let scores = self.score_vars(&cx, self.scored_layers(&grids))?;
        let gg = [self.grid, self.grid];
        Ok(scores
            .iter()
            .map(|&(a, n)| LayerScores {
                abnormal: g.value(a).as_ref().clone().reshape(&gg),
                normal: g.value(n).as_ref().clone().reshape(&gg),
            })
            .collect())
    }

    /// `<Ano>` tokens for one image from its modulated grid `[G, G, d]` and
    /// projected tokens `[G^2, d_lm]`.
    pub fn make_ano_tokens(
        &self,
        store: &ParamStore<f32>,
        modulated: &Tensor<f32>,
        projected: &Tensor<f32>,
        image_id: u64,
    ) -> Result<AnoTokenSet> {
        if modulated.shape() != [self.grid, self.grid, self.dim] {
            return Err(Error::Config(format!("modulated grid shape {:?}", modulated.shape())));
        }
        let g = Graph::no_grad();
        let cx = Ctx::frozen(&g, store);
        let m = g.constant(batch1(modulated));
        let p = g.constant(batch1(projected));
        let (q, t) = self.tokens_var(&cx, m, p)?;
        let unbatch = |v: Var| {
            let t = g.value(v);
            let s = t.shape()[1..].to_vec();
            t.as_ref().clone().reshape(&s)
        };
        let tokens = unbatch(t);
        if !tokens.all_finite() {
            return Err(Error::Usage("non-finite <Ano> tokens".into()));
        }
        Ok(AnoTokenSet { tokens, queries: unbatch(q), map: None, modulated: modulated.clone(), image_id })
    }

    fn check_features(&self, f: &PatchFeatureSet) -> Result<()> {
        if f.layers.len() != 5 || f.grid != self.grid || f.dim != self.dim {
            return Err(Error::Config(format!(
                "feature set ({} grids of {}x{}x{}) does not match the processor ({}x{}x{})",
                f.layers.len(),
                f.grid,
                f.grid,
                f.dim,
                self.grid,
                self.grid,
                self.dim
            )));
        }
        Ok(())
    }
}

/// Adds a leading batch axis of one and flattens the grid: `[G, G, d]` ->
/// `[1, G^2, d]`; `[T, d]` -> `[1, T, d]`.
pub(crate) fn batch1(t: &Tensor<f32>) -> Tensor<f32> {
    let d = t.last_dim();
    t.clone().reshape(&[1, t.numel() / d, d])
}

pub(crate) fn assert_map_range<F: Float>(map: &Tensor<F>) {
    assert!(
        map.data().iter().all(|v| v.abs() < F::one()),
        "anomaly map left the open interval (-1, 1)"
    );
}

/// Mean over layers of `abnormal - normal`, `[B, G^2]`.
pub fn build_map_var<F: Float>(g: &Graph<F>, scores: &[(Var, Var)]) -> Var {
    let mut acc: Option<Var> = None;
    for &(a, n) in scores {
        let d = g.sub(a, n);
        acc = Some(match acc {
            Some(s) => g.add(s, d),
            None => d,
        });
    }
    g.scale(acc.expect("at least one scored layer"), F::from_f64(1.0 / scores.len() as f64))
}

/// `features * (1 + map)` or `features * map`, broadcasting the map over
/// channels. `features: [B, G^2, d]`, `map: [B, G^2]`.
pub fn modulate_var<F: Float>(g: &Graph<F>, features: Var, map: Var, mode: Modulation) -> Var {
    let mult = match mode {
        Modulation::Shifted => g.add_scalar(map, F::one()),
        Modulation::Raw => map,
    };
    g.mul_prefix(features, mult)
}

/// Adaptive average pooling of `[B, G^2, d]` to `[B, p^2, d]`.
pub fn pool_queries<F: Float>(g: &Graph<F>, grid_tokens: Var, grid: usize, pool: usize) -> Result<Var> {
    if pool == 0 || pool > grid {
        return Err(Error::Config(format!("pooling size {pool} exceeds grid size {grid}")));
    }
    let s = g.shape(grid_tokens);
    let x = g.reshape(grid_tokens, &[s[0], grid, grid, s[2]]);
    let x = g.adaptive_avg_pool2d(x, pool, pool);
    Ok(g.reshape(x, &[s[0], pool * pool, s[2]]))
}

/// Builds the anomaly map from per-layer scores.
pub fn build_map(scores: &[LayerScores]) -> Result<AnomalyAttentionMap> {
    let first = scores.first().ok_or_else(|| Error::Usage("no layer scores".into()))?;
    let shape = first.abnormal.shape().to_vec();
    if scores.iter().any(|s| s.abnormal.shape() != shape.as_slice() || s.normal.shape() != shape.as_slice()) {
        return Err(Error::Usage("layer score grids differ in shape".into()));
    }
    let g = Graph::<f32>::no_grad();
    let n = shape.iter().product::<usize>();
    let vars: Vec<(Var, Var)> = scores
        .iter()
        .map(|s| (g.constant(s.abnormal.clone().reshape(&[1, n])), g.constant(s.normal.clone().reshape(&[1, n]))))
        .collect();
    let map = g.value(build_map_var(&g, &vars)).as_ref().clone().reshape(&shape);
    assert_map_range(&map);
    Ok(AnomalyAttentionMap { values: map, layers: scores.to_vec() })
}

/// Rescales a final-layer grid `[G, G, d]` by an anomaly map `[G, G]`.
pub fn modulate(features: &Tensor<f32>, map: &AnomalyAttentionMap, mode: Modulation) -> Result<Tensor<f32>> {
    let s = features.shape();
    if s.len() != 3 || map.values.shape() != [s[0], s[1]] {
        return Err(Error::Usage(format!("map {:?} does not match grid {:?}", map.values.shape(), s)));
    }
    let g = Graph::<f32>::no_grad();
    let f = g.constant(features.clone().reshape(&[1, s[0] * s[1], s[2]]));
    let m = g.constant(map.values.clone().reshape(&[1, s[0] * s[1]]));
    Ok(g.value(modulate_var(&g, f, m, mode)).as_ref().clone().reshape(s))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(v: f32) -> Tensor<f32> {
        Tensor::full(&[8, 8], v)
    }

    #[test]
    fn map_is_mean_difference() {
        let s = LayerScores { abnormal: grid(0.9), normal: grid(0.1) };
        let m = build_map(&vec![s; 4]).unwrap();
        assert!(m.values.data().iter().all(|&v| (v - 0.8).abs() < 1e-6));
        let eq = LayerScores { abnormal: grid(0.3), normal: grid(0.3) };
        assert!(build_map(&vec![eq; 4]).unwrap().values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_map_is_identity_and_half_scales() {
        let feats = Tensor::from_f64(&[8, 8, 3], &(0..192).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>());
        let zero = AnomalyAttentionMap { values: grid(0.0), layers: vec![] };
        assert_eq!(modulate(&feats, &zero, Modulation::Shifted).unwrap(), feats);
        let mut half = grid(0.0);
        half.data_mut()[0] = 0.5;
        let out = modulate(&feats, &AnomalyAttentionMap { values: half, layers: vec![] }, Modulation::Shifted).unwrap();
        for c in 0..3 {
            assert_eq!(out.data()[c], feats.data()[c] * 1.5);
        }
    }

    #[test]
    fn pooling_geometry() {
        let g = Graph::<f32>::no_grad();
        let x = g.constant(Tensor::from_f64(&[1, 64, 2], &(0..128).map(|i| i as f64).collect::<Vec<_>>()));
        assert_eq!(g.shape(pool_queries(&g, x, 8, 4).unwrap()), [1, 16, 2]);
        let one = pool_queries(&g, x, 8, 1).unwrap();
        let mean: f32 = (0..64).map(|i| (2 * i) as f32).sum::<f32>() / 64.0;
        assert!((g.value(one).data()[0] - mean).abs() < 1e-4);
        assert!(matches!(pool_queries(&g, x, 8, 9), Err(Error::Config(_))));
    }
}
