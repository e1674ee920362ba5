//! Heatmap head: each tapped grid cross-attends to the `<Ano>` tokens, the
//! fused grids are stacked channel-wise and a ConvNeXt-style stack with
//! depth-to-space 2x steps decodes them to input resolution.

use lesionlm_tensor::{Float, Graph, Tensor, Var};

use crate::anomaly::{batch1, AnoTokenSet};
use crate::backbone::PatchFeatureSet;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Attention, LayerNorm, Linear};
use crate::params::{Ctx, ParamBuilder, ParamStore};

pub const DICE_EPS: f64 = 1.0;
const KERNEL: usize = 7;
const EXPANSION: usize = 4;
const HEAD_BIAS: f64 = -2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// `[H, W]`, every value in `[0, 1]`.
    pub values: Tensor<f32>,
    pub image_id: u64,
}

#[derive(Clone, Debug)]
struct FusionBlock {
    ln: LayerNorm,
    attn: Attention,
}

#[derive(Clone, Debug)]
struct ConvNextBlock {
    dw_w: String,
    dw_b: String,
    ln: LayerNorm,
    pw1: Linear,
    pw2: Linear,
}

impl ConvNextBlock {
    fn new<F: Float>(pb: &mut ParamBuilder<F>, name: &str, c: usize) -> Self {
        Self {
            dw_w: pb.normal(&format!("{name}.dw.w"), &[KERNEL, KERNEL, c], 1.0 / KERNEL as f64),
            dw_b: pb.full(&format!("{name}.dw.b"), &[c], 0.0),
            ln: LayerNorm::new(pb, &format!("{name}.ln"), c),
            pw1: Linear::new(pb, &format!("{name}.pw1"), c, EXPANSION * c, true),
            pw2: Linear::with_std(pb, &format!("{name}.pw2"), EXPANSION * c, c, true, 0.1 / ((EXPANSION * c) as f64).sqrt()),
        }
    }

    /// `x: [B, H, W, C]`.
    fn forward<F: Float>(&self, cx: &Ctx<F>, x: Var) -> Var {
        let g = cx.g;
        let h = g.dwconv2d(x, cx.p(&self.dw_w), cx.p(&self.dw_b));
        let h = self.ln.forward(cx, h);
        let h = self.pw1.forward(cx, h);
        let h = g.gelu(h);
        let h = self.pw2.forward(cx, h);
        g.add(x, h)
    }
}

#[derive(Clone, Debug)]
pub struct HeatmapDecoder {
    grid: usize,
    dim: usize,
    image_size: usize,
    fusion: Vec<FusionBlock>,
    stem: Linear,
    stages: Vec<Vec<ConvNextBlock>>,
    ups: Vec<Linear>,
    head: Linear,
}

impl HeatmapDecoder {
    pub fn new<F: Float>(pb: &mut ParamBuilder<F>, cfg: &ModelConfig) -> Self {
        let d = cfg.enc_dim;
        let w = &cfg.decoder_widths;
        let fusion = (0..4)
            .map(|i| FusionBlock {
                ln: LayerNorm::new(pb, &format!("heatmap.fusion{i}.ln"), d),
                attn: Attention::new(pb, &format!("heatmap.fusion{i}.attn"), d, cfg.lm_dim, cfg.fusion_dim, cfg.qformer_heads),
            })
            .collect();
        let stages = w
            .iter()
            .zip(&cfg.decoder_blocks)
            .enumerate()
            .map(|(s, (&c, &n))| (0..n).map(|j| ConvNextBlock::new(pb, &format!("heatmap.stage{s}.block{j}"), c)).collect())
            .collect();
        let ups = (0..w.len() - 1).map(|s| Linear::new(pb, &format!("heatmap.up{s}"), w[s], 4 * w[s + 1], true)).collect();
        let head = Linear::new(pb, "heatmap.head", *w.last().unwrap(), 1, true);
        pb.store.get_mut(head.bias_name().unwrap()).data_mut()[0] = F::from_f64(HEAD_BIAS);
        Self {
            grid: cfg.grid(),
            dim: d,
            image_size: cfg.image_size,
            fusion,
            stem: Linear::new(pb, "heatmap.stem", 4 * d, w[0], true),
            stages,
            ups,
            head,
        }
    }

    /// Pixel logits `[B, H*W]` from the four intermediate grids
    /// (`[B, G^2, d]` each) and `<Ano>` tokens `[B, p^2, d_lm]`.
    pub fn forward<F: Float>(&self, cx: &Ctx<F>, intermediate: &[Var], ano: Var) -> Result<Var> {
        if intermediate.len() != 4 {
            return Err(Error::Config(format!("heatmap head needs 4 intermediate grids, got {}", intermediate.len())));
        }
        let g = cx.g;
        let b = g.shape(ano)[0];
        let fused: Vec<Var> = intermediate
            .iter()
            .zip(&self.fusion)
            .map(|(&x, f)| {
                let q = f.ln.forward(cx, x);
                let h = f.attn.forward(cx, q, ano, false);
                g.add(x, h)
            })
            .collect();
        let x = g.concat(&fused, 2);
        let x = self.stem.forward(cx, x);
        let c0 = g.shape(x)[2];
        let mut x = g.reshape(x, &[b, self.grid, self.grid, c0]);
        for (s, blocks) in self.stages.iter().enumerate() {
            for blk in blocks {
                x = blk.forward(cx, x);
            }
            if let Some(up) = self.ups.get(s) {
                let h = up.forward(cx, x);
                x = g.pixel_shuffle2x(h);
            }
        }
        let logits = self.head(cx, x);
        Ok(g.reshape(logits, &[b, self.image_size * self.image_size]))
    }

    /// The final per-pixel projection, `[B, H, W, C] -> [B, H, W, 1]`.
    pub fn head<F: Float>(&self, cx: &Ctx<F>, x: Var) -> Var {
        self.head.forward(cx, x)
    }

    pub fn decode_heatmap(&self, store: &ParamStore<f32>, features: &PatchFeatureSet, ano: &AnoTokenSet) -> Result<Heatmap> {
        if features.image_id != ano.image_id {
            return Err(Error::Usage(format!(
                "features of image {:016x} paired with <Ano> tokens of image {:016x}",
                features.image_id, ano.image_id
            )));
        }
        if features.grid != self.grid || features.dim != self.dim {
            return Err(Error::Config("feature set does not match the heatmap head".into()));
        }
        let g = Graph::no_grad();
        let cx = Ctx::frozen(&g, store);
        let inter: Vec<Var> = features.intermediate().iter().map(|t| g.constant(batch1(t))).collect();
        let a = g.constant(batch1(&ano.tokens));
        let logits = self.forward(&cx, &inter, a)?;
        let probs = g.sigmoid(logits);
        let values = g.value(probs).as_ref().clone().reshape(&[self.image_size, self.image_size]);
        Ok(Heatmap { values, image_id: features.image_id })
    }
}

/// Equal-weight mean of soft Dice (smoothing 1) and pixel-mean binary
/// cross-entropy between a probability map and a binary mask.
pub fn dice_ce_loss(pred: &Heatmap, mask: &[f32]) -> Result<f64> {
    if pred.values.numel() != mask.len() {
        return Err(Error::Usage(format!("heatmap has {} pixels, mask {}", pred.values.numel(), mask.len())));
    }
    if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(Error::Usage("mask must be binary".into()));
    }
    let (mut inter, mut psum, mut msum, mut bce) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (&p, &m) in pred.values.data().iter().zip(mask) {
        let (p, m) = (p as f64, m as f64);
        inter += p * m;
        psum += p;
        msum += m;
        let pc = p.clamp(1e-7, 1.0 - 1e-7);
        bce -= m * pc.ln() + (1.0 - m) * (1.0 - pc).ln();
    }
    let dice = 1.0 - (2.0 * inter + DICE_EPS) / (psum + msum + DICE_EPS);
    Ok(0.5 * dice + 0.5 * bce / mask.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_prediction_on_half_mask() {
        let pred = Heatmap { values: Tensor::full(&[4, 4], 0.5), image_id: 0 };
        let mask: Vec<f32> = (0..16).map(|i| (i % 2) as f32).collect();
        let loss = dice_ce_loss(&pred, &mask).unwrap();
        let dice = 1.0 - (2.0 * 4.0 + 1.0) / (8.0 + 8.0 + 1.0);
        assert!((loss - (0.5 * dice + 0.5 * std::f64::consts::LN_2)).abs() < 1e-9);
    }

    #[test]
    fn exact_prediction_has_near_zero_loss() {
        let mask: Vec<f32> = (0..16).map(|i| (i < 5) as u8 as f32).collect();
        let pred = Heatmap { values: Tensor::new(&[4, 4], mask.clone()), image_id: 0 };
        assert!(dice_ce_loss(&pred, &mask).unwrap() < 1e-6);
    }

    #[test]
    fn non_binary_mask_rejected() {
        let pred = Heatmap { values: Tensor::full(&[2, 2], 0.5), image_id: 0 };
        assert!(matches!(dice_ce_loss(&pred, &[0.0, 0.5, 1.0, 0.0]), Err(Error::Usage(_))));
    }
}
