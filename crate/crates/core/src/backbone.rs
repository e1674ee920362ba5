//! Pre-norm patch transformer encoder with taps on four intermediate layers
//! and optional soft prompts prepended at the tapped layers.

use lesionlm_tensor::{Float, Graph, Tensor, Var};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::image::{ImageTensor, Mask};
use crate::nn::{Block, LayerNorm, Linear};
use crate::params::{Ctx, ParamBuilder, ParamStore};

/// Multi-layer patch features of one image: the four tapped layers followed
/// by the final layer, each `[G, G, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatureSet {
    pub layers: Vec<Tensor<f32>>,
    pub grid: usize,
    pub dim: usize,
    /// 1-based encoder layer of each grid.
    pub layer_indices: Vec<usize>,
    /// Content hash of the source image.
    pub image_id: u64,
}

impl PatchFeatureSet {
    pub fn final_layer(&self) -> &Tensor<f32> {
        self.layers.last().expect("feature set has five grids")
    }

    pub fn intermediate(&self) -> &[Tensor<f32>] {
        &self.layers[..self.layers.len() - 1]
    }
}

/// Stable 64-bit id derived from the pixel bytes.
pub fn image_id(image: &ImageTensor) -> u64 {
    let mut h = Sha256::new();
    for v in image.pixels() {
        h.update(v.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Learnable prompt vectors, one `[n_prompts, dim]` set per tapped layer.
#[derive(Clone, Debug)]
pub struct SoftPromptBank {
    pub n_prompts: usize,
    pub dim: usize,
    pub layers: Vec<usize>,
    names: Vec<String>,
}

impl SoftPromptBank {
    pub fn new<F: Float>(pb: &mut ParamBuilder<F>, n_prompts: usize, dim: usize, layers: &[usize]) -> Self {
        let names = if n_prompts == 0 {
            Vec::new()
        } else {
            layers.iter().map(|l| pb.normal(&format!("prompts.layer{l}"), &[n_prompts, dim], 0.5)).collect()
        };
        Self { n_prompts, dim, layers: layers.to_vec(), names }
    }

    fn for_layer(&self, layer: usize) -> Option<&str> {
        if self.n_prompts == 0 {
            return None;
        }
        self.layers.iter().position(|&l| l == layer).map(|i| self.names[i].as_str())
    }
}

#[derive(Clone, Debug)]
pub struct VisionBackbone {
    patch: usize,
    grid: usize,
    dim: usize,
    tapped: Vec<usize>,
    patch_embed: Linear,
    pos: String,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
    coverage_head: Linear,
}

impl VisionBackbone {
    pub fn new<F: Float>(pb: &mut ParamBuilder<F>, cfg: &ModelConfig) -> Self {
        let (p, d) = (cfg.patch_size, cfg.enc_dim);
        Self {
            patch: p,
            grid: cfg.grid(),
            dim: d,
            tapped: cfg.tapped_layers.clone(),
            patch_embed: Linear::new(pb, "backbone.patch_embed", p * p, d, true),
            pos: pb.normal("backbone.pos", &[cfg.n_patches(), d], 0.02),
            blocks: (1..=cfg.enc_layers)
                .map(|l| Block::new(pb, &format!("backbone.block{l}"), d, cfg.enc_heads, cfg.enc_mlp_ratio))
                .collect(),
            ln_f: LayerNorm::new(pb, "backbone.ln_f", d),
            head: Linear::new(pb, "backbone.head", d, 2, true),
            coverage_head: Linear::new(pb, "backbone.coverage_head", d, 1, true),
        }
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// 1-based indices of the five returned grids.
    pub fn layer_indices(&self) -> Vec<usize> {
        let mut v = self.tapped.clone();
        v.push(self.blocks.len());
        v
    }

    /// Stacks images into `[B, G^2, patch^2]`.
    pub fn patch_batch<F: Float>(&self, images: &[&ImageTensor]) -> Result<Tensor<F>> {
        let mut data = Vec::with_capacity(images.len() * self.grid * self.grid * self.patch * self.patch);
        for img in images {
            if img.height() != self.grid * self.patch || img.width() != self.grid * self.patch {
                return Err(Error::Config(format!(
                    "image is {}x{}, encoder expects {}x{}",
                    img.height(),
                    img.width(),
                    self.grid * self.patch,
                    self.grid * self.patch
                )));
            }
            data.extend(img.patchify(self.patch)?.into_iter().map(|v| F::from_f64(v as f64)));
        }
        Ok(Tensor::new(&[images.len(), self.grid * self.grid, self.patch * self.patch], data))
    }

    pub fn check_prompts(&self, bank: &SoftPromptBank) -> Result<()> {
        if bank.dim != self.dim || bank.layers != self.tapped {
            return Err(Error::Config(format!(
                "prompt bank (dim {}, layers {:?}) does not match encoder (dim {}, tapped {:?})",
                bank.dim, bank.layers, self.dim, self.tapped
            )));
        }
        Ok(())
    }

    /// Runs the encoder on `patches: [B, G^2, patch^2]` and returns the five
    /// grids `[B, G^2, d]`: tapped layers in order, then the final layer after
    /// the closing layer norm.
    pub fn forward<F: Float>(&self, cx: &Ctx<F>, patches: Var, prompts: Option<&SoftPromptBank>) -> Result<Vec<Var>> {
        if let Some(bank) = prompts {
            self.check_prompts(bank)?;
        }
        let g = cx.g;
        let b = g.shape(patches)[0];
        let n = self.grid * self.grid;
        let x = self.patch_embed.forward(cx, patches);
        let mut x = g.add(x, cx.p(&self.pos));
        let mut taps = Vec::with_capacity(5);
        for (i, block) in self.blocks.iter().enumerate() {
            let layer = i + 1;
            let prompt = prompts.and_then(|bank| bank.for_layer(layer));
            x = match prompt {
                Some(name) => {
                    let np = g.shape(cx.p(name))[0];
                    let zeros = g.constant(Tensor::zeros(&[b, np, self.dim]));
                    let pr = g.add(zeros, cx.p(name));
                    let joined = g.concat(&[pr, x], 1);
                    let out = block.forward(cx, joined, false);
                    g.slice(out, 1, np, n)
                }
                None => block.forward(cx, x, false),
            };
            if self.tapped.contains(&layer) {
                taps.push(x);
            }
        }
        taps.push(self.ln_f.forward(cx, x));
        Ok(taps)
    }

    /// Normal/abnormal logits `[B, 2]` from the mean-pooled final grid.
    pub fn classify<F: Float>(&self, cx: &Ctx<F>, final_grid: Var) -> Var {
        let pooled = cx.g.mean_axis(final_grid, 1);
        self.head.forward(cx, pooled)
    }

    /// Per-patch lesion coverage in (0, 1), `[B, G^2, 1]`.
    pub fn coverage<F: Float>(&self, cx: &Ctx<F>, final_grid: Var) -> Var {
        cx.g.sigmoid(self.coverage_head.forward(cx, final_grid))
    }

    /// Fraction of lesion pixels in each patch, `[G^2]` in raster order.
    pub fn patch_coverage(&self, mask: &Mask) -> Vec<f32> {
        let p = self.patch;
        let mut out = vec![0.0; self.grid * self.grid];
        for y in 0..mask.height().min(self.grid * p) {
            for x in 0..mask.width().min(self.grid * p) {
                if mask.at(y, x) {
                    out[(y / p) * self.grid + x / p] += 1.0 / (p * p) as f32;
                }
            }
        }
        out
    }

    /// Single-image encoding without gradient tracking.
    pub fn encode(
        &self,
        store: &ParamStore<f32>,
        image: &ImageTensor,
        prompts: Option<&SoftPromptBank>,
    ) -> Result<PatchFeatureSet> {
        let g = Graph::no_grad();
        let cx = Ctx::frozen(&g, store);
        let x = g.constant(self.patch_batch::<f32>(&[image])?);
        let grids = self.forward(&cx, x, prompts)?;
        let layers = grids
            .iter()
            .map(|&v| g.value(v).as_ref().clone().reshape(&[self.grid, self.grid, self.dim]))
            .collect();
        Ok(PatchFeatureSet {
            layers,
            grid: self.grid,
            dim: self.dim,
            layer_indices: self.layer_indices(),
            image_id: image_id(image),
        })
    }
}

/// Accuracy of a logistic-regression probe fitted on `train` features and
/// evaluated on `test`. Features are standardised with training statistics.
pub fn linear_probe_accuracy(train: &[Vec<f64>], train_y: &[bool], test: &[Vec<f64>], test_y: &[bool]) -> f64 {
    assert!(!train.is_empty() && train.len() == train_y.len() && test.len() == test_y.len());
    let d = train[0].len();
    let n = train.len() as f64;
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for x in train {
        for j in 0..d {
            mean[j] += x[j] / n;
        }
    }
    for x in train {
        for j in 0..d {
            std[j] += (x[j] - mean[j]).powi(2) / n;
        }
    }
    let std: Vec<f64> = std.iter().map(|v| v.sqrt().max(1e-8)).collect();
    let norm = |x: &Vec<f64>| -> Vec<f64> { (0..d).map(|j| (x[j] - mean[j]) / std[j]).collect() };
    let xs: Vec<Vec<f64>> = train.iter().map(norm).collect();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let (lr, l2) = (0.5, 1e-3);
    for _ in 0..500 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, &y) in xs.iter().zip(train_y) {
            let z: f64 = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - if y { 1.0 } else { 0.0 };
            for j in 0..d {
                gw[j] += err * x[j] / n;
            }
            gb += err / n;
        }
        for j in 0..d {
            w[j] -= lr * (gw[j] + l2 * w[j]);
        }
        b -= lr * gb;
    }
    let correct = test
        .iter()
        .zip(test_y)
        .filter(|(x, &y)| {
            let x = norm(x);
            let z: f64 = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            (z > 0.0) == y
        })
        .count();
    correct as f64 / test.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (VisionBackbone, SoftPromptBank, ParamStore<f32>) {
        let cfg = ModelConfig::default();
        let mut pb = ParamBuilder::new(0);
        let bb = VisionBackbone::new(&mut pb, &cfg);
        let bank = SoftPromptBank::new(&mut pb, cfg.n_prompts, cfg.enc_dim, &cfg.tapped_layers);
        (bb, bank, pb.finish())
    }

    #[test]
    fn geometry_and_determinism() {
        let (bb, _, store) = setup();
        let img = ImageTensor::filled(64, 64, 0.3);
        let a = bb.encode(&store, &img, None).unwrap();
        assert_eq!(a.layers.len(), 5);
        assert_eq!(a.layer_indices, vec![2, 3, 4, 5, 6]);
        for l in &a.layers {
            assert_eq!(l.shape(), &[8, 8, 64]);
        }
        let b = bb.encode(&store, &img, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn prompts_change_features_but_not_shape() {
        let (bb, bank, store) = setup();
        let img = ImageTensor::new(64, 64, (0..4096).map(|i| (i % 17) as f32 / 17.0).collect()).unwrap();
        let plain = bb.encode(&store, &img, None).unwrap();
        let prompted = bb.encode(&store, &img, Some(&bank)).unwrap();
        assert_eq!(prompted.layers[0].shape(), &[8, 8, 64]);
        // layer 1 is untapped, so the first tapped grid already differs
        assert!(plain.layers[0].max_abs_diff(&prompted.layers[0]) > 0.0);
        assert!(plain.final_layer().max_abs_diff(prompted.final_layer()) > 0.0);
    }

    #[test]
    fn mismatched_prompt_bank_is_config_error() {
        let (bb, _, store) = setup();
        let mut pb = ParamBuilder::<f32>::new(1);
        let bad = SoftPromptBank::new(&mut pb, 4, 32, &[2, 3, 4, 5]);
        let img = ImageTensor::filled(64, 64, 0.5);
        assert!(matches!(bb.encode(&store, &img, Some(&bad)), Err(Error::Config(_))));
    }

    #[test]
    fn probe_separates_separable_data() {
        let train: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64, 1.0]).collect();
        let ty: Vec<bool> = (0..40).map(|i| i >= 20).collect();
        let test = vec![vec![2.0, 1.0], vec![35.0, 1.0]];
        assert_eq!(linear_probe_accuracy(&train, &ty, &test, &[false, true]), 1.0);
    }
}
