//! Run configuration: model shapes, corpus sizes, stage budgets and
//! evaluation settings. Every field has a default so a config file only
//! needs the keys it changes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the anomaly map rescales the final-layer patch features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modulation {
    /// `x * (1 + map)`: identity at zero salience.
    #[default]
    Shifted,
    /// `x * map`.
    Raw,
}

/// Which encoder grids feed the anomaly scorer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// The four tapped intermediate layers.
    #[default]
    Intermediate,
    /// Only the final encoder layer.
    LastLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub enc_dim: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub enc_mlp_ratio: usize,
    /// 1-based encoder layers whose outputs are tapped; must be four layers
    /// strictly below the last one.
    pub tapped_layers: Vec<usize>,
    /// Soft prompts per tapped layer.
    pub n_prompts: usize,
    /// Side of the pooled query grid; `pool^2` tokens per image.
    pub pool: usize,
    pub qformer_dim: usize,
    pub qformer_heads: usize,
    pub lm_dim: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub lm_context: usize,
    pub adapter_dim: usize,
    pub fusion_dim: usize,
    /// Channel widths of the heatmap head, one per resolution from the patch
    /// grid up to the input resolution.
    pub decoder_widths: Vec<usize>,
    pub decoder_blocks: Vec<usize>,
    pub modulation: Modulation,
    pub feature_source: FeatureSource,
    /// Build `<Diff>` tokens from raw final-layer features and drop the
    /// `<Ano>` blocks from pair sequences.
    pub ablate_ano: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            enc_dim: 64,
            enc_layers: 6,
            enc_heads: 4,
            enc_mlp_ratio: 4,
            tapped_layers: vec![2, 3, 4, 5],
            n_prompts: 10,
            pool: 4,
            qformer_dim: 64,
            qformer_heads: 4,
            lm_dim: 128,
            lm_layers: 4,
            lm_heads: 4,
            lm_context: 384,
            adapter_dim: 32,
            fusion_dim: 64,
            decoder_widths: vec![96, 32, 16, 8],
            decoder_blocks: vec![2, 1, 0, 0],
            modulation: Modulation::Shifted,
            feature_source: FeatureSource::Intermediate,
            ablate_ano: false,
        }
    }
}

impl ModelConfig {
    /// Patches per image side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn n_query_tokens(&self) -> usize {
        self.pool * self.pool
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!("image size {} is not divisible by patch size {}", self.image_size, self.patch_size));
        }
        if self.enc_layers < 2 {
            return bad("encoder needs at least two layers".into());
        }
        if self.tapped_layers.len() != 4 {
            return bad(format!("expected 4 tapped layers, got {}", self.tapped_layers.len()));
        }
        if self.tapped_layers.windows(2).any(|w| w[0] >= w[1]) {
            return bad("tapped layers must be strictly increasing".into());
        }
        if self.tapped_layers[0] == 0 || *self.tapped_layers.last().unwrap() >= self.enc_layers {
            return bad(format!("tapped layers must lie in 1..{}", self.enc_layers));
        }
        for (name, dim, heads) in [
            ("encoder", self.enc_dim, self.enc_heads),
            ("q-former", self.qformer_dim, self.qformer_heads),
            ("language model", self.lm_dim, self.lm_heads),
            ("fusion", self.fusion_dim, self.qformer_heads),
        ] {
            if heads == 0 || dim % heads != 0 {
                return bad(format!("{name} width {dim} is not divisible by {heads} heads"));
            }
        }
        if self.pool == 0 || self.pool > self.grid() {
            return bad(format!("pooling size {} must lie in 1..={}", self.pool, self.grid()));
        }
        if !self.patch_size.is_power_of_two() {
            return bad(format!("patch size {} must be a power of two", self.patch_size));
        }
        let steps = self.patch_size.trailing_zeros() as usize;
        if self.decoder_widths.len() != steps + 1 || self.decoder_blocks.len() != steps + 1 {
            return bad(format!("decoder needs {} widths and block counts (one per resolution)", steps + 1));
        }
        if self.decoder_widths.contains(&0) {
            return bad("decoder widths must be positive".into());
        }
        Ok(())
    }
}

/// Size, learning rate and duration of one training stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageBudget {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub backbone: StageBudget,
    /// Text-only sequences drawn for the language-model warmup.
    pub lm_warmup_samples: usize,
    pub lm_warmup: StageBudget,
    pub stage1: StageBudget,
    pub stage2: StageBudget,
    pub stage3: StageBudget,
    pub weight_decay: f64,
    /// Fraction of steps spent in linear warmup before the cosine decay.
    pub warmup_frac: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    /// Text-only probe sequences checked for bit-identical answers across
    /// stages 1 and 2.
    pub probe_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            backbone: StageBudget { epochs: 16, batch_size: 32, lr: 1e-3 },
            lm_warmup_samples: 6000,
            lm_warmup: StageBudget { epochs: 1, batch_size: 16, lr: 1e-3 },
            stage1: StageBudget { epochs: 3, batch_size: 16, lr: 1e-4 },
            stage2: StageBudget { epochs: 3, batch_size: 16, lr: 1e-4 },
            stage3: StageBudget { epochs: 100, batch_size: 32, lr: 1e-3 },
            weight_decay: 0.01,
            warmup_frac: 0.03,
            grad_clip: 1.0,
            probe_count: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub backbone_pretrain: usize,
    pub stage1: usize,
    pub stage2: usize,
    pub stage3: usize,
    pub test_singles: usize,
    pub test_pairs: usize,
    pub abnormal_prob: f64,
    /// Abnormal fraction of the mask-supervised stage-3 split.
    pub stage3_abnormal_prob: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
    pub max_blobs: usize,
    /// Largest absolute brightness change applied to the second image of a pair.
    pub brightness_shift: f64,
    /// Largest translation (pixels, each axis) applied to the second image.
    pub max_shift: i32,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            backbone_pretrain: 4000,
            stage1: 6000,
            stage2: 3000,
            stage3: 1000,
            test_singles: 500,
            test_pairs: 300,
            abnormal_prob: 0.5,
            stage3_abnormal_prob: 0.7,
            contrast_min: 0.35,
            contrast_max: 0.5,
            max_blobs: 3,
            brightness_shift: 0.1,
            max_shift: 2,
        }
    }
}

/// Micro (per sample) or macro (per class) averaging of progression accuracy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    #[default]
    Micro,
    Macro,
}

/// Reduced budget used for every cell of the ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub stage1_samples: usize,
    pub stage2_samples: usize,
    pub epochs: usize,
    pub eval_singles: usize,
    pub eval_pairs: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { stage1_samples: 2000, stage2_samples: 1000, epochs: 1, eval_singles: 300, eval_pairs: 300 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub miou_threshold: f64,
    pub overall: Averaging,
    pub max_new_tokens: usize,
    /// Images rendered as overlays by `eval --task ground`.
    pub overlays: usize,
    pub ablation: AblationConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            miou_threshold: 0.5,
            overall: Averaging::Micro,
            max_new_tokens: 6,
            overlays: 16,
            ablation: AblationConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let d = &self.data;
        if !(0.0..=1.0).contains(&d.abnormal_prob) || !(0.0..=1.0).contains(&d.stage3_abnormal_prob) {
            return Err(Error::Config("abnormal probabilities must lie in [0, 1]".into()));
        }
        if d.contrast_min <= 0.0 || d.contrast_min > d.contrast_max {
            return Err(Error::Config("lesion contrast range is empty".into()));
        }
        if d.max_blobs == 0 {
            return Err(Error::Config("max_blobs must be at least 1".into()));
        }
        let t = &self.train;
        for (name, b) in [
            ("backbone", t.backbone),
            ("lm_warmup", t.lm_warmup),
            ("stage1", t.stage1),
            ("stage2", t.stage2),
            ("stage3", t.stage3),
        ] {
            if b.batch_size == 0 || !(b.lr > 0.0) {
                return Err(Error::Config(format!("{name}: batch size and learning rate must be positive")));
            }
        }
        if !(0.0..1.0).contains(&t.warmup_frac) {
            return Err(Error::Config("warmup_frac must lie in [0, 1)".into()));
        }
        Ok(())
    }
}
