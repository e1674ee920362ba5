//! Stage-wise training: plans, optimizer, schedule and the per-stage loops.
//!
//! Every stage binds only its trainable groups as gradient leaves; all other
//! parameters enter the graph as constants. The loop still measures the
//! gradient reaching frozen groups on every step and fails hard if it is not
//! exactly zero, and frozen-group digests are compared before and after.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use lesionlm_tensor::{Graph, Tensor, Var};
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, StageBudget, TrainConfig};
use crate::data::{Corpus, SyntheticSample};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::model::LesionLm;
use crate::params::{Ctx, Group, ParamStore};
use crate::textgen::{text_probes, warmup_batch, TextShapes};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Encoder pretraining (normal vs abnormal, per image and per patch).
    Backbone,
    /// Language-model warmup on text-only sequences.
    LmWarmup,
    One,
    Two,
    Three,
    /// Stage-1 and Stage-2 groups trained together.
    Joint,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Backbone => "0-backbone",
            Stage::LmWarmup => "0-lm",
            Stage::One => "1",
            Stage::Two => "2",
            Stage::Three => "3",
            Stage::Joint => "joint",
        }
    }

    /// The stage whose checkpoint this one starts from.
    pub fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::Backbone => None,
            Stage::LmWarmup => Some(Stage::Backbone),
            Stage::One | Stage::Joint => Some(Stage::LmWarmup),
            Stage::Two => Some(Stage::One),
            Stage::Three => Some(Stage::Two),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    DiceCe,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub stage: Stage,
    pub trainable: BTreeSet<Group>,
    pub frozen: BTreeSet<Group>,
    pub loss: LossKind,
    pub budget: StageBudget,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub grad_clip: f64,
}

impl StagePlan {
    pub fn for_stage(stage: Stage, cfg: &TrainConfig) -> Self {
        use Group::*;
        let (groups, loss, budget): (&[Group], _, _) = match stage {
            Stage::Backbone => (&[Backbone], LossKind::CrossEntropy, cfg.backbone),
            Stage::LmWarmup => (&[Lm], LossKind::CrossEntropy, cfg.lm_warmup),
            Stage::One => (&[Prompts, Anomaly, Adapter], LossKind::CrossEntropy, cfg.stage1),
            Stage::Two => (&[Diff], LossKind::CrossEntropy, cfg.stage2),
            Stage::Three => (&[Heatmap], LossKind::DiceCe, cfg.stage3),
            Stage::Joint => (&[Prompts, Anomaly, Adapter, Diff], LossKind::CrossEntropy, cfg.stage1),
        };
        let trainable: BTreeSet<Group> = groups.iter().copied().collect();
        let frozen = Group::ALL.iter().copied().filter(|g| !trainable.contains(g)).collect();
        Self {
            stage,
            trainable,
            frozen,
            loss,
            budget,
            weight_decay: cfg.weight_decay,
            warmup_frac: cfg.warmup_frac,
            grad_clip: cfg.grad_clip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trainable.iter().any(|g| self.frozen.contains(g)) {
            return Err(Error::Config(format!("stage {}: trainable and frozen sets overlap", self.stage)));
        }
        if self.trainable.len() + self.frozen.len() != Group::ALL.len() {
            return Err(Error::Config(format!("stage {}: parameter groups not fully covered", self.stage)));
        }
        if self.trainable.is_empty() {
            return Err(Error::Config(format!("stage {} trains nothing", self.stage)));
        }
        if self.budget.batch_size == 0 || self.budget.epochs == 0 || !(self.budget.lr > 0.0) {
            return Err(Error::Config(format!("stage {}: empty budget", self.stage)));
        }
        Ok(())
    }
}

/// Linear warmup followed by cosine decay to zero.
#[derive(Clone, Copy, Debug)]
pub struct CosineSchedule {
    pub base: f64,
    pub total: usize,
    pub warmup: usize,
}

impl CosineSchedule {
    pub fn new(base: f64, total: usize, warmup_frac: f64) -> Self {
        let warmup = ((total as f64) * warmup_frac).round() as usize;
        Self { base, total, warmup: warmup.min(total.saturating_sub(1)) }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.base * (step + 1) as f64 / self.warmup as f64;
        }
        let span = (self.total - self.warmup).max(1) as f64;
        let t = (step - self.warmup) as f64 / span;
        0.5 * self.base * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// AdamW with decoupled weight decay on matrices (biases, norms and 1-D
/// parameters are not decayed).
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[(String, Tensor<f32>)], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = store.get_mut(name);
            let decay = if p.shape().len() >= 2 { self.weight_decay } else { 0.0 };
            let n = p.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i] as f64;
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let upd = (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                let wv = *w as f64;
                *w = (wv - lr * (upd + decay * wv)) as f32;
            }
        }
    }
}

/// One line of the JSON-lines metrics log. Contains no timing so that logs
/// of identical runs are byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: Stage,
    pub step: usize,
    pub epoch: usize,
    pub samples: usize,
    pub loss: f64,
    pub loss_kind: LossKind,
    pub lr: f64,
    pub grad_norm: f64,
    pub frozen_grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub steps: usize,
    pub samples_seen: usize,
    /// Mean loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean loss over the first and the last tenth of the first epoch.
    pub first_epoch_start: f64,
    pub first_epoch_end: f64,
    pub max_frozen_grad_norm: f64,
    pub checksums_before: BTreeMap<Group, String>,
    pub checksums_after: BTreeMap<Group, String>,
}

/// Options that tests and the ablation harness use to shorten or perturb a run.
#[derive(Clone, Debug, Default)]
pub struct StageOptions {
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Replace the loss of this step with NaN (fault injection).
    pub poison_step: Option<usize>,
}

struct StepOutcome {
    loss: f64,
    grad_norm: f64,
    frozen_grad_norm: f64,
}

/// Builds the loss with only `plan.trainable` bound as leaves, checks the
/// frozen gradient, and applies one optimizer step. On a non-finite loss or
/// gradient the store is left untouched.
fn train_step<L>(
    store: &mut ParamStore<f32>,
    opt: &mut AdamW,
    plan: &StagePlan,
    lr: f64,
    step: usize,
    poison: bool,
    loss_fn: L,
) -> Result<StepOutcome>
where
    L: FnOnce(&Ctx<f32>) -> Result<Var>,
{
    let (loss, mut grads, frozen_sq) = {
        let g = Graph::new();
        let cx = Ctx::new(&g, store, plan.trainable.iter().copied());
        let l = loss_fn(&cx)?;
        let loss = if poison { f64::NAN } else { g.value(l).item() as f64 };
        let mut all = g.backward(l);
        let mut grads = Vec::new();
        let mut frozen_sq = 0.0;
        for (name, var) in cx.bound() {
            let group = Group::of(&name).expect("bound parameter has a group");
            match all.take(var) {
                Some(t) if plan.trainable.contains(&group) => grads.push((name, t)),
                Some(t) => frozen_sq += t.sq_norm(),
                None => {}
            }
        }
        (loss, grads, frozen_sq)
    };
    if !loss.is_finite() {
        return Err(Error::Diverged { stage: plan.stage.to_string(), step, loss });
    }
    if frozen_sq != 0.0 {
        let group = plan.frozen.iter().next().map(|g| g.as_str()).unwrap_or("?").to_string();
        return Err(Error::FrozenGradient { stage: plan.stage.to_string(), group, norm: frozen_sq.sqrt() });
    }
    let sq: f64 = grads.iter().map(|(_, t)| t.sq_norm()).sum();
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::Diverged { stage: plan.stage.to_string(), step, loss: norm });
    }
    if plan.grad_clip > 0.0 && norm > plan.grad_clip {
        let s = (plan.grad_clip / norm) as f32;
        for (_, t) in grads.iter_mut() {
            *t = t.map(|v| v * s);
        }
    }
    opt.step(store, &grads, lr);
    Ok(StepOutcome { loss, grad_norm: norm, frozen_grad_norm: frozen_sq.sqrt() })
}

fn stage_seed(seed: u64, stage: Stage) -> u64 {
    let tag = match stage {
        Stage::Backbone => 1,
        Stage::LmWarmup => 2,
        Stage::One => 3,
        Stage::Two => 4,
        Stage::Three => 5,
        Stage::Joint => 6,
    };
    seed.wrapping_mul(1_000_003).wrapping_add(tag)
}

/// A unit of work for one optimizer step.
enum Batch<'c> {
    Images(Vec<&'c SyntheticSample>),
    Pairs(Vec<&'c SyntheticSample>),
    Text(crate::textgen::TextBatch),
    Masks(Vec<usize>),
}

impl Batch<'_> {
    fn len(&self) -> usize {
        match self {
            Batch::Images(v) | Batch::Pairs(v) => v.len(),
            Batch::Text(t) => t.prefixes.len(),
            Batch::Masks(v) => v.len(),
        }
    }
}

fn chunked<'c>(rng: &mut ChaCha8Rng, items: &'c [SyntheticSample], batch: usize) -> Vec<Vec<&'c SyntheticSample>> {
    let mut order: Vec<&SyntheticSample> = items.iter().collect();
    order.shuffle(rng);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

/// Per-image frozen inputs of the heatmap head, computed once per stage.
pub struct HeatmapCache {
    pub intermediate: Vec<Vec<Tensor<f32>>>,
    pub ano: Vec<Tensor<f32>>,
    pub masks: Vec<Vec<f32>>,
}

impl HeatmapCache {
    pub fn build(model: &LesionLm, store: &ParamStore<f32>, samples: &[SyntheticSample]) -> Result<Self> {
        let mut cache = HeatmapCache { intermediate: Vec::new(), ano: Vec::new(), masks: Vec::new() };
        for chunk in samples.chunks(32) {
            let images: Vec<&ImageTensor> = chunk.iter().map(|s| &s.images[0]).collect();
            let (inter, ano) = model.heatmap_inputs(store, &images)?;
            for i in 0..chunk.len() {
                cache.intermediate.push(inter.iter().map(|t| t.narrow0(i, 1)).collect());
                cache.ano.push(ano.narrow0(i, 1));
                cache.masks.push(chunk[i].masks[0].as_f32());
            }
        }
        Ok(cache)
    }

    fn stacked(&self, idx: &[usize]) -> (Vec<Tensor<f32>>, Tensor<f32>, Tensor<f32>) {
        let cat = |parts: Vec<&Tensor<f32>>| {
            let s = parts[0].shape().to_vec();
            let t = Tensor::stack(&parts);
            let mut shape = vec![parts.len()];
            shape.extend_from_slice(&s[1..]);
            t.reshape(&shape)
        };
        let inter = (0..4).map(|l| cat(idx.iter().map(|&i| &self.intermediate[i][l]).collect())).collect();
        let ano = cat(idx.iter().map(|&i| &self.ano[i]).collect());
        let p = self.masks[0].len();
        let masks = Tensor::new(&[idx.len(), p], idx.iter().flat_map(|&i| self.masks[i].iter().copied()).collect());
        (inter, ano, masks)
    }
}

/// Runs one stage in place on `store`. `log` receives every step record.
pub fn run_stage(
    model: &LesionLm,
    store: &mut ParamStore<f32>,
    stage: Stage,
    corpus: &Corpus,
    cfg: &RunConfig,
    opts: &StageOptions,
    log: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<StageReport> {
    let plan = StagePlan::for_stage(stage, &cfg.train);
    plan.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, stage));
    let bs = plan.budget.batch_size;

    let mut heat_cache = None;
    let mut epochs: Vec<Vec<Batch>> = Vec::new();
    match stage {
        Stage::Backbone => {
            let split = corpus.split("backbone-pretrain")?;
            for _ in 0..plan.budget.epochs {
                epochs.push(chunked(&mut rng, split, bs).into_iter().map(Batch::Images).collect());
            }
        }
        Stage::LmWarmup => {
            let shapes = text_shapes(model);
            let steps = cfg.train.lm_warmup_samples.div_ceil(bs);
            for _ in 0..plan.budget.epochs {
                let mut left = cfg.train.lm_warmup_samples;
                let mut ep = Vec::with_capacity(steps);
                while left > 0 {
                    let n = left.min(bs);
                    ep.push(Batch::Text(warmup_batch(&mut rng, &model.vocab, &shapes, n)));
                    left -= n;
                }
                epochs.push(ep);
            }
        }
        Stage::One => {
            let split = corpus.split("stage1")?;
            for _ in 0..plan.budget.epochs {
                epochs.push(chunked(&mut rng, split, bs).into_iter().map(Batch::Images).collect());
            }
        }
        Stage::Two => {
            let split = corpus.split("stage2")?;
            for _ in 0..plan.budget.epochs {
                epochs.push(chunked(&mut rng, split, bs).into_iter().map(Batch::Pairs).collect());
            }
        }
        Stage::Joint => {
            let singles = corpus.split("stage1")?;
            let pairs = corpus.split("stage2")?;
            let (e1, e2) = (cfg.train.stage1.epochs, cfg.train.stage2.epochs);
            let bs2 = cfg.train.stage2.batch_size;
            for e in 0..e1.max(e2) {
                let mut ep: Vec<Batch> = Vec::new();
                if e < e1 {
                    ep.extend(chunked(&mut rng, singles, bs).into_iter().map(Batch::Images));
                }
                if e < e2 {
                    ep.extend(chunked(&mut rng, pairs, bs2).into_iter().map(Batch::Pairs));
                }
                ep.shuffle(&mut rng);
                epochs.push(ep);
            }
        }
        Stage::Three => {
            let split = corpus.split("stage3")?;
            info!("caching heatmap inputs for {} images", split.len());
            heat_cache = Some(HeatmapCache::build(model, store, split)?);
            let n = split.len();
            for _ in 0..plan.budget.epochs {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                epochs.push(order.chunks(bs).map(|c| Batch::Masks(c.to_vec())).collect());
            }
        }
    }

    let total: usize = epochs.iter().map(|e| e.len()).sum();
    let total = opts.max_steps.map_or(total, |m| m.min(total));
    let sched = CosineSchedule::new(plan.budget.lr, total, plan.warmup_frac);
    let mut opt = AdamW::new(plan.weight_decay);
    let checksums_before = store.checksum_report();
    let mut step = 0;
    let mut samples = 0;
    let mut epoch_losses = Vec::new();
    let mut first_epoch: Vec<f64> = Vec::new();
    let mut max_frozen = 0.0f64;
    for (e, batches) in epochs.into_iter().enumerate() {
        let mut sum = 0.0;
        let mut count = 0;
        for batch in batches {
            if step >= total {
                break;
            }
            let lr = sched.lr(step);
            let poison = opts.poison_step == Some(step);
            let n = batch.len();
            let out = train_step(store, &mut opt, &plan, lr, step, poison, |cx| match &batch {
                Batch::Images(b) if stage == Stage::Backbone => backbone_loss(model, cx, b),
                Batch::Images(b) => model.single_loss(cx, b),
                Batch::Pairs(b) => model.pair_loss(cx, b),
                Batch::Text(t) => text_loss(model, cx, t),
                Batch::Masks(idx) => heatmap_loss(model, cx, heat_cache.as_ref().unwrap(), idx),
            })?;
            samples += n;
            max_frozen = max_frozen.max(out.frozen_grad_norm);
            log(&StepRecord {
                stage,
                step,
                epoch: e,
                samples,
                loss: out.loss,
                loss_kind: plan.loss,
                lr,
                grad_norm: out.grad_norm,
                frozen_grad_norm: out.frozen_grad_norm,
            })?;
            if e == 0 {
                first_epoch.push(out.loss);
            }
            sum += out.loss;
            count += 1;
            step += 1;
        }
        if count > 0 {
            epoch_losses.push(sum / count as f64);
            info!("stage {stage} epoch {e}: mean loss {:.4}", sum / count as f64);
        }
        if step >= total {
            break;
        }
    }

    let checksums_after = store.checksum_report();
    for g in &plan.frozen {
        if checksums_before.get(g) != checksums_after.get(g) {
            return Err(Error::ChecksumDrift { stage: stage.to_string(), group: g.as_str().to_string() });
        }
    }
    let tenth = (first_epoch.len() / 10).max(1);
    let mean = |s: &[f64]| if s.is_empty() { f64::NAN } else { s.iter().sum::<f64>() / s.len() as f64 };
    Ok(StageReport {
        stage,
        steps: step,
        samples_seen: samples,
        epoch_losses,
        first_epoch_start: mean(&first_epoch[..tenth.min(first_epoch.len())]),
        first_epoch_end: mean(&first_epoch[first_epoch.len().saturating_sub(tenth)..]),
        max_frozen_grad_norm: max_frozen,
        checksums_before,
        checksums_after,
    })
}

/// Samples a stage consumes under its full budget.
pub fn planned_samples(stage: Stage, cfg: &RunConfig, corpus: &Corpus) -> Result<usize> {
    let t = &cfg.train;
    Ok(match stage {
        Stage::Backbone => t.backbone.epochs * corpus.split("backbone-pretrain")?.len(),
        Stage::LmWarmup => t.lm_warmup.epochs * t.lm_warmup_samples,
        Stage::One => t.stage1.epochs * corpus.split("stage1")?.len(),
        Stage::Two => t.stage2.epochs * corpus.split("stage2")?.len(),
        Stage::Three => t.stage3.epochs * corpus.split("stage3")?.len(),
        Stage::Joint => planned_samples(Stage::One, cfg, corpus)? + planned_samples(Stage::Two, cfg, corpus)?,
    })
}

/// Weight of the per-patch coverage term in encoder pretraining.
const COVERAGE_WEIGHT: f32 = 100.0;

fn backbone_loss(model: &LesionLm, cx: &Ctx<f32>, batch: &[&SyntheticSample]) -> Result<Var> {
    let images: Vec<&ImageTensor> = batch.iter().map(|s| &s.images[0]).collect();
    let x = cx.g.constant(model.backbone.patch_batch::<f32>(&images)?);
    let grids = model.backbone.forward(cx, x, None)?;
    let last = *grids.last().unwrap();
    let logits = model.backbone.classify(cx, last);
    let y: Vec<usize> = batch.iter().map(|s| (s.label == crate::data::Label::Abnormal) as usize).collect();
    let g = cx.g;
    let n = model.cfg.n_patches();
    let target: Vec<f32> = batch.iter().flat_map(|s| model.backbone.patch_coverage(&s.masks[0])).collect();
    let target = g.constant(Tensor::new(&[batch.len(), n, 1], target));
    let err = g.sub(model.backbone.coverage(cx, last), target);
    let mse = g.mean_all(g.mul(err, err));
    Ok(g.add(g.cross_entropy(logits, &y), g.scale(mse, COVERAGE_WEIGHT)))
}

fn text_loss(model: &LesionLm, cx: &Ctx<f32>, batch: &crate::textgen::TextBatch) -> Result<Var> {
    let b = batch.prefixes.len();
    let l = batch.prefixes[0].len();
    let ids: Vec<usize> = batch.prefixes.iter().flatten().copied().collect();
    let e = model.lm.embed(cx, &ids);
    let prefix = cx.g.reshape(e, &[b, l, model.cfg.lm_dim]);
    model.lm.forward_loss(cx, prefix, &batch.answers)
}

fn heatmap_loss(model: &LesionLm, cx: &Ctx<f32>, cache: &HeatmapCache, idx: &[usize]) -> Result<Var> {
    let g = cx.g;
    let (inter, ano, masks) = cache.stacked(idx);
    let iv: Vec<Var> = inter.into_iter().map(|t| g.constant(t)).collect();
    let logits = model.heatmap.forward(cx, &iv, g.constant(ano))?;
    Ok(g.dice_ce_with_logits(logits, &masks, crate::heatmap::DICE_EPS))
}

pub fn text_shapes(model: &LesionLm) -> TextShapes {
    TextShapes {
        n_vis: model.cfg.n_patches(),
        single_question: model.single_question().to_vec(),
        pair_question: model.pair_question().to_vec(),
    }
}

/// Greedy outputs of the text-only probes, with the bits of the first-step
/// logits so that "identical" means bit-identical.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeOutput {
    pub generated: Vec<usize>,
    pub logit_bits: Vec<u32>,
}

pub fn probe_set(model: &LesionLm, cfg: &RunConfig) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5052_4F42);
    text_probes(&mut rng, &model.vocab, &text_shapes(model), cfg.train.probe_count)
}

pub fn run_probes(model: &LesionLm, store: &ParamStore<f32>, probes: &[Vec<usize>]) -> Result<Vec<ProbeOutput>> {
    probes
        .iter()
        .map(|ids| {
            let g = Graph::no_grad();
            let cx = Ctx::frozen(&g, store);
            let e = model.lm.embed(&cx, ids);
            let x = g.reshape(e, &[1, ids.len(), model.cfg.lm_dim]);
            let h = model.lm.hidden(&cx, x)?;
            let h = g.reshape(h, &[ids.len(), model.cfg.lm_dim]);
            let last = g.select_rows(h, &[ids.len() - 1]);
            let logits = g.value(model.lm.logits(&cx, last));
            let generated = model.answer_text(store, ids, 8)?;
            Ok(ProbeOutput { generated, logit_bits: logits.data().iter().map(|v| v.to_bits()).collect() })
        })
        .collect()
}

/// Everything a stage leaves behind besides its parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub report: StageReport,
    pub seconds: f64,
}

/// On-disk checkpoint layout: `<dir>/stage-<id>.lsnw` plus a JSON record
/// per stage and the step log `<dir>/stage-<id>.jsonl`.
pub struct CheckpointDir {
    pub dir: PathBuf,
}

impl CheckpointDir {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn params_path(&self, stage: Stage) -> PathBuf {
        self.dir.join(format!("stage-{}.lsnw", stage.as_str()))
    }

    pub fn record_path(&self, stage: Stage) -> PathBuf {
        self.dir.join(format!("stage-{}.json", stage.as_str()))
    }

    pub fn log_path(&self, stage: Stage) -> PathBuf {
        self.dir.join(format!("stage-{}.jsonl", stage.as_str()))
    }

    pub fn has(&self, stage: Stage) -> bool {
        self.params_path(stage).exists()
    }

    pub fn load(&self, stage: Stage) -> Result<ParamStore<f32>> {
        if !self.has(stage) {
            return Err(Error::MissingPrerequisite(format!(
                "no checkpoint for stage {} in {}; train it first",
                stage.as_str(),
                self.dir.display()
            )));
        }
        ParamStore::load(&self.params_path(stage))
    }

    pub fn load_record(&self, stage: Stage) -> Result<StageRecord> {
        let text = fs::read_to_string(self.record_path(stage))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, stage: Stage, store: &ParamStore<f32>, record: &StageRecord) -> Result<()> {
        fs::create_dir_all(&self.dir)?;
        store.save(&self.params_path(stage))?;
        fs::write(self.record_path(stage), serde_json::to_string_pretty(record)? + "\n")?;
        Ok(())
    }

    /// The newest checkpoint, in pipeline order.
    pub fn latest(&self) -> Option<Stage> {
        [Stage::Three, Stage::Two, Stage::One, Stage::Joint, Stage::LmWarmup, Stage::Backbone]
            .into_iter()
            .find(|&s| self.has(s))
    }
}

/// Starting parameters for `stage`: the prerequisite checkpoint, or a fresh
/// initialisation for the first stage.
pub fn starting_store(model_seed_store: ParamStore<f32>, ckpt: &CheckpointDir, stage: Stage) -> Result<ParamStore<f32>> {
    match stage.prerequisite() {
        None => Ok(model_seed_store),
        Some(p) => {
            let loaded = ckpt.load(p).map_err(|e| match e {
                Error::MissingPrerequisite(_) => Error::MissingPrerequisite(format!(
                    "stage {} needs the stage {} checkpoint in {}",
                    stage.as_str(),
                    p.as_str(),
                    ckpt.dir.display()
                )),
                other => other,
            })?;
            let mut store = model_seed_store;
            store.assign_from(&loaded)?;
            Ok(store)
        }
    }
}

/// Trains `stage` from its prerequisite checkpoint and writes the result.
/// The step log is written next to the checkpoint; on divergence the
/// partial log is kept and no checkpoint is written.
pub fn train_and_save(
    model: &LesionLm,
    fresh: ParamStore<f32>,
    ckpt: &CheckpointDir,
    stage: Stage,
    corpus: &Corpus,
    cfg: &RunConfig,
    opts: &StageOptions,
) -> Result<(ParamStore<f32>, StageRecord)> {
    let mut store = starting_store(fresh, ckpt, stage)?;
    fs::create_dir_all(&ckpt.dir)?;
    let mut logf = std::io::BufWriter::new(fs::File::create(ckpt.log_path(stage))?);
    let start = std::time::Instant::now();
    let report = run_stage(model, &mut store, stage, corpus, cfg, opts, &mut |r| {
        serde_json::to_writer(&mut logf, r)?;
        logf.write_all(b"\n")?;
        Ok(())
    });
    logf.flush()?;
    let report = report?;
    let record = StageRecord { stage, report, seconds: start.elapsed().as_secs_f64() };
    ckpt.save(stage, &store, &record)?;
    Ok((store, record))
}

/// Reads a JSON-lines step log.
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_without_warmup_starts_at_base() {
        let s = CosineSchedule::new(1e-4, 100, 0.0);
        assert_eq!(s.lr(0), 1e-4);
        assert!(s.lr(99) < s.lr(0));
        assert!(s.lr(50) < s.lr(10));
    }

    #[test]
    fn warmup_ramps_to_base() {
        let s = CosineSchedule::new(1.0, 100, 0.1);
        assert_eq!(s.warmup, 10);
        assert!((s.lr(9) - 1.0).abs() < 1e-12);
        assert!(s.lr(0) < s.lr(5));
        assert!((s.lr(10) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn plans_partition_groups() {
        let cfg = TrainConfig::default();
        for st in [Stage::Backbone, Stage::LmWarmup, Stage::One, Stage::Two, Stage::Three, Stage::Joint] {
            let p = StagePlan::for_stage(st, &cfg);
            p.validate().unwrap();
        }
        let p1 = StagePlan::for_stage(Stage::One, &cfg);
        assert_eq!(p1.trainable, [Group::Prompts, Group::Anomaly, Group::Adapter].into_iter().collect());
        assert_eq!(StagePlan::for_stage(Stage::Two, &cfg).trainable, [Group::Diff].into_iter().collect());
        let p3 = StagePlan::for_stage(Stage::Three, &cfg);
        assert_eq!(p3.trainable, [Group::Heatmap].into_iter().collect());
        assert_eq!(p3.loss, LossKind::DiceCe);
    }

    #[test]
    fn overlapping_plan_rejected() {
        let mut p = StagePlan::for_stage(Stage::One, &TrainConfig::default());
        p.frozen.insert(Group::Anomaly);
        assert!(matches!(p.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn adamw_moves_against_gradient() {
        let mut store = ParamStore::new();
        store.insert("anomaly.w", Tensor::new(&[1, 2], vec![1.0f32, -1.0]));
        let mut opt = AdamW::new(0.0);
        opt.step(&mut store, &[("anomaly.w".into(), Tensor::new(&[1, 2], vec![0.5, -0.5]))], 0.1);
        let w = store.get("anomaly.w").data();
        assert!((w[0] - 0.9).abs() < 1e-5 && (w[1] + 0.9).abs() < 1e-5);
    }
}
