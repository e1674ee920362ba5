//! The assembled model: encoder, soft prompts, projector and adapter, the
//! anomaly and diff processors, the heatmap head and the language model,
//! with batched forward passes for every stage.

use lesionlm_tensor::{Float, Graph, Tensor, Var};

use crate::anomaly::{AnoVars, AnomalyProcessor};
use crate::backbone::{SoftPromptBank, VisionBackbone};
use crate::config::ModelConfig;
use crate::data::{SyntheticSample, PAIR_QUESTION, SINGLE_QUESTION};
use crate::diff::DiffProcessor;
use crate::error::{Error, Result};
use crate::heatmap::HeatmapDecoder;
use crate::image::ImageTensor;
use crate::lm::{Adapter, Projector, ToyLm};
use crate::params::{Ctx, Group, ParamBuilder, ParamStore};
use crate::sequence::Layout;
use crate::vocab::Vocab;

/// Everything computed for a batch of images on the way to the LM.
pub struct ImageVars {
    /// Five encoder grids, `[B, G^2, d]` each.
    pub grids: Vec<Var>,
    /// Projected (and adapted) visual tokens `[B, G^2, d_lm]`.
    pub proj: Var,
    pub ano: Option<AnoVars>,
}

/// How visual tokens are produced for a single-image sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SingleMode {
    /// Prompted features, adapter and `<Ano>` tokens.
    Ano,
    /// Untouched encoder and projector, no `<Ano>` tokens.
    Baseline,
}

pub struct LesionLm {
    pub cfg: ModelConfig,
    pub vocab: Vocab,
    pub backbone: VisionBackbone,
    pub prompts: SoftPromptBank,
    pub projector: Projector,
    pub adapter: Adapter,
    pub anomaly: AnomalyProcessor,
    pub diff: DiffProcessor,
    pub heatmap: HeatmapDecoder,
    pub lm: ToyLm,
    single_question: Vec<usize>,
    pair_question: Vec<usize>,
}

fn module_seed(seed: u64, group: Group) -> u64 {
    let k = Group::ALL.iter().position(|&g| g == group).unwrap() as u64;
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

impl LesionLm {
    /// Builds the model and its freshly initialised parameters. Each group is
    /// initialised from its own seed stream, so changing one module's shape
    /// leaves the others' initial values untouched.
    pub fn new<F: Float>(cfg: &ModelConfig, vocab: Vocab, seed: u64) -> Result<(Self, ParamStore<F>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut take = |group: Group, pb: ParamBuilder<F>| {
            for (n, t) in pb.finish().iter() {
                debug_assert_eq!(Group::of(n), Some(group));
                store.insert(n, t.clone());
            }
        };
        let mut pb = ParamBuilder::new(module_seed(seed, Group::Backbone));
        let backbone = VisionBackbone::new(&mut pb, cfg);
        take(Group::Backbone, pb);
        let mut pb = ParamBuilder::new(module_seed(seed, Group::Prompts));
        let prompts = SoftPromptBank::new(&mut pb, cfg.n_prompts, cfg.enc_dim, &cfg.tapped_layers);
        take(Group::Prompts, pb);
        let mut pb = ParamBuilder::new(module_seed(seed, Group::Projector));
        let projector = Projector::new(&mut pb, cfg);
        take(Group::Projector, pb);
        let mut pb = ParamBuilder::new(module_seed(seed, Group::Adapter));
        let adapter = Adapter::new(&mut pb, cfg);
        take(Group::Adapter, pb);
        let mut pb = ParamBuilder::new(module_seed(seed, Group::Anomaly));
        let anomaly = AnomalyProcessor::new(&mut pb, cfg);
        take(Group::Anomaly, pb);
        let mut pb = ParamBuilder::new(module_seed(seed, Group::Diff));
        let diff = DiffProcessor::new(&mut pb, cfg);
        take(Group::Diff, pb);
        let mut pb = ParamBuilder::new(module_seed(seed, Group::Heatmap));
        let heatmap = HeatmapDecoder::new(&mut pb, cfg);
        take(Group::Heatmap, pb);
        let mut pb = ParamBuilder::new(module_seed(seed, Group::Lm));
        let lm = ToyLm::new(&mut pb, cfg, vocab.len());
        take(Group::Lm, pb);
        let single_question = vocab.encode(SINGLE_QUESTION);
        let pair_question = vocab.encode(PAIR_QUESTION);
        let model = Self {
            cfg: cfg.clone(),
            vocab,
            backbone,
            prompts,
            projector,
            adapter,
            anomaly,
            diff,
            heatmap,
            lm,
            single_question,
            pair_question,
        };
        let longest = model.sequence_len(Layout::AnoPair) + model.max_answer_len();
        if longest > cfg.lm_context {
            return Err(Error::Config(format!(
                "LM context {} is shorter than the longest sequence ({longest} positions)",
                cfg.lm_context
            )));
        }
        Ok((model, store))
    }

    pub fn single_question(&self) -> &[usize] {
        &self.single_question
    }

    pub fn pair_question(&self) -> &[usize] {
        &self.pair_question
    }

    pub fn sequence_len(&self, layout: Layout) -> usize {
        let q = if layout.is_pair() { self.pair_question.len() } else { self.single_question.len() };
        layout.len(self.cfg.n_patches(), self.cfg.n_query_tokens(), q)
    }

    /// Longest gold answer in tokens, including `<eos>`.
    pub fn max_answer_len(&self) -> usize {
        ["Yes", "No", "A: Unchanged", "B: Improved", "C: Worsened"]
            .iter()
            .map(|a| self.vocab.encode(a).len() + 1)
            .max()
            .unwrap()
    }

    /// Gold answer token ids followed by `<eos>`.
    pub fn answer_ids(&self, answer: &str) -> Vec<usize> {
        let mut ids = self.vocab.encode(answer);
        ids.push(self.vocab.eos());
        ids
    }

    pub fn pair_layout(&self) -> Layout {
        if self.cfg.ablate_ano {
            Layout::DiffOnlyPair
        } else {
            Layout::AnoPair
        }
    }

    /// Encoder grids, projected tokens and (optionally) the anomaly branch
    /// for a batch of images.
    pub fn image_vars<F: Float>(&self, cx: &Ctx<F>, images: &[&ImageTensor], mode: SingleMode, with_ano: bool) -> Result<ImageVars> {
        let g = cx.g;
        let x = g.constant(self.backbone.patch_batch::<F>(images)?);
        let prompts = (mode == SingleMode::Ano).then_some(&self.prompts);
        let grids = self.backbone.forward(cx, x, prompts)?;
        let last = *grids.last().unwrap();
        let proj = self.projector.forward(cx, last);
        let proj = match mode {
            SingleMode::Ano => self.adapter.forward(cx, proj),
            SingleMode::Baseline => proj,
        };
        let ano = if with_ano && mode == SingleMode::Ano { Some(self.anomaly.forward(cx, &grids, proj)?) } else { None };
        Ok(ImageVars { grids, proj, ano })
    }

    fn text_block<F: Float>(&self, cx: &Ctx<F>, ids: &[usize], batch: usize) -> Var {
        let g = cx.g;
        let e = self.lm.embed(cx, ids);
        let zeros = g.constant(Tensor::zeros(&[batch, ids.len(), self.cfg.lm_dim]));
        g.add(zeros, e)
    }

    /// Single-image prefixes `[B, L, d_lm]` ending with the question.
    pub fn single_prefix<F: Float>(&self, cx: &Ctx<F>, images: &[&ImageTensor], mode: SingleMode) -> Result<(Var, ImageVars)> {
        let iv = self.image_vars(cx, images, mode, mode == SingleMode::Ano)?;
        let text = self.text_block(cx, &self.single_question, images.len());
        let prefix = match &iv.ano {
            Some(a) => cx.g.concat(&[iv.proj, a.tokens, text], 1),
            None => cx.g.concat(&[iv.proj, text], 1),
        };
        Ok((prefix, iv))
    }

    /// Pair prefixes `[B, L, d_lm]` ending with the `<Diff>` block. Both
    /// images of the batch go through the encoder together.
    pub fn pair_prefix<F: Float>(&self, cx: &Ctx<F>, first: &[&ImageTensor], second: &[&ImageTensor]) -> Result<(Var, Var)> {
        if first.len() != second.len() {
            return Err(Error::Usage("pair batch halves differ in length".into()));
        }
        let g = cx.g;
        let b = first.len();
        let all: Vec<&ImageTensor> = first.iter().chain(second.iter()).copied().collect();
        let ablate = self.cfg.ablate_ano;
        let iv = self.image_vars(cx, &all, SingleMode::Ano, !ablate)?;
        let half = |v: Var, i: usize| g.slice(v, 0, i * b, b);
        let (p1, p2) = (half(iv.proj, 0), half(iv.proj, 1));
        let text = self.text_block(cx, &self.pair_question, b);
        let (prefix, queries) = match &iv.ano {
            Some(a) => {
                let (m1, m2) = (half(a.modulated, 0), half(a.modulated, 1));
                let (q, d) = self.diff.forward(cx, m1, m2, p1, p2)?;
                let (a1, a2) = (half(a.tokens, 0), half(a.tokens, 1));
                (g.concat(&[p1, a1, p2, a2, text, d], 1), q)
            }
            None => {
                let last = *iv.grids.last().unwrap();
                let (f1, f2) = (half(last, 0), half(last, 1));
                let (q, d) = self.diff.forward(cx, f1, f2, p1, p2)?;
                (g.concat(&[p1, p2, text, d], 1), q)
            }
        };
        Ok((prefix, queries))
    }

    /// Answer cross-entropy for a batch of single images.
    pub fn single_loss<F: Float>(&self, cx: &Ctx<F>, batch: &[&SyntheticSample]) -> Result<Var> {
        let images: Vec<&ImageTensor> = batch.iter().map(|s| &s.images[0]).collect();
        let (prefix, _) = self.single_prefix(cx, &images, SingleMode::Ano)?;
        let answers: Vec<Vec<usize>> = batch.iter().map(|s| self.answer_ids(&s.qa.answer)).collect();
        self.lm.forward_loss(cx, prefix, &answers)
    }

    /// Answer cross-entropy for a batch of pairs.
    pub fn pair_loss<F: Float>(&self, cx: &Ctx<F>, batch: &[&SyntheticSample]) -> Result<Var> {
        if batch.iter().any(|s| !s.is_pair()) {
            return Err(Error::Usage("pair batch contains a single image".into()));
        }
        let first: Vec<&ImageTensor> = batch.iter().map(|s| &s.images[0]).collect();
        let second: Vec<&ImageTensor> = batch.iter().map(|s| &s.images[1]).collect();
        let (prefix, _) = self.pair_prefix(cx, &first, &second)?;
        let answers: Vec<Vec<usize>> = batch.iter().map(|s| self.answer_ids(&s.qa.answer)).collect();
        self.lm.forward_loss(cx, prefix, &answers)
    }

    /// Frozen features for the heatmap head: four intermediate grids and the
    /// `<Ano>` tokens, as constants `[B, ...]`.
    pub fn heatmap_inputs(&self, store: &ParamStore<f32>, images: &[&ImageTensor]) -> Result<(Vec<Tensor<f32>>, Tensor<f32>)> {
        let g = Graph::no_grad();
        let cx = Ctx::frozen(&g, store);
        let iv = self.image_vars(&cx, images, SingleMode::Ano, true)?;
        let inter = iv.grids[..4].iter().map(|&v| g.value(v).as_ref().clone()).collect();
        let ano = g.value(iv.ano.expect("anomaly branch requested").tokens).as_ref().clone();
        Ok((inter, ano))
    }

    /// Heatmap probabilities `[B, H*W]` for a batch of images.
    pub fn heatmaps(&self, store: &ParamStore<f32>, images: &[&ImageTensor]) -> Result<Tensor<f32>> {
        let (inter, ano) = self.heatmap_inputs(store, images)?;
        let g = Graph::no_grad();
        let cx = Ctx::frozen(&g, store);
        let iv: Vec<Var> = inter.into_iter().map(|t| g.constant(t)).collect();
        let logits = self.heatmap.forward(&cx, &iv, g.constant(ano))?;
        Ok(g.value(g.sigmoid(logits)).as_ref().clone())
    }

    /// Anomaly maps `[B, G^2]` for a batch of images.
    pub fn anomaly_maps(&self, store: &ParamStore<f32>, images: &[&ImageTensor]) -> Result<Tensor<f32>> {
        let g = Graph::no_grad();
        let cx = Ctx::frozen(&g, store);
        let iv = self.image_vars(&cx, images, SingleMode::Ano, true)?;
        Ok(g.value(iv.ano.expect("anomaly branch requested").map).as_ref().clone())
    }

    /// Pooled difference queries `[B, p^2, d]` for a batch of pairs.
    pub fn diff_queries(&self, store: &ParamStore<f32>, first: &[&ImageTensor], second: &[&ImageTensor]) -> Result<Tensor<f32>> {
        let g = Graph::no_grad();
        let cx = Ctx::frozen(&g, store);
        let (_, q) = self.pair_prefix(&cx, first, second)?;
        Ok(g.value(q).as_ref().clone())
    }

    /// Greedy answers for single images.
    pub fn answer_singles(&self, store: &ParamStore<f32>, images: &[&ImageTensor], mode: SingleMode, max_new: usize) -> Result<Vec<String>> {
        let g = Graph::no_grad();
        let cx = Ctx::frozen(&g, store);
        let (prefix, _) = self.single_prefix(&cx, images, mode)?;
        let ids = self.lm.generate_batch(store, &g.value(prefix), max_new, self.vocab.eos())?;
        Ok(ids.iter().map(|i| self.vocab.decode(i)).collect())
    }

    /// Greedy answers for pairs.
    pub fn answer_pairs(&self, store: &ParamStore<f32>, first: &[&ImageTensor], second: &[&ImageTensor], max_new: usize) -> Result<Vec<String>> {
        let g = Graph::no_grad();
        let cx = Ctx::frozen(&g, store);
        let (prefix, _) = self.pair_prefix(&cx, first, second)?;
        let ids = self.lm.generate_batch(store, &g.value(prefix), max_new, self.vocab.eos())?;
        Ok(ids.iter().map(|i| self.vocab.decode(i)).collect())
    }

    /// Greedy continuation of a text-only prompt (no visual or `<Ano>` /
    /// `<Diff>` positions).
    pub fn answer_text(&self, store: &ParamStore<f32>, ids: &[usize], max_new: usize) -> Result<Vec<usize>> {
        let prefix = self.lm.embed_tensor(store, ids).reshape(&[1, ids.len(), self.cfg.lm_dim]);
        Ok(self.lm.generate_batch(store, &prefix, max_new, self.vocab.eos())?.remove(0))
    }

    /// Parameter count per group.
    pub fn param_counts(store: &ParamStore<f32>) -> Vec<(Group, usize)> {
        Group::ALL.iter().map(|&g| (g, store.num_params(g))).collect()
    }
}
