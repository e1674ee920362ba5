//! Decoder-only language model over multimodal embedding sequences, plus the
//! visual projector and its residual adapter.

use std::collections::HashMap;
use std::sync::Mutex;

use lesionlm_tensor::{Float, Graph, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_positions, Block, LayerNorm, Linear};
use crate::params::{Ctx, ParamBuilder, ParamStore};
use crate::sequence::MultimodalSequence;
use crate::vocab::Vocab;

/// Linear map from encoder width to LM width, applied identically to every
/// image.
#[derive(Clone, Debug)]
pub struct Projector {
    linear: Linear,
}

impl Projector {
    pub fn new<F: Float>(pb: &mut ParamBuilder<F>, cfg: &ModelConfig) -> Self {
        let linear = Linear::new(pb, "projector.linear", cfg.enc_dim, cfg.lm_dim, true);
        let b = linear.bias_name().unwrap().to_string();
        let bias = pb.store.get_mut(&b);
        let n = bias.numel();
        for (i, v) in bias.data_mut().iter_mut().enumerate() {
            *v = F::from_f64(0.1 * ((i as f64 + 1.0) * 0.7).sin() / (n as f64).sqrt());
        }
        Self { linear }
    }

    pub fn forward<F: Float>(&self, cx: &Ctx<F>, grid_tokens: Var) -> Var {
        self.linear.forward(cx, grid_tokens)
    }

    /// `[G, G, d]` (or `[N, d]`) -> `[N, d_lm]`, row-major patch order.
    pub fn project(&self, store: &ParamStore<f32>, grid: &Tensor<f32>) -> Tensor<f32> {
        let g = Graph::no_grad();
        let cx = Ctx::frozen(&g, store);
        let d = grid.last_dim();
        let x = g.constant(grid.clone().reshape(&[grid.numel() / d, d]));
        g.value(self.forward(&cx, x)).as_ref().clone()
    }

    pub fn bias_name(&self) -> &str {
        self.linear.bias_name().unwrap()
    }
}

/// Residual bottleneck on top of the frozen projector; the up-projection
/// starts at zero so the adapter is initially the identity.
#[derive(Clone, Debug)]
pub struct Adapter {
    down: Linear,
    up: Linear,
}

impl Adapter {
    pub fn new<F: Float>(pb: &mut ParamBuilder<F>, cfg: &ModelConfig) -> Self {
        Self {
            down: Linear::new(pb, "adapter.down", cfg.lm_dim, cfg.adapter_dim, true),
            up: Linear::with_std(pb, "adapter.up", cfg.adapter_dim, cfg.lm_dim, true, 0.0),
        }
    }

    pub fn forward<F: Float>(&self, cx: &Ctx<F>, x: Var) -> Var {
        let h = self.down.forward(cx, x);
        let h = cx.g.gelu(h);
        let h = self.up.forward(cx, h);
        cx.g.add(x, h)
    }
}

pub struct ToyLm {
    dim: usize,
    context: usize,
    vocab_size: usize,
    tok_emb: String,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
    pos_cache: Mutex<HashMap<usize, Tensor<f64>>>,
}

impl ToyLm {
    pub fn new<F: Float>(pb: &mut ParamBuilder<F>, cfg: &ModelConfig, vocab_size: usize) -> Self {
        let d = cfg.lm_dim;
        Self {
            dim: d,
            context: cfg.lm_context,
            vocab_size,
            tok_emb: pb.normal("lm.tok_emb", &[vocab_size, d], 1.0),
            blocks: (0..cfg.lm_layers).map(|i| Block::new(pb, &format!("lm.block{i}"), d, cfg.lm_heads, 4)).collect(),
            ln_f: LayerNorm::new(pb, "lm.ln_f", d),
            head: Linear::new(pb, "lm.head", d, vocab_size, true),
            pos_cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn context(&self) -> usize {
        self.context
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn head_weight_name(&self) -> &str {
        self.head.weight_name()
    }

    pub fn head_bias_name(&self) -> &str {
        self.head.bias_name().unwrap()
    }

    /// Token embeddings `[n, d_lm]`.
    pub fn embed<F: Float>(&self, cx: &Ctx<F>, ids: &[usize]) -> Var {
        cx.g.embedding(cx.p(&self.tok_emb), ids)
    }

    /// Embedding table rows for `ids` without gradient tracking.
    pub fn embed_tensor(&self, store: &ParamStore<f32>, ids: &[usize]) -> Tensor<f32> {
        let table = store.get(&self.tok_emb);
        let d = self.dim;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
        }
        Tensor::new(&[ids.len(), d], out)
    }

    fn positions<F: Float>(&self, len: usize) -> Tensor<F> {
        let mut cache = self.pos_cache.lock().expect("position cache poisoned");
        cache.entry(len).or_insert_with(|| sinusoidal_positions::<f64>(len, self.dim)).cast()
    }

    /// Final hidden states `[B, L, d_lm]` under a causal mask.
    pub fn hidden<F: Float>(&self, cx: &Ctx<F>, x: Var) -> Result<Var> {
        let s = cx.g.shape(x);
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::Usage(format!("LM input shape {s:?} does not have width {}", self.dim)));
        }
        if s[1] > self.context {
            return Err(Error::Usage(format!("sequence of {} positions exceeds the LM context of {}", s[1], self.context)));
        }
        let g = cx.g;
        let mut h = g.add(x, g.constant(self.positions(s[1])));
        for b in &self.blocks {
            h = b.forward(cx, h, true);
        }
        Ok(self.ln_f.forward(cx, h))
    }

    pub fn logits<F: Float>(&self, cx: &Ctx<F>, h: Var) -> Var {
        self.head.forward(cx, h)
    }

    /// Mean next-token cross-entropy over answer positions only.
    ///
    /// `prefix: [B, Lp, d_lm]`; every answer has the same length. Answer
    /// tokens except the last are appended (teacher forcing) and logits are
    /// computed only at the positions that predict an answer token.
    pub fn forward_loss<F: Float>(&self, cx: &Ctx<F>, prefix: Var, answers: &[Vec<usize>]) -> Result<Var> {
        let g = cx.g;
        let s = g.shape(prefix);
        let (b, lp) = (s[0], s[1]);
        if answers.len() != b || answers.is_empty() {
            return Err(Error::Usage(format!("{} answers for a batch of {b}", answers.len())));
        }
        let a = answers[0].len();
        if a == 0 || answers.iter().any(|x| x.len() != a) {
            return Err(Error::Usage("answers in a batch must share a non-zero length".into()));
        }
        if let Some(&bad) = answers.iter().flatten().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Usage(format!("answer id {bad} outside the vocabulary")));
        }
        let x = if a > 1 {
            let ids: Vec<usize> = answers.iter().flat_map(|ans| ans[..a - 1].iter().copied()).collect();
            let e = self.embed(cx, &ids);
            let e = g.reshape(e, &[b, a - 1, self.dim]);
            g.concat(&[prefix, e], 1)
        } else {
            prefix
        };
        let l = lp + a - 1;
        let h = self.hidden(cx, x)?;
        let h = g.reshape(h, &[b * l, self.dim]);
        let rows: Vec<usize> = (0..b).flat_map(|bi| (0..a).map(move |j| bi * l + lp - 1 + j)).collect();
        let h = g.select_rows(h, &rows);
        let logits = self.logits(cx, h);
        let targets: Vec<usize> = answers.iter().flatten().copied().collect();
        Ok(g.cross_entropy(logits, &targets))
    }

    /// Greedy decoding for a batch of equal-length prefixes; each output
    /// stops at (and excludes) `<eos>`.
    pub fn generate_batch(
        &self,
        store: &ParamStore<f32>,
        prefix: &Tensor<f32>,
        max_new: usize,
        eos: usize,
    ) -> Result<Vec<Vec<usize>>> {
        let s = prefix.shape().to_vec();
        let (b, mut len) = (s[0], s[1]);
        let mut seq = prefix.clone();
        let mut out = vec![Vec::new(); b];
        let mut done = vec![false; b];
        let table = store.get(&self.tok_emb);
        for _ in 0..max_new {
            if done.iter().all(|&d| d) || len >= self.context {
                break;
            }
            let g = Graph::no_grad();
            let cx = Ctx::frozen(&g, store);
            let x = g.constant(seq.clone());
            let h = self.hidden(&cx, x)?;
            let h = g.reshape(h, &[b * len, self.dim]);
            let rows: Vec<usize> = (0..b).map(|bi| bi * len + len - 1).collect();
            let logits = self.logits(&cx, g.select_rows(h, &rows));
            let lv = g.value(logits);
            let mut next = Vec::with_capacity(b * self.dim);
            for bi in 0..b {
                let row = &lv.data()[bi * self.vocab_size..(bi + 1) * self.vocab_size];
                let tok = argmax(row);
                if !done[bi] {
                    if tok == eos {
                        done[bi] = true;
                    } else {
                        out[bi].push(tok);
                    }
                }
                next.push(tok);
            }
            let mut data = Vec::with_capacity(b * (len + 1) * self.dim);
            for (bi, &tok) in next.iter().enumerate() {
                data.extend_from_slice(&seq.data()[bi * len * self.dim..(bi + 1) * len * self.dim]);
                data.extend_from_slice(&table.data()[tok * self.dim..(tok + 1) * self.dim]);
            }
            len += 1;
            seq = Tensor::new(&[b, len, self.dim], data);
        }
        Ok(out)
    }

    /// Cross-entropy of one assembled sequence against its answer.
    pub fn sequence_loss(&self, store: &ParamStore<f32>, seq: &MultimodalSequence, answer: &[usize]) -> Result<f64> {
        let g = Graph::no_grad();
        let cx = Ctx::frozen(&g, store);
        let l = seq.len();
        let x = g.constant(seq.embeddings.clone().reshape(&[1, l, self.dim]));
        let loss = self.forward_loss(&cx, x, &[answer.to_vec()])?;
        Ok(g.value(loss).item() as f64)
    }

    /// Greedy answer text for one assembled sequence.
    pub fn generate(&self, store: &ParamStore<f32>, vocab: &Vocab, seq: &MultimodalSequence, max_new: usize) -> Result<String> {
        let l = seq.len();
        let prefix = seq.embeddings.clone().reshape(&[1, l, self.dim]);
        let ids = self.generate_batch(store, &prefix, max_new, vocab.eos())?;
        Ok(vocab.decode(&ids[0]))
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax<F: Float>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
