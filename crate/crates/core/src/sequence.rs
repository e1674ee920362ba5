//! Multimodal sequence layouts and chat-template rendering.
//!
//! Four layouts are supported:
//!
//! | layout        | blocks                                   |
//! |---------------|------------------------------------------|
//! | `Baseline`    | VIS1, TEXT                               |
//! | `AnoSingle`   | VIS1, ANO1, TEXT                         |
//! | `AnoPair`     | VIS1, ANO1, VIS2, ANO2, TEXT, DIFF       |
//! | `DiffOnlyPair`| VIS1, VIS2, TEXT, DIFF                   |

use lesionlm_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Segment {
    Vis1,
    Ano1,
    Vis2,
    Ano2,
    Text,
    Diff,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// One image, no anomaly tokens.
    Baseline,
    /// One image with `<Ano>` tokens.
    AnoSingle,
    /// Two images with `<Ano>` tokens and `<Diff>` tokens after the question.
    AnoPair,
    /// Two images and `<Diff>` tokens, without `<Ano>` blocks.
    DiffOnlyPair,
}

impl Layout {
    pub fn blocks(self) -> &'static [Segment] {
        use Segment::*;
        match self {
            Layout::Baseline => &[Vis1, Text],
            Layout::AnoSingle => &[Vis1, Ano1, Text],
            Layout::AnoPair => &[Vis1, Ano1, Vis2, Ano2, Text, Diff],
            Layout::DiffOnlyPair => &[Vis1, Vis2, Text, Diff],
        }
    }

    pub fn is_pair(self) -> bool {
        matches!(self, Layout::AnoPair | Layout::DiffOnlyPair)
    }

    /// Block lengths for `n_vis` visual tokens per image, `n_tok` `<Ano>` /
    /// `<Diff>` tokens and `n_text` question tokens.
    pub fn plan(self, n_vis: usize, n_tok: usize, n_text: usize) -> Vec<(Segment, usize)> {
        self.blocks()
            .iter()
            .map(|&s| {
                let n = match s {
                    Segment::Vis1 | Segment::Vis2 => n_vis,
                    Segment::Ano1 | Segment::Ano2 | Segment::Diff => n_tok,
                    Segment::Text => n_text,
                };
                (s, n)
            })
            .collect()
    }

    pub fn len(self, n_vis: usize, n_tok: usize, n_text: usize) -> usize {
        self.plan(n_vis, n_tok, n_text).iter().map(|(_, n)| n).sum()
    }
}

/// Reconstructs the layout from a per-position segment list. Each layout
/// has a distinct block sequence, so the mapping is unique.
pub fn classify_layout(segments: &[Segment]) -> Result<Layout> {
    let mut blocks: Vec<Segment> = Vec::new();
    for &s in segments {
        if blocks.last() != Some(&s) {
            blocks.push(s);
        }
    }
    [Layout::Baseline, Layout::AnoSingle, Layout::AnoPair, Layout::DiffOnlyPair]
        .into_iter()
        .find(|l| l.blocks() == blocks.as_slice())
        .ok_or_else(|| Error::Usage(format!("segment blocks {blocks:?} match no layout")))
}

/// How attention is restricted; every sequence is causal over its full length.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionMask {
    Causal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSequence {
    /// `[L, d_lm]`.
    pub embeddings: Tensor<f32>,
    pub segments: Vec<Segment>,
    pub mask: AttentionMask,
}

impl MultimodalSequence {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn layout(&self) -> Result<Layout> {
        classify_layout(&self.segments)
    }

    pub fn count(&self, seg: Segment) -> usize {
        self.segments.iter().filter(|&&s| s == seg).count()
    }
}

fn build(parts: &[(Segment, &Tensor<f32>)]) -> Result<MultimodalSequence> {
    let d = parts
        .first()
        .map(|(_, t)| t.last_dim())
        .ok_or_else(|| Error::Usage("empty sequence".into()))?;
    let mut data = Vec::new();
    let mut segments = Vec::new();
    for (seg, t) in parts {
        if t.shape().len() != 2 || t.last_dim() != d {
            return Err(Error::Usage(format!("{seg:?} block has shape {:?}, expected [n, {d}]", t.shape())));
        }
        data.extend_from_slice(t.data());
        segments.extend(std::iter::repeat_n(*seg, t.rows()));
    }
    let l = segments.len();
    Ok(MultimodalSequence { embeddings: Tensor::new(&[l, d], data), segments, mask: AttentionMask::Causal })
}

/// `[proj; <Ano>; text]`, or `[proj; text]` when `ano` is absent or empty.
pub fn assemble_single(
    proj: &Tensor<f32>,
    ano: Option<&Tensor<f32>>,
    text: &Tensor<f32>,
) -> Result<MultimodalSequence> {
    match ano.filter(|a| a.numel() > 0) {
        Some(a) => build(&[(Segment::Vis1, proj), (Segment::Ano1, a), (Segment::Text, text)]),
        None => build(&[(Segment::Vis1, proj), (Segment::Text, text)]),
    }
}

/// `[proj1; <Ano>; proj2; <Ano>; text; <Diff>]`, or the diff-only variant
/// when both `<Ano>` sets are absent.
pub fn assemble_pair(
    proj1: &Tensor<f32>,
    ano1: Option<&Tensor<f32>>,
    proj2: &Tensor<f32>,
    ano2: Option<&Tensor<f32>>,
    text: &Tensor<f32>,
    diff: Option<&Tensor<f32>>,
) -> Result<MultimodalSequence> {
    let diff = diff.ok_or_else(|| Error::Usage("pair template requires <Diff> tokens".into()))?;
    match (ano1, ano2) {
        (Some(a1), Some(a2)) => build(&[
            (Segment::Vis1, proj1),
            (Segment::Ano1, a1),
            (Segment::Vis2, proj2),
            (Segment::Ano2, a2),
            (Segment::Text, text),
            (Segment::Diff, diff),
        ]),
        (None, None) => build(&[
            (Segment::Vis1, proj1),
            (Segment::Vis2, proj2),
            (Segment::Text, text),
            (Segment::Diff, diff),
        ]),
        _ => Err(Error::Usage("either both images carry <Ano> tokens or neither does".into())),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateMode {
    Single,
    Pair,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChatTemplate {
    pub text: String,
    pub question: String,
}

pub const SYSTEM_PROMPT: &str = "You are a helpful medical imaging assistant.";

/// Golden renderings of the default questions, checked in under `templates/`.
pub const SINGLE_GOLDEN: &str = include_str!("../templates/single.txt");
pub const PAIR_GOLDEN: &str = include_str!("../templates/pair.txt");

/// Renders the chat prompt with literal `<image>`, `<Ano>` and `<Diff>`
/// markers. Each image is followed by its `<Ano>` block; in pair mode the
/// `<Diff>` block follows the question.
pub fn render_template(mode: TemplateMode, question: &str) -> Result<ChatTemplate> {
    let q = question.trim();
    if q.is_empty() {
        return Err(Error::Usage("question must not be empty".into()));
    }
    let user = match mode {
        TemplateMode::Single => format!("<image><Ano>\n{q}"),
        TemplateMode::Pair => format!("Image 1: <image><Ano>\nImage 2: <image><Ano>\n{q} <Diff>"),
    };
    let text = format!(
        "<|im_start|>system\n{SYSTEM_PROMPT}<|im_end|>\n<|im_start|>user\n{user}<|im_end|>\n<|im_start|>assistant\n"
    );
    Ok(ChatTemplate { text, question: q.to_string() })
}
