//! Closed word-level vocabulary and tokenizer.
//!
//! The vocabulary file lists one token per line; the line number is the id.
//! Special tokens occupy the first ids and never move.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const IMAGE: &str = "<image>";
pub const ANO: &str = "<Ano>";
pub const DIFF: &str = "<Diff>";
pub const SPECIALS: [&str; 7] = [PAD, UNK, BOS, EOS, IMAGE, ANO, DIFF];

const PUNCTUATION: [&str; 8] = ["?", ".", ",", ":", "!", "(", ")", "'"];

/// Words that describe visible lesion evidence.
pub const ABNORMAL_WORDS: [&str; 20] = [
    "lesion", "mass", "nodule", "opacity", "tumor", "spot", "focus", "density", "hyperintensity", "consolidation",
    "blob", "cyst", "infiltrate", "enhancement", "growth", "thickening", "calcification", "bright", "irregular",
    "suspicious",
];

/// Words that describe an unremarkable image.
pub const NORMAL_WORDS: [&str; 20] = [
    "clear", "normal", "unremarkable", "healthy", "clean", "intact", "symmetric", "homogeneous", "smooth", "regular",
    "quiet", "uniform", "typical", "preserved", "even", "plain", "negative", "benign", "tidy", "calm",
];

pub const WORSE_WORDS: [&str; 12] = [
    "larger", "grown", "expanded", "enlarged", "increased", "progressed", "spreading", "bigger", "extended", "thicker",
    "worse", "advancing",
];

pub const BETTER_WORDS: [&str; 12] = [
    "smaller", "shrunk", "reduced", "decreased", "regressed", "receding", "resolving", "faded", "contracted", "thinner",
    "better", "diminished",
];

pub const SAME_WORDS: [&str; 12] = [
    "stable", "same", "constant", "steady", "persistent", "similar", "static", "fixed", "equal", "matching",
    "consistent", "identical",
];

/// Neutral words that stand in for visual tokens during the text warmup.
pub const FILLER_WORDS: [&str; 70] = [
    "tissue", "scan", "region", "view", "area", "slice", "field", "background", "texture", "pattern", "intensity",
    "signal", "left", "right", "upper", "lower", "central", "peripheral", "zone", "margin", "border", "anterior",
    "posterior", "medial", "lateral", "apex", "base", "wall", "layer", "surface", "contour", "outline", "shadow",
    "grain", "noise", "gray", "dark", "light", "soft", "faint", "frame", "window", "level", "plane", "axis", "segment",
    "section", "quadrant", "corner", "edge", "middle", "inner", "outer", "deep", "shallow", "wide", "narrow", "fine",
    "coarse", "film", "exposure", "detail", "structure", "organ", "study", "series", "projection", "grid", "sample",
    "record",
];

/// Words of the fixed questions and answers.
pub const QA_WORDS: [&str; 32] = [
    "is", "there", "any", "abnormality", "in", "this", "image", "how", "has", "the", "lesion", "changed", "between",
    "two", "images", "a", "b", "c", "unchanged", "improved", "worsened", "yes", "no", "positive", "present",
    "abnormal", "absent", "none", "what", "do", "you", "see",
];

/// The canonical token list: specials, punctuation, then every lexicon word
/// once in first-seen order.
pub fn default_tokens() -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    let lists: [&[&str]; 9] = [
        &SPECIALS,
        &PUNCTUATION,
        &QA_WORDS,
        &ABNORMAL_WORDS,
        &NORMAL_WORDS,
        &WORSE_WORDS,
        &BETTER_WORDS,
        &SAME_WORDS,
        &FILLER_WORDS,
    ];
    for list in lists {
        for w in list {
            if !out.iter().any(|t| t == w) {
                out.push(w.to_string());
            }
        }
    }
    out
}

/// The checked-in vocabulary file.
pub const DEFAULT_VOCAB_FILE: &str = include_str!("../assets/vocab.txt");

#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Config(format!("vocabulary id {i} must be `{s}`")));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    /// Id of a token that must exist (lexicon words and specials).
    pub fn expect_id(&self, token: &str) -> usize {
        self.id(token).unwrap_or_else(|| panic!("`{token}` missing from vocabulary"))
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(UNK)
    }

    pub fn eos(&self) -> usize {
        3
    }

    pub fn unk(&self) -> usize {
        1
    }

    /// Lower-cases, splits on whitespace and punctuation, keeps special
    /// markers such as `<Ano>` intact, and maps unknown words to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|w| self.id(w).unwrap_or(self.unk())).collect()
    }

    /// Joins tokens with spaces, without a space before punctuation.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            let t = self.token(id);
            if id == self.eos() {
                break;
            }
            let punct = PUNCTUATION.contains(&t) && t != "(";
            if !out.is_empty() && !punct {
                out.push(' ');
            }
            out.push_str(t);
        }
        out
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::parse(DEFAULT_VOCAB_FILE).expect("bundled vocabulary is valid")
    }
}

/// Word split used by [`Vocab::encode`] and by answer parsing.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    let mut chars = text.chars().peekable();
    let flush = |word: &mut String, out: &mut Vec<String>| {
        if !word.is_empty() {
            out.push(std::mem::take(word).to_lowercase());
        }
    };
    while let Some(c) = chars.next() {
        if c == '<' {
            let rest: String = chars.clone().take_while(|&ch| ch != '>' && ch != '<').collect();
            let cand = format!("<{rest}>");
            if SPECIALS.contains(&cand.as_str()) {
                flush(&mut word, &mut out);
                out.push(cand);
                for _ in 0..=rest.chars().count() {
                    chars.next();
                }
                continue;
            }
        }
        if c.is_alphanumeric() {
            word.push(c);
        } else {
            flush(&mut word, &mut out);
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
    }
    flush(&mut word, &mut out);
    out
}
