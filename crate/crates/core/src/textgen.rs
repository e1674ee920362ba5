//! Text-only sequences for the language-model warmup and the text probes.
//!
//! Warmup sequences mimic the multimodal layouts with words in place of
//! vectors: visual slots hold neutral filler, `<Ano>` slots hold lesion or
//! normal evidence words and `<Diff>` slots hold change words. The LM learns
//! to read the answer off the evidence slots, which is exactly what the
//! anomaly and diff processors later have to produce.

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::data::Progression;
use crate::sequence::Layout;
use crate::vocab::{Vocab, ABNORMAL_WORDS, BETTER_WORDS, FILLER_WORDS, NORMAL_WORDS, SAME_WORDS, WORSE_WORDS};

/// Share of evidence slots that agree with the label.
const EVIDENCE_PURITY: f64 = 0.8;

/// Pool sizes tried during warmup; index 2 (p = 4) is drawn twice as often.
const POOL_CHOICES: [usize; 5] = [1, 2, 4, 4, 8];

/// A batch of equal-length token prefixes and equal-length answers.
#[derive(Clone, Debug)]
pub struct TextBatch {
    pub prefixes: Vec<Vec<usize>>,
    pub answers: Vec<Vec<usize>>,
    pub layout: Layout,
}

/// Fixed shapes the warmup sequences are built against.
#[derive(Clone, Debug)]
pub struct TextShapes {
    pub n_vis: usize,
    pub single_question: Vec<usize>,
    pub pair_question: Vec<usize>,
}

fn words<R: Rng>(rng: &mut R, vocab: &Vocab, lex: &[&str], n: usize, out: &mut Vec<usize>) {
    for _ in 0..n {
        out.push(vocab.expect_id(lex.choose(rng).unwrap()));
    }
}

fn evidence<R: Rng>(rng: &mut R, vocab: &Vocab, main: &[&str], other: &[&[&str]], n: usize, out: &mut Vec<usize>) {
    for _ in 0..n {
        let lex = if other.is_empty() || rng.random_bool(EVIDENCE_PURITY) { main } else { other[rng.random_range(0..other.len())] };
        out.push(vocab.expect_id(lex.choose(rng).unwrap()));
    }
}

fn answer(vocab: &Vocab, text: &str) -> Vec<usize> {
    let mut ids = vocab.encode(text);
    ids.push(vocab.eos());
    ids
}

/// One warmup batch. The layout and pool size are drawn once per batch so
/// every row shares a length.
pub fn warmup_batch<R: Rng>(rng: &mut R, vocab: &Vocab, shapes: &TextShapes, batch: usize) -> TextBatch {
    let layout = match rng.random_range(0..6) {
        0..=2 => Layout::AnoSingle,
        3 | 4 => Layout::AnoPair,
        _ => Layout::DiffOnlyPair,
    };
    let p = *POOL_CHOICES.choose(rng).unwrap();
    let n_tok = p * p;
    let mut prefixes = Vec::with_capacity(batch);
    let mut answers = Vec::with_capacity(batch);
    for _ in 0..batch {
        let mut ids = Vec::new();
        match layout {
            Layout::AnoSingle => {
                let abnormal = rng.random_bool(0.5);
                let (main, other) = if abnormal { (&ABNORMAL_WORDS, &NORMAL_WORDS) } else { (&NORMAL_WORDS, &ABNORMAL_WORDS) };
                words(rng, vocab, &FILLER_WORDS, shapes.n_vis, &mut ids);
                evidence(rng, vocab, main, &[other], n_tok, &mut ids);
                ids.extend_from_slice(&shapes.single_question);
                answers.push(answer(vocab, if abnormal { "Yes" } else { "No" }));
            }
            _ => {
                let prog = Progression::ALL[rng.random_range(0..3)];
                for _ in 0..2 {
                    words(rng, vocab, &FILLER_WORDS, shapes.n_vis, &mut ids);
                    if layout == Layout::AnoPair {
                        evidence(rng, vocab, &ABNORMAL_WORDS, &[], n_tok, &mut ids);
                    }
                }
                ids.extend_from_slice(&shapes.pair_question);
                let (main, a, b): (&[&str], &[&str], &[&str]) = match prog {
                    Progression::Worsened => (&WORSE_WORDS, &BETTER_WORDS, &SAME_WORDS),
                    Progression::Improved => (&BETTER_WORDS, &WORSE_WORDS, &SAME_WORDS),
                    Progression::NoChange => (&SAME_WORDS, &WORSE_WORDS, &BETTER_WORDS),
                };
                evidence(rng, vocab, main, &[a, b], n_tok, &mut ids);
                answers.push(answer(vocab, &prog.gold_answer()));
            }
        }
        prefixes.push(ids);
    }
    TextBatch { prefixes, answers, layout }
}

/// Fixed text-only prompts used to check that the LM's behaviour does not
/// move while other modules train. No visual, `<Ano>` or `<Diff>` slots.
pub fn text_probes<R: Rng>(rng: &mut R, vocab: &Vocab, shapes: &TextShapes, count: usize) -> Vec<Vec<usize>> {
    (0..count)
        .map(|i| {
            let mut ids = Vec::new();
            let n = rng.random_range(3..12);
            words(rng, vocab, &FILLER_WORDS, n, &mut ids);
            if i % 2 == 0 {
                ids.extend_from_slice(&shapes.single_question);
            } else {
                ids.extend_from_slice(&shapes.pair_question);
            }
            ids
        })
        .collect()
}
