//! Answer parsing, metric kernels and the benchmark runners for detection,
//! progression and grounding.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::Averaging;
use crate::data::{Progression, SyntheticSample};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, Mask};
use crate::model::{LesionLm, SingleMode};
use crate::params::ParamStore;

/// Words that read as an affirmative detection answer.
pub const YES_WORDS: [&str; 4] = ["yes", "positive", "present", "abnormal"];
/// Words that read as a negative detection answer.
pub const NO_WORDS: [&str; 5] = ["no", "negative", "absent", "normal", "none"];

/// Minimum lesion pixels for a patch to count as a lesion patch.
pub const LESION_PATCH_PIXELS: usize = 8;

const EVAL_BATCH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryAnswer {
    Yes,
    No,
    Unparseable,
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase).collect()
}

/// Case-insensitive keyword rule: the first word found in either lexicon
/// decides; no match at all is unparseable.
pub fn parse_binary(text: &str) -> BinaryAnswer {
    for w in words(text) {
        if YES_WORDS.contains(&w.as_str()) {
            return BinaryAnswer::Yes;
        }
        if NO_WORDS.contains(&w.as_str()) {
            return BinaryAnswer::No;
        }
    }
    BinaryAnswer::Unparseable
}

/// Letter option first (`A`, `B` or `C` as a standalone first word), then
/// the first change keyword anywhere in the text.
pub fn parse_progression(text: &str) -> Option<Progression> {
    let ws = words(text);
    if let Some(first) = ws.first() {
        match first.as_str() {
            "a" => return Some(Progression::NoChange),
            "b" => return Some(Progression::Improved),
            "c" => return Some(Progression::Worsened),
            _ => {}
        }
    }
    for w in &ws {
        match w.as_str() {
            "worsened" | "worse" | "larger" | "grown" | "enlarged" | "increased" | "progressed" => {
                return Some(Progression::Worsened)
            }
            "improved" | "better" | "smaller" | "shrunk" | "reduced" | "decreased" | "regressed" => {
                return Some(Progression::Improved)
            }
            "unchanged" | "stable" | "same" | "steady" | "identical" => return Some(Progression::NoChange),
            _ => {}
        }
    }
    None
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub n: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub unparseable: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Confusion-matrix metrics. An unparseable answer counts as a negative
/// prediction: a false negative on abnormal gold, a true negative on normal
/// gold.
pub fn score_detection(preds: &[BinaryAnswer], golds: &[bool]) -> Result<DetectionReport> {
    if preds.len() != golds.len() {
        return Err(Error::Usage(format!("{} predictions for {} gold labels", preds.len(), golds.len())));
    }
    let (mut tp, mut fp, mut fn_, mut tn, mut unparseable) = (0, 0, 0, 0, 0);
    for (&p, &g) in preds.iter().zip(golds) {
        if p == BinaryAnswer::Unparseable {
            unparseable += 1;
        }
        match (p == BinaryAnswer::Yes, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(DetectionReport {
        n: preds.len(),
        tp,
        fp,
        fn_,
        tn,
        unparseable,
        precision,
        recall,
        f1,
        accuracy: ratio(tp + tn, preds.len()),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCount {
    pub correct: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProgressionReport {
    pub worsened: f64,
    pub improved: f64,
    pub no_change: f64,
    /// Micro or macro average, per `averaging`.
    pub overall: f64,
    pub micro: f64,
    pub macro_avg: f64,
    pub averaging: Averaging,
    pub counts: BTreeMap<Progression, ClassCount>,
    pub unparseable: usize,
}

pub fn score_progression(preds: &[Option<Progression>], golds: &[Progression], averaging: Averaging) -> Result<ProgressionReport> {
    if preds.len() != golds.len() {
        return Err(Error::Usage(format!("{} predictions for {} gold labels", preds.len(), golds.len())));
    }
    let mut counts: BTreeMap<Progression, ClassCount> = Progression::ALL.iter().map(|&p| (p, ClassCount::default())).collect();
    let mut unparseable = 0;
    for (&p, &g) in preds.iter().zip(golds) {
        let c = counts.get_mut(&g).unwrap();
        c.total += 1;
        if p == Some(g) {
            c.correct += 1;
        }
        if p.is_none() {
            unparseable += 1;
        }
    }
    let acc = |p: Progression| ratio(counts[&p].correct, counts[&p].total);
    let correct: usize = counts.values().map(|c| c.correct).sum();
    let micro = ratio(correct, preds.len());
    let present: Vec<f64> = Progression::ALL.iter().filter(|p| counts[p].total > 0).map(|&p| acc(p)).collect();
    let macro_avg = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    Ok(ProgressionReport {
        worsened: acc(Progression::Worsened),
        improved: acc(Progression::Improved),
        no_change: acc(Progression::NoChange),
        overall: match averaging {
            Averaging::Micro => micro,
            Averaging::Macro => macro_avg,
        },
        micro,
        macro_avg,
        averaging,
        counts,
        unparseable,
    })
}

/// Rank-based ROC AUC with midranks for ties. `None` when either class is
/// absent.
pub fn auc_midrank(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "auc: length mismatch");
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum_pos += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Intersection over union; two empty sets give 1.
pub fn iou(pred: &[bool], mask: &[bool]) -> f64 {
    assert_eq!(pred.len(), mask.len(), "iou: length mismatch");
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &m) in pred.iter().zip(mask) {
        inter += (p && m) as usize;
        union += (p || m) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingReport {
    /// AUC over the pooled pixels of every image.
    pub auc: f64,
    /// Mean IoU of the thresholded heatmap over images with a lesion.
    pub miou: f64,
    /// Mean IoU over every image (empty prediction on an empty mask is 1).
    pub miou_all: f64,
    pub threshold: f64,
    pub images: usize,
    pub abnormal_images: usize,
    /// Images whose own AUC is undefined (mask all zero or all one).
    pub auc_skipped: usize,
    /// Mean of the per-image AUCs that are defined.
    pub mean_image_auc: f64,
    /// Abnormal images whose heatmap maximum lies inside the mask.
    pub argmax_in_mask: f64,
    /// Normal images with no pixel above the threshold.
    pub normal_clean: f64,
}

pub fn score_grounding(heatmaps: &[&[f32]], masks: &[&Mask], threshold: f64) -> Result<GroundingReport> {
    if heatmaps.len() != masks.len() || heatmaps.is_empty() {
        return Err(Error::Usage(format!("{} heatmaps for {} masks", heatmaps.len(), masks.len())));
    }
    let mut pooled_s = Vec::new();
    let mut pooled_l = Vec::new();
    let (mut iou_abn, mut n_abn, mut iou_all) = (0.0, 0usize, 0.0);
    let (mut skipped, mut img_auc_sum, mut img_auc_n) = (0, 0.0, 0usize);
    let (mut argmax_hits, mut normal_clean, mut n_normal) = (0, 0, 0);
    for (h, m) in heatmaps.iter().zip(masks) {
        if h.len() != m.bits().len() {
            return Err(Error::Usage(format!("heatmap of {} pixels vs mask of {}", h.len(), m.bits().len())));
        }
        let labels: Vec<bool> = m.bits().iter().map(|&b| b == 1).collect();
        let scores: Vec<f64> = h.iter().map(|&v| v as f64).collect();
        let pred: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
        let v = iou(&pred, &labels);
        iou_all += v;
        match auc_midrank(&scores, &labels) {
            Some(a) => {
                img_auc_sum += a;
                img_auc_n += 1;
            }
            None => skipped += 1,
        }
        if m.is_empty() {
            n_normal += 1;
            normal_clean += (!pred.iter().any(|&p| p)) as usize;
        } else {
            iou_abn += v;
            n_abn += 1;
            let am = crate::lm::argmax(h);
            argmax_hits += labels[am] as usize;
        }
        pooled_s.extend(scores);
        pooled_l.extend(labels);
    }
    Ok(GroundingReport {
        auc: auc_midrank(&pooled_s, &pooled_l).unwrap_or(0.5),
        miou: if n_abn > 0 { iou_abn / n_abn as f64 } else { iou_all / heatmaps.len() as f64 },
        miou_all: iou_all / heatmaps.len() as f64,
        threshold,
        images: heatmaps.len(),
        abnormal_images: n_abn,
        auc_skipped: skipped,
        mean_image_auc: if img_auc_n > 0 { img_auc_sum / img_auc_n as f64 } else { f64::NAN },
        argmax_in_mask: ratio(argmax_hits, n_abn),
        normal_clean: ratio(normal_clean, n_normal),
    })
}

/// Splits a mixed split into its singles and pairs.
pub fn singles_and_pairs(samples: &[SyntheticSample]) -> (Vec<&SyntheticSample>, Vec<&SyntheticSample>) {
    samples.iter().partition(|s| !s.is_pair())
}

/// Generated answers for a set of single images.
pub fn answer_singles(model: &LesionLm, store: &ParamStore<f32>, samples: &[&SyntheticSample], mode: SingleMode, max_new: usize) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let images: Vec<&ImageTensor> = chunk.iter().map(|s| &s.images[0]).collect();
        out.extend(model.answer_singles(store, &images, mode, max_new)?);
    }
    Ok(out)
}

pub fn run_detection(
    model: &LesionLm,
    store: &ParamStore<f32>,
    samples: &[&SyntheticSample],
    mode: SingleMode,
    max_new: usize,
) -> Result<(DetectionReport, Vec<String>)> {
    let answers = answer_singles(model, store, samples, mode, max_new)?;
    let preds: Vec<BinaryAnswer> = answers.iter().map(|a| parse_binary(a)).collect();
    let golds: Vec<bool> = samples.iter().map(|s| s.label == crate::data::Label::Abnormal).collect();
    Ok((score_detection(&preds, &golds)?, answers))
}

pub fn run_progression(
    model: &LesionLm,
    store: &ParamStore<f32>,
    pairs: &[&SyntheticSample],
    averaging: Averaging,
    max_new: usize,
) -> Result<(ProgressionReport, Vec<String>)> {
    let mut answers = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(EVAL_BATCH) {
        let first: Vec<&ImageTensor> = chunk.iter().map(|s| &s.images[0]).collect();
        let second: Vec<&ImageTensor> = chunk.iter().map(|s| &s.images[1]).collect();
        answers.extend(model.answer_pairs(store, &first, &second, max_new)?);
    }
    let preds: Vec<Option<Progression>> = answers.iter().map(|a| parse_progression(a)).collect();
    let mut golds = Vec::with_capacity(pairs.len());
    for s in pairs {
        golds.push(s.progression.ok_or_else(|| Error::Usage("pair sample without a progression label".into()))?);
    }
    Ok((score_progression(&preds, &golds, averaging)?, answers))
}

/// Heatmaps `[H*W]` for every sample, in order.
pub fn heatmaps(model: &LesionLm, store: &ParamStore<f32>, samples: &[&SyntheticSample]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let images: Vec<&ImageTensor> = chunk.iter().map(|s| &s.images[0]).collect();
        let h = model.heatmaps(store, &images)?;
        let p = h.numel() / chunk.len();
        out.extend(h.data().chunks(p).map(|c| c.to_vec()));
    }
    Ok(out)
}

pub fn run_grounding(
    model: &LesionLm,
    store: &ParamStore<f32>,
    samples: &[&SyntheticSample],
    threshold: f64,
) -> Result<(GroundingReport, Vec<Vec<f32>>)> {
    let maps = heatmaps(model, store, samples)?;
    let hs: Vec<&[f32]> = maps.iter().map(|m| m.as_slice()).collect();
    let ms: Vec<&Mask> = samples.iter().map(|s| &s.masks[0]).collect();
    Ok((score_grounding(&hs, &ms, threshold)?, maps))
}

/// Anomaly maps `[G^2]` for every sample.
pub fn anomaly_maps(model: &LesionLm, store: &ParamStore<f32>, samples: &[&SyntheticSample]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let images: Vec<&ImageTensor> = chunk.iter().map(|s| &s.images[0]).collect();
        let map = model.anomaly_maps(store, &images)?;
        let n = map.numel() / chunk.len();
        out.extend(map.data().chunks(n).map(|c| c.to_vec()));
    }
    Ok(out)
}

/// Patches counted as lesion patches for salience checks.
pub fn lesion_patches(mask: &Mask, patch: usize) -> Vec<bool> {
    let counts = mask.patch_counts(patch);
    let strong: Vec<bool> = counts.iter().map(|&c| c >= LESION_PATCH_PIXELS).collect();
    if strong.iter().any(|&s| s) {
        strong
    } else {
        counts.iter().map(|&c| c > 0).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SalienceReport {
    pub abnormal_images: usize,
    /// Abnormal images whose mean map over lesion patches exceeds the mean
    /// over the other patches.
    pub lesion_above_background: f64,
    /// Abnormal images whose map maximum lies on a lesion patch.
    pub argmax_on_lesion: f64,
    pub mean_lesion: f64,
    pub mean_background: f64,
    pub normal_images: usize,
    pub normal_mean: f64,
    pub normal_mean_abs: f64,
}

pub fn run_salience(model: &LesionLm, store: &ParamStore<f32>, samples: &[&SyntheticSample]) -> Result<SalienceReport> {
    let maps = anomaly_maps(model, store, samples)?;
    let patch = model.cfg.patch_size;
    let (mut n_abn, mut above, mut hits, mut ml, mut mb) = (0usize, 0usize, 0usize, 0.0, 0.0);
    let (mut n_norm, mut nm, mut nma) = (0usize, 0.0, 0.0);
    for (s, map) in samples.iter().zip(&maps) {
        let mean = |sel: &dyn Fn(usize) -> bool| {
            let v: Vec<f64> = (0..map.len()).filter(|&i| sel(i)).map(|i| map[i] as f64).collect();
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        if s.masks[0].is_empty() {
            n_norm += 1;
            nm += mean(&|_| true);
            nma += map.iter().map(|v| v.abs() as f64).sum::<f64>() / map.len() as f64;
            continue;
        }
        let lesion = lesion_patches(&s.masks[0], patch);
        let (l, b) = (mean(&|i| lesion[i]), mean(&|i| !lesion[i]));
        n_abn += 1;
        above += (l > b) as usize;
        hits += lesion[crate::lm::argmax(map)] as usize;
        ml += l;
        mb += b;
    }
    let avg = |x: f64, n: usize| if n == 0 { 0.0 } else { x / n as f64 };
    Ok(SalienceReport {
        abnormal_images: n_abn,
        lesion_above_background: ratio(above, n_abn),
        argmax_on_lesion: ratio(hits, n_abn),
        mean_lesion: avg(ml, n_abn),
        mean_background: avg(mb, n_abn),
        normal_images: n_norm,
        normal_mean: avg(nm, n_norm),
        normal_mean_abs: avg(nma, n_norm),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_parsing_examples() {
        assert_eq!(parse_binary("Yes, there is a lesion."), BinaryAnswer::Yes);
        assert_eq!(parse_binary("No abnormality detected."), BinaryAnswer::No);
        assert_eq!(parse_binary("I'm unable to analyze medical images"), BinaryAnswer::Unparseable);
        assert_eq!(parse_binary("NEGATIVE"), BinaryAnswer::No);
        assert_eq!(parse_binary("abnormality present"), BinaryAnswer::Yes);
    }

    #[test]
    fn progression_parsing() {
        assert_eq!(parse_progression("C: Worsened"), Some(Progression::Worsened));
        assert_eq!(parse_progression("a: unchanged"), Some(Progression::NoChange));
        assert_eq!(parse_progression("It looks better now"), Some(Progression::Improved));
        assert_eq!(parse_progression("maybe"), None);
    }

    #[test]
    fn detection_examples() {
        use BinaryAnswer::*;
        let r = score_detection(&[Yes, No, Yes], &[true, false, true]).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        let r = score_detection(&[Yes, Yes], &[true, false]).unwrap();
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-15);
        let r = score_detection(&[Unparseable, Unparseable], &[true, false]).unwrap();
        assert_eq!((r.fn_, r.tn, r.unparseable), (1, 1, 2));
        assert!(score_detection(&[Yes], &[]).is_err());
    }

    #[test]
    fn progression_all_no_change() {
        let golds = [Progression::Worsened, Progression::Improved, Progression::NoChange];
        let r = score_progression(&[Some(Progression::NoChange); 3], &golds, Averaging::Micro).unwrap();
        assert_eq!((r.worsened, r.improved, r.no_change), (0.0, 0.0, 1.0));
        assert!((r.overall - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn grounding_examples() {
        let mask = Mask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        let exact: Vec<f32> = mask.as_f32();
        let r = score_grounding(&[&exact], &[&mask], 0.5).unwrap();
        assert_eq!((r.auc, r.miou), (1.0, 1.0));
        let flat = vec![0.3f32; 4];
        assert_eq!(score_grounding(&[&flat], &[&mask], 0.5).unwrap().auc, 0.5);
        let disjoint = vec![0.0f32, 1.0, 1.0, 0.0];
        assert_eq!(score_grounding(&[&disjoint], &[&mask], 0.5).unwrap().miou, 0.0);
        let empty = Mask::empty(2, 2);
        let r = score_grounding(&[&flat], &[&empty], 0.5).unwrap();
        assert_eq!(r.auc_skipped, 1);
    }

    #[test]
    fn auc_ties_use_midranks() {
        let a = auc_midrank(&[0.1, 0.5, 0.5, 0.9], &[false, true, false, true]).unwrap();
        assert!((a - 0.875).abs() < 1e-15);
        assert!(auc_midrank(&[0.1, 0.2], &[true, true]).is_none());
    }
}
