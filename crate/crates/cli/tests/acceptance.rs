//! Acceptance run. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! Criteria 3, 4, 6 and 7 need the full default pipeline, which is trained
//! here through the `lesionlm` binary (roughly an hour on one core). Set
//! `LESIONLM_ACCEPTANCE_DIR` to keep the run somewhere specific, and
//! `LESIONLM_ACCEPTANCE_REUSE=1` to reuse outputs already in that directory.
//! `LESIONLM_ACCEPTANCE_ONLY=1,2,5` restricts the run to the listed criteria.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use lesionlm_core::ablation::{AblationResults, POOLING_GRID, PROMPT_GRID};
use lesionlm_core::anomaly::{modulate, AnomalyAttentionMap, SYS_ABNORMAL, SYS_NORMAL};
use lesionlm_core::backbone::linear_probe_accuracy;
use lesionlm_core::config::{DataConfig, ModelConfig, Modulation};
use lesionlm_core::data::{gen_pair, gen_single, Progression, SyntheticSample, PAIR_QUESTION, SINGLE_QUESTION};
use lesionlm_core::eval::{auc_midrank, score_detection, score_grounding, score_progression, BinaryAnswer};
use lesionlm_core::heatmap::{dice_ce_loss, Heatmap, DICE_EPS};
use lesionlm_core::image::{ImageTensor, Mask};
use lesionlm_core::model::SingleMode;
use lesionlm_core::params::Ctx;
use lesionlm_core::sequence::{render_template, Layout, TemplateMode};
use lesionlm_core::train::{probe_set, read_log, run_probes, CheckpointDir, Stage, StageRecord};
use lesionlm_core::vocab::Vocab;
use lesionlm_core::{Group, LesionLm, ParamStore, RunConfig};
use lesionlm_tensor::{Float, Graph, Tensor, Var};

type Check = std::result::Result<String, String>;

fn main() {
    let only: Option<Vec<u32>> =
        std::env::var("LESIONLM_ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut results: BTreeMap<u32, (&str, Check)> = BTreeMap::new();
    let mut record = |n: u32, name: &'static str, f: &dyn Fn() -> Check| {
        if !wanted(n) {
            return;
        }
        eprintln!("[acceptance] running criterion {n} ({name})");
        let start = Instant::now();
        let out = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(r) => r,
            Err(p) => Err(format!("panicked: {}", panic_text(&p))),
        };
        eprintln!("[acceptance] criterion {n} finished in {:.1}s", start.elapsed().as_secs_f64());
        results.insert(n, (name, out));
    };

    record(1, "mechanism", &mechanism);
    record(2, "gradient check", &gradient_check);
    record(5, "metric oracles", &metric_oracles);
    record(8, "templates", &templates);

    let run = Run::new();
    let mut notes = Vec::new();
    if ![3, 4, 6, 7].into_iter().any(wanted) {
        return finish(&results, &notes);
    }
    let pipeline = catch_unwind(AssertUnwindSafe(|| run.pipeline())).unwrap_or_else(|p| Err(format!("panicked: {}", panic_text(&p))));
    match &pipeline {
        Ok(timing) => {
            let t = timing.clone();
            record(6, "synthetic end-to-end", &|| end_to_end(&run, &t));
            record(3, "stage isolation", &|| stage_isolation(&run));
            record(4, "forgetting guard", &|| forgetting_guard(&run));
            record(7, "ablation harness", &|| ablation(&run));
            notes = catch_unwind(AssertUnwindSafe(|| measured(&run))).unwrap_or_else(|p| vec![format!("not available: {}", panic_text(&p))]);
        }
        Err(e) => {
            for (n, name) in [(3, "stage isolation"), (4, "forgetting guard"), (6, "synthetic end-to-end"), (7, "ablation harness")] {
                if wanted(n) {
                    results.insert(n, (name, Err(format!("pipeline did not complete: {e}"))));
                }
            }
        }
    }
    finish(&results, &notes);
}

fn finish(results: &BTreeMap<u32, (&str, Check)>, notes: &[String]) {
    println!();
    let mut failed = 0;
    for (n, (name, r)) in results {
        match r {
            Ok(d) => println!("criterion {n} ({name}): PASS - {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL - {d}");
            }
        }
    }
    for n in notes {
        println!("measured (reported, not a criterion): {n}");
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn panic_text(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_image(rng: &mut ChaCha8Rng, size: usize) -> ImageTensor {
    ImageTensor::new(size, size, (0..size * size).map(|_| rng.random::<f32>()).collect()).unwrap()
}

// ---------------------------------------------------------------- 1

fn mechanism() -> Check {
    let start = Instant::now();
    let cfg = RunConfig::default();
    let size = cfg.model.image_size;
    let data = DataConfig::default();
    let mut passes = 0;
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for m in 0..10u64 {
        let (model, mut store) = LesionLm::new::<f32>(&cfg.model, Vocab::default(), 500 + m).map_err(e2s)?;
        // Larger system tokens push the scorer into its clamp.
        let scale = [1.0f32, 30.0, 3000.0][m as usize % 3];
        for name in [SYS_ABNORMAL, SYS_NORMAL] {
            store.get_mut(name).data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(m);
        for k in 0..100u64 {
            let img = if k % 2 == 0 { random_image(&mut rng, size) } else { gen_single(m * 1000 + k, 0.5, &data, size).images[0].clone() };
            let map = model.anomaly_maps(&store, &[&img]).map_err(e2s)?;
            for &v in map.data() {
                ensure(v.is_finite() && v > -1.0 && v < 1.0, || format!("map value {v} outside (-1, 1)"))?;
                lo = lo.min(v);
                hi = hi.max(v);
            }
            passes += 1;
        }
    }

    // Swapping the two system tokens negates the map; swapping the images
    // of a pair negates the difference queries.
    let (model, store) = LesionLm::new::<f32>(&cfg.model, Vocab::default(), 77).map_err(e2s)?;
    let mut swapped = store.clone();
    let (a, n) = (store.get(SYS_ABNORMAL).clone(), store.get(SYS_NORMAL).clone());
    *swapped.get_mut(SYS_ABNORMAL) = n;
    *swapped.get_mut(SYS_NORMAL) = a;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut map_err, mut diff_err) = (0.0f64, 0.0f64);
    for k in 0..20u64 {
        let s = gen_pair(k, Progression::ALL[k as usize % 3], &data, size, true);
        let (x, y) = if k % 2 == 0 { (s.images[0].clone(), s.images[1].clone()) } else { (random_image(&mut rng, size), random_image(&mut rng, size)) };
        let m1 = model.anomaly_maps(&store, &[&x]).map_err(e2s)?;
        let m2 = model.anomaly_maps(&swapped, &[&x]).map_err(e2s)?;
        for (p, q) in m1.data().iter().zip(m2.data()) {
            map_err = map_err.max((p + q).abs() as f64);
        }
        let q1 = model.diff_queries(&store, &[&x], &[&y]).map_err(e2s)?;
        let q2 = model.diff_queries(&store, &[&y], &[&x]).map_err(e2s)?;
        for (p, q) in q1.data().iter().zip(q2.data()) {
            diff_err = diff_err.max((p + q).abs() as f64);
        }
    }
    ensure(map_err <= 1e-6, || format!("map swap residual {map_err:e} > 1e-6"))?;
    ensure(diff_err <= 1e-6, || format!("diff-query swap residual {diff_err:e} > 1e-6"))?;

    // A zero map leaves the features bit-identical.
    let g = cfg.model.grid();
    let d = cfg.model.enc_dim;
    for t in 0..100 {
        let scale = 10f32.powi(t % 9 - 4);
        let feats = Tensor::new(&[g, g, d], (0..g * g * d).map(|_| (rng.random::<f32>() - 0.5) * scale).collect());
        let zero = AnomalyAttentionMap { values: Tensor::zeros(&[g, g]), layers: vec![] };
        let out = modulate(&feats, &zero, Modulation::Shifted).map_err(e2s)?;
        ensure(out.data().iter().zip(feats.data()).all(|(a, b)| a.to_bits() == b.to_bits()), || "zero-map modulation changed a bit".into())?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s (limit 60s)"))?;
    Ok(format!(
        "{passes} passes (system tokens scaled up to 3000x), map range [{lo:.6}, {hi:.6}], swap residuals map {map_err:.1e} diff {diff_err:.1e}, zero map bit-exact, {secs:.1}s"
    ))
}

// ---------------------------------------------------------------- 2

fn grad_model() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        enc_dim: 32,
        enc_heads: 2,
        n_prompts: 3,
        pool: 2,
        qformer_dim: 32,
        qformer_heads: 2,
        lm_dim: 32,
        lm_layers: 1,
        lm_heads: 2,
        adapter_dim: 8,
        fusion_dim: 16,
        decoder_widths: vec![16, 8, 8, 4],
        decoder_blocks: vec![1, 1, 0, 0],
        ..ModelConfig::default()
    }
}

/// Sum of the three training losses, so one scalar touches prompts,
/// anomaly, diff and heatmap parameters.
fn combined_loss<F: Float>(model: &LesionLm, cx: &Ctx<F>, singles: &[&SyntheticSample], pairs: &[&SyntheticSample]) -> Var {
    let g = cx.g;
    let l1 = model.single_loss(cx, singles).unwrap();
    let l2 = model.pair_loss(cx, pairs).unwrap();
    let images: Vec<&ImageTensor> = singles.iter().map(|s| &s.images[0]).collect();
    let iv = model.image_vars(cx, &images, SingleMode::Ano, true).unwrap();
    let logits = model.heatmap.forward(cx, &iv.grids[..4], iv.ano.unwrap().tokens).unwrap();
    let px = model.cfg.image_size * model.cfg.image_size;
    let masks: Vec<F> = singles.iter().flat_map(|s| s.masks[0].as_f32()).map(|v| F::from_f64(v as f64)).collect();
    let l3 = g.dice_ce_with_logits(logits, &Tensor::new(&[singles.len(), px], masks), DICE_EPS);
    g.add(g.add(l1, l2), l3)
}

fn gradient_check() -> Check {
    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    const PER_GROUP: usize = 160;
    // Central differences at this step carry ~1e-10 of absolute rounding
    // noise, so gradients below the floor are compared in absolute terms.
    const FLOOR: f64 = 1e-5;
    const MIN_RELATIVE: usize = 500;
    let start = Instant::now();
    let cfg = grad_model();
    let data = DataConfig::default();
    let (model, mut store) = LesionLm::new::<f64>(&cfg, Vocab::default(), 21).map_err(e2s)?;
    let singles: Vec<SyntheticSample> = (0..2).map(|k| gen_single(40 + k, 1.0, &data, cfg.image_size)).collect();
    let pairs: Vec<SyntheticSample> = vec![gen_pair(50, Progression::Worsened, &data, cfg.image_size, true)];
    let sr: Vec<&SyntheticSample> = singles.iter().collect();
    let pr: Vec<&SyntheticSample> = pairs.iter().collect();
    let groups = [Group::Prompts, Group::Anomaly, Group::Diff, Group::Heatmap];

    let analytic: BTreeMap<String, Tensor<f64>> = {
        let g = Graph::new();
        let cx = Ctx::new(&g, &store, groups);
        let loss = combined_loss(&model, &cx, &sr, &pr);
        let grads = g.backward(loss);
        cx.bound().into_iter().filter_map(|(name, v)| grads.get(v).map(|t| (name, t.clone()))).collect()
    };
    let eval = |store: &ParamStore<f64>| -> f64 {
        let g = Graph::no_grad();
        let cx = Ctx::frozen(&g, store);
        g.value(combined_loss(&model, &cx, &sr, &pr)).item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    let mut above_floor = 0;
    let mut worst = (0.0f64, String::new());
    let mut per_group = Vec::new();
    for group in groups {
        let names = store.group_names(group);
        let sizes: Vec<usize> = names.iter().map(|n| store.get(n).numel()).collect();
        let total: usize = sizes.iter().sum();
        let mut group_worst = 0.0f64;
        for _ in 0..PER_GROUP {
            let mut k = rng.random_range(0..total);
            let mut which = 0;
            while k >= sizes[which] {
                k -= sizes[which];
                which += 1;
            }
            let name = &names[which];
            let a = analytic.get(name).map(|t| t.data()[k]).unwrap_or(0.0);
            let orig = store.get(name).data()[k];
            store.get_mut(name).data_mut()[k] = orig + STEP;
            let up = eval(&store);
            store.get_mut(name).data_mut()[k] = orig - STEP;
            let down = eval(&store);
            store.get_mut(name).data_mut()[k] = orig;
            let n = (up - down) / (2.0 * STEP);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(FLOOR);
            above_floor += (a.abs().max(n.abs()) >= FLOOR) as usize;
            group_worst = group_worst.max(rel);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{k}]: analytic {a:e}, numeric {n:e}"));
            }
            checked += 1;
        }
        per_group.push(format!("{} {:.1e}", group.as_str(), group_worst));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst.0 < TOL, || format!("max relative error {:.2e} >= {TOL:e} at {}", worst.0, worst.1))?;
    ensure(secs < 600.0, || format!("took {secs:.0}s (limit 600s)"))?;
    ensure(above_floor >= MIN_RELATIVE, || format!("only {above_floor} sampled gradients reach the {FLOOR:e} floor"))?;
    Ok(format!(
        "{checked} parameters ({above_floor} with |grad| >= {FLOOR:e}), max relative error per group: {}, {secs:.1}s",
        per_group.join(", ")
    ))
}

// ---------------------------------------------------------------- 5

fn oracle_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

fn oracle_sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for inst in 0..100 {
        // Detection: counts by enumeration of the four outcome cells.
        let n = rng.random_range(1..60);
        let preds: Vec<BinaryAnswer> =
            (0..n).map(|_| [BinaryAnswer::Yes, BinaryAnswer::No, BinaryAnswer::Unparseable][rng.random_range(0..3)]).collect();
        let golds: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let r = score_detection(&preds, &golds).map_err(e2s)?;
        let cell = |p: bool, g: bool| preds.iter().zip(&golds).filter(|(a, b)| (**a == BinaryAnswer::Yes) == p && **b == g).count();
        let (tp, fp, fn_, tn) = (cell(true, true), cell(true, false), cell(false, true), cell(false, false));
        let unp = preds.iter().filter(|&&p| p == BinaryAnswer::Unparseable).count();
        ensure((r.tp, r.fp, r.fn_, r.tn, r.unparseable, r.n) == (tp, fp, fn_, tn, unp, n), || format!("detection counts differ on instance {inst}"))?;
        let p = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        let rc = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
        let f1 = if p + rc > 0.0 { 2.0 * p * rc / (p + rc) } else { 0.0 };
        ensure((r.f1 - f1).abs() <= 1e-12 && (r.accuracy - (tp + tn) as f64 / n as f64).abs() <= 1e-12, || {
            format!("detection F1/accuracy differ on instance {inst}")
        })?;

        // Progression: per-class and overall accuracy.
        let m = rng.random_range(1..60);
        let golds: Vec<Progression> = (0..m).map(|_| Progression::ALL[rng.random_range(0..3)]).collect();
        let preds: Vec<Option<Progression>> =
            (0..m).map(|_| if rng.random_bool(0.1) { None } else { Some(Progression::ALL[rng.random_range(0..3)]) }).collect();
        let r = score_progression(&preds, &golds, Default::default()).map_err(e2s)?;
        let correct = preds.iter().zip(&golds).filter(|(p, g)| **p == Some(**g)).count();
        ensure(r.micro == correct as f64 / m as f64 && r.overall == r.micro, || format!("overall accuracy differs on instance {inst}"))?;
        for (cls, got) in [(Progression::Worsened, r.worsened), (Progression::Improved, r.improved), (Progression::NoChange, r.no_change)] {
            let tot = golds.iter().filter(|&&g| g == cls).count();
            let ok = preds.iter().zip(&golds).filter(|(p, g)| **g == cls && **p == Some(cls)).count();
            ensure(r.counts[&cls].total == tot && r.counts[&cls].correct == ok, || format!("class counts differ on instance {inst}"))?;
            let want = if tot > 0 { ok as f64 / tot as f64 } else { 0.0 };
            ensure(got == want, || format!("class accuracy differs on instance {inst}"))?;
        }

        // AUC with plenty of ties.
        let k = rng.random_range(2..80);
        let scores: Vec<f64> = (0..k).map(|_| (rng.random_range(0..12) as f64) / 11.0).collect();
        let labels: Vec<bool> = (0..k).map(|_| rng.random_bool(0.4)).collect();
        match (auc_midrank(&scores, &labels), oracle_auc(&scores, &labels)) {
            (Some(a), Some(b)) => ensure((a - b).abs() <= 1e-9, || format!("AUC {a} vs oracle {b} on instance {inst}"))?,
            (None, None) => {}
            (a, b) => return Err(format!("AUC definedness differs on instance {inst}: {a:?} vs {b:?}")),
        }

        // Grounding: mIoU over abnormal images and pooled AUC.
        let side = 6;
        let imgs = rng.random_range(1..6);
        let mut heat = Vec::new();
        let mut masks = Vec::new();
        for _ in 0..imgs {
            heat.push((0..side * side).map(|_| (rng.random_range(0..20) as f32) / 19.0).collect::<Vec<f32>>());
            let empty = rng.random_bool(0.3);
            masks.push(Mask::new(side, side, (0..side * side).map(|_| (!empty && rng.random_bool(0.3)) as u8).collect()).unwrap());
        }
        let hs: Vec<&[f32]> = heat.iter().map(|h| h.as_slice()).collect();
        let ms: Vec<&Mask> = masks.iter().collect();
        let thr = 0.5;
        let r = score_grounding(&hs, &ms, thr).map_err(e2s)?;
        let mut ious = Vec::new();
        for (h, m) in heat.iter().zip(&masks) {
            if m.area() == 0 {
                continue;
            }
            let inter = (0..side * side).filter(|&i| h[i] as f64 >= thr && m.bits()[i] == 1).count();
            let union = (0..side * side).filter(|&i| h[i] as f64 >= thr || m.bits()[i] == 1).count();
            ious.push(inter as f64 / union as f64);
        }
        if !ious.is_empty() {
            let want = ious.iter().sum::<f64>() / ious.len() as f64;
            ensure((r.miou - want).abs() <= 1e-12 && r.abnormal_images == ious.len(), || format!("mIoU {} vs oracle {want} on instance {inst}", r.miou))?;
        }
        let pooled_s: Vec<f64> = heat.iter().flatten().map(|&v| v as f64).collect();
        let pooled_l: Vec<bool> = masks.iter().flat_map(|m| m.bits().iter().map(|&b| b == 1)).collect();
        if let Some(want) = oracle_auc(&pooled_s, &pooled_l) {
            ensure((r.auc - want).abs() <= 1e-9, || format!("pooled AUC {} vs oracle {want} on instance {inst}", r.auc))?;
        }

        // Dice + BCE: probability form and the differentiable logit form.
        let b = rng.random_range(1..4);
        let px = rng.random_range(4..40);
        let logits: Vec<f64> = (0..b * px).map(|_| rng.random_range(-6.0..6.0)).collect();
        let mk: Vec<f64> = (0..b * px).map(|_| rng.random_bool(0.35) as u8 as f64).collect();
        let mut dice = 0.0;
        let mut bce = 0.0;
        for i in 0..b {
            let (mut inter, mut ps, mut msum) = (0.0, 0.0, 0.0);
            for j in 0..px {
                let p = oracle_sigmoid(logits[i * px + j]);
                let m = mk[i * px + j];
                inter += p * m;
                ps += p;
                msum += m;
                bce += -(m * p.ln() + (1.0 - m) * (1.0 - p).ln());
            }
            dice += 1.0 - (2.0 * inter + 1.0) / (ps + msum + 1.0);
        }
        let want = 0.5 * dice / b as f64 + 0.5 * bce / (b * px) as f64;
        let g = Graph::<f64>::no_grad();
        let z = g.constant(Tensor::new(&[b, px], logits.clone()));
        let got = g.value(g.dice_ce_with_logits(z, &Tensor::new(&[b, px], mk.clone()), DICE_EPS)).item();
        ensure((got - want).abs() <= 1e-6, || format!("Dice+CE {got} vs oracle {want} on instance {inst}"))?;
        // Single-image probability form (clamped at 1e-7 inside).
        let probs: Vec<f32> = logits[..px].iter().map(|&z| oracle_sigmoid(z.clamp(-5.0, 5.0)) as f32).collect();
        let (mut inter, mut ps, mut msum, mut bce1) = (0.0, 0.0, 0.0, 0.0);
        for j in 0..px {
            let (p, m) = (probs[j] as f64, mk[j]);
            inter += p * m;
            ps += p;
            msum += m;
            bce1 += -(m * p.ln() + (1.0 - m) * (1.0 - p).ln());
        }
        let want1 = 0.5 * (1.0 - (2.0 * inter + 1.0) / (ps + msum + 1.0)) + 0.5 * bce1 / px as f64;
        let hm = Heatmap { values: Tensor::new(&[1, px], probs), image_id: 0 };
        let m32: Vec<f32> = mk[..px].iter().map(|&v| v as f32).collect();
        let got1 = dice_ce_loss(&hm, &m32).map_err(e2s)?;
        ensure((got1 - want1).abs() <= 1e-6, || format!("heatmap Dice+CE {got1} vs oracle {want1} on instance {inst}"))?;
    }
    Ok("100 random instances each: detection and progression counts exact, AUC within 1e-9, mIoU exact, Dice+CE within 1e-6".into())
}

// ---------------------------------------------------------------- 8

fn templates() -> Check {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/templates");
    for (mode, question, file) in [(TemplateMode::Single, SINGLE_QUESTION, "single.txt"), (TemplateMode::Pair, PAIR_QUESTION, "pair.txt")] {
        let golden = std::fs::read(dir.join(file)).map_err(|e| format!("{file}: {e}"))?;
        let rendered = render_template(mode, question).map_err(e2s)?;
        ensure(rendered.text.as_bytes() == golden.as_slice(), || format!("{file} differs from the rendered template"))?;
    }
    let mut lengths = Vec::new();
    for pool in POOLING_GRID {
        let cfg = ModelConfig { pool, ..ModelConfig::default() };
        let (model, store) = LesionLm::new::<f32>(&cfg, Vocab::default(), 1).map_err(e2s)?;
        let vis = 64;
        let tok = pool * pool;
        let qs = model.single_question().len();
        let qp = model.pair_question().len();
        let data = DataConfig::default();
        let s = gen_single(1, 1.0, &data, 64);
        let p = gen_pair(2, Progression::Improved, &data, 64, true);
        let g = Graph::<f32>::no_grad();
        let cx = Ctx::frozen(&g, &store);
        let (ano, _) = model.single_prefix(&cx, &[&s.images[0]], SingleMode::Ano).map_err(e2s)?;
        let (base, _) = model.single_prefix(&cx, &[&s.images[0]], SingleMode::Baseline).map_err(e2s)?;
        let (pair, _) = model.pair_prefix(&cx, &[&p.images[0]], &[&p.images[1]]).map_err(e2s)?;
        let want = [
            (Layout::AnoSingle, vis + tok + qs, g.shape(ano)[1]),
            (Layout::Baseline, vis + qs, g.shape(base)[1]),
            (Layout::AnoPair, 2 * vis + 2 * tok + qp + tok, g.shape(pair)[1]),
        ];
        for (layout, expect, built) in want {
            ensure(built == expect && model.sequence_len(layout) == expect, || {
                format!("pool {pool}: {layout:?} length {built} (planned {}) expected {expect}", model.sequence_len(layout))
            })?;
        }
        let ablated = ModelConfig { ablate_ano: true, ..cfg };
        let (am, astore) = LesionLm::new::<f32>(&ablated, Vocab::default(), 1).map_err(e2s)?;
        let g2 = Graph::<f32>::no_grad();
        let cx2 = Ctx::frozen(&g2, &astore);
        let (dp, _) = am.pair_prefix(&cx2, &[&p.images[0]], &[&p.images[1]]).map_err(e2s)?;
        ensure(g2.shape(dp)[1] == 2 * vis + qp + tok && am.sequence_len(Layout::DiffOnlyPair) == 2 * vis + qp + tok, || {
            format!("pool {pool}: diff-only pair length {}", g2.shape(dp)[1])
        })?;
        lengths.push(format!("p={pool}: {}/{}/{}", vis + tok + qs, 2 * vis + 2 * tok + qp + tok, 2 * vis + qp + tok));
    }
    Ok(format!("golden templates byte-identical; single/pair/diff-only lengths {}", lengths.join(", ")))
}

// ---------------------------------------------------------------- pipeline

#[derive(Clone, Debug)]
struct Timing {
    seconds: f64,
    reused: bool,
}

struct Run {
    out: PathBuf,
    reuse: bool,
}

impl Run {
    fn new() -> Self {
        let out = std::env::var_os("LESIONLM_ACCEPTANCE_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance"));
        let reuse = std::env::var("LESIONLM_ACCEPTANCE_REUSE").is_ok_and(|v| v == "1");
        Self { out, reuse }
    }

    fn cli(&self, args: &[&str]) -> std::result::Result<(), String> {
        eprintln!("[acceptance] lesionlm {}", args.join(" "));
        let status = Command::new(env!("CARGO_BIN_EXE_lesionlm"))
            .args(args)
            .arg("--out")
            .arg(&self.out)
            .env("RUST_LOG", "warn")
            .status()
            .map_err(e2s)?;
        ensure(status.success(), || format!("`lesionlm {}` exited with {status}", args.join(" ")))
    }

    fn ckpt(&self) -> CheckpointDir {
        CheckpointDir::new(self.out.join("checkpoints"))
    }

    fn report(&self, task: &str, file: &str) -> std::result::Result<Value, String> {
        let path = self.out.join("eval").join(task).join(file);
        let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(e2s)
    }

    /// Default-seed corpus, stages 0 to 3 and the three evaluation tasks.
    fn pipeline(&self) -> std::result::Result<Timing, String> {
        let done = self.ckpt().has(Stage::Three) && self.out.join("eval/ground/report.json").exists();
        if self.reuse && done {
            let mut seconds = 0.0;
            for s in [Stage::Backbone, Stage::LmWarmup, Stage::One, Stage::Two, Stage::Three] {
                let r: StageRecord = self.ckpt().load_record(s).map_err(e2s)?;
                seconds += r.seconds;
            }
            return Ok(Timing { seconds, reused: true });
        }
        let start = Instant::now();
        self.cli(&["gen-data", "--overwrite"])?;
        for stage in ["0", "1", "2", "3"] {
            self.cli(&["train", "--stage", stage, "--overwrite"])?;
        }
        for task in ["detect", "progress", "ground"] {
            self.cli(&["eval", "--task", task, "--overwrite"])?;
        }
        Ok(Timing { seconds: start.elapsed().as_secs_f64(), reused: false })
    }
}

// ---------------------------------------------------------------- 6

fn end_to_end(run: &Run, timing: &Timing) -> Check {
    let det = run.report("detect", "report.json")?;
    let prog = run.report("progress", "report.json")?;
    let ground = run.report("ground", "report.json")?;
    let num = |v: &Value, path: &[&str]| -> std::result::Result<f64, String> {
        let mut cur = v;
        for p in path {
            cur = &cur[*p];
        }
        cur.as_f64().ok_or_else(|| format!("report field {} missing", path.join(".")))
    };
    let f1 = num(&det, &["detection", "f1"])?;
    let overall = num(&prog, &["progression", "overall"])?;
    let no_change = num(&prog, &["progression", "no_change"])?;
    let auc = num(&ground, &["grounding", "auc"])?;
    let miou = num(&ground, &["grounding", "miou"])?;
    let minutes = timing.seconds / 60.0;
    let summary = format!(
        "detection F1 {f1:.3}, progression overall {overall:.3}, no-change {no_change:.3}, heatmap AUC {auc:.3}, mIoU {miou:.3}, {minutes:.1} min{}",
        if timing.reused { " (training time from stage records; outputs reused)" } else { "" }
    );
    let mut misses = Vec::new();
    for (name, v, floor) in [("F1", f1, 0.90), ("overall accuracy", overall, 0.80), ("no-change accuracy", no_change, 0.80), ("AUC", auc, 0.90), ("mIoU", miou, 0.50)] {
        if !(v >= floor) {
            misses.push(format!("{name} {v:.3} < {floor}"));
        }
    }
    if minutes >= 60.0 {
        misses.push(format!("runtime {minutes:.1} min >= 60"));
    }
    ensure(misses.is_empty(), || format!("{}; {summary}", misses.join(", ")))?;
    Ok(summary)
}

// ---------------------------------------------------------------- measured behaviour

/// Model-behaviour figures from the default run, printed next to the
/// criteria without affecting the verdict.
fn measured(run: &Run) -> Vec<String> {
    let mut out = Vec::new();
    let ckpt = run.ckpt();
    let pct = |v: f64| format!("{:.1}%", 100.0 * v);
    if let Ok(r) = ckpt.load_record(Stage::Backbone) {
        let l = &r.report.epoch_losses;
        let falling = l.len() >= 3 && l[1] < l[0] && l[2] < l[1];
        out.push(format!("encoder pretraining epoch losses {:?}; first three strictly decreasing: {falling}", &l[..l.len().min(3)]));
    }
    if let Ok(r) = ckpt.load_record(Stage::One) {
        out.push(format!(
            "stage 1 loss over the first epoch {:.4} -> {:.4} (first vs last tenth)",
            r.report.first_epoch_start, r.report.first_epoch_end
        ));
    }
    if let Ok(det) = run.report("detect", "report.json") {
        let d = &det["detection"];
        if let (Some(tp), Some(fn_)) = (d["tp"].as_f64(), d["fn"].as_f64()) {
            out.push(format!("\"Yes\" on abnormal test images {} (target >= 90%)", pct(tp / (tp + fn_).max(1.0))));
        }
        let s = &det["salience"];
        if let Some(v) = s["lesion_above_background"].as_f64() {
            out.push(format!("lesion map mean above background on {} of abnormal images (target >= 90%)", pct(v)));
        }
        if let Some(v) = s["normal_mean"].as_f64() {
            out.push(format!("mean anomaly-map value on normal images {v:.4}"));
        }
    }
    if let Ok(g) = run.report("ground", "report.json") {
        if let Some(v) = g["grounding"]["argmax_in_mask"].as_f64() {
            out.push(format!("heatmap argmax inside the lesion mask on {} of abnormal images (target >= 90%)", pct(v)));
        }
    }
    if let Ok(p) = run.report("progress", "report.json") {
        if let Some(v) = p["progression"]["no_change"].as_f64() {
            out.push(format!("\"no change\" on unchanged pairs under brightness/translation nuisance {} (target >= 80%)", pct(v)));
        }
    }
    match encoder_probe(run) {
        Ok(acc) => out.push(format!("frozen-encoder linear probe on held-out normal/abnormal images {} (target >= 80%)", pct(acc))),
        Err(e) => out.push(format!("frozen-encoder linear probe not available: {e}")),
    }
    out
}

fn encoder_probe(run: &Run) -> std::result::Result<f64, String> {
    let cfg = RunConfig::default();
    let (model, _) = LesionLm::new::<f32>(&cfg.model, Vocab::default(), cfg.seed).map_err(e2s)?;
    let store = run.ckpt().load(Stage::Backbone).map_err(e2s)?;
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for s in 0..600u64 {
        let x = gen_single(9_000_000 + s, 0.5, &cfg.data, cfg.model.image_size);
        let enc = model.backbone.encode(&store, &x.images[0], None).map_err(e2s)?;
        let last = enc.layers.last().unwrap();
        let d = last.shape()[2];
        let n = last.numel() / d;
        feats.push((0..d).map(|j| (0..n).map(|i| last.data()[i * d + j] as f64).sum::<f64>() / n as f64).collect::<Vec<f64>>());
        labels.push(x.label == lesionlm_core::data::Label::Abnormal);
    }
    Ok(linear_probe_accuracy(&feats[..400], &labels[..400], &feats[400..], &labels[400..]))
}

// ---------------------------------------------------------------- 3

fn stage_isolation(run: &Run) -> Check {
    let ckpt = run.ckpt();
    let stages = [Stage::LmWarmup, Stage::One, Stage::Two, Stage::Three];
    let mut stores = BTreeMap::new();
    for s in stages {
        stores.insert(s.as_str(), ckpt.load(s).map_err(e2s)?);
    }
    // Which groups each checkpoint must share bit-for-bit with the one
    // that last trained them.
    let fixed: [(Stage, &[Group]); 3] = [
        (Stage::LmWarmup, &[Group::Backbone, Group::Projector, Group::Lm]),
        (Stage::One, &[Group::Prompts, Group::Adapter, Group::Anomaly]),
        (Stage::Two, &[Group::Diff]),
    ];
    let mut compared = 0;
    for (origin, groups) in fixed {
        let reference = &stores[origin.as_str()];
        for later in stages.iter().filter(|s| stages.iter().position(|x| x == *s) > stages.iter().position(|x| *x == origin)) {
            let other = &stores[later.as_str()];
            for &g in groups {
                ensure(reference.digest(g) == other.digest(g), || format!("{} digest changed between stage {} and stage {}", g.as_str(), origin.as_str(), later.as_str()))?;
                for name in reference.group_names(g) {
                    let same = reference.get(&name).data().iter().zip(other.get(&name).data()).all(|(a, b)| a.to_bits() == b.to_bits());
                    ensure(same, || format!("{name} changed between stage {} and stage {}", origin.as_str(), later.as_str()))?;
                }
                compared += 1;
            }
        }
    }
    let mut steps = 0;
    for s in [Stage::Backbone, Stage::LmWarmup, Stage::One, Stage::Two, Stage::Three] {
        for r in read_log(&ckpt.log_path(s)).map_err(e2s)? {
            ensure(r.frozen_grad_norm == 0.0, || format!("stage {} step {} frozen gradient norm {}", s.as_str(), r.step, r.frozen_grad_norm))?;
            steps += 1;
        }
    }
    Ok(format!("{compared} group comparisons bit-identical across later stages; frozen gradient norm 0 at all {steps} logged steps"))
}

// ---------------------------------------------------------------- 4

fn forgetting_guard(run: &Run) -> Check {
    let cfg = RunConfig::load(&run.out.join("checkpoints/run_config.toml")).map_err(e2s)?;
    let (model, fresh) = LesionLm::new::<f32>(&cfg.model, Vocab::default(), cfg.seed).map_err(e2s)?;
    let probes = probe_set(&model, &cfg);
    let mut outputs = Vec::new();
    for s in [Stage::LmWarmup, Stage::One, Stage::Two] {
        let mut store = fresh.clone();
        store.assign_from(&run.ckpt().load(s).map_err(e2s)?).map_err(e2s)?;
        outputs.push(run_probes(&model, &store, &probes).map_err(e2s)?);
    }
    for (k, later) in outputs.iter().enumerate().skip(1) {
        for (i, (a, b)) in outputs[0].iter().zip(later).enumerate() {
            ensure(a == b, || format!("probe {i} differs after stage {k}"))?;
        }
    }
    for s in ["1", "2"] {
        let v: Value = serde_json::from_str(&std::fs::read_to_string(run.out.join(format!("checkpoints/probes-{s}.json"))).map_err(e2s)?).map_err(e2s)?;
        ensure(v["identical"] == Value::Bool(true), || format!("training-time probe check after stage {s} reported a difference"))?;
    }
    let logits: usize = outputs[0].iter().map(|o| o.logit_bits.len()).sum();
    Ok(format!("{} text-only probes ({logits} logits and greedy continuations) bit-identical after stages 1 and 2", probes.len()))
}

// ---------------------------------------------------------------- 7

fn ablation(run: &Run) -> Check {
    let dir = run.out.join("eval/ablate");
    if !(run.reuse && dir.join("ablation.json").exists()) {
        run.cli(&["eval", "--task", "ablate", "--overwrite"])?;
    }
    let text = std::fs::read_to_string(dir.join("ablation.json")).map_err(e2s)?;
    let res: AblationResults = serde_json::from_str(&text).map_err(e2s)?;
    let base = &res.base;
    let find = |f: &dyn Fn(&lesionlm_core::ablation::CellResult) -> bool| res.cells.iter().find(|c| f(c));
    let plain = |c: &lesionlm_core::ablation::CellResult| !c.joint && !c.ablate_ano && !c.last_layer;
    let mut missing = Vec::new();
    for p in POOLING_GRID {
        if find(&|c| plain(c) && c.pool == p && c.n_prompts == base.n_prompts).is_none() {
            missing.push(format!("pool={p}"));
        }
    }
    for n in PROMPT_GRID {
        if find(&|c| plain(c) && c.n_prompts == n && c.pool == base.pool).is_none() {
            missing.push(format!("prompts={n}"));
        }
    }
    for (key, hit) in [
        ("diff_only", find(&|c| c.ablate_ano && !c.joint).is_some()),
        ("last_layer", find(&|c| c.last_layer && !c.joint).is_some()),
        ("joint", find(&|c| c.joint).is_some()),
    ] {
        if !hit {
            missing.push(key.into());
        }
    }
    ensure(missing.is_empty(), || format!("grid cells missing: {}", missing.join(", ")))?;
    let absent: Vec<&str> = res.cells.iter().filter(|c| c.detection.is_none() || c.progression.is_none()).map(|c| c.key.as_str()).collect();
    ensure(absent.is_empty(), || format!("cells without results: {}", absent.join(", ")))?;

    // Table shapes: three tables with 4, 8 and 2 body rows.
    let md = std::fs::read_to_string(dir.join("ablation.md")).map_err(e2s)?;
    let tables: Vec<usize> = md.split("### ").skip(1).map(|t| t.lines().filter(|l| l.starts_with('|')).count().saturating_sub(2)).collect();
    ensure(tables.len() >= 3 && tables[..3] == [4, 8, 2], || format!("table body rows {tables:?}, expected [4, 8, 2]"))?;
    for svg in ["pooling.svg", "prompts.svg"] {
        let s = std::fs::read_to_string(dir.join(svg)).map_err(e2s)?;
        ensure(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"), || format!("{svg} is not an SVG document"))?;
        for tick in ["1", "2", "4", "8"].iter().filter(|_| svg == "pooling.svg").chain(["0", "5", "10", "20"].iter().filter(|_| svg == "prompts.svg")) {
            ensure(s.contains(&format!(">{tick}</text>")), || format!("{svg} lacks the x tick {tick}"))?;
        }
    }
    let stagewise = find(&|c| plain(c) && c.pool == base.pool && c.n_prompts == base.n_prompts).unwrap();
    let joint = find(&|c| c.joint).unwrap();
    ensure(stagewise.samples_seen == joint.samples_seen, || format!("stage-wise saw {} samples, joint {}", stagewise.samples_seen, joint.samples_seen))?;

    // Directional comparisons are reported only.
    let acc = |c: &lesionlm_core::ablation::CellResult| c.progression.as_ref().map(|p| p.overall).unwrap_or(f64::NAN);
    let f1 = |c: &lesionlm_core::ablation::CellResult| c.detection.as_ref().map(|d| d.f1).unwrap_or(f64::NAN);
    let diff_only = find(&|c| c.ablate_ano && !c.joint).unwrap();
    let last = find(&|c| c.last_layer && !c.joint).unwrap();
    let pools: Vec<String> = POOLING_GRID
        .iter()
        .map(|&p| format!("{p}:{:.3}", acc(find(&|c| plain(c) && c.pool == p && c.n_prompts == base.n_prompts).unwrap())))
        .collect();
    let prompts: Vec<String> = PROMPT_GRID
        .iter()
        .map(|&n| format!("{n}:{:.3}", f1(find(&|c| plain(c) && c.n_prompts == n && c.pool == base.pool).unwrap())))
        .collect();
    eprintln!("[acceptance] ablation, progression accuracy with vs without <Ano>: {:.3} vs {:.3}", acc(stagewise), acc(diff_only));
    eprintln!("[acceptance] ablation, detection F1 intermediate vs last layer: {:.3} vs {:.3}", f1(stagewise), f1(last));
    eprintln!("[acceptance] ablation, progression accuracy by pooling size {}", pools.join(" "));
    eprintln!("[acceptance] ablation, detection F1 by prompt count {}", prompts.join(" "));
    eprintln!("[acceptance] ablation, stage-wise vs joint progression accuracy: {:.3} vs {:.3}", acc(stagewise), acc(joint));
    Ok(format!(
        "{} cells run, tables 4/8/2 rows, both plots written; with/without <Ano> {:.3}/{:.3}, stage-wise/joint {:.3}/{:.3} (reported, not asserted)",
        res.cells.len(),
        acc(stagewise),
        acc(diff_only),
        acc(stagewise),
        acc(joint)
    ))
}
