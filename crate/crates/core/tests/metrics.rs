use proptest::prelude::*;

use lesionlm_core::config::Averaging;
use lesionlm_core::data::Progression;
use lesionlm_core::eval::{auc_midrank, iou, parse_binary, parse_progression, score_detection, score_progression, BinaryAnswer};

fn answer() -> impl Strategy<Value = BinaryAnswer> {
    prop_oneof![Just(BinaryAnswer::Yes), Just(BinaryAnswer::No), Just(BinaryAnswer::Unparseable)]
}

fn progression() -> impl Strategy<Value = Progression> {
    prop_oneof![Just(Progression::Worsened), Just(Progression::Improved), Just(Progression::NoChange)]
}

fn scored() -> impl Strategy<Value = Vec<(f64, bool)>> {
    prop::collection::vec(((0u8..20).prop_map(|v| v as f64 / 4.0), any::<bool>()), 2..60)
}

proptest! {
    #[test]
    fn detection_counts_partition_the_sample(cases in prop::collection::vec((answer(), any::<bool>()), 0..80)) {
        let (p, g): (Vec<_>, Vec<_>) = cases.into_iter().unzip();
        let r = score_detection(&p, &g).unwrap();
        prop_assert_eq!(r.tp + r.fp + r.fn_ + r.tn, r.n);
        prop_assert_eq!(r.tp + r.fn_, g.iter().filter(|&&x| x).count());
        prop_assert!((0.0..=1.0).contains(&r.f1));
        prop_assert!(r.f1 <= r.precision.max(r.recall) + 1e-12);
        prop_assert!(r.f1 + 1e-12 >= r.precision.min(r.recall) || r.f1 == 0.0);
    }

    #[test]
    fn micro_accuracy_is_the_count_weighted_mean(cases in prop::collection::vec((prop::option::of(progression()), progression()), 1..80)) {
        let (p, g): (Vec<_>, Vec<_>) = cases.into_iter().unzip();
        let r = score_progression(&p, &g, Averaging::Micro).unwrap();
        let weighted: f64 = r.counts.values().map(|c| c.correct as f64).sum::<f64>() / g.len() as f64;
        prop_assert!((r.micro - weighted).abs() < 1e-12);
        prop_assert_eq!(r.overall, r.micro);
        prop_assert_eq!(r.unparseable, p.iter().filter(|x| x.is_none()).count());
        let m = score_progression(&p, &g, Averaging::Macro).unwrap();
        prop_assert_eq!(m.overall, m.macro_avg);
    }

    #[test]
    fn auc_is_rank_invariant_and_flips_with_labels(cases in scored()) {
        let (s, l): (Vec<f64>, Vec<bool>) = cases.into_iter().unzip();
        prop_assume!(l.iter().any(|&x| x) && l.iter().any(|&x| !x));
        let a = auc_midrank(&s, &l).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let squashed: Vec<f64> = s.iter().map(|v| (v * 3.0).exp()).collect();
        prop_assert!((auc_midrank(&squashed, &l).unwrap() - a).abs() < 1e-12);
        let flipped: Vec<bool> = l.iter().map(|x| !x).collect();
        prop_assert!((auc_midrank(&s, &flipped).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..100)) {
        let (a, b): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
        let x = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(x, iou(&b, &a));
        if a.iter().any(|&v| v) {
            prop_assert_eq!(iou(&a, &a), 1.0);
        }
    }
}

#[test]
fn constant_scores_give_half_auc() {
    assert_eq!(auc_midrank(&[0.3; 6], &[true, false, true, false, false, true]), Some(0.5));
    assert_eq!(auc_midrank(&[0.1, 0.9], &[true, true]), None);
}

#[test]
fn answer_parsing() {
    assert_eq!(parse_binary("Yes."), BinaryAnswer::Yes);
    assert_eq!(parse_binary("no lesion"), BinaryAnswer::No);
    assert_eq!(parse_binary("maybe"), BinaryAnswer::Unparseable);
    assert_eq!(parse_progression("C: Worsened"), Some(Progression::Worsened));
    assert_eq!(parse_progression("a: unchanged"), Some(Progression::NoChange));
    assert_eq!(parse_progression("the lesion improved"), Some(Progression::Improved));
    assert_eq!(parse_progression("unclear"), None);
}
