//! End-to-end command tests on a deliberately tiny configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/tiny.toml");

fn lesionlm(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lesionlm"))
        .args(["--config", TINY, "--out"])
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("LESIONLM_OUT")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(out: &Path, args: &[&str]) {
    let o = lesionlm(out, args);
    assert_eq!(code(&o), 0, "lesionlm {args:?} failed: {}", stderr(&o));
}

fn png_size(path: &Path) -> (u32, u32) {
    let b = std::fs::read(path).unwrap();
    assert_eq!(&b[1..4], b"PNG");
    let w = u32::from_be_bytes(b[16..20].try_into().unwrap());
    let h = u32::from_be_bytes(b[20..24].try_into().unwrap());
    (w, h)
}

fn dirs_with_files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        let mut has_file = false;
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                has_file = true;
            }
        }
        if has_file {
            out.push(d);
        }
    }
    out
}

#[test]
fn gen_data_is_deterministic_and_creates_nested_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a/deep/er"), tmp.path().join("b"));
    ok(&a, &["gen-data", "--seed", "7", "--count", "6000"]);
    ok(&b, &["gen-data", "--seed", "7", "--count", "6000"]);
    let ma = std::fs::read(a.join("data/manifest.json")).unwrap();
    assert_eq!(ma, std::fs::read(b.join("data/manifest.json")).unwrap());
    let manifest: serde_json::Value = serde_json::from_slice(&ma).unwrap();
    let stage1 = manifest["splits"].as_array().unwrap().iter().find(|s| s["name"] == "stage1").unwrap();
    assert_eq!(stage1["count"], 6000);
    assert!(a.join("data/run_config.toml").exists());

    let again = lesionlm(&a, &["gen-data", "--seed", "7", "--count", "6000"]);
    assert_eq!(code(&again), 1);
    assert!(stderr(&again).contains("--overwrite"));
    ok(&a, &["gen-data", "--seed", "7", "--count", "6000", "--overwrite"]);
    assert_eq!(ma, std::fs::read(a.join("data/manifest.json")).unwrap());
}

#[test]
fn overlapping_split_file_is_a_user_error() {
    let tmp = tempfile::tempdir().unwrap();
    let splits = tmp.path().join("splits.json");
    std::fs::write(
        &splits,
        r#"[{"name": "stage1", "kind": {"kind": "singles", "abnormal_prob": 0.5}, "seed_start": 0, "count": 10},
            {"name": "test", "kind": {"kind": "pairs"}, "seed_start": 5, "count": 10}]"#,
    )
    .unwrap();
    let o = lesionlm(tmp.path(), &["gen-data", "--splits", splits.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("overlap"), "{}", stderr(&o));
    assert!(!tmp.path().join("data/manifest.json").exists());
}

#[test]
fn flag_errors_and_help() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&lesionlm(tmp.path(), &["train", "--stage", "7"])), 1);
    assert_eq!(code(&lesionlm(tmp.path(), &["eval", "--task", "everything"])), 1);
    assert_eq!(code(&lesionlm(tmp.path(), &["--help"])), 0);
    let o = lesionlm(tmp.path(), &["train", "--stage", "1"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("stage 0-lm"), "{}", stderr(&o));
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_lesionlm"))
        .args(["--config", TINY, "gen-data"])
        .env("LESIONLM_OUT", tmp.path())
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(tmp.path().join("data/manifest.json").exists());
}

#[test]
fn full_pipeline_on_tiny_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path();
    ok(out, &["gen-data"]);

    let o = lesionlm(out, &["train", "--stage", "2"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("stage 1 checkpoint"), "{}", stderr(&o));

    for stage in ["0", "1", "2", "3", "joint"] {
        ok(out, &["train", "--stage", stage]);
    }
    let o = lesionlm(out, &["train", "--stage", "1"]);
    assert_eq!(code(&o), 1, "existing checkpoint must not be replaced silently");

    for s in ["1", "2", "joint"] {
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join(format!("checkpoints/probes-{s}.json"))).unwrap()).unwrap();
        assert_eq!(v["identical"], true);
    }

    for task in ["detect", "progress", "ground", "ablate"] {
        ok(out, &["eval", "--task", task]);
    }
    let det: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("eval/detect/report.json")).unwrap()).unwrap();
    assert_eq!(det["detection"]["n"], 12);
    for key in ["tp", "fp", "fn", "tn", "unparseable", "precision", "recall", "f1"] {
        assert!(det["detection"].get(key).is_some(), "missing {key}");
    }
    let overlays: Vec<_> = std::fs::read_dir(out.join("eval/ground/overlays")).unwrap().collect();
    assert_eq!(overlays.len(), 12, "one overlay per test image");
    assert_eq!(png_size(&out.join("eval/ground/overlays/0000.png")), (32, 32));
    let raw = std::fs::metadata(out.join("eval/ground/heatmaps/0000.f32")).unwrap().len();
    assert_eq!(raw, 32 * 32 * 4);
    for f in ["ablation.json", "ablation.md", "pooling.svg", "prompts.svg"] {
        assert!(out.join("eval/ablate").join(f).exists(), "missing {f}");
    }

    ok(out, &["inspect", "--sample", "0"]);
    let single = out.join("inspect/test-0000");
    let golden = std::fs::read(Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/templates/single.txt")).unwrap();
    assert_eq!(std::fs::read(single.join("template.txt")).unwrap(), golden);
    assert_eq!(png_size(&single.join("image1_overlay.png")), (32, 32));
    assert!(single.join("image1_anomaly_map.csv").exists());
    let csv = std::fs::read_to_string(single.join("image1_anomaly_map.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().all(|l| l.split(',').count() == 4));

    ok(out, &["inspect", "--sample", "12"]);
    let pair = out.join("inspect/test-0012");
    let golden = std::fs::read(Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/templates/pair.txt")).unwrap();
    assert_eq!(std::fs::read(pair.join("template.txt")).unwrap(), golden);
    assert!(pair.join("diff_query_norms.csv").exists());
    assert!(pair.join("image2_overlay.png").exists());

    let o = lesionlm(out, &["inspect", "--sample", "21"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("out of range"));

    for d in dirs_with_files(out) {
        let rel = d.strip_prefix(out).unwrap();
        let is_asset_dir = rel.ends_with("heatmaps") || rel.ends_with("overlays");
        if !is_asset_dir {
            assert!(d.join("run_config.toml").exists(), "{} has no run_config.toml", d.display());
        }
    }
}

#[test]
fn identical_seeds_give_identical_logs_and_corruption_is_internal() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        ok(out, &["gen-data"]);
        ok(out, &["train", "--stage", "0"]);
        ok(out, &["train", "--stage", "1"]);
    }
    for f in ["stage-0-backbone.jsonl", "stage-0-lm.jsonl", "stage-1.jsonl"] {
        let la = std::fs::read(a.join("checkpoints").join(f)).unwrap();
        assert!(!la.is_empty());
        assert_eq!(la, std::fs::read(b.join("checkpoints").join(f)).unwrap(), "{f} differs");
    }

    let c = tmp.path().join("c");
    ok(&c, &["gen-data", "--seed", "4"]);
    let o = lesionlm(&c, &["train", "--stage", "0"]);
    assert_eq!(code(&o), 1, "seed mismatch between config and corpus is a user error");

    let ckpt = a.join("checkpoints/stage-1.lsnw");
    let bytes = std::fs::read(&ckpt).unwrap();
    std::fs::write(&ckpt, &bytes[..bytes.len() / 2]).unwrap();
    let o = lesionlm(&a, &["train", "--stage", "2"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}
