//! `lesionlm` command-line entry point.
//!
//! Every output directory receives `run_config.toml`, the fully resolved
//! configuration that produced it. Exit codes: 0 success, 1 user error
//! (bad flags, missing prerequisites, existing outputs), 2 internal error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use lesionlm_core::ablation::run_ablations;
use lesionlm_core::data::{default_splits, read_corpus, write_corpus, Corpus, Label, SplitSpec, PAIR_QUESTION, SINGLE_QUESTION};
use lesionlm_core::eval::{run_detection, run_grounding, run_progression, run_salience, singles_and_pairs};
use lesionlm_core::image::{write_f32_raw, write_gray_png, write_grid_csv, write_overlay_png, ImageTensor};
use lesionlm_core::model::SingleMode;
use lesionlm_core::report::{fmt3, MdTable};
use lesionlm_core::sequence::{render_template, TemplateMode};
use lesionlm_core::train::{probe_set, run_probes, train_and_save, CheckpointDir, Stage, StageOptions, StageRecord};
use lesionlm_core::vocab::Vocab;
use lesionlm_core::{Error, LesionLm, ParamStore, RunConfig};

const CONFIG_FILE: &str = "run_config.toml";

#[derive(Debug, Parser)]
#[command(name = "lesionlm", version, about = "Anomaly-aware toy vision-language model on synthetic lesion images")]
struct Cli {
    /// TOML run configuration; unset fields keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output root holding data/, checkpoints/, eval/ and inspect/.
    #[arg(long, global = true, env = "LESIONLM_OUT", default_value = "runs")]
    out: PathBuf,

    /// Replace existing outputs instead of refusing.
    #[arg(long, global = true)]
    overwrite: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus into <out>/data.
    GenData {
        /// Size of the Stage-1 split.
        #[arg(long)]
        count: Option<usize>,
        /// JSON list of split specs replacing the default splits.
        #[arg(long)]
        splits: Option<PathBuf>,
    },
    /// Train one stage into <out>/checkpoints.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
    },
    /// Evaluate a task on the test split into <out>/eval/<task>.
    Eval {
        #[arg(long, value_enum)]
        task: Task,
        /// Checkpoint to evaluate (0, 1, 2, 3 or joint); defaults to the
        /// newest one that has the task's modules trained.
        #[arg(long)]
        checkpoint: Option<String>,
    },
    /// Dump maps, heatmaps and the rendered template for one sample.
    Inspect {
        /// Index of the sample within the split.
        #[arg(long)]
        sample: usize,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        checkpoint: Option<String>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    #[value(name = "0")]
    Zero,
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    Joint,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Task {
    Detect,
    Progress,
    Ground,
    Ablate,
}

impl Task {
    fn name(self) -> &'static str {
        match self {
            Task::Detect => "detect",
            Task::Progress => "progress",
            Task::Ground => "ground",
            Task::Ablate => "ablate",
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let user = e.chain().any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_user_error));
            ExitCode::from(if user { 1 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = Outputs { root: cli.out.clone(), overwrite: cli.overwrite };
    match cli.command {
        Command::GenData { count, splits } => gen_data(&out, cfg, count, splits.as_deref()),
        Command::Train { stage } => train(&out, &cfg, stage),
        Command::Eval { task, checkpoint } => eval(&out, &cfg, task, checkpoint.as_deref()),
        Command::Inspect { sample, split, checkpoint } => inspect(&out, &cfg, &split, sample, checkpoint.as_deref()),
    }
}

struct Outputs {
    root: PathBuf,
    overwrite: bool,
}

impl Outputs {
    fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    fn checkpoints(&self) -> CheckpointDir {
        CheckpointDir::new(self.root.join("checkpoints"))
    }
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;
    Ok(())
}

/// Refuses to reuse `dir` unless it is absent or `--overwrite` was given.
fn fresh_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        if !overwrite {
            return Err(Error::Exists(dir.display().to_string()).into());
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn gen_data(out: &Outputs, mut cfg: RunConfig, count: Option<usize>, splits: Option<&Path>) -> Result<()> {
    if let Some(n) = count {
        cfg.data.stage1 = n;
    }
    let specs: Vec<SplitSpec> = match splits {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => default_splits(cfg.seed, &cfg.data),
    };
    let dir = out.data();
    let manifest = write_corpus(&dir, cfg.seed, &specs, &cfg.data, cfg.model.image_size, out.overwrite)?;
    write_config(&dir, &cfg)?;
    for s in &manifest.splits {
        println!("{:<18} {:>6} samples ({} singles, {} pairs, {} abnormal)", s.name, s.count, s.singles, s.pairs, s.abnormal);
    }
    println!("corpus written to {}", dir.display());
    Ok(())
}

/// Loads the corpus and checks that it was generated under `cfg`.
fn load_corpus(out: &Outputs, cfg: &RunConfig) -> Result<Corpus> {
    let (manifest, corpus) = read_corpus(&out.data()).map_err(|e| match e {
        Error::MissingPrerequisite(m) => Error::MissingPrerequisite(format!("{m}; run `lesionlm gen-data` first")),
        other => other,
    })?;
    if manifest.seed != cfg.seed || manifest.image_size != cfg.model.image_size {
        return Err(Error::Config(format!(
            "corpus in {} was generated with seed {} and image size {}, the run uses seed {} and size {}",
            out.data().display(),
            manifest.seed,
            manifest.image_size,
            cfg.seed,
            cfg.model.image_size
        ))
        .into());
    }
    Ok(corpus)
}

fn build_model(cfg: &RunConfig) -> Result<(LesionLm, ParamStore<f32>)> {
    Ok(LesionLm::new::<f32>(&cfg.model, Vocab::default(), cfg.seed)?)
}

/// Checkpoints must all come from one model configuration.
fn check_checkpoint_config(ckpt: &CheckpointDir, cfg: &RunConfig) -> Result<()> {
    let path = ckpt.dir.join(CONFIG_FILE);
    if path.exists() {
        let prev = RunConfig::load(&path)?;
        if prev.model != cfg.model || prev.seed != cfg.seed {
            return Err(Error::Config(format!(
                "{} holds checkpoints from a different model configuration or seed; use another --out",
                ckpt.dir.display()
            ))
            .into());
        }
    }
    Ok(())
}

fn train(out: &Outputs, cfg: &RunConfig, stage: StageArg) -> Result<()> {
    let ckpt = out.checkpoints();
    check_checkpoint_config(&ckpt, cfg)?;
    let stages: &[Stage] = match stage {
        StageArg::Zero => &[Stage::Backbone, Stage::LmWarmup],
        StageArg::One => &[Stage::One],
        StageArg::Two => &[Stage::Two],
        StageArg::Three => &[Stage::Three],
        StageArg::Joint => &[Stage::Joint],
    };
    for &s in stages {
        if ckpt.has(s) && !out.overwrite {
            return Err(Error::Exists(ckpt.params_path(s).display().to_string()).into());
        }
    }
    let first = stages[0];
    if let Some(p) = first.prerequisite() {
        if !ckpt.has(p) {
            return Err(Error::MissingPrerequisite(format!(
                "stage {} needs the stage {} checkpoint in {}; run `lesionlm train --stage {}` first",
                first.as_str(),
                p.as_str(),
                ckpt.dir.display(),
                cli_stage(p)
            ))
            .into());
        }
    }
    let corpus = load_corpus(out, cfg)?;
    let (model, fresh) = build_model(cfg)?;
    write_config(&ckpt.dir, cfg)?;
    for &s in stages {
        log::info!("training stage {}", s.as_str());
        let (store, record) = train_and_save(&model, fresh.clone(), &ckpt, s, &corpus, cfg, &StageOptions::default())?;
        print_record(&record);
        match s {
            Stage::LmWarmup => {
                let probes = run_probes(&model, &store, &probe_set(&model, cfg))?;
                write_json(&ckpt.dir.join("probes-0-lm.json"), &serde_json::to_value(&probes)?)?;
            }
            Stage::One | Stage::Two | Stage::Joint => check_probes(&model, &store, &ckpt, cfg, s)?,
            _ => {}
        }
    }
    Ok(())
}

fn cli_stage(s: Stage) -> &'static str {
    match s {
        Stage::Backbone | Stage::LmWarmup => "0",
        Stage::One => "1",
        Stage::Two => "2",
        Stage::Three => "3",
        Stage::Joint => "joint",
    }
}

fn print_record(r: &StageRecord) {
    let last = r.report.epoch_losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "stage {}: {} steps, {} samples, final epoch loss {:.4}, max frozen grad norm {}, {:.1}s",
        r.stage.as_str(),
        r.report.steps,
        r.report.samples_seen,
        last,
        r.report.max_frozen_grad_norm,
        r.seconds
    );
}

/// Re-runs the text-only probes and requires bit-identical outputs to the
/// post-warmup language model.
fn check_probes(model: &LesionLm, store: &ParamStore<f32>, ckpt: &CheckpointDir, cfg: &RunConfig, stage: Stage) -> Result<()> {
    let probes = probe_set(model, cfg);
    let reference = run_probes(model, &ckpt.load(Stage::LmWarmup)?, &probes)?;
    let now = run_probes(model, store, &probes)?;
    let mismatched: Vec<usize> = reference.iter().zip(&now).enumerate().filter(|(_, (a, b))| a != b).map(|(i, _)| i).collect();
    write_json(
        &ckpt.dir.join(format!("probes-{}.json", stage.as_str())),
        &json!({ "probes": probes.len(), "identical": mismatched.is_empty(), "mismatched": mismatched }),
    )?;
    if !mismatched.is_empty() {
        return Err(Error::ChecksumDrift { stage: stage.as_str().into(), group: "lm (text probes)".into() }.into());
    }
    println!("text probes: {} of {} bit-identical to the stage 0 model", probes.len(), probes.len());
    Ok(())
}

fn parse_stage(s: &str) -> Result<Stage> {
    Ok(match s {
        "0" | "0-lm" => Stage::LmWarmup,
        "0-backbone" => Stage::Backbone,
        "1" => Stage::One,
        "2" => Stage::Two,
        "3" => Stage::Three,
        "joint" => Stage::Joint,
        _ => return Err(Error::Usage(format!("unknown checkpoint `{s}` (expected 0, 1, 2, 3 or joint)")).into()),
    })
}

/// The requested checkpoint, or the first of `prefer` that exists.
fn pick_checkpoint(ckpt: &CheckpointDir, requested: Option<&str>, prefer: &[Stage], what: &str) -> Result<(Stage, ParamStore<f32>)> {
    let stage = match requested {
        Some(s) => parse_stage(s)?,
        None => *prefer.iter().find(|&&s| ckpt.has(s)).ok_or_else(|| {
            let names: Vec<&str> = prefer.iter().map(|s| s.as_str()).collect();
            Error::MissingPrerequisite(format!(
                "{what} needs one of the checkpoints [{}] in {}",
                names.join(", "),
                ckpt.dir.display()
            ))
        })?,
    };
    Ok((stage, ckpt.load(stage)?))
}

fn eval(out: &Outputs, cfg: &RunConfig, task: Task, requested: Option<&str>) -> Result<()> {
    let ckpt = out.checkpoints();
    check_checkpoint_config(&ckpt, cfg)?;
    let dir = out.root.join("eval").join(task.name());
    let (model, fresh) = build_model(cfg)?;
    let prefer: &[Stage] = match task {
        Task::Detect => &[Stage::Three, Stage::Two, Stage::One, Stage::Joint],
        Task::Progress => &[Stage::Three, Stage::Two, Stage::Joint],
        Task::Ground => &[Stage::Three],
        Task::Ablate => &[Stage::LmWarmup],
    };
    let (stage, loaded) = pick_checkpoint(&ckpt, requested, prefer, &format!("eval --task {}", task.name()))?;
    let mut store = fresh;
    store.assign_from(&loaded)?;
    let corpus = load_corpus(out, cfg)?;
    fresh_dir(&dir, out.overwrite)?;
    write_config(&dir, cfg)?;
    let (singles, pairs) = singles_and_pairs(corpus.split("test")?);
    let max_new = cfg.eval.max_new_tokens;
    match task {
        Task::Detect => {
            let (det, answers) = run_detection(&model, &store, &singles, SingleMode::Ano, max_new)?;
            let (base, _) = run_detection(&model, &store, &singles, SingleMode::Baseline, max_new)?;
            let sal = run_salience(&model, &store, &singles)?;
            write_json(
                &dir.join("report.json"),
                &json!({ "checkpoint": stage.as_str(), "detection": det, "baseline": base, "salience": sal }),
            )?;
            write_answers(&dir, singles.iter().map(|s| s.qa.answer.as_str()), &answers)?;
            let mut t = MdTable::new("Detection", &["model", "precision", "recall", "F1", "accuracy", "unparseable"]);
            for (name, r) in [("with <Ano>", &det), ("baseline", &base)] {
                t.row(vec![
                    name.into(),
                    fmt3(Some(r.precision)),
                    fmt3(Some(r.recall)),
                    fmt3(Some(r.f1)),
                    fmt3(Some(r.accuracy)),
                    r.unparseable.to_string(),
                ]);
            }
            fs::write(dir.join("report.md"), t.to_markdown())?;
            println!("detection F1 {:.3} (baseline {:.3}) on {} images", det.f1, base.f1, det.n);
        }
        Task::Progress => {
            let (rep, answers) = run_progression(&model, &store, &pairs, cfg.eval.overall, max_new)?;
            write_json(&dir.join("report.json"), &json!({ "checkpoint": stage.as_str(), "progression": rep }))?;
            write_answers(&dir, pairs.iter().map(|s| s.qa.answer.as_str()), &answers)?;
            let mut t = MdTable::new("Progression", &["worsened", "improved", "no change", "overall", "unparseable"]);
            t.row(vec![
                fmt3(Some(rep.worsened)),
                fmt3(Some(rep.improved)),
                fmt3(Some(rep.no_change)),
                fmt3(Some(rep.overall)),
                rep.unparseable.to_string(),
            ]);
            fs::write(dir.join("report.md"), t.to_markdown())?;
            println!("progression overall accuracy {:.3} on {} pairs", rep.overall, pairs.len());
        }
        Task::Ground => {
            let (rep, maps) = run_grounding(&model, &store, &singles, cfg.eval.miou_threshold)?;
            write_json(&dir.join("report.json"), &json!({ "checkpoint": stage.as_str(), "grounding": rep }))?;
            let size = cfg.model.image_size;
            for sub in ["heatmaps", "overlays"] {
                fs::create_dir_all(dir.join(sub))?;
            }
            for (i, (s, m)) in singles.iter().zip(&maps).enumerate() {
                let stem = format!("{i:04}");
                write_gray_png(&dir.join("heatmaps").join(format!("{stem}.png")), size, size, m, 1)?;
                write_f32_raw(&dir.join("heatmaps").join(format!("{stem}.f32")), m)?;
                write_overlay_png(&dir.join("overlays").join(format!("{stem}.png")), &s.images[0], m)?;
            }
            let mut t = MdTable::new("Grounding", &["AUC", "mIoU", "mIoU (all images)", "threshold", "images"]);
            t.row(vec![fmt3(Some(rep.auc)), fmt3(Some(rep.miou)), fmt3(Some(rep.miou_all)), fmt3(Some(rep.threshold)), rep.images.to_string()]);
            fs::write(dir.join("report.md"), t.to_markdown())?;
            println!("grounding AUC {} mIoU {:.3} on {} images", fmt3(Some(rep.auc)), rep.miou, rep.images);
        }
        Task::Ablate => {
            let results = run_ablations(cfg, &store, &corpus, &mut |c| {
                log::info!("ablation cell {} done in {:.0}s", c.key, c.seconds);
            })?;
            write_json(&dir.join("ablation.json"), &serde_json::to_value(&results)?)?;
            fs::write(dir.join("ablation.md"), results.markdown())?;
            fs::write(dir.join("pooling.svg"), results.pooling_plot().to_svg())?;
            fs::write(dir.join("prompts.svg"), results.prompt_plot().to_svg())?;
            println!("ablation grid: {} cells written to {}", results.cells.len(), dir.display());
        }
    }
    Ok(())
}

fn write_answers<'a>(dir: &Path, golds: impl Iterator<Item = &'a str>, answers: &[String]) -> Result<()> {
    let mut text = String::new();
    for (i, (g, a)) in golds.zip(answers).enumerate() {
        text.push_str(&serde_json::to_string(&json!({ "index": i, "gold": g, "answer": a }))?);
        text.push('\n');
    }
    fs::write(dir.join("answers.jsonl"), text)?;
    Ok(())
}

fn inspect(out: &Outputs, cfg: &RunConfig, split: &str, index: usize, requested: Option<&str>) -> Result<()> {
    let ckpt = out.checkpoints();
    check_checkpoint_config(&ckpt, cfg)?;
    let corpus = load_corpus(out, cfg)?;
    let samples = corpus.split(split)?;
    let sample = samples
        .get(index)
        .ok_or_else(|| Error::Usage(format!("sample {index} out of range: split `{split}` has {} samples", samples.len())))?;
    let prefer = [Stage::Three, Stage::Two, Stage::One, Stage::Joint, Stage::LmWarmup, Stage::Backbone];
    let (stage, loaded) = pick_checkpoint(&ckpt, requested, &prefer, "inspect")?;
    let (model, mut store) = build_model(cfg)?;
    store.assign_from(&loaded)?;
    let dir = out.root.join("inspect").join(format!("{split}-{index:04}"));
    fresh_dir(&dir, out.overwrite)?;
    write_config(&dir, cfg)?;

    let size = cfg.model.image_size;
    let grid = cfg.model.grid();
    let scale = size / grid;
    let images: Vec<&ImageTensor> = sample.images.iter().collect();
    let maps = model.anomaly_maps(&store, &images)?.data().to_vec();
    let heat = model.heatmaps(&store, &images)?;
    let mut per_image = Vec::new();
    for (k, img) in images.iter().enumerate() {
        let map = &maps[k * grid * grid..(k + 1) * grid * grid];
        let h = &heat.data()[k * size * size..(k + 1) * size * size];
        let tag = format!("image{}", k + 1);
        write_grid_csv(&dir.join(format!("{tag}_anomaly_map.csv")), grid, map)?;
        let shown: Vec<f32> = map.iter().map(|v| 0.5 * (v + 1.0)).collect();
        write_gray_png(&dir.join(format!("{tag}_anomaly_map.png")), grid, grid, &shown, scale)?;
        write_gray_png(&dir.join(format!("{tag}_heatmap.png")), size, size, h, 1)?;
        write_f32_raw(&dir.join(format!("{tag}_heatmap.f32")), h)?;
        write_overlay_png(&dir.join(format!("{tag}_overlay.png")), img, h)?;
        write_gray_png(&dir.join(format!("{tag}.png")), size, size, img.pixels(), 1)?;
        let mean = map.iter().map(|&v| v as f64).sum::<f64>() / map.len() as f64;
        per_image.push(json!({ "anomaly_map_mean": mean, "lesion_pixels": sample.masks[k].area() }));
    }

    let (template, answer) = if sample.is_pair() {
        let q = model.diff_queries(&store, &images[..1], &images[1..])?;
        let d = cfg.model.enc_dim;
        let norms: Vec<f32> = q.data().chunks(d).map(|c| c.iter().map(|v| v * v).sum::<f32>().sqrt()).collect();
        let p = cfg.model.pool;
        write_grid_csv(&dir.join("diff_query_norms.csv"), p, &norms)?;
        let peak = norms.iter().cloned().fold(0.0f32, f32::max).max(f32::MIN_POSITIVE);
        let shown: Vec<f32> = norms.iter().map(|v| v / peak).collect();
        write_gray_png(&dir.join("diff_query_norms.png"), p, p, &shown, size / p)?;
        let a = model.answer_pairs(&store, &images[..1], &images[1..], cfg.eval.max_new_tokens)?.remove(0);
        (render_template(TemplateMode::Pair, PAIR_QUESTION)?, a)
    } else {
        let a = model.answer_singles(&store, &images, SingleMode::Ano, cfg.eval.max_new_tokens)?.remove(0);
        (render_template(TemplateMode::Single, SINGLE_QUESTION)?, a)
    };
    fs::write(dir.join("template.txt"), &template.text)?;
    write_json(
        &dir.join("summary.json"),
        &json!({
            "split": split,
            "index": index,
            "seed": sample.seed,
            "checkpoint": stage.as_str(),
            "label": if sample.label == Label::Abnormal { "abnormal" } else { "normal" },
            "progression": sample.progression,
            "gold": sample.qa.answer,
            "answer": answer,
            "images": per_image,
        }),
    )?;
    println!("inspection of {split}[{index}] written to {}", dir.display());
    Ok(())
}
