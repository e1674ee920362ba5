//! Development driver: trains the listed stages into a checkpoint directory
//! and evaluates after each one.
//!
//! `cargo run --release --example pipeline -- <ckpt-dir> <stage>...`

use std::time::Instant;

use lesionlm_core::data::{default_splits, Corpus};
use lesionlm_core::eval::{run_detection, run_grounding, run_progression, run_salience, singles_and_pairs};
use lesionlm_core::model::SingleMode;
use lesionlm_core::train::{train_and_save, CheckpointDir, Stage, StageOptions};
use lesionlm_core::vocab::Vocab;
use lesionlm_core::{LesionLm, RunConfig};

fn main() -> lesionlm_core::Result<()> {
    env_logger_init();
    let args: Vec<String> = std::env::args().collect();
    let ckpt = CheckpointDir::new(&args[1]);
    let cfg = match std::env::var("LESIONLM_CONFIG") {
        Ok(p) => RunConfig::load(p.as_ref())?,
        Err(_) => RunConfig::default(),
    };
    let t = Instant::now();
    let specs = default_splits(cfg.seed, &cfg.data);
    let corpus = Corpus::generate(&specs, &cfg.data, cfg.model.image_size)?;
    println!("corpus in {:.1}s", t.elapsed().as_secs_f64());
    let (model, fresh) = LesionLm::new::<f32>(&cfg.model, Vocab::default(), cfg.seed)?;
    let (singles, pairs) = singles_and_pairs(corpus.split("test")?);
    let singles = &singles[..singles.len().min(200)];
    let pairs = &pairs[..pairs.len().min(150)];
    for s in &args[2..] {
        let stage = match s.as_str() {
            "b" => Stage::Backbone,
            "l" => Stage::LmWarmup,
            "1" => Stage::One,
            "2" => Stage::Two,
            "3" => Stage::Three,
            _ => Stage::Joint,
        };
        let (store, rec) = train_and_save(&model, fresh.clone(), &ckpt, stage, &corpus, &cfg, &StageOptions::default())?;
        println!(
            "stage {stage}: {:.1}s steps {} epochs {:?} start {:.4} end {:.4}",
            rec.seconds, rec.report.steps, rec.report.epoch_losses, rec.report.first_epoch_start, rec.report.first_epoch_end
        );
        let t = Instant::now();
        match stage {
            Stage::One | Stage::Joint | Stage::LmWarmup => {
                let (d, ans) = run_detection(&model, &store, singles, SingleMode::Ano, 6)?;
                println!("detect {:?} e.g. {:?}", d, &ans[..4]);
                let sal = run_salience(&model, &store, singles)?;
                println!("salience {sal:?}");
                if stage == Stage::Joint {
                    let (p, _) = run_progression(&model, &store, pairs, Default::default(), 6)?;
                    println!("progress {p:?}");
                }
            }
            Stage::Two => {
                let (p, ans) = run_progression(&model, &store, pairs, Default::default(), 6)?;
                println!("progress {p:?} e.g. {:?}", &ans[..4]);
            }
            Stage::Three => {
                let (gr, _) = run_grounding(&model, &store, singles, 0.5)?;
                println!("ground {gr:?}");
            }
            _ => {}
        }
        println!("eval {:.1}s", t.elapsed().as_secs_f64());
    }
    Ok(())
}

fn env_logger_init() {
    let _ = env_logger::try_init();
}
