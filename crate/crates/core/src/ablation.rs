//! The ablation grid: pooling sizes, soft-prompt counts, the `<Ano>`
//! ablation, last-layer-only scoring and joint versus stage-wise training.
//!
//! Every cell starts from the same stage-0 parameters (encoder, projector,
//! LM), retrains Stages 1 and 2 at the reduced ablation budget and is scored
//! on the same held-out subset. Cells that share a configuration are trained
//! once.

use std::collections::BTreeMap;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{FeatureSource, ModelConfig, RunConfig};
use crate::data::Corpus;
use crate::error::Result;
use crate::eval::{run_detection, run_progression, singles_and_pairs, DetectionReport, ProgressionReport};
use crate::model::{LesionLm, SingleMode};
use crate::params::{Group, ParamStore};
use crate::report::{fmt3, LinePlot, MdTable};
use crate::train::{run_stage, Stage, StageOptions};
use crate::vocab::Vocab;

pub const POOLING_GRID: [usize; 4] = [1, 2, 4, 8];
pub const PROMPT_GRID: [usize; 4] = [0, 5, 10, 20];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    /// Stable identifier, e.g. `pool=2` or `joint`.
    pub key: String,
    pub model: ModelConfig,
    pub joint: bool,
}

/// Every distinct configuration the tables need.
pub fn grid(base: &ModelConfig) -> Vec<CellSpec> {
    let mut cells: Vec<CellSpec> = Vec::new();
    let mut push = |key: String, model: ModelConfig, joint: bool| {
        if !cells.iter().any(|c| c.model == model && c.joint == joint) {
            cells.push(CellSpec { key, model, joint });
        }
    };
    push("reference".into(), base.clone(), false);
    for p in POOLING_GRID {
        push(format!("pool={p}"), ModelConfig { pool: p, ..base.clone() }, false);
    }
    for n in PROMPT_GRID {
        push(format!("prompts={n}"), ModelConfig { n_prompts: n, ..base.clone() }, false);
    }
    push("diff_only".into(), ModelConfig { ablate_ano: true, ..base.clone() }, false);
    push("last_layer".into(), ModelConfig { feature_source: FeatureSource::LastLayer, ..base.clone() }, false);
    push("joint".into(), base.clone(), true);
    cells
}

/// Key of the cell that answers for `model`/`joint`, accounting for
/// de-duplication against the reference.
pub fn cell_key(cells: &[CellSpec], model: &ModelConfig, joint: bool) -> Option<String> {
    cells.iter().find(|c| &c.model == model && c.joint == joint).map(|c| c.key.clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub key: String,
    pub joint: bool,
    pub pool: usize,
    pub n_prompts: usize,
    pub ablate_ano: bool,
    pub last_layer: bool,
    /// `None` when the cell could not be run; `absent_reason` says why.
    pub detection: Option<DetectionReport>,
    pub progression: Option<ProgressionReport>,
    pub absent_reason: Option<String>,
    pub samples_seen: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResults {
    pub base: ModelConfig,
    pub cells: Vec<CellResult>,
}

/// Stage-1 and Stage-2 splits cut to the ablation budget.
pub fn ablation_corpus(corpus: &Corpus, cfg: &RunConfig) -> Result<Corpus> {
    let a = &cfg.eval.ablation;
    let mut splits = BTreeMap::new();
    let s1 = corpus.split("stage1")?;
    let s2 = corpus.split("stage2")?;
    splits.insert("stage1".to_string(), s1[..a.stage1_samples.min(s1.len())].to_vec());
    splits.insert("stage2".to_string(), s2[..a.stage2_samples.min(s2.len())].to_vec());
    Ok(Corpus { splits })
}

fn run_cell(cell: &CellSpec, cfg: &RunConfig, stage0: &ParamStore<f32>, corpus: &Corpus, full: &Corpus) -> Result<(DetectionReport, ProgressionReport, usize)> {
    let (model, mut store) = LesionLm::new::<f32>(&cell.model, Vocab::default(), cfg.seed)?;
    store.copy_groups(stage0, &[Group::Backbone, Group::Projector, Group::Lm])?;
    let mut c = cfg.clone();
    c.model = cell.model.clone();
    c.train.stage1.epochs = cfg.eval.ablation.epochs;
    c.train.stage2.epochs = cfg.eval.ablation.epochs;
    let opts = StageOptions::default();
    let mut seen = 0;
    let stages: &[Stage] = if cell.joint { &[Stage::Joint] } else { &[Stage::One, Stage::Two] };
    for &s in stages {
        let r = run_stage(&model, &mut store, s, corpus, &c, &opts, &mut |_| Ok(()))?;
        seen += r.samples_seen;
    }
    let (singles, pairs) = singles_and_pairs(full.split("test")?);
    let a = &cfg.eval.ablation;
    let singles = &singles[..a.eval_singles.min(singles.len())];
    let pairs = &pairs[..a.eval_pairs.min(pairs.len())];
    let (det, _) = run_detection(&model, &store, singles, SingleMode::Ano, cfg.eval.max_new_tokens)?;
    let (prog, _) = run_progression(&model, &store, pairs, cfg.eval.overall, cfg.eval.max_new_tokens)?;
    Ok((det, prog, seen))
}

/// Runs every cell. A failing cell is recorded as absent and the sweep
/// continues.
pub fn run_ablations(
    cfg: &RunConfig,
    stage0: &ParamStore<f32>,
    corpus: &Corpus,
    on_cell: &mut dyn FnMut(&CellResult),
) -> Result<AblationResults> {
    let sub = ablation_corpus(corpus, cfg)?;
    let cells = grid(&cfg.model);
    let mut results = Vec::new();
    for cell in &cells {
        info!("ablation cell {}", cell.key);
        let t = Instant::now();
        let outcome = run_cell(cell, cfg, stage0, &sub, corpus);
        let m = &cell.model;
        let mut r = CellResult {
            key: cell.key.clone(),
            joint: cell.joint,
            pool: m.pool,
            n_prompts: m.n_prompts,
            ablate_ano: m.ablate_ano,
            last_layer: m.feature_source == FeatureSource::LastLayer,
            detection: None,
            progression: None,
            absent_reason: None,
            samples_seen: 0,
            seconds: 0.0,
        };
        match outcome {
            Ok((d, p, seen)) => {
                r.detection = Some(d);
                r.progression = Some(p);
                r.samples_seen = seen;
            }
            Err(e) => {
                warn!("ablation cell {} failed: {e}", cell.key);
                r.absent_reason = Some(e.to_string());
            }
        }
        r.seconds = t.elapsed().as_secs_f64();
        on_cell(&r);
        results.push(r);
    }
    Ok(AblationResults { base: cfg.model.clone(), cells: results })
}

impl AblationResults {
    fn find(&self, model: &ModelConfig, joint: bool) -> Option<&CellResult> {
        let cells = grid(&self.base);
        let key = cell_key(&cells, model, joint)?;
        self.cells.iter().find(|c| c.key == key)
    }

    fn f1(&self, model: &ModelConfig, joint: bool) -> Option<f64> {
        self.find(model, joint).and_then(|c| c.detection.as_ref()).map(|d| d.f1)
    }

    fn prog(&self, model: &ModelConfig, joint: bool) -> Option<&ProgressionReport> {
        self.find(model, joint).and_then(|c| c.progression.as_ref())
    }

    /// `<Ano>` ablation and feature-source rows.
    pub fn token_table(&self) -> MdTable {
        let b = &self.base;
        let mut t = MdTable::new("Effect of <Ano> tokens and feature selection", &["Setting", "Ano", "Diff", "Detection F1", "Progression acc."]);
        let rows = [
            ("<Ano> + <Diff> tokens", "yes", "yes", b.clone()),
            ("<Diff> tokens only", "no", "yes", ModelConfig { ablate_ano: true, ..b.clone() }),
            ("Intermediate layers", "yes", "yes", b.clone()),
            ("Last layer", "yes", "yes", ModelConfig { feature_source: FeatureSource::LastLayer, ..b.clone() }),
        ];
        for (name, ano, diff, m) in rows {
            t.row(vec![
                name.into(),
                ano.into(),
                diff.into(),
                fmt3(self.f1(&m, false)),
                fmt3(self.prog(&m, false).map(|p| p.overall)),
            ]);
        }
        t
    }

    /// Pooling-size and prompt-count sweeps.
    pub fn sweep_table(&self) -> MdTable {
        let b = &self.base;
        let mut t = MdTable::new(
            "Pooling size and soft prompt count",
            &["Sweep", "Value", "Detection F1", "Worsened", "Improved", "No change", "Overall"],
        );
        let mut add = |sweep: &str, v: usize, m: ModelConfig| {
            let p = self.prog(&m, false);
            t.row(vec![
                sweep.into(),
                v.to_string(),
                fmt3(self.f1(&m, false)),
                fmt3(p.map(|p| p.worsened)),
                fmt3(p.map(|p| p.improved)),
                fmt3(p.map(|p| p.no_change)),
                fmt3(p.map(|p| p.overall)),
            ]);
        };
        for p in POOLING_GRID {
            add("Pooling size", p, ModelConfig { pool: p, ..b.clone() });
        }
        for n in PROMPT_GRID {
            add("Soft prompt count", n, ModelConfig { n_prompts: n, ..b.clone() });
        }
        t
    }

    /// Stage-wise against joint training.
    pub fn training_table(&self) -> MdTable {
        let b = &self.base;
        let mut t = MdTable::new("Stage-wise vs joint training", &["Training", "Samples", "Detection F1", "Progression acc."]);
        for (name, joint) in [("Stage-wise", false), ("Joint", true)] {
            let c = self.find(b, joint);
            t.row(vec![
                name.into(),
                c.map(|c| c.samples_seen.to_string()).unwrap_or_else(|| "n/a".into()),
                fmt3(self.f1(b, joint)),
                fmt3(self.prog(b, joint).map(|p| p.overall)),
            ]);
        }
        t
    }

    fn sweep_plot(&self, title: &str, x_label: &str, values: &[usize], make: impl Fn(usize) -> ModelConfig) -> LinePlot {
        LinePlot {
            title: title.into(),
            x_label: x_label.into(),
            y_label: "score".into(),
            x_ticks: values.iter().map(|v| v.to_string()).collect(),
            series: vec![
                ("detection F1".into(), values.iter().map(|&v| self.f1(&make(v), false)).collect()),
                ("progression acc.".into(), values.iter().map(|&v| self.prog(&make(v), false).map(|p| p.overall)).collect()),
            ],
        }
    }

    pub fn pooling_plot(&self) -> LinePlot {
        let b = self.base.clone();
        self.sweep_plot("Pooling size", "pooling size p (p x p tokens)", &POOLING_GRID, |p| ModelConfig { pool: p, ..b.clone() })
    }

    pub fn prompt_plot(&self) -> LinePlot {
        let b = self.base.clone();
        self.sweep_plot("Soft prompt count", "prompts per tapped layer", &PROMPT_GRID, |n| ModelConfig { n_prompts: n, ..b.clone() })
    }

    pub fn markdown(&self) -> String {
        let mut s = String::new();
        for t in [self.token_table(), self.sweep_table(), self.training_table()] {
            s.push_str(&t.to_markdown());
            s.push('\n');
        }
        let absent: Vec<&CellResult> = self.cells.iter().filter(|c| c.absent_reason.is_some()).collect();
        if !absent.is_empty() {
            s.push_str("### Absent cells\n\n");
            for c in absent {
                s.push_str(&format!("- `{}`: {}\n", c.key, c.absent_reason.as_deref().unwrap_or("")));
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_covers_sweeps_once() {
        let base = ModelConfig::default();
        let cells = grid(&base);
        let pools: Vec<usize> = POOLING_GRID.iter().map(|&p| cell_key(&cells, &ModelConfig { pool: p, ..base.clone() }, false)).map(|k| k.unwrap().len()).collect();
        assert_eq!(pools.len(), 4);
        // reference doubles as pool=4 and prompts=10
        assert_eq!(cells.len(), 1 + 3 + 3 + 1 + 1 + 1);
        assert!(cells.iter().any(|c| c.model.ablate_ano));
        assert!(cells.iter().any(|c| c.joint));
    }

    #[test]
    fn tables_have_expected_shape_with_absent_cells() {
        let res = AblationResults { base: ModelConfig::default(), cells: Vec::new() };
        assert_eq!(res.sweep_table().rows.len(), 8);
        assert_eq!(res.token_table().rows.len(), 4);
        assert_eq!(res.training_table().rows.len(), 2);
        assert!(res.markdown().contains("n/a"));
        assert_eq!(res.pooling_plot().x_ticks, ["1", "2", "4", "8"]);
    }
}
