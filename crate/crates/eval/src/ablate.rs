//! The four ablation experiments: curriculum stages, substep reasoning,
//! expert size and stage-1 training cost. Arms share datasets and any
//! checkpoint with an identical signature.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use deskvla_autodiff::ParamSet;
use deskvla_model::embodiment::EmbodimentId;
use deskvla_model::expert::ExpertConfig;
use deskvla_train::model::ModelSpec;
use deskvla_train::run::{throughput, train_stage, TrainOptions};
use deskvla_train::stage::build_stage;
use deskvla_world::batch::ReasoningSource;
use deskvla_world::episode::{load_dataset, EpisodeRecord};
use deskvla_world::gen::{gen_dataset, DatasetRecipe, RecipeGroup};
use deskvla_world::raster::Palette;
use deskvla_world::stats::NormStats;
use deskvla_world::task::TaskKind;
use serde::Serialize;

use crate::policy::{ModelPolicy, Policy};
use crate::suite::{run_suite, SuiteTable};
use crate::Result;

#[derive(Debug, Clone)]
pub struct AblationBudget {
    pub dataset_seed: u64,
    pub episodes_per_cell: usize,
    pub sort4_episodes: usize,
    pub train_seeds: Vec<u64>,
    pub trials: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub stage3_steps: usize,
    pub batch: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub lr_stage3: f64,
    pub eval_seed: u64,
}

impl AblationBudget {
    /// The committed smoke budget the acceptance orderings run on.
    pub fn smoke() -> Self {
        Self {
            dataset_seed: 7100,
            episodes_per_cell: 10,
            sort4_episodes: 16,
            train_seeds: vec![11, 22, 33],
            trials: 10,
            stage1_steps: 500,
            stage2_steps: 500,
            stage3_steps: 150,
            batch: 8,
            lr_stage1: 6e-4,
            lr_stage2: 3e-4,
            lr_stage3: 1e-4,
            eval_seed: 900,
        }
    }

    /// Minutes-scale smoke for CLI plumbing tests; orderings not expected.
    pub fn micro() -> Self {
        Self {
            dataset_seed: 7200,
            episodes_per_cell: 2,
            sort4_episodes: 2,
            train_seeds: vec![11],
            trials: 2,
            stage1_steps: 4,
            stage2_steps: 4,
            stage3_steps: 2,
            batch: 2,
            lr_stage1: 6e-4,
            lr_stage2: 3e-4,
            lr_stage3: 1e-4,
            eval_seed: 900,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "smoke" => Ok(Self::smoke()),
            "micro" => Ok(Self::micro()),
            other => Err(crate::EvalError::Config(format!(
                "unknown budget `{other}` (expected smoke or micro)"
            ))),
        }
    }

    fn recipe(&self) -> DatasetRecipe {
        let mut recipe = DatasetRecipe::default_cross(self.episodes_per_cell);
        recipe.name = "ablation".into();
        recipe.groups.push(RecipeGroup {
            embodiment: "arm3".into(),
            task: "sort-4".into(),
            episodes: self.sort4_episodes,
        });
        recipe
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationName {
    Stages,
    Substep,
    ExpertSize,
    Throughput,
}

impl AblationName {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "stages" => Ok(Self::Stages),
            "substep" => Ok(Self::Substep),
            "expert-size" => Ok(Self::ExpertSize),
            "throughput" => Ok(Self::Throughput),
            other => Err(crate::EvalError::Config(format!(
                "unknown ablation `{other}`"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Stages => "stages",
            Self::Substep => "substep",
            Self::ExpertSize => "expert-size",
            Self::Throughput => "throughput",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ArmResult {
    pub label: String,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    /// Set when an arm diverged; the comparison is still emitted.
    pub note: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub name: String,
    pub task: String,
    pub arms: Vec<ArmResult>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("ablation,arm,mean,per_seed,note\n");
        for arm in &self.arms {
            let seeds: Vec<String> = arm.per_seed.iter().map(|s| format!("{s:.4}")).collect();
            out.push_str(&format!(
                "{},{},{:.6},{},{}\n",
                self.name,
                arm.label,
                arm.mean,
                seeds.join(";"),
                arm.note.as_deref().unwrap_or("")
            ));
        }
        out
    }

    pub fn arm(&self, label: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.label == label)
    }
}

/// Shared trainer/evaluator for ablation arms, with checkpoint reuse across
/// identical (signature, seed) pairs.
pub struct AblationEngine {
    pub budget: AblationBudget,
    records: Vec<EpisodeRecord>,
    stats: NormStats,
    cache: Mutex<BTreeMap<String, ParamSet>>,
}

impl AblationEngine {
    /// Generate (or reuse) the budget's dataset under `work_dir`.
    pub fn prepare(budget: AblationBudget, work_dir: &Path) -> Result<Self> {
        let data_dir = work_dir.join("dataset");
        if !data_dir.join("manifest.json").exists() {
            gen_dataset(&budget.recipe(), budget.dataset_seed, &data_dir)?;
        }
        let records = load_dataset(&data_dir)?;
        let stats = NormStats::load(&data_dir)?;
        Ok(Self {
            budget,
            records,
            stats,
            cache: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn records(&self) -> &[EpisodeRecord] {
        &self.records
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    fn cached<F>(&self, key: String, build: F) -> Result<ParamSet>
    where
        F: FnOnce() -> Result<ParamSet>,
    {
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let built = build()?;
        self.cache
            .lock()
            .expect("cache lock")
            .insert(key, built.clone());
        Ok(built)
    }

    fn reasoning_tag(source: ReasoningSource) -> &'static str {
        match source {
            ReasoningSource::Substeps => "sub",
            ReasoningSource::DirectPrompt => "direct",
        }
    }

    /// Stage-1 pre-training of the expert (cross-embodiment data).
    pub fn stage1(
        &self,
        spec: &ModelSpec,
        arch: &str,
        seed: u64,
        reasoning: ReasoningSource,
    ) -> Result<ParamSet> {
        let key = format!("{arch}/s1/{}/{seed}", Self::reasoning_tag(reasoning));
        self.cached(key, || {
            let mut cfg = build_stage(1, &EmbodimentId::new("arm3"), &Default::default())?;
            cfg.lr = self.budget.lr_stage1;
            cfg.batch = self.budget.batch;
            cfg.reasoning = reasoning;
            let init = spec.init_stage1(seed)?;
            let out = train_stage(
                &cfg,
                spec,
                &self.records,
                &self.stats,
                init,
                seed,
                &TrainOptions {
                    max_steps: Some(self.budget.stage1_steps),
                    out_dir: None,
                },
            )?;
            Ok(out.params)
        })
    }

    /// Stage-2 alignment on arm3 data, grafting from `init_from` (a trained
    /// or untrained stage-1 parameter set).
    pub fn stage2(
        &self,
        spec: &ModelSpec,
        arch: &str,
        seed: u64,
        init_from: &ParamSet,
        init_tag: &str,
        reasoning: ReasoningSource,
    ) -> Result<ParamSet> {
        let key = format!(
            "{arch}/s2-{init_tag}/{}/{seed}",
            Self::reasoning_tag(reasoning)
        );
        let init = spec.init_stage2(seed.wrapping_add(1), init_from)?;
        self.cached(key, || {
            let mut cfg = build_stage(2, &EmbodimentId::new("arm3"), &Default::default())?;
            cfg.lr = self.budget.lr_stage2;
            cfg.batch = self.budget.batch;
            cfg.reasoning = reasoning;
            let out = train_stage(
                &cfg,
                spec,
                &self.records,
                &self.stats,
                init,
                seed,
                &TrainOptions {
                    max_steps: Some(self.budget.stage2_steps),
                    out_dir: None,
                },
            )?;
            Ok(out.params)
        })
    }

    /// Stage-3 task adaptation.
    pub fn stage3(
        &self,
        spec: &ModelSpec,
        arch: &str,
        seed: u64,
        init: ParamSet,
        task: TaskKind,
        reasoning: ReasoningSource,
    ) -> Result<ParamSet> {
        let key = format!(
            "{arch}/s3-{}/{}/{seed}",
            task.name(),
            Self::reasoning_tag(reasoning)
        );
        self.cached(key, || {
            let tasks = [task.name().to_string()].into_iter().collect();
            let mut cfg = build_stage(3, &EmbodimentId::new("arm3"), &tasks)?;
            cfg.lr = self.budget.lr_stage3;
            cfg.batch = self.budget.batch;
            cfg.reasoning = reasoning;
            let out = train_stage(
                &cfg,
                spec,
                &self.records,
                &self.stats,
                init,
                seed,
                &TrainOptions {
                    max_steps: Some(self.budget.stage3_steps),
                    out_dir: None,
                },
            )?;
            Ok(out.params)
        })
    }

    /// Mean normalized score of a checkpoint on one task.
    pub fn eval(&self, spec: &ModelSpec, params: ParamSet, kind: TaskKind) -> Result<f64> {
        let policy = Policy::Model(Box::new(ModelPolicy::new(
            spec.clone(),
            params,
            self.stats.clone(),
        )?));
        let tasks = vec![(kind, EmbodimentId::new("arm3"))];
        let (table, _) = run_suite(
            &policy,
            &tasks,
            self.budget.trials,
            self.budget.eval_seed,
            None,
        )?;
        Ok(table.rows[0].mean_normalized)
    }
}

fn arm_scores<F>(engine: &AblationEngine, mut per_seed: F) -> (Vec<f64>, Option<String>)
where
    F: FnMut(u64) -> Result<f64>,
{
    let mut scores = Vec::new();
    let mut note = None;
    for &seed in &engine.budget.train_seeds {
        match per_seed(seed) {
            Ok(score) => scores.push(score),
            Err(e) => {
                note = Some(format!("seed {seed}: {e}"));
                scores.push(0.0);
            }
        }
    }
    (scores, note)
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Run one named ablation and emit the comparison table.
pub fn run_ablation(engine: &AblationEngine, name: AblationName) -> Result<AblationTable> {
    match name {
        AblationName::Stages => {
            let spec = ModelSpec::new(ExpertConfig::small());
            let sub = ReasoningSource::Substeps;
            let mut arms = Vec::new();

            let (scores, note) = arm_scores(engine, |seed| {
                let s1 = engine.stage1(&spec, "small", seed, sub)?;
                let policy = Policy::Model(Box::new(ModelPolicy::new(
                    spec.clone(),
                    s1,
                    engine.stats().clone(),
                )?));
                let tasks = vec![(TaskKind::Sort2, EmbodimentId::new("arm3"))];
                let (table, _) = run_suite(
                    &policy,
                    &tasks,
                    engine.budget.trials,
                    engine.budget.eval_seed,
                    None,
                )?;
                Ok(table.rows[0].mean_normalized)
            });
            arms.push(ArmResult {
                label: "stage1-only".into(),
                mean: mean(&scores),
                per_seed: scores,
                note,
            });

            let (scores, note) = arm_scores(engine, |seed| {
                let untrained = spec.init_stage1(seed)?;
                let s2 = engine.stage2(&spec, "small", seed, &untrained, "scratch", sub)?;
                engine.eval(&spec, s2, TaskKind::Sort2)
            });
            arms.push(ArmResult {
                label: "stage2-only".into(),
                mean: mean(&scores),
                per_seed: scores,
                note,
            });

            let (scores, note) = arm_scores(engine, |seed| {
                let s1 = engine.stage1(&spec, "small", seed, sub)?;
                let s2 = engine.stage2(&spec, "small", seed, &s1, "s1", sub)?;
                engine.eval(&spec, s2, TaskKind::Sort2)
            });
            arms.push(ArmResult {
                label: "stage1+2".into(),
                mean: mean(&scores),
                per_seed: scores,
                note,
            });

            let (scores, note) = arm_scores(engine, |seed| {
                let s1 = engine.stage1(&spec, "small", seed, sub)?;
                let s2 = engine.stage2(&spec, "small", seed, &s1, "s1", sub)?;
                let s3 = engine.stage3(&spec, "small", seed, s2, TaskKind::Sort2, sub)?;
                engine.eval(&spec, s3, TaskKind::Sort2)
            });
            arms.push(ArmResult {
                label: "stage1+2+3".into(),
                mean: mean(&scores),
                per_seed: scores,
                note,
            });

            Ok(AblationTable {
                name: "stages".into(),
                task: "sort-2".into(),
                arms,
            })
        }
        AblationName::Substep => {
            let spec = ModelSpec::new(ExpertConfig::small());
            let mut arms = Vec::new();
            let variants: [(&str, ReasoningSource, ReasoningSource); 3] = [
                (
                    "direct-everywhere",
                    ReasoningSource::DirectPrompt,
                    ReasoningSource::DirectPrompt,
                ),
                (
                    "substeps-stage2-only",
                    ReasoningSource::DirectPrompt,
                    ReasoningSource::Substeps,
                ),
                (
                    "substeps-both",
                    ReasoningSource::Substeps,
                    ReasoningSource::Substeps,
                ),
            ];
            for (label, s1_mode, s2_mode) in variants {
                let (scores, note) = arm_scores(engine, |seed| {
                    let s1 = engine.stage1(&spec, "small", seed, s1_mode)?;
                    let s2 = engine.stage2(
                        &spec,
                        "small",
                        seed,
                        &s1,
                        &format!("s1{}", AblationEngine::reasoning_tag(s1_mode)),
                        s2_mode,
                    )?;
                    engine.eval(&spec, s2, TaskKind::Sort4)
                });
                arms.push(ArmResult {
                    label: label.into(),
                    mean: mean(&scores),
                    per_seed: scores,
                    note,
                });
            }
            Ok(AblationTable {
                name: "substep".into(),
                task: "sort-4".into(),
                arms,
            })
        }
        AblationName::ExpertSize => {
            let mut arms = Vec::new();
            let variants: [(&str, ExpertConfig); 3] = [
                ("tiny-mlp", ExpertConfig::tiny_mlp()),
                ("small", ExpertConfig::small()),
                ("large", ExpertConfig::large()),
            ];
            for (label, expert) in variants {
                let spec = ModelSpec::new(expert);
                let sub = ReasoningSource::Substeps;
                let (scores, note) = arm_scores(engine, |seed| {
                    let s1 = engine.stage1(&spec, label, seed, sub)?;
                    let s2 = engine.stage2(&spec, label, seed, &s1, "s1", sub)?;
                    engine.eval(&spec, s2, TaskKind::Sort2)
                });
                arms.push(ArmResult {
                    label: label.into(),
                    mean: mean(&scores),
                    per_seed: scores,
                    note,
                });
            }
            Ok(AblationTable {
                name: "expert-size".into(),
                task: "sort-2".into(),
                arms,
            })
        }
        AblationName::Throughput => {
            let spec = ModelSpec::new(ExpertConfig::small());
            let seed = engine.budget.train_seeds.first().copied().unwrap_or(11);
            let steps = 25;
            let mut s1_cfg = build_stage(1, &EmbodimentId::new("arm3"), &Default::default())?;
            s1_cfg.lr = engine.budget.lr_stage1;
            s1_cfg.batch = engine.budget.batch;
            let s1_init = spec.init_stage1(seed)?;
            let s1_rate = throughput(
                &s1_cfg,
                &spec,
                engine.records(),
                engine.stats(),
                s1_init.clone(),
                seed,
                steps,
            )?;
            let mut s2_cfg = build_stage(2, &EmbodimentId::new("arm3"), &Default::default())?;
            s2_cfg.lr = engine.budget.lr_stage2;
            s2_cfg.batch = engine.budget.batch;
            let s2_init = spec.init_stage2(seed.wrapping_add(1), &s1_init)?;
            let s2_rate = throughput(
                &s2_cfg,
                &spec,
                engine.records(),
                engine.stats(),
                s2_init,
                seed,
                steps,
            )?;
            Ok(AblationTable {
                name: "throughput".into(),
                task: "steps-per-sec".into(),
                arms: vec![
                    ArmResult {
                        label: "stage1-expert-only".into(),
                        per_seed: vec![s1_rate],
                        mean: s1_rate,
                        note: None,
                    },
                    ArmResult {
                        label: "stage2-full-model".into(),
                        per_seed: vec![s2_rate],
                        mean: s2_rate,
                        note: Some("reference full-scale ratio: 2.78x".into()),
                    },
                ],
            })
        }
    }
}

/// Visual generalization: the same rubric on recolored scenes.
#[derive(Debug, Clone, Serialize)]
pub struct GeneralizationReport {
    pub in_domain: SuiteTable,
    pub recolored: SuiteTable,
}

pub fn generalization_eval(
    policy: &Policy,
    tasks: &[(TaskKind, EmbodimentId)],
    palette_map: &[(u8, [u8; 3])],
    trials: usize,
    base_seed: u64,
) -> Result<GeneralizationReport> {
    let (in_domain, _) = run_suite(policy, tasks, trials, base_seed, None)?;
    let mut palette = deskvla_world::raster::default_palette();
    for (idx, rgb) in palette_map {
        if let Some(slot) = palette.0.get_mut(*idx as usize) {
            *slot = *rgb;
        }
    }
    let recolored_palette: Palette = palette;
    let (recolored, _) = run_suite(policy, tasks, trials, base_seed, Some(&recolored_palette))?;
    Ok(GeneralizationReport {
        in_domain,
        recolored,
    })
}
