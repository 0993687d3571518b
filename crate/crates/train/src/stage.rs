//! Stage construction and learning-rate schedules.

use std::collections::BTreeSet;

use deskvla_model::embodiment::EmbodimentId;
use deskvla_world::batch::{ReasoningSource, StageFilter};

use crate::{Result, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone)]
pub struct StageConfig {
    pub stage: u8,
    pub lr: f64,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub batch: usize,
    pub filter: StageFilter,
    pub reasoning: ReasoningSource,
    /// Name prefixes excluded from updates.
    pub frozen_patterns: Vec<String>,
    /// Name prefixes expected to train; used to validate partitioning.
    pub trainable_patterns: Vec<String>,
    /// Weight on the next-token loss.
    pub alpha: f64,
    pub grad_clip: f64,
}

/// Per-stage defaults: lr {1e-4, 2e-5, 2e-5}, schedulers
/// {constant, constant, cosine}, AdamW(0.9, 0.95), weight decay 0,
/// 5 epochs, data {cross-embodied, embodiment-specific, task-specific}.
pub fn build_stage(
    stage: u8,
    target: &EmbodimentId,
    tasks: &BTreeSet<String>,
) -> Result<StageConfig> {
    let base = StageConfig {
        stage,
        lr: 0.0,
        schedule: Schedule::Constant,
        weight_decay: 0.0,
        beta1: 0.9,
        beta2: 0.95,
        epochs: 5,
        batch: 64,
        filter: StageFilter::Cross,
        reasoning: ReasoningSource::Substeps,
        frozen_patterns: Vec::new(),
        trainable_patterns: Vec::new(),
        alpha: 0.0,
        grad_clip: 1.0,
    };
    match stage {
        1 => Ok(StageConfig {
            lr: 1e-4,
            filter: StageFilter::Cross,
            trainable_patterns: ["expert/", "head/", "s1enc/", "s1lang/"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            ..base
        }),
        2 => Ok(StageConfig {
            lr: 2e-5,
            filter: StageFilter::Embodiment(target.clone()),
            frozen_patterns: vec!["backbone/patch/".to_string()],
            trainable_patterns: ["expert/", "head/", "backbone/", "connector/", "film/"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            alpha: 1.0,
            ..base
        }),
        3 => Ok(StageConfig {
            lr: 2e-5,
            schedule: Schedule::Cosine,
            filter: StageFilter::Task(tasks.clone()),
            frozen_patterns: vec!["backbone/patch/".to_string()],
            trainable_patterns: ["expert/", "head/", "backbone/", "connector/", "film/"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            alpha: 1.0,
            ..base
        }),
        other => Err(TrainError::Config(format!("unknown stage {other}"))),
    }
}

/// Learning rate at a step: constant, or cosine decay to zero.
pub fn lr_at(cfg: &StageConfig, step: usize, total_steps: usize) -> Result<f64> {
    match cfg.schedule {
        Schedule::Constant => Ok(cfg.lr),
        Schedule::Cosine => {
            if total_steps == 0 {
                return Err(TrainError::Config(
                    "cosine schedule needs a positive step count".into(),
                ));
            }
            let frac = step.min(total_steps) as f64 / total_steps as f64;
            Ok(cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
        }
    }
}
