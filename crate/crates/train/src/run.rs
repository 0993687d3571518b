//! The deterministic training loop: filtered batches, per-sample backward
//! passes fanned out across threads, ordered gradient reduction, AdamW, and
//! checkpoint/metrics output.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use deskvla_autodiff::rng::{child_seed, DetRng};
use deskvla_autodiff::{save_checkpoint, Graph, ParamSet, Tensor};
use deskvla_model::diffusion::{make_schedule, NoiseSchedule};
use deskvla_world::batch::BatchStream;
use deskvla_world::episode::EpisodeRecord;
use deskvla_world::stats::NormStats;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{draw_noise, sample_loss_graph, ModelSpec, NoiseDraw};
use crate::optim::{adamw_step, OptimizerState};
use crate::stage::{lr_at, StageConfig};
use crate::{Result, TrainError};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub l_diff: f64,
    pub l_ntp: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepTiming {
    pub step: usize,
    pub wall_ms: f64,
    pub steps_per_sec: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    /// Hard cap on optimizer steps (smoke budgets); `None` runs the
    /// configured epochs.
    pub max_steps: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            max_steps: None,
            out_dir: None,
        }
    }
}

pub struct TrainOutcome {
    pub params: ParamSet,
    pub best: ParamSet,
    pub metrics: Vec<StepMetrics>,
    pub timings: Vec<StepTiming>,
    /// Mean optimizer steps per second, first five steps excluded.
    pub steps_per_sec: f64,
}

pub fn training_schedule(spec: &ModelSpec) -> NoiseSchedule {
    make_schedule(spec.expert.max_timestep, 1e-4, 2e-2).expect("valid defaults")
}

fn check_partition(cfg: &StageConfig, params: &ParamSet) -> Result<()> {
    for name in params.names() {
        let trainable = cfg.trainable_patterns.iter().any(|p| name.starts_with(p.as_str()));
        let frozen = cfg.frozen_patterns.iter().any(|p| name.starts_with(p.as_str()));
        if !trainable && !frozen {
            return Err(TrainError::Config(format!(
                "parameter `{name}` matches neither trainable nor frozen patterns of stage {}",
                cfg.stage
            )));
        }
    }
    Ok(())
}

/// Run one stage over the filtered dataset. Fully seeded: identical inputs
/// produce identical metrics and checkpoints.
pub fn train_stage(
    cfg: &StageConfig,
    spec: &ModelSpec,
    records: &[EpisodeRecord],
    stats: &NormStats,
    init: ParamSet,
    seed: u64,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    let mut params = init;
    params.clear_frozen();
    let frozen: Vec<&str> = cfg.frozen_patterns.iter().map(String::as_str).collect();
    params.freeze_matching(&frozen);
    check_partition(cfg, &params)?;

    let mut stream = BatchStream::new(
        records,
        &cfg.filter,
        stats,
        &spec.vocab,
        spec.expert.horizon,
        cfg.batch,
        child_seed(seed, "batches", 0),
        cfg.reasoning,
    )?;
    let total_steps = options
        .max_steps
        .unwrap_or(cfg.epochs * stream.batches_per_epoch());
    let schedule = training_schedule(spec);
    let mut noise_rng = DetRng::new(child_seed(seed, "noise", 0));
    let mut state = OptimizerState::new();
    let mut metrics = Vec::with_capacity(total_steps);
    let mut timings = Vec::with_capacity(total_steps);
    let mut best = params.clone();
    let mut best_smoothed = f64::INFINITY;
    let mut recent: Vec<f64> = Vec::new();
    let started = Instant::now();
    let mut measured = 0.0f64;
    let mut step = 0usize;

    'outer: while step < total_steps {
        let Some(batch) = stream.next_batch()? else {
            stream.next_epoch();
            continue;
        };
        let emb = spec.embodiment(batch.embodiment.as_str())?;
        let draws: Vec<NoiseDraw> = batch
            .samples
            .iter()
            .map(|_| {
                draw_noise(
                    &mut noise_rng,
                    spec.expert.horizon,
                    emb.action_dim,
                    schedule.steps(),
                )
            })
            .collect();
        let t0 = Instant::now();
        // Per-sample tapes run in parallel; the reduction below walks the
        // results in sample order so sums are bit-stable.
        let results: Vec<Result<(BTreeMap<String, Tensor<f32>>, f64, f64)>> = batch
            .samples
            .par_iter()
            .zip(draws.par_iter())
            .map(|(sample, noise)| {
                let mut g = Graph::<f32>::new();
                let loss = sample_loss_graph(
                    &mut g, spec, &params, cfg.stage, cfg.alpha, emb, sample, noise, &schedule,
                )?;
                g.backward(loss.total)?;
                Ok((g.param_grads(), loss.l_diff, loss.l_ntp))
            })
            .collect();

        let n = batch.samples.len() as f32;
        let mut grads: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        let mut l_diff = 0.0;
        let mut l_ntp = 0.0;
        for result in results {
            let (g, d, t) = result?;
            l_diff += d;
            l_ntp += t;
            for (name, tensor) in g {
                grads
                    .entry(name)
                    .and_modify(|acc| {
                        for (a, b) in acc.data_mut().iter_mut().zip(tensor.data()) {
                            *a += *b;
                        }
                    })
                    .or_insert(tensor);
            }
        }
        for tensor in grads.values_mut() {
            for v in tensor.data_mut() {
                *v /= n;
            }
        }
        l_diff /= f64::from(n);
        l_ntp /= f64::from(n);

        let lr = lr_at(cfg, step, total_steps)?;
        adamw_step(&mut params, &grads, &mut state, cfg, lr)?;
        let wall = t0.elapsed().as_secs_f64();
        if step >= 5 {
            measured += wall;
        }
        let total = l_diff + cfg.alpha * l_ntp;
        metrics.push(StepMetrics {
            step,
            l_diff,
            l_ntp,
            total,
            lr,
        });
        timings.push(StepTiming {
            step,
            wall_ms: wall * 1e3,
            steps_per_sec: if wall > 0.0 { 1.0 / wall } else { 0.0 },
        });
        recent.push(total);
        if recent.len() > 20 {
            recent.remove(0);
        }
        let smoothed = recent.iter().sum::<f64>() / recent.len() as f64;
        if smoothed < best_smoothed {
            best_smoothed = smoothed;
            best = params.clone();
        }
        step += 1;
        if step >= total_steps {
            break 'outer;
        }
    }

    let counted = step.saturating_sub(5);
    let steps_per_sec = if counted > 0 && measured > 0.0 {
        counted as f64 / measured
    } else {
        0.0
    };
    let _ = started;
    let outcome = TrainOutcome {
        params,
        best,
        metrics,
        timings,
        steps_per_sec,
    };
    if let Some(dir) = &options.out_dir {
        write_outputs(dir, &outcome)?;
    }
    Ok(outcome)
}

fn write_outputs(dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut metrics = fs::File::create(dir.join(METRICS_FILE))?;
    for m in &outcome.metrics {
        writeln!(metrics, "{}", serde_json::to_string(m)?)?;
    }
    let mut timings = fs::File::create(dir.join(TIMINGS_FILE))?;
    for t in &outcome.timings {
        writeln!(timings, "{}", serde_json::to_string(t)?)?;
    }
    save_checkpoint(&outcome.params, &dir.join("final"))?;
    save_checkpoint(&outcome.best, &dir.join("best"))?;
    Ok(())
}

/// Measured optimizer steps per second at the configured batch size.
pub fn throughput(
    cfg: &StageConfig,
    spec: &ModelSpec,
    records: &[EpisodeRecord],
    stats: &NormStats,
    init: ParamSet,
    seed: u64,
    steps: usize,
) -> Result<f64> {
    if steps < 20 {
        return Err(TrainError::Config(format!(
            "throughput needs at least 20 steps, got {steps}"
        )));
    }
    let outcome = train_stage(
        cfg,
        spec,
        records,
        stats,
        init,
        seed,
        &TrainOptions {
            max_steps: Some(steps),
            out_dir: None,
        },
    )?;
    Ok(outcome.steps_per_sec)
}
