//! Dataset generation: scripted rollouts rendered, annotated and written
//! with normalization stats and a mixture summary.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use deskvla_autodiff::rng::{child_seed, DetRng};
use deskvla_model::embodiment::EmbodimentId;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotate::{annotate_substeps, build_vocabulary};
use crate::episode::{write_episode, EpisodeRecord, StepRecord};
use crate::raster::{default_palette, render_views};
use crate::script::{run_scripted_noisy, tracks_of};
use crate::stats::compute_norm_stats;
use crate::task::{sample_task, TaskKind};
use crate::{Result, WorldError};

pub const META_FILE: &str = "meta.json";
pub const META_FORMAT_VERSION: u32 = 1;
/// Exploration noise injected into executed joint commands during data
/// generation; recorded labels stay the expert's corrective actions.
pub const DEMO_NOISE_SIGMA: f64 = 0.25;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RecipeGroup {
    pub embodiment: String,
    pub task: String,
    pub episodes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetRecipe {
    pub name: String,
    pub groups: Vec<RecipeGroup>,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default = "default_retry_cap")]
    pub retry_cap: usize,
}

fn default_max_steps() -> usize {
    600
}

fn default_retry_cap() -> usize {
    5
}

impl DatasetRecipe {
    /// The committed cross-embodiment recipe: every embodiment on every
    /// core task.
    pub fn default_cross(episodes_per_cell: usize) -> Self {
        let mut groups = Vec::new();
        for emb in ["arm3", "arm2", "biman2x2"] {
            for task in ["pick-place", "sort-2", "stack-fold"] {
                groups.push(RecipeGroup {
                    embodiment: emb.to_string(),
                    task: task.to_string(),
                    episodes: episodes_per_cell,
                });
            }
        }
        Self {
            name: "cross-default".into(),
            groups,
            max_steps: default_max_steps(),
            retry_cap: default_retry_cap(),
        }
    }

    pub fn total_episodes(&self) -> usize {
        self.groups.iter().map(|g| g.episodes).sum()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub name: String,
    pub seed: u64,
    pub recipe: DatasetRecipe,
    /// Episode counts per "embodiment/task" cell.
    pub mixture: BTreeMap<String, usize>,
}

/// Generate one episode, retrying with fresh sub-seeds up to the cap.
fn generate_episode(
    group: &RecipeGroup,
    seed: u64,
    global_index: u64,
    max_steps: usize,
    retry_cap: usize,
) -> Result<EpisodeRecord> {
    let kind = TaskKind::from_name(&group.task)?;
    let emb_id = EmbodimentId::new(group.embodiment.clone());
    let vocab = build_vocabulary();
    let palette = default_palette();
    let mut last_err = String::new();
    for attempt in 0..=retry_cap {
        let mut rng = DetRng::new(child_seed(seed, "episode", global_index * 64 + attempt as u64));
        let instance = match sample_task(kind, &emb_id, &mut rng) {
            Ok(i) => i,
            Err(e) => {
                last_err = e.to_string();
                continue;
            }
        };
        let mut noise_rng = rng.child("demo-noise", 0);
        let rollout = run_scripted_noisy(&instance, max_steps, DEMO_NOISE_SIGMA, &mut noise_rng);
        if !rollout.success {
            last_err = format!("scripted expert failed within {max_steps} steps");
            continue;
        }
        let tracks = tracks_of(&rollout, &instance);
        let annotation = annotate_substeps(&instance, &tracks, rollout.steps.len())?;
        let steps: Vec<StepRecord> = rollout
            .steps
            .iter()
            .map(|s| StepRecord {
                views: render_views(&s.scene, &s.embodiment),
                proprio: s.proprio.clone(),
                action: s.action.clone(),
            })
            .collect();
        return Ok(EpisodeRecord {
            embodiment: emb_id,
            task: group.task.clone(),
            instruction: vocab.encode(&instance.instruction)?,
            palette,
            steps,
            annotation,
        });
    }
    Err(WorldError::Dataset(format!(
        "episode {global_index} ({}/{}) failed after {retry_cap} retries: {last_err}",
        group.embodiment, group.task
    )))
}

/// Generate, annotate and commit a dataset directory. Episodes generate in
/// parallel but commit in index order, so the directory is byte-identical
/// for a given (recipe, seed).
pub fn gen_dataset(recipe: &DatasetRecipe, seed: u64, out_dir: &Path) -> Result<DatasetMeta> {
    fs::create_dir_all(out_dir)?;
    if out_dir.join(crate::episode::MANIFEST_FILE).exists() {
        return Err(WorldError::Dataset(format!(
            "{} already holds a dataset",
            out_dir.display()
        )));
    }
    let jobs: Vec<(usize, &RecipeGroup)> = recipe
        .groups
        .iter()
        .flat_map(|g| std::iter::repeat_n(g, g.episodes))
        .enumerate()
        .collect();
    let records: Vec<Result<EpisodeRecord>> = jobs
        .par_iter()
        .map(|(idx, group)| {
            generate_episode(group, seed, *idx as u64, recipe.max_steps, recipe.retry_cap)
        })
        .collect();

    let mut mixture: BTreeMap<String, usize> = BTreeMap::new();
    let mut committed = Vec::with_capacity(records.len());
    for rec in records {
        let rec = rec?;
        *mixture
            .entry(format!("{}/{}", rec.embodiment, rec.task))
            .or_insert(0) += 1;
        write_episode(&rec, out_dir)?;
        committed.push(rec);
    }
    if !committed.is_empty() {
        let stats = compute_norm_stats(&committed)?;
        stats.save(out_dir)?;
    }
    let meta = DatasetMeta {
        format_version: META_FORMAT_VERSION,
        name: recipe.name.clone(),
        seed,
        recipe: recipe.clone(),
        mixture,
    };
    fs::write(out_dir.join(META_FILE), serde_json::to_vec_pretty(&meta)?)?;
    // Even an empty recipe commits a valid (empty) manifest.
    crate::episode::Manifest::load(out_dir).and_then(|m| {
        if m.episodes.is_empty() && recipe.total_episodes() > 0 {
            Err(WorldError::Dataset("no episodes committed".into()))
        } else {
            Ok(())
        }
    })?;
    if recipe.total_episodes() == 0 {
        let empty = crate::episode::Manifest {
            format_version: crate::episode::MANIFEST_FORMAT_VERSION,
            episodes: Vec::new(),
        };
        fs::write(
            out_dir.join(crate::episode::MANIFEST_FILE),
            serde_json::to_vec_pretty(&empty)?,
        )?;
    }
    Ok(meta)
}
