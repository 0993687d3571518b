//! Per-embodiment normalization statistics: exact action min/max and
//! proprio mean/std, shared verbatim between training and inference.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::episode::EpisodeRecord;
use crate::{Result, WorldError};

pub const STATS_FILE: &str = "norm_stats.json";
const EPS: f32 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRange {
    pub min: Vec<f32>,
    pub max: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProprioMoments {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct NormStats {
    pub actions: BTreeMap<String, ActionRange>,
    pub proprio: BTreeMap<String, ProprioMoments>,
}

impl NormStats {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(STATS_FILE), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(STATS_FILE);
        let bytes = fs::read(&path)
            .map_err(|e| WorldError::Stats(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    fn range(&self, embodiment: &str) -> Result<&ActionRange> {
        self.actions
            .get(embodiment)
            .ok_or_else(|| WorldError::Stats(format!("no action stats for `{embodiment}`")))
    }

    /// Map raw actions into [-1, 1] by the stored min/max.
    pub fn normalize_action(&self, embodiment: &str, action: &[f32]) -> Result<Vec<f32>> {
        let r = self.range(embodiment)?;
        Ok(action
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let span = r.max[i] - r.min[i];
                (2.0 * (a - r.min[i]) / span - 1.0).clamp(-1.0, 1.0)
            })
            .collect())
    }

    pub fn denormalize_action(&self, embodiment: &str, normed: &[f32]) -> Result<Vec<f32>> {
        let r = self.range(embodiment)?;
        Ok(normed
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let span = r.max[i] - r.min[i];
                r.min[i] + (n.clamp(-1.0, 1.0) + 1.0) / 2.0 * span
            })
            .collect())
    }

    pub fn normalize_proprio(&self, embodiment: &str, proprio: &[f32]) -> Result<Vec<f32>> {
        let m = self
            .proprio
            .get(embodiment)
            .ok_or_else(|| WorldError::Stats(format!("no proprio stats for `{embodiment}`")))?;
        Ok(proprio
            .iter()
            .enumerate()
            .map(|(i, &p)| (p - m.mean[i]) / m.std[i])
            .collect())
    }
}

/// Exact min/max over all actions per embodiment, with degenerate dims
/// widened by epsilon; proprio gets mean/std the same way.
pub fn compute_norm_stats(records: &[EpisodeRecord]) -> Result<NormStats> {
    if records.is_empty() {
        return Err(WorldError::Stats("empty dataset".into()));
    }
    let mut stats = NormStats::default();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut sums: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for rec in records {
        let key = rec.embodiment.as_str().to_string();
        let a_dim = rec.steps[0].action.len();
        let p_dim = rec.steps[0].proprio.len();
        let range = stats.actions.entry(key.clone()).or_insert(ActionRange {
            min: vec![f32::INFINITY; a_dim],
            max: vec![f32::NEG_INFINITY; a_dim],
        });
        let (sum, sumsq) = sums
            .entry(key.clone())
            .or_insert((vec![0.0; p_dim], vec![0.0; p_dim]));
        for step in &rec.steps {
            for (i, &a) in step.action.iter().enumerate() {
                range.min[i] = range.min[i].min(a);
                range.max[i] = range.max[i].max(a);
            }
            for (i, &p) in step.proprio.iter().enumerate() {
                sum[i] += f64::from(p);
                sumsq[i] += f64::from(p) * f64::from(p);
            }
            *counts.entry(key.clone()).or_insert(0) += 1;
        }
    }
    for (key, range) in &mut stats.actions {
        let n = counts[key];
        if n == 0 {
            return Err(WorldError::Stats(format!("empty partition for `{key}`")));
        }
        for i in 0..range.min.len() {
            if range.max[i] - range.min[i] < EPS {
                range.min[i] -= EPS;
                range.max[i] += EPS;
            }
        }
        let (sum, sumsq) = &sums[key];
        let nf = n as f64;
        let mean: Vec<f32> = sum.iter().map(|&s| (s / nf) as f32).collect();
        let std: Vec<f32> = sumsq
            .iter()
            .zip(&mean)
            .map(|(&sq, &m)| {
                let var = (sq / nf - f64::from(m) * f64::from(m)).max(0.0);
                (var.sqrt() as f32).max(EPS)
            })
            .collect();
        stats
            .proprio
            .insert(key.clone(), ProprioMoments { mean, std });
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use deskvla_model::embodiment::EmbodimentId;

    use crate::annotate::SubstepAnnotation;
    use crate::episode::StepRecord;
    use crate::raster::{default_palette, Image};

    fn record_with_actions(actions: Vec<Vec<f32>>) -> EpisodeRecord {
        let view = Image {
            width: 4,
            height: 4,
            pix: vec![0; 16],
        };
        EpisodeRecord {
            embodiment: EmbodimentId::new("arm3"),
            task: "pick-place".into(),
            instruction: vec![1],
            palette: default_palette(),
            steps: actions
                .into_iter()
                .map(|action| StepRecord {
                    views: vec![view.clone()],
                    proprio: vec![0.5, -0.5],
                    action,
                })
                .collect(),
            annotation: SubstepAnnotation::default(),
        }
    }

    #[test]
    fn constant_action_dim_is_widened() {
        let rec = record_with_actions(vec![vec![0.7, 0.2], vec![0.7, 0.4]]);
        let stats = compute_norm_stats(&[rec]).unwrap();
        let r = &stats.actions["arm3"];
        assert!(r.max[0] > r.min[0]);
        assert!((r.min[0] - (0.7 - EPS)).abs() < 1e-9);
        assert!((r.max[0] - (0.7 + EPS)).abs() < 1e-9);
    }

    #[test]
    fn stats_of_two_episodes_equal_stats_of_concatenation() {
        let a = record_with_actions(vec![vec![0.1, -0.3], vec![0.9, 0.0]]);
        let b = record_with_actions(vec![vec![-0.5, 0.8]]);
        let separate = compute_norm_stats(&[a.clone(), b.clone()]).unwrap();
        let mut concat = a.clone();
        concat.steps.extend(b.steps.clone());
        let joined = compute_norm_stats(&[concat]).unwrap();
        assert_eq!(separate.actions, joined.actions);
    }

    #[test]
    fn normalize_then_denormalize_is_identity() {
        let rec = record_with_actions(vec![vec![0.1, -0.3], vec![0.9, 0.5], vec![-0.8, 0.2]]);
        let stats = compute_norm_stats(&[rec]).unwrap();
        let raw = vec![0.45f32, 0.11];
        let normed = stats.normalize_action("arm3", &raw).unwrap();
        assert!(normed.iter().all(|v| (-1.0..=1.0).contains(v)));
        let back = stats.denormalize_action("arm3", &normed).unwrap();
        for (r, b) in raw.iter().zip(&back) {
            assert!((r - b).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_dataset_is_a_stats_error() {
        assert!(matches!(
            compute_norm_stats(&[]),
            Err(WorldError::Stats(_))
        ));
    }
}
