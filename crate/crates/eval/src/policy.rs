//! Policies the trial runner can execute: the scripted oracle, a stage-1
//! expert with its own encoders, or the full backbone + expert stack.
//!
//! Reasoning is strictly an output: nothing here accepts ground-truth
//! substeps, only the task's direct instruction.

use deskvla_autodiff::rng::DetRng;
use deskvla_autodiff::{ParamSet, Tensor};
use deskvla_model::backbone::forward_multimodal;
use deskvla_model::diffusion::sample_chunk;
use deskvla_model::expert::{denoise_value, Conditioning};
use deskvla_model::image::ObsImage;
use deskvla_model::ModelError;
use deskvla_train::model::ModelSpec;
use deskvla_train::run::training_schedule;
use deskvla_world::kin::KinematicEmbodiment;
use deskvla_world::raster::{render_views, Palette};
use deskvla_world::scene::Scene;
use deskvla_world::stats::NormStats;

use crate::{EvalError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    /// Expert conditioned through its stage-1 encoders (no backbone).
    Stage1,
    /// Backbone decodes reasoning and action tokens for the expert.
    Full,
}

pub struct ModelPolicy {
    pub spec: ModelSpec,
    pub params: ParamSet,
    pub stats: NormStats,
    pub kind: PolicyKind,
}

impl ModelPolicy {
    /// Infer the inference path from the parameter namespaces present.
    pub fn new(spec: ModelSpec, params: ParamSet, stats: NormStats) -> Result<Self> {
        let kind = if params.names().any(|n| n.starts_with("backbone/")) {
            PolicyKind::Full
        } else if params.names().any(|n| n.starts_with("s1enc/")) {
            PolicyKind::Stage1
        } else {
            return Err(EvalError::Config(
                "checkpoint has neither backbone nor stage-1 encoder parameters".into(),
            ));
        };
        Ok(Self {
            spec,
            params,
            stats,
            kind,
        })
    }

    pub fn has_head(&self, embodiment: &str) -> bool {
        self.params
            .names()
            .any(|n| n.starts_with(&format!("head/{embodiment}/")))
    }
}

pub enum Policy {
    /// Oracle upper bound: the scripted demonstrator itself.
    Scripted,
    Model(Box<ModelPolicy>),
}

/// One decoded action chunk plus the reasoning phrase that conditioned it.
pub struct ChunkDecision {
    /// Denormalized environment actions, one row per step.
    pub actions: Vec<Vec<f32>>,
    pub phrase: Option<String>,
}

/// Decode one chunk for the current observation. Reasoning is refreshed
/// here, once per chunk.
pub fn decide_chunk(
    policy: &ModelPolicy,
    scene: &Scene,
    emb: &KinematicEmbodiment,
    instr_ids: &[u32],
    palette: &Palette,
    rng: &mut DetRng,
) -> Result<ChunkDecision> {
    let emb_id = emb.spec.id.as_str();
    if !policy.has_head(emb_id) {
        return Err(EvalError::Routing(format!(
            "checkpoint has no output head for embodiment `{emb_id}`"
        )));
    }
    let views: Vec<ObsImage> = render_views(scene, emb)
        .iter()
        .map(|img| img.to_obs(palette))
        .collect();
    let proprio_raw = emb.proprio();
    let proprio = policy.stats.normalize_proprio(emb_id, &proprio_raw)?;
    let (cond, phrase) = match policy.kind {
        PolicyKind::Stage1 => {
            let cond = deskvla_model::stage1::encode_obs_stage1(
                &policy.spec.stage1,
                &policy.params,
                &views,
                instr_ids,
                Tensor::vector(proprio),
            )?;
            (cond, None)
        }
        PolicyKind::Full => {
            let (reasoning, connector) = forward_multimodal(
                &policy.spec.backbone,
                &policy.params,
                &policy.spec.vocab,
                &views,
                instr_ids,
            )?;
            let phrase_ids: Vec<u32> = reasoning
                .token_ids
                .iter()
                .copied()
                .filter(|&id| id != policy.spec.vocab.eos())
                .collect();
            let phrase = policy.spec.vocab.decode(&phrase_ids).unwrap_or_default();
            let cond = Conditioning {
                obs_tokens: connector.action_embedding,
                lang_token: None,
                film: Some(reasoning.film),
                proprio: Tensor::vector(proprio),
            };
            (cond, Some(phrase))
        }
    };
    if !cond.all_finite() {
        return Err(EvalError::Model(ModelError::Numeric(
            "non-finite conditioning".into(),
        )));
    }
    let schedule = training_schedule(&policy.spec);
    let spec = policy
        .spec
        .embodiments
        .iter()
        .find(|s| s.id.as_str() == emb_id)
        .ok_or_else(|| EvalError::Routing(format!("unknown embodiment `{emb_id}`")))?;
    let chunk = sample_chunk(
        |a_t, t| denoise_value(&policy.spec.expert, &policy.params, spec, &a_t.values, t, &cond),
        &spec.id,
        policy.spec.expert.horizon,
        spec.action_dim,
        &schedule,
        rng,
    )?;
    let mut actions = Vec::with_capacity(policy.spec.expert.horizon);
    for row in 0..policy.spec.expert.horizon {
        actions.push(policy.stats.denormalize_action(emb_id, chunk.values.row(row))?);
    }
    Ok(ChunkDecision { actions, phrase })
}
