//! The trainable model bundle and checkpoint surgery between stages.

use deskvla_autodiff::rng::DetRng;
use deskvla_autodiff::{Graph, NodeId, ParamSet, Real, Tensor};
use deskvla_model::backbone::{self, BackboneConfig};
use deskvla_model::diffusion::{diffusion_loss_graph, q_sample, ActionChunk, NoiseSchedule};
use deskvla_model::embodiment::EmbodimentSpec;
use deskvla_model::expert::{denoise, init_expert_params, CondNodes, ExpertConfig};
use deskvla_model::stage1::{self, Stage1Config};
use deskvla_model::vocab::Vocabulary;
use deskvla_world::batch::TrainSample;
use deskvla_world::kin::builtin_specs;

use crate::{Result, TrainError};

/// Everything needed to build forward passes for any stage.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub expert: ExpertConfig,
    pub stage1: Stage1Config,
    pub backbone: BackboneConfig,
    pub vocab: Vocabulary,
    pub embodiments: Vec<EmbodimentSpec>,
}

impl ModelSpec {
    pub fn new(expert: ExpertConfig) -> Self {
        let vocab = deskvla_world::annotate::build_vocabulary();
        let stage1 = Stage1Config::default_for(expert.hidden);
        let backbone = BackboneConfig::default_for(vocab.len(), expert.hidden);
        Self {
            expert,
            stage1,
            backbone,
            vocab,
            embodiments: builtin_specs(),
        }
    }

    pub fn embodiment(&self, id: &str) -> Result<&EmbodimentSpec> {
        self.embodiments
            .iter()
            .find(|s| s.id.as_str() == id)
            .ok_or_else(|| {
                TrainError::Model(deskvla_model::ModelError::UnknownEmbodiment(id.to_string()))
            })
    }

    /// Fresh stage-1 parameters: expert trunk, heads, stage-1 encoders.
    pub fn init_stage1(&self, seed: u64) -> Result<ParamSet> {
        let mut rng = DetRng::new(seed);
        let spec_refs: Vec<&EmbodimentSpec> = self.embodiments.iter().collect();
        let mut params = init_expert_params(&self.expert, &spec_refs, &mut rng)?;
        let s1 = stage1::init_stage1_params(&self.stage1, self.vocab.len(), &mut rng)?;
        for (name, t) in s1.iter() {
            params.insert(name, t.clone())?;
        }
        Ok(params)
    }

    /// Stage-2 parameters: graft the expert trunk and heads from a stage-1
    /// checkpoint (dropping its encoders), freshly initialize the backbone,
    /// connector and FiLM maps.
    pub fn init_stage2(&self, seed: u64, stage1_ckpt: &ParamSet) -> Result<ParamSet> {
        let mut rng = DetRng::new(seed);
        let spec_refs: Vec<&EmbodimentSpec> = self.embodiments.iter().collect();
        let fresh_expert = init_expert_params(&self.expert, &spec_refs, &mut rng)?;
        let mut params = ParamSet::new();
        let mut missing = Vec::new();
        for (name, fresh) in fresh_expert.iter() {
            match stage1_ckpt.get(name) {
                Some(t) if t.shape() == fresh.shape() => params.insert(name, t.clone())?,
                Some(t) => {
                    missing.push(format!("{name} (shape {:?} vs {:?})", t.shape(), fresh.shape()));
                }
                None => missing.push(name.to_string()),
            }
        }
        let unexpected: Vec<String> = stage1_ckpt
            .names()
            .filter(|n| {
                (n.starts_with("expert/") || n.starts_with("head/")) && !params.contains(n)
            })
            .map(str::to_string)
            .collect();
        if !missing.is_empty() || !unexpected.is_empty() {
            return Err(TrainError::Graft {
                missing,
                unexpected,
            });
        }
        let bb = backbone::init_backbone_params(&self.backbone, &mut rng)?;
        for (name, t) in bb.iter() {
            params.insert(name, t.clone())?;
        }
        Ok(params)
    }
}

/// Per-sample losses staged on one tape.
pub struct SampleLoss {
    pub total: NodeId,
    pub l_diff: f64,
    pub l_ntp: f64,
}

/// Noise assignment for one sample, drawn ahead of the parallel section so
/// the run stays deterministic.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Tensor<f32>,
}

pub fn draw_noise(rng: &mut DetRng, horizon: usize, dim: usize, steps: usize) -> NoiseDraw {
    let t = rng.below(steps);
    let eps = Tensor::new(
        vec![horizon, dim],
        (0..horizon * dim).map(|_| rng.gaussian() as f32).collect(),
    )
    .expect("sized");
    NoiseDraw { t, eps }
}

/// Build the loss graph for one sample. Stage 1 conditions through its own
/// encoders and carries no next-token term; stages 2/3 run the backbone
/// teacher-forced and add `alpha` times the next-token loss.
#[allow(clippy::too_many_arguments)]
pub fn sample_loss_graph<T: Real>(
    g: &mut Graph<T>,
    spec: &ModelSpec,
    params: &ParamSet,
    stage: u8,
    alpha: f64,
    emb: &EmbodimentSpec,
    sample: &TrainSample,
    noise: &NoiseDraw,
    schedule: &NoiseSchedule,
) -> Result<SampleLoss> {
    let chunk = ActionChunk::new(sample.chunk.clone(), emb.id.clone())?;
    let noised = q_sample(&chunk, noise.t, &noise.eps, schedule)?;
    let a_t = g.input(noised.values.cast());
    let eps_node = g.input(noise.eps.cast());
    let proprio = g.input(Tensor::vector(sample.proprio.clone()).cast());

    if stage == 1 {
        let cond = stage1::encode_obs_stage1_graph(
            g,
            &spec.stage1,
            params,
            &sample.views,
            &sample.phrase_ids,
            proprio,
        )?;
        let eps_hat = denoise(g, &spec.expert, params, emb, a_t, noise.t, cond)?;
        let l_diff = diffusion_loss_graph(g, eps_hat, eps_node, Some(&sample.mask))?;
        Ok(SampleLoss {
            total: l_diff,
            l_diff: g.value(l_diff).item().to_f64(),
            l_ntp: 0.0,
        })
    } else {
        let tf = backbone::teacher_forced(
            g,
            &spec.backbone,
            params,
            &spec.vocab,
            &sample.views,
            &sample.instruction_ids,
            &sample.phrase_ids,
        )?;
        let cond = CondNodes {
            obs_tokens: tf.action_tokens,
            lang_token: None,
            film: Some(tf.film),
            proprio,
        };
        let eps_hat = denoise(g, &spec.expert, params, emb, a_t, noise.t, cond)?;
        let l_diff = diffusion_loss_graph(g, eps_hat, eps_node, Some(&sample.mask))?;
        let total = backbone::total_loss(g, l_diff, tf.ntp, alpha)?;
        Ok(SampleLoss {
            total,
            l_diff: g.value(l_diff).item().to_f64(),
            l_ntp: g.value(tf.ntp).item().to_f64(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use deskvla_model::expert::ExpertKind;

    fn tiny_spec() -> ModelSpec {
        let expert = ExpertConfig {
            kind: ExpertKind::Transformer,
            layers: 1,
            hidden: 16,
            heads: 2,
            horizon: 4,
            max_timestep: 10,
            time_dim: 8,
            ffn_mult: 2,
        };
        let mut spec = ModelSpec::new(expert);
        spec.stage1 = Stage1Config {
            view_res: 64,
            views: 3,
            patch: 16,
            width: 8,
            blocks: 1,
            instr_dim: 8,
            cond_width: 16,
        };
        spec.backbone.layers = 1;
        spec.backbone.width = 16;
        spec.backbone.heads = 2;
        spec.backbone.connector_width = 16;
        spec.backbone.patch = 32;
        spec.backbone.queries = 2;
        spec
    }

    #[test]
    fn stage2_graft_preserves_expert_bytes_and_flags_mismatch() {
        let spec = tiny_spec();
        let s1 = spec.init_stage1(7).unwrap();
        let s2 = spec.init_stage2(8, &s1).unwrap();
        for name in s1.names().filter(|n| n.starts_with("expert/") || n.starts_with("head/")) {
            assert_eq!(s1.get(name), s2.get(name), "{name} changed in graft");
        }
        assert!(!s2.contains("s1enc/patch/w"));
        assert!(s2.contains("backbone/patch/w"));

        let mut broken = s1.clone();
        broken.remove("expert/time_proj/w");
        let err = spec.init_stage2(8, &broken).unwrap_err();
        match err {
            TrainError::Graft { missing, .. } => {
                assert!(missing.iter().any(|m| m.contains("expert/time_proj/w")));
            }
            other => panic!("wrong error {other}"),
        }
    }
}
