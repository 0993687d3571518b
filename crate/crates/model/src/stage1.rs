//! Stage-1 conditioning pathway: per-view patch encoders with FiLM-injected
//! instruction embeddings. These parameters exist only for cross-embodiment
//! pre-training and are dropped when the backbone takes over.

use deskvla_autodiff::rng::DetRng;
use deskvla_autodiff::{Graph, NodeId, ParamSet, Real};

use crate::expert::{CondNodes, Conditioning};
use crate::image::ObsImage;
use crate::init::{insert_linear, insert_zero_linear, normal_tensor};
use crate::{ModelError, Result};

#[derive(Debug, Clone)]
pub struct Stage1Config {
    pub view_res: usize,
    pub views: usize,
    pub patch: usize,
    pub width: usize,
    pub blocks: usize,
    pub instr_dim: usize,
    /// Output width; must match the expert's hidden size.
    pub cond_width: usize,
}

impl Stage1Config {
    pub fn default_for(cond_width: usize) -> Self {
        Self {
            view_res: 64,
            views: 3,
            patch: 8,
            width: 64,
            blocks: 2,
            instr_dim: 32,
            cond_width,
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn patches_per_view(&self) -> usize {
        (self.view_res / self.patch) * (self.view_res / self.patch)
    }

    pub fn param_count(&self, vocab: usize) -> usize {
        use crate::init::linear_count;
        let mut n = linear_count(self.patch_dim(), self.width);
        n += self.patches_per_view() * self.width; // patch position table
        for _ in 0..self.blocks {
            n += 2 * linear_count(self.width, self.width);
            n += 2 * linear_count(self.instr_dim, self.width); // film maps
        }
        // mean, max and spatial soft-argmax features per view
        n += linear_count(self.views * 4 * self.width, self.cond_width);
        n += vocab * self.instr_dim; // bag-of-tokens table
        n += linear_count(self.instr_dim, self.cond_width); // language token
        n
    }
}

pub fn init_stage1_params(cfg: &Stage1Config, vocab: usize, rng: &mut DetRng) -> Result<ParamSet> {
    let mut p = ParamSet::new();
    let std = 0.02;
    insert_linear(&mut p, "s1enc/patch", cfg.patch_dim(), cfg.width, std, rng);
    p.insert(
        "s1enc/patch_pos",
        normal_tensor(rng, vec![cfg.patches_per_view(), cfg.width], std),
    )?;
    for b in 0..cfg.blocks {
        let base = format!("s1enc/block{b}");
        insert_linear(&mut p, &format!("{base}/fc_a"), cfg.width, cfg.width, std, rng);
        insert_linear(&mut p, &format!("{base}/fc_b"), cfg.width, cfg.width, std, rng);
        insert_zero_linear(&mut p, &format!("{base}/film_g"), cfg.instr_dim, cfg.width);
        insert_zero_linear(&mut p, &format!("{base}/film_b"), cfg.instr_dim, cfg.width);
    }
    insert_linear(
        &mut p,
        "s1enc/obs_proj",
        cfg.views * 4 * cfg.width,
        cfg.cond_width,
        std,
        rng,
    );
    p.insert(
        "s1lang/embed",
        normal_tensor(rng, vec![vocab, cfg.instr_dim], 0.02),
    )?;
    insert_linear(&mut p, "s1lang/lang_proj", cfg.instr_dim, cfg.cond_width, std, rng);
    Ok(p)
}

fn linear<T: Real>(g: &mut Graph<T>, params: &ParamSet, name: &str, x: NodeId) -> Result<NodeId> {
    let w = g.param(params, &format!("{name}/w"))?;
    let b = g.param(params, &format!("{name}/b"))?;
    Ok(g.affine(x, w, b)?)
}

/// Learned bag-of-tokens instruction embedding (mean of token vectors).
pub fn instruction_embedding<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet,
    ids: &[u32],
) -> Result<NodeId> {
    if ids.is_empty() {
        return Err(ModelError::Contract("empty instruction".into()));
    }
    let table = g.param(params, "s1lang/embed")?;
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let rows = g.embedding(table, &idx)?;
    Ok(g.mean_rows(rows))
}

/// Sharpness of the spatial soft-argmax readout.
const SOFTARGMAX_TEMP: f64 = 10.0;

/// Normalized patch-center coordinates in [-1, 1], row-major patch order.
fn patch_grid(cfg: &Stage1Config) -> deskvla_autodiff::Tensor<f32> {
    let per_axis = cfg.view_res / cfg.patch;
    let mut data = Vec::with_capacity(per_axis * per_axis * 2);
    for gy in 0..per_axis {
        for gx in 0..per_axis {
            let cx = (gx as f32 + 0.5) / per_axis as f32 * 2.0 - 1.0;
            let cy = (gy as f32 + 0.5) / per_axis as f32 * 2.0 - 1.0;
            data.push(cx);
            data.push(cy);
        }
    }
    deskvla_autodiff::Tensor::new(vec![per_axis * per_axis, 2], data).expect("sized")
}

/// Stage-1 conditioning on the tape: per-view encoders with FiLM after each
/// block; per view the features pool as [mean | max | spatial soft-argmax],
/// concatenated in view order, then projected.
pub fn encode_obs_stage1_graph<T: Real>(
    g: &mut Graph<T>,
    cfg: &Stage1Config,
    params: &ParamSet,
    views: &[ObsImage],
    instr_ids: &[u32],
    proprio: NodeId,
) -> Result<CondNodes> {
    if views.len() != cfg.views {
        return Err(ModelError::Ingest(format!(
            "expected {} views, got {}",
            cfg.views,
            views.len()
        )));
    }
    for view in views {
        if view.width != cfg.view_res || view.height != cfg.view_res {
            return Err(ModelError::Ingest(format!(
                "view is {}x{}, configured resolution is {res}x{res}",
                view.width,
                view.height,
                res = cfg.view_res
            )));
        }
    }
    let instr = instruction_embedding(g, params, instr_ids)?;
    let mut pooled = Vec::with_capacity(views.len());
    for view in views {
        let patches = g.input(view.patches(cfg.patch)?.cast());
        let embedded = linear(g, params, "s1enc/patch", patches)?;
        let pos = g.param(params, "s1enc/patch_pos")?;
        let mut x = g.add(embedded, pos)?;
        for b in 0..cfg.blocks {
            let base = format!("s1enc/block{b}");
            let up = linear(g, params, &format!("{base}/fc_a"), x)?;
            let act = g.gelu(up);
            let down = linear(g, params, &format!("{base}/fc_b"), act)?;
            x = g.add(x, down)?;
            let gamma = linear(g, params, &format!("{base}/film_g"), instr)?;
            let beta = linear(g, params, &format!("{base}/film_b"), instr)?;
            x = g.film(x, gamma, beta)?;
        }
        let mean = g.mean_rows(x);
        let max = g.max_rows(x);
        pooled.push(g.reshape(mean, vec![1, cfg.width])?);
        pooled.push(g.reshape(max, vec![1, cfg.width])?);
        // Per-channel expected patch position under a softmax over patches:
        // an explicit differentiable location readout.
        let xt = g.transpose(x);
        let sharpened = g.scale(xt, SOFTARGMAX_TEMP);
        let weights = g.softmax(sharpened);
        let grid = g.input(patch_grid(cfg).cast());
        let zero2 = g.input(deskvla_autodiff::Tensor::<f32>::zeros(vec![2]).cast());
        let positions = g.affine(weights, grid, zero2)?;
        pooled.push(g.reshape(positions, vec![1, 2 * cfg.width])?);
    }
    let concat = g.concat_cols(&pooled)?;
    let obs = linear(g, params, "s1enc/obs_proj", concat)?;
    let lang_vec = linear(g, params, "s1lang/lang_proj", instr)?;
    let lang = g.reshape(lang_vec, vec![1, cfg.cond_width])?;
    Ok(CondNodes {
        obs_tokens: obs,
        lang_token: Some(lang),
        film: None,
        proprio,
    })
}

/// Value-level stage-1 conditioning. The caller supplies proprioception.
pub fn encode_obs_stage1(
    cfg: &Stage1Config,
    params: &ParamSet,
    views: &[ObsImage],
    instr_ids: &[u32],
    proprio: deskvla_autodiff::Tensor<f32>,
) -> Result<Conditioning> {
    let mut g = Graph::<f32>::new();
    let pn = g.input(proprio.clone());
    let nodes = encode_obs_stage1_graph(&mut g, cfg, params, views, instr_ids, pn)?;
    Ok(Conditioning {
        obs_tokens: g.value(nodes.obs_tokens).clone(),
        lang_token: nodes.lang_token.map(|n| g.value(n).clone()),
        film: None,
        proprio,
    })
}
