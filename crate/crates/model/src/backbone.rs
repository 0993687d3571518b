//! Tiny multimodal backbone: visual patches and instruction tokens feed a
//! causal transformer that decodes substep reasoning and carries learned
//! action-query tokens. Action queries go through the connector (two linear
//! layers with LayerNorm); pooled reasoning states drive the FiLM maps.

use deskvla_autodiff::rng::DetRng;
use deskvla_autodiff::{Graph, NodeId, ParamSet, Real, Tensor};

use crate::expert::transformer_block;
use crate::image::ObsImage;
use crate::init::{insert_layer_norm, insert_linear, insert_zero_linear, linear_count, normal_tensor};
use crate::vocab::Vocabulary;
use crate::{ModelError, Result};

#[derive(Debug, Clone)]
pub struct BackboneConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub context: usize,
    pub vocab: usize,
    pub view_res: usize,
    pub views: usize,
    pub patch: usize,
    /// Learned action-query tokens handed to the connector.
    pub queries: usize,
    /// Reasoning decode cap (tokens after the separator).
    pub reason_cap: usize,
    /// Connector output width; must match the expert's hidden size.
    pub connector_width: usize,
    pub ffn_mult: usize,
}

impl BackboneConfig {
    pub fn default_for(vocab: usize, connector_width: usize) -> Self {
        Self {
            layers: 4,
            width: 128,
            heads: 4,
            context: 256,
            vocab,
            view_res: 64,
            views: 3,
            patch: 16,
            queries: 8,
            reason_cap: 10,
            connector_width,
            ffn_mult: 4,
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn vis_tokens(&self) -> usize {
        let per_view = (self.view_res / self.patch) * (self.view_res / self.patch);
        per_view * self.views
    }

    pub fn validate(&self) -> Result<()> {
        if self.width % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "backbone width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.view_res % self.patch != 0 {
            return Err(ModelError::Config(format!(
                "patch {} does not tile resolution {}",
                self.patch, self.view_res
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let w = self.width;
        let mut n = linear_count(self.patch_dim(), w); // patch encoder
        n += self.vocab * w; // token embedding
        n += self.context * w; // positions
        n += self.queries * w; // action queries
        let per_layer = 2 * w
            + 4 * linear_count(w, w)
            + 2 * w
            + linear_count(w, w * self.ffn_mult)
            + linear_count(w * self.ffn_mult, w);
        n += self.layers * per_layer;
        n += 2 * w; // final ln
        n += linear_count(w, self.vocab); // lm head
        n += linear_count(w, self.connector_width) + 2 * self.connector_width; // connector fc0+ln0
        n += linear_count(self.connector_width, self.connector_width) + 2 * self.connector_width;
        n += 2 * linear_count(w, self.connector_width); // film maps
        n
    }
}

pub fn init_backbone_params(cfg: &BackboneConfig, rng: &mut DetRng) -> Result<ParamSet> {
    cfg.validate()?;
    let mut p = ParamSet::new();
    let w = cfg.width;
    let std = 0.02;
    insert_linear(&mut p, "backbone/patch", cfg.patch_dim(), w, std, rng);
    p.insert("backbone/tok_embed", normal_tensor(rng, vec![cfg.vocab, w], std))?;
    p.insert("backbone/pos_embed", normal_tensor(rng, vec![cfg.context, w], std))?;
    p.insert("backbone/query_embed", normal_tensor(rng, vec![cfg.queries, w], std))?;
    for l in 0..cfg.layers {
        let base = format!("backbone/layer{l}");
        insert_layer_norm(&mut p, &format!("{base}/ln1"), w);
        insert_linear(&mut p, &format!("{base}/attn_q"), w, w, std, rng);
        insert_linear(&mut p, &format!("{base}/attn_k"), w, w, std, rng);
        insert_linear(&mut p, &format!("{base}/attn_v"), w, w, std, rng);
        insert_linear(&mut p, &format!("{base}/attn_o"), w, w, std, rng);
        insert_layer_norm(&mut p, &format!("{base}/ln2"), w);
        insert_linear(&mut p, &format!("{base}/ffn_in"), w, w * cfg.ffn_mult, std, rng);
        insert_linear(&mut p, &format!("{base}/ffn_out"), w * cfg.ffn_mult, w, std, rng);
    }
    insert_layer_norm(&mut p, "backbone/final_ln", w);
    insert_linear(&mut p, "backbone/lm_head", w, cfg.vocab, std, rng);
    insert_linear(&mut p, "connector/fc0", w, cfg.connector_width, std, rng);
    insert_layer_norm(&mut p, "connector/ln0", cfg.connector_width);
    insert_linear(
        &mut p,
        "connector/fc1",
        cfg.connector_width,
        cfg.connector_width,
        std,
        rng,
    );
    insert_layer_norm(&mut p, "connector/ln1", cfg.connector_width);
    insert_zero_linear(&mut p, "film/gamma", w, cfg.connector_width);
    insert_zero_linear(&mut p, "film/beta", w, cfg.connector_width);
    Ok(p)
}

fn linear<T: Real>(g: &mut Graph<T>, params: &ParamSet, name: &str, x: NodeId) -> Result<NodeId> {
    let w = g.param(params, &format!("{name}/w"))?;
    let b = g.param(params, &format!("{name}/b"))?;
    Ok(g.affine(x, w, b)?)
}

/// Causal forward over [visual tokens | text tokens | optional queries].
/// Returns the post-norm hidden states and the offset of the text segment.
fn forward_states<T: Real>(
    g: &mut Graph<T>,
    cfg: &BackboneConfig,
    params: &ParamSet,
    views: &[ObsImage],
    ids: &[u32],
    with_queries: bool,
) -> Result<(NodeId, usize)> {
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
    let vis_len = cfg.vis_tokens();
    let q_len = if with_queries { cfg.queries } else { 0 };
    let total = vis_len + ids.len() + q_len;
    if total > cfg.context {
        return Err(ModelError::ContextOverflow {
            got: total,
            cap: cfg.context,
        });
    }

    let mut vis_parts = Vec::with_capacity(views.len());
    for view in views {
        let patches = g.input(view.patches(cfg.patch)?.cast());
        vis_parts.push(linear(g, params, "backbone/patch", patches)?);
    }
    let vis = g.concat_rows(&vis_parts)?;

    let tok_table = g.param(params, "backbone/tok_embed")?;
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let toks = g.embedding(tok_table, &idx)?;

    let pos = g.param(params, "backbone/pos_embed")?;
    let mut segments = Vec::with_capacity(3);
    let vis_pos = g.slice_rows(pos, 0, vis_len)?;
    segments.push(g.add(vis, vis_pos)?);
    let tok_pos = g.slice_rows(pos, vis_len, ids.len())?;
    segments.push(g.add(toks, tok_pos)?);
    if with_queries {
        let queries = g.param(params, "backbone/query_embed")?;
        let q_pos = g.slice_rows(pos, vis_len + ids.len(), cfg.queries)?;
        segments.push(g.add(queries, q_pos)?);
    }
    let mut x = g.concat_rows(&segments)?;
    for l in 0..cfg.layers {
        x = transformer_block(g, params, &format!("backbone/layer{l}"), x, cfg.heads, true)?;
    }
    let gain = g.param(params, "backbone/final_ln/g")?;
    let bias = g.param(params, "backbone/final_ln/b")?;
    let states = g.layer_norm(x, gain, bias, 1e-5)?;
    Ok((states, vis_len))
}

/// Mean cross-entropy over non-PAD positions of an `L×V` logit matrix.
pub fn ntp_loss<T: Real>(
    g: &mut Graph<T>,
    logits: NodeId,
    targets: &[u32],
    pad: u32,
) -> Result<NodeId> {
    let (l, v) = g.value(logits).dims2();
    if l != targets.len() {
        return Err(deskvla_autodiff::AdError::ShapeMismatch {
            op: "ntp_loss",
            lhs: vec![l, v],
            rhs: vec![targets.len()],
        }
        .into());
    }
    let supervised = targets.iter().filter(|&&t| t != pad).count();
    if supervised == 0 {
        return Err(ModelError::Contract(
            "ntp_loss with every position padded".into(),
        ));
    }
    let mut mask = vec![0.0f32; l * v];
    for (i, &t) in targets.iter().enumerate() {
        if t != pad {
            if t as usize >= v {
                return Err(ModelError::Contract(format!(
                    "target id {t} out of vocabulary of {v}"
                )));
            }
            mask[i * v + t as usize] = 1.0;
        }
    }
    let logp = g.log_softmax(logits);
    let mask_node = g.input(Tensor::new(vec![l, v], mask)?.cast());
    let picked = g.mul(logp, mask_node)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / supervised as f64))
}

/// `L = L_diff + α·L_ntp`.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    l_diff: NodeId,
    l_ntp: NodeId,
    alpha: f64,
) -> Result<NodeId> {
    for (name, node) in [("diffusion", l_diff), ("next-token", l_ntp)] {
        if !g.value(node).item().is_finite() {
            return Err(ModelError::Numeric(format!("non-finite {name} loss")));
        }
    }
    let scaled = g.scale(l_ntp, alpha);
    Ok(g.add(l_diff, scaled)?)
}

/// Connector: two linear layers, each followed by LayerNorm.
pub fn connector<T: Real>(g: &mut Graph<T>, params: &ParamSet, queries: NodeId) -> Result<NodeId> {
    let h0 = linear(g, params, "connector/fc0", queries)?;
    let g0 = g.param(params, "connector/ln0/g")?;
    let b0 = g.param(params, "connector/ln0/b")?;
    let n0 = g.layer_norm(h0, g0, b0, 1e-5)?;
    let h1 = linear(g, params, "connector/fc1", n0)?;
    let g1 = g.param(params, "connector/ln1/g")?;
    let b1 = g.param(params, "connector/ln1/b")?;
    Ok(g.layer_norm(h1, g1, b1, 1e-5)?)
}

/// Affine maps from pooled reasoning states to FiLM gamma/beta. Zero
/// initialization makes the initial modulation an identity.
pub fn film_from_reasoning<T: Real>(
    g: &mut Graph<T>,
    params: &ParamSet,
    pooled: NodeId,
) -> Result<(NodeId, NodeId)> {
    let gamma = linear(g, params, "film/gamma", pooled)?;
    let beta = linear(g, params, "film/beta", pooled)?;
    Ok((gamma, beta))
}

/// Teacher-forced training pass. The sequence is
/// `[BOS] instruction [SEP] phrase [EOS] [queries]`; next-token loss covers
/// the phrase plus EOS. Returns the loss node, FiLM nodes and connector
/// output so the expert can be stacked on the same tape.
pub struct TeacherForced {
    pub ntp: NodeId,
    pub film: (NodeId, NodeId),
    pub action_tokens: NodeId,
}

pub fn teacher_forced<T: Real>(
    g: &mut Graph<T>,
    cfg: &BackboneConfig,
    params: &ParamSet,
    vocab: &Vocabulary,
    views: &[ObsImage],
    instr_ids: &[u32],
    phrase_ids: &[u32],
) -> Result<TeacherForced> {
    if instr_ids.is_empty() {
        return Err(ModelError::Contract("empty instruction".into()));
    }
    let mut ids = Vec::with_capacity(instr_ids.len() + phrase_ids.len() + 3);
    ids.push(vocab.bos());
    ids.extend_from_slice(instr_ids);
    ids.push(vocab.sep());
    let sep_idx = ids.len() - 1;
    ids.extend_from_slice(phrase_ids);
    ids.push(vocab.eos());

    let (states, vis_len) = forward_states(g, cfg, params, views, &ids, true)?;
    // Positions sep..last-phrase predict phrase tokens then EOS.
    let span = phrase_ids.len() + 1;
    let pred_rows = g.slice_rows(states, vis_len + sep_idx, span)?;
    let logits = linear(g, params, "backbone/lm_head", pred_rows)?;
    let mut targets: Vec<u32> = phrase_ids.to_vec();
    targets.push(vocab.eos());
    let ntp = ntp_loss(g, logits, &targets, vocab.pad())?;

    let pooled_rows = g.slice_rows(states, vis_len + sep_idx, span)?;
    let pooled = g.mean_rows(pooled_rows);
    let film = film_from_reasoning(g, params, pooled)?;

    let q_rows = g.slice_rows(states, vis_len + ids.len(), cfg.queries)?;
    let action_tokens = connector(g, params, q_rows)?;
    Ok(TeacherForced {
        ntp,
        film,
        action_tokens,
    })
}

/// Decoded reasoning span with its pooled embedding and FiLM parameters.
#[derive(Debug, Clone)]
pub struct ReasoningOutput {
    pub token_ids: Vec<u32>,
    pub embedding: Tensor<f32>,
    pub film: (Tensor<f32>, Tensor<f32>),
}

/// Connector output: K action-query tokens in the expert's space.
#[derive(Debug, Clone)]
pub struct ConnectorOutput {
    pub action_embedding: Tensor<f32>,
}

/// Inference: greedily decode reasoning after the separator, then run one
/// more pass with the action queries appended. Deterministic given params.
pub fn forward_multimodal(
    cfg: &BackboneConfig,
    params: &ParamSet,
    vocab: &Vocabulary,
    views: &[ObsImage],
    instr_ids: &[u32],
) -> Result<(ReasoningOutput, ConnectorOutput)> {
    if instr_ids.is_empty() {
        return Err(ModelError::Contract("empty instruction".into()));
    }
    let mut ids = Vec::with_capacity(instr_ids.len() + cfg.reason_cap + 3);
    ids.push(vocab.bos());
    ids.extend_from_slice(instr_ids);
    ids.push(vocab.sep());
    let sep_idx = ids.len() - 1;

    let mut reasoning = Vec::new();
    for _ in 0..cfg.reason_cap {
        let mut g = Graph::<f32>::new();
        let (states, _) = forward_states(&mut g, cfg, params, views, &ids, false)?;
        let (rows, _) = g.value(states).dims2();
        let last = g.slice_rows(states, rows - 1, 1)?;
        let logits = linear(&mut g, params, "backbone/lm_head", last)?;
        let next = argmax(g.value(logits).data());
        ids.push(next as u32);
        reasoning.push(next as u32);
        if next as u32 == vocab.eos() {
            break;
        }
    }

    let mut g = Graph::<f32>::new();
    let (states, vis_len) = forward_states(&mut g, cfg, params, views, &ids, true)?;
    let span = ids.len() - sep_idx;
    let pooled_rows = g.slice_rows(states, vis_len + sep_idx, span)?;
    let pooled = g.mean_rows(pooled_rows);
    let (gamma, beta) = film_from_reasoning(&mut g, params, pooled)?;
    let q_rows = g.slice_rows(states, vis_len + ids.len(), cfg.queries)?;
    let action = connector(&mut g, params, q_rows)?;
    Ok((
        ReasoningOutput {
            token_ids: reasoning,
            embedding: g.value(pooled).clone(),
            film: (g.value(gamma).clone(), g.value(beta).clone()),
        },
        ConnectorOutput {
            action_embedding: g.value(action).clone(),
        },
    ))
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    let mut best_v = f32::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}
