//! AdamW with decoupled weight decay and global-norm gradient clipping.

use std::collections::BTreeMap;

use deskvla_autodiff::{ParamSet, Tensor};

use crate::stage::StageConfig;
use crate::{Result, TrainError};

const ADAM_EPS: f32 = 1e-8;

/// First/second moments per parameter; entries exist only for parameters
/// that have received gradients (frozen ones never do).
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    pub step: usize,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn has_moments(&self, name: &str) -> bool {
        self.m.contains_key(name)
    }
}

/// Global L2 norm over all gradient entries, in a fixed order.
pub fn global_grad_norm(grads: &BTreeMap<String, Tensor<f32>>) -> f64 {
    let mut acc = 0.0f64;
    for g in grads.values() {
        for &x in g.data() {
            acc += f64::from(x) * f64::from(x);
        }
    }
    acc.sqrt()
}

/// One bias-corrected AdamW step at learning rate `lr`. Gradients are
/// clipped to the configured global norm first; frozen parameters are left
/// untouched because no gradient ever reaches them.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut OptimizerState,
    cfg: &StageConfig,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        if let Some(bad) = g.data().iter().find(|v| !v.is_finite()) {
            let _ = bad;
            return Err(TrainError::NanGradient {
                param: name.clone(),
                step: state.step,
            });
        }
    }
    state.step += 1;
    let norm = global_grad_norm(grads);
    let scale = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
        (cfg.grad_clip / norm) as f32
    } else {
        1.0
    };
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    let lr = lr as f32;
    let wd = cfg.weight_decay as f32;
    for (name, grad) in grads {
        if params.is_frozen(name) {
            continue;
        }
        let Some(current) = params.get(name) else {
            return Err(TrainError::Config(format!(
                "gradient for unknown parameter `{name}`"
            )));
        };
        let mut tensor = current.clone();
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; grad.len()]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; grad.len()]);
        for ((p, &g_raw), (mi, vi)) in tensor
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            let g = g_raw * scale;
            *mi = b1 * *mi + (1.0 - b1) * g;
            *vi = b2 * *vi + (1.0 - b2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + wd * *p);
        }
        params.set(name, tensor)?;
    }
    Ok(())
}
