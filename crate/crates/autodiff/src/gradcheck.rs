//! Central finite-difference oracle for analytic gradients.

use crate::{AdError, Graph, NodeId, ParamSet, Tensor};

/// Compare the tape's gradients against central finite differences, in
/// 64-bit. `build` must construct a scalar-valued graph from the parameter
/// set; it is re-invoked for every perturbed evaluation, so it has to be a
/// pure function of `params`. Generic over the caller's error type so model
/// builders plug in directly.
///
/// Returns `max over parameter entries of |analytic − numeric| / max(1, |analytic|)`.
pub fn grad_check<E, F>(params: &ParamSet, h: f64, mut build: F) -> Result<f64, E>
where
    E: From<AdError>,
    F: FnMut(&mut Graph<f64>, &ParamSet) -> Result<NodeId, E>,
{
    let mut graph = Graph::<f64>::new();
    let loss = build(&mut graph, params)?;
    if !graph.value(loss).is_scalar() {
        return Err(AdError::Contract(format!(
            "grad_check needs a scalar objective, got shape {:?}",
            graph.value(loss).shape()
        ))
        .into());
    }
    graph.backward(loss).map_err(E::from)?;
    let analytic = graph.param_grads();

    let mut eval = |params: &ParamSet| -> Result<f64, E> {
        let mut g = Graph::<f64>::new();
        let out = build(&mut g, params)?;
        Ok(g.value(out).item())
    };

    let mut max_err = 0.0f64;
    for (name, grad) in &analytic {
        let base = params
            .get(name)
            .ok_or_else(|| AdError::MissingParam(name.clone()))
            .map_err(E::from)?
            .clone();
        for i in 0..base.len() {
            let v = f64::from(base.data()[i]);
            let mut data_p: Vec<f32> = base.data().to_vec();
            let mut data_m: Vec<f32> = base.data().to_vec();
            data_p[i] = (v + h) as f32;
            data_m[i] = (v - h) as f32;
            // Steps actually realised after the f32 round-trip.
            let hp = f64::from(data_p[i]) - v;
            let hm = v - f64::from(data_m[i]);
            if hp + hm == 0.0 {
                return Err(AdError::Numeric(format!(
                    "parameter `{name}`[{i}] = {v} cannot be perturbed by h = {h}"
                ))
                .into());
            }
            let mut plus = params.clone();
            plus.set(name, Tensor::new(base.shape().to_vec(), data_p).map_err(E::from)?)
                .map_err(E::from)?;
            let mut minus = params.clone();
            minus
                .set(name, Tensor::new(base.shape().to_vec(), data_m).map_err(E::from)?)
                .map_err(E::from)?;
            let numeric = (eval(&plus)? - eval(&minus)?) / (hp + hm);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}
