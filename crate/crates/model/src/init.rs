//! Weight initialization helpers.

use deskvla_autodiff::rng::DetRng;
use deskvla_autodiff::{ParamSet, Tensor};

pub fn normal_tensor(rng: &mut DetRng, shape: Vec<usize>, std: f64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| (rng.gaussian() * std) as f32).collect();
    Tensor::new(shape, data).expect("sized")
}

pub fn zeros_tensor(shape: Vec<usize>) -> Tensor<f32> {
    Tensor::zeros(shape)
}

pub fn ones_tensor(shape: Vec<usize>) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, vec![1.0; n]).expect("sized")
}

/// `name/w` gaussian at `std`, `name/b` zeros.
pub fn insert_linear(
    params: &mut ParamSet,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    std: f64,
    rng: &mut DetRng,
) {
    params
        .insert(&format!("{name}/w"), normal_tensor(rng, vec![fan_in, fan_out], std))
        .expect("fresh name");
    params
        .insert(&format!("{name}/b"), zeros_tensor(vec![fan_out]))
        .expect("fresh name");
}

/// Zero-initialized linear map (identity FiLM, silent heads).
pub fn insert_zero_linear(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize) {
    params
        .insert(&format!("{name}/w"), zeros_tensor(vec![fan_in, fan_out]))
        .expect("fresh name");
    params
        .insert(&format!("{name}/b"), zeros_tensor(vec![fan_out]))
        .expect("fresh name");
}

/// LayerNorm gain/bias pair at identity.
pub fn insert_layer_norm(params: &mut ParamSet, name: &str, width: usize) {
    params
        .insert(&format!("{name}/g"), ones_tensor(vec![width]))
        .expect("fresh name");
    params
        .insert(&format!("{name}/b"), zeros_tensor(vec![width]))
        .expect("fresh name");
}

/// Entries of a linear pair, for analytic parameter counts.
pub const fn linear_count(fan_in: usize, fan_out: usize) -> usize {
    fan_in * fan_out + fan_out
}
