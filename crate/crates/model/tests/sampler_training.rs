//! Training-based sampler oracles: a tiny trained denoiser must reproduce
//! known target distributions through the full reverse chain.

use std::collections::BTreeMap;

use deskvla_autodiff::rng::DetRng;
use deskvla_autodiff::{Graph, ParamSet, Tensor};
use deskvla_model::diffusion::{
    default_schedule, diffusion_loss_graph, q_sample, sample_chunk, ActionChunk, NoiseSchedule,
};
use deskvla_model::embodiment::EmbodimentId;
use deskvla_model::expert::time_embedding;
use deskvla_model::init::insert_linear;

const TIME_DIM: usize = 8;
const WIDTH: usize = 32;

/// Scalar ε-predictor: [a_t | time embedding] → MLP → ε̂.
fn init_mlp(rng: &mut DetRng) -> ParamSet {
    let mut p = ParamSet::new();
    insert_linear(&mut p, "fc0", 1 + TIME_DIM, WIDTH, 0.3, rng);
    insert_linear(&mut p, "fc1", WIDTH, WIDTH, 0.3, rng);
    insert_linear(&mut p, "fc2", WIDTH, 1, 0.3, rng);
    p
}

fn mlp_forward(
    g: &mut Graph<f32>,
    params: &ParamSet,
    a_t: &[f32],
    ts: &[usize],
) -> deskvla_autodiff::NodeId {
    let n = a_t.len();
    let mut rows = Vec::with_capacity(n * (1 + TIME_DIM));
    for (i, &a) in a_t.iter().enumerate() {
        rows.push(a);
        rows.extend_from_slice(time_embedding(ts[i], TIME_DIM).data());
    }
    let x = g.input(Tensor::new(vec![n, 1 + TIME_DIM], rows).unwrap());
    let mut h = x;
    for (i, name) in ["fc0", "fc1"].iter().enumerate() {
        let w = g.param(params, &format!("{name}/w")).unwrap();
        let b = g.param(params, &format!("{name}/b")).unwrap();
        let lin = g.affine(h, w, b).unwrap();
        h = if i < 2 { g.gelu(lin) } else { lin };
    }
    let w = g.param(params, "fc2/w").unwrap();
    let b = g.param(params, "fc2/b").unwrap();
    g.affine(h, w, b).unwrap()
}

/// Test-local Adam so the oracle stays independent of the trainer crate.
struct Adam {
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    t: usize,
}

impl Adam {
    fn new() -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor<f32>>, lr: f32) {
        self.t += 1;
        let (b1, b2, eps) = (0.9f32, 0.999f32, 1e-8f32);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (name, grad) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let mut tensor = params.get(name).unwrap().clone();
            for ((p, &g), (mi, vi)) in tensor
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                *p -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
            }
            params.set(name, tensor).unwrap();
        }
    }
}

fn train_scalar_denoiser(
    targets: &[f32],
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> ParamSet {
    let mut rng = DetRng::new(seed);
    let mut params = init_mlp(&mut rng);
    let mut adam = Adam::new();
    let batch = 64;
    let emb = EmbodimentId::new("scalar");
    for _ in 0..steps {
        let mut a_t = Vec::with_capacity(batch);
        let mut ts = Vec::with_capacity(batch);
        let mut eps_all = Vec::with_capacity(batch);
        for _ in 0..batch {
            let a0 = targets[rng.below(targets.len())];
            let t = rng.below(schedule.steps());
            let eps = rng.gaussian() as f32;
            let chunk = ActionChunk::new(
                Tensor::new(vec![1, 1], vec![a0]).unwrap(),
                emb.clone(),
            )
            .unwrap();
            let noised = q_sample(
                &chunk,
                t,
                &Tensor::new(vec![1, 1], vec![eps]).unwrap(),
                schedule,
            )
            .unwrap();
            a_t.push(noised.values.data()[0]);
            ts.push(t);
            eps_all.push(eps);
        }
        let mut g = Graph::<f32>::new();
        let eps_hat = mlp_forward(&mut g, &params, &a_t, &ts);
        let eps_node = g.input(Tensor::new(vec![batch, 1], eps_all).unwrap());
        let loss = diffusion_loss_graph(&mut g, eps_hat, eps_node, None).unwrap();
        g.backward(loss).unwrap();
        let grads = g.param_grads();
        adam.step(&mut params, &grads, 2e-3);
    }
    params
}

fn sample_scalar(params: &ParamSet, schedule: &NoiseSchedule, rng: &mut DetRng) -> f32 {
    let emb = EmbodimentId::new("scalar");
    let chunk = sample_chunk(
        |a_t, t| {
            let mut g = Graph::<f32>::new();
            let out = mlp_forward(&mut g, params, &[a_t.values.data()[0]], &[t]);
            Ok(g.value(out).clone())
        },
        &emb,
        1,
        1,
        schedule,
        rng,
    )
    .unwrap();
    chunk.values.data()[0]
}

#[test]
fn two_point_dataset_sampler_recovers_both_modes() {
    let schedule = default_schedule();
    let params = train_scalar_denoiser(&[-1.0, 1.0], &schedule, 1200, 17);
    let mut rng = DetRng::new(99);
    let n = 2000;
    let mut near_pos = 0usize;
    let mut near_neg = 0usize;
    for _ in 0..n {
        let s = sample_scalar(&params, &schedule, &mut rng);
        if (s - 1.0).abs() < 0.15 {
            near_pos += 1;
        } else if (s + 1.0).abs() < 0.15 {
            near_neg += 1;
        }
    }
    let mass_pos = near_pos as f64 / n as f64;
    let mass_neg = near_neg as f64 / n as f64;
    assert!(
        (mass_pos - 0.5).abs() <= 0.1,
        "mass near +1 was {mass_pos}"
    );
    assert!(
        (mass_neg - 0.5).abs() <= 0.1,
        "mass near -1 was {mass_neg}"
    );
}

#[test]
fn constant_dataset_sampler_concentrates_on_the_constant() {
    let schedule = default_schedule();
    let c = 0.4f32;
    let params = train_scalar_denoiser(&[c], &schedule, 2500, 23);
    let mut rng = DetRng::new(5);
    for _ in 0..64 {
        let s = sample_scalar(&params, &schedule, &mut rng);
        assert!((s - c).abs() < 0.1, "sample {s} far from {c}");
    }
}

