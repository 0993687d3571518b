//! DDPM forward corruption, ε-prediction loss and the ancestral sampler,
//! specialised to action chunks.

use deskvla_autodiff::rng::DetRng;
use deskvla_autodiff::{Graph, NodeId, Real, Tensor};

use crate::embodiment::EmbodimentId;
use crate::{ModelError, Result};

/// β and ᾱ tables. Schedule math is kept in f64; chunk data stays f32.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// ᾱ before step `t`; 1 for t = 0 by convention.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(ModelError::Index(format!(
                "diffusion step {t} out of range 0..{}",
                self.steps()
            )));
        }
        Ok(())
    }
}

/// Linear β interpolation over `steps`, ᾱ as the exact running product.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(ModelError::Config("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(ModelError::Config(format!(
            "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for &b in &betas {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { betas, alpha_bar })
}

/// Default training schedule: 100 steps, β from 1e-4 to 2e-2.
pub fn default_schedule() -> NoiseSchedule {
    make_schedule(100, 1e-4, 2e-2).expect("valid defaults")
}

/// A horizon of normalized actions for one embodiment; the object diffused
/// by the expert.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    pub values: Tensor<f32>,
    pub embodiment: EmbodimentId,
}

impl ActionChunk {
    pub fn new(values: Tensor<f32>, embodiment: EmbodimentId) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(ModelError::Contract(format!(
                "action chunk must be H×D, got {:?}",
                values.shape()
            )));
        }
        if !values.all_finite() {
            return Err(ModelError::Numeric("non-finite action chunk".into()));
        }
        Ok(Self { values, embodiment })
    }

    pub fn horizon(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn action_dim(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Forward corruption: `a_t = √ᾱ_t·a0 + √(1−ᾱ_t)·ε`.
pub fn q_sample(
    a0: &ActionChunk,
    t: usize,
    eps: &Tensor<f32>,
    schedule: &NoiseSchedule,
) -> Result<ActionChunk> {
    schedule.check_t(t)?;
    if eps.shape() != a0.values.shape() {
        return Err(deskvla_autodiff::AdError::ShapeMismatch {
            op: "q_sample",
            lhs: a0.values.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        }
        .into());
    }
    let ab = schedule.alpha_bar(t);
    let signal = ab.sqrt() as f32;
    let noise = (1.0 - ab).sqrt() as f32;
    let data = a0
        .values
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&a, &e)| signal * a + noise * e)
        .collect();
    Ok(ActionChunk {
        values: Tensor::new(a0.values.shape().to_vec(), data)?,
        embodiment: a0.embodiment.clone(),
    })
}

/// Mean squared error between predicted and true noise.
pub fn diffusion_loss(eps_hat: &Tensor<f32>, eps: &Tensor<f32>) -> Result<f32> {
    if eps_hat.shape() != eps.shape() {
        return Err(deskvla_autodiff::AdError::ShapeMismatch {
            op: "diffusion_loss",
            lhs: eps_hat.shape().to_vec(),
            rhs: eps.shape().to_vec(),
        }
        .into());
    }
    let n = eps.len().max(1) as f32;
    Ok(eps_hat
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f32>()
        / n)
}

/// Differentiable ε-MSE on the tape, with an optional 0/1 mask over entries
/// (padded chunk tail). The mean runs over unmasked entries.
pub fn diffusion_loss_graph<T: Real>(
    g: &mut Graph<T>,
    eps_hat: NodeId,
    eps: NodeId,
    mask: Option<&Tensor<f32>>,
) -> Result<NodeId> {
    if g.value(eps_hat).shape() != g.value(eps).shape() {
        return Err(deskvla_autodiff::AdError::ShapeMismatch {
            op: "diffusion_loss",
            lhs: g.value(eps_hat).shape().to_vec(),
            rhs: g.value(eps).shape().to_vec(),
        }
        .into());
    }
    let diff = g.sub(eps_hat, eps)?;
    let sq = g.mul(diff, diff)?;
    match mask {
        None => Ok(g.mean(sq)),
        Some(m) => {
            let count: f32 = m.data().iter().sum();
            if count <= 0.0 {
                return Err(ModelError::Contract("loss mask selects nothing".into()));
            }
            let mnode = g.input(m.cast());
            let masked = g.mul(sq, mnode)?;
            let total = g.sum(masked);
            Ok(g.scale(total, 1.0 / f64::from(count)))
        }
    }
}

/// One ancestral step: posterior mean `(a_t − β_t/√(1−ᾱ_t)·ε̂)/√(1−β_t)`
/// plus `σ_t·z` with `σ_t² = β_t(1−ᾱ_{t−1})/(1−ᾱ_t)` and `σ_0 = 0`.
pub fn ddpm_step(
    a_t: &ActionChunk,
    eps_hat: &Tensor<f32>,
    t: usize,
    schedule: &NoiseSchedule,
    z: &Tensor<f32>,
) -> Result<ActionChunk> {
    schedule.check_t(t)?;
    if eps_hat.shape() != a_t.values.shape() || z.shape() != a_t.values.shape() {
        return Err(deskvla_autodiff::AdError::ShapeMismatch {
            op: "ddpm_step",
            lhs: a_t.values.shape().to_vec(),
            rhs: eps_hat.shape().to_vec(),
        }
        .into());
    }
    if t == 0 && z.data().iter().any(|&v| v != 0.0) {
        return Err(ModelError::Contract(
            "ddpm_step at t = 0 requires z = 0".into(),
        ));
    }
    let beta = schedule.beta(t);
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar_prev(t);
    let eps_coef = (beta / (1.0 - ab).sqrt()) as f32;
    let inv_sqrt_alpha = (1.0 / (1.0 - beta).sqrt()) as f32;
    let sigma = if t == 0 {
        0.0
    } else {
        (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt()
    } as f32;
    let data = a_t
        .values
        .data()
        .iter()
        .zip(eps_hat.data())
        .zip(z.data())
        .map(|((&a, &e), &n)| inv_sqrt_alpha * (a - eps_coef * e) + sigma * n)
        .collect();
    Ok(ActionChunk {
        values: Tensor::new(a_t.values.shape().to_vec(), data)?,
        embodiment: a_t.embodiment.clone(),
    })
}

/// Run the full reverse chain from seeded Gaussian noise. `denoiser` is
/// called with the current chunk and step index and must return ε̂ of the
/// same shape. Deterministic given the rng stream.
pub fn sample_chunk<F>(
    mut denoiser: F,
    embodiment: &EmbodimentId,
    horizon: usize,
    action_dim: usize,
    schedule: &NoiseSchedule,
    rng: &mut DetRng,
) -> Result<ActionChunk>
where
    F: FnMut(&ActionChunk, usize) -> Result<Tensor<f32>>,
{
    let n = horizon * action_dim;
    let init: Vec<f32> = (0..n).map(|_| rng.gaussian() as f32).collect();
    let mut chunk = ActionChunk {
        values: Tensor::new(vec![horizon, action_dim], init)?,
        embodiment: embodiment.clone(),
    };
    for t in (0..schedule.steps()).rev() {
        let eps_hat = denoiser(&chunk, t)?;
        if !eps_hat.all_finite() {
            return Err(ModelError::Numeric(format!(
                "denoiser produced non-finite output at step {t}"
            )));
        }
        let z = if t == 0 {
            Tensor::zeros(vec![horizon, action_dim])
        } else {
            let data: Vec<f32> = (0..n).map(|_| rng.gaussian() as f32).collect();
            Tensor::new(vec![horizon, action_dim], data)?
        };
        chunk = ddpm_step(&chunk, &eps_hat, t, schedule, &z)?;
    }
    Ok(chunk)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chunk(vals: &[f32], emb: &str) -> ActionChunk {
        ActionChunk::new(
            Tensor::new(vec![1, vals.len()], vals.to_vec()).unwrap(),
            EmbodimentId::new(emb),
        )
        .unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.1, 0.1).unwrap();
        assert_eq!(s.steps(), 1);
        assert!((s.alpha_bar(0) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn two_step_cumulative_product() {
        let s = make_schedule(2, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(0) - 0.9).abs() < 1e-12);
        assert!((s.alpha_bar(1) - 0.81).abs() < 1e-12);
    }

    #[test]
    fn default_schedule_shape() {
        let s = default_schedule();
        assert_eq!(s.steps(), 100);
        for t in 1..s.steps() {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
        }
        assert!(s.alpha_bar(99) < 0.5, "ᾱ_T = {}", s.alpha_bar(99));
    }

    #[test]
    fn schedule_bounds_validated() {
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 1.0).is_err());
    }

    #[test]
    fn q_sample_zero_noise_scales_signal() {
        let s = make_schedule(10, 0.05, 0.05).unwrap();
        let a0 = chunk(&[2.0, -1.0], "e");
        let eps = Tensor::zeros(vec![1, 2]);
        let at = q_sample(&a0, 3, &eps, &s).unwrap();
        let scale = s.alpha_bar(3).sqrt() as f32;
        assert!((at.values.data()[0] - 2.0 * scale).abs() < 1e-6);
        assert!((at.values.data()[1] + scale).abs() < 1e-6);
    }

    #[test]
    fn q_sample_zero_signal_scales_noise() {
        let s = make_schedule(10, 0.05, 0.05).unwrap();
        let a0 = chunk(&[0.0, 0.0], "e");
        let eps = Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let at = q_sample(&a0, 5, &eps, &s).unwrap();
        let scale = (1.0 - s.alpha_bar(5)).sqrt() as f32;
        assert!((at.values.data()[0] - scale).abs() < 1e-6);
        assert!((at.values.data()[1] + 2.0 * scale).abs() < 1e-6);
    }

    #[test]
    fn q_sample_direct_arithmetic() {
        // ᾱ = 0.25: a_t = 0.5·1 + √0.75·1 ≈ 1.3660.
        let s = make_schedule(1, 0.75, 0.75).unwrap();
        let a0 = chunk(&[1.0], "e");
        let eps = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let at = q_sample(&a0, 0, &eps, &s).unwrap();
        assert!((at.values.data()[0] - 1.366_025_4).abs() < 1e-5);
    }

    #[test]
    fn q_sample_t_out_of_range() {
        let s = make_schedule(4, 0.1, 0.1).unwrap();
        let a0 = chunk(&[1.0], "e");
        let eps = Tensor::zeros(vec![1, 1]);
        assert!(matches!(
            q_sample(&a0, 4, &eps, &s),
            Err(ModelError::Index(_))
        ));
    }

    #[test]
    fn loss_examples() {
        let a = Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap();
        assert_eq!(diffusion_loss(&a, &a).unwrap(), 0.0);
        let b = Tensor::new(vec![1, 2], vec![2.0, 4.0]).unwrap();
        assert_eq!(diffusion_loss(&b, &a).unwrap(), 1.0);
        let zero = Tensor::zeros(vec![1, 2]);
        assert_eq!(diffusion_loss(&zero, &a).unwrap(), 5.0);
    }

    #[test]
    fn loss_shape_mismatch() {
        let a = Tensor::zeros(vec![1, 2]);
        let b = Tensor::zeros(vec![2, 1]);
        assert!(diffusion_loss(&a, &b).is_err());
    }

    #[test]
    fn one_step_roundtrip_recovers_a0() {
        // With the oracle ε and T = 1 the posterior mean inverts q_sample.
        let s = make_schedule(1, 0.2, 0.2).unwrap();
        let a0 = chunk(&[0.7, -0.4, 0.1], "e");
        let eps = Tensor::new(vec![1, 3], vec![0.3, -1.2, 0.8]).unwrap();
        let at = q_sample(&a0, 0, &eps, &s).unwrap();
        let z = Tensor::zeros(vec![1, 3]);
        let rec = ddpm_step(&at, &eps, 0, &s, &z).unwrap();
        for (r, a) in rec.values.data().iter().zip(a0.values.data()) {
            assert!((r - a).abs() < 1e-5, "{r} vs {a}");
        }
    }

    #[test]
    fn vanishing_beta_keeps_chunk() {
        let s = make_schedule(3, 1e-9, 1e-9).unwrap();
        let at = chunk(&[0.5, -0.5], "e");
        let eps0 = Tensor::zeros(vec![1, 2]);
        let z = Tensor::zeros(vec![1, 2]);
        let prev = ddpm_step(&at, &eps0, 1, &s, &z).unwrap();
        for (p, a) in prev.values.data().iter().zip(at.values.data()) {
            assert!((p - a).abs() < 1e-6);
        }
    }

    #[test]
    fn nonzero_z_at_t0_rejected() {
        let s = make_schedule(2, 0.1, 0.1).unwrap();
        let at = chunk(&[0.5], "e");
        let eps0 = Tensor::zeros(vec![1, 1]);
        let z = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        assert!(matches!(
            ddpm_step(&at, &eps0, 0, &s, &z),
            Err(ModelError::Contract(_))
        ));
    }

    #[test]
    fn sampler_is_deterministic_per_seed() {
        let s = make_schedule(8, 1e-3, 2e-2).unwrap();
        let emb = EmbodimentId::new("e");
        let run = |seed| {
            let mut rng = DetRng::new(seed);
            sample_chunk(
                |_, _| Ok(Tensor::zeros(vec![2, 3])),
                &emb,
                2,
                3,
                &s,
                &mut rng,
            )
            .unwrap()
        };
        assert_eq!(run(9).values, run(9).values);
        assert_ne!(run(9).values, run(10).values);
    }

    #[test]
    fn sampler_surfaces_nonfinite_denoiser_output() {
        let s = make_schedule(4, 1e-3, 2e-2).unwrap();
        let emb = EmbodimentId::new("e");
        let mut rng = DetRng::new(1);
        let err = sample_chunk(
            |_, _| Ok(Tensor::new(vec![1, 1], vec![f32::NAN]).unwrap()),
            &emb,
            1,
            1,
            &s,
            &mut rng,
        )
        .unwrap_err();
        assert!(err.to_string().contains("step 3"), "{err}");
    }

    #[test]
    fn alpha_bar_matches_f64_recomputation() {
        let s = make_schedule(100, 1e-4, 2e-2).unwrap();
        let mut acc = 1.0f64;
        for t in 0..100 {
            acc *= 1.0 - s.beta(t);
            assert!((s.alpha_bar(t) - acc).abs() < 1e-15);
        }
    }
}
