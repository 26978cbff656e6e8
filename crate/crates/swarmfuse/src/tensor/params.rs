//! Named parameter collections and the SGD update.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor};
use crate::error::{Error, Result};

/// Named, trainable tensors. Iteration order is the sorted name order, so
/// checkpoints and updates are deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.entries.insert(name.to_string(), t.with_grad());
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Bind a named parameter into a graph as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph, name: &str) -> Result<super::Var> {
        let t = self
            .entries
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        Ok(g.param(name, t))
    }

    /// Allocate zeroed gradient buffers for every parameter.
    pub fn zero_grads(&mut self) {
        for t in self.entries.values_mut() {
            t.zero_grad();
        }
    }

    /// Accumulate the graph's named leaf gradients into this set.
    pub fn absorb_grads(&mut self, g: &Graph) -> Result<()> {
        for (name, grad) in g.param_grads() {
            let t = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter `{name}`")))?;
            t.accumulate_grad(grad);
        }
        Ok(())
    }

    /// Scale all gradient buffers, e.g. to average over a batch.
    pub fn scale_grads(&mut self, factor: f32) {
        for t in self.entries.values_mut() {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    /// Multiply every parameter value by a constant factor.
    pub fn scale_values(&mut self, factor: f32) {
        for t in self.entries.values_mut() {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }

    pub(crate) fn entry_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }
}

/// Plain gradient-descent update: `p <- p - lr * grad`, then zero the grads.
///
/// Fails, naming the parameter, when any entry has no populated gradient.
pub fn sgd_step(params: &mut ParamSet, lr: f32) -> Result<()> {
    for (name, t) in &params.entries {
        if t.grad().is_none() {
            return Err(Error::MissingGradient(name.clone()));
        }
        debug_assert_eq!(t.grad().unwrap().len(), t.numel(), "grad shape for {name}");
    }
    for t in params.entries.values_mut() {
        let grad = t.grad().unwrap().to_vec();
        for (p, g) in t.data_mut().iter_mut().zip(&grad) {
            *p -= lr * g;
        }
        t.clear_grad();
    }
    Ok(())
}

/// SGD with classical momentum. Velocities are blended into the gradient
/// buffers and the parameter update is delegated to [`sgd_step`].
#[derive(Debug, Clone)]
pub struct MomentumSgd {
    pub lr: f32,
    pub momentum: f32,
    velocity: BTreeMap<String, Vec<f32>>,
}

impl MomentumSgd {
    pub fn new(lr: f32, momentum: f32) -> Self {
        MomentumSgd { lr, momentum, velocity: BTreeMap::new() }
    }

    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        for (name, t) in params.entries.iter_mut() {
            let grad = t
                .grad_mut()
                .ok_or_else(|| Error::MissingGradient(name.clone()))?;
            let vel = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            for (v, g) in vel.iter_mut().zip(grad.iter_mut()) {
                *v = self.momentum * *v + *g;
                *g = *v;
            }
        }
        sgd_step(params, self.lr)
    }
}

/// Insert a He-initialized conv weight under `name`.
pub fn he_conv_init_into(params: &mut ParamSet, name: &str, shape: &[usize], rng: &mut ChaCha8Rng) {
    let t = he_conv_init(rng, shape);
    params.insert(name, t);
}

/// He-style normal initialization for a conv weight `[f, c, kh, kw]`.
pub fn he_conv_init(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in as f32).sqrt();
    let data: Vec<f32> = (0..shape.iter().product())
        .map(|_| normal_sample(rng) * std)
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

// Box-Muller from explicit uniforms; keeps the draw count per value fixed
// so parameter layouts can change without disturbing unrelated streams.
fn normal_sample(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn sgd_step_applies_update_and_zeroes() {
        let mut params = ParamSet::new();
        params.insert("p", Tensor::from_vec(&[1], vec![1.0]).unwrap());
        params.entry_mut("p").unwrap().accumulate_grad(&[2.0]);
        sgd_step(&mut params, 0.1).unwrap();
        assert_eq!(params.get("p").unwrap().data(), &[0.8]);
        assert_eq!(params.get("p").unwrap().grad().unwrap(), &[0.0]);
    }

    #[test]
    fn sgd_step_zero_lr_is_identity() {
        let mut params = ParamSet::new();
        params.insert("p", Tensor::from_vec(&[2], vec![1.5, -0.5]).unwrap());
        params.zero_grads();
        params.entry_mut("p").unwrap().accumulate_grad(&[3.0, 3.0]);
        sgd_step(&mut params, 0.0).unwrap();
        assert_eq!(params.get("p").unwrap().data(), &[1.5, -0.5]);
    }

    #[test]
    fn sgd_step_missing_grad_names_parameter() {
        let mut params = ParamSet::new();
        params.insert("enc.w1", Tensor::zeros(&[3]));
        let err = sgd_step(&mut params, 0.1).unwrap_err();
        assert!(err.to_string().contains("enc.w1"), "{err}");
    }

    #[test]
    fn ten_steps_on_square_follow_closed_form() {
        // f(p) = p^2, grad 2p, lr 0.1: p <- 0.8 p, so p_10 = 0.8^10.
        let mut params = ParamSet::new();
        params.insert("p", Tensor::from_vec(&[1], vec![1.0]).unwrap());
        for _ in 0..10 {
            let p = params.get("p").unwrap().data()[0];
            params.zero_grads();
            params.entry_mut("p").unwrap().accumulate_grad(&[2.0 * p]);
            sgd_step(&mut params, 0.1).unwrap();
        }
        let p = params.get("p").unwrap().data()[0];
        assert!((p - 0.8f32.powi(10)).abs() < 1e-6, "p = {p}");
    }

    #[test]
    fn momentum_accumulates_velocity() {
        // Constant grad 1, momentum 0.9, lr 1: steps of 1, 1.9, 2.71...
        let mut params = ParamSet::new();
        params.insert("p", Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let mut opt = MomentumSgd::new(1.0, 0.9);
        let mut expect = 0.0f32;
        let mut vel = 0.0f32;
        for _ in 0..3 {
            params.zero_grads();
            params.entry_mut("p").unwrap().accumulate_grad(&[1.0]);
            opt.step(&mut params).unwrap();
            vel = 0.9 * vel + 1.0;
            expect -= vel;
            assert!((params.get("p").unwrap().data()[0] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn he_init_is_seed_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        let ta = he_conv_init(&mut a, &[4, 3, 3, 3]);
        let tb = he_conv_init(&mut b, &[4, 3, 3, 3]);
        assert_eq!(ta.data(), tb.data());
    }
}
