//! AdamW with decoupled weight decay.

use crate::error::{NumericsError, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub config: AdamWConfig,
    /// Number of completed updates.
    pub step: u64,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn first_moment(&self, i: usize) -> Option<&Tensor<T>> {
        self.first.get(i).and_then(Option::as_ref)
    }

    pub fn second_moment(&self, i: usize) -> Option<&Tensor<T>> {
        self.second.get(i).and_then(Option::as_ref)
    }

    fn slot(&mut self, i: usize, shape: &[usize]) -> Result<(&mut Tensor<T>, &mut Tensor<T>)> {
        if self.first.len() <= i {
            self.first.resize(i + 1, None);
            self.second.resize(i + 1, None);
        }
        let m = self.first[i].get_or_insert_with(|| Tensor::zeros(shape));
        if m.shape() != shape {
            return Err(NumericsError::Shape(format!(
                "moment {i} has shape {:?}, parameter {:?}",
                m.shape(),
                shape
            )));
        }
        let v = self.second[i].get_or_insert_with(|| Tensor::zeros(shape));
        Ok((m, v))
    }
}

fn update<T: Real>(p: &mut [T], g: &[T], m: &mut [T], v: &mut [T], step: u64, c: &AdamWConfig) {
    let b1 = T::lit(c.beta1);
    let b2 = T::lit(c.beta2);
    let lr = T::lit(c.lr);
    let eps = T::lit(c.eps);
    let decay = T::one() - T::lit(c.lr * c.weight_decay);
    let bc1 = T::lit(1.0 - c.beta1.powi(step as i32));
    let bc2 = T::lit(1.0 - c.beta2.powi(step as i32));
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (T::one() - b1) * g[i];
        v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        p[i] = p[i] * decay - lr * mhat / (vhat.sqrt() + eps);
    }
}

/// One AdamW update over parallel lists of parameters and gradients.
pub fn adamw_step<T: Real>(params: &mut [Tensor<T>], grads: &[Tensor<T>], state: &mut OptimizerState<T>) -> Result<()> {
    if params.len() != grads.len() {
        return Err(NumericsError::Shape(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(NumericsError::Shape(format!(
                "parameter {i} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let step = state.step;
    let config = state.config;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let shape = p.shape().to_vec();
        let (m, v) = state.slot(i, &shape)?;
        update(p.data_mut(), g.data(), m.data_mut(), v.data_mut(), step, &config);
    }
    Ok(())
}

/// Updates every learnable tensor in `store` that holds a gradient. Tensors
/// without a gradient buffer are left untouched, as are their moments.
pub fn adamw_step_store<T: Real>(store: &mut ParamStore<T>, state: &mut OptimizerState<T>) -> Result<()> {
    state.step += 1;
    let step = state.step;
    let config = state.config;
    for (id, p) in store.iter_mut() {
        if !p.value.requires_grad() {
            continue;
        }
        let Some(g) = p.grad.as_ref() else { continue };
        let shape = p.value.shape().to_vec();
        let (m, v) = state.slot(id.0, &shape)?;
        update(p.value.data_mut(), g.data(), m.data_mut(), v.data_mut(), step, &config);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: wd,
            ..Default::default()
        }
    }

    #[test]
    fn zero_grad_without_decay_is_identity() {
        let mut p = vec![Tensor::<f64>::from_fn([4], |i| i as f64 - 1.5)];
        let before = p.clone();
        let mut s = OptimizerState::new(cfg(0.1, 0.0));
        adamw_step(&mut p, &[Tensor::zeros([4])], &mut s).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_grad_with_decay_scales_parameters() {
        let mut p = vec![Tensor::<f64>::from_fn([3], |i| i as f64 + 1.0)];
        let mut s = OptimizerState::new(cfg(0.1, 0.5));
        adamw_step(&mut p, &[Tensor::zeros([3])], &mut s).unwrap();
        for (i, v) in p[0].data().iter().enumerate() {
            assert!((v - (i as f64 + 1.0) * (1.0 - 0.05)).abs() < 1e-15);
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = v̂ = 1 after one step, so the update is lr / (1 + eps).
        let mut p = vec![Tensor::new([1], vec![1.0f64]).unwrap()];
        let g = vec![Tensor::new([1], vec![1.0f64]).unwrap()];
        let mut s = OptimizerState::new(cfg(0.1, 0.0));
        adamw_step(&mut p, &g, &mut s).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![Tensor::<f64>::zeros([2])];
        let mut s = OptimizerState::new(cfg(0.1, 0.0));
        assert!(adamw_step(&mut p, &[Tensor::zeros([3])], &mut s).is_err());
        assert_eq!(s.step, 0);
    }

    #[test]
    fn identical_inputs_give_identical_bits() {
        let run = || {
            let mut p = vec![Tensor::<f32>::from_fn([16], |i| (i as f32 * 0.3).sin())];
            let g = vec![Tensor::<f32>::from_fn([16], |i| (i as f32 * 0.7).cos())];
            let mut s = OptimizerState::new(cfg(0.01, 0.1));
            for _ in 0..5 {
                adamw_step(&mut p, &g, &mut s).unwrap();
            }
            p[0].data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
