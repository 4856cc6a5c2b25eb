//! Seeded weight initializers.

use fpt_numerics::{Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Glorot-uniform `[fan_in, fan_out]` matrix.
    pub fn xavier<T: Real>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<T> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::from_fn([fan_in, fan_out], |_| T::lit(self.rng.gen_range(-a..=a)))
    }

    pub fn normal<T: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let d = Normal::new(0.0, std).expect("std is finite");
        Tensor::from_fn(shape, |_| T::lit(d.sample(&mut self.rng)))
    }
}
