//! Parameter initialization and registration.
//!
//! Projection weights default to truncated normal (sigma = 0.02, clipped at
//! two sigma); biases and norm offsets start at zero, norm scales at one.
//! A [`ParamBuilder`] threads the seeded RNG through model construction and
//! records every parameter in declaration order, which fixes the checkpoint
//! and optimizer ordering.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use super::tensor::{numel_of, Elem, Tensor};
use crate::seed;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    TruncNormal(f64),
    Zeros,
    Ones,
}

pub struct ParamBuilder<E: Elem> {
    rng: ChaCha20Rng,
    params: Vec<Tensor<E>>,
}

impl<E: Elem> ParamBuilder<E> {
    pub fn new(seed_value: u64, context: &[&str]) -> Self {
        let mut full = vec!["init"];
        full.extend_from_slice(context);
        ParamBuilder {
            rng: seed::rng(seed_value, &full),
            params: Vec::new(),
        }
    }

    pub fn param(&mut self, shape: &[usize], init: Init) -> Tensor<E> {
        let n = numel_of(shape);
        let data: Vec<E> = match init {
            Init::Zeros => vec![E::zero(); n],
            Init::Ones => vec![E::one(); n],
            Init::TruncNormal(sigma) => (0..n)
                .map(|_| E::from_f64(trunc_normal(&mut self.rng, sigma)))
                .collect(),
        };
        let t = Tensor::parameter(shape, data);
        self.params.push(t.clone());
        t
    }

    /// All registered parameters in declaration order.
    pub fn into_params(self) -> Vec<Tensor<E>> {
        self.params
    }
}

/// Normal draw via Box–Muller, resampled until within two sigma.
fn trunc_normal(rng: &mut ChaCha20Rng, sigma: f64) -> f64 {
    loop {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen::<f64>();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z * sigma;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trunc_normal_is_bounded_and_centered() {
        let mut b = ParamBuilder::<f64>::new(1, &["t"]);
        let t = b.param(&[4096], Init::TruncNormal(0.02));
        let v = t.to_vec();
        assert!(v.iter().all(|x| x.abs() <= 0.04 + 1e-12));
        let mean: f64 = v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 2e-3);
    }

    #[test]
    fn builder_records_declaration_order() {
        let mut b = ParamBuilder::<f32>::new(1, &["t"]);
        let a = b.param(&[2], Init::Zeros);
        let c = b.param(&[3], Init::Ones);
        let params = b.into_params();
        assert_eq!(params.len(), 2);
        assert_eq!(params[0].shape(), a.shape());
        assert_eq!(params[1].shape(), c.shape());
    }
}
