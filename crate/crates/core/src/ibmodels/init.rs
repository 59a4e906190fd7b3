use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Model;
use crate::rng::{self, Purpose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Weights `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`, biases zero.
    XavierUniform,
    Zeros,
}

/// Initialize every parameter of `model`. Each tensor draws from its own
/// stream, so the result depends only on `(seed, tensor index)`.
pub fn init_params(model: &mut Model, scheme: InitScheme, seed: u64) {
    for (i, t) in model.params.tensors.iter_mut().enumerate() {
        let shape = t.shape().to_vec();
        let data = t.data_mut();
        match (scheme, shape.as_slice()) {
            (InitScheme::XavierUniform, &[fan_in, fan_out]) => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut r = rng::stream(seed, Purpose::Init, i as u64, 0, 0);
                for v in data.iter_mut() {
                    *v = r.random_range(-a..a);
                }
            }
            _ => data.fill(0.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ibmodels::ModelSpec;

    #[test]
    fn zeros_scheme() {
        let mut m = Model::new(ModelSpec::toy_vib(2, 2, 0.01)).unwrap();
        init_params(&mut m, InitScheme::XavierUniform, 1);
        init_params(&mut m, InitScheme::Zeros, 1);
        assert!(m.params.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn xavier_bound_first_mnist_layer() {
        let mut m = Model::new(ModelSpec::mnist_det()).unwrap();
        init_params(&mut m, InitScheme::XavierUniform, 3);
        let a = (6.0f64 / 1808.0).sqrt();
        assert!((a - 0.0576).abs() < 1e-4);
        let w = &m.params.tensors[0];
        assert_eq!(w.shape(), &[784, 1024]);
        assert!(w.max_abs() <= a);
        // the sample should actually reach close to the bound
        assert!(w.max_abs() > 0.99 * a);
        assert!(m.params.tensors[1].data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn same_seed_same_init() {
        let spec = ModelSpec::toy_vib(101, 25, 0.01);
        let mut a = Model::new(spec.clone()).unwrap();
        let mut b = Model::new(spec).unwrap();
        init_params(&mut a, InitScheme::XavierUniform, 8);
        init_params(&mut b, InitScheme::XavierUniform, 8);
        assert_eq!(a, b);
        init_params(&mut b, InitScheme::XavierUniform, 9);
        assert_ne!(a, b);
    }
}
