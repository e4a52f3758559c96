//! Seeded parameter initialisation.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::Tensor;

/// Half-width of the uniform distribution used for generic weights.
pub const INIT_RANGE: f64 = 0.02;

/// Deterministic stream of initial parameter values.
pub struct ParamInit {
    rng: ChaCha8Rng,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        ParamInit {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, shape: &[usize]) -> Rc<Tensor> {
        let rng = &mut self.rng;
        Rc::new(
            Tensor::from_fn(shape, |_| rng.gen_range(-INIT_RANGE..INIT_RANGE))
                .expect("parameter shapes are valid"),
        )
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Rc<Tensor> {
        Rc::new(Tensor::zeros(shape).expect("parameter shapes are valid"))
    }

    pub fn eye(&mut self, n: usize) -> Rc<Tensor> {
        Rc::new(Tensor::eye(n).expect("parameter shapes are valid"))
    }
}
