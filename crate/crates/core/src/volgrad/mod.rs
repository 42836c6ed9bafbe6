//! Dense tensors, differentiable volumetric kernels and their optimizer.

mod adam;
mod conv;
mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use conv::ConvSpec;
pub use gradcheck::{grad_check, grad_check_fn, grad_check_graph, GradCheckOptions, GradCheckReport};
pub use graph::{mse, Graph, Var};
pub use kernels::{BatchNormState, BatchStats};
pub use tensor::Tensor;

/// Fan-in scaled Gaussian (He) initialisation.
pub fn he_normal<T: crate::Scalar, R: rand::Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    use rand_distr::{Distribution, StandardNormal};
    let sd = (2.0 / fan_in as f64).sqrt();
    let mut t = Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::from_f64_lossy(sd * z)
    });
    t.set_requires_grad(true);
    t
}
