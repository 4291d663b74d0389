use rand::Rng;
use rand_distr::StandardNormal;

use crate::graph::{Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Standard-normal noise tensor.
pub fn standard_normal<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::new(shape, data).expect("shape product")
}

/// `mean + σ·ε` with `σ = softplus(vparam)` and `ε ~ N(0, I)`. Gradients flow
/// to both `mean` and `vparam`.
pub fn reparameterized_normal_sample<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    mean: Var,
    vparam: Var,
    rng: &mut R,
) -> Var {
    let sd = g.softplus(vparam);
    reparameterized_with_sd(g, mean, sd, rng)
}

/// `mean + sd·ε` for an already-positive standard deviation node.
pub fn reparameterized_with_sd<T: Real, R: Rng + ?Sized>(g: &mut Graph<T>, mean: Var, sd: Var, rng: &mut R) -> Var {
    let eps = standard_normal(rng, g.shape(mean));
    let eps = g.constant(eps);
    let noise = g.mul(sd, eps);
    g.add(mean, noise)
}
