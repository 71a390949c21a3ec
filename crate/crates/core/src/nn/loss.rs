//! Adversarial losses: Wasserstein critic/generator losses and the gradient
//! penalty on real/fake mixtures.

use super::graph::{Graph, NodeId};
use super::nets::{Critic, GeneratorNet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Default gradient-penalty weight.
pub const DEFAULT_LAMBDA: f64 = 0.01;

/// Keeps `sqrt` differentiable when the critic gradient vanishes.
const NORM_FLOOR: f64 = 1e-20;

/// `x̂_i = ε_i · real_i + (1 - ε_i) · fake_i`
pub fn interpolate(real: &Tensor, fake: &Tensor, eps: &[f64]) -> Result<Tensor> {
    if real.shape != fake.shape {
        return Err(Error::shape(format!(
            "real {:?} vs fake {:?}",
            real.shape, fake.shape
        )));
    }
    let b = real.batch();
    if eps.len() != b {
        return Err(Error::shape(format!("{} mixing weights for batch {b}", eps.len())));
    }
    let per = real.len() / b;
    let data = real
        .data
        .iter()
        .zip(&fake.data)
        .enumerate()
        .map(|(i, (&r, &f))| {
            let e = eps[i / per];
            e * r + (1.0 - e) * f
        })
        .collect();
    Tensor::new(real.shape.clone(), data)
}

/// `mean_i (‖∇_x̂ D(x̂_i)‖₂ − 1)²`, recorded so it can be differentiated with
/// respect to whatever parameters `critic` depends on.
pub fn gradient_penalty(
    g: &mut Graph,
    critic: &impl Critic,
    real: &Tensor,
    fake: &Tensor,
    eps: &[f64],
) -> Result<NodeId> {
    let mix = interpolate(real, fake, eps)?;
    let b = mix.batch();
    let x_hat = g.variable(mix);
    let scores = critic.score(g, x_hat)?;
    let total = g.sum(scores);
    let grad = g.grad(total, &[x_hat])?[0];
    let sq = g.mul(grad, grad)?;
    let per = g.sum_per_sample(sq);
    let per = g.add_scalar(per, NORM_FLOOR);
    let norm = g.sqrt(per);
    let dev = g.add_scalar(norm, -1.0);
    let dev2 = g.mul(dev, dev)?;
    let s = g.sum(dev2);
    Ok(g.scale(s, 1.0 / b as f64))
}

#[derive(Debug, Clone, Copy)]
pub struct WganLosses {
    pub critic: NodeId,
    pub generator: NodeId,
    pub penalty: NodeId,
}

/// Records both WGAN-GP losses on `g`.
///
/// `critic = mean D(fake) − mean D(real) + λ·penalty`,
/// `generator = −mean D(G(z))`. The penalty uses the generated images as
/// values only, so it never carries gradient into the generator.
#[allow(clippy::too_many_arguments)]
pub fn wgan_gp_losses(
    g: &mut Graph,
    critic: &impl Critic,
    generator: &GeneratorNet,
    gen_params: &[NodeId],
    real: &Tensor,
    z: &Tensor,
    eps: &[f64],
    lambda: f64,
) -> Result<WganLosses> {
    if lambda < 0.0 {
        return Err(Error::invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    let zn = g.constant(z.clone());
    let fake = generator.forward(g, gen_params, zn)?;
    let fake_values = g.value(fake).clone();
    let penalty = gradient_penalty(g, critic, real, &fake_values, eps)?;

    let real_n = g.constant(real.clone());
    let d_real = critic.score(g, real_n)?;
    let d_fake = critic.score(g, fake)?;
    let m_real = g.mean(d_real);
    let m_fake = g.mean(d_fake);
    let w = g.sub(m_fake, m_real)?;
    let lp = g.scale(penalty, lambda);
    let critic_loss = g.add(w, lp)?;
    let generator_loss = g.scale(m_fake, -1.0);
    Ok(WganLosses {
        critic: critic_loss,
        generator: generator_loss,
        penalty,
    })
}
