//! WGAN-GP adversarial loss and the reconstruction term.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

// Keeps the norm differentiable where the critic gradient vanishes.
const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha_rec: f64,
    pub lambda_gp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_rec: 10.0,
            lambda_gp: 0.1,
        }
    }
}

impl LossWeights {
    pub fn super_resolution() -> Self {
        LossWeights {
            alpha_rec: 100.0,
            ..LossWeights::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha_rec", self.alpha_rec), ("lambda_gp", self.lambda_gp)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct WganGpTerms {
    pub d_loss: Var,
    pub g_term: Var,
    pub gp: Var,
}

fn same_shape(g: &Graph, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::invalid(format!(
            "{what}: shapes {:?} and {:?} differ",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

/// `mean_i (‖∇ D(x̂_i)‖₂ − 1)²` with `x̂_i = u_i·real_i + (1 − u_i)·fake_i`.
/// The critic value of a sample is the sum of its patch scores.
pub fn gradient_penalty<C>(g: &Graph, critic: &C, real: &Tensor, fake: &Tensor, u: &[f64]) -> Result<Var>
where
    C: Fn(&Graph, Var) -> Result<Var>,
{
    let shape = real.shape();
    if fake.shape() != shape {
        return Err(Error::invalid(format!(
            "real {:?} and fake {:?} batches differ in shape",
            shape,
            fake.shape()
        )));
    }
    let n = shape[0];
    if u.len() != n {
        return Err(Error::invalid(format!("need {n} interpolation weights, got {}", u.len())));
    }
    let per = real.len() / n;
    let mut mix = real.clone();
    for (i, (m, f)) in mix.data_mut().iter_mut().zip(fake.data()).enumerate() {
        let t = u[i / per];
        *m = t * *m + (1.0 - t) * f;
    }
    let x_hat = g.param(mix);
    let score = g.sum(critic(g, x_hat)?)?;
    let grad = g.grad(score, &[x_hat])?[0];
    let sq = g.sum_to(g.square(grad)?, [n, 1, 1, 1])?;
    let norm = g.sqrt(g.offset(sq, NORM_EPS));
    let dev = g.square(g.offset(norm, -1.0))?;
    g.mean(dev)
}

/// Critic loss `mean D(fake) − mean D(real) + λ·GP`, generator term
/// `−mean D(fake)` and the penalty itself.
pub fn wgan_gp_loss<C>(g: &Graph, critic: C, real: Var, fake: Var, lambda_gp: f64, u: &[f64]) -> Result<WganGpTerms>
where
    C: Fn(&Graph, Var) -> Result<Var>,
{
    same_shape(g, real, fake, "wgan-gp")?;
    let d_real = g.mean(critic(g, real)?)?;
    let d_fake = g.mean(critic(g, fake)?)?;
    let gp = gradient_penalty(g, &critic, &g.value(real), &g.value(fake), u)?;
    let d_loss = g.add(g.sub(d_fake, d_real)?, g.scale(gp, lambda_gp))?;
    Ok(WganGpTerms {
        d_loss,
        g_term: g.neg(d_fake),
        gp,
    })
}

/// Sum of squared differences.
pub fn reconstruction_loss(g: &Graph, output: Var, target: Var) -> Result<Var> {
    same_shape(g, output, target, "reconstruction")?;
    g.sum(g.square(g.sub(output, target)?)?)
}

pub fn reconstruction_loss_value(output: &Tensor, target: &Tensor) -> Result<f64> {
    if output.shape() != target.shape() {
        return Err(Error::invalid(format!(
            "reconstruction: shapes {:?} and {:?} differ",
            output.shape(),
            target.shape()
        )));
    }
    Ok(output.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// `(d_loss, g_term + α·rec)`.
pub fn total_objective(d_loss: f64, g_term: f64, rec: f64, weights: &LossWeights) -> Result<(f64, f64)> {
    if ![d_loss, g_term, rec].iter().all(|v| v.is_finite()) {
        return Err(Error::numeric(format!(
            "non-finite loss term: d={d_loss}, g={g_term}, rec={rec}"
        )));
    }
    Ok((d_loss, g_term + weights.alpha_rec * rec))
}
