//! L2 perturbations: one-step FGM, projected gradient ascent, and the
//! running lower bound on loss-gradient norms.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const ZERO_GRAD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    None,
    Fgm,
    Pgd,
    Adaptive,
}

/// Where the perturbation enters the discriminator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionSite {
    Input,
    Embedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub mode: AttackMode,
    pub radius: f64,
    /// PGD step size.
    #[serde(rename = "alpha")]
    pub step_alpha: f64,
    pub steps: usize,
    pub site: InjectionSite,
    pub kappa_window: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            mode: AttackMode::Adaptive,
            radius: 1.0,
            step_alpha: 0.5,
            steps: 3,
            site: InjectionSite::Input,
            kappa_window: 50,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::Config(format!("attack radius must be positive, got {}", self.radius)));
        }
        if !(self.step_alpha > 0.0 && self.step_alpha.is_finite()) {
            return Err(Error::Config(format!("attack step must be positive, got {}", self.step_alpha)));
        }
        if self.steps == 0 {
            return Err(Error::Config("attack needs at least one step".into()));
        }
        if self.kappa_window == 0 {
            return Err(Error::Config("kappa window must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(format!("{what} contains non-finite values")))
    }
}

/// `r · g / ‖g‖₂`, the maximiser of `ε·g` over the radius-`r` ball; zero when
/// the gradient vanishes.
pub fn fgm_perturb(grad: &Tensor, r_adv: f64) -> Result<Tensor> {
    check_finite(grad, "gradient")?;
    let n = grad.norm_l2();
    if n < ZERO_GRAD {
        return Ok(Tensor::zeros(grad.shape()));
    }
    Ok(grad.scale(r_adv / n))
}

/// Euclidean projection onto the radius-`r` ball.
pub fn project_ball(eps: &Tensor, r_adv: f64) -> Tensor {
    let n = eps.norm_l2();
    if n <= r_adv {
        eps.clone()
    } else {
        eps.scale(r_adv / n)
    }
}

/// Projected normalized-gradient ascent from `ε₀ = 0`. Returns every iterate
/// `ε₁ … ε_T`. `grad_at` maps a point to the loss gradient there; `first`
/// optionally supplies the gradient at `x` when the caller already has it.
pub fn pgd_trace<F>(mut grad_at: F, x: &Tensor, cfg: &AttackConfig, first: Option<Tensor>) -> Result<Vec<Tensor>>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let mut eps = Tensor::zeros(x.shape());
    let mut first = first;
    let mut trace = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps.max(1) {
        let g = match first.take() {
            Some(g) => g,
            None => grad_at(&x.add(&eps)?)?,
        };
        check_finite(&g, "gradient")?;
        let n = g.norm_l2();
        if n >= ZERO_GRAD {
            let stepped = eps.add(&g.scale(cfg.step_alpha / n))?;
            eps = project_ball(&stepped, cfg.radius);
        }
        trace.push(eps.clone());
    }
    Ok(trace)
}

/// Final PGD iterate `ε_T`.
pub fn pgd_attack<F>(grad_at: F, x: &Tensor, cfg: &AttackConfig) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    Ok(pgd_trace(grad_at, x, cfg, None)?.pop().expect("at least one step"))
}

/// Windowed minimum of observed gradient norms, floored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaEstimator {
    pub window: usize,
    pub floor: f64,
    pub history: VecDeque<f64>,
}

impl KappaEstimator {
    pub fn new(window: usize) -> Self {
        KappaEstimator {
            window: window.max(1),
            floor: 1e-8,
            history: VecDeque::new(),
        }
    }

    pub fn with_floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }

    pub fn update(&mut self, grad_norm: f64) {
        self.history.push_back(grad_norm.max(0.0));
        while self.history.len() > self.window {
            self.history.pop_front();
        }
    }

    /// Current κ; the floor when nothing has been observed.
    pub fn estimate(&self) -> f64 {
        if self.history.is_empty() {
            return self.floor;
        }
        self.history.iter().copied().fold(f64::INFINITY, f64::min).max(self.floor)
    }
}

/// Functional form of [`KappaEstimator::update`].
pub fn kappa_update(mut est: KappaEstimator, grad_norm: f64) -> KappaEstimator {
    est.update(grad_norm);
    est
}
