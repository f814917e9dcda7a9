//! Per-step choice between FGM and PGD.
//!
//! PGD is used while the embedding layer's spectral norm `W_σ` is below
//! `κ / (2α)`; otherwise the single FGM step is used.

use serde::{Deserialize, Serialize};

use crate::attacks::{fgm_perturb, pgd_trace, AttackConfig, AttackMode, InjectionSite, KappaEstimator};
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::model::{conv_spectral_norm, discriminator_forward_graph, NetParams};
use crate::spectral::PowerIteration;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgm,
    Pgd,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Fgm => "fgm",
            AttackKind::Pgd => "pgd",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackDecision {
    pub chosen: AttackKind,
    pub w_sigma: f64,
    pub kappa: f64,
    pub alpha: f64,
    pub threshold: f64,
    pub step_index: usize,
}

/// PGD iff `w_sigma < kappa / (2 alpha)`; ties go to FGM.
pub fn decide(w_sigma: f64, kappa: f64, alpha: f64, step: usize) -> Result<AttackDecision> {
    if !(kappa > 0.0) || !(alpha > 0.0) {
        return Err(Error::Config(format!(
            "kappa and alpha must be positive, got kappa={kappa}, alpha={alpha}"
        )));
    }
    let threshold = kappa / (2.0 * alpha);
    if !threshold.is_finite() {
        return Err(Error::Config(format!("threshold kappa/(2 alpha) is not finite: {threshold}")));
    }
    let chosen = if w_sigma < threshold {
        AttackKind::Pgd
    } else {
        AttackKind::Fgm
    };
    Ok(AttackDecision {
        chosen,
        w_sigma,
        kappa,
        alpha,
        threshold,
        step_index: step,
    })
}

/// Precise spectral norm of the embedding (last) layer as an operator on
/// `hw` inputs. Both sites measure the same layer.
pub fn compute_w_sigma(params: &NetParams, _site: InjectionSite, hw: (usize, usize)) -> f64 {
    let rule = PowerIteration {
        max_iters: 5000,
        tol: 1e-12,
    };
    conv_spectral_norm(&params.last_layer().weight, hw, rule, &mut Vec::new())
}

/// `W_σ` refreshed every `refresh_every` steps, warm-starting power
/// iteration from the previous singular vector.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WSigmaCache {
    pub refresh_every: usize,
    pub value: Option<f64>,
    #[serde(skip)]
    vector: Vec<f64>,
}

impl WSigmaCache {
    pub fn new(refresh_every: usize) -> Self {
        WSigmaCache {
            refresh_every: refresh_every.max(1),
            value: None,
            vector: Vec::new(),
        }
    }

    pub fn get(&mut self, params: &NetParams, hw: (usize, usize), step: usize) -> f64 {
        match self.value {
            Some(v) if step % self.refresh_every != 0 => v,
            _ => {
                let rule = PowerIteration {
                    max_iters: 200,
                    tol: 1e-7,
                };
                let v = conv_spectral_norm(&params.last_layer().weight, hw, rule, &mut self.vector);
                self.value = Some(v);
                v
            }
        }
    }
}

/// Unperturbed point for `site`: the image itself, or a zero embedding
/// perturbation.
pub fn clean_point(params: &NetParams, x: &Tensor, site: InjectionSite) -> Tensor {
    match site {
        InjectionSite::Input => x.clone(),
        InjectionSite::Embedding => Tensor::zeros(params.embedding_shape(x.batch(), x.hw())),
    }
}

/// Gradient of the critic loss on a real sample, `ℓ = −mean D`, with respect
/// to the perturbed quantity evaluated at `point`.
pub fn critic_loss_grad(params: &NetParams, x: &Tensor, site: InjectionSite, point: &Tensor) -> Result<Tensor> {
    let g = Graph::new();
    let net = params.bind(&g, false);
    let p = g.param(point.clone());
    let scores = match site {
        InjectionSite::Input => discriminator_forward_graph(&g, &net, p, None)?,
        InjectionSite::Embedding => {
            let xv = g.constant(x.clone());
            discriminator_forward_graph(&g, &net, xv, Some(p))?
        }
    };
    let loss = g.neg(g.mean(scores)?);
    let grads = g.grad(loss, &[p])?;
    Ok((*g.value(grads[0])).clone())
}

/// Algorithm step: gradient at `x`, κ update, decision, then the chosen
/// attack. `grad_at` must not mutate any model or optimizer state.
pub fn adaptive_step<F>(
    mut grad_at: F,
    x: &Tensor,
    w_sigma: f64,
    cfg: &AttackConfig,
    kappa: &mut KappaEstimator,
    step: usize,
) -> Result<(Tensor, AttackDecision)>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let g0 = grad_at(x)?;
    kappa.update(g0.norm_l2());
    let decision = decide(w_sigma, kappa.estimate(), cfg.step_alpha, step)?;
    let eps = match decision.chosen {
        AttackKind::Fgm => fgm_perturb(&g0, cfg.radius)?,
        AttackKind::Pgd => pgd_trace(grad_at, x, cfg, Some(g0))?.pop().expect("at least one step"),
    };
    Ok((eps, decision))
}

/// Result of one attack for any mode.
#[derive(Clone, Debug)]
pub struct AttackOutcome {
    pub perturbation: Tensor,
    pub kind: Option<AttackKind>,
    pub decision: Option<AttackDecision>,
}

/// Dispatch on `cfg.mode`. κ is updated in every mode; `w_sigma` is only
/// evaluated in adaptive mode.
pub fn attack_step<F, W>(
    mut grad_at: F,
    x: &Tensor,
    cfg: &AttackConfig,
    kappa: &mut KappaEstimator,
    w_sigma: W,
    step: usize,
) -> Result<AttackOutcome>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
    W: FnOnce() -> f64,
{
    if cfg.mode == AttackMode::Adaptive {
        let (eps, d) = adaptive_step(grad_at, x, w_sigma(), cfg, kappa, step)?;
        return Ok(AttackOutcome {
            perturbation: eps,
            kind: Some(d.chosen),
            decision: Some(d),
        });
    }
    let g0 = grad_at(x)?;
    kappa.update(g0.norm_l2());
    let (eps, kind) = match cfg.mode {
        AttackMode::None => (Tensor::zeros(x.shape()), None),
        AttackMode::Fgm => (fgm_perturb(&g0, cfg.radius)?, Some(AttackKind::Fgm)),
        _ => (
            pgd_trace(grad_at, x, cfg, Some(g0))?.pop().expect("at least one step"),
            Some(AttackKind::Pgd),
        ),
    };
    Ok(AttackOutcome {
        perturbation: eps,
        kind,
        decision: None,
    })
}
