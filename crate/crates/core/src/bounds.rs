//! Generalization-bound terms for FGM and PGD adversarial training,
//! Rademacher factors and patch-critic margin losses.
//!
//! The big-O bounds are evaluated with constant 1. They are meant as a
//! relative diagnostic across training, not as certified risk values.

use serde::{Deserialize, Serialize};

use crate::adaptive::{clean_point, critic_loss_grad};
use crate::attacks::{fgm_perturb, AttackConfig, InjectionSite};
use crate::error::{Error, Result};
use crate::model::{discriminator_forward, layer_norms, LayerNorm, NetParams};
use crate::tensor::Tensor;

pub use crate::spectral::{spectral_norm, spectral_norm_warm, ConvOperator, DenseOperator, LinearOperator, PowerIteration};

const POLE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    /// Product of layer spectral norms.
    pub w_dot: f64,
    /// Sum of squared Frobenius-to-spectral ratios.
    pub w_check: f64,
    pub lip_bar: f64,
    pub d: usize,
    pub h: usize,
    /// Largest input patch L2 norm.
    pub b: f64,
    pub kappa: f64,
    pub gamma: f64,
    pub beta: f64,
    pub m: usize,
}

impl BoundTerms {
    /// Norm-derived terms from per-layer norms; the remaining fields are
    /// filled from the arguments.
    pub fn from_layers(norms: &[LayerNorm], h: usize, b: f64, kappa: f64, gamma: f64, beta: f64, m: usize) -> Self {
        let spectral: Vec<f64> = norms.iter().map(|n| n.spectral).collect();
        BoundTerms {
            w_dot: spectral.iter().product(),
            w_check: norms.iter().map(|n| (n.frobenius / n.spectral).powi(2)).sum(),
            lip_bar: lip_bar(&spectral),
            d: norms.len(),
            h,
            b,
            kappa,
            gamma,
            beta,
            m,
        }
    }
}

/// `Ẇ · Σ_i ∏_{j≤i} ‖W_j‖₂`.
pub fn lip_bar(spectral_norms: &[f64]) -> f64 {
    let mut prefix = 1.0;
    let mut sum = 0.0;
    for s in spectral_norms {
        prefix *= s;
        sum += prefix;
    }
    prefix * sum
}

fn check_kappa_b(t: &BoundTerms) -> Result<()> {
    if !(t.kappa > 0.0) || !(t.b > 0.0) {
        return Err(Error::invalid(format!(
            "kappa and B must be positive, got kappa={}, B={}",
            t.kappa, t.b
        )));
    }
    Ok(())
}

/// `{Ẇ + (r/κ)·Ẇ·(1/B + Ẇ)}² · W̌`.
pub fn f_fgm(t: &BoundTerms, r_adv: f64) -> Result<f64> {
    check_kappa_b(t)?;
    let inner = t.w_dot + (r_adv / t.kappa) * t.w_dot * (1.0 / t.b + t.w_dot);
    Ok(inner * inner * t.w_check)
}

/// PGD factor and whether the near-pole series form was used.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgdFactor {
    pub value: f64,
    pub series: bool,
}

/// `{(1 − q^t) / (κ − 2α·lip̄)}² · Ẇ(1 + Ẇ)·W̌` with `q = (2α/κ)·lip̄`.
/// Near `q = 1` the fraction is evaluated as `Σ_{i<t} q^i / κ`.
pub fn f_pgd_flagged(terms: &BoundTerms, t: usize, alpha: f64) -> Result<PgdFactor> {
    check_kappa_b(terms)?;
    let kappa = terms.kappa;
    let q = 2.0 * alpha / kappa * terms.lip_bar;
    let denom = kappa - 2.0 * alpha * terms.lip_bar;
    let series = denom.abs() < POLE_TOL * kappa;
    let frac = if series {
        (0..t).map(|i| q.powi(i as i32)).sum::<f64>() / kappa
    } else {
        (1.0 - q.powi(t as i32)) / denom
    };
    Ok(PgdFactor {
        value: frac * frac * terms.w_dot * (1.0 + terms.w_dot) * terms.w_check,
        series,
    })
}

pub fn f_pgd(terms: &BoundTerms, t: usize, alpha: f64) -> Result<f64> {
    Ok(f_pgd_flagged(terms, t, alpha)?.value)
}

/// `sqrt(((B + r)²·d²·h·log(d·h)·F + log(m/β)) / (γ²·m))`.
pub fn rhs(terms: &BoundTerms, f_value: f64, r_adv: f64) -> f64 {
    let d = terms.d as f64;
    let h = terms.h as f64;
    let m = terms.m as f64;
    let complexity = (terms.b + r_adv).powi(2) * d * d * h * (d * h).ln() * f_value;
    ((complexity + (m / terms.beta).ln()) / (terms.gamma * terms.gamma * m)).sqrt()
}

/// Clean and adversarial Rademacher bounds `2Q·sqrt(2 ln(2d)/n)` and
/// `(1 + ε)` times that.
pub fn rademacher_factor(q: f64, d_dim: usize, n: usize, eps: f64) -> (f64, f64) {
    let clean = 2.0 * q * (2.0 * (2.0 * d_dim as f64).ln() / n as f64).sqrt();
    (clean, clean * (1.0 + eps))
}

/// Fraction of scores whose value signed toward its label (`+1` real,
/// `−1` fake) is at most `gamma`.
pub fn margin_loss(scores: &[f64], labels: &[f64], gamma: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("margin loss of an empty score set"));
    }
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let bad = scores.iter().zip(labels).filter(|(s, y)| *s * *y <= gamma).count();
    Ok(bad as f64 / scores.len() as f64)
}

/// Count of fully valid `rf × rf` patches and their largest L2 norm.
pub fn patch_stats(image: &Tensor, rf: usize) -> (usize, f64) {
    let [_, c, h, w] = image.shape();
    let (ph, pw) = (rf.min(h), rf.min(w));
    let (ny, nx) = (h - ph + 1, w - pw + 1);
    let mut sq = vec![0.0; h * w];
    for ch in 0..c {
        for (s, v) in sq.iter_mut().zip(image.plane(0, ch)) {
            *s += v * v;
        }
    }
    // Summed-area table over squared pixel values.
    let mut sat = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            sat[(y + 1) * (w + 1) + x + 1] =
                sq[y * w + x] + sat[y * (w + 1) + x + 1] + sat[(y + 1) * (w + 1) + x] - sat[y * (w + 1) + x];
        }
    }
    let mut best: f64 = 0.0;
    for y in 0..ny {
        for x in 0..nx {
            let (y1, x1) = (y + ph, x + pw);
            let s = sat[y1 * (w + 1) + x1] - sat[y * (w + 1) + x1] - sat[y1 * (w + 1) + x] + sat[y * (w + 1) + x];
            best = best.max(s);
        }
    }
    (ny * nx, best.max(0.0).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub scale_index: usize,
    pub step: usize,
    pub terms: BoundTerms,
    pub r_adv: f64,
    pub pgd_steps: usize,
    pub pgd_alpha: f64,
    pub f_fgm: f64,
    pub f_pgd: f64,
    pub pgd_series_fallback: bool,
    pub rhs_fgm: f64,
    pub rhs_pgd: f64,
    pub margin_loss_clean: f64,
    pub margin_loss_adv: f64,
}

/// Inputs for one report.
pub struct ReportInputs<'a> {
    pub scale_index: usize,
    pub step: usize,
    pub critic: &'a NetParams,
    pub real: &'a Tensor,
    pub fake: &'a Tensor,
    pub kappa: f64,
    pub attack: &'a AttackConfig,
    pub gamma: f64,
    pub beta: f64,
    pub power: PowerIteration,
}

/// Evaluate every bound term for a critic on its scale's real image.
/// Clean margins use the real image and `fake`; adversarial margins replace
/// the real image's scores by those under an FGM perturbation.
pub fn bound_report(inp: &ReportInputs) -> Result<BoundReport> {
    if !(inp.gamma > 0.0) || !(inp.beta > 0.0 && inp.beta < 1.0) {
        return Err(Error::Config(format!(
            "need gamma > 0 and 0 < beta < 1, got {} / {}",
            inp.gamma, inp.beta
        )));
    }
    let critic = inp.critic;
    let norms = layer_norms(critic, inp.real.hw(), inp.power);
    let (m, b) = patch_stats(inp.real, critic.spec.receptive_field());
    let terms = BoundTerms::from_layers(&norms, critic.embedding_units(), b, inp.kappa, inp.gamma, inp.beta, m);
    let r = inp.attack.radius;
    let ffgm = f_fgm(&terms, r)?;
    let fpgd = f_pgd_flagged(&terms, inp.attack.steps, inp.attack.step_alpha)?;

    let site = inp.attack.site;
    let real_scores = discriminator_forward(critic, inp.real, None)?;
    let fake_scores = discriminator_forward(critic, inp.fake, None)?;
    let x0 = clean_point(critic, inp.real, site);
    let eps = fgm_perturb(&critic_loss_grad(critic, inp.real, site, &x0)?, r)?;
    let adv_scores = match site {
        InjectionSite::Input => discriminator_forward(critic, &inp.real.add(&eps)?, None)?,
        InjectionSite::Embedding => discriminator_forward(critic, inp.real, Some(&eps))?,
    };
    let labels: Vec<f64> = std::iter::repeat(1.0)
        .take(real_scores.len())
        .chain(std::iter::repeat(-1.0).take(fake_scores.len()))
        .collect();
    let pooled = |a: &Tensor| -> Vec<f64> { a.data().iter().chain(fake_scores.data()).copied().collect() };

    Ok(BoundReport {
        scale_index: inp.scale_index,
        step: inp.step,
        r_adv: r,
        pgd_steps: inp.attack.steps,
        pgd_alpha: inp.attack.step_alpha,
        f_fgm: ffgm,
        f_pgd: fpgd.value,
        pgd_series_fallback: fpgd.series,
        rhs_fgm: rhs(&terms, ffgm, r),
        rhs_pgd: rhs(&terms, fpgd.value, r),
        margin_loss_clean: margin_loss(&pooled(&real_scores), &labels, inp.gamma)?,
        margin_loss_adv: margin_loss(&pooled(&adv_scores), &labels, inp.gamma)?,
        terms,
    })
}
