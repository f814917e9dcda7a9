//! Coarse-to-fine training: one generator/critic pair per scale, trained
//! against frozen coarser scales with WGAN-GP, a fixed-noise
//! reconstruction term and optional critic-side attacks.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptive::{attack_step, clean_point, critic_loss_grad, AttackDecision, AttackKind, WSigmaCache};
use crate::attacks::{InjectionSite, KappaEstimator};
use crate::autograd::Graph;
use crate::bounds::{bound_report, BoundReport, PowerIteration, ReportInputs};
use crate::checkpoint::{self, CheckpointManifest, ScaleEntry};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::ladder::{Ladder, ScaleModel};
use crate::losses::{gradient_penalty, reconstruction_loss};
use crate::model::{discriminator_forward_graph, generator_forward, generator_forward_graph, NetParams, NetSpec, Role};
use crate::optim::Adam;
use crate::pyramid::{build_pyramid, build_schedule, resample, upsample, ImagePyramid, ScaleSchedule};
use crate::tensor::Tensor;

const SIGMA_FLOOR: f64 = 1e-4;
const SIGMA_GAIN: f64 = 0.1;

/// One training iteration's losses, from its last critic and generator
/// steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub scale: usize,
    pub iter: usize,
    pub d_loss: f64,
    pub gp: f64,
    pub g_adv: f64,
    pub rec: f64,
    pub attack: Option<AttackKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionRow {
    pub scale: usize,
    pub decision: AttackDecision,
}

pub const DECISION_HEADER: &str = "step,scale,w_sigma,kappa,alpha,threshold,chosen";
pub const TRACE_HEADER: &str = "scale,iter,d_loss,gp,g_adv,rec,attack";

impl DecisionRow {
    pub fn to_csv(&self) -> String {
        let d = &self.decision;
        format!(
            "{},{},{},{},{},{},{}",
            d.step_index,
            self.scale,
            d.w_sigma,
            d.kappa,
            d.alpha,
            d.threshold,
            d.chosen.as_str()
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::invalid(format!("malformed decision row `{line}`"));
        if f.len() != 7 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        let int = |i: usize| f[i].parse::<usize>().map_err(|_| bad());
        let chosen = match f[6] {
            "fgm" => AttackKind::Fgm,
            "pgd" => AttackKind::Pgd,
            _ => return Err(bad()),
        };
        Ok(DecisionRow {
            scale: int(1)?,
            decision: AttackDecision {
                chosen,
                w_sigma: num(2)?,
                kappa: num(3)?,
                alpha: num(4)?,
                threshold: num(5)?,
                step_index: int(0)?,
            },
        })
    }
}

impl TraceRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.scale,
            self.iter,
            self.d_loss,
            self.gp,
            self.g_adv,
            self.rec,
            self.attack.map_or("none", |k| k.as_str())
        )
    }
}

fn rmse(a: &Tensor, b: &Tensor) -> Result<f64> {
    let d = a.sub(b)?;
    Ok((d.norm_sq() / d.len() as f64).sqrt())
}

/// `σ_N = 1`; below the coarsest scale, a tenth of the RMSE between the
/// upsampled coarser reconstruction and the real image, floored at 1e-4.
pub fn noise_amplitude(n: usize, pyramid: &ImagePyramid, ladder: &Ladder) -> Result<f64> {
    if n == ladder.coarsest() {
        return Ok(1.0);
    }
    let real = pyramid.level(n);
    let up = upsample(&ladder.reconstruct(n + 1)?, real.hw())?;
    Ok((SIGMA_GAIN * rmse(&up, real)?).max(SIGMA_FLOOR))
}

/// Losses of one critic step.
#[derive(Clone, Copy, Debug)]
pub struct CriticStats {
    pub d_loss: f64,
    pub gp: f64,
    pub attack: Option<AttackKind>,
}

/// Losses of one generator step.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorStats {
    pub g_adv: f64,
    pub rec: f64,
}

fn values(g: &Graph, vars: &[crate::autograd::Var]) -> Vec<std::rc::Rc<Tensor>> {
    vars.iter().map(|&v| g.value(v)).collect()
}

fn finite_or(what: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::numeric(format!("{what} became non-finite ({v})")))
    }
}

/// Mutable state of the scale being trained.
pub struct ScaleTrainer<'a> {
    pub n: usize,
    cfg: &'a TrainConfig,
    ladder: &'a Ladder,
    pub real: Tensor,
    pub prev_rec_up: Option<Tensor>,
    pub z_rec: Tensor,
    pub sigma: f64,
    pub generator: NetParams,
    pub discriminator: NetParams,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub rng: ChaCha8Rng,
    pub kappa: KappaEstimator,
    w_sigma: WSigmaCache,
    pub critic_steps: usize,
    pub decisions: Vec<DecisionRow>,
}

/// Generator seed stream for scale `n`.
pub fn scale_rng(seed: u64, n: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(n as u64);
    rng
}

impl<'a> ScaleTrainer<'a> {
    /// Set up scale `n`; every scale above it must be in `ladder`.
    pub fn new(n: usize, pyramid: &ImagePyramid, ladder: &'a Ladder, cfg: &'a TrainConfig) -> Result<Self> {
        let coarsest = ladder.coarsest();
        for k in n + 1..=coarsest {
            ladder.scale(k)?;
        }
        let real = pyramid.level(n).clone();
        let mut rng = scale_rng(cfg.train.seed, n);
        let spec = |role| {
            NetSpec::new(role, n, coarsest)
                .with_blocks(cfg.model.n_blocks)
                .with_base_channels(cfg.model.base_channels)
                .with_image_channels(real.channels())
        };
        let mut generator = NetParams::init(spec(Role::Generator), &mut rng)?;
        let mut discriminator = NetParams::init(spec(Role::Discriminator), &mut rng)?;
        if cfg.model.init_from_coarser && n < coarsest {
            let above = ladder.scale(n + 1)?;
            if above.generator.spec.channels() == generator.spec.channels() {
                generator = NetParams::from_tensors(generator.spec.clone(), above.generator.tensors().into_iter().cloned().collect())?;
                discriminator =
                    NetParams::from_tensors(discriminator.spec.clone(), above.discriminator.tensors().into_iter().cloned().collect())?;
            }
        }
        let (prev_rec_up, z_rec) = if n == coarsest {
            (None, Tensor::randn(real.shape(), 1.0, &mut rng))
        } else {
            let up = upsample(&ladder.reconstruct(n + 1)?, real.hw())?;
            (Some(up), Tensor::zeros(real.shape()))
        };
        let sigma = noise_amplitude(n, pyramid, ladder)?;
        let o = &cfg.optim;
        Ok(ScaleTrainer {
            n,
            cfg,
            ladder,
            real,
            prev_rec_up,
            z_rec,
            sigma,
            generator,
            discriminator,
            opt_g: Adam::new(o.lr_g, (o.adam_beta1, o.adam_beta2)),
            opt_d: Adam::new(o.lr_d, (o.adam_beta1, o.adam_beta2)),
            rng,
            kappa: KappaEstimator::new(cfg.attack.kappa_window),
            w_sigma: WSigmaCache::new(cfg.train.w_sigma_refresh),
            critic_steps: 0,
            decisions: Vec::new(),
        })
    }

    /// Upsampled output of the frozen coarser scales under fresh noise.
    pub fn sample_prev(&mut self) -> Result<Option<Tensor>> {
        if self.n == self.ladder.coarsest() {
            return Ok(None);
        }
        let img = self.ladder.sample_from_top(self.n + 1, &mut self.rng)?;
        Ok(Some(upsample(&img, self.real.hw())?))
    }

    fn noise(&mut self) -> Tensor {
        Tensor::randn(self.real.shape(), self.sigma, &mut self.rng)
    }

    /// One critic update, attacking the real sample per the attack config.
    pub fn critic_step(&mut self, prev: Option<&Tensor>) -> Result<CriticStats> {
        let z = self.noise();
        let fake = generator_forward(&self.generator, &z, prev)?;
        let site = self.cfg.attack.site;
        let step = self.critic_steps;
        let hw = self.real.hw();
        let (disc, real) = (&self.discriminator, &self.real);
        let x0 = clean_point(disc, real, site);
        let w_sigma = &mut self.w_sigma;
        let outcome = attack_step(
            |p| critic_loss_grad(disc, real, site, p),
            &x0,
            &self.cfg.attack,
            &mut self.kappa,
            || w_sigma.get(disc, hw, step),
            step,
        )?;
        if let Some(d) = outcome.decision {
            self.decisions.push(DecisionRow {
                scale: self.n,
                decision: d,
            });
        }
        let (real_in, inject) = match site {
            InjectionSite::Input => (real.add(&outcome.perturbation)?, None),
            InjectionSite::Embedding => (real.clone(), Some(outcome.perturbation)),
        };
        let u = [self.rng.gen::<f64>()];

        let g = Graph::new();
        let net = self.discriminator.bind(&g, true);
        let critic = |g: &Graph, x| discriminator_forward_graph(g, &net, x, None);
        let rv = g.constant(real_in.clone());
        let iv = inject.map(|e| g.constant(e));
        let d_real = g.mean(discriminator_forward_graph(&g, &net, rv, iv)?)?;
        let d_fake = g.mean(critic(&g, g.constant(fake.clone()))?)?;
        let gp = gradient_penalty(&g, &critic, &real_in, &fake, &u)?;
        let loss = g.add(g.sub(d_fake, d_real)?, g.scale(gp, self.cfg.loss.lambda_gp))?;
        let d_loss = finite_or("critic loss", g.item(loss))?;
        let vars = net.vars();
        let grads = values(&g, &g.grad(loss, &vars)?);
        let grads: Vec<&Tensor> = grads.iter().map(|t| t.as_ref()).collect();
        self.opt_d.step(self.discriminator.tensors_mut(), &grads)?;
        self.critic_steps += 1;
        Ok(CriticStats {
            d_loss,
            gp: g.item(gp),
            attack: outcome.kind,
        })
    }

    /// One generator update. The critic sees only clean generated images.
    pub fn generator_step(&mut self, prev: Option<&Tensor>) -> Result<GeneratorStats> {
        let z = self.noise();
        let g = Graph::new();
        let gnet = self.generator.bind(&g, true);
        let dnet = self.discriminator.bind(&g, false);
        let fake = generator_forward_graph(&g, &gnet, g.constant(z), prev.map(|p| g.constant(p.clone())))?;
        let adv = g.neg(g.mean(discriminator_forward_graph(&g, &dnet, fake, None)?)?);
        let rec_out = generator_forward_graph(
            &g,
            &gnet,
            g.constant(self.z_rec.clone()),
            self.prev_rec_up.as_ref().map(|p| g.constant(p.clone())),
        )?;
        let rec = reconstruction_loss(&g, rec_out, g.constant(self.real.clone()))?;
        let obj = g.add(adv, g.scale(rec, self.cfg.loss.alpha_rec))?;
        finite_or("generator objective", g.item(obj))?;
        let vars = gnet.vars();
        let grads = values(&g, &g.grad(obj, &vars)?);
        let grads: Vec<&Tensor> = grads.iter().map(|t| t.as_ref()).collect();
        self.opt_g.step(self.generator.tensors_mut(), &grads)?;
        Ok(GeneratorStats {
            g_adv: g.item(adv),
            rec: g.item(rec),
        })
    }

    /// `d_steps` critic updates then `g_steps` generator updates.
    pub fn iteration(&mut self, iter: usize) -> Result<TraceRow> {
        let prev = self.sample_prev()?;
        let mut c = None;
        for _ in 0..self.cfg.train.d_steps {
            c = Some(self.critic_step(prev.as_ref())?);
        }
        let mut s = None;
        for _ in 0..self.cfg.train.g_steps {
            s = Some(self.generator_step(prev.as_ref())?);
        }
        let (c, s) = (c.expect("d_steps >= 1"), s.expect("g_steps >= 1"));
        if !self.generator.is_finite() || !self.discriminator.is_finite() {
            return Err(Error::numeric("parameters became non-finite"));
        }
        Ok(TraceRow {
            scale: self.n,
            iter,
            d_loss: c.d_loss,
            gp: c.gp,
            g_adv: s.g_adv,
            rec: s.rec,
            attack: c.attack,
        })
    }

    /// Fixed-noise reconstruction at this scale.
    pub fn rec_output(&self) -> Result<Tensor> {
        generator_forward(&self.generator, &self.z_rec, self.prev_rec_up.as_ref())
    }

    pub fn report(&self, step: usize) -> Result<BoundReport> {
        scale_report(self.cfg, self.n, step, &self.discriminator, &self.real, &self.rec_output()?, self.kappa.estimate())
    }

    pub fn finish(self) -> ScaleModel {
        ScaleModel {
            index: self.n,
            generator: self.generator,
            discriminator: self.discriminator,
            sigma: self.sigma,
            z_rec: self.z_rec,
            kappa: self.kappa,
        }
    }
}

/// Bound report for a scale's critic, against its fixed-noise
/// reconstruction.
pub fn scale_report(
    cfg: &TrainConfig,
    n: usize,
    step: usize,
    critic: &NetParams,
    real: &Tensor,
    fake: &Tensor,
    kappa: f64,
) -> Result<BoundReport> {
    bound_report(&ReportInputs {
        scale_index: n,
        step,
        critic,
        real,
        fake,
        kappa,
        attack: &cfg.attack,
        gamma: cfg.bounds.gamma,
        beta: cfg.bounds.beta,
        power: PowerIteration {
            max_iters: cfg.bounds.power_iters,
            tol: cfg.bounds.power_tol,
        },
    })
}

/// Everything produced while training one scale.
#[derive(Clone, Debug)]
pub struct ScaleOutcome {
    pub model: ScaleModel,
    pub trace: Vec<TraceRow>,
    pub decisions: Vec<DecisionRow>,
    pub reports: Vec<BoundReport>,
}

/// Called with every trace row whose iteration is a multiple of
/// `log_every`, and with the last one.
pub type Progress<'p> = &'p mut dyn FnMut(&TraceRow);

fn write_diagnostic(dir: &Path, t: &ScaleTrainer, err: &Error) -> Result<()> {
    fs::create_dir_all(dir)?;
    checkpoint::save_params(&dir.join("generator.bin"), &t.generator)?;
    checkpoint::save_params(&dir.join("discriminator.bin"), &t.discriminator)?;
    let info = serde_json::json!({
        "scale": t.n,
        "critic_steps": t.critic_steps,
        "error": err.to_string(),
    });
    fs::write(dir.join("error.json"), serde_json::to_string_pretty(&info)? + "\n")?;
    Ok(())
}

/// Train scale `n` for `iters_per_scale` iterations. On a numeric failure
/// the current parameters are written to `diagnostic_dir` when given.
pub fn train_scale(
    n: usize,
    pyramid: &ImagePyramid,
    ladder: &Ladder,
    cfg: &TrainConfig,
    diagnostic_dir: Option<&Path>,
    progress: Progress,
) -> Result<ScaleOutcome> {
    let mut t = ScaleTrainer::new(n, pyramid, ladder, cfg)?;
    let iters = cfg.train.iters_per_scale;
    let mut trace = Vec::with_capacity(iters);
    let mut reports = Vec::new();
    for it in 0..iters {
        let row = match t.iteration(it) {
            Ok(r) => r,
            Err(e @ Error::Numeric(_)) => {
                if let Some(dir) = diagnostic_dir {
                    write_diagnostic(dir, &t, &e)?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if (cfg.train.log_every > 0 && it % cfg.train.log_every == 0) || it + 1 == iters {
            progress(&row);
        }
        trace.push(row);
        let done = it + 1;
        if cfg.train.bound_every > 0 && done % cfg.train.bound_every == 0 && done < iters {
            reports.push(t.report(done)?);
        }
    }
    reports.push(t.report(iters)?);
    let decisions = std::mem::take(&mut t.decisions);
    Ok(ScaleOutcome {
        model: t.finish(),
        trace,
        decisions,
        reports,
    })
}

/// Schedule and pyramid for `image` under `cfg`.
pub fn prepare(image: &Tensor, cfg: &TrainConfig) -> Result<(ScaleSchedule, ImagePyramid)> {
    let p = &cfg.pyramid;
    let schedule = build_schedule(image.hw(), p.min_size_px, p.max_size_px, p.scale_factor)?;
    let base = if image.hw() == schedule.sizes[0] {
        image.clone()
    } else {
        resample(image, schedule.sizes[0])?
    };
    let pyramid = build_pyramid(&base, &schedule)?;
    Ok((schedule, pyramid))
}

fn write_lines(path: &Path, header: Option<&str>, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut text = String::new();
    if let Some(h) = header {
        text.push_str(h);
        text.push('\n');
    }
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn body_lines(path: &Path, has_header: bool) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .skip(usize::from(has_header))
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect())
}

fn write_scale_logs(root: &Path, entry: &ScaleEntry, out: &ScaleOutcome) -> Result<()> {
    write_lines(
        &root.join(&entry.decision_log_path),
        Some(DECISION_HEADER),
        out.decisions.iter().map(DecisionRow::to_csv),
    )?;
    write_lines(
        &root.join(&entry.trace_path),
        Some(TRACE_HEADER),
        out.trace.iter().map(TraceRow::to_csv),
    )?;
    let reports: Result<Vec<String>> = out
        .reports
        .iter()
        .map(|r| serde_json::to_string(r).map_err(Error::from))
        .collect();
    write_lines(&root.join(&entry.bound_report_path), None, reports?)
}

fn merge_logs(root: &Path, manifest: &CheckpointManifest) -> Result<()> {
    let mut decisions = Vec::new();
    let mut traces = Vec::new();
    let mut bounds = Vec::new();
    for e in &manifest.scales {
        decisions.extend(body_lines(&root.join(&e.decision_log_path), true)?);
        traces.extend(body_lines(&root.join(&e.trace_path), true)?);
        bounds.extend(body_lines(&root.join(&e.bound_report_path), false)?);
    }
    write_lines(&root.join(&manifest.decision_log_path), Some(DECISION_HEADER), decisions)?;
    write_lines(&root.join(&manifest.trace_path), Some(TRACE_HEADER), traces)?;
    write_lines(&root.join(&manifest.bound_report_path), None, bounds)
}

pub fn read_decisions(path: &Path) -> Result<Vec<DecisionRow>> {
    body_lines(path, true)?.iter().map(|l| DecisionRow::from_csv(l)).collect()
}

pub fn read_bound_reports(path: &Path) -> Result<Vec<BoundReport>> {
    body_lines(path, false)?
        .iter()
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Final bound report of every scale in a checkpoint, recomputed from the
/// stored critic, real level and fixed-noise reconstruction.
pub fn recompute_reports(root: &Path) -> Result<Vec<BoundReport>> {
    let (manifest, ladder) = checkpoint::load_ladder(root)?;
    let cfg = &manifest.config;
    manifest
        .scales
        .iter()
        .map(|e| {
            let model = ladder.scale(e.index)?;
            let real = checkpoint::load_real(root, e)?;
            let fake = ladder.reconstruct(e.index)?;
            scale_report(cfg, e.index, cfg.train.iters_per_scale, &model.discriminator, &real, &fake, model.kappa.estimate())
        })
        .collect()
}

/// Result of [`train_all`].
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub manifest: CheckpointManifest,
    pub ladder: Ladder,
    /// Scales trained by this call (resumed scales are not repeated).
    pub trained: Vec<usize>,
}

/// Build the pyramid and train every scale from coarsest to finest,
/// persisting each finished scale under `out_dir`. An existing checkpoint
/// for the same image and config is resumed after its last finished scale.
pub fn train_all(image: &Tensor, cfg: &TrainConfig, out_dir: &Path, progress: Progress) -> Result<TrainOutput> {
    cfg.validate()?;
    let (schedule, pyramid) = prepare(image, cfg)?;
    let fingerprint = image.fingerprint();
    let (mut manifest, mut ladder) = if out_dir.join(checkpoint::MANIFEST).exists() {
        let (m, l) = checkpoint::load_ladder(out_dir)?;
        if m.image_fingerprint != fingerprint || m.config != *cfg || m.schedule != schedule {
            return Err(Error::ConfigMismatch(format!(
                "{} holds a checkpoint for a different image or config",
                out_dir.display()
            )));
        }
        (m, l)
    } else {
        let m = CheckpointManifest::new(fingerprint, image.hw(), image.channels(), schedule.clone(), cfg.clone());
        (m, Ladder::new(schedule.clone(), image.channels()))
    };
    fs::create_dir_all(out_dir)?;
    let mut trained = Vec::new();
    for n in (0..=schedule.n()).rev() {
        if ladder.scales.contains_key(&n) {
            continue;
        }
        let diag = out_dir.join(checkpoint::scale_dir(n)).join("diagnostic");
        let out = train_scale(n, &pyramid, &ladder, cfg, Some(&diag), progress)?;
        let entry = checkpoint::save_scale(out_dir, &out.model, pyramid.level(n))?;
        write_scale_logs(out_dir, &entry, &out)?;
        manifest.scales.push(entry);
        merge_logs(out_dir, &manifest)?;
        checkpoint::write_manifest(out_dir, &manifest)?;
        ladder.scales.insert(n, out.model);
        trained.push(n);
    }
    if trained.is_empty() {
        merge_logs(out_dir, &manifest)?;
    }
    Ok(TrainOutput {
        manifest,
        ladder,
        trained,
    })
}
