//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! straight to stderr, visible without `--nocapture`, and then asserts.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use msgan::adaptive::{attack_step, clean_point, critic_loss_grad, AttackKind, WSigmaCache};
use msgan::attacks::{fgm_perturb, pgd_trace, AttackConfig, AttackMode, InjectionSite, KappaEstimator};
use msgan::autograd::{Graph, Var};
use msgan::bounds::{f_fgm, f_pgd, lip_bar, rhs, spectral_norm, BoundTerms, ConvOperator, DenseOperator, LinearOperator, PowerIteration};
use msgan::config::TrainConfig;
use msgan::imageio::{load_gray, load_image, to_unit};
use msgan::losses::{gradient_penalty, reconstruction_loss, LossWeights};
use msgan::metrics::{covariance, frechet_distance, niqe, rmse, sifid, NssModel, RandomProjection};
use msgan::model::{discriminator_forward_graph, LayerNorm, NetParams, NetSpec, Role};
use msgan::pyramid::resample;
use msgan::tasks::{sr_step_factor, super_resolve};
use msgan::trainer::{prepare, read_bound_reports, read_decisions, recompute_reports, train_all};
use msgan::Tensor;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn verdict(id: u8, name: &str, ok: bool, limit: Duration, elapsed: Duration, detail: String) {
    let within = elapsed <= limit;
    let status = if ok && within { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr().lock(),
        "[{id}] {name}: {status} ({detail}; {:.1}s of {}s budget)",
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    assert!(ok, "[{id}] {name} failed: {detail}");
    assert!(within, "[{id}] {name} exceeded its time budget");
}

fn randn(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

#[test]
fn attack_geometry() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst_norm: f64 = 0.0;
    for _ in 0..10_000 {
        let dims = [1, rng.gen_range(1..4), rng.gen_range(1..6), rng.gen_range(1..6)];
        let g = Tensor::randn(dims, rng.gen_range(1e-3..1e3), &mut rng);
        let r = rng.gen_range(0.01..5.0);
        let e = fgm_perturb(&g, r).unwrap();
        worst_norm = worst_norm.max((e.norm_l2() - r).abs());
    }

    let mut worst_excess = f64::NEG_INFINITY;
    let mut worst_fgm_gap: f64 = 0.0;
    for _ in 0..500 {
        let x = randn([1, 2, 4, 4], &mut rng);
        let a = Tensor::randn([1, 2, 4, 4], 1.0, &mut rng);
        // Gradient of a smooth nonlinear loss at the probed point.
        let grad_at = |p: &Tensor| Ok(p.zip_map(&a, |v, w| (v * w).sin() * w + 0.3 * v).unwrap());
        let cfg = AttackConfig {
            mode: AttackMode::Pgd,
            radius: rng.gen_range(0.05..2.0),
            step_alpha: rng.gen_range(0.01..3.0),
            steps: rng.gen_range(1..12),
            ..AttackConfig::default()
        };
        for eps in pgd_trace(grad_at, &x, &cfg, None).unwrap() {
            worst_excess = worst_excess.max(eps.norm_l2() - cfg.radius);
        }
        let one = AttackConfig {
            steps: 1,
            step_alpha: cfg.radius * rng.gen_range(1.0..4.0),
            ..cfg.clone()
        };
        let pgd = pgd_trace(grad_at, &x, &one, None).unwrap().pop().unwrap();
        let fgm = fgm_perturb(&grad_at(&x).unwrap(), one.radius).unwrap();
        worst_fgm_gap = worst_fgm_gap.max(pgd.sub(&fgm).unwrap().max_abs());
    }
    let ok = worst_norm <= 1e-6 && worst_excess <= 1e-9 && worst_fgm_gap <= 1e-6;
    verdict(
        1,
        "attack geometry",
        ok,
        Duration::from_secs(60),
        start.elapsed(),
        format!("max |‖fgm‖-r| {worst_norm:.1e}, max PGD excess {worst_excess:.1e}, max |PGD1-FGM| {worst_fgm_gap:.1e}"),
    );
}

#[test]
fn switching_soundness() {
    let start = Instant::now();
    let spec = NetSpec::new(Role::Discriminator, 0, 0).with_blocks(3).with_base_channels(4);
    let mut critic = NetParams::init(spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let x = Tensor::randn([1, 3, 6, 6], 0.5, &mut ChaCha8Rng::seed_from_u64(6));
    let site = InjectionSite::Input;
    let hw = (6, 6);
    let w0 = msgan::adaptive::compute_w_sigma(&critic, site, hw);
    let k0 = critic_loss_grad(&critic, &x, site, &x).unwrap().norm_l2();
    // Threshold a factor 10 above W_σ until the rescale, a factor 10 below after.
    let cfg = AttackConfig {
        mode: AttackMode::Adaptive,
        radius: 0.05,
        step_alpha: k0 / (2.0 * 10.0 * w0),
        steps: 2,
        site,
        kappa_window: 200,
    };
    let flip_at = 100;
    let mut cache = WSigmaCache::new(10);
    let mut kappa = KappaEstimator::new(cfg.kappa_window);
    let mut log = Vec::new();
    for step in 0..200 {
        if step == flip_at {
            critic.last_layer_mut().weight.map_inplace(|v| 100.0 * v);
        }
        let p = &critic;
        let out = attack_step(
            |pt| critic_loss_grad(p, &x, site, pt),
            &clean_point(p, &x, site),
            &cfg,
            &mut kappa,
            || cache.get(p, hw, step),
            step,
        )
        .unwrap();
        log.push(out.decision.unwrap());
    }
    let rule_ok = log.iter().all(|d| (d.chosen == AttackKind::Pgd) == (d.w_sigma < d.kappa / (2.0 * d.alpha)));
    let first_fgm = log.iter().position(|d| d.chosen == AttackKind::Fgm);
    let flip_ok = first_fgm == Some(flip_at) && log[flip_at..].iter().all(|d| d.chosen == AttackKind::Fgm);
    verdict(
        2,
        "switching soundness",
        rule_ok && flip_ok,
        Duration::from_secs(120),
        start.elapsed(),
        format!("rule holds on all 200 steps: {rule_ok}; first FGM at {first_fgm:?}, scripted {flip_at}"),
    );
}

/// Second evaluator written directly from per-layer norms.
mod reference {
    pub fn lip(spectral: &[f64]) -> f64 {
        let whole: f64 = spectral.iter().product();
        let mut total = 0.0;
        for i in 0..spectral.len() {
            total += spectral[..=i].iter().product::<f64>();
        }
        whole * total
    }

    pub struct Net<'a> {
        pub spectral: &'a [f64],
        pub frobenius: &'a [f64],
        pub b: f64,
        pub kappa: f64,
    }

    impl Net<'_> {
        fn w_dot(&self) -> f64 {
            self.spectral.iter().product()
        }

        fn w_check(&self) -> f64 {
            self.spectral.iter().zip(self.frobenius).map(|(s, f)| f * f / (s * s)).sum()
        }

        pub fn fgm(&self, r: f64) -> f64 {
            let w = self.w_dot();
            w * w * (1.0 + r / self.kappa * (1.0 / self.b + w)).powi(2) * self.w_check()
        }

        pub fn pgd(&self, r_steps: usize, alpha: f64) -> f64 {
            let l = lip(self.spectral);
            let num = 1.0 - (2.0 * alpha / self.kappa).powf(r_steps as f64) * l.powf(r_steps as f64);
            let den = self.kappa - 2.0 * alpha * l;
            let w = self.w_dot();
            (num / den).powi(2) * (w + w * w) * self.w_check()
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn rhs(b: f64, r: f64, d: usize, h: usize, f: f64, m: usize, beta: f64, gamma: f64) -> f64 {
        let (d, h, m) = (d as f64, h as f64, m as f64);
        let top = (b + r) * (b + r) * d * d * h * (d * h).ln() * f + (m / beta).ln();
        (top / (gamma * gamma * m)).sqrt()
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

struct Draw {
    spectral: Vec<f64>,
    frobenius: Vec<f64>,
    terms: BoundTerms,
    r: f64,
    t: usize,
    alpha: f64,
}

fn draw(rng: &mut ChaCha8Rng) -> Draw {
    let d = rng.gen_range(2..8);
    let spectral: Vec<f64> = (0..d).map(|_| rng.gen_range(0.3..1.6)).collect();
    let frobenius: Vec<f64> = spectral.iter().map(|s| s * rng.gen_range(1.0..4.0)).collect();
    let norms: Vec<LayerNorm> = spectral
        .iter()
        .zip(&frobenius)
        .map(|(&s, &f)| LayerNorm { spectral: s, frobenius: f })
        .collect();
    let kappa = rng.gen_range(0.05..5.0);
    let lip = lip_bar(&spectral);
    let mut alpha = rng.gen_range(0.001..2.0);
    // Stay away from the removable pole at q = 1.
    while (2.0 * alpha * lip / kappa - 1.0).abs() < 1e-3 {
        alpha = rng.gen_range(0.001..2.0);
    }
    let terms = BoundTerms::from_layers(
        &norms,
        rng.gen_range(1..64),
        rng.gen_range(0.2..10.0),
        kappa,
        rng.gen_range(0.01..2.0),
        rng.gen_range(0.01..0.5),
        rng.gen_range(1..10_000),
    );
    Draw {
        spectral,
        frobenius,
        terms,
        r: rng.gen_range(0.01..3.0),
        t: rng.gen_range(1..10),
        alpha,
    }
}

#[test]
fn bound_formula_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let s = draw(&mut rng);
        let t = &s.terms;
        let net = reference::Net {
            spectral: &s.spectral,
            frobenius: &s.frobenius,
            b: t.b,
            kappa: t.kappa,
        };
        let (fa, fb) = (f_fgm(t, s.r).unwrap(), net.fgm(s.r));
        let (pa, pb) = (f_pgd(t, s.t, s.alpha).unwrap(), net.pgd(s.t, s.alpha));
        let rhs_a = rhs(t, fa, s.r);
        let rhs_b = reference::rhs(t.b, s.r, t.d, t.h, fb, t.m, t.beta, t.gamma);
        let rhs_pa = rhs(t, pa, s.r);
        let rhs_pb = reference::rhs(t.b, s.r, t.d, t.h, pb, t.m, t.beta, t.gamma);
        for e in [
            rel(lip_bar(&s.spectral), reference::lip(&s.spectral)),
            rel(fa, fb),
            rel(pa, pb),
            rel(rhs_a, rhs_b),
            rel(rhs_pa, rhs_pb),
        ] {
            worst = worst.max(e);
        }
    }

    let mut mono_fail = 0;
    for _ in 0..200 {
        let s = draw(&mut rng);
        let t = &s.terms;
        let (r1, r2) = (s.r, s.r * rng.gen_range(1.01..3.0));
        if rhs(t, f_fgm(t, r2).unwrap(), r2) <= rhs(t, f_fgm(t, r1).unwrap(), r1) {
            mono_fail += 1;
        }
        let f = f_fgm(t, s.r).unwrap();
        let mut wider = t.clone();
        wider.gamma *= rng.gen_range(1.01..3.0);
        if rhs(&wider, f, s.r) >= rhs(t, f, s.r) {
            mono_fail += 1;
        }
        // PGD factor grows with the step count below the pole.
        let q_alpha = t.kappa / (2.0 * t.lip_bar) * rng.gen_range(0.05..0.95);
        let q = 2.0 * q_alpha * t.lip_bar / t.kappa;
        for steps in 1..8 {
            let (a, b) = (f_pgd(t, steps, q_alpha).unwrap(), f_pgd(t, steps + 1, q_alpha).unwrap());
            let strict = q.powi(steps as i32) > 1e-10;
            if b < a || (strict && b <= a) {
                mono_fail += 1;
            }
        }
    }
    verdict(
        3,
        "bound formula equivalence",
        worst <= 1e-10 && mono_fail == 0,
        Duration::from_secs(60),
        start.elapsed(),
        format!("max relative disagreement {worst:.1e} over 1000 draws; {mono_fail} monotonicity violations over 200 configs"),
    );
}

fn materialize(op: &dyn LinearOperator) -> DMatrix<f64> {
    let (n, m) = (op.in_dim(), op.out_dim());
    let mut out = DMatrix::zeros(m, n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        for (i, v) in op.apply(&e).into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    out
}

#[test]
fn spectral_norm_accuracy() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rule = PowerIteration {
        max_iters: 5000,
        tol: 1e-12,
    };
    let mut worst_dense: f64 = 0.0;
    for _ in 0..100 {
        let (r, c) = (rng.gen_range(1..=128), rng.gen_range(1..=128));
        let data: Vec<f64> = (0..r * c).map(|_| rng.sample(StandardNormal)).collect();
        let svd = DMatrix::from_row_slice(r, c, &data).singular_values().max();
        let got = spectral_norm(&DenseOperator::new(r, c, data), rule);
        worst_dense = worst_dense.max(rel(got, svd));
    }
    let mut worst_conv: f64 = 0.0;
    for _ in 0..20 {
        let (co, ci, k) = (rng.gen_range(1..5), rng.gen_range(1..5), [1, 3][rng.gen_range(0..2)]);
        let w = Tensor::randn([co, ci, k, k], 1.0, &mut rng);
        let hw = (rng.gen_range(k..8), rng.gen_range(k..8));
        let op = ConvOperator::new(&w, hw);
        let svd = materialize(&op).singular_values().max();
        worst_conv = worst_conv.max(rel(spectral_norm(&op, rule), svd));
    }
    verdict(
        4,
        "spectral norm accuracy",
        worst_dense <= 1e-4 && worst_conv <= 1e-4,
        Duration::from_secs(120),
        start.elapsed(),
        format!("max relative error {worst_dense:.1e} on 100 dense, {worst_conv:.1e} on 20 conv operators"),
    );
}

fn linear_critic(w: Tensor) -> impl Fn(&Graph, Var) -> msgan::Result<Var> {
    move |g: &Graph, x: Var| {
        let n = g.shape(x)[0];
        g.sum_to(g.mul(x, g.constant(w.clone()))?, [n, 1, 1, 1])
    }
}

fn gp_value(p: &NetParams, real: &Tensor, fake: &Tensor, u: &[f64]) -> f64 {
    let g = Graph::new();
    let net = p.bind(&g, false);
    let critic = |g: &Graph, x: Var| discriminator_forward_graph(g, &net, x, None);
    g.item(gradient_penalty(&g, &critic, real, fake, u).unwrap())
}

#[test]
fn loss_correctness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let lambda = LossWeights::default().lambda_gp;
    let (real, fake) = (randn([2, 3, 4, 4], &mut rng), randn([2, 3, 4, 4], &mut rng));
    let w = randn([1, 3, 4, 4], &mut rng);
    let unit = w.scale(1.0 / w.norm_l2());
    let g = Graph::new();
    let gp_unit = lambda * g.item(gradient_penalty(&g, &linear_critic(unit.clone()), &real, &fake, &[0.3, 0.7]).unwrap());
    let gp_double = lambda * g.item(gradient_penalty(&g, &linear_critic(unit.scale(2.0)), &real, &fake, &[0.3, 0.7]).unwrap());
    let penalty_ok = gp_unit.abs() <= 1e-6 && (gp_double - lambda).abs() <= 1e-6;

    let spec = NetSpec::new(Role::Discriminator, 0, 0).with_blocks(3).with_base_channels(4);
    let critic = NetParams::init(spec, &mut rng).unwrap();
    let (r1, f1) = (Tensor::randn([1, 3, 6, 6], 0.5, &mut rng), Tensor::randn([1, 3, 6, 6], 0.5, &mut rng));
    let u = [0.4];
    let g = Graph::new();
    let net = critic.bind(&g, true);
    let cf = |g: &Graph, x: Var| discriminator_forward_graph(g, &net, x, None);
    let gp = gradient_penalty(&g, &cf, &r1, &f1, &u).unwrap();
    let vars = net.vars();
    let grads = g.grad(gp, &vars).unwrap();
    let mut worst_fd: f64 = 0.0;
    let h = 1e-6;
    for slot in [0, vars.len() / 2, vars.len() - 2] {
        let analytic = g.value(grads[slot]);
        for i in (0..analytic.len()).step_by(3).take(12) {
            let (mut a, mut b) = (critic.clone(), critic.clone());
            a.tensors_mut()[slot].data_mut()[i] += h;
            b.tensors_mut()[slot].data_mut()[i] -= h;
            let fd = (gp_value(&a, &r1, &f1, &u) - gp_value(&b, &r1, &f1, &u)) / (2.0 * h);
            let an = analytic.data()[i];
            let scale = fd.abs().max(an.abs());
            if scale > 1e-6 {
                worst_fd = worst_fd.max((fd - an).abs() / scale);
            }
        }
    }

    let (out, target) = (randn([1, 3, 7, 5], &mut rng), randn([1, 3, 7, 5], &mut rng));
    let g = Graph::new();
    let rec = g.item(reconstruction_loss(&g, g.constant(out.clone()), g.constant(target.clone())).unwrap());
    let mut naive = 0.0;
    for c in 0..3 {
        for y in 0..7 {
            for x in 0..5 {
                naive += (out.at(0, c, y, x) - target.at(0, c, y, x)).powi(2);
            }
        }
    }
    let rec_err = (rec - naive).abs();
    verdict(
        5,
        "loss correctness",
        penalty_ok && worst_fd < 1e-3 && rec_err <= 1e-6,
        Duration::from_secs(120),
        start.elapsed(),
        format!(
            "λ·GP unit {gp_unit:.1e}, doubled {gp_double:.6} (λ={lambda}); GP grad vs FD {worst_fd:.1e}; rec vs naive {rec_err:.1e}"
        ),
    );
}

#[test]
fn metric_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ext = RandomProjection::default();
    let a = Tensor::randn([1, 3, 32, 32], 0.5, &mut rng);
    let self_sifid = sifid(&a, &a, &ext).unwrap();

    let x = DMatrix::from_fn(300, 5, |_, _| rng.sample::<f64, _>(StandardNormal));
    let delta = DVector::from_fn(5, |i, _| 0.3 * i as f64 - 0.5);
    let mut y = x.clone();
    for mut row in y.row_iter_mut() {
        row += delta.transpose();
    }
    let shift = frechet_distance(&covariance(&x).unwrap(), &covariance(&y).unwrap()).unwrap();
    let shift_err = (shift - delta.norm_squared()).abs();

    let mut rmse_err: f64 = 0.0;
    for _ in 0..20 {
        let (p, q) = (Tensor::randn([1, 3, 9, 11], 60.0, &mut rng), Tensor::randn([1, 3, 9, 11], 60.0, &mut rng));
        let mut acc = 0.0;
        for c in 0..3 {
            for yy in 0..9 {
                for xx in 0..11 {
                    acc += (p.at(0, c, yy, xx) - q.at(0, c, yy, xx)).powi(2);
                }
            }
        }
        rmse_err = rmse_err.max((rmse(&p, &q).unwrap() - (acc / 297.0).sqrt()).abs());
    }

    let nss = NssModel::builtin();
    let camera = niqe(&load_gray(&fixture("camera.png")).unwrap(), nss).unwrap();
    let coins = niqe(&load_gray(&fixture("coins.png")).unwrap(), nss).unwrap();
    let (cam_rel, coin_rel) = (rel(camera, 3.0963768579403177), rel(coins, 3.6226789813501847));
    let noise_data = (0..192 * 192).map(|_| rng.gen_range(0..=255u8) as f64 / 127.5 - 1.0).collect();
    let noise = niqe(&Tensor::from_vec([1, 1, 192, 192], noise_data).unwrap(), nss).unwrap();
    let ok = self_sifid <= 1e-8
        && shift_err <= 1e-6
        && rmse_err <= 1e-9
        && cam_rel < 0.05
        && coin_rel < 0.05
        && noise > camera.max(coins);
    verdict(
        6,
        "metric oracles",
        ok,
        Duration::from_secs(120),
        start.elapsed(),
        format!(
            "SIFID(a,a) {self_sifid:.1e}; mean-shift error {shift_err:.1e}; RMSE vs naive {rmse_err:.1e}; \
             NIQE camera {camera:.4} ({cam_rel:.1e} rel), coins {coins:.4} ({coin_rel:.1e} rel), noise {noise:.2}"
        ),
    );
}

/// Desk-scale training settings: 64×64 input, four scales, reduced width
/// and one critic/generator update per iteration.
fn smoke_config(iters: usize) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.pyramid.min_size_px = 28;
    c.model.base_channels = 16;
    c.train.d_steps = 1;
    c.train.g_steps = 1;
    c.train.iters_per_scale = iters;
    c.train.log_every = 100;
    c.attack.mode = AttackMode::Adaptive;
    c
}

fn smoke_image() -> Tensor {
    resample(&load_image(&fixture("camera.png")).unwrap(), (64, 64)).unwrap()
}

#[test]
fn smoke_training() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let img = smoke_image();
    let cfg = smoke_config(500);
    let (schedule, pyramid) = prepare(&img, &cfg).unwrap();
    let out = train_all(&img, &cfg, dir.path(), &mut |_| {}).unwrap();
    let elapsed = start.elapsed();
    let rec = to_unit(&out.ladder.reconstruct(0).unwrap());
    let rec_rmse = rmse(&rec, &to_unit(pyramid.level(0))).unwrap();

    let log = read_decisions(&dir.path().join("decisions.csv")).unwrap();
    let pgd = log.iter().filter(|r| r.decision.chosen == AttackKind::Pgd).count();
    let rule_ok = log.iter().all(|r| {
        let d = &r.decision;
        (d.chosen == AttackKind::Pgd) == (d.w_sigma < d.kappa / (2.0 * d.alpha))
    });
    let single = pgd == 0 || pgd == log.len();
    // Smallest ratio W_σ / threshold: above 1 everywhere means FGM was forced.
    let min_ratio = log.iter().map(|r| r.decision.w_sigma / r.decision.threshold).fold(f64::INFINITY, f64::min);
    let max_ratio = log.iter().map(|r| r.decision.w_sigma / r.decision.threshold).fold(0.0, f64::max);
    let log_ok = !log.is_empty() && rule_ok;
    let ok = schedule.levels() == 4 && rec_rmse < 0.05 && log_ok;
    verdict(
        7,
        "smoke training",
        ok,
        Duration::from_secs(30 * 60),
        elapsed,
        format!(
            "sizes {:?}; rec RMSE {rec_rmse:.4}; {} decisions, {pgd} PGD; single-mode {single}; \
             W_σ/threshold in [{min_ratio:.3e}, {max_ratio:.3e}]; rule holds {rule_ok}",
            schedule.sizes,
            log.len()
        ),
    );
}

#[test]
fn determinism_and_persistence() {
    let start = Instant::now();
    let img = smoke_image();
    let cfg = smoke_config(20);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = train_all(&img, &cfg, a.path(), &mut |_| {}).unwrap();
    let rb = train_all(&img, &cfg, b.path(), &mut |_| {}).unwrap();
    let hashes = |o: &msgan::trainer::TrainOutput| -> Vec<(String, String)> {
        o.manifest.scales.iter().map(|s| (s.generator_hash.clone(), s.discriminator_hash.clone())).collect()
    };
    let same = hashes(&ra) == hashes(&rb);

    let logged = read_bound_reports(&a.path().join("bounds.jsonl")).unwrap();
    let finals: Vec<_> = logged.iter().filter(|r| r.step == cfg.train.iters_per_scale).collect();
    let recomputed = recompute_reports(a.path()).unwrap();
    let mut worst: f64 = 0.0;
    for (x, y) in recomputed.iter().zip(&finals) {
        for (p, q) in [
            (x.rhs_fgm, y.rhs_fgm),
            (x.rhs_pgd, y.rhs_pgd),
            (x.f_fgm, y.f_fgm),
            (x.f_pgd, y.f_pgd),
            (x.terms.lip_bar, y.terms.lip_bar),
            (x.terms.kappa, y.terms.kappa),
            (x.margin_loss_clean, y.margin_loss_clean),
            (x.margin_loss_adv, y.margin_loss_adv),
        ] {
            worst = worst.max((p - q).abs() / q.abs().max(1.0));
        }
    }
    let bounds_ok = recomputed.len() == finals.len() && !finals.is_empty() && worst <= 1e-9;

    let mut sr_cfg = TrainConfig::super_resolution();
    sr_cfg.pyramid.min_size_px = 25;
    sr_cfg.pyramid.scale_factor = sr_step_factor(4.0, 5);
    sr_cfg.model.base_channels = 4;
    sr_cfg.model.n_blocks = 3;
    sr_cfg.train.iters_per_scale = 2;
    sr_cfg.train.d_steps = 1;
    sr_cfg.train.g_steps = 1;
    let toy = resample(&smoke_image(), (50, 50)).unwrap();
    let c = tempfile::tempdir().unwrap();
    let sr_model = train_all(&toy, &sr_cfg, c.path(), &mut |_| {}).unwrap();
    let up = super_resolve(&sr_model.ladder, &toy, 4.0, 5, 0).unwrap();
    let sr_ok = up.hw() == (200, 200);

    verdict(
        8,
        "determinism and persistence",
        same && bounds_ok && sr_ok,
        Duration::from_secs(30 * 60),
        start.elapsed(),
        format!(
            "identical hashes over {} scales: {same}; bounds recomputation max rel diff {worst:.1e} on {} reports; SR 50x50 -> {:?}",
            ra.manifest.scales.len(),
            finals.len(),
            up.hw()
        ),
    );
}
