//! Every acceptance criterion at its stated tolerance, one PASS/FAIL line
//! each. Run a subset with `cargo test --test acceptance -- 1 5`.

use std::collections::HashMap;
use std::fmt::Display;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use ditac::activation::{activate_grad, build_lut, gelu, lut_backward, lut_forward, ActivationConfig, Variant};
use ditac::cpab::{inverse_transform, transform, transform_grad_theta, transform_grad_x, Cpab};
use ditac::harness::{train, ExperimentConfig, HistoryRow, RunReport, RunStatus, Task};
use ditac::nn::{mse_grad, mse_loss, ActivationKind, ActivationSpec, Head, MlpModel};
use ditac::prior::SmoothnessPrior;
use ditac::tessellation::{CpaBasis, Tessellation};
use ditac_validation::{median, workspace_root, Checks, Suite};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

const SEEDS: [u64; 3] = [0, 1, 2];

fn s<E: Display>(e: E) -> String {
    e.to_string()
}

fn basis(n: usize, zb: bool) -> Result<CpaBasis, String> {
    CpaBasis::new(Tessellation::new(-3.0, 3.0, n).map_err(s)?, zb).map_err(s)
}

fn normal_theta(rng: &mut ChaCha8Rng, d: usize, sd: f64) -> Vec<f64> {
    let n = Normal::new(0.0, sd).expect("positive sd");
    (0..d).map(|_| n.sample(rng)).collect()
}

/// Random direction with a norm drawn uniformly from `(0, max_norm]`.
fn bounded_theta(rng: &mut ChaCha8Rng, d: usize, max_norm: f64) -> Vec<f64> {
    let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    let norm = dir.iter().map(|v: &f64| v * v).sum::<f64>().sqrt().max(1e-300);
    let r = max_norm * (1.0 - rng.random::<f64>());
    dir.iter().map(|v| v * r / norm).collect()
}

fn rk4(b: &CpaBasis, theta: &[f64], x0: f64, steps: usize) -> Result<f64, String> {
    let v = |x: f64| b.velocity_at_extended(theta, x).map_err(s);
    let h = 1.0 / steps as f64;
    let mut x = x0;
    for _ in 0..steps {
        let k1 = v(x)?;
        let k2 = v(x + 0.5 * h * k1)?;
        let k3 = v(x + 0.5 * h * k2)?;
        let k4 = v(x + h * k3)?;
        x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    Ok(x)
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn criterion_1(c: &mut Checks) -> Result<(), String> {
    let start = Instant::now();
    let b = Arc::new(basis(10, true)?);
    let theta = vec![0.0; b.dim()];
    let cfg = ActivationConfig::new(Variant::Ditac, b.clone(), theta.clone(), 0, 0.01).map_err(s)?;
    let ev = cfg.evaluator().map_err(s)?;
    let (mut t_err, mut g_err) = (0.0f64, 0.0f64);
    for i in 0..10_000 {
        let x = -3.0 + 6.0 * i as f64 / 9_999.0;
        t_err = t_err.max((transform(&b, &theta, x, 1.0).map_err(s)?.y - x).abs());
        let wide = -6.0 + 12.0 * i as f64 / 9_999.0;
        g_err = g_err.max((ev.value(wide).map_err(s)? - gelu(wide)).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    c.check(t_err < 1e-12, format!("max |T(x) - x| over 1e4 grid points = {t_err:.2e} (< 1e-12)"));
    c.check(g_err < 1e-12, format!("max |DiTAC(x) - GELU(x)| on [-6, 6] = {g_err:.2e} (< 1e-12)"));
    c.check(secs < 1.0, format!("runtime {secs:.3} s (< 1 s)"));
    Ok(())
}

fn criterion_2(c: &mut Checks) -> Result<(), String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20_002);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..=16);
        let zb = rng.random_bool(0.5);
        let b = basis(n, zb)?;
        let theta = normal_theta(&mut rng, b.dim(), 0.5);
        let x = rng.random_range(-3.0..3.0);
        let closed = transform(&b, &theta, x, 1.0).map_err(s)?.y;
        worst = worst.max((closed - rk4(&b, &theta, x, 100_000)?).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    c.check(worst < 1e-6, format!("max |closed form - RK4(1e5 steps)| over 100 cases = {worst:.2e} (< 1e-6)"));
    c.check(secs < 30.0, format!("runtime {secs:.1} s (< 30 s)"));
    Ok(())
}

fn network_gradcheck(rng: &mut ChaCha8Rng, variant: Variant) -> Result<f64, String> {
    let mut spec = ActivationSpec::new(ActivationKind::Ditac(variant));
    if variant == Variant::GeDitac {
        spec.ditac.a = 0.0;
    }
    let mut model = MlpModel::build(&[2, 8, 1], &spec, Head::Regression, rng).map_err(s)?;
    model.set_w_reg(1e-2).map_err(s)?;
    let info = model.param_info();
    for (group, inf) in model.params_mut().into_iter().zip(info) {
        if !inf.decay {
            group.iter_mut().for_each(|v| *v += rng.random_range(-0.4..0.4));
        }
    }
    let x = DMatrix::from_fn(12, 2, |_, _| rng.random_range(-3.0..3.0));
    let y = DMatrix::from_fn(12, 1, |_, _| rng.random_range(-1.0..1.0));
    let objective = |m: &mut MlpModel| -> Result<f64, String> {
        let p = m.predict(&x).map_err(s)?;
        Ok(mse_loss(&p, &y).map_err(s)? + m.regularization().map_err(s)?)
    };
    let p = model.forward(&x).map_err(s)?;
    let analytic = model.backward(&mse_grad(&p, &y).map_err(s)?).map_err(s)?.flat();
    let base = model.flat_params();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut q = base.clone();
        q[i] += h;
        model.set_flat_params(&q).map_err(s)?;
        let lp = objective(&mut model)?;
        q[i] -= 2.0 * h;
        model.set_flat_params(&q).map_err(s)?;
        let lm = objective(&mut model)?;
        worst = worst.max(rel_err(analytic[i], (lp - lm) / (2.0 * h), 1e-6));
    }
    Ok(worst)
}

fn criterion_3(c: &mut Checks) -> Result<(), String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(30_003);
    let b = basis(10, true)?;
    let h = 1e-5;
    let mut worst_theta = 0.0f64;
    for _ in 0..100 {
        let theta = normal_theta(&mut rng, b.dim(), 0.5);
        let x = rng.random_range(-3.0..3.0);
        let g = transform_grad_theta(&b, &theta, x).map_err(s)?;
        let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for j in 0..b.dim() {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[j] += h;
            tm[j] -= h;
            let fd = (transform(&b, &tp, x, 1.0).map_err(s)?.y - transform(&b, &tm, x, 1.0).map_err(s)?.y)
                / (2.0 * h);
            worst_theta = worst_theta.max(rel_err(g[j], fd, scale.max(1e-3)));
        }
    }
    let mut worst_x = 0.0f64;
    let hx = 1e-6;
    for _ in 0..100 {
        let theta = normal_theta(&mut rng, b.dim(), 0.5);
        let x = rng.random_range(-2.99..2.99);
        let g = transform_grad_x(&b, &theta, x).map_err(s)?;
        let fd = (transform(&b, &theta, x + hx, 1.0).map_err(s)?.y
            - transform(&b, &theta, x - hx, 1.0).map_err(s)?.y)
            / (2.0 * hx);
        worst_x = worst_x.max(rel_err(g, fd, 1e-12));
    }
    c.check(worst_theta < 1e-5, format!("dT/dtheta vs central differences: worst rel. error {worst_theta:.2e} (< 1e-5)"));
    c.check(worst_x < 1e-6, format!("dT/dx vs central differences: worst rel. error {worst_x:.2e} (< 1e-6)"));
    for variant in Variant::ALL {
        let err = network_gradcheck(&mut rng, variant)?;
        c.check(err < 1e-4, format!("2-8-1 exact-mode {variant} network gradcheck: worst rel. error {err:.2e} (< 1e-4)"));
    }
    let secs = start.elapsed().as_secs_f64();
    c.check(secs < 60.0, format!("runtime {secs:.1} s (< 60 s)"));
    Ok(())
}

fn criterion_4(c: &mut Checks) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(40_004);
    let mut violations = 0usize;
    let mut worst_inv = 0.0f64;
    let mut worst_comp = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..=16);
        let b = basis(n, true)?;
        let theta = bounded_theta(&mut rng, b.dim(), 5.0);
        let cpab = Cpab::new(&b, &theta).map_err(s)?;
        let mut prev = f64::NEG_INFINITY;
        for i in 0..10_000 {
            let x = -3.0 + 6.0 * i as f64 / 9_999.0;
            let y = cpab.apply(x).map_err(s)?;
            if y <= prev {
                violations += 1;
            }
            prev = y;
        }
        for _ in 0..20 {
            let x = rng.random_range(-3.0..=3.0);
            let y = cpab.apply(x).map_err(s)?;
            worst_inv = worst_inv.max((inverse_transform(&b, &theta, y).map_err(s)? - x).abs());
            let (t1, t2) = (rng.random_range(0.0..1.5), rng.random_range(0.0..1.5));
            let two_step = cpab.flow(cpab.flow(x, t1).map_err(s)?.y, t2).map_err(s)?.y;
            let one_step = cpab.flow(x, t1 + t2).map_err(s)?.y;
            worst_comp = worst_comp.max((two_step - one_step).abs());
        }
    }
    c.check(violations == 0, format!("strict monotonicity on 1e4-point grids, 100 thetas with |theta| <= 5: {violations} violations"));
    c.check(worst_inv < 1e-8, format!("max |T^-1(T(x)) - x| = {worst_inv:.2e} (< 1e-8)"));
    c.check(worst_comp < 1e-8, format!("max |phi(phi(x; s); t) - phi(x; s + t)| = {worst_comp:.2e} (< 1e-8)"));
    Ok(())
}

fn lut_max_error(cfg: &ActivationConfig, xs: &[f64]) -> Result<(f64, f64), String> {
    let lut = build_lut(cfg).map_err(s)?;
    let table = lut_forward(&lut, cfg, xs).map_err(s)?;
    let ev = cfg.evaluator().map_err(s)?;
    let mut worst = 0.0f64;
    for (&x, &t) in xs.iter().zip(&table) {
        worst = worst.max((t - ev.value(x).map_err(s)?).abs());
    }
    Ok((worst, 2.0 * lut.max_dx() * lut.step()))
}

fn criterion_5(c: &mut Checks) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(50_005);
    let b = Arc::new(basis(10, true)?);
    let xs: Vec<f64> = (0..100_000).map(|_| rng.random_range(-3.0..=3.0)).collect();
    let mut bound_ok = true;
    let mut min_ratio = f64::INFINITY;
    let mut worst_slack = 0.0f64;
    let mut ste_worst = 0.0f64;
    for _ in 0..20 {
        let theta = bounded_theta(&mut rng, b.dim(), 2.0);
        let coarse = ActivationConfig::new(Variant::Ditac, b.clone(), theta.clone(), 256, 0.01).map_err(s)?;
        let fine = ActivationConfig::new(Variant::Ditac, b.clone(), theta.clone(), 512, 0.01).map_err(s)?;
        let (e256, bound) = lut_max_error(&coarse, &xs)?;
        let (e512, _) = lut_max_error(&fine, &xs)?;
        bound_ok &= e256 <= bound;
        worst_slack = worst_slack.max(e256 / bound);
        min_ratio = min_ratio.min(e256 / e512);

        let lut = build_lut(&coarse).map_err(s)?;
        for &x in lut.grid() {
            let (gx, gt) = lut_backward(&lut, &coarse, &[x], &[1.0]).map_err(s)?;
            let (dx, dt) = activate_grad(&coarse, x).map_err(s)?;
            ste_worst = ste_worst.max((gx[0] - dx).abs());
            for (a, e) in gt.iter().zip(&dt) {
                ste_worst = ste_worst.max((a - e).abs());
            }
        }
    }
    c.check(bound_ok, format!("n_quant=256, 1e5 points, 20 thetas: max error / (2 max dT/dx delta) = {worst_slack:.3} (<= 1)"));
    c.check(min_ratio >= 1.6, format!("halving delta shrinks the max error by at least {min_ratio:.3}x (>= 1.6)"));
    c.check(ste_worst < 1e-10, format!("straight-through vs exact gradients at grid points: max diff {ste_worst:.2e} (< 1e-10)"));
    Ok(())
}

fn criterion_6(c: &mut Checks) -> Result<(), String> {
    let cfg = ExperimentConfig::defaults(Task::Gmm2d);
    c.check(cfg.widths == vec![2, 100, 100, 10], format!("gmm2d widths {:?}", cfg.widths));
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ditac = MlpModel::build(&cfg.widths, &cfg.activation_spec(), Head::Classification, &mut rng)
        .map_err(s)?
        .count_parameters();
    let gelu_net = MlpModel::build(&cfg.widths, &ActivationSpec::new(ActivationKind::Gelu), Head::Classification, &mut rng)
        .map_err(s)?
        .count_parameters();
    c.check(ditac.dense == 11_410, format!("dense parameters {} (= 11,410)", ditac.dense));
    c.check(gelu_net.total == 11_410, format!("GELU network total {} (= 11,410)", gelu_net.total));
    c.check(ditac.per_activation == vec![9, 9], format!("per-DiTAC parameters {:?} (= [9, 9])", ditac.per_activation));
    c.check(ditac.total == 11_428, format!("DiTAC network total {} (= 11,428)", ditac.total));
    Ok(())
}

/// Full-recipe runs shared by the training criteria, keyed by config hash.
struct Runs {
    root: PathBuf,
    done: HashMap<String, (RunReport, Vec<HistoryRow>)>,
}

impl Runs {
    fn new() -> Self {
        let root = workspace_root().canonicalize().unwrap_or_else(|_| workspace_root());
        Self {
            root,
            done: HashMap::new(),
        }
    }

    fn config(&self, task: Task, seed: u64) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::defaults(task);
        cfg.seed = seed;
        cfg.data_seed = seed;
        cfg.mnist_dir = self.root.join("data/mnist5k");
        cfg.auto_mpg_path = Some(self.root.join("data/auto_mpg/auto-mpg.data"));
        cfg
    }

    fn run(&mut self, cfg: &ExperimentConfig) -> Result<(RunReport, Vec<HistoryRow>), String> {
        let key = cfg.content_hash().map_err(s)?;
        if let Some(r) = self.done.get(&key) {
            return Ok(r.clone());
        }
        let t = train(cfg).map_err(s)?;
        let entry = (t.report, t.history);
        self.done.insert(key, entry.clone());
        Ok(entry)
    }
}

fn fmt3(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

fn criterion_7(c: &mut Checks, runs: &mut Runs) -> Result<(), String> {
    let baselines = [ActivationKind::LeakyRelu, ActivationKind::PRelu, ActivationKind::Gelu];
    let mut ditac_1d_a = Vec::new();
    for task in [Task::Reg1dA, Task::Reg2d] {
        let mut ditac = Vec::new();
        let mut best_base = Vec::new();
        let mut slowest = 0.0f64;
        for seed in SEEDS {
            let cfg = runs.config(task, seed);
            let (r, _) = runs.run(&cfg)?;
            slowest = slowest.max(r.wall_clock_secs);
            ditac.push(r.metrics.test_r2.unwrap_or(f64::NEG_INFINITY));
            let mut best = f64::NEG_INFINITY;
            for kind in baselines {
                let mut b = cfg.clone();
                b.activation = kind;
                let (rb, _) = runs.run(&b)?;
                slowest = slowest.max(rb.wall_clock_secs);
                best = best.max(rb.metrics.test_r2.unwrap_or(f64::NEG_INFINITY));
            }
            best_base.push(best);
        }
        let (md, mb) = (median(&ditac), median(&best_base));
        c.check(
            md > mb,
            format!(
                "{task}: median DiTAC R2 {md:.4} > median best-of(LReLU, PReLU, GELU) {mb:.4}; per seed DiTAC {} vs best baseline {}",
                fmt3(&ditac),
                fmt3(&best_base)
            ),
        );
        c.check(slowest <= 1200.0, format!("{task}: slowest run {slowest:.1} s (<= 20 min)"));
        if task == Task::Reg1dA {
            ditac_1d_a = ditac;
        }
    }
    let m = median(&ditac_1d_a);
    c.check(m >= 0.93, format!("reg1d_a on [-1, 1]: median DiTAC R2 {m:.4} (>= 0.93)"));
    Ok(())
}

fn paired_classification(c: &mut Checks, runs: &mut Runs, task: Task) -> Result<(), String> {
    let mut ditac = Vec::new();
    let mut control = Vec::new();
    let mut slowest = 0.0f64;
    for seed in SEEDS {
        let cfg = runs.config(task, seed);
        let (r, _) = runs.run(&cfg)?;
        let mut frozen = cfg.clone();
        frozen.freeze_theta = true;
        let (rf, _) = runs.run(&frozen)?;
        slowest = slowest.max(r.wall_clock_secs).max(rf.wall_clock_secs);
        ditac.push(r.metrics.test_top1.unwrap_or(f64::NEG_INFINITY));
        control.push(rf.metrics.test_top1.unwrap_or(f64::NEG_INFINITY));
    }
    let diffs: Vec<f64> = ditac.iter().zip(&control).map(|(a, b)| a - b).collect();
    let md = median(&diffs);
    c.check(
        md >= 0.0,
        format!(
            "{task}: median paired top-1 gain {md:+.4} (>= 0); DiTAC {} vs theta-frozen GELU control {}",
            fmt3(&ditac),
            fmt3(&control)
        ),
    );
    c.check(slowest <= 900.0, format!("{task}: slowest run {slowest:.1} s (<= 15 min)"));
    Ok(())
}

fn criterion_8(c: &mut Checks, runs: &mut Runs) -> Result<(), String> {
    paired_classification(c, runs, Task::Gmm2d)?;
    paired_classification(c, runs, Task::Mnist)
}

fn criterion_9(c: &mut Checks, runs: &mut Runs) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(90_009);
    let mut min_eig = f64::INFINITY;
    let mut asym = 0.0f64;
    let mut scaling = 0.0f64;
    for n in 2..=16 {
        for zb in [true, false] {
            let b = basis(n, zb)?;
            let prior = SmoothnessPrior::with_defaults(&b).map_err(s)?;
            let p = prior.precision();
            asym = asym.max((p - p.transpose()).abs().max());
            min_eig = min_eig.min(p.clone().symmetric_eigen().eigenvalues.min());
            let theta = normal_theta(&mut rng, b.dim(), 1.0);
            let k = rng.random_range(-4.0..4.0);
            let scaled: Vec<f64> = theta.iter().map(|v| k * v).collect();
            let l1 = prior.reg_loss(&[&theta]).map_err(s)?;
            let lk = prior.reg_loss(&[&scaled]).map_err(s)?;
            scaling = scaling.max(rel_err(lk, k * k * l1, 1e-300));
        }
    }
    c.check(asym < 1e-12 && min_eig > 0.0, format!("precision symmetric (max asymmetry {asym:.1e}) and SPD (min eigenvalue {min_eig:.3e})"));
    c.check(scaling < 1e-12, format!("reg_loss(k theta) = k^2 reg_loss(theta): worst rel. error {scaling:.1e}"));

    for task in Task::ALL {
        let cfg = runs.config(task, 0);
        let w = cfg.effective_w_reg();
        let (r, history) = runs.run(&cfg)?;
        let finite = history
            .iter()
            .all(|h| h.train_loss.is_finite() && h.test_loss.is_finite());
        let completed = r.status == RunStatus::Completed;
        c.check(
            completed && finite && w == 1e-4,
            format!(
                "{task} (DiTAC, w_reg {w:e}): {} after {} steps, {} logged losses all finite: {finite}",
                if completed { "completed" } else { "diverged" },
                r.steps_completed,
                history.len()
            ),
        );
    }
    Ok(())
}

fn criterion_10(c: &mut Checks, runs: &mut Runs) -> Result<(), String> {
    for task in Task::ALL {
        let mut cfg = runs.config(task, 7);
        cfg.iterations = 300;
        cfg.epochs = 2;
        cfg.mnist_subset = 1000;
        let a = train(&cfg).map_err(s)?.report;
        let b = train(&cfg).map_err(s)?.report;
        c.check(
            a.content_hash == b.content_hash,
            format!("{task} short run twice: {} / {}", &a.content_hash[..16], &b.content_hash[..16]),
        );
    }
    let cfg = runs.config(Task::Reg1dA, 0);
    let (first, _) = runs.run(&cfg)?;
    let again = train(&cfg).map_err(s)?.report;
    c.check(
        first.content_hash == again.content_hash,
        format!("reg1d_a full recipe re-run: {} / {}", &first.content_hash[..16], &again.content_hash[..16]),
    );
    Ok(())
}

fn main() -> ExitCode {
    let mut suite = Suite::from_args();
    let mut runs = Runs::new();
    suite.run("1", "identity reduction at theta = 0", criterion_1);
    suite.run("2", "closed form matches RK4", criterion_2);
    suite.run("3", "gradient correctness", criterion_3);
    suite.run("4", "diffeomorphism properties", criterion_4);
    suite.run("5", "lookup-table fidelity", criterion_5);
    suite.run("6", "parameter accounting", criterion_6);
    suite.run("7", "toy regression, DiTAC vs baselines", |c| criterion_7(c, &mut runs));
    suite.run("8", "toy classification, DiTAC vs theta-frozen control", |c| criterion_8(c, &mut runs));
    suite.run("9", "prior properties and training stability", |c| criterion_9(c, &mut runs));
    suite.run("10", "determinism", |c| criterion_10(c, &mut runs));
    suite.finish()
}
