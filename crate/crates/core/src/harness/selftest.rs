//! Fast property checks runnable from the command line.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::activation::{activate_exact, build_lut, gelu, ActivationConfig, Variant};
use crate::cpab::{inverse_transform, transform, transform_grad_theta, transform_grad_x, Cpab};
use crate::datagen::seeded_rng;
use crate::error::Result;
use crate::nn::{ActivationKind, ActivationSpec, Head, MlpModel};
use crate::prior::SmoothnessPrior;
use crate::tessellation::{CpaBasis, Tessellation};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome { name, passed, detail }
}

fn basis(n: usize) -> Result<CpaBasis> {
    CpaBasis::new(Tessellation::new(-3.0, 3.0, n)?, true)
}

fn random_theta<R: Rng>(dim: usize, sd: f64, rng: &mut R) -> Vec<f64> {
    let normal = Normal::new(0.0, sd).expect("positive sd");
    (0..dim).map(|_| normal.sample(rng)).collect()
}

fn rk4(basis: &CpaBasis, theta: &[f64], x0: f64, steps: usize) -> Result<f64> {
    let h = 1.0 / steps as f64;
    let mut x = x0;
    for _ in 0..steps {
        let k1 = basis.velocity_at_extended(theta, x)?;
        let k2 = basis.velocity_at_extended(theta, x + 0.5 * h * k1)?;
        let k3 = basis.velocity_at_extended(theta, x + 0.5 * h * k2)?;
        let k4 = basis.velocity_at_extended(theta, x + h * k3)?;
        x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    Ok(x)
}

fn identity_check() -> Result<CheckOutcome> {
    let b = Arc::new(basis(10)?);
    let theta = vec![0.0; b.dim()];
    let cfg = ActivationConfig::new(Variant::Ditac, b.clone(), theta.clone(), 0, 0.01)?;
    let mut worst: f64 = 0.0;
    for i in 0..=1000 {
        let x = -4.0 + 8.0 * i as f64 / 1000.0;
        if b.tessellation().contains(x) {
            worst = worst.max((transform(&b, &theta, x, 1.0)?.y - x).abs());
        }
        worst = worst.max((activate_exact(&cfg, x)? - gelu(x)).abs());
    }
    Ok(check("identity_at_zero_theta", worst < 1e-12, format!("max deviation {worst:.3e}")))
}

fn rk4_check() -> Result<CheckOutcome> {
    let mut rng = seeded_rng(11);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let n = rng.random_range(2..=16);
        let b = basis(n)?;
        let theta = random_theta(b.dim(), 0.5, &mut rng);
        let x = rng.random_range(-3.0..3.0);
        let closed = transform(&b, &theta, x, 1.0)?.y;
        worst = worst.max((closed - rk4(&b, &theta, x, 20_000)?).abs());
    }
    Ok(check("closed_form_matches_rk4", worst < 1e-6, format!("max error {worst:.3e}")))
}

fn gradient_check() -> Result<CheckOutcome> {
    let mut rng = seeded_rng(12);
    let b = basis(10)?;
    let mut worst_theta: f64 = 0.0;
    let mut worst_x: f64 = 0.0;
    for _ in 0..10 {
        let theta = random_theta(b.dim(), 0.5, &mut rng);
        let x = rng.random_range(-2.9..2.9);
        let g = transform_grad_theta(&b, &theta, x)?;
        for (j, &gj) in g.iter().enumerate() {
            let h = 1e-6;
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[j] += h;
            tm[j] -= h;
            let fd = (transform(&b, &tp, x, 1.0)?.y - transform(&b, &tm, x, 1.0)?.y) / (2.0 * h);
            worst_theta = worst_theta.max((gj - fd).abs() / fd.abs().max(1e-3));
        }
        let gx = transform_grad_x(&b, &theta, x)?;
        let h = 1e-6;
        let fd = (transform(&b, &theta, x + h, 1.0)?.y - transform(&b, &theta, x - h, 1.0)?.y) / (2.0 * h);
        worst_x = worst_x.max((gx - fd).abs() / fd.abs().max(1e-3));
    }
    Ok(check(
        "gradients_match_finite_differences",
        worst_theta < 1e-5 && worst_x < 1e-6,
        format!("theta {worst_theta:.3e}, x {worst_x:.3e}"),
    ))
}

fn diffeomorphism_check() -> Result<CheckOutcome> {
    let mut rng = seeded_rng(13);
    let b = basis(10)?;
    let mut monotone = true;
    let mut worst_inv: f64 = 0.0;
    let mut worst_comp: f64 = 0.0;
    for _ in 0..10 {
        let mut theta = random_theta(b.dim(), 1.0, &mut rng);
        let norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 5.0 {
            theta.iter_mut().for_each(|v| *v *= 5.0 / norm);
        }
        let cpab = Cpab::new(&b, &theta)?;
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=1000 {
            let x = -3.0 + 6.0 * i as f64 / 1000.0;
            let y = cpab.apply(x)?;
            monotone &= y >= prev;
            prev = y;
        }
        let x = rng.random_range(-3.0..3.0);
        let y = cpab.apply(x)?;
        worst_inv = worst_inv.max((inverse_transform(&b, &theta, y)? - x).abs());
        let (s, t) = (0.3, 0.5);
        let mid = cpab.flow(x, s)?.y;
        worst_comp = worst_comp.max((cpab.flow(mid, t)?.y - cpab.flow(x, s + t)?.y).abs());
    }
    Ok(check(
        "monotone_invertible_composable",
        monotone && worst_inv < 1e-8 && worst_comp < 1e-8,
        format!("monotone {monotone}, inverse {worst_inv:.3e}, composition {worst_comp:.3e}"),
    ))
}

fn lut_check() -> Result<CheckOutcome> {
    let mut rng = seeded_rng(14);
    let b = Arc::new(basis(10)?);
    let mut theta = random_theta(b.dim(), 1.0, &mut rng);
    let norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
    theta.iter_mut().for_each(|v| *v *= 2.0 / norm.max(1e-12));
    let cfg = ActivationConfig::new(Variant::Ditac, b, theta, 256, 0.01)?;
    let lut = build_lut(&cfg)?;
    let bound = 2.0 * lut.max_dx() * lut.step();
    let mut worst: f64 = 0.0;
    for i in 0..=10_000 {
        let x = -3.0 + 6.0 * i as f64 / 10_000.0;
        let exact = cfg.evaluator()?.cpab().apply(x)?;
        let table = lut.t_vals()[lut.quantize_index(x)];
        worst = worst.max((exact - table).abs());
    }
    Ok(check(
        "lut_error_within_bound",
        worst <= bound,
        format!("max error {worst:.3e}, bound {bound:.3e}"),
    ))
}

fn prior_check() -> Result<CheckOutcome> {
    let b = basis(10)?;
    let prior = SmoothnessPrior::with_defaults(&b)?;
    let eig = prior.precision().clone().symmetric_eigen().eigenvalues;
    let min_eig = eig.min();
    let mut rng = seeded_rng(15);
    let theta = random_theta(b.dim(), 1.0, &mut rng);
    let q1 = prior.quadratic(&theta)?;
    let scaled: Vec<f64> = theta.iter().map(|v| 3.0 * v).collect();
    let q3 = prior.quadratic(&scaled)?;
    let rel = (q3 - 9.0 * q1).abs() / q1.abs().max(1e-300);
    Ok(check(
        "prior_spd_and_quadratic",
        min_eig > 0.0 && rel < 1e-10,
        format!("min eigenvalue {min_eig:.3e}, scaling error {rel:.3e}"),
    ))
}

fn parameter_count_check() -> Result<CheckOutcome> {
    let mut rng = seeded_rng(16);
    let widths = [2, 100, 100, 10];
    let ditac = MlpModel::build(
        &widths,
        &ActivationSpec::new(ActivationKind::Ditac(Variant::Ditac)),
        Head::Classification,
        &mut rng,
    )?
    .count_parameters();
    let ok = ditac.dense == 11_410 && ditac.total == 11_428;
    Ok(check(
        "gmm2d_parameter_count",
        ok,
        format!("dense {}, total {}", ditac.dense, ditac.total),
    ))
}

/// Runs every check; errors inside a check count as failures.
pub fn run_selftest() -> Vec<CheckOutcome> {
    let checks: [(&'static str, fn() -> Result<CheckOutcome>); 7] = [
        ("identity_at_zero_theta", identity_check),
        ("closed_form_matches_rk4", rk4_check),
        ("gradients_match_finite_differences", gradient_check),
        ("monotone_invertible_composable", diffeomorphism_check),
        ("lut_error_within_bound", lut_check),
        ("prior_spd_and_quadratic", prior_check),
        ("gmm2d_parameter_count", parameter_count_check),
    ];
    checks
        .into_iter()
        .map(|(name, f)| f().unwrap_or_else(|e| check(name, false, format!("error: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for c in run_selftest() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
