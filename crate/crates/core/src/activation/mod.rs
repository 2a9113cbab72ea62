//! DiTAC activations: a CPA-based diffeomorphism applied on a fixed interval,
//! stitched to a conventional activation outside of it.
//!
//! | variant     | inside `[a, b]`   | outside                                   |
//! |-------------|-------------------|-------------------------------------------|
//! | `Ditac`     | `T(x) * Phi(x)`   | `x * Phi(x)` (GELU)                       |
//! | `GeDitac`   | `T(x)` on `[0,b]` | GELU for `x < 0`, identity for `x > b`    |
//! | `LDitac`    | `T(x)`            | leaky ReLU                                |
//! | `InfDitac`  | `T(x)`            | tangent lines of `T` at `a` and `b`       |

mod lut;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cpab::Cpab;
use crate::error::{Error, Result};
use crate::tessellation::CpaBasis;

pub use lut::{freeze_for_inference, lut_backward, lut_forward, LookupTable, LutDocument};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;
pub const DEFAULT_N_QUANT: usize = 256;
pub const DEFAULT_N_CELLS: usize = 10;
pub const DEFAULT_DOMAIN: (f64, f64) = (-3.0, 3.0);

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF, evaluated through `erfc` so the lower tail keeps
/// full relative precision.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Exact GELU, `x * Phi(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

#[inline]
pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

#[inline]
pub fn leaky_relu_grad(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        slope
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    Ditac,
    GeDitac,
    LDitac,
    InfDitac,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Ditac,
        Variant::GeDitac,
        Variant::LDitac,
        Variant::InfDitac,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ditac => "ditac",
            Variant::GeDitac => "ge_ditac",
            Variant::LDitac => "l_ditac",
            Variant::InfDitac => "inf_ditac",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "ditac" => Ok(Variant::Ditac),
            "ge_ditac" => Ok(Variant::GeDitac),
            "l_ditac" | "leaky_ditac" => Ok(Variant::LDitac),
            "inf_ditac" => Ok(Variant::InfDitac),
            other => Err(Error::InvalidConfig(format!("unknown DiTAC variant '{other}'"))),
        }
    }
}

/// One DiTAC instance: variant, CPA basis, and its trainable `theta`.
///
/// `version` increases every time `theta` is replaced, so lookup tables built
/// from an older `theta` can be detected.
#[derive(Debug, Clone)]
pub struct ActivationConfig {
    variant: Variant,
    basis: Arc<CpaBasis>,
    theta: Vec<f64>,
    n_quant: usize,
    leaky_slope: f64,
    version: u64,
}

impl ActivationConfig {
    pub fn new(
        variant: Variant,
        basis: Arc<CpaBasis>,
        theta: Vec<f64>,
        n_quant: usize,
        leaky_slope: f64,
    ) -> Result<Self> {
        basis.check_dim(&theta)?;
        let tess = basis.tessellation();
        match variant {
            Variant::GeDitac if tess.a() != 0.0 => {
                return Err(Error::InvalidConfig(format!(
                    "GE_DITAC needs a domain starting at 0, got [{}, {}]",
                    tess.a(),
                    tess.b()
                )));
            }
            Variant::LDitac if basis.zero_boundary() && tess.a() < 0.0 => {
                log::warn!(
                    "L_DITAC on [{}, {}] is discontinuous at a: T(a) = a but LReLU(a) = {}",
                    tess.a(),
                    tess.b(),
                    leaky_relu(tess.a(), leaky_slope)
                );
            }
            _ => {}
        }
        if !leaky_slope.is_finite() {
            return Err(Error::NonFinite("leaky_slope"));
        }
        if n_quant == 1 {
            return Err(Error::InvalidConfig(
                "n_quant must be 0 (exact) or at least 2".into(),
            ));
        }
        Ok(Self {
            variant,
            basis,
            theta,
            n_quant,
            leaky_slope,
            version: 0,
        })
    }

    /// DITAC on `[-3, 3]` with a 10-cell zero-boundary basis, `theta = 0`,
    /// evaluated exactly.
    pub fn default_ditac() -> Self {
        let tess = crate::tessellation::Tessellation::new(DEFAULT_DOMAIN.0, DEFAULT_DOMAIN.1, DEFAULT_N_CELLS)
            .expect("default domain is valid");
        let basis = Arc::new(CpaBasis::new(tess, true).expect("default basis is valid"));
        let d = basis.dim();
        Self::new(Variant::Ditac, basis, vec![0.0; d], 0, DEFAULT_LEAKY_SLOPE)
            .expect("default config is valid")
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn basis(&self) -> &Arc<CpaBasis> {
        &self.basis
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn n_quant(&self) -> usize {
        self.n_quant
    }

    pub fn set_n_quant(&mut self, n_quant: usize) -> Result<()> {
        if n_quant == 1 {
            return Err(Error::InvalidConfig(
                "n_quant must be 0 (exact) or at least 2".into(),
            ));
        }
        self.n_quant = n_quant;
        Ok(())
    }

    pub fn leaky_slope(&self) -> f64 {
        self.leaky_slope
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn domain(&self) -> (f64, f64) {
        let t = self.basis.tessellation();
        (t.a(), t.b())
    }

    pub fn set_theta(&mut self, theta: &[f64]) -> Result<()> {
        self.basis.check_dim(theta)?;
        self.theta.copy_from_slice(theta);
        self.version += 1;
        Ok(())
    }

    /// Mutable access to `theta`; the version is bumped up front.
    pub fn theta_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.theta
    }

    /// Prepares the transformation for repeated evaluation.
    pub fn evaluator(&self) -> Result<Evaluator<'_>> {
        Evaluator::new(self)
    }
}

/// Value and gradients of `T` at a domain endpoint, used by the tangent-line
/// extension of `InfDitac`.
#[derive(Debug, Clone)]
struct Edge {
    x: f64,
    value: f64,
    slope: f64,
    dvalue: Vec<f64>,
    dslope: Vec<f64>,
}

/// A config with its transformation prepared: evaluates the activation and
/// its gradients without re-deriving the velocity field per call.
#[derive(Debug, Clone)]
pub struct Evaluator<'a> {
    cfg: &'a ActivationConfig,
    cpab: Cpab<'a>,
    edges: Option<[Edge; 2]>,
}

impl<'a> Evaluator<'a> {
    fn new(cfg: &'a ActivationConfig) -> Result<Self> {
        let cpab = Cpab::new(&cfg.basis, &cfg.theta)?;
        let edges = if cfg.variant == Variant::InfDitac {
            let (a, b) = cfg.domain();
            let d = cfg.basis.dim();
            let make = |x: f64| -> Result<Edge> {
                let mut dvalue = vec![0.0; d];
                let mut dslope = vec![0.0; d];
                let (value, slope) = cpab.eval_with_second(x, &mut dvalue, &mut dslope)?;
                Ok(Edge {
                    x,
                    value,
                    slope,
                    dvalue,
                    dslope,
                })
            };
            Some([make(a)?, make(b)?])
        } else {
            None
        };
        Ok(Self { cfg, cpab, edges })
    }

    pub fn config(&self) -> &ActivationConfig {
        self.cfg
    }

    pub fn cpab(&self) -> &Cpab<'a> {
        &self.cpab
    }

    /// Whether `x` takes the CPA branch of the variant.
    #[inline]
    pub fn in_domain(&self, x: f64) -> bool {
        self.cfg.basis.tessellation().contains(x)
    }

    /// Output for inputs outside `[a, b]`, with `d/dx` and, for
    /// `InfDitac`, `d/dtheta` accumulated as `scale * grad` into `dtheta`.
    #[inline]
    fn outside(&self, x: f64, dtheta: Option<(&mut [f64], f64)>) -> (f64, f64) {
        match self.cfg.variant {
            Variant::Ditac => (gelu(x), gelu_grad(x)),
            Variant::GeDitac => {
                if x < 0.0 {
                    (gelu(x), gelu_grad(x))
                } else {
                    (x, 1.0)
                }
            }
            Variant::LDitac => (
                leaky_relu(x, self.cfg.leaky_slope),
                leaky_relu_grad(x, self.cfg.leaky_slope),
            ),
            Variant::InfDitac => {
                let edges = self.edges.as_ref().expect("edges are prepared for InfDitac");
                let e = if x < edges[0].x { &edges[0] } else { &edges[1] };
                let dx = x - e.x;
                if let Some((out, scale)) = dtheta {
                    for ((o, dv), ds) in out.iter_mut().zip(&e.dvalue).zip(&e.dslope) {
                        *o += scale * (dv + ds * dx);
                    }
                }
                (e.value + e.slope * dx, e.slope)
            }
        }
    }

    /// Combines the CPA part `(t, dt/dx)` with the variant's outer function at
    /// an in-domain input; returns `(out, dout/dx, dout/dT)`.
    #[inline]
    fn inside(&self, x: f64, t: f64, dt_dx: f64) -> (f64, f64, f64) {
        match self.cfg.variant {
            Variant::Ditac => {
                let cdf = normal_cdf(x);
                (t * cdf, dt_dx * cdf + t * normal_pdf(x), cdf)
            }
            _ => (t, dt_dx, 1.0),
        }
    }

    pub fn value(&self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(Error::NonFinite("activation input"));
        }
        if self.in_domain(x) {
            let t = self.cpab.apply(x)?;
            Ok(self.inside(x, t, 1.0).0)
        } else {
            Ok(self.outside(x, None).0)
        }
    }

    /// Returns `(out, dout/dx)` and adds `scale * dout/dtheta` into `dtheta`.
    /// `scratch` must have length `d`.
    pub fn grad_accumulate(
        &self,
        x: f64,
        scale: f64,
        dtheta: &mut [f64],
        scratch: &mut [f64],
    ) -> Result<(f64, f64)> {
        if !x.is_finite() {
            return Err(Error::NonFinite("activation input"));
        }
        if self.in_domain(x) {
            let (t, dt_dx) = self.cpab.eval_with_grads(x, scratch)?;
            let (out, dout_dx, dout_dt) = self.inside(x, t, dt_dx);
            let s = scale * dout_dt;
            for (o, g) in dtheta.iter_mut().zip(scratch.iter()) {
                *o += s * g;
            }
            Ok((out, dout_dx))
        } else {
            Ok(self.outside(x, Some((dtheta, scale))))
        }
    }

    /// `(out, dout/dx, dout/dtheta)` at `x`.
    pub fn grad(&self, x: f64) -> Result<(f64, f64, Vec<f64>)> {
        let d = self.cfg.basis.dim();
        let mut dtheta = vec![0.0; d];
        let mut scratch = vec![0.0; d];
        let (out, dx) = self.grad_accumulate(x, 1.0, &mut dtheta, &mut scratch)?;
        Ok((out, dx, dtheta))
    }
}

/// Exact (unquantized) activation value.
pub fn activate_exact(cfg: &ActivationConfig, x: f64) -> Result<f64> {
    cfg.evaluator()?.value(x)
}

/// Exact `(d out/dx, d out/dtheta)`.
pub fn activate_grad(cfg: &ActivationConfig, x: f64) -> Result<(f64, Vec<f64>)> {
    let (_, dx, dtheta) = cfg.evaluator()?.grad(x)?;
    Ok((dx, dtheta))
}

/// Builds a lookup table for the current `theta` of `cfg`.
pub fn build_lut(cfg: &ActivationConfig) -> Result<LookupTable> {
    LookupTable::build(cfg)
}
