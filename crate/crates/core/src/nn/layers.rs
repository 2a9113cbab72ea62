use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::activation::{
    gelu, gelu_grad, leaky_relu, leaky_relu_grad, lut_backward, lut_forward, ActivationConfig,
    LookupTable, Variant, DEFAULT_LEAKY_SLOPE,
};
use crate::error::{Error, Result};
use crate::prior::{SmoothnessPrior, DEFAULT_LAMBDA_VAR};
use crate::tessellation::{CpaBasis, Tessellation};

/// Fully connected layer `y = W x + b` with `W` of shape `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    w: DMatrix<f64>,
    bias: DVector<f64>,
}

impl DenseLayer {
    pub fn new(w: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        if w.nrows() != bias.len() {
            return Err(Error::Shape(format!(
                "weight has {} rows but bias has {} entries",
                w.nrows(),
                bias.len()
            )));
        }
        if w.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dense parameters"));
        }
        Ok(Self { w, bias })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            w: DMatrix::zeros(out_dim, in_dim),
            bias: DVector::zeros(out_dim),
        }
    }

    /// Weights and biases drawn from `U(-1/sqrt(in), 1/sqrt(in))`.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = (1.0 / in_dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("bound is finite and positive");
        let w = DMatrix::from_fn(out_dim, in_dim, |_, _| dist.sample(rng));
        let bias = DVector::from_fn(out_dim, |_, _| dist.sample(rng));
        Self { w, bias }
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn bias(&self) -> &DVector<f64> {
        &self.bias
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn n_params(&self) -> usize {
        self.w.len() + self.bias.len()
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (self.w.as_mut_slice(), self.bias.as_mut_slice())
    }

    /// Feature-major forward: `x` is `in x batch`.
    pub(crate) fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = &self.w * x;
        for mut col in y.column_iter_mut() {
            col += &self.bias;
        }
        y
    }
}

/// Activation families a model can be built with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActivationKind {
    Ditac(Variant),
    Relu,
    LeakyRelu,
    PRelu,
    Gelu,
    Elu,
    Softplus,
    Mish,
    Swish,
}

impl ActivationKind {
    pub const BASELINES: [ActivationKind; 8] = [
        ActivationKind::Relu,
        ActivationKind::LeakyRelu,
        ActivationKind::PRelu,
        ActivationKind::Gelu,
        ActivationKind::Elu,
        ActivationKind::Softplus,
        ActivationKind::Mish,
        ActivationKind::Swish,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Ditac(v) => v.name(),
            ActivationKind::Relu => "relu",
            ActivationKind::LeakyRelu => "lrelu",
            ActivationKind::PRelu => "prelu",
            ActivationKind::Gelu => "gelu",
            ActivationKind::Elu => "elu",
            ActivationKind::Softplus => "softplus",
            ActivationKind::Mish => "mish",
            ActivationKind::Swish => "swish",
        }
    }

    pub fn is_ditac(self) -> bool {
        matches!(self, ActivationKind::Ditac(_))
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        if let Ok(v) = lower.parse::<Variant>() {
            return Ok(ActivationKind::Ditac(v));
        }
        Ok(match lower.as_str() {
            "relu" => ActivationKind::Relu,
            "lrelu" | "leaky_relu" => ActivationKind::LeakyRelu,
            "prelu" => ActivationKind::PRelu,
            "gelu" => ActivationKind::Gelu,
            "elu" => ActivationKind::Elu,
            "softplus" => ActivationKind::Softplus,
            "mish" => ActivationKind::Mish,
            "swish" => ActivationKind::Swish,
            _ => return Err(Error::InvalidConfig(format!("unknown activation '{s}'"))),
        })
    }
}

impl Serialize for ActivationKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for ActivationKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Settings for DiTAC-family layers; ignored by the other kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DitacSettings {
    pub a: f64,
    pub b: f64,
    pub n_cells: usize,
    pub zero_boundary: bool,
    /// 0 evaluates the transformation exactly; otherwise the number of
    /// quantization intervals of the lookup table.
    pub n_quant: usize,
    pub leaky_slope: f64,
    pub lambda_var: f64,
    /// Defaults to the cell width when absent.
    pub lambda_smooth: Option<f64>,
    /// Keeps `theta` at its initial value (the base-activation control).
    pub freeze_theta: bool,
}

impl Default for DitacSettings {
    fn default() -> Self {
        Self {
            a: -3.0,
            b: 3.0,
            n_cells: 10,
            zero_boundary: true,
            n_quant: 0,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            lambda_var: DEFAULT_LAMBDA_VAR,
            lambda_smooth: None,
            freeze_theta: false,
        }
    }
}

/// Kind plus the DiTAC settings used when the kind is DiTAC-family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationSpec {
    pub kind: ActivationKind,
    pub ditac: DitacSettings,
}

impl ActivationSpec {
    pub fn new(kind: ActivationKind) -> Self {
        Self {
            kind,
            ditac: DitacSettings::default(),
        }
    }

    pub fn build(&self) -> Result<ActivationLayer> {
        Ok(match self.kind {
            ActivationKind::Ditac(v) => ActivationLayer::Ditac(DitacUnit::new(v, &self.ditac)?),
            ActivationKind::Relu => ActivationLayer::Relu,
            ActivationKind::LeakyRelu => ActivationLayer::LeakyRelu(DEFAULT_LEAKY_SLOPE),
            ActivationKind::PRelu => ActivationLayer::PRelu { alpha: PRELU_INIT },
            ActivationKind::Gelu => ActivationLayer::Gelu,
            ActivationKind::Elu => ActivationLayer::Elu,
            ActivationKind::Softplus => ActivationLayer::Softplus,
            ActivationKind::Mish => ActivationLayer::Mish,
            ActivationKind::Swish => ActivationLayer::Swish { beta: 1.0 },
        })
    }
}

pub const PRELU_INIT: f64 = 0.25;

/// A DiTAC instance inside a network: the activation config, its smoothness
/// prior, and the lookup table used when `n_quant > 0`.
#[derive(Debug, Clone)]
pub struct DitacUnit {
    cfg: ActivationConfig,
    prior: Arc<SmoothnessPrior>,
    lut: Option<LookupTable>,
    frozen: bool,
}

impl DitacUnit {
    pub fn new(variant: Variant, s: &DitacSettings) -> Result<Self> {
        let tess = Tessellation::new(s.a, s.b, s.n_cells)?;
        let basis = Arc::new(CpaBasis::new(tess, s.zero_boundary)?);
        let lambda_smooth = s.lambda_smooth.unwrap_or_else(|| crate::prior::default_lambda_smooth(&basis));
        let prior = Arc::new(SmoothnessPrior::new(&basis, s.lambda_var, lambda_smooth)?);
        let d = basis.dim();
        let cfg = ActivationConfig::new(variant, basis, vec![0.0; d], s.n_quant, s.leaky_slope)?;
        Ok(Self::from_config(cfg, prior, s.freeze_theta))
    }

    pub fn from_config(cfg: ActivationConfig, prior: Arc<SmoothnessPrior>, frozen: bool) -> Self {
        Self {
            cfg,
            prior,
            lut: None,
            frozen,
        }
    }

    pub fn config(&self) -> &ActivationConfig {
        &self.cfg
    }

    pub fn config_mut(&mut self) -> &mut ActivationConfig {
        &mut self.cfg
    }

    pub fn prior(&self) -> &SmoothnessPrior {
        &self.prior
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn lut(&self) -> Option<&LookupTable> {
        self.lut.as_ref()
    }

    fn refresh_lut(&mut self) -> Result<()> {
        if self.cfg.n_quant() == 0 {
            self.lut = None;
            return Ok(());
        }
        let stale = self
            .lut
            .as_ref()
            .is_none_or(|l| l.theta_version() != self.cfg.version() || l.n_quant() != self.cfg.n_quant());
        if stale {
            self.lut = Some(crate::activation::build_lut(&self.cfg)?);
        }
        Ok(())
    }
}

/// Elementwise nonlinearity between dense layers.
#[derive(Debug, Clone)]
pub enum ActivationLayer {
    Ditac(DitacUnit),
    Relu,
    LeakyRelu(f64),
    PRelu { alpha: f64 },
    Gelu,
    Elu,
    Softplus,
    Mish,
    Swish { beta: f64 },
}

/// Values saved by a training-mode forward pass.
#[derive(Debug, Clone)]
pub(crate) enum ActCache {
    /// Local derivatives `d out / d x` and, for trainable scalars,
    /// `d out / d param` per element.
    Local { dx: Vec<f64>, dparam: Option<Vec<f64>> },
    /// Exact DiTAC: `d out / d x` and an `n x d` block of `d out / d theta`.
    Ditac { dx: Vec<f64>, dtheta: Vec<f64> },
    /// Quantized DiTAC; the backward pass goes through the table.
    Lut,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `(f(x), f'(x), df/dparam)` for the parameter-free and scalar-parameter
/// kinds.
#[inline]
fn scalar_eval(layer: &ActivationLayer, x: f64) -> (f64, f64, f64) {
    match *layer {
        ActivationLayer::Relu => {
            if x > 0.0 {
                (x, 1.0, 0.0)
            } else {
                (0.0, 0.0, 0.0)
            }
        }
        ActivationLayer::LeakyRelu(s) => (leaky_relu(x, s), leaky_relu_grad(x, s), 0.0),
        ActivationLayer::PRelu { alpha } => {
            if x > 0.0 {
                (x, 1.0, 0.0)
            } else {
                (alpha * x, alpha, x)
            }
        }
        ActivationLayer::Gelu => (gelu(x), gelu_grad(x), 0.0),
        ActivationLayer::Elu => {
            if x > 0.0 {
                (x, 1.0, 0.0)
            } else {
                (x.exp_m1(), x.exp(), 0.0)
            }
        }
        ActivationLayer::Softplus => (softplus(x), sigmoid(x), 0.0),
        ActivationLayer::Mish => {
            let sp = softplus(x);
            let th = sp.tanh();
            (x * th, th + x * (1.0 - th * th) * sigmoid(x), 0.0)
        }
        ActivationLayer::Swish { beta } => {
            let s = sigmoid(beta * x);
            let ds = s * (1.0 - s);
            (x * s, s + beta * x * ds, x * x * ds)
        }
        ActivationLayer::Ditac(_) => unreachable!("DiTAC layers are evaluated through their config"),
    }
}

impl ActivationLayer {
    pub fn kind(&self) -> ActivationKind {
        match self {
            ActivationLayer::Ditac(u) => ActivationKind::Ditac(u.cfg.variant()),
            ActivationLayer::Relu => ActivationKind::Relu,
            ActivationLayer::LeakyRelu(_) => ActivationKind::LeakyRelu,
            ActivationLayer::PRelu { .. } => ActivationKind::PRelu,
            ActivationLayer::Gelu => ActivationKind::Gelu,
            ActivationLayer::Elu => ActivationKind::Elu,
            ActivationLayer::Softplus => ActivationKind::Softplus,
            ActivationLayer::Mish => ActivationKind::Mish,
            ActivationLayer::Swish { .. } => ActivationKind::Swish,
        }
    }

    pub fn ditac(&self) -> Option<&DitacUnit> {
        match self {
            ActivationLayer::Ditac(u) => Some(u),
            _ => None,
        }
    }

    pub fn ditac_mut(&mut self) -> Option<&mut DitacUnit> {
        match self {
            ActivationLayer::Ditac(u) => Some(u),
            _ => None,
        }
    }

    /// Trainable scalars of this layer: `theta`, `alpha` or `beta`.
    pub fn n_params(&self) -> usize {
        match self {
            ActivationLayer::Ditac(u) => u.cfg.theta().len(),
            ActivationLayer::PRelu { .. } | ActivationLayer::Swish { .. } => 1,
            _ => 0,
        }
    }

    pub(crate) fn params(&self) -> Option<&[f64]> {
        match self {
            ActivationLayer::Ditac(u) => Some(u.cfg.theta()),
            ActivationLayer::PRelu { alpha } => Some(std::slice::from_ref(alpha)),
            ActivationLayer::Swish { beta } => Some(std::slice::from_ref(beta)),
            _ => None,
        }
    }

    /// Mutable view of the trainable scalars. For DiTAC this bumps the
    /// config version, invalidating any cached lookup table.
    pub(crate) fn params_mut(&mut self) -> Option<&mut [f64]> {
        match self {
            ActivationLayer::Ditac(u) => Some(u.cfg.theta_mut()),
            ActivationLayer::PRelu { alpha } => Some(std::slice::from_mut(alpha)),
            ActivationLayer::Swish { beta } => Some(std::slice::from_mut(beta)),
            _ => None,
        }
    }

    pub(crate) fn params_trainable(&self) -> bool {
        match self {
            ActivationLayer::Ditac(u) => !u.frozen,
            _ => true,
        }
    }

    /// Applies the activation elementwise in place.
    pub(crate) fn forward_inplace(&mut self, x: &mut [f64]) -> Result<()> {
        if let ActivationLayer::Ditac(u) = self {
            u.refresh_lut()?;
            if let Some(lut) = &u.lut {
                let out = lut_forward(lut, &u.cfg, x)?;
                x.copy_from_slice(&out);
            } else {
                let ev = u.cfg.evaluator()?;
                for v in x.iter_mut() {
                    *v = ev.value(*v)?;
                }
            }
            return Ok(());
        }
        for v in x.iter_mut() {
            *v = scalar_eval(self, *v).0;
        }
        Ok(())
    }

    /// Training-mode forward: returns the output and what backward needs.
    pub(crate) fn forward_train(&mut self, x: &[f64]) -> Result<(Vec<f64>, ActCache)> {
        if let ActivationLayer::Ditac(u) = self {
            u.refresh_lut()?;
            if let Some(lut) = &u.lut {
                return Ok((lut_forward(lut, &u.cfg, x)?, ActCache::Lut));
            }
            let ev = u.cfg.evaluator()?;
            let d = u.cfg.theta().len();
            let mut out = Vec::with_capacity(x.len());
            let mut dx = Vec::with_capacity(x.len());
            let mut dtheta = vec![0.0; x.len() * d];
            let mut scratch = vec![0.0; d];
            for (&xi, row) in x.iter().zip(dtheta.chunks_exact_mut(d.max(1))) {
                let (o, g) = ev.grad_accumulate(xi, 1.0, &mut row[..d], &mut scratch)?;
                out.push(o);
                dx.push(g);
            }
            return Ok((out, ActCache::Ditac { dx, dtheta }));
        }
        let has_param = self.n_params() > 0;
        let mut out = Vec::with_capacity(x.len());
        let mut dx = Vec::with_capacity(x.len());
        let mut dparam = if has_param { Vec::with_capacity(x.len()) } else { Vec::new() };
        for &xi in x {
            let (o, g, p) = scalar_eval(self, xi);
            out.push(o);
            dx.push(g);
            if has_param {
                dparam.push(p);
            }
        }
        let dparam = has_param.then_some(dparam);
        Ok((out, ActCache::Local { dx, dparam }))
    }

    /// Returns `dL/dx` and `dL/dparams` (empty for parameter-free kinds).
    /// Sums over elements run in storage order.
    pub(crate) fn backward(
        &self,
        input: &[f64],
        cache: &ActCache,
        upstream: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        match (self, cache) {
            (ActivationLayer::Ditac(u), ActCache::Lut) => {
                let lut = u.lut.as_ref().ok_or(Error::MissingCache)?;
                lut_backward(lut, &u.cfg, input, upstream)
            }
            (ActivationLayer::Ditac(u), ActCache::Ditac { dx, dtheta }) => {
                let d = u.cfg.theta().len();
                let mut gtheta = vec![0.0; d];
                let mut gx = Vec::with_capacity(upstream.len());
                for ((&g, &l), row) in upstream.iter().zip(dx).zip(dtheta.chunks_exact(d.max(1))) {
                    gx.push(g * l);
                    for (o, r) in gtheta.iter_mut().zip(&row[..d]) {
                        *o += g * r;
                    }
                }
                Ok((gx, gtheta))
            }
            (_, ActCache::Local { dx, dparam }) => {
                let gx = upstream.iter().zip(dx).map(|(g, l)| g * l).collect();
                let gp = match dparam {
                    Some(p) => vec![upstream.iter().zip(p).map(|(g, l)| g * l).sum()],
                    None => Vec::new(),
                };
                Ok((gx, gp))
            }
            _ => Err(Error::MissingCache),
        }
    }
}
