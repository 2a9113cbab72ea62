//! Quantized lookup tables for the CPA part of a DiTAC activation.
//!
//! `[a, b]` is split into `n` equal steps `Delta = (b - a) / n`; the table
//! holds `T`, `dT/dx` and `dT/dtheta` at the `n + 1` grid points. In-domain
//! inputs are rounded to the nearest grid point (ties upward) for the CPA part
//! only; the outer function (`Phi`, identity, leaky ReLU) sees the original
//! input. Backward uses the tabulated derivatives at the rounded point as the
//! derivative estimate for the original input (straight-through).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{gelu, gelu_grad, leaky_relu, leaky_relu_grad, normal_cdf, normal_pdf};
use super::{ActivationConfig, Variant};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LookupTable {
    variant: Variant,
    leaky_slope: f64,
    a: f64,
    b: f64,
    n_quant: usize,
    d: usize,
    q: Vec<f64>,
    t_vals: Vec<f64>,
    dx: Vec<f64>,
    /// Row-major `(n_quant + 1) x d`; `None` once frozen.
    dtheta: Option<Vec<f64>>,
    /// `d(dT/dx)/dtheta` at `a` and `b`, needed by the `InfDitac` tangents.
    edge_dslope: Option<[Vec<f64>; 2]>,
    theta_version: u64,
}

impl LookupTable {
    pub(super) fn build(cfg: &ActivationConfig) -> Result<Self> {
        let n = cfg.n_quant();
        if n < 2 {
            return Err(Error::InvalidConfig(format!(
                "lookup tables need n_quant >= 2, got {n}"
            )));
        }
        let (a, b) = cfg.domain();
        let d = cfg.basis().dim();
        let step = (b - a) / n as f64;
        let mut q: Vec<f64> = (0..=n).map(|k| a + k as f64 * step).collect();
        q[n] = b;

        let eval = cfg.evaluator()?;
        let cpab = eval.cpab();
        let mut t_vals = Vec::with_capacity(n + 1);
        let mut dx = Vec::with_capacity(n + 1);
        let mut dtheta = vec![0.0; (n + 1) * d];
        let mut edge_dslope = [vec![0.0; d], vec![0.0; d]];
        for (k, &x) in q.iter().enumerate() {
            let row = &mut dtheta[k * d..(k + 1) * d];
            let (t, slope) = if k == 0 || k == n {
                let ds = &mut edge_dslope[usize::from(k == n)];
                cpab.eval_with_second(x, row, ds)?
            } else {
                cpab.eval_with_grads(x, row)?
            };
            t_vals.push(t);
            dx.push(slope);
        }

        Ok(Self {
            variant: cfg.variant(),
            leaky_slope: cfg.leaky_slope(),
            a,
            b,
            n_quant: n,
            d,
            q,
            t_vals,
            dx,
            dtheta: Some(dtheta),
            edge_dslope: (cfg.variant() == Variant::InfDitac).then_some(edge_dslope),
            theta_version: cfg.version(),
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.a, self.b)
    }

    pub fn n_quant(&self) -> usize {
        self.n_quant
    }

    pub fn step(&self) -> f64 {
        (self.b - self.a) / self.n_quant as f64
    }

    pub fn grid(&self) -> &[f64] {
        &self.q
    }

    pub fn t_vals(&self) -> &[f64] {
        &self.t_vals
    }

    pub fn dx(&self) -> &[f64] {
        &self.dx
    }

    /// Row `k` of the tabulated `dT/dtheta`; `None` for frozen tables.
    pub fn dtheta_row(&self, k: usize) -> Option<&[f64]> {
        self.dtheta
            .as_ref()
            .map(|m| &m[k * self.d..(k + 1) * self.d])
    }

    pub fn theta_version(&self) -> u64 {
        self.theta_version
    }

    pub fn is_frozen(&self) -> bool {
        self.dtheta.is_none()
    }

    /// Largest tabulated `dT/dx`.
    pub fn max_dx(&self) -> f64 {
        self.dx.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Grid index nearest to `x`; ties round toward `+inf`.
    #[inline]
    pub fn quantize_index(&self, x: f64) -> usize {
        let k = ((x - self.a) / self.step() + 0.5).floor();
        if k <= 0.0 {
            0
        } else if k >= self.n_quant as f64 {
            self.n_quant
        } else {
            k as usize
        }
    }

    #[inline]
    fn in_domain(&self, x: f64) -> bool {
        x >= self.a && x <= self.b
    }

    /// `(value, slope)` of the `InfDitac` tangent line for `x` outside.
    #[inline]
    fn tangent(&self, x: f64) -> (usize, f64, f64) {
        let k = if x < self.a { 0 } else { self.n_quant };
        let dx = x - self.q[k];
        (k, self.t_vals[k] + self.dx[k] * dx, self.dx[k])
    }

    #[inline]
    fn forward_one(&self, x: f64) -> f64 {
        if self.in_domain(x) {
            let t = self.t_vals[self.quantize_index(x)];
            match self.variant {
                Variant::Ditac => t * normal_cdf(x),
                _ => t,
            }
        } else {
            match self.variant {
                Variant::Ditac => gelu(x),
                Variant::GeDitac => {
                    if x < 0.0 {
                        gelu(x)
                    } else {
                        x
                    }
                }
                Variant::LDitac => leaky_relu(x, self.leaky_slope),
                Variant::InfDitac => self.tangent(x).1,
            }
        }
    }

    /// Forward pass through the table. Works on frozen tables too.
    pub fn forward(&self, xs: &[f64]) -> Result<Vec<f64>> {
        xs.iter()
            .map(|&x| {
                if x.is_finite() {
                    Ok(self.forward_one(x))
                } else {
                    Err(Error::NonFinite("activation input"))
                }
            })
            .collect()
    }

    /// Straight-through backward pass: `(grad_x, grad_theta)` for upstream
    /// gradients `upstream` at inputs `xs`.
    pub fn backward(&self, xs: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut grad_theta = vec![0.0; self.d];
        let mut grad_x = vec![0.0; xs.len()];
        self.backward_into(xs, upstream, &mut grad_x, &mut grad_theta)?;
        Ok((grad_x, grad_theta))
    }

    /// As [`backward`](Self::backward), writing `grad_x` and accumulating into
    /// `grad_theta`.
    pub fn backward_into(
        &self,
        xs: &[f64],
        upstream: &[f64],
        grad_x: &mut [f64],
        grad_theta: &mut [f64],
    ) -> Result<()> {
        let dtheta = self.dtheta.as_ref().ok_or(Error::FrozenLut)?;
        if xs.len() != upstream.len() || xs.len() != grad_x.len() {
            return Err(Error::Shape(format!(
                "backward got {} inputs, {} upstream values and {} outputs",
                xs.len(),
                upstream.len(),
                grad_x.len()
            )));
        }
        if grad_theta.len() != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                actual: grad_theta.len(),
            });
        }
        let d = self.d;
        for ((&x, &g), gx) in xs.iter().zip(upstream).zip(grad_x.iter_mut()) {
            if !x.is_finite() {
                return Err(Error::NonFinite("activation input"));
            }
            if self.in_domain(x) {
                let k = self.quantize_index(x);
                let row = &dtheta[k * d..(k + 1) * d];
                let (dout_dx, scale) = match self.variant {
                    Variant::Ditac => {
                        let cdf = normal_cdf(x);
                        (self.dx[k] * cdf + self.t_vals[k] * normal_pdf(x), cdf)
                    }
                    _ => (self.dx[k], 1.0),
                };
                *gx = g * dout_dx;
                let s = g * scale;
                for (o, r) in grad_theta.iter_mut().zip(row) {
                    *o += s * r;
                }
            } else {
                *gx = g * match self.variant {
                    Variant::Ditac => gelu_grad(x),
                    Variant::GeDitac => {
                        if x < 0.0 {
                            gelu_grad(x)
                        } else {
                            1.0
                        }
                    }
                    Variant::LDitac => leaky_relu_grad(x, self.leaky_slope),
                    Variant::InfDitac => {
                        let (k, _, slope) = self.tangent(x);
                        let edge = &self.edge_dslope.as_ref().expect("InfDitac tables keep edge slopes")
                            [usize::from(k != 0)];
                        let row = &dtheta[k * d..(k + 1) * d];
                        let offset = x - self.q[k];
                        for ((o, r), e) in grad_theta.iter_mut().zip(row).zip(edge) {
                            *o += g * (r + e * offset);
                        }
                        slope
                    }
                };
            }
        }
        Ok(())
    }

    /// Drops the gradient tables, leaving a forward-only table.
    pub fn freeze(mut self) -> Self {
        self.dtheta = None;
        self.edge_dslope = None;
        self
    }

    pub fn to_document(&self) -> LutDocument {
        LutDocument {
            variant: self.variant,
            leaky_slope: self.leaky_slope,
            a: self.a,
            b: self.b,
            n_quant: self.n_quant,
            theta_version: self.theta_version,
            t_vals: self.t_vals.clone(),
            dx: self.dx.clone(),
        }
    }

    /// Rebuilds a frozen table from its serialized form.
    pub fn from_document(doc: LutDocument) -> Result<Self> {
        if doc.n_quant < 2 || doc.t_vals.len() != doc.n_quant + 1 || doc.dx.len() != doc.n_quant + 1 {
            return Err(Error::Shape(format!(
                "lookup table with n_quant={} needs {} entries, got {} values and {} slopes",
                doc.n_quant,
                doc.n_quant + 1,
                doc.t_vals.len(),
                doc.dx.len()
            )));
        }
        if !(doc.a < doc.b) {
            return Err(Error::InvalidTessellation(format!(
                "need a < b, got [{}, {}]",
                doc.a, doc.b
            )));
        }
        let step = (doc.b - doc.a) / doc.n_quant as f64;
        let mut q: Vec<f64> = (0..=doc.n_quant).map(|k| doc.a + k as f64 * step).collect();
        q[doc.n_quant] = doc.b;
        Ok(Self {
            variant: doc.variant,
            leaky_slope: doc.leaky_slope,
            a: doc.a,
            b: doc.b,
            n_quant: doc.n_quant,
            d: 0,
            q,
            t_vals: doc.t_vals,
            dx: doc.dx,
            dtheta: None,
            edge_dslope: None,
            theta_version: doc.theta_version,
        })
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_document())?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_document(serde_json::from_str(&text)?)
    }

    /// Flat little-endian binary layout:
    ///
    /// ```text
    /// magic   b"DLUT"        4 bytes
    /// format  u32 = 1
    /// variant u32 (0 DITAC, 1 GE_DITAC, 2 L_DITAC, 3 INF_DITAC)
    /// n_quant u32
    /// theta_version u64
    /// a, b, leaky_slope  f64 x 3
    /// t_vals  f64 x (n_quant + 1)
    /// dx      f64 x (n_quant + 1)
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(48 + 16 * (self.n_quant + 1));
        out.extend_from_slice(LUT_MAGIC);
        out.extend_from_slice(&LUT_FORMAT.to_le_bytes());
        out.extend_from_slice(&variant_code(self.variant).to_le_bytes());
        out.extend_from_slice(&(self.n_quant as u32).to_le_bytes());
        out.extend_from_slice(&self.theta_version.to_le_bytes());
        for v in [self.a, self.b, self.leaky_slope] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.t_vals.iter().chain(&self.dx) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(Error::Data(format!(
                    "truncated lookup table: needed {n} more bytes, have {}",
                    cur.len()
                )));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        if take(4)? != LUT_MAGIC {
            return Err(Error::Data("bad lookup table magic".into()));
        }
        let format = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if format != LUT_FORMAT {
            return Err(Error::Data(format!("unsupported lookup table format {format}")));
        }
        let variant = variant_from_code(u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")))?;
        let n_quant = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let theta_version = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
        let mut f = || -> Result<f64> { Ok(f64::from_le_bytes(take(8)?.try_into().expect("8 bytes"))) };
        let a = f()?;
        let b = f()?;
        let leaky_slope = f()?;
        let t_vals = (0..=n_quant).map(|_| f()).collect::<Result<Vec<_>>>()?;
        let dx = (0..=n_quant).map(|_| f()).collect::<Result<Vec<_>>>()?;
        Self::from_document(LutDocument {
            variant,
            leaky_slope,
            a,
            b,
            n_quant,
            theta_version,
            t_vals,
            dx,
        })
    }

    pub fn save_binary(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_binary(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

const LUT_MAGIC: &[u8; 4] = b"DLUT";
const LUT_FORMAT: u32 = 1;

fn variant_code(v: Variant) -> u32 {
    match v {
        Variant::Ditac => 0,
        Variant::GeDitac => 1,
        Variant::LDitac => 2,
        Variant::InfDitac => 3,
    }
}

fn variant_from_code(code: u32) -> Result<Variant> {
    Variant::ALL
        .get(code as usize)
        .copied()
        .ok_or_else(|| Error::Data(format!("unknown variant code {code}")))
}

/// Serialized inference table (no gradients).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LutDocument {
    pub variant: Variant,
    pub leaky_slope: f64,
    pub a: f64,
    pub b: f64,
    pub n_quant: usize,
    pub theta_version: u64,
    pub t_vals: Vec<f64>,
    pub dx: Vec<f64>,
}

fn check_fresh(lut: &LookupTable, cfg: &ActivationConfig) -> Result<()> {
    if lut.theta_version != cfg.version() {
        return Err(Error::StaleLut {
            table: lut.theta_version,
            params: cfg.version(),
        });
    }
    Ok(())
}

/// Quantized forward pass; fails if `theta` changed since the table was built.
pub fn lut_forward(lut: &LookupTable, cfg: &ActivationConfig, xs: &[f64]) -> Result<Vec<f64>> {
    check_fresh(lut, cfg)?;
    lut.forward(xs)
}

/// Straight-through backward pass; fails on stale or frozen tables.
pub fn lut_backward(
    lut: &LookupTable,
    cfg: &ActivationConfig,
    xs: &[f64],
    upstream: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_fresh(lut, cfg)?;
    lut.backward(xs, upstream)
}

/// Builds the single forward-only table used after training.
pub fn freeze_for_inference(cfg: &ActivationConfig) -> Result<LookupTable> {
    let mut c = cfg.clone();
    if c.n_quant() < 2 {
        c.set_n_quant(super::DEFAULT_N_QUANT)?;
    }
    Ok(LookupTable::build(&c)?.freeze())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::{activate_exact, activate_grad, build_lut};
    use crate::tessellation::{CpaBasis, Tessellation};
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn cfg(variant: Variant, a: f64, theta_scale: f64, n_quant: usize) -> ActivationConfig {
        let basis = Arc::new(CpaBasis::new(Tessellation::new(a, 3.0, 10).unwrap(), true).unwrap());
        let theta: Vec<f64> = (0..basis.dim())
            .map(|j| theta_scale * ((j as f64 * 1.7).sin()))
            .collect();
        ActivationConfig::new(variant, basis, theta, n_quant, 0.01).unwrap()
    }

    #[test]
    fn needs_at_least_two_steps() {
        let c = cfg(Variant::Ditac, -3.0, 0.5, 0);
        assert!(build_lut(&c).is_err());
    }

    #[test]
    fn zero_theta_table_is_identity() {
        let c = cfg(Variant::Ditac, -3.0, 0.0, 64);
        let lut = build_lut(&c).unwrap();
        assert_eq!(lut.t_vals(), lut.grid());
        assert!(lut.dx().iter().all(|&v| v == 1.0));
        // Q(x) * Phi(x) with the unquantized Phi
        let x = 0.123;
        let k = lut.quantize_index(x);
        let y = lut_forward(&lut, &c, &[x]).unwrap()[0];
        assert_eq!(y, lut.grid()[k] * normal_cdf(x));
    }

    #[test]
    fn quantization_rounds_ties_up() {
        let c = cfg(Variant::Ditac, -3.0, 0.0, 6);
        let lut = build_lut(&c).unwrap();
        assert_eq!(lut.quantize_index(-3.0), 0);
        assert_eq!(lut.quantize_index(-2.5), 1);
        assert_eq!(lut.quantize_index(-2.51), 0);
        assert_eq!(lut.quantize_index(-2.49), 1);
        assert_eq!(lut.quantize_index(3.0), 6);
    }

    #[test]
    fn grid_points_match_exact_evaluation() {
        for (variant, a) in [
            (Variant::Ditac, -3.0),
            (Variant::GeDitac, 0.0),
            (Variant::LDitac, 0.0),
            (Variant::InfDitac, -3.0),
        ] {
            let c = cfg(variant, a, 0.8, 32);
            let lut = build_lut(&c).unwrap();
            let grid = lut.grid().to_vec();
            let ys = lut_forward(&lut, &c, &grid).unwrap();
            let ups = vec![1.0; grid.len()];
            let (gx, _) = lut_backward(&lut, &c, &grid, &ups).unwrap();
            for (i, &x) in grid.iter().enumerate() {
                assert_relative_eq!(ys[i], activate_exact(&c, x).unwrap(), epsilon = 1e-12);
                let (dx, dtheta) = activate_grad(&c, x).unwrap();
                assert_relative_eq!(gx[i], dx, epsilon = 1e-10);
                let (_, gt) = lut_backward(&lut, &c, &[x], &[1.0]).unwrap();
                for (a, b) in gt.iter().zip(&dtheta) {
                    assert_relative_eq!(*a, *b, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn outside_domain_bypasses_table() {
        for (variant, a) in [(Variant::Ditac, -3.0), (Variant::LDitac, 0.0), (Variant::InfDitac, -3.0)] {
            let c = cfg(variant, a, 0.8, 16);
            let lut = build_lut(&c).unwrap();
            for &x in &[-7.3, -3.2, 3.01, 9.0] {
                let y = lut_forward(&lut, &c, &[x]).unwrap()[0];
                assert_relative_eq!(y, activate_exact(&c, x).unwrap(), epsilon = 1e-12);
                let (gx, gt) = lut_backward(&lut, &c, &[x], &[1.0]).unwrap();
                let (dx, dtheta) = activate_grad(&c, x).unwrap();
                assert_relative_eq!(gx[0], dx, epsilon = 1e-12);
                for (a, b) in gt.iter().zip(&dtheta) {
                    assert_relative_eq!(*a, *b, epsilon = 1e-10);
                }
                if variant != Variant::InfDitac {
                    assert!(gt.iter().all(|v| *v == 0.0));
                }
            }
        }
    }

    #[test]
    fn stale_table_is_rejected() {
        let mut c = cfg(Variant::Ditac, -3.0, 0.5, 16);
        let lut = build_lut(&c).unwrap();
        let theta = c.theta().to_vec();
        c.set_theta(&theta).unwrap();
        assert!(matches!(
            lut_forward(&lut, &c, &[0.0]),
            Err(Error::StaleLut { .. })
        ));
        assert!(matches!(
            lut_backward(&lut, &c, &[0.0], &[1.0]),
            Err(Error::StaleLut { .. })
        ));
    }

    #[test]
    fn frozen_table_is_forward_only() {
        let c = cfg(Variant::Ditac, -3.0, 0.5, 16);
        let frozen = freeze_for_inference(&c).unwrap();
        let live = build_lut(&c).unwrap();
        let xs: Vec<f64> = (0..100).map(|i| -4.0 + 0.08 * i as f64).collect();
        assert_eq!(frozen.forward(&xs).unwrap(), lut_forward(&live, &c, &xs).unwrap());
        assert!(matches!(frozen.backward(&xs, &xs), Err(Error::FrozenLut)));
    }

    #[test]
    fn binary_and_json_round_trips_are_exact() {
        let c = cfg(Variant::InfDitac, -3.0, 0.9, 64);
        let frozen = freeze_for_inference(&c).unwrap();
        let back = LookupTable::from_bytes(&frozen.to_bytes()).unwrap();
        let text = serde_json::to_string(&frozen.to_document()).unwrap();
        let back_json = LookupTable::from_document(serde_json::from_str(&text).unwrap()).unwrap();
        let xs: Vec<f64> = (0..500).map(|i| -5.0 + 0.02 * i as f64).collect();
        let ys = frozen.forward(&xs).unwrap();
        for other in [back, back_json] {
            let ys2 = other.forward(&xs).unwrap();
            for (a, b) in ys.iter().zip(&ys2) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        assert!(LookupTable::from_bytes(&frozen.to_bytes()[..30]).is_err());
    }
}
