use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{ActCache, ActivationLayer, ActivationSpec, DenseLayer};
use crate::activation::ActivationConfig;
use crate::error::{Error, Result};

/// Output head: raw outputs for regression, logits (softmax applied by the
/// loss) for classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Regression,
    Classification,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Dense(DenseLayer),
    Activation(ActivationLayer),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Theta,
    Alpha,
    Beta,
}

/// Where a parameter group lives and how the optimizer treats it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub layer: usize,
    pub kind: ParamKind,
    pub len: usize,
    /// Weight decay applies only to dense weights and biases.
    pub decay: bool,
    pub trainable: bool,
}

/// Parameter gradients, one vector per group in [`MlpModel::param_info`]
/// order, plus the gradient with respect to the input batch.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub groups: Vec<Vec<f64>>,
    pub input: DMatrix<f64>,
}

impl Gradients {
    pub fn flat(&self) -> Vec<f64> {
        self.groups.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterCount {
    pub total: usize,
    pub dense: usize,
    /// Trainable scalars of each activation layer, in layer order.
    pub per_activation: Vec<usize>,
}

#[derive(Debug, Clone)]
struct ForwardCache {
    /// Input of every layer, feature-major.
    inputs: Vec<DMatrix<f64>>,
    acts: Vec<Option<ActCache>>,
}

/// Alternating dense/activation stack ending in a dense layer.
///
/// Batches enter and leave as `batch x features`; internally columns are
/// samples. Every reduction over the batch runs in sample order, so results
/// are bitwise reproducible on one platform.
#[derive(Debug, Clone)]
pub struct MlpModel {
    layers: Vec<Layer>,
    head: Head,
    w_reg: f64,
    cache: Option<ForwardCache>,
}

impl MlpModel {
    pub fn from_layers(layers: Vec<Layer>, head: Head) -> Result<Self> {
        let mut width: Option<usize> = None;
        let mut last_dense = false;
        for (i, layer) in layers.iter().enumerate() {
            match layer {
                Layer::Dense(d) => {
                    if let Some(w) = width {
                        if w != d.in_dim() {
                            return Err(Error::Shape(format!(
                                "layer {i} expects {} inputs but receives {w}",
                                d.in_dim()
                            )));
                        }
                    }
                    width = Some(d.out_dim());
                    last_dense = true;
                }
                Layer::Activation(_) => {
                    if width.is_none() {
                        return Err(Error::Shape("model must start with a dense layer".into()));
                    }
                    last_dense = false;
                }
            }
        }
        if !last_dense {
            return Err(Error::Shape("model must end with a dense layer".into()));
        }
        Ok(Self {
            layers,
            head,
            w_reg: 0.0,
            cache: None,
        })
    }

    /// `widths = [in, h1, ..., out]`; one activation (same spec) after every
    /// hidden dense layer.
    pub fn build<R: Rng + ?Sized>(
        widths: &[usize],
        activation: &ActivationSpec,
        head: Head,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Shape(format!("invalid layer widths {widths:?}")));
        }
        let mut layers = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            layers.push(Layer::Dense(DenseLayer::init(pair[0], pair[1], rng)));
            if i + 2 < widths.len() {
                layers.push(Layer::Activation(activation.build()?));
            }
        }
        Self::from_layers(layers, head)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        match &self.layers[0] {
            Layer::Dense(d) => d.in_dim(),
            Layer::Activation(_) => unreachable!("validated at construction"),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Dense(d)) => d.out_dim(),
            _ => unreachable!("validated at construction"),
        }
    }

    /// Weight of the smoothness regularizer on every DiTAC `theta`.
    pub fn set_w_reg(&mut self, w_reg: f64) -> Result<()> {
        if !(w_reg.is_finite() && w_reg >= 0.0) {
            return Err(Error::InvalidHyperparameter(format!("w_reg = {w_reg}")));
        }
        self.w_reg = w_reg;
        Ok(())
    }

    pub fn w_reg(&self) -> f64 {
        self.w_reg
    }

    pub fn has_ditac(&self) -> bool {
        self.ditac_configs().next().is_some()
    }

    /// `(layer index, config)` of every DiTAC layer.
    pub fn ditac_configs(&self) -> impl Iterator<Item = (usize, &ActivationConfig)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| match l {
            Layer::Activation(a) => a.ditac().map(|u| (i, u.config())),
            Layer::Dense(_) => None,
        })
    }

    /// Freezes or unfreezes every DiTAC `theta`.
    pub fn set_theta_frozen(&mut self, frozen: bool) {
        for layer in &mut self.layers {
            if let Layer::Activation(a) = layer {
                if let Some(u) = a.ditac_mut() {
                    u.set_frozen(frozen);
                }
            }
        }
    }

    /// Sets the lookup-table resolution of every DiTAC layer (0 = exact).
    pub fn set_ditac_n_quant(&mut self, n_quant: usize) -> Result<()> {
        self.cache = None;
        for layer in &mut self.layers {
            if let Layer::Activation(a) = layer {
                if let Some(u) = a.ditac_mut() {
                    u.config_mut().set_n_quant(n_quant)?;
                }
            }
        }
        Ok(())
    }

    pub fn count_parameters(&self) -> ParameterCount {
        let mut count = ParameterCount::default();
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => count.dense += d.n_params(),
                Layer::Activation(a) => count.per_activation.push(a.n_params()),
            }
        }
        count.total = count.dense + count.per_activation.iter().sum::<usize>();
        count
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} features, model expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model input"));
        }
        Ok(())
    }

    fn check_finite(layer: usize, h: &DMatrix<f64>) -> Result<()> {
        if h.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFiniteActivation { layer })
        }
    }

    /// Inference forward pass; does not touch the training cache.
    pub fn predict(&mut self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        let mut h = x.transpose();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Dense(d) => h = d.forward(&h),
                Layer::Activation(a) => a.forward_inplace(h.as_mut_slice())?,
            }
            Self::check_finite(i, &h)?;
        }
        Ok(h.transpose())
    }

    /// Training forward pass; keeps what [`backward`](Self::backward) needs.
    pub fn forward(&mut self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.cache = None;
        self.check_input(x)?;
        let mut h = x.transpose();
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut acts = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let next = match layer {
                Layer::Dense(d) => {
                    acts.push(None);
                    d.forward(&h)
                }
                Layer::Activation(a) => {
                    let (out, cache) = a.forward_train(h.as_slice())?;
                    acts.push(Some(cache));
                    DMatrix::from_vec(h.nrows(), h.ncols(), out)
                }
            };
            Self::check_finite(i, &next)?;
            inputs.push(std::mem::replace(&mut h, next));
        }
        self.cache = Some(ForwardCache { inputs, acts });
        Ok(h.transpose())
    }

    /// Gradients of a loss whose derivative with respect to the last forward
    /// output is `upstream` (`batch x out`). Adds the regularizer gradient
    /// `2 w_reg P theta` to every DiTAC group; frozen groups get zeros.
    pub fn backward(&mut self, upstream: &DMatrix<f64>) -> Result<Gradients> {
        let cache = self.cache.take().ok_or(Error::MissingCache)?;
        let batch = cache.inputs[0].ncols();
        if upstream.nrows() != batch || upstream.ncols() != self.output_dim() {
            return Err(Error::Shape(format!(
                "upstream is {}x{}, expected {batch}x{}",
                upstream.nrows(),
                upstream.ncols(),
                self.output_dim()
            )));
        }
        let mut g = upstream.transpose();
        let mut per_layer: Vec<Vec<Vec<f64>>> = vec![Vec::new(); self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            match layer {
                Layer::Dense(d) => {
                    let gw = &g * input.transpose();
                    let gb: Vec<f64> = g.row_iter().map(|r| r.iter().sum()).collect();
                    g = d.w().tr_mul(&g);
                    per_layer[i] = vec![gw.as_slice().to_vec(), gb];
                }
                Layer::Activation(a) => {
                    let act = cache.acts[i].as_ref().ok_or(Error::MissingCache)?;
                    let (gx, mut gp) = a.backward(input.as_slice(), act, g.as_slice())?;
                    g = DMatrix::from_vec(g.nrows(), g.ncols(), gx);
                    if let Some(u) = a.ditac() {
                        if u.is_frozen() {
                            gp.iter_mut().for_each(|v| *v = 0.0);
                        } else if self.w_reg > 0.0 {
                            let rg = u.prior().reg_grad(u.config().theta())?;
                            for (p, r) in gp.iter_mut().zip(rg) {
                                *p += self.w_reg * r;
                            }
                        }
                    }
                    if a.n_params() > 0 {
                        per_layer[i] = vec![gp];
                    }
                }
            }
        }
        Ok(Gradients {
            groups: per_layer.into_iter().flatten().collect(),
            input: g.transpose(),
        })
    }

    /// `w_reg * sum_l theta_l^T P_l theta_l` over the DiTAC layers.
    pub fn regularization(&self) -> Result<f64> {
        if self.w_reg == 0.0 {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for layer in &self.layers {
            if let Layer::Activation(a) = layer {
                if let Some(u) = a.ditac() {
                    total += u.prior().quadratic(u.config().theta())?;
                }
            }
        }
        Ok(self.w_reg * total)
    }

    pub fn param_info(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense(d) => {
                    for (kind, len) in [(ParamKind::Weight, d.w().len()), (ParamKind::Bias, d.bias().len())] {
                        out.push(ParamInfo {
                            layer: i,
                            kind,
                            len,
                            decay: true,
                            trainable: true,
                        });
                    }
                }
                Layer::Activation(a) => {
                    if a.n_params() == 0 {
                        continue;
                    }
                    let kind = match a {
                        ActivationLayer::Ditac(_) => ParamKind::Theta,
                        ActivationLayer::PRelu { .. } => ParamKind::Alpha,
                        _ => ParamKind::Beta,
                    };
                    out.push(ParamInfo {
                        layer: i,
                        kind,
                        len: a.n_params(),
                        decay: false,
                        trainable: a.params_trainable(),
                    });
                }
            }
        }
        out
    }

    /// Weight-decay flag per parameter group.
    pub fn decay_mask(&self) -> Vec<bool> {
        self.param_info().iter().map(|p| p.decay).collect()
    }

    /// Read-only parameter groups in [`param_info`](Self::param_info) order.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense(d) => {
                    out.push(d.w().as_slice());
                    out.push(d.bias().as_slice());
                }
                Layer::Activation(a) => out.extend(a.params()),
            }
        }
        out
    }

    /// Mutable parameter groups. Borrowing a DiTAC group counts as a `theta`
    /// update and invalidates its lookup table.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.cache = None;
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) => {
                    let (w, b) = d.parts_mut();
                    out.push(w);
                    out.push(b);
                }
                Layer::Activation(a) => out.extend(a.params_mut()),
            }
        }
        out
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.params().into_iter().flatten().copied().collect()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        let total: usize = self.param_info().iter().map(|p| p.len).sum();
        if values.len() != total {
            return Err(Error::DimensionMismatch {
                expected: total,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameters"));
        }
        let mut offset = 0;
        for group in self.params_mut() {
            let n = group.len();
            group.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}
