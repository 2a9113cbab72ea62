use serde::{Deserialize, Serialize};

use super::model::{Gradients, MlpModel};
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam with bias correction and decoupled weight decay.
///
/// Moments are allocated on the first step to match the parameter groups.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// Per-group optimizer flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupFlags {
    pub decay: bool,
    pub trainable: bool,
}

impl AdamState {
    pub fn new(lr: f64) -> Result<Self> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::InvalidHyperparameter(format!("learning rate {lr}")));
        }
        Ok(Self {
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
            weight_decay: 0.0,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Result<Self> {
        if !(weight_decay.is_finite() && weight_decay >= 0.0) {
            return Err(Error::InvalidHyperparameter(format!("weight decay {weight_decay}")));
        }
        self.weight_decay = weight_decay;
        Ok(self)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First moments, one vector per parameter group.
    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One update of every trainable group. Groups flagged `decay` are
    /// shrunk by `lr * weight_decay` before the adaptive step.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>], flags: &[GroupFlags]) -> Result<()> {
        if params.len() != grads.len() || params.len() != flags.len() {
            return Err(Error::Shape(format!(
                "{} parameter groups, {} gradient groups, {} flags",
                params.len(),
                grads.len(),
                flags.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::Shape(format!(
                    "group {i}: {} parameters but {} gradients",
                    p.len(),
                    g.len()
                )));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            return Err(Error::Shape("parameter groups changed shape between steps".into()));
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let shrink = 1.0 - self.lr * self.weight_decay;
        for (((p, g), f), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(flags)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if !f.trainable {
                continue;
            }
            for (((pi, &gi), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                if f.decay && self.weight_decay > 0.0 {
                    *pi *= shrink;
                }
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Applies one Adam update to `model` using its decay and trainable flags.
pub fn adam_step(state: &mut AdamState, model: &mut MlpModel, grads: &Gradients) -> Result<()> {
    let flags: Vec<GroupFlags> = model
        .param_info()
        .iter()
        .map(|p| GroupFlags {
            decay: p.decay,
            trainable: p.trainable,
        })
        .collect();
    let mut params = model.params_mut();
    state.step(&mut params, &grads.groups, &flags)
}
