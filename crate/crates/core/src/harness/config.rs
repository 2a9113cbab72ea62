use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::activation::{Variant, DEFAULT_LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::nn::{ActivationKind, ActivationSpec, DitacSettings, Head};
use crate::prior::{DEFAULT_LAMBDA_VAR, DEFAULT_W_REG};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "gmm2d")]
    Gmm2d,
    #[serde(rename = "mnist")]
    Mnist,
    #[serde(rename = "reg1d_a")]
    Reg1dA,
    #[serde(rename = "reg1d_b")]
    Reg1dB,
    #[serde(rename = "reg2d")]
    Reg2d,
    #[serde(rename = "auto_mpg")]
    AutoMpg,
}

impl Task {
    pub const ALL: [Task; 6] = [Task::Gmm2d, Task::Mnist, Task::Reg1dA, Task::Reg1dB, Task::Reg2d, Task::AutoMpg];

    pub fn name(self) -> &'static str {
        match self {
            Task::Gmm2d => "gmm2d",
            Task::Mnist => "mnist",
            Task::Reg1dA => "reg1d_a",
            Task::Reg1dB => "reg1d_b",
            Task::Reg2d => "reg2d",
            Task::AutoMpg => "auto_mpg",
        }
    }

    pub fn head(self) -> Head {
        match self {
            Task::Gmm2d | Task::Mnist => Head::Classification,
            _ => Head::Regression,
        }
    }

    pub fn is_classification(self) -> bool {
        self.head() == Head::Classification
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown task '{s}'")))
    }
}

/// Everything that determines a training run.
///
/// On disk this is a flat TOML table. Values are resolved in this order,
/// later sources winning: the task defaults ([`ExperimentConfig::defaults`]),
/// the config file, then `--seed` and each `--override key=value` in the
/// order given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub activation: ActivationKind,

    /// DiTAC domain `[ditac_a, ditac_b]` and tessellation.
    pub ditac_a: f64,
    pub ditac_b: f64,
    pub n_cells: usize,
    pub zero_boundary: bool,
    /// 0 evaluates the transformation exactly; `>= 2` trains through a
    /// lookup table with that many intervals.
    pub n_quant: usize,
    pub leaky_slope: f64,
    pub lambda_var: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_smooth: Option<f64>,
    /// Keeps every DiTAC `theta` at zero: the base-activation control.
    pub freeze_theta: bool,
    /// Applied only when the model contains DiTAC layers.
    pub w_reg: f64,

    pub widths: Vec<usize>,
    /// Used by classification tasks.
    pub epochs: usize,
    /// Used by regression tasks.
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Decoupled decay on dense weights and biases only.
    pub weight_decay: f64,
    pub seed: u64,
    /// Seed of the dataset draw, kept apart from `seed` so paired runs can
    /// share data while varying initialization and batching.
    pub data_seed: u64,

    /// Regression input box `[data_lo, data_hi]^dim`.
    pub data_lo: f64,
    pub data_hi: f64,
    pub n_train: usize,
    pub n_test: usize,

    pub gmm_components: usize,
    pub gmm_points: usize,
    pub gmm_kappa0: f64,
    pub gmm_nu0: f64,
    /// Inverse-Wishart scale is `gmm_psi_scale * I`.
    pub gmm_psi_scale: f64,
    pub gmm_alpha: f64,
    pub split: f64,

    /// Directory holding `train-images-idx3-ubyte[.gz]` and the labels file.
    pub mnist_dir: PathBuf,
    /// Samples drawn from the IDX file before the train/test split; 0 keeps
    /// all of them.
    pub mnist_subset: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auto_mpg_path: Option<PathBuf>,

    /// History interval in steps; 0 picks once per epoch for classification
    /// and every 1000 iterations for regression.
    pub log_every: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Default recipe for `task` with a DITAC activation.
    pub fn defaults(task: Task) -> Self {
        let (widths, lr): (Vec<usize>, f64) = match task {
            Task::Gmm2d => (vec![2, 100, 100, 10], 1e-4),
            Task::Mnist => (vec![784, 128, 64, 10], 1e-4),
            Task::Reg1dA => (vec![1, 30, 1], 1e-2),
            Task::Reg1dB => (vec![1, 64, 1], 1e-3),
            Task::Reg2d => (vec![2, 50, 1], 1e-2),
            Task::AutoMpg => (vec![1, 100, 100, 1], 1e-2),
        };
        let batch_size = if task.is_classification() { 64 } else { 98 };
        Self {
            task,
            activation: ActivationKind::Ditac(Variant::Ditac),
            ditac_a: -3.0,
            ditac_b: 3.0,
            n_cells: 10,
            zero_boundary: true,
            n_quant: 0,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            lambda_var: DEFAULT_LAMBDA_VAR,
            lambda_smooth: None,
            freeze_theta: false,
            w_reg: DEFAULT_W_REG,
            widths,
            epochs: 150,
            iterations: 40_000,
            batch_size,
            lr,
            weight_decay: 0.0,
            seed: 0,
            data_seed: 0,
            data_lo: -1.0,
            data_hi: 1.0,
            n_train: 10_000,
            n_test: 2_000,
            gmm_components: 10,
            gmm_points: 5_000,
            gmm_kappa0: 0.05,
            gmm_nu0: 5.0,
            gmm_psi_scale: 0.5,
            gmm_alpha: 1.0,
            split: 0.7,
            mnist_dir: PathBuf::from("data/mnist5k"),
            mnist_subset: 5_000,
            auto_mpg_path: None,
            log_every: 0,
            output_dir: None,
        }
    }

    /// Parses a config file; `task` picks the defaults the file overrides.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        let task = match table.get("task") {
            Some(toml::Value::String(s)) => s.parse()?,
            Some(_) => return Err(Error::InvalidConfig("'task' must be a string".into())),
            None => return Err(Error::InvalidConfig("config is missing 'task'".into())),
        };
        let mut cfg = Self::defaults(task);
        cfg.merge(table)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    fn merge(&mut self, table: toml::Table) -> Result<()> {
        let mut current = toml::Table::try_from(&*self).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for (k, v) in table {
            current.insert(k, v);
        }
        let merged: Self = current.try_into().map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        merged.validate()?;
        *self = merged;
        Ok(())
    }

    /// Applies one `key=value` override. The value is read as a TOML value
    /// and falls back to a bare string, so `activation=gelu` and
    /// `widths=[1,8,1]` both work.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("override '{assignment}' is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value = match format!("v = {raw}").parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").expect("key was just parsed"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        if key == "task" {
            return Err(Error::InvalidConfig("'task' cannot be overridden; start from that task's config".into()));
        }
        let mut table = toml::Table::new();
        table.insert(key.to_string(), value);
        self.merge(table)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return bad(format!("widths {:?} need at least two positive entries", self.widths));
        }
        let out = *self.widths.last().expect("checked above");
        let input = self.widths[0];
        let (want_in, want_out): (Option<usize>, Option<usize>) = match self.task {
            Task::Gmm2d => (Some(2), Some(self.gmm_components)),
            Task::Mnist => (Some(784), Some(10)),
            Task::Reg1dA | Task::Reg1dB | Task::AutoMpg => (Some(1), Some(1)),
            Task::Reg2d => (Some(2), Some(1)),
        };
        if want_in.is_some_and(|w| w != input) || want_out.is_some_and(|w| w != out) {
            return bad(format!(
                "{} needs widths from {} to {}, got {:?}",
                self.task,
                want_in.unwrap_or(input),
                want_out.unwrap_or(out),
                self.widths
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr = {} must be positive", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.w_reg >= 0.0 && self.weight_decay.is_finite() && self.w_reg.is_finite()) {
            return bad("weight_decay and w_reg must be non-negative".into());
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return bad(format!("split = {} not in (0, 1)", self.split));
        }
        if !(self.data_lo < self.data_hi) {
            return bad(format!("data box [{}, {}] is empty", self.data_lo, self.data_hi));
        }
        if self.n_quant == 1 {
            return bad("n_quant must be 0 or at least 2".into());
        }
        Ok(())
    }

    pub fn head(&self) -> Head {
        self.task.head()
    }

    pub fn has_ditac(&self) -> bool {
        self.activation.is_ditac()
    }

    pub fn activation_spec(&self) -> ActivationSpec {
        ActivationSpec {
            kind: self.activation,
            ditac: DitacSettings {
                a: self.ditac_a,
                b: self.ditac_b,
                n_cells: self.n_cells,
                zero_boundary: self.zero_boundary,
                n_quant: self.n_quant,
                leaky_slope: self.leaky_slope,
                lambda_var: self.lambda_var,
                lambda_smooth: self.lambda_smooth,
                freeze_theta: self.freeze_theta,
            },
        }
    }

    /// `w_reg` if the activation is DiTAC-family, else 0.
    pub fn effective_w_reg(&self) -> f64 {
        if self.has_ditac() {
            self.w_reg
        } else {
            0.0
        }
    }

    /// Git-style object hash of the canonical TOML form, with `output_dir`
    /// left out so the same run hashes identically wherever it is written.
    pub fn content_hash(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.output_dir = None;
        let text = canonical.to_toml_string()?;
        let mut h = Sha256::new();
        h.update(format!("blob {}\0", text.len()).as_bytes());
        h.update(text.as_bytes());
        Ok(hex::encode(h.finalize()))
    }
}
