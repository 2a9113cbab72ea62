use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use super::checkpoint::load_checkpoint;
use crate::activation::{freeze_for_inference, LookupTable, DEFAULT_N_QUANT};
use crate::error::{Error, Result};
use crate::nn::{Layer, MlpModel};

/// File name of the table exported for the activation at `layer`.
pub fn lut_file_name(layer: usize) -> String {
    format!("lut_layer{layer:02}.bin")
}

fn parse_lut_file_name(name: &str) -> Option<usize> {
    name.strip_prefix("lut_layer")?.strip_suffix(".bin")?.parse().ok()
}

/// Table resolution used for export: the model's own, or the default when
/// it trains in exact mode.
pub fn export_resolution(model: &MlpModel) -> usize {
    model
        .ditac_configs()
        .map(|(_, c)| c.n_quant())
        .find(|&q| q >= 2)
        .unwrap_or(DEFAULT_N_QUANT)
}

/// Writes one frozen binary table per DiTAC layer of `model` into `out_dir`.
pub fn export_model_luts(model: &MlpModel, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if !model.has_ditac() {
        return Err(Error::InvalidConfig("model has no DiTAC layers to export".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for (layer, cfg) in model.ditac_configs() {
        let lut = freeze_for_inference(cfg)?;
        let path = out_dir.join(lut_file_name(layer));
        lut.save_binary(&path)?;
        written.push(path);
    }
    Ok(written)
}

/// Loads the checkpoint at `checkpoint` and exports its tables.
pub fn export_lut(checkpoint: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let (_, model) = load_checkpoint(checkpoint)?;
    export_model_luts(&model, out_dir)
}

/// Reads every `lut_layerNN.bin` in `dir`, ordered by layer.
pub fn load_luts(dir: &Path) -> Result<Vec<(usize, LookupTable)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        if let Some(layer) = name.to_str().and_then(parse_lut_file_name) {
            out.push((layer, LookupTable::load_binary(&entry.path())?));
        }
    }
    out.sort_by_key(|(l, _)| *l);
    Ok(out)
}

/// Forward pass of `model` with each DiTAC layer replaced by its loaded
/// table. `x` is `batch x features`.
pub fn infer_with_luts(model: &MlpModel, luts: &[(usize, LookupTable)], x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != model.input_dim() {
        return Err(Error::Shape(format!(
            "input has {} features, model expects {}",
            x.ncols(),
            model.input_dim()
        )));
    }
    let expected: Vec<usize> = model.ditac_configs().map(|(i, _)| i).collect();
    let found: Vec<usize> = luts.iter().map(|(i, _)| *i).collect();
    if expected != found {
        return Err(Error::Data(format!("tables for layers {found:?}, model has DiTAC at {expected:?}")));
    }
    let mut h = x.transpose();
    for (i, layer) in model.layers().iter().enumerate() {
        match layer {
            Layer::Dense(d) => h = d.forward(&h),
            Layer::Activation(a) => match luts.iter().find(|(l, _)| *l == i) {
                Some((_, lut)) => {
                    let out = lut.forward(h.as_slice())?;
                    h.as_mut_slice().copy_from_slice(&out);
                }
                None => a.clone().forward_inplace(h.as_mut_slice())?,
            },
        }
    }
    Ok(h.transpose())
}

/// Largest absolute difference between table-based inference from `dir`
/// and the model's own quantized forward pass at the export resolution.
pub fn probe_lut_export(model: &MlpModel, dir: &Path, probe: &DMatrix<f64>) -> Result<f64> {
    let luts = load_luts(dir)?;
    let from_tables = infer_with_luts(model, &luts, probe)?;
    let mut reference = model.clone();
    reference.set_ditac_n_quant(export_resolution(model))?;
    let direct = reference.predict(probe)?;
    Ok(from_tables
        .iter()
        .zip(direct.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}
