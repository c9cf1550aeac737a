//! Checkpoint directories: one `MMST` tensor file per named parameter plus a
//! JSON sidecar describing how to rebuild the model.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const SIDECAR: &str = "model.json";

pub(crate) fn param_file(name: &str) -> String {
    format!("{name}.mmst")
}

/// Writes every parameter (as f32) and the sidecar into `dir`.
pub(crate) fn write_dir<S: Serialize>(dir: &Path, sidecar: &S, params: &[&Param]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for p in params {
        let data: Vec<f32> = p.value.iter().map(|&v| v as f32).collect();
        if data.iter().zip(&p.value).any(|(&a, &b)| a as f64 != b) {
            return Err(Error::Validation(format!("parameter {} is not f32-representable", p.name)));
        }
        write_tensor(&Tensor::new(p.shape.clone(), data)?, dir.join(param_file(&p.name)))?;
    }
    let path = dir.join(SIDECAR);
    let mut json = serde_json::to_string_pretty(sidecar)?;
    json.push('\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub(crate) fn read_sidecar<S: DeserializeOwned>(dir: &Path) -> Result<S> {
    let path = dir.join(SIDECAR);
    if !path.is_file() {
        return Err(Error::MissingCheckpoint(format!("no {SIDECAR} in {}", dir.display())));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Fills freshly built parameters from their tensor files, checking shapes.
pub(crate) fn read_params(dir: &Path, params: Vec<&mut Param>) -> Result<()> {
    for p in params {
        let t = read_tensor(dir.join(param_file(&p.name)))?;
        if t.dims() != p.shape.as_slice() {
            return Err(Error::Shape(format!(
                "checkpoint tensor {} has dims {:?}, model expects {:?}",
                p.name,
                t.dims(),
                p.shape
            )));
        }
        p.value = t.data().iter().map(|&v| v as f64).collect();
        p.zero_grad();
    }
    Ok(())
}

pub(crate) fn write_plain(dir: &Path, name: &str, t: &Tensor) -> Result<()> {
    write_tensor(t, dir.join(param_file(name)))
}

pub(crate) fn read_plain(dir: &Path, name: &str) -> Result<Tensor> {
    read_tensor(dir.join(param_file(name)))
}
