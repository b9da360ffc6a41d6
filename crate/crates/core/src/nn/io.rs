//! Model file layout, all integers little-endian `u64`:
//!
//! ```text
//! "DOAMODEL" version:u8
//! config_len config_json
//! norms_len norms_json
//! n_tensors
//! repeated: name_len name ndims dims... nvalues f64...
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::autodiff::Array;
use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};

use super::{Model, ModelWeights};

const MAGIC: &[u8; 8] = b"DOAMODEL";
const VERSION: u8 = 1;

pub fn model_to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut e = Encoder::header(MAGIC, VERSION);
    e.str(&serde_json::to_string(&model.config)?);
    e.str(&serde_json::to_string(&model.norms)?);
    e.usize(model.weights.tensors.len());
    for (name, t) in &model.weights.tensors {
        e.str(name);
        e.usizes(t.shape());
        e.f64s(t.data());
    }
    Ok(e.finish())
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Model> {
    let (mut d, version) = Decoder::open(bytes, MAGIC)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported model version {version}")));
    }
    let config: super::ModelConfig = serde_json::from_str(&d.str()?)?;
    let norms = serde_json::from_str(&d.str()?)?;
    let n = d.usize()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..n {
        let name = d.str()?;
        let shape = d.usizes()?;
        let data = d.f64s()?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("non-finite value in {name}")));
        }
        tensors.insert(name, Array::new(shape, data)?);
    }
    d.finish()?;
    config.validate()?;
    let weights = ModelWeights { tensors };
    weights.check(&config)?;
    Ok(Model { config, norms, weights })
}

/// Writes through a sibling temporary file so a crash never leaves a
/// truncated model behind.
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let bytes = model_to_bytes(model)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    model_from_bytes(&fs::read(path)?)
}
