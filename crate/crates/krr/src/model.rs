//! Serialized fitted models.
//!
//! JSON with exact float round-trip: the stored dual weights and residuals
//! are restored bit for bit, so a reloaded model predicts exactly what the
//! in-process model did.

use std::path::{Path, PathBuf};

use krr_core::{FittedKrr, InputPoint, KernelSpec};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::io;

pub const MODEL_FORMAT: &str = "krr-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub spec: KernelSpec,
    pub lambda: f64,
    pub xs: Vec<InputPoint>,
    pub ys: Vec<f64>,
    pub dual_weights: Vec<f64>,
    pub residuals: Vec<f64>,
}

impl ModelFile {
    pub fn from_model(model: &FittedKrr) -> Self {
        ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            spec: *model.spec(),
            lambda: model.lambda(),
            xs: model.xs().to_vec(),
            ys: model.ys().to_vec(),
            dual_weights: model.dual_weights().iter().copied().collect(),
            residuals: model.residuals().iter().copied().collect(),
        }
    }

    pub fn into_model(self) -> Result<FittedKrr> {
        if self.format != MODEL_FORMAT || self.version != MODEL_VERSION {
            return Err(CliError::config(format!(
                "unsupported model format {:?} version {} (expected {MODEL_FORMAT:?} version {MODEL_VERSION})",
                self.format, self.version
            )));
        }
        Ok(FittedKrr::from_parts(self.spec, self.xs, self.ys, self.lambda, self.dual_weights, self.residuals)?)
    }
}

pub fn save_model(path: &Path, model: &FittedKrr) -> Result<PathBuf> {
    io::write_json(path, &ModelFile::from_model(model))
}

pub fn load_model(path: &Path) -> Result<FittedKrr> {
    io::read_json::<ModelFile>(path)?.into_model()
}
