//! Plain-text manifests that describe a saved model.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, ScheduleParams};

/// Largest tolerated per-step difference between two `alpha_bar` tables.
pub const ALPHA_BAR_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub format_tag: String,
    pub image_size: usize,
    /// Output size for models that change resolution; defaults to `image_size`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_size: Option<usize>,
    #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_end: Option<f64>,
    /// Weights file, relative to the manifest's directory.
    pub weights: PathBuf,
    /// Architecture hyperparameters, interpreted by the loader for `format_tag`.
    #[serde(default)]
    pub model: toml::Table,
}

impl ModelManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = toml::to_string(self).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn schedule_params(&self) -> Option<ScheduleParams> {
        Some(ScheduleParams {
            steps: self.steps?,
            beta_start: self.beta_start?,
            beta_end: self.beta_end?,
            ..ScheduleParams::default()
        })
    }

    pub fn set_schedule(&mut self, params: &ScheduleParams) {
        self.steps = Some(params.steps);
        self.beta_start = Some(params.beta_start);
        self.beta_end = Some(params.beta_end);
    }

    /// Rejects a manifest whose schedule disagrees with `schedule`.
    pub fn check_schedule(&self, schedule: &NoiseSchedule) -> Result<()> {
        let params = self
            .schedule_params()
            .ok_or_else(|| Error::ManifestMismatch("manifest does not declare T, beta_start and beta_end".into()))?;
        if params.steps != schedule.steps() {
            return Err(Error::ManifestMismatch(format!(
                "manifest T = {} but the schedule has T = {}",
                params.steps,
                schedule.steps()
            )));
        }
        let declared = params.build()?;
        let worst = declared
            .alpha_bars()
            .iter()
            .zip(schedule.alpha_bars())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if worst > ALPHA_BAR_TOLERANCE {
            return Err(Error::ManifestMismatch(format!(
                "alpha_bar tables differ by up to {worst:.3e}"
            )));
        }
        Ok(())
    }

    pub fn model_field<T: for<'de> Deserialize<'de>>(&self) -> Result<T> {
        toml::Value::Table(self.model.clone())
            .try_into()
            .map_err(|e: toml::de::Error| Error::Parse {
                path: self.weights.clone(),
                message: format!("model section: {e}"),
            })
    }
}

/// Resolves the weights path and checks that it exists.
pub(crate) fn weights_path(manifest_path: &Path, manifest: &ModelManifest) -> Result<PathBuf> {
    let base = manifest_path.parent().unwrap_or(Path::new(""));
    let path = base.join(&manifest.weights);
    ensure_exists(&path)?;
    Ok(path)
}

pub(crate) fn ensure_exists(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint file not found"),
        ))
    }
}
