//! Experiment harness: every command takes a resolved settings struct, writes
//! its outputs plus a `run.toml` manifest, and can be replayed from that
//! manifest.

pub mod cli;
mod commands;
mod sheet;

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::denoiser::{load_denoiser, Denoiser};
use crate::enhancement::{identity_enhancer, load_enhancer, Enhancer, BASELINE_RESNET_TAG};
use crate::checkpoint::ModelManifest;
use crate::error::{Error, Result};
use crate::metrics::{Embedder, RandomProjectionEmbedder};
use crate::schedule::NoiseSchedule;

pub use commands::*;
pub use sheet::{draw_label, ContactSheet, GLYPH_HEIGHT, GLYPH_WIDTH};

pub const RUN_MANIFEST: &str = "run.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
}

/// `[run]` metadata plus the `[args]` the command actually ran with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run: RunInfo,
    pub args: toml::Table,
}

pub(crate) fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn parse_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

impl RunManifest {
    pub fn new<S: Serialize>(command: &str, seed: u64, started_unix: u64, args: &S) -> Result<Self> {
        let args = toml::Table::try_from(args).map_err(|e| parse_error(Path::new("<args>"), e))?;
        Ok(Self {
            run: RunInfo {
                command: command.to_string(),
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                seed,
                started_unix,
                finished_unix: unix_now(),
            },
            args,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| parse_error(path, e))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = toml::to_string(self).map_err(|e| parse_error(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// The recorded arguments, after checking they belong to `command`.
    pub fn args_for<T: DeserializeOwned>(&self, command: &str) -> Result<T> {
        if self.run.command != command {
            return Err(Error::ManifestMismatch(format!(
                "manifest was written by `{}`, not `{command}`",
                self.run.command
            )));
        }
        toml::Value::Table(self.args.clone())
            .try_into()
            .map_err(|e| parse_error(Path::new(RUN_MANIFEST), e))
    }
}

/// Layers `over` onto `base`, key by key, recursing into sub-tables.
pub fn overlay(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => overlay(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Resolves settings as CLI > config file > `DR2_SEED` > defaults.
pub fn resolve_settings<T: Serialize + DeserializeOwned + Default>(
    command: &str,
    config: Option<&Path>,
    cli: toml::Table,
) -> Result<T> {
    let mut table = toml::Table::try_from(T::default()).map_err(|e| parse_error(Path::new("<defaults>"), e))?;
    let mut seeded = false;
    if let Some(path) = config {
        let manifest = RunManifest::read(path)?;
        if manifest.run.command != command {
            return Err(Error::ManifestMismatch(format!(
                "{} was written by `{}`, not `{command}`",
                path.display(),
                manifest.run.command
            )));
        }
        seeded |= manifest.args.contains_key("seed");
        overlay(&mut table, manifest.args);
    }
    seeded |= cli.contains_key("seed");
    overlay(&mut table, cli);
    if !seeded && table.contains_key("seed") {
        table.insert("seed".into(), toml::Value::Integer(crate::rng::resolve_seed(None) as i64));
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e| parse_error(config.unwrap_or(Path::new("<cli>")), e))
}

/// Accepts either a model directory or its `manifest.toml`.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("manifest.toml")
    } else {
        path.to_path_buf()
    }
}

pub fn open_denoiser(path: &Path, schedule: &NoiseSchedule) -> Result<Box<dyn Denoiser>> {
    load_denoiser(manifest_path(path), schedule)
}

/// `identity`, `baseline:<ckpt>` or `external:<ckpt>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EnhancerSpec {
    Identity,
    Baseline(PathBuf),
    External(PathBuf),
}

impl std::str::FromStr for EnhancerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "identity" => Ok(EnhancerSpec::Identity),
            Some(("baseline", p)) if !p.is_empty() => Ok(EnhancerSpec::Baseline(p.into())),
            Some(("external", p)) if !p.is_empty() => Ok(EnhancerSpec::External(p.into())),
            _ => Err(Error::InvalidConfig(format!(
                "enhancer must be `identity`, `baseline:<ckpt>` or `external:<ckpt>`, got `{s}`"
            ))),
        }
    }
}

impl EnhancerSpec {
    pub fn open(&self) -> Result<Box<dyn Enhancer>> {
        match self {
            EnhancerSpec::Identity => Ok(Box::new(identity_enhancer())),
            EnhancerSpec::Baseline(p) => {
                let path = manifest_path(p);
                let tag = ModelManifest::read(&path)?.format_tag;
                if tag != BASELINE_RESNET_TAG {
                    return Err(Error::UnsupportedFormat(format!("{tag} (expected {BASELINE_RESNET_TAG})")));
                }
                load_enhancer(path)
            }
            EnhancerSpec::External(p) => load_enhancer(manifest_path(p)),
        }
    }
}

/// `projection:<dim>:<seed>`, a fixed random-projection embedder. No
/// pretrained face embedder ships with the crate.
pub fn parse_embedder(spec: &str, shape: (usize, usize, usize)) -> Result<Box<dyn Embedder>> {
    let bad = || Error::InvalidConfig(format!("embedder must be `projection:<dim>:<seed>`, got `{spec}`"));
    let mut parts = spec.split(':');
    if parts.next() != Some("projection") {
        return Err(bad());
    }
    let dim: usize = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let seed: u64 = parts.next().unwrap_or("0").parse().map_err(|_| bad())?;
    if dim == 0 || parts.next().is_some() {
        return Err(bad());
    }
    Ok(Box::new(RandomProjectionEmbedder::new(shape, dim, seed)))
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default)]
    struct Demo {
        a: usize,
        seed: u64,
        inner: Inner,
    }

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default)]
    struct Inner {
        x: f64,
        y: f64,
    }

    fn table(text: &str) -> toml::Table {
        toml::from_str(text).unwrap()
    }

    #[test]
    fn precedence_is_cli_then_config_then_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(RUN_MANIFEST);
        let recorded = Demo { a: 3, seed: 9, inner: Inner { x: 1.0, y: 2.0 } };
        RunManifest::new("demo", 9, 0, &recorded).unwrap().write(&path).unwrap();

        let cli = table("a = 5\n[inner]\ny = 7.0");
        let got: Demo = resolve_settings("demo", Some(&path), cli).unwrap();
        assert_eq!(got, Demo { a: 5, seed: 9, inner: Inner { x: 1.0, y: 7.0 } });

        let got: Demo = resolve_settings("demo", Some(&path), toml::Table::new()).unwrap();
        assert_eq!(got, recorded);
        let err = resolve_settings::<Demo>("other", Some(&path), toml::Table::new());
        assert!(matches!(err, Err(Error::ManifestMismatch(_))));
    }

    #[test]
    fn enhancer_specs() {
        assert_eq!("identity".parse::<EnhancerSpec>().unwrap(), EnhancerSpec::Identity);
        assert_eq!(
            "baseline:/m".parse::<EnhancerSpec>().unwrap(),
            EnhancerSpec::Baseline("/m".into())
        );
        assert!("vqfr".parse::<EnhancerSpec>().is_err());
        assert!("external:".parse::<EnhancerSpec>().is_err());
        assert!(matches!(
            EnhancerSpec::External("/nowhere".into()).open(),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn embedder_specs() {
        assert_eq!(parse_embedder("projection:8:1", (4, 4, 3)).unwrap().dim(), 8);
        assert!(parse_embedder("arcface", (4, 4, 3)).is_err());
        assert!(parse_embedder("projection:0", (4, 4, 3)).is_err());
    }
}
