//! Second-stage enhancers that map a coarse DR2 estimate to a detailed image,
//! and construction of their training pairs.
//!
//! Pairs are built only from DR2 self-reconstruction followed by Gaussian
//! blur; this module deliberately does not use [`crate::degradation`].

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{ensure_exists, weights_path, ModelManifest};
use crate::dataset::load_dir;
use crate::denoiser::{Denoiser, TrainReport};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::lowpass::gaussian_blur;
use crate::nn::{self, Adam, ResNet, ResNetConfig, Tensor};
use crate::rng::{seeded, substream};
use crate::sampler::{dr2_remove, Dr2Config};
use crate::schedule::NoiseSchedule;

pub const BASELINE_RESNET_TAG: &str = "dr2-baseline-resnet/v1";

pub trait Enhancer: Send + Sync {
    fn enhance(&self, x: &ImageTensor) -> Result<ImageTensor>;

    /// `(height, width)` accepted, or `None` for any size.
    fn input_size(&self) -> Option<(usize, usize)>;

    /// `(height, width)` produced, or `None` when it equals the input size.
    fn output_size(&self) -> Option<(usize, usize)>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityEnhancer;

pub fn identity_enhancer() -> IdentityEnhancer {
    IdentityEnhancer
}

impl Enhancer for IdentityEnhancer {
    fn enhance(&self, x: &ImageTensor) -> Result<ImageTensor> {
        Ok(x.clone())
    }

    fn input_size(&self) -> Option<(usize, usize)> {
        None
    }

    fn output_size(&self) -> Option<(usize, usize)> {
        None
    }
}

/// Residual CNN trained with a pixel L1 loss.
#[derive(Clone, Debug)]
pub struct BaselineEnhancer {
    net: ResNet,
    image_size: usize,
}

impl BaselineEnhancer {
    pub fn config(&self) -> &ResNetConfig {
        &self.net.config
    }

    fn manifest(&self) -> ModelManifest {
        let cfg = &self.net.config;
        let mut model = toml::Table::new();
        model.insert("channels".into(), (cfg.channels as i64).into());
        model.insert("width".into(), (cfg.width as i64).into());
        model.insert("blocks".into(), (cfg.blocks as i64).into());
        model.insert("upscale".into(), (cfg.upscale as i64).into());
        ModelManifest {
            format_tag: BASELINE_RESNET_TAG.into(),
            image_size: self.image_size,
            output_size: Some(self.image_size * cfg.upscale),
            steps: None,
            beta_start: None,
            beta_end: None,
            weights: "weights.safetensors".into(),
            model,
        }
    }

    /// Writes `manifest.toml` and `weights.safetensors` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = self.manifest();
        let mut meta = HashMap::new();
        meta.insert("format_tag".to_string(), BASELINE_RESNET_TAG.to_string());
        nn::save_params(&self.net, meta, dir.join(&manifest.weights))?;
        let path = dir.join("manifest.toml");
        manifest.write(&path)?;
        Ok(path)
    }
}

impl Enhancer for BaselineEnhancer {
    fn enhance(&self, x: &ImageTensor) -> Result<ImageTensor> {
        x.ensure_shape((self.image_size, self.image_size, self.net.config.channels))?;
        let out = self.net.forward(&Tensor::from_images(&[x]));
        let img = out.to_images().remove(0);
        if img.values().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(img.clamped())
    }

    fn input_size(&self) -> Option<(usize, usize)> {
        Some((self.image_size, self.image_size))
    }

    fn output_size(&self) -> Option<(usize, usize)> {
        let s = self.image_size * self.net.config.upscale;
        Some((s, s))
    }
}

/// Parameters of the self-reconstruction pair generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairConfig {
    #[serde(rename = "N")]
    pub n: usize,
    pub tau_set: Vec<usize>,
    pub sigma_set: Vec<f64>,
    pub seed: u64,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            n: 4,
            tau_set: vec![50, 100, 150, 200],
            sigma_set: (1..=7).map(f64::from).collect(),
            seed: 0,
        }
    }
}

impl PairConfig {
    fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidConfig("N must be >= 1".into()));
        }
        if self.tau_set.is_empty() || self.sigma_set.is_empty() {
            return Err(Error::InvalidConfig("tau_set and sigma_set must be non-empty".into()));
        }
        if let Some(&t) = self.tau_set.iter().find(|&&t| t >= schedule.steps()) {
            return Err(Error::InvalidConfig(format!("tau {t} must be < T = {}", schedule.steps())));
        }
        if let Some(s) = self.sigma_set.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
            return Err(Error::InvalidConfig(format!("blur sigma must be >= 0, got {s}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub filename: String,
    /// Blurred self-reconstruction.
    pub input: ImageTensor,
    pub target: ImageTensor,
    pub tau: usize,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub filename: String,
    pub tau: usize,
    pub sigma: f64,
}

/// For every clean image draws `tau` and `sigma` from the sets, runs DR2 on
/// the clean image itself and blurs the result. Image `i` uses seed
/// `cfg.seed + i`.
pub fn build_training_pairs(
    x_set: &[ImageTensor],
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cfg: &PairConfig,
) -> Result<Vec<TrainingPair>> {
    build_training_pairs_with(x_set, |_| denoiser, schedule, cfg)
}

/// [`build_training_pairs`] with a per-image denoiser, used with oracles.
pub fn build_training_pairs_with<'a, F>(
    x_set: &[ImageTensor],
    denoiser_for: F,
    schedule: &NoiseSchedule,
    cfg: &PairConfig,
) -> Result<Vec<TrainingPair>>
where
    F: (Fn(usize) -> &'a dyn Denoiser) + Sync,
{
    if x_set.is_empty() {
        return Err(Error::Empty("no clean images for training pairs".into()));
    }
    cfg.validate(schedule)?;
    x_set
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let seed = cfg.seed.wrapping_add(i as u64);
            let mut rng = seeded(seed);
            let tau = *cfg.tau_set.choose(&mut rng).expect("non-empty");
            let sigma = *cfg.sigma_set.choose(&mut rng).expect("non-empty");
            let dr2 = Dr2Config::new(cfg.n, tau).with_seed(rng.random());
            let coarse = dr2_remove(x, denoiser_for(i), schedule, &dr2)?;
            Ok(TrainingPair {
                filename: format!("{i:05}.png"),
                input: gaussian_blur(&coarse, sigma)?,
                target: x.clone(),
                tau,
                sigma,
            })
        })
        .collect()
}

pub const PAIR_INPUT_DIR: &str = "input";
pub const PAIR_TARGET_DIR: &str = "target";
pub const PAIR_MANIFEST: &str = "pairs.csv";

pub fn write_pairs(pairs: &[TrainingPair], dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    for sub in [PAIR_INPUT_DIR, PAIR_TARGET_DIR] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let manifest = dir.join(PAIR_MANIFEST);
    let mut w = csv::Writer::from_path(&manifest)?;
    for p in pairs {
        p.input.save_png(dir.join(PAIR_INPUT_DIR).join(&p.filename))?;
        p.target.save_png(dir.join(PAIR_TARGET_DIR).join(&p.filename))?;
        w.serialize(PairRow {
            filename: p.filename.clone(),
            tau: p.tau,
            sigma: p.sigma,
        })?;
    }
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

pub fn read_pairs(dir: impl AsRef<Path>) -> Result<Vec<TrainingPair>> {
    let dir = dir.as_ref();
    let manifest = dir.join(PAIR_MANIFEST);
    ensure_exists(&manifest)?;
    let mut r = csv::Reader::from_path(&manifest)?;
    let mut pairs = Vec::new();
    for row in r.deserialize() {
        let row: PairRow = row?;
        pairs.push(TrainingPair {
            input: ImageTensor::load(dir.join(PAIR_INPUT_DIR).join(&row.filename))?,
            target: ImageTensor::load(dir.join(PAIR_TARGET_DIR).join(&row.filename))?,
            filename: row.filename,
            tau: row.tau,
            sigma: row.sigma,
        });
    }
    Ok(pairs)
}

/// Clean images from `dir`, or synthetic faces when `dir` is `None`.
pub fn clean_images(dir: Option<&Path>, size: usize, synthetic_count: usize, seed: u64) -> Result<Vec<ImageTensor>> {
    match dir {
        Some(d) => Ok(load_dir(d, Some(size))?.into_iter().map(|(_, img)| img).collect()),
        None => Ok(crate::dataset::synthetic_faces(synthetic_count, size, seed)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnhancerTrainConfig {
    pub width: usize,
    pub blocks: usize,
    pub upscale: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub grad_clip: f32,
    pub seed: u64,
}

impl Default for EnhancerTrainConfig {
    fn default() -> Self {
        Self {
            width: 32,
            blocks: 3,
            upscale: 1,
            epochs: 20,
            batch_size: 8,
            learning_rate: 1e-3,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

/// Trains a fresh residual network on `(input, target)` pairs with an L1 loss.
pub fn train_baseline_enhancer(
    pairs: &[TrainingPair],
    cfg: &EnhancerTrainConfig,
) -> Result<(BaselineEnhancer, TrainReport)> {
    if pairs.is_empty() {
        return Err(Error::Empty("no training pairs".into()));
    }
    if [cfg.width, cfg.blocks, cfg.upscale, cfg.epochs, cfg.batch_size].contains(&0)
        || !(cfg.learning_rate > 0.0)
        || !(cfg.grad_clip > 0.0)
    {
        return Err(Error::InvalidConfig("enhancer sizes, epochs and rates must be positive".into()));
    }
    let (h, w, c) = pairs[0].input.shape();
    if h != w {
        return Err(Error::InvalidConfig(format!("enhancer inputs must be square, got {h}x{w}")));
    }
    for p in pairs {
        p.input.ensure_shape((h, w, c))?;
        p.target.ensure_shape((h * cfg.upscale, w * cfg.upscale, c))?;
    }
    let net_cfg = ResNetConfig {
        channels: c,
        width: cfg.width,
        blocks: cfg.blocks,
        upscale: cfg.upscale,
    };
    let mut net = ResNet::new(net_cfg, &mut substream(cfg.seed, 0));
    let mut rng = substream(cfg.seed, 1);
    let mut opt = Adam::new(cfg.learning_rate);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let inputs: Vec<&ImageTensor> = chunk.iter().map(|&i| &pairs[i].input).collect();
            let targets: Vec<&ImageTensor> = chunk.iter().map(|&i| &pairs[i].target).collect();
            let x = Tensor::from_images(&inputs);
            let target = Tensor::from_images(&targets);
            let (pred, cache) = net.forward_train(&x);
            let numel = pred.data.len() as f32;
            let mut loss = 0.0f64;
            let grad: Vec<f32> = pred
                .data
                .iter()
                .zip(&target.data)
                .map(|(p, t)| {
                    let d = p - t;
                    loss += f64::from(d.abs());
                    d.signum() / numel
                })
                .collect();
            let loss = loss / f64::from(numel);
            nn::zero_grad(&mut net);
            net.backward(&cache, &Tensor::from_vec(pred.n, pred.c, pred.h, pred.w, grad));
            nn::clip_grad_norm(&mut net, cfg.grad_clip);
            opt.step(&mut net);
            report.step_losses.push(loss);
            sum += loss;
            batches += 1;
        }
        let mean = sum / batches as f64;
        log::info!("baseline-enhancer epoch {}/{}: L1 {mean:.5}", epoch + 1, cfg.epochs);
        report.epoch_losses.push(mean);
    }
    report.final_loss = *report.epoch_losses.last().unwrap_or(&f64::NAN);
    Ok((BaselineEnhancer { net, image_size: h }, report))
}

/// Conformance checks: weights exist, the tag is known and a zero probe
/// produces the declared output size.
pub fn load_external_enhancer(weights: impl AsRef<Path>, manifest: &ModelManifest) -> Result<Box<dyn Enhancer>> {
    let weights = weights.as_ref();
    ensure_exists(weights)?;
    let model: Box<dyn Enhancer> = match manifest.format_tag.as_str() {
        BASELINE_RESNET_TAG => {
            let cfg: ResNetConfig = manifest.model_field()?;
            let mut net = ResNet::new(cfg, &mut substream(0, 0));
            nn::load_params(&mut net, weights)?;
            Box::new(BaselineEnhancer {
                net,
                image_size: manifest.image_size,
            })
        }
        other => return Err(Error::UnsupportedFormat(other.to_string())),
    };
    let channels = manifest.model.get("channels").and_then(|v| v.as_integer()).unwrap_or(3) as usize;
    let size = manifest.image_size;
    let out = model.enhance(&ImageTensor::zeros(size, size, channels))?;
    let expected = manifest.output_size.unwrap_or(size);
    if out.shape() != (expected, expected, channels) {
        return Err(Error::ShapeMismatch {
            expected: (expected, expected, channels),
            actual: out.shape(),
        });
    }
    Ok(model)
}

pub fn load_enhancer(manifest_path: impl AsRef<Path>) -> Result<Box<dyn Enhancer>> {
    let manifest_path = manifest_path.as_ref();
    let manifest = ModelManifest::read(manifest_path)?;
    let weights = weights_path(manifest_path, &manifest)?;
    load_external_enhancer(weights, &manifest)
}

/// Coarse-then-detail restoration: `enhance(dr2_remove(y))`.
pub fn restore(
    y: &ImageTensor,
    denoiser: &dyn Denoiser,
    enhancer: &dyn Enhancer,
    schedule: &NoiseSchedule,
    cfg: &Dr2Config,
) -> Result<(ImageTensor, ImageTensor)> {
    let coarse = dr2_remove(y, denoiser, schedule, cfg)?;
    let out = enhancer.enhance(&coarse)?.clamped();
    Ok((coarse, out))
}

/// Distinct `tau` values recorded in a pair set.
pub fn pair_taus(pairs: &[TrainingPair]) -> BTreeSet<usize> {
    pairs.iter().map(|p| p.tau).collect()
}
