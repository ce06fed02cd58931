//! Noise-prediction models `eps(x_t, t)`: an exact oracle, a trainable toy
//! UNet and a checkpoint loader.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{ensure_exists, weights_path, ModelManifest};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::{self, Adam, Tensor, UNet, UNetConfig};
use crate::rng::substream;
use crate::schedule::{NoiseSchedule, ScheduleParams};

/// Format tag written by [`ToyDenoiser::save`].
pub const TOY_UNET_TAG: &str = "dr2-toy-unet/v1";

/// Deterministic noise predictor. Implementations must be safe to share
/// between threads; all sampling randomness lives with the caller.
pub trait Denoiser: Send + Sync {
    fn eps(&self, x_t: &ImageTensor, t: usize) -> Result<ImageTensor>;

    /// `(height, width)` the model accepts, or `None` for any size.
    fn image_size(&self) -> Option<(usize, usize)>;

    /// Schedule the model was trained against, when known.
    fn schedule_params(&self) -> Option<ScheduleParams>;

    fn eps_batch(&self, xs: &[&ImageTensor], ts: &[usize]) -> Result<Vec<ImageTensor>> {
        xs.iter().zip(ts).map(|(x, &t)| self.eps(x, t)).collect()
    }
}

/// Returns the exact noise that `diffuse(x0, t, eps)` would have used.
#[derive(Clone, Debug)]
pub struct OracleDenoiser {
    x0: ImageTensor,
    schedule: NoiseSchedule,
}

pub fn oracle_denoiser(x0: ImageTensor, schedule: &NoiseSchedule) -> OracleDenoiser {
    OracleDenoiser {
        x0,
        schedule: schedule.clone(),
    }
}

impl Denoiser for OracleDenoiser {
    fn eps(&self, x_t: &ImageTensor, t: usize) -> Result<ImageTensor> {
        self.schedule.check_timestep(t)?;
        let ab = self.schedule.alpha_bar(t);
        let (a, inv_b) = (ab.sqrt(), 1.0 / (1.0 - ab).sqrt());
        x_t.zip_map(&self.x0, |x, x0| (x - a * x0) * inv_b)
    }

    fn image_size(&self) -> Option<(usize, usize)> {
        Some((self.x0.height(), self.x0.width()))
    }

    fn schedule_params(&self) -> Option<ScheduleParams> {
        Some(self.schedule.params())
    }
}

/// Small UNet trained on `eps` MSE.
#[derive(Clone, Debug)]
pub struct ToyDenoiser {
    pub net: UNet,
    pub image_size: usize,
    pub schedule: ScheduleParams,
}

impl ToyDenoiser {
    fn check_input(&self, x: &ImageTensor, t: usize) -> Result<()> {
        x.ensure_shape((self.image_size, self.image_size, self.net.config.channels))?;
        if t == 0 || t > self.schedule.steps {
            return Err(Error::TimestepOutOfRange {
                t,
                min: 1,
                max: self.schedule.steps,
            });
        }
        Ok(())
    }

    fn manifest(&self) -> ModelManifest {
        let mut model = toml::Table::new();
        model.insert("channels".into(), (self.net.config.channels as i64).into());
        model.insert(
            "widths".into(),
            toml::Value::Array(self.net.config.widths.iter().map(|&w| (w as i64).into()).collect()),
        );
        let mut manifest = ModelManifest {
            format_tag: TOY_UNET_TAG.into(),
            image_size: self.image_size,
            output_size: None,
            steps: None,
            beta_start: None,
            beta_end: None,
            weights: "weights.safetensors".into(),
            model,
        };
        manifest.set_schedule(&self.schedule);
        manifest
    }

    /// Writes `manifest.toml` and `weights.safetensors` into `dir`; returns
    /// the manifest path.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = self.manifest();
        let mut meta = HashMap::new();
        meta.insert("format_tag".to_string(), TOY_UNET_TAG.to_string());
        nn::save_params(&self.net, meta, dir.join(&manifest.weights))?;
        let path = dir.join("manifest.toml");
        manifest.write(&path)?;
        Ok(path)
    }
}

impl Denoiser for ToyDenoiser {
    fn eps(&self, x_t: &ImageTensor, t: usize) -> Result<ImageTensor> {
        self.check_input(x_t, t)?;
        let out = self.net.forward(&Tensor::from_images(&[x_t]), &[t]);
        Ok(out.to_images().remove(0))
    }

    fn eps_batch(&self, xs: &[&ImageTensor], ts: &[usize]) -> Result<Vec<ImageTensor>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        for (x, &t) in xs.iter().zip(ts) {
            self.check_input(x, t)?;
        }
        Ok(self.net.forward(&Tensor::from_images(xs), ts).to_images())
    }

    fn image_size(&self) -> Option<(usize, usize)> {
        Some((self.image_size, self.image_size))
    }

    fn schedule_params(&self) -> Option<ScheduleParams> {
        Some(self.schedule)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyTrainConfig {
    pub image_size: usize,
    pub widths: [usize; 3],
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub grad_clip: f32,
    pub seed: u64,
    /// Image directory; synthetic faces are generated when absent.
    pub dataset: Option<PathBuf>,
    pub synthetic_count: usize,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            widths: [16, 32, 64],
            epochs: 30,
            batch_size: 16,
            learning_rate: 2e-3,
            grad_clip: 1.0,
            seed: 0,
            dataset: None,
            synthetic_count: 512,
        }
    }
}

impl ToyTrainConfig {
    fn validate(&self) -> Result<()> {
        let positive = [
            self.image_size,
            self.widths[0],
            self.widths[1],
            self.widths[2],
            self.epochs,
            self.batch_size,
        ];
        if positive.contains(&0) || !(self.learning_rate > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::InvalidConfig("training sizes, epochs and rates must be positive".into()));
        }
        if !self.image_size.is_multiple_of(4) {
            return Err(Error::InvalidConfig(format!(
                "image_size must be a multiple of 4, got {}",
                self.image_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss of every epoch.
    pub epoch_losses: Vec<f64>,
    pub step_losses: Vec<f64>,
    pub final_loss: f64,
}

fn mirror(img: &ImageTensor) -> ImageTensor {
    let w = img.width();
    ImageTensor::from_fn(img.shape(), |y, x, c| img.get(y, w - 1 - x, c)).expect("mirrored image is finite")
}

/// Trains a fresh toy UNet on `dataset`. Initialization uses substream 0 of
/// `cfg.seed`; data order, timesteps and noise use substream 1.
pub fn train_toy_denoiser(
    dataset: &[ImageTensor],
    schedule: &NoiseSchedule,
    cfg: &ToyTrainConfig,
) -> Result<(ToyDenoiser, TrainReport)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("training set has no images".into()));
    }
    let channels = dataset[0].channels();
    for img in dataset {
        img.ensure_shape((cfg.image_size, cfg.image_size, channels))?;
    }
    let net_cfg = UNetConfig {
        channels,
        widths: cfg.widths,
    };
    let mut net = UNet::new(net_cfg, &mut substream(cfg.seed, 0));
    let mut rng = substream(cfg.seed, 1);
    let mut opt = Adam::new(cfg.learning_rate);
    let mut report = TrainReport::default();
    let size = cfg.image_size;
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let images: Vec<ImageTensor> = chunk
                .iter()
                .map(|&i| if rng.random_bool(0.5) { mirror(&dataset[i]) } else { dataset[i].clone() })
                .collect();
            let refs: Vec<&ImageTensor> = images.iter().collect();
            let x0 = Tensor::from_images(&refs);
            let ts: Vec<usize> = (0..chunk.len()).map(|_| rng.random_range(1..=schedule.steps())).collect();
            let noise: Vec<f32> = (0..x0.data.len()).map(|_| rng.sample(StandardNormal)).collect();
            let mut xt = x0.clone();
            let per = x0.item_len();
            for (b, &t) in ts.iter().enumerate() {
                let ab = schedule.alpha_bar(t);
                let (a, s) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
                for i in b * per..(b + 1) * per {
                    xt.data[i] = a * x0.data[i] + s * noise[i];
                }
            }
            let (pred, cache) = net.forward_train(&xt, &ts);
            let numel = pred.data.len() as f32;
            let mut loss = 0.0f64;
            let grad: Vec<f32> = pred
                .data
                .iter()
                .zip(&noise)
                .map(|(p, e)| {
                    let d = p - e;
                    loss += f64::from(d * d);
                    2.0 * d / numel
                })
                .collect();
            let loss = loss / f64::from(numel);
            nn::zero_grad(&mut net);
            net.backward(&cache, &Tensor::from_vec(pred.n, pred.c, size, size, grad));
            nn::clip_grad_norm(&mut net, cfg.grad_clip);
            opt.step(&mut net);
            report.step_losses.push(loss);
            epoch_sum += loss;
            batches += 1;
        }
        let mean = epoch_sum / batches as f64;
        log::info!("toy-ddpm epoch {}/{}: loss {mean:.5}", epoch + 1, cfg.epochs);
        report.epoch_losses.push(mean);
    }
    report.final_loss = *report.epoch_losses.last().unwrap_or(&f64::NAN);
    let model = ToyDenoiser {
        net,
        image_size: cfg.image_size,
        schedule: schedule.params(),
    };
    Ok((model, report))
}

/// Probe-batch conformance: output shape must equal input shape.
pub(crate) fn probe_denoiser(model: &dyn Denoiser, shape: (usize, usize, usize), t: usize) -> Result<()> {
    let probe = ImageTensor::zeros(shape.0, shape.1, shape.2);
    let out = model.eps(&probe, t)?;
    if out.shape() != shape {
        return Err(Error::ShapeMismatch {
            expected: shape,
            actual: out.shape(),
        });
    }
    Ok(())
}

/// Wraps the weights at `weights` according to `manifest`, after checking the
/// declared schedule against `schedule`.
pub fn load_external_denoiser(
    weights: impl AsRef<Path>,
    manifest: &ModelManifest,
    schedule: &NoiseSchedule,
) -> Result<Box<dyn Denoiser>> {
    let weights = weights.as_ref();
    ensure_exists(weights)?;
    if manifest.format_tag != TOY_UNET_TAG {
        return Err(Error::UnsupportedFormat(manifest.format_tag.clone()));
    }
    manifest.check_schedule(schedule)?;
    let model: Box<dyn Denoiser> = match manifest.format_tag.as_str() {
        TOY_UNET_TAG => {
            let net_cfg: UNetConfig = manifest.model_field()?;
            let mut net = UNet::new(net_cfg, &mut substream(0, 0));
            nn::load_params(&mut net, weights)?;
            Box::new(ToyDenoiser {
                net,
                image_size: manifest.image_size,
                schedule: schedule.params(),
            })
        }
        other => return Err(Error::UnsupportedFormat(other.to_string())),
    };
    let channels = manifest.model.get("channels").and_then(|v| v.as_integer()).unwrap_or(3) as usize;
    probe_denoiser(
        model.as_ref(),
        (manifest.image_size, manifest.image_size, channels),
        schedule.steps(),
    )?;
    Ok(model)
}

/// Reads a manifest file and loads the weights it points at.
pub fn load_denoiser(manifest_path: impl AsRef<Path>, schedule: &NoiseSchedule) -> Result<Box<dyn Denoiser>> {
    let manifest_path = manifest_path.as_ref();
    let manifest = ModelManifest::read(manifest_path)?;
    let weights = weights_path(manifest_path, &manifest)?;
    load_external_denoiser(weights, &manifest, schedule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic_faces;
    use crate::rng::seeded;
    use crate::schedule::SigmaMode;

    #[test]
    fn oracle_recovers_the_noise() {
        let schedule = NoiseSchedule::default();
        let mut rng = seeded(1);
        for _ in 0..100 {
            let x0 = ImageTensor::standard_normal((4, 4, 3), &mut rng).clamped();
            let eps = ImageTensor::standard_normal((4, 4, 3), &mut rng);
            let t = rng.random_range(1..=1000);
            let xt = schedule.diffuse(&x0, t, &eps).unwrap();
            let oracle = oracle_denoiser(x0.clone(), &schedule);
            let got = oracle.eps(&xt, t).unwrap();
            assert!(got.max_abs_diff(&eps).unwrap() <= 1e-5);
            let back = schedule.predict_x0_raw(&xt, &got, t).unwrap();
            assert!(back.max_abs_diff(&x0).unwrap() <= 1e-5);
        }
        let x0 = ImageTensor::filled(4, 4, 3, 0.3);
        let oracle = oracle_denoiser(x0.clone(), &schedule);
        let clean = x0.scale(schedule.alpha_bar(200).sqrt());
        assert!(oracle.eps(&clean, 200).unwrap().values().all(|v| v.abs() < 1e-12));
        assert!(matches!(oracle.eps(&clean, 0), Err(Error::TimestepOutOfRange { .. })));
    }

    fn tiny_cfg() -> ToyTrainConfig {
        ToyTrainConfig {
            image_size: 16,
            widths: [8, 8, 16],
            epochs: 2,
            batch_size: 8,
            learning_rate: 2e-3,
            seed: 5,
            ..ToyTrainConfig::default()
        }
    }

    #[test]
    fn smoke_training_is_reproducible_and_learns() {
        let schedule = NoiseSchedule::default();
        let data = synthetic_faces(64, 16, 2);
        let (model, report) = train_toy_denoiser(&data, &schedule, &tiny_cfg()).unwrap();
        let (_, again) = train_toy_denoiser(&data, &schedule, &tiny_cfg()).unwrap();
        assert_eq!(report, again);
        assert_eq!(report.epoch_losses.len(), 2);
        assert!(report.epoch_losses[1] < report.epoch_losses[0], "{:?}", report.epoch_losses);
        assert!(report.final_loss < 1.0);

        let x = &data[0];
        let a = model.eps(x, 10).unwrap();
        assert_eq!(a, model.eps(x, 10).unwrap());
        assert_eq!(a.shape(), x.shape());
        let batch = model.eps_batch(&[x, &data[1]], &[10, 20]).unwrap();
        assert!(batch[0].max_abs_diff(&a).unwrap() < 1e-6);
    }

    #[test]
    fn training_rejects_bad_input() {
        let schedule = NoiseSchedule::default();
        assert!(matches!(train_toy_denoiser(&[], &schedule, &tiny_cfg()), Err(Error::Empty(_))));
        let wrong = synthetic_faces(2, 32, 0);
        assert!(matches!(
            train_toy_denoiser(&wrong, &schedule, &tiny_cfg()),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip_and_load_errors() {
        let schedule = NoiseSchedule::default();
        let data = synthetic_faces(8, 16, 3);
        let cfg = ToyTrainConfig { epochs: 1, ..tiny_cfg() };
        let (model, _) = train_toy_denoiser(&data, &schedule, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest_path = model.save(dir.path().join("ckpt")).unwrap();
        let loaded = load_denoiser(&manifest_path, &schedule).unwrap();
        assert_eq!(loaded.eps(&data[0], 500).unwrap(), model.eps(&data[0], 500).unwrap());

        let missing = dir.path().join("absent.safetensors");
        let manifest = ModelManifest::read(&manifest_path).unwrap();
        let err = load_external_denoiser(&missing, &manifest, &schedule).err().unwrap();
        assert!(err.to_string().contains("absent.safetensors"));

        let short = NoiseSchedule::linear(500, 1e-4, 0.02, SigmaMode::Beta).unwrap();
        assert!(matches!(load_denoiser(&manifest_path, &short), Err(Error::ManifestMismatch(_))));

        let mut other = manifest.clone();
        other.format_tag = "vendor/unknown".into();
        let weights = dir.path().join("ckpt").join("weights.safetensors");
        assert!(matches!(
            load_external_denoiser(&weights, &other, &schedule),
            Err(Error::UnsupportedFormat(_))
        ));
    }
}
