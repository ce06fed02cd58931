//! The DR2 guided sampler: diffuse the degraded input to `omega`, run the
//! reverse chain while replacing each state's low band with that of the
//! diffused input, and stop early at `tau` with a one-shot clean estimate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::lowpass::{blend, FilterSpec, Resampler};
use crate::rng::substream;
use crate::schedule::NoiseSchedule;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceNoise {
    /// A fresh draw of `y_t` at every step.
    #[default]
    Independent,
    /// One noise field reused for every `y_t`.
    SharedTrajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Dr2Config {
    #[serde(rename = "N")]
    pub n: usize,
    pub resampler: Resampler,
    pub tau: usize,
    /// Start step; `None` means `tau + round(0.25 T)`, capped at `T`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub omega: Option<usize>,
    pub refinement: bool,
    pub blend_at_tau: bool,
    pub guidance_noise: GuidanceNoise,
    pub seed: u64,
}

impl Default for Dr2Config {
    fn default() -> Self {
        Self {
            n: 4,
            resampler: Resampler::default(),
            tau: 300,
            omega: None,
            refinement: true,
            blend_at_tau: true,
            guidance_noise: GuidanceNoise::default(),
            seed: 0,
        }
    }
}

impl Dr2Config {
    pub fn new(n: usize, tau: usize) -> Self {
        Self {
            n,
            tau,
            ..Self::default()
        }
    }

    pub fn with_omega(mut self, omega: usize) -> Self {
        self.omega = Some(omega);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn filter(&self) -> FilterSpec {
        FilterSpec::new(self.n, self.resampler)
    }

    pub fn default_omega(tau: usize, schedule: &NoiseSchedule) -> usize {
        (tau + schedule.fraction(0.25)).min(schedule.steps())
    }

    /// Checks `0 <= tau < omega <= T` and `N >= 1`; returns the start step.
    pub fn resolve_omega(&self, schedule: &NoiseSchedule) -> Result<usize> {
        let steps = schedule.steps();
        if self.n == 0 {
            return Err(Error::InvalidConfig("N must be at least 1".into()));
        }
        if self.tau >= steps {
            return Err(Error::InvalidConfig(format!("tau = {} must be below T = {steps}", self.tau)));
        }
        let omega = self.omega.unwrap_or_else(|| Self::default_omega(self.tau, schedule));
        if omega <= self.tau || omega > steps {
            return Err(Error::InvalidConfig(format!(
                "omega = {omega} must satisfy tau = {} < omega <= T = {steps}",
                self.tau
            )));
        }
        Ok(omega)
    }
}

/// `x_omega = diffuse(y, omega, eps)` with `eps` drawn from `rng`.
pub fn initial_condition<R: Rng + ?Sized>(
    y: &ImageTensor,
    omega: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<ImageTensor> {
    schedule.check_timestep(omega)?;
    let noise = ImageTensor::standard_normal(y.shape(), rng);
    schedule.diffuse(y, omega, &noise)
}

/// Draws `y_t` for every `t` in `timesteps` (in order). `t = 0` yields `y`.
pub fn guidance_sequence<R: Rng + ?Sized>(
    y: &ImageTensor,
    timesteps: &[usize],
    schedule: &NoiseSchedule,
    mode: GuidanceNoise,
    rng: &mut R,
) -> Result<Vec<ImageTensor>> {
    if timesteps.is_empty() {
        return Err(Error::Empty("guidance timestep range is empty".into()));
    }
    let mut guide = Guide::new(y, mode, rng);
    timesteps.iter().map(|&t| guide.at(t, schedule, rng)).collect()
}

struct Guide<'a> {
    y: &'a ImageTensor,
    shared: Option<ImageTensor>,
}

impl<'a> Guide<'a> {
    fn new<R: Rng + ?Sized>(y: &'a ImageTensor, mode: GuidanceNoise, rng: &mut R) -> Self {
        let shared = match mode {
            GuidanceNoise::Independent => None,
            GuidanceNoise::SharedTrajectory => Some(ImageTensor::standard_normal(y.shape(), rng)),
        };
        Self { y, shared }
    }

    fn at<R: Rng + ?Sized>(&mut self, t: usize, schedule: &NoiseSchedule, rng: &mut R) -> Result<ImageTensor> {
        if t == 0 {
            return Ok(self.y.clone());
        }
        match &self.shared {
            Some(eps) => schedule.diffuse(self.y, t, eps),
            None => {
                let eps = ImageTensor::standard_normal(self.y.shape(), rng);
                schedule.diffuse(self.y, t, &eps)
            }
        }
    }
}

/// State after one reverse step of [`dr2_remove_observed`].
pub struct StepEvent<'a> {
    /// Index of the new state, i.e. `t - 1`.
    pub t: usize,
    pub state: &'a ImageTensor,
    /// The diffused input the state was blended with, when blending happened.
    pub guidance: Option<&'a ImageTensor>,
}

fn check_denoiser(y: &ImageTensor, denoiser: &dyn Denoiser, schedule: &NoiseSchedule) -> Result<()> {
    if let Some((h, w)) = denoiser.image_size() {
        if (y.height(), y.width()) != (h, w) {
            return Err(Error::ShapeMismatch {
                expected: (h, w, y.channels()),
                actual: y.shape(),
            });
        }
    }
    if let Some(p) = denoiser.schedule_params() {
        if p.steps != schedule.steps() {
            return Err(Error::InvalidConfig(format!(
                "denoiser was trained with T = {} but the schedule has T = {}",
                p.steps,
                schedule.steps()
            )));
        }
    }
    Ok(())
}

/// Maps a degraded image `y` to the coarse estimate `x0_hat`.
pub fn dr2_remove(
    y: &ImageTensor,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cfg: &Dr2Config,
) -> Result<ImageTensor> {
    dr2_remove_observed(y, denoiser, schedule, cfg, &mut |_| {})
}

/// [`dr2_remove`] that reports every intermediate state to `observer`.
///
/// Random streams derived from `cfg.seed`: 0 for the initial noise, 1 for the
/// reverse-step noise, 2 for the guidance draws.
pub fn dr2_remove_observed(
    y: &ImageTensor,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    cfg: &Dr2Config,
    observer: &mut dyn FnMut(StepEvent<'_>),
) -> Result<ImageTensor> {
    let omega = cfg.resolve_omega(schedule)?;
    check_denoiser(y, denoiser, schedule)?;
    let spec = cfg.filter();
    if cfg.refinement && (y.height() < spec.factor || y.width() < spec.factor) {
        return Err(Error::ImageTooSmall {
            height: y.height(),
            width: y.width(),
            required: spec.factor,
        });
    }
    let mut init_rng = substream(cfg.seed, 0);
    let mut step_rng = substream(cfg.seed, 1);
    let mut guide_rng = substream(cfg.seed, 2);
    let mut guide = Guide::new(y, cfg.guidance_noise, &mut guide_rng);

    let mut x = initial_condition(y, omega, schedule, &mut init_rng)?;
    for t in (cfg.tau + 1..=omega).rev() {
        let eps = denoiser.eps(&x, t)?;
        let noise = ImageTensor::standard_normal(y.shape(), &mut step_rng);
        x = schedule.reverse_step(&x, &eps, t, &noise)?;
        let prev = t - 1;
        let blend_here = cfg.refinement && (prev > cfg.tau || cfg.blend_at_tau);
        if blend_here {
            let y_prev = guide.at(prev, schedule, &mut guide_rng)?;
            x = blend(&y_prev, &x, spec)?;
            observer(StepEvent {
                t: prev,
                state: &x,
                guidance: Some(&y_prev),
            });
        } else {
            observer(StepEvent {
                t: prev,
                state: &x,
                guidance: None,
            });
        }
    }
    if cfg.tau == 0 {
        return Ok(x.clamped());
    }
    let eps = denoiser.eps(&x, cfg.tau)?;
    schedule.predict_x0(&x, &eps, cfg.tau)
}

/// Per-pixel mean and sample standard deviation of
/// `diffuse(y, t, e1) - diffuse(y_ref, t, e2)` over independent draws.
pub fn error_statistics<R: Rng + ?Sized>(
    y: &ImageTensor,
    y_ref: &ImageTensor,
    t: usize,
    n_samples: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(ImageTensor, ImageTensor)> {
    y.ensure_same_shape(y_ref)?;
    if n_samples < 2 {
        return Err(Error::InvalidConfig(format!("error_statistics needs n_samples >= 2, got {n_samples}")));
    }
    if t > schedule.steps() {
        return Err(Error::TimestepOutOfRange {
            t,
            min: 0,
            max: schedule.steps(),
        });
    }
    let shape = y.shape();
    let len = y.len();
    let mut mean = vec![0.0; len];
    let mut m2 = vec![0.0; len];
    for k in 0..n_samples {
        let diff = if t == 0 {
            y.sub(y_ref)?
        } else {
            let a = schedule.diffuse(y, t, &ImageTensor::standard_normal(shape, rng))?;
            let b = schedule.diffuse(y_ref, t, &ImageTensor::standard_normal(shape, rng))?;
            a.sub(&b)?
        };
        let n = (k + 1) as f64;
        for (i, d) in diff.values().enumerate() {
            let delta = d - mean[i];
            mean[i] += delta / n;
            m2[i] += delta * (d - mean[i]);
        }
    }
    let std: Vec<f64> = m2.iter().map(|v| (v / (n_samples - 1) as f64).sqrt()).collect();
    Ok((
        ImageTensor::from_vec(shape.0, shape.1, shape.2, mean)?,
        ImageTensor::from_vec(shape.0, shape.1, shape.2, std)?,
    ))
}
