//! Variance schedule and the closed-form diffusion algebra built on it.
//!
//! Timesteps are 1-based: `t = 1..=T` index the noisy states and `t = 0`
//! denotes the clean image, for which `alpha_bar(0) == 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Reverse-process standard deviation choice.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaMode {
    /// `sigma_t^2 = beta_t`.
    #[default]
    Beta,
    /// `sigma_t^2 = (1 - abar_{t-1}) / (1 - abar_t) * beta_t`.
    Posterior,
}

/// The reproducibility record of a linear schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(default)]
    pub sigma_mode: SigmaMode,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            sigma_mode: SigmaMode::Beta,
        }
    }
}

impl ScheduleParams {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end, self.sigma_mode)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("schedule params serialize")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: "<schedule>".into(),
            message: e.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    // Index 0 is the clean state: beta 0, alpha 1, alpha_bar 1.
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linearly interpolated from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64, sigma_mode: SigmaMode) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("T must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            (0..steps)
                .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
                .collect()
        };
        let params = ScheduleParams {
            steps,
            beta_start,
            beta_end,
            sigma_mode,
        };
        Self::from_parts(params, betas)
    }

    /// Arbitrary schedule; `params.beta_start`/`beta_end` are informational.
    pub fn from_betas(betas: Vec<f64>, sigma_mode: SigmaMode) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidSchedule("empty beta table".into()));
        }
        let params = ScheduleParams {
            steps: betas.len(),
            beta_start: betas[0],
            beta_end: betas[betas.len() - 1],
            sigma_mode,
        };
        Self::from_parts(params, betas)
    }

    fn from_parts(params: ScheduleParams, betas: Vec<f64>) -> Result<Self> {
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidSchedule(format!("beta {b} outside (0, 1)")));
        }
        let mut all_betas = Vec::with_capacity(betas.len() + 1);
        all_betas.push(0.0);
        all_betas.extend(betas);
        let alphas: Vec<f64> = all_betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars: Vec<f64> = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            params,
            betas: all_betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.params.steps
    }

    pub fn sigma_mode(&self) -> SigmaMode {
        self.params.sigma_mode
    }

    pub fn with_sigma_mode(mut self, mode: SigmaMode) -> Self {
        self.params.sigma_mode = mode;
        self
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    /// `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// `[abar_1, ..., abar_T]`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars[1..]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        match self.params.sigma_mode {
            SigmaMode::Beta => self.betas[t].sqrt(),
            SigmaMode::Posterior => {
                let var = (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t]) * self.betas[t];
                var.sqrt()
            }
        }
    }

    /// `round(fraction * T)`, e.g. the `0.25T` start-step offset.
    pub fn fraction(&self, fraction: f64) -> usize {
        (fraction * self.steps() as f64).round() as usize
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                min: 1,
                max: self.steps(),
            });
        }
        Ok(())
    }

    /// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`.
    pub fn diffuse(&self, x0: &ImageTensor, t: usize, noise: &ImageTensor) -> Result<ImageTensor> {
        self.check_timestep(t)?;
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        x0.zip_map(noise, |x, e| a * x + b * e)
    }

    /// One forward transition `x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) noise`.
    pub fn forward_step(&self, x_prev: &ImageTensor, t: usize, noise: &ImageTensor) -> Result<ImageTensor> {
        self.check_timestep(t)?;
        let beta = self.beta(t);
        let (a, b) = ((1.0 - beta).sqrt(), beta.sqrt());
        x_prev.zip_map(noise, |x, e| a * x + b * e)
    }

    /// Reverse-transition mean from a noise prediction.
    pub fn eps_mean(&self, x_t: &ImageTensor, eps_pred: &ImageTensor, t: usize) -> Result<ImageTensor> {
        self.check_timestep(t)?;
        let alpha = self.alpha(t);
        let inv_sqrt_alpha = 1.0 / alpha.sqrt();
        // alpha_t == 1 is a degenerate no-noise step; avoid 0/0.
        let coef = if alpha == 1.0 {
            0.0
        } else {
            (1.0 - alpha) / (1.0 - self.alpha_bar(t)).sqrt()
        };
        x_t.zip_map(eps_pred, |x, e| inv_sqrt_alpha * (x - coef * e))
    }

    /// Samples `x_{t-1}` given the caller's standard-normal `noise`. The noise
    /// term is dropped at `t = 1`.
    pub fn reverse_step(
        &self,
        x_t: &ImageTensor,
        eps_pred: &ImageTensor,
        t: usize,
        noise: &ImageTensor,
    ) -> Result<ImageTensor> {
        let mean = self.eps_mean(x_t, eps_pred, t)?;
        mean.ensure_same_shape(noise)?;
        if t == 1 {
            return Ok(mean);
        }
        let sigma = self.sigma(t);
        mean.zip_map(noise, |m, z| m + sigma * z)
    }

    /// One-shot clean estimate, clamped to `[-1, 1]`.
    pub fn predict_x0(&self, x_t: &ImageTensor, eps_pred: &ImageTensor, t: usize) -> Result<ImageTensor> {
        Ok(self.predict_x0_raw(x_t, eps_pred, t)?.clamped())
    }

    /// Inverse of [`NoiseSchedule::diffuse`] without clamping.
    pub fn predict_x0_raw(&self, x_t: &ImageTensor, eps_pred: &ImageTensor, t: usize) -> Result<ImageTensor> {
        self.check_timestep(t)?;
        let ab = self.alpha_bar(t);
        let inv = 1.0 / ab.sqrt();
        let b = (1.0 - ab).sqrt();
        x_t.zip_map(eps_pred, |x, e| inv * (x - b * e))
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        ScheduleParams::default().build().expect("default schedule is valid")
    }
}
