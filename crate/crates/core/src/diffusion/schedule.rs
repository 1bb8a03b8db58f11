use serde::{Deserialize, Serialize};

use crate::error::{check_range, Error, Result};

/// Shape of one image, channels first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

impl Default for ImageShape {
    fn default() -> Self {
        Self::new(1, 8, 8)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    /// Number of diffusion steps; timesteps are 1-based, `1..=steps`.
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub image_shape: ImageShape,
    pub num_classes: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            image_shape: ImageShape::default(),
            num_classes: 4,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::Validation(format!("steps must be >= 2, got {}", self.steps)));
        }
        if !(self.beta_start > 0.0 && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(Error::Validation(format!(
                "need 0 < beta_start <= beta_end < 1, got {} .. {}",
                self.beta_start, self.beta_end
            )));
        }
        if self.image_shape.numel() == 0 {
            return Err(Error::Validation("image shape has no pixels".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Validation("num_classes must be >= 1".into()));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.image_shape.numel()
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        check_range("timestep", t, 1, self.steps)
    }

    pub fn schedule(&self) -> Schedule {
        Schedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Precomputed per-timestep coefficients. Index 0 is the clean image
/// (`alpha_bar = 1`), indices `1..=T` are the diffusion steps.
#[derive(Debug, Clone)]
pub struct Schedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl Schedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        let mut betas = vec![0.0; steps + 1];
        for (t, b) in betas.iter_mut().enumerate().skip(1) {
            let frac = if steps == 1 {
                0.0
            } else {
                (t - 1) as f64 / (steps - 1) as f64
            };
            *b = beta_start + frac * (beta_end - beta_start);
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = vec![1.0; steps + 1];
        for t in 1..=steps {
            alpha_bars[t] = alpha_bars[t - 1] * alphas[t];
        }
        Self {
            betas,
            alphas,
            alpha_bars,
        }
    }

    pub fn steps(&self) -> usize {
        self.betas.len() - 1
    }

    /// Posterior variance of `q(x_{t-1} | x_t, x_0)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.betas[t] * (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t])
    }
}
