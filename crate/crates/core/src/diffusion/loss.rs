//! ε-prediction loss and its gradient.
//!
//! All evaluation paths run in f64 on top of the f32 parameters. Noise for
//! loss evaluation is keyed by `(noise_seed, example id, timestep)`, so two
//! parameter vectors evaluated on the same example see identical draws.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::model::{Architecture, Real, Reduction, Weights};
use super::params::{Gradient, Layout, ParamVector};
use super::schedule::{DiffusionConfig, ImageShape, Schedule};
use crate::data::Example;
use crate::error::{check_range, Error, Result};
use crate::rng::{fill_normal, Stream};

/// Rows per forward pass when evaluating many (example, timestep) pairs.
pub const ROW_BLOCK: usize = 1024;

/// Anything that predicts noise for a batch of rows and can pull a
/// per-row output gradient back to its parameters.
pub trait NoisePredictor<F: Real>: Sync {
    type Cache;

    fn predict(&self, x_t: ArrayView2<F>, timesteps: &[usize], classes: &[usize]) -> (Array2<F>, Self::Cache);

    fn pull_back(&self, cache: &Self::Cache, d_out: &Array2<F>, reduction: Reduction) -> Vec<F>;

    fn layout(&self) -> Layout;
}

impl<F: Real> NoisePredictor<F> for Weights<F> {
    type Cache = super::model::Cache<F>;

    fn predict(&self, x_t: ArrayView2<F>, timesteps: &[usize], classes: &[usize]) -> (Array2<F>, Self::Cache) {
        self.forward(x_t, timesteps, classes)
    }

    fn pull_back(&self, cache: &Self::Cache, d_out: &Array2<F>, reduction: Reduction) -> Vec<F> {
        self.backward(cache, d_out, reduction)
    }

    fn layout(&self) -> Layout {
        self.arch.layout()
    }
}

/// Pixels that count towards the loss. Used for spatially localized unlearning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionMask {
    pub shape: ImageShape,
    pub active: Vec<bool>,
}

impl RegionMask {
    pub fn full(shape: ImageShape) -> Self {
        Self {
            shape,
            active: vec![true; shape.numel()],
        }
    }

    /// Axis-aligned box `[y0, y1) × [x0, x1)` over all channels.
    pub fn rect(shape: ImageShape, y0: usize, y1: usize, x0: usize, x1: usize) -> Self {
        let mut active = vec![false; shape.numel()];
        for c in 0..shape.channels {
            for y in y0..y1.min(shape.height) {
                for x in x0..x1.min(shape.width) {
                    active[(c * shape.height + y) * shape.width + x] = true;
                }
            }
        }
        Self { shape, active }
    }

    pub fn validate(&self, shape: ImageShape) -> Result<()> {
        if self.shape != shape || self.active.len() != shape.numel() {
            return Err(Error::Validation("region mask does not match image shape".into()));
        }
        if !self.active.iter().any(|&a| a) {
            return Err(Error::Validation("region mask has no active pixel".into()));
        }
        Ok(())
    }

    fn weights(&self) -> Vec<f64> {
        self.active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect()
    }
}

/// `sqrt(ᾱ_t)·x + sqrt(1 − ᾱ_t)·eps`
pub fn q_sample(x: &[f64], t: usize, eps: &[f64], cfg: &DiffusionConfig) -> Result<Vec<f64>> {
    cfg.check_timestep(t)?;
    if x.len() != eps.len() {
        return Err(Error::Validation("noise and image lengths differ".into()));
    }
    let ab = cfg.schedule().alpha_bars[t];
    Ok(noised(x, eps, ab))
}

fn noised(x: &[f64], eps: &[f64], alpha_bar: f64) -> Vec<f64> {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    x.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
}

/// Timesteps `1, 1 + stride, …` up to `steps`.
pub fn strided_timesteps(stride: usize, steps: usize) -> Result<Vec<usize>> {
    check_range("stride", stride, 1, steps)?;
    Ok((1..=steps).step_by(stride).collect())
}

/// Loss-evaluation noise for `(seed, id, t)`.
pub fn loss_noise(seed: u64, id: u64, t: usize, pixels: usize) -> Vec<f64> {
    let mut eps = vec![0.0; pixels];
    fill_normal(seed, Stream::LossNoise, id, t as u64, &mut eps);
    eps
}

/// One row of a batched loss evaluation.
#[derive(Debug, Clone)]
pub struct LossRow<'a> {
    pub x0: &'a [f32],
    pub class: usize,
    pub t: usize,
    pub eps: Vec<f64>,
    /// Multiplies this row's contribution to the gradient.
    pub weight: f64,
}

/// Result of [`eval_rows`]: per-row losses and, if requested, the reduced gradient.
pub struct RowEval {
    pub losses: Vec<f64>,
    pub grad: Option<Vec<f64>>,
}

/// Evaluates per-row ε-MSE (optionally restricted to `region`) in blocks of
/// [`ROW_BLOCK`] rows. Block partial gradients are added in block order.
pub fn eval_rows<P: NoisePredictor<f64>>(
    pred: &P,
    schedule: &Schedule,
    rows: &[LossRow<'_>],
    region: Option<&RegionMask>,
    grad: Option<Reduction>,
) -> RowEval {
    let pixels = rows.first().map_or(0, |r| r.x0.len());
    let weights = region.map(RegionMask::weights);
    let denom = weights.as_ref().map_or(pixels as f64, |w| w.iter().sum());
    let mut losses = Vec::with_capacity(rows.len());
    let mut total: Option<Vec<f64>> = None;

    for block in rows.chunks(ROW_BLOCK) {
        let n = block.len();
        let mut x_t = Array2::<f64>::zeros((n, pixels));
        let mut ts = Vec::with_capacity(n);
        let mut cs = Vec::with_capacity(n);
        for (r, row) in block.iter().enumerate() {
            let ab = schedule.alpha_bars[row.t];
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            for (j, (x, e)) in row.x0.iter().zip(&row.eps).enumerate() {
                x_t[[r, j]] = a * *x as f64 + b * e;
            }
            ts.push(row.t);
            cs.push(row.class);
        }
        let (out, cache) = pred.predict(x_t.view(), &ts, &cs);
        let mut d_out = Array2::<f64>::zeros((n, pixels));
        for (r, row) in block.iter().enumerate() {
            let mut acc = 0.0;
            for j in 0..pixels {
                let w = weights.as_ref().map_or(1.0, |w| w[j]);
                let d = out[[r, j]] - row.eps[j];
                acc += w * d * d;
                d_out[[r, j]] = row.weight * 2.0 * w * d / denom;
            }
            losses.push(acc / denom);
        }
        if let Some(reduction) = grad {
            let g = pred.pull_back(&cache, &d_out, reduction);
            match total.as_mut() {
                None => total = Some(g),
                Some(t) => t.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            }
        }
    }
    RowEval { losses, grad: total }
}

/// f64 evaluator over fixed parameters. Reuse it when evaluating many examples.
pub struct Evaluator<P = Weights<f64>> {
    pub predictor: P,
    pub cfg: DiffusionConfig,
    pub schedule: Schedule,
}

impl Evaluator<Weights<f64>> {
    pub fn new(theta: &ParamVector, cfg: &DiffusionConfig) -> Result<Self> {
        cfg.validate()?;
        let arch = Architecture::for_config(cfg);
        theta.same_layout(&arch.layout())?;
        Ok(Self::with_predictor(Weights::from_params(arch, theta), cfg))
    }
}

impl<P: NoisePredictor<f64>> Evaluator<P> {
    pub fn with_predictor(predictor: P, cfg: &DiffusionConfig) -> Self {
        Self {
            predictor,
            cfg: cfg.clone(),
            schedule: cfg.schedule(),
        }
    }

    fn check_example(&self, z: &Example) -> Result<()> {
        if z.x.len() != self.cfg.pixels() {
            return Err(Error::Validation(format!(
                "example {} has {} pixels, expected {}",
                z.id,
                z.x.len(),
                self.cfg.pixels()
            )));
        }
        check_range("class", z.class, 0, self.cfg.num_classes - 1)
    }

    fn strided_rows<'a>(&self, z: &'a Example, timesteps: &[usize], seed: u64) -> Vec<LossRow<'a>> {
        let w = 1.0 / timesteps.len() as f64;
        timesteps
            .iter()
            .map(|&t| LossRow {
                x0: &z.x,
                class: z.class,
                t,
                eps: loss_noise(seed, z.id, t, self.cfg.pixels()),
                weight: w,
            })
            .collect()
    }

    pub fn ddpm_loss(&self, z: &Example, t: usize, eps: &[f64]) -> Result<f64> {
        self.check_example(z)?;
        self.cfg.check_timestep(t)?;
        if eps.len() != z.x.len() {
            return Err(Error::Validation("noise and image lengths differ".into()));
        }
        let row = LossRow {
            x0: &z.x,
            class: z.class,
            t,
            eps: eps.to_vec(),
            weight: 1.0,
        };
        let loss = eval_rows(&self.predictor, &self.schedule, &[row], None, None).losses[0];
        finite(loss, "ddpm_loss", &self.predictor.layout())
    }

    /// Average loss over an explicit timestep list.
    pub fn loss_at(&self, z: &Example, timesteps: &[usize], seed: u64, region: Option<&RegionMask>) -> Result<f64> {
        self.check_example(z)?;
        for &t in timesteps {
            self.cfg.check_timestep(t)?;
        }
        let rows = self.strided_rows(z, timesteps, seed);
        let ev = eval_rows(&self.predictor, &self.schedule, &rows, region, None);
        let mean = ev.losses.iter().sum::<f64>() / timesteps.len() as f64;
        finite(mean, "strided_loss", &self.predictor.layout())
    }

    pub fn strided_loss(&self, z: &Example, stride: usize, seed: u64) -> Result<f64> {
        let ts = strided_timesteps(stride, self.cfg.steps)?;
        self.loss_at(z, &ts, seed, None)
    }

    /// Strided losses for many examples, batching rows across examples.
    pub fn strided_losses(&self, examples: &[Example], stride: usize, seed: u64) -> Result<Vec<f64>> {
        let ts = strided_timesteps(stride, self.cfg.steps)?;
        let per_block = (ROW_BLOCK / ts.len()).max(1);
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(per_block) {
            let mut rows = Vec::with_capacity(chunk.len() * ts.len());
            for z in chunk {
                self.check_example(z)?;
                rows.extend(self.strided_rows(z, &ts, seed));
            }
            let ev = eval_rows(&self.predictor, &self.schedule, &rows, None, None);
            for per in ev.losses.chunks(ts.len()) {
                let mean = per.iter().sum::<f64>() / ts.len() as f64;
                out.push(finite(mean, "strided_loss", &self.predictor.layout())?);
            }
        }
        Ok(out)
    }

    /// Exact gradient of the average loss over `timesteps`.
    pub fn gradient_at(
        &self,
        z: &Example,
        timesteps: &[usize],
        seed: u64,
        region: Option<&RegionMask>,
    ) -> Result<Gradient> {
        self.check_example(z)?;
        for &t in timesteps {
            self.cfg.check_timestep(t)?;
        }
        if let Some(r) = region {
            r.validate(self.cfg.image_shape)?;
        }
        let rows = self.strided_rows(z, timesteps, seed);
        let ev = eval_rows(&self.predictor, &self.schedule, &rows, region, Some(Reduction::Sum));
        let g = Gradient {
            values: ev.grad.expect("gradient requested"),
            layout: self.predictor.layout(),
        };
        g.check_finite("loss_gradient")?;
        Ok(g)
    }

    pub fn loss_gradient(&self, z: &Example, stride: usize, seed: u64, region: Option<&RegionMask>) -> Result<Gradient> {
        let ts = strided_timesteps(stride, self.cfg.steps)?;
        self.gradient_at(z, &ts, seed, region)
    }
}

fn finite(v: f64, context: &str, layout: &Layout) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        // The loss is a scalar; attribute it to the output layer it passes through.
        let segment = layout.segments().last().map_or("", |s| s.name.as_str());
        Err(Error::Numeric {
            context: context.to_string(),
            segment: segment.to_string(),
        })
    }
}

/// Mean over pixels of `(denoiser(θ, q_sample(x, t, eps), t, c) − eps)²`.
pub fn ddpm_loss(z: &Example, theta: &ParamVector, t: usize, eps: &[f64], cfg: &DiffusionConfig) -> Result<f64> {
    Evaluator::new(theta, cfg)?.ddpm_loss(z, t, eps)
}

/// Average of [`ddpm_loss`] over timesteps `1, 1 + stride, …` with keyed noise.
pub fn strided_loss(z: &Example, theta: &ParamVector, stride: usize, noise_seed: u64, cfg: &DiffusionConfig) -> Result<f64> {
    Evaluator::new(theta, cfg)?.strided_loss(z, stride, noise_seed)
}

/// Exact gradient of [`strided_loss`] with respect to θ.
pub fn loss_gradient(
    z: &Example,
    theta: &ParamVector,
    stride: usize,
    noise_seed: u64,
    cfg: &DiffusionConfig,
) -> Result<Gradient> {
    Evaluator::new(theta, cfg)?.loss_gradient(z, stride, noise_seed, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::model::{OUT_BIAS, OUT_WEIGHT};

    fn cfg10() -> DiffusionConfig {
        DiffusionConfig {
            steps: 10,
            beta_start: 1e-4,
            beta_end: 0.02,
            ..DiffusionConfig::default()
        }
    }

    fn example(id: u64) -> Example {
        let x = (0..64).map(|j| ((j as f32) * 0.37 + id as f32).sin()).collect();
        Example::new(id, 1, x)
    }

    #[test]
    fn q_sample_scalar_schedule_oracle() {
        // ᾱ_t by direct product of (1 − β_s) with β linear in s
        let cfg = cfg10();
        let mut ab = 1.0f64;
        for s in 1..=10 {
            let beta = 1e-4 + (s - 1) as f64 / 9.0 * (0.02 - 1e-4);
            ab *= 1.0 - beta;
        }
        let x = vec![1.0; 64];
        let out = q_sample(&x, 10, &vec![0.0; 64], &cfg).unwrap();
        for v in out {
            assert!((v - ab.sqrt()).abs() < 1e-15);
        }
        assert!((0.9..1.0).contains(&ab));
    }

    #[test]
    fn q_sample_zero_image_and_range() {
        let cfg = cfg10();
        let eps: Vec<f64> = (0..64).map(|j| j as f64 * 0.1).collect();
        let ab = cfg.schedule().alpha_bars[4];
        let out = q_sample(&vec![0.0; 64], 4, &eps, &cfg).unwrap();
        for (o, e) in out.iter().zip(&eps) {
            assert!((o - (1.0 - ab).sqrt() * e).abs() < 1e-15);
        }
        assert!(matches!(q_sample(&eps, 0, &eps, &cfg), Err(Error::Range { .. })));
        assert!(matches!(q_sample(&eps, 11, &eps, &cfg), Err(Error::Range { .. })));
    }

    #[test]
    fn zero_output_model_gives_noise_mean_square() {
        let cfg = cfg10();
        let arch = Architecture::for_config(&cfg);
        let mut theta = arch.init(3);
        theta.segment_mut(OUT_WEIGHT).unwrap().fill(0.0);
        theta.segment_mut(OUT_BIAS).unwrap().fill(0.0);
        let eps = loss_noise(9, 0, 5, 64);
        let m = eps.iter().map(|e| e * e).sum::<f64>() / 64.0;
        let l = ddpm_loss(&example(0), &theta, 5, &eps, &cfg).unwrap();
        assert!((l - m).abs() < 1e-14);
    }

    #[test]
    fn strided_timesteps_cover_expected_grid() {
        assert_eq!(strided_timesteps(10, 200).unwrap().len(), 20);
        assert_eq!(strided_timesteps(200, 200).unwrap(), vec![1]);
        assert_eq!(strided_timesteps(1, 5).unwrap(), vec![1, 2, 3, 4, 5]);
        assert!(strided_timesteps(201, 200).is_err());
        assert!(strided_timesteps(0, 200).is_err());
    }

    #[test]
    fn region_mask_validation() {
        let shape = ImageShape::default();
        assert!(RegionMask::full(shape).validate(shape).is_ok());
        assert!(RegionMask::rect(shape, 0, 0, 0, 0).validate(shape).is_err());
        let r = RegionMask::rect(shape, 2, 4, 1, 3);
        assert_eq!(r.active.iter().filter(|&&a| a).count(), 4);
        assert!(r.validate(ImageShape::new(1, 4, 4)).is_err());
    }
}
