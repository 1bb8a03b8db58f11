//! Ancestral DDPM sampling with keyed noise.
//!
//! The initial noise and every per-step noise draw come from
//! `(eps_seed, step)`-keyed streams, so two models sampled with the same
//! seed see the same noise sequence.

use ndarray::Array2;

use super::loss::{Evaluator, NoisePredictor};
use super::params::ParamVector;
use super::schedule::DiffusionConfig;
use crate::error::{check_range, Error, Result};
use crate::rng::{fill_normal, Stream};

/// Generates one image per `(class, eps_seed)` request. Rows are batched
/// through the network together; each row's noise only depends on its seed.
pub fn sample_batch<P: NoisePredictor<f64>>(ev: &Evaluator<P>, requests: &[(usize, u64)]) -> Result<Vec<Vec<f64>>> {
    denoise_from(ev, requests, None, ev.cfg.steps)
}

/// Partial-noising edit: each start image is noised to `t_start` with the
/// request's keyed initial noise, then denoised by the model.
pub fn refine_batch<P: NoisePredictor<f64>>(
    ev: &Evaluator<P>,
    requests: &[(usize, u64)],
    starts: &[Vec<f64>],
    t_start: usize,
) -> Result<Vec<Vec<f64>>> {
    ev.cfg.check_timestep(t_start)?;
    if starts.len() != requests.len() || starts.iter().any(|s| s.len() != ev.cfg.pixels()) {
        return Err(Error::Validation("start images do not match the requests".into()));
    }
    denoise_from(ev, requests, Some(starts), t_start)
}

fn denoise_from<P: NoisePredictor<f64>>(
    ev: &Evaluator<P>,
    requests: &[(usize, u64)],
    starts: Option<&[Vec<f64>]>,
    t_start: usize,
) -> Result<Vec<Vec<f64>>> {
    let cfg = &ev.cfg;
    let sched = &ev.schedule;
    let pixels = cfg.pixels();
    for &(c, _) in requests {
        check_range("class", c, 0, cfg.num_classes - 1)?;
    }
    let n = requests.len();
    let mut x = Array2::<f64>::zeros((n, pixels));
    let mut buf = vec![0.0; pixels];
    let ab = sched.alpha_bars[t_start];
    for (r, &(_, seed)) in requests.iter().enumerate() {
        fill_normal(seed, Stream::SampleInit, 0, 0, &mut buf);
        match starts {
            None => x.row_mut(r).iter_mut().zip(&buf).for_each(|(d, s)| *d = *s),
            Some(s) => {
                for (j, d) in x.row_mut(r).iter_mut().enumerate() {
                    *d = ab.sqrt() * s[r][j] + (1.0 - ab).sqrt() * buf[j];
                }
            }
        }
    }
    let classes: Vec<usize> = requests.iter().map(|r| r.0).collect();

    for t in (1..=t_start).rev() {
        let ts = vec![t; n];
        let (eps_hat, _) = ev.predictor.predict(x.view(), &ts, &classes);
        let ab = sched.alpha_bars[t];
        let ab_prev = sched.alpha_bars[t - 1];
        let beta = sched.betas[t];
        // posterior mean from the clipped x0 estimate
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = sched.alphas[t].sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = if t > 1 { sched.posterior_variance(t).sqrt() } else { 0.0 };
        for r in 0..n {
            if t > 1 {
                fill_normal(requests[r].1, Stream::SampleStep, t as u64, 0, &mut buf);
            }
            for j in 0..pixels {
                let xt = x[[r, j]];
                let x0 = ((xt - (1.0 - ab).sqrt() * eps_hat[[r, j]]) / ab.sqrt()).clamp(-1.0, 1.0);
                let mut next = c0 * x0 + ct * xt;
                if t > 1 {
                    next += sigma * buf[j];
                }
                x[[r, j]] = next;
            }
        }
    }
    let out: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.iter().map(|v| v.clamp(-1.0, 1.0)).collect()).collect();
    if out.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            context: "sample".into(),
            segment: "out_weight".into(),
        });
    }
    Ok(out)
}

/// `x̂ = G_θ(ε, c)` with all noise keyed by `eps_seed`.
pub fn sample(theta: &ParamVector, class: usize, eps_seed: u64, cfg: &DiffusionConfig) -> Result<Vec<f64>> {
    let ev = Evaluator::new(theta, cfg)?;
    Ok(sample_batch(&ev, &[(class, eps_seed)])?.remove(0))
}
