//! Unlearning a synthesized image by preconditioned gradient ascent.
//!
//! Each step moves the masked parameters along `F⁻¹∇L(ẑ, θ)`. The noise for
//! step `s` is keyed by `seed + s`.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::Checkpoint;
use crate::data::Example;
use crate::diffusion::loss::{Evaluator, RegionMask};
use crate::diffusion::params::{Gradient, SegmentSet};
use crate::diffusion::{DiffusionConfig, ParamVector};
use crate::error::{Error, Result};
use crate::fisher::{precondition, FisherDiagonal};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnlearnConfig {
    pub alpha: f64,
    pub steps: usize,
    pub mask: SegmentSet,
    pub stride: usize,
    pub region: Option<RegionMask>,
    pub seed: u64,
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            alpha: 5e-6,
            steps: 1,
            mask: SegmentSet::conditioning(),
            stride: 10,
            region: None,
            seed: 0,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self, dcfg: &DiffusionConfig) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Validation("alpha must be finite and >= 0".into()));
        }
        if self.steps == 0 {
            return Err(Error::Validation("steps must be >= 1".into()));
        }
        if let Some(r) = &self.region {
            r.validate(dcfg.image_shape)?;
        }
        crate::diffusion::loss::strided_timesteps(self.stride, dcfg.steps)?;
        Ok(())
    }
}

/// Direction of one ascent step at `theta`: the masked gradient, divided by
/// the Fisher diagonal when one is given.
pub fn update_direction(
    theta: &ParamVector,
    fisher: Option<&FisherDiagonal>,
    zhat: &Example,
    cfg: &UnlearnConfig,
    dcfg: &DiffusionConfig,
    step: usize,
) -> Result<Gradient> {
    let ev = Evaluator::new(theta, dcfg)?;
    let seed = cfg.seed.wrapping_add(step as u64);
    let g = ev.loss_gradient(zhat, cfg.stride, seed, cfg.region.as_ref())?;
    match fisher {
        Some(f) => precondition(&g, f, &cfg.mask),
        None => {
            let keep = g.layout.mask_for(&cfg.mask)?;
            let values = g.values.iter().zip(keep).map(|(v, k)| if k { *v } else { 0.0 }).collect();
            Ok(Gradient { values, layout: g.layout })
        }
    }
}

fn ascend(
    theta0: &ParamVector,
    fisher: Option<&FisherDiagonal>,
    zhat: &Example,
    cfg: &UnlearnConfig,
    dcfg: &DiffusionConfig,
) -> Result<ParamVector> {
    cfg.validate(dcfg)?;
    if let Some(f) = fisher {
        theta0.same_layout(&f.layout)?;
    }
    let mut theta = theta0.clone();
    if cfg.alpha == 0.0 {
        return Ok(theta);
    }
    for step in 0..cfg.steps {
        let d = update_direction(&theta, fisher, zhat, cfg, dcfg, step)?;
        let mut worst = (0.0f64, 0usize);
        let mut bad = false;
        for (i, (p, di)) in theta.values_mut().iter_mut().zip(&d.values).enumerate() {
            if *di == 0.0 {
                continue;
            }
            let next = (*p as f64 + cfg.alpha * di) as f32;
            let change = (cfg.alpha * di).abs();
            if !next.is_finite() || !change.is_finite() {
                bad = true;
            }
            if !(change <= worst.0) {
                worst = (change, i);
            }
            *p = next;
        }
        if bad {
            return Err(Error::UnlearnDiverged {
                step,
                segment: theta.layout().segment_of(worst.1).to_string(),
            });
        }
    }
    Ok(theta)
}

/// `θ₋ẑ`: `steps` iterations of `θ ← θ + α·precondition(∇L(ẑ, θ), F, mask)`.
pub fn unlearn(
    theta0: &ParamVector,
    fisher: &FisherDiagonal,
    zhat: &Example,
    cfg: &UnlearnConfig,
    dcfg: &DiffusionConfig,
) -> Result<ParamVector> {
    ascend(theta0, Some(fisher), zhat, cfg, dcfg)
}

/// The same loop without preconditioning. Ablation only.
pub fn unlearn_sgd_baseline(theta0: &ParamVector, zhat: &Example, cfg: &UnlearnConfig, dcfg: &DiffusionConfig) -> Result<ParamVector> {
    ascend(theta0, None, zhat, cfg, dcfg)
}

/// Wraps unlearned parameters in a checkpoint whose provenance names the
/// base model, the query and the configuration.
pub fn unlearned_checkpoint(
    params: ParamVector,
    base_hash: &str,
    zhat: &Example,
    cfg: &UnlearnConfig,
    dcfg: &DiffusionConfig,
    extra: serde_json::Value,
) -> Checkpoint {
    let provenance = json!({
        "base_checkpoint_hash": base_hash,
        "query_id": zhat.id,
        "query_hash": zhat.content_hash(),
        "unlearn": cfg,
        "extra": extra,
    });
    Checkpoint::new("unlearned", dcfg, params, provenance)
}
