use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{ScoreRow, ScoreTable, PIXEL_COSINE, RANDOM, UNLEARNING};
use crate::data::{Dataset, Example};
use crate::diffusion::loss::Evaluator;
use crate::diffusion::{DiffusionConfig, ParamVector};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// How training losses are evaluated for loss-change scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossScoring {
    pub stride: usize,
    pub seed: u64,
    /// Also score the mirrored image and keep the larger value.
    pub flip: bool,
}

impl Default for LossScoring {
    fn default() -> Self {
        Self {
            stride: 10,
            seed: 0,
            flip: true,
        }
    }
}

/// Strided losses of every training image under one model.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTable {
    pub scoring: LossScoring,
    pub theta_hash: String,
    pub ids: Vec<u64>,
    pub plain: Vec<f64>,
    pub flipped: Option<Vec<f64>>,
}

pub fn loss_table(ds: &Dataset, theta: &ParamVector, scoring: LossScoring, dcfg: &DiffusionConfig) -> Result<LossTable> {
    let ev = Evaluator::new(theta, dcfg)?;
    let plain = ev.strided_losses(&ds.examples, scoring.stride, scoring.seed)?;
    let flipped = if scoring.flip {
        let mirrored: Vec<Example> = ds.examples.iter().map(Example::flip).collect();
        Some(ev.strided_losses(&mirrored, scoring.stride, scoring.seed)?)
    } else {
        None
    };
    Ok(LossTable {
        scoring,
        theta_hash: theta.content_hash(),
        ids: ds.ids().collect(),
        plain,
        flipped,
    })
}

/// `τ(z) = L(z, θ₋ẑ) − L(z, θ₀)` from two precomputed loss tables.
pub fn score_unlearning_from(base: &LossTable, unlearned: &LossTable, zhat: &Example) -> Result<ScoreTable> {
    if base.ids != unlearned.ids || base.scoring != unlearned.scoring {
        return Err(Error::Validation("loss tables were evaluated differently".into()));
    }
    let rows = (0..base.ids.len())
        .map(|i| {
            let flipped = match (&base.flipped, &unlearned.flipped) {
                (Some(b), Some(u)) => Some(u[i] - b[i]),
                _ => None,
            };
            ScoreRow::new(base.ids[i], unlearned.plain[i] - base.plain[i], flipped)
        })
        .collect();
    let params = json!({
        "scoring": base.scoring,
        "base_theta_hash": base.theta_hash,
        "unlearned_theta_hash": unlearned.theta_hash,
    });
    ScoreTable::new(UNLEARNING, zhat.id, zhat.content_hash(), rows, params)
}

pub fn score_unlearning(
    ds: &Dataset,
    theta0: &ParamVector,
    theta_unlearned: &ParamVector,
    zhat: &Example,
    scoring: LossScoring,
    dcfg: &DiffusionConfig,
) -> Result<ScoreTable> {
    theta_unlearned.same_layout(theta0.layout())?;
    let base = loss_table(ds, theta0, scoring, dcfg)?;
    let after = loss_table(ds, theta_unlearned, scoring, dcfg)?;
    score_unlearning_from(&base, &after, zhat)
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Cosine similarity of flattened pixels, max over the mirrored image.
pub fn score_pixel_cosine(ds: &Dataset, zhat: &Example, flip: bool) -> Result<ScoreTable> {
    let rows = ds
        .examples
        .iter()
        .map(|z| {
            let flipped = flip.then(|| cosine(&z.flip().x, &zhat.x));
            ScoreRow::new(z.id, cosine(&z.x, &zhat.x), flipped)
        })
        .collect();
    ScoreTable::new(PIXEL_COSINE, zhat.id, zhat.content_hash(), rows, json!({ "flip": flip }))
}

/// Uniform scores keyed by `(seed, id)`; their top-K is a random removal set.
pub fn random_scores(ds: &Dataset, query_id: u64, seed: u64) -> Result<ScoreTable> {
    let rows = ds
        .ids()
        .map(|id| ScoreRow::new(id, rng::unit(seed, Stream::RandomScores, query_id, id), None))
        .collect();
    ScoreTable::new(RANDOM, query_id, String::new(), rows, json!({ "seed": seed }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_scalar_oracle() {
        let a = [1.0f32, 2.0, -3.0];
        let b = [0.5f32, -1.0, 2.0];
        let expect = (0.5 - 2.0 - 6.0) / ((1.0f64 + 4.0 + 9.0).sqrt() * (0.25f64 + 1.0 + 4.0).sqrt());
        assert!((cosine(&a, &b) - expect).abs() < 1e-12);
        assert_eq!(cosine(&a, &[0.0; 3]), 0.0);
    }
}
