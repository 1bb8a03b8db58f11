//! Gradient-similarity baselines: `∇L(z)ᵀF⁻¹∇L(ẑ)`, optionally through a
//! random sign projection of the whitened gradients `F^{-1/2}∇L`.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{ScoreRow, ScoreTable, INFLUENCE_PROJECTED, SINGLE_TIMESTEP};
use crate::data::{Dataset, Example};
use crate::diffusion::loss::{strided_timesteps, Evaluator};
use crate::diffusion::params::SegmentSet;
use crate::diffusion::{DiffusionConfig, ParamVector};
use crate::error::{Error, Result};
use crate::fisher::FisherDiagonal;
use crate::rng::{self, Stream};

/// Rows of the projection generated at a time.
const PROJ_BLOCK: usize = 256;
/// Training examples whose gradients are held in memory at once.
const GRAD_BLOCK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InfluenceConfig {
    /// Projection dimension; 0 means exact inner products.
    pub proj_dim: usize,
    pub stride: usize,
    /// Noise seed of the loss gradients.
    pub seed: u64,
    pub projection_seed: u64,
    pub mask: SegmentSet,
    pub flip: bool,
}

impl Default for InfluenceConfig {
    fn default() -> Self {
        Self {
            proj_dim: 256,
            stride: 10,
            seed: 0,
            projection_seed: 0,
            mask: SegmentSet::conditioning(),
            flip: true,
        }
    }
}

/// Whitened, optionally projected gradient features of every training image
/// under one base model. Built once and reused across queries.
pub struct InfluenceIndex {
    pub cfg: InfluenceConfig,
    evaluator: Evaluator,
    coords: Vec<usize>,
    whiten: Vec<f64>,
    ids: Vec<u64>,
    plain: Array2<f64>,
    flipped: Option<Array2<f64>>,
    theta_hash: String,
}

impl InfluenceIndex {
    pub fn build(
        ds: &Dataset,
        theta0: &ParamVector,
        fisher: &FisherDiagonal,
        cfg: &InfluenceConfig,
        dcfg: &DiffusionConfig,
    ) -> Result<Self> {
        theta0.same_layout(&fisher.layout)?;
        let coords: Vec<usize> = fisher
            .layout
            .mask_for(&cfg.mask)?
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
            .collect();
        let damp = fisher.damping_term();
        let n = fisher.sample_count as f64;
        let whiten = coords.iter().map(|&i| 1.0 / (fisher.sums()[i] / n + damp).sqrt()).collect();
        let mut index = Self {
            cfg: cfg.clone(),
            evaluator: Evaluator::new(theta0, dcfg)?,
            coords,
            whiten,
            ids: ds.ids().collect(),
            plain: Array2::zeros((0, 0)),
            flipped: None,
            theta_hash: theta0.content_hash(),
        };
        strided_timesteps(cfg.stride, dcfg.steps)?;
        index.plain = index.features_of(&ds.examples)?;
        if cfg.flip {
            let mirrored: Vec<Example> = ds.examples.iter().map(Example::flip).collect();
            index.flipped = Some(index.features_of(&mirrored)?);
        }
        Ok(index)
    }

    pub fn feature_dim(&self) -> usize {
        if self.cfg.proj_dim == 0 {
            self.coords.len()
        } else {
            self.cfg.proj_dim
        }
    }

    fn whitened(&self, z: &Example, timesteps: &[usize]) -> Result<Array1<f64>> {
        let g = self.evaluator.gradient_at(z, timesteps, self.cfg.seed, None)?;
        Ok(self.coords.iter().zip(&self.whiten).map(|(&i, w)| g.values[i] * w).collect())
    }

    /// Rows `r0..r0+len` of the sign projection, scaled by `1/sqrt(k)`.
    fn projection_block(&self, r0: usize, len: usize) -> Array2<f64> {
        let d = self.coords.len();
        let scale = 1.0 / (self.cfg.proj_dim as f64).sqrt();
        let mut p = Array2::zeros((len, d));
        for (r, mut row) in p.axis_iter_mut(Axis(0)).enumerate() {
            let mut g = rng::keyed(self.cfg.projection_seed, Stream::Projection, (r0 + r) as u64, 0);
            let mut bits = 0u64;
            for (j, v) in row.iter_mut().enumerate() {
                if j % 64 == 0 {
                    bits = g.next_u64();
                }
                *v = if (bits >> (j % 64)) & 1 == 1 { scale } else { -scale };
            }
        }
        p
    }

    fn project(&self, whitened: &Array2<f64>) -> Array2<f64> {
        let k = self.cfg.proj_dim;
        if k == 0 {
            return whitened.clone();
        }
        let mut out = Array2::zeros((whitened.nrows(), k));
        for r0 in (0..k).step_by(PROJ_BLOCK) {
            let len = PROJ_BLOCK.min(k - r0);
            let p = self.projection_block(r0, len);
            out.slice_mut(ndarray::s![.., r0..r0 + len]).assign(&whitened.dot(&p.t()));
        }
        out
    }

    fn features_of(&self, examples: &[Example]) -> Result<Array2<f64>> {
        let ts = strided_timesteps(self.cfg.stride, self.evaluator.cfg.steps)?;
        let mut out = Array2::zeros((examples.len(), self.feature_dim()));
        for (b, chunk) in examples.chunks(GRAD_BLOCK).enumerate() {
            let rows: Vec<Array1<f64>> = chunk.par_iter().map(|z| self.whitened(z, &ts)).collect::<Result<_>>()?;
            let mut w = Array2::zeros((chunk.len(), self.coords.len()));
            for (mut dst, src) in w.axis_iter_mut(Axis(0)).zip(&rows) {
                dst.assign(src);
            }
            let start = b * GRAD_BLOCK;
            out.slice_mut(ndarray::s![start..start + chunk.len(), ..]).assign(&self.project(&w));
        }
        Ok(out)
    }

    /// Feature vector of a query, from its gradient averaged over `timesteps`.
    pub fn query_features(&self, zhat: &Example, timesteps: &[usize]) -> Result<Array1<f64>> {
        let w = self.whitened(zhat, timesteps)?.insert_axis(Axis(0));
        Ok(self.project(&w).row(0).to_owned())
    }

    fn table(&self, method: &str, zhat: &Example, q: ArrayView1<f64>, extra: serde_json::Value) -> Result<ScoreTable> {
        let plain = self.plain.dot(&q);
        let flipped = self.flipped.as_ref().map(|f| f.dot(&q));
        let rows = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, &id)| ScoreRow::new(id, plain[i], flipped.as_ref().map(|f| f[i])))
            .collect();
        let params = json!({ "influence": self.cfg, "theta_hash": self.theta_hash, "extra": extra });
        ScoreTable::new(method, zhat.id, zhat.content_hash(), rows, params)
    }

    /// Scores with the query gradient averaged over the strided timesteps.
    pub fn score(&self, zhat: &Example) -> Result<ScoreTable> {
        let ts = strided_timesteps(self.cfg.stride, self.evaluator.cfg.steps)?;
        let q = self.query_features(zhat, &ts)?;
        self.table(INFLUENCE_PROJECTED, zhat, q.view(), serde_json::Value::Null)
    }

    /// Scores with the query gradient taken at `t_fixed` only.
    pub fn score_single_timestep(&self, zhat: &Example, t_fixed: usize) -> Result<ScoreTable> {
        self.evaluator.cfg.check_timestep(t_fixed)?;
        let q = self.query_features(zhat, &[t_fixed])?;
        self.table(SINGLE_TIMESTEP, zhat, q.view(), json!({ "t_fixed": t_fixed }))
    }
}

/// Projected (or exact, with `proj_dim = 0`) influence scores.
pub fn score_influence_projected(
    ds: &Dataset,
    theta0: &ParamVector,
    fisher: &FisherDiagonal,
    zhat: &Example,
    cfg: &InfluenceConfig,
    dcfg: &DiffusionConfig,
) -> Result<ScoreTable> {
    InfluenceIndex::build(ds, theta0, fisher, cfg, dcfg)?.score(zhat)
}

pub fn score_single_timestep_variant(
    ds: &Dataset,
    theta0: &ParamVector,
    fisher: &FisherDiagonal,
    zhat: &Example,
    t_fixed: usize,
    cfg: &InfluenceConfig,
    dcfg: &DiffusionConfig,
) -> Result<ScoreTable> {
    dcfg.check_timestep(t_fixed)?;
    InfluenceIndex::build(ds, theta0, fisher, cfg, dcfg)?.score_single_timestep(zhat, t_fixed)
}

/// Averages tables of the same method from independently trained models.
pub fn average_tables(tables: &[ScoreTable]) -> Result<ScoreTable> {
    let first = tables.first().ok_or_else(|| Error::Validation("no tables to average".into()))?;
    let m = tables.len() as f64;
    let mut rows = Vec::with_capacity(first.len());
    for (i, r) in first.rows.iter().enumerate() {
        let mut score = 0.0;
        let mut flipped = r.score_flipped.map(|_| 0.0);
        for t in tables {
            let o = t
                .rows
                .get(i)
                .filter(|o| o.id == r.id)
                .ok_or_else(|| Error::Validation("tables cover different ids".into()))?;
            score += o.score / m;
            if let (Some(f), Some(of)) = (flipped.as_mut(), o.score_flipped) {
                *f += of / m;
            }
        }
        rows.push(ScoreRow::new(r.id, score, flipped));
    }
    let params = json!({ "ensemble": tables.len(), "members": tables.iter().map(|t| t.params.clone()).collect::<Vec<_>>() });
    ScoreTable::new(&first.method, first.query_id, first.query_hash.clone(), rows, params)
}
