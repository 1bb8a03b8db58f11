//! Leave-K-out counterfactual evaluation.
//!
//! For a score table and a budget `k`, retrain without the top-k images and
//! measure how the query's loss and regenerated image change relative to
//! the base model. Random removals give the reference curve.

pub mod encoder;
pub mod query;
pub mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::attribution::{random_scores, top_k, ScoreTable, RANDOM};
use crate::container::{write_atomic, Checkpoint};
use crate::data::Dataset;
use crate::diffusion::loss::strided_timesteps;
use crate::diffusion::{DiffusionConfig, Evaluator, ParamVector};
use crate::error::{Error, Result};
use crate::hashing::ContentHasher;
use crate::stats;
use crate::train::{retrain_leave_k, TrainConfig};

pub use encoder::{Encoder, EncoderConfig};
pub use query::{group_queries, read_queries, regenerate_many, sample_queries, write_queries, Query, QueryOrigin};

/// One `(query, method, k)` measurement against the base model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualReport {
    pub query: u64,
    pub method: String,
    pub k: usize,
    pub delta_loss: f64,
    pub delta_gen_mse: f64,
    pub delta_gen_feat: f64,
    pub query_hash: String,
    pub base_checkpoint: String,
    pub retrained_checkpoint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    pub mean_delta_loss: f64,
    pub se_delta_loss: f64,
    pub mean_delta_gen_mse: f64,
    pub mean_delta_gen_feat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomReferenceCurve {
    pub points: Vec<CurvePoint>,
    pub models_per_k: usize,
}

impl RandomReferenceCurve {
    pub fn point(&self, k: usize) -> Option<&CurvePoint> {
        self.points.iter().find(|p| p.k == k)
    }
}

/// Aggregates reports sharing a `k` into curve points.
pub fn aggregate(reports: &[CounterfactualReport]) -> Vec<CurvePoint> {
    let mut by_k: BTreeMap<usize, Vec<&CounterfactualReport>> = BTreeMap::new();
    for r in reports {
        by_k.entry(r.k).or_default().push(r);
    }
    by_k.into_iter()
        .map(|(k, rs)| {
            let dl: Vec<f64> = rs.iter().map(|r| r.delta_loss).collect();
            let dg: Vec<f64> = rs.iter().map(|r| r.delta_gen_mse).collect();
            let df: Vec<f64> = rs.iter().map(|r| r.delta_gen_feat).collect();
            CurvePoint {
                k,
                mean_delta_loss: stats::mean(&dl),
                se_delta_loss: stats::std_error(&dl),
                mean_delta_gen_mse: stats::mean(&dg),
                mean_delta_gen_feat: stats::mean(&df),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeFlag {
    Below,
    Above,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivalentK {
    pub k: f64,
    pub out_of_range: Option<RangeFlag>,
}

/// Number of random removals whose mean loss change equals `delta_loss`, by
/// piecewise-linear inverse interpolation; clamped to the curve's range.
pub fn equivalent_random_k(curve: &RandomReferenceCurve, delta_loss: f64) -> Result<EquivalentK> {
    let pts = &curve.points;
    if pts.len() < 2 {
        return Err(Error::Validation("reference curve needs at least two points".into()));
    }
    let (lo, hi) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        (lo.min(p.mean_delta_loss), hi.max(p.mean_delta_loss))
    });
    if delta_loss > hi {
        let p = pts.iter().filter(|p| p.mean_delta_loss == hi).map(|p| p.k).max().unwrap_or(0);
        return Ok(EquivalentK {
            k: p.max(pts[pts.len() - 1].k) as f64,
            out_of_range: Some(RangeFlag::Above),
        });
    }
    if delta_loss < lo {
        return Ok(EquivalentK {
            k: pts[0].k as f64,
            out_of_range: Some(RangeFlag::Below),
        });
    }
    for w in pts.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let (m0, m1) = (a.mean_delta_loss, b.mean_delta_loss);
        if delta_loss == m0 {
            return Ok(EquivalentK {
                k: a.k as f64,
                out_of_range: None,
            });
        }
        if (m0 <= delta_loss && delta_loss <= m1) || (m1 <= delta_loss && delta_loss <= m0) {
            let frac = (delta_loss - m0) / (m1 - m0);
            return Ok(EquivalentK {
                k: a.k as f64 + (b.k as f64 - a.k as f64) * frac,
                out_of_range: None,
            });
        }
    }
    Ok(EquivalentK {
        k: pts[pts.len() - 1].k as f64,
        out_of_range: None,
    })
}

/// A retraining job: the base dataset minus `removed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainJob {
    pub key: String,
    pub removed: Vec<u64>,
}

/// Everything the leave-K-out evaluation needs besides the removal sets.
pub struct Counterfactual<'a> {
    pub ds: &'a Dataset,
    pub base: &'a Checkpoint,
    pub tcfg: &'a TrainConfig,
    pub dcfg: &'a DiffusionConfig,
    pub encoder: &'a Encoder,
    /// Noise seed of the paired loss evaluations.
    pub loss_seed: u64,
    /// Stride of the loss-change evaluation.
    pub stride: usize,
    /// Retrained checkpoints are cached here by job key, if set.
    pub cache_dir: Option<PathBuf>,
    base_hash: String,
    base_metrics: Mutex<BTreeMap<u64, (f64, Vec<f64>)>>,
}

impl<'a> Counterfactual<'a> {
    pub fn new(
        ds: &'a Dataset,
        base: &'a Checkpoint,
        tcfg: &'a TrainConfig,
        dcfg: &'a DiffusionConfig,
        encoder: &'a Encoder,
    ) -> Result<Self> {
        let trained_with = base.header.provenance.get("train").cloned();
        if trained_with.is_some() && trained_with != Some(serde_json::to_value(tcfg)?) {
            return Err(Error::ProvenanceConflict(
                "base checkpoint was trained with a different train config".into(),
            ));
        }
        if let Some(h) = base.header.provenance.get("dataset_hash") {
            if h != &json!(ds.content_hash()) {
                return Err(Error::ProvenanceConflict("base checkpoint was trained on a different dataset".into()));
            }
        }
        Ok(Self {
            ds,
            base,
            tcfg,
            dcfg,
            encoder,
            loss_seed: 0,
            stride: 1,
            cache_dir: None,
            base_hash: base.params.content_hash(),
            base_metrics: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn with_cache(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = Some(dir.into());
        self
    }

    pub fn job(&self, removed: &BTreeSet<u64>) -> Result<RetrainJob> {
        let mut h = ContentHasher::new();
        h.bytes(self.ds.content_hash().as_bytes())
            .bytes(serde_json::to_string(self.tcfg)?.as_bytes())
            .bytes(serde_json::to_string(self.dcfg)?.as_bytes())
            .u64(removed.len() as u64);
        for &id in removed {
            h.u64(id);
        }
        Ok(RetrainJob {
            key: h.finish(),
            removed: removed.iter().copied().collect(),
        })
    }

    fn cache_path(&self, key: &str) -> Option<PathBuf> {
        self.cache_dir.as_ref().map(|d| d.join(format!("{key}.bin")))
    }

    /// `θ₋K`, from the cache when available. An empty removal set is the
    /// base model itself.
    pub fn retrained(&self, removed: &BTreeSet<u64>) -> Result<(ParamVector, String)> {
        if removed.is_empty() {
            return Ok((self.base.params.clone(), self.base_hash.clone()));
        }
        let job = self.job(removed)?;
        if let Some(path) = self.cache_path(&job.key) {
            if path.exists() {
                let ck = Checkpoint::read(&path)?;
                let ids = ck.header.provenance.get("removed_ids").cloned().unwrap_or_default();
                let expect: BTreeSet<u64> = self.ds.removed_ids().into_iter().chain(removed.iter().copied()).collect();
                if ids != json!(expect) {
                    return Err(Error::ProvenanceConflict(format!(
                        "cached checkpoint {} has other removals",
                        path.display()
                    )));
                }
                return Ok((ck.params, job.key));
            }
        }
        let trained = retrain_leave_k(self.ds, removed, self.tcfg, self.dcfg)?;
        if let Some(path) = self.cache_path(&job.key) {
            std::fs::create_dir_all(path.parent().expect("cache file has a parent"))?;
            trained.checkpoint.write(&path)?;
        }
        Ok((trained.checkpoint.params, job.key))
    }

    /// Runs every job whose checkpoint is not cached yet, up to `jobs` at a time.
    pub fn run_jobs(&self, list: &[RetrainJob], jobs: usize) -> Result<()> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| Error::Validation(e.to_string()))?;
        pool.install(|| {
            list.par_iter().try_for_each(|j| {
                let removed: BTreeSet<u64> = j.removed.iter().copied().collect();
                self.retrained(&removed).map(|_| ())
            })
        })
    }

    fn query_loss(&self, ev: &Evaluator, q: &Query) -> Result<f64> {
        let ts = strided_timesteps(self.stride, self.dcfg.steps)?;
        ev.loss_at(&q.example, &ts, self.loss_seed, None)
    }

    fn base_side(&self, queries: &[Query]) -> Result<Vec<(f64, Vec<f64>)>> {
        let mut cache = self.base_metrics.lock().expect("metrics lock");
        let missing: Vec<Query> = queries.iter().filter(|q| !cache.contains_key(&q.id())).cloned().collect();
        if !missing.is_empty() {
            let ev = Evaluator::new(&self.base.params, self.dcfg)?;
            let gens = regenerate_many(&missing, &ev)?;
            for (q, g) in missing.iter().zip(gens) {
                cache.insert(q.id(), (self.query_loss(&ev, q)?, g));
            }
        }
        Ok(queries.iter().map(|q| cache[&q.id()].clone()).collect())
    }

    /// Measures `queries` under the model retrained without `removed`.
    pub fn measure(&self, method: &str, k: usize, removed: &BTreeSet<u64>, queries: &[Query]) -> Result<Vec<CounterfactualReport>> {
        for q in queries {
            q.eps_seed()?;
        }
        let base = self.base_side(queries)?;
        let (theta_k, key) = self.retrained(removed)?;
        let ev = Evaluator::new(&theta_k, self.dcfg)?;
        let gens = regenerate_many(queries, &ev)?;
        queries
            .iter()
            .zip(base)
            .zip(gens)
            .map(|((q, (l0, g0)), gk)| {
                let lk = self.query_loss(&ev, q)?;
                let mse = g0.iter().zip(&gk).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / g0.len() as f64;
                Ok(CounterfactualReport {
                    query: q.id(),
                    method: method.to_string(),
                    k,
                    delta_loss: lk - l0,
                    delta_gen_mse: mse,
                    delta_gen_feat: self.encoder.feature_distance(&g0, &gk),
                    query_hash: q.example.content_hash(),
                    base_checkpoint: self.base_hash.clone(),
                    retrained_checkpoint: key.clone(),
                })
            })
            .collect()
    }

    /// Removal set of the top-`k` ids of `st` (empty for `k = 0`).
    pub fn removal(&self, st: &ScoreTable, k: usize) -> Result<BTreeSet<u64>> {
        st.check_covers(self.ds)?;
        if k == 0 {
            return Ok(BTreeSet::new());
        }
        Ok(top_k(st, k)?.into_iter().collect())
    }

    /// Retrains without `top_k(st, k)` and reports every query.
    pub fn eval_leave_k(&self, st: &ScoreTable, k: usize, queries: &[Query]) -> Result<Vec<CounterfactualReport>> {
        let removed = self.removal(st, k)?;
        self.measure(&st.method, k, &removed, queries)
    }

    /// Random table used for model `m` of the reference curve. The removal
    /// sets of one model are nested across `k`.
    pub fn random_table(&self, m: usize, seed: u64) -> Result<ScoreTable> {
        random_scores(self.ds, m as u64, seed)
    }

    pub fn random_jobs(&self, k_grid: &[usize], models_per_k: usize, seed: u64) -> Result<Vec<RetrainJob>> {
        let mut out = Vec::new();
        for m in 0..models_per_k {
            let st = self.random_table(m, seed)?;
            for &k in k_grid.iter().filter(|&&k| k > 0) {
                out.push(self.job(&self.removal(&st, k)?)?);
            }
        }
        Ok(out)
    }

    /// Trains `models_per_k` random-removal models per grid point and
    /// aggregates their reports over queries and models.
    pub fn random_reference(
        &self,
        k_grid: &[usize],
        models_per_k: usize,
        queries: &[Query],
        seed: u64,
    ) -> Result<(RandomReferenceCurve, Vec<CounterfactualReport>)> {
        if models_per_k == 0 {
            return Err(Error::Validation("models_per_k must be >= 1".into()));
        }
        if k_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation("k grid must be strictly ascending".into()));
        }
        let mut reports = Vec::new();
        for &k in k_grid {
            for m in 0..models_per_k {
                let st = self.random_table(m, seed)?;
                let removed = self.removal(&st, k)?;
                reports.extend(self.measure(RANDOM, k, &removed, queries)?);
            }
        }
        let curve = RandomReferenceCurve {
            points: aggregate(&reports),
            models_per_k,
        };
        Ok((curve, reports))
    }
}

/// Writes the job list as JSON.
pub fn write_job_list(path: &Path, jobs: &[RetrainJob]) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(jobs)?.as_bytes())
}

pub fn read_job_list(path: &Path) -> Result<Vec<RetrainJob>> {
    Ok(serde_json::from_slice(&crate::container::read_file(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(points: &[(usize, f64)]) -> RandomReferenceCurve {
        RandomReferenceCurve {
            points: points
                .iter()
                .map(|&(k, m)| CurvePoint {
                    k,
                    mean_delta_loss: m,
                    se_delta_loss: 0.0,
                    mean_delta_gen_mse: 0.0,
                    mean_delta_gen_feat: 0.0,
                })
                .collect(),
            models_per_k: 1,
        }
    }

    #[test]
    fn equivalent_k_interpolates_and_clamps() {
        let c = curve(&[(0, 0.0), (10, 0.1), (50, 0.3)]);
        assert_eq!(equivalent_random_k(&c, 0.1).unwrap().k, 10.0);
        assert_eq!(equivalent_random_k(&c, 0.3).unwrap().k, 50.0);
        assert!((equivalent_random_k(&c, 0.2).unwrap().k - 30.0).abs() < 1e-9);
        assert!((equivalent_random_k(&c, 0.05).unwrap().k - 5.0).abs() < 1e-9);
        let above = equivalent_random_k(&c, 1.0).unwrap();
        assert_eq!((above.k, above.out_of_range), (50.0, Some(RangeFlag::Above)));
        let below = equivalent_random_k(&c, -1.0).unwrap();
        assert_eq!((below.k, below.out_of_range), (0.0, Some(RangeFlag::Below)));
        assert!(equivalent_random_k(&curve(&[(0, 0.0)]), 0.0).is_err());
        assert!(equivalent_random_k(&curve(&[]), 0.0).is_err());
    }

    #[test]
    fn aggregate_groups_by_k() {
        let r = |k, dl| CounterfactualReport {
            query: 0,
            method: "m".into(),
            k,
            delta_loss: dl,
            delta_gen_mse: 1.0,
            delta_gen_feat: 0.5,
            query_hash: String::new(),
            base_checkpoint: String::new(),
            retrained_checkpoint: String::new(),
        };
        let pts = aggregate(&[r(10, 1.0), r(0, 0.0), r(10, 3.0)]);
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[0].k, 0);
        assert_eq!(pts[1].mean_delta_loss, 2.0);
        assert_eq!(pts[1].se_delta_loss, 1.0);
    }
}
