//! Synthesized query images and how to regenerate them under another model.

use serde::{Deserialize, Serialize};

use crate::data::{group_base_image, Dataset, Example};
use crate::diffusion::loss::{Evaluator, NoisePredictor};
use crate::diffusion::sampler::{refine_batch, sample_batch};
use crate::diffusion::{DiffusionConfig, ParamVector};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Query ids live above the training id range.
pub const QUERY_ID_BASE: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QueryOrigin {
    /// `G_θ(ε, c)` from pure noise.
    Sample,
    /// A start image noised to `t_start` and denoised by the model.
    Refine {
        start: Vec<f32>,
        t_start: usize,
        group_id: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub example: Example,
    pub eps_seed: Option<u64>,
    pub origin: QueryOrigin,
}

impl Query {
    pub fn id(&self) -> u64 {
        self.example.id
    }

    pub fn eps_seed(&self) -> Result<u64> {
        self.eps_seed.ok_or(Error::MissingEpsSeed(self.example.id))
    }

    /// The image this query's recipe produces under `ev`'s model.
    pub fn regenerate<P: NoisePredictor<f64>>(&self, ev: &Evaluator<P>) -> Result<Vec<f64>> {
        regenerate_many(std::slice::from_ref(self), ev).map(|mut v| v.remove(0))
    }
}

/// Regenerates several queries, batching the ones that share a recipe.
pub fn regenerate_many<P: NoisePredictor<f64>>(queries: &[Query], ev: &Evaluator<P>) -> Result<Vec<Vec<f64>>> {
    let mut out = vec![Vec::new(); queries.len()];
    let mut plain = Vec::new();
    let mut refine: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, q) in queries.iter().enumerate() {
        q.eps_seed()?;
        match &q.origin {
            QueryOrigin::Sample => plain.push(i),
            QueryOrigin::Refine { t_start, .. } => refine.entry(*t_start).or_default().push(i),
        }
    }
    if !plain.is_empty() {
        let reqs: Vec<(usize, u64)> = plain
            .iter()
            .map(|&i| (queries[i].example.class, queries[i].eps_seed.unwrap_or_default()))
            .collect();
        for (&i, img) in plain.iter().zip(sample_batch(ev, &reqs)?) {
            out[i] = img;
        }
    }
    for (t_start, idx) in refine {
        let reqs: Vec<(usize, u64)> = idx
            .iter()
            .map(|&i| (queries[i].example.class, queries[i].eps_seed.unwrap_or_default()))
            .collect();
        let starts: Vec<Vec<f64>> = idx
            .iter()
            .map(|&i| match &queries[i].origin {
                QueryOrigin::Refine { start, .. } => start.iter().map(|&v| v as f64).collect(),
                QueryOrigin::Sample => unreachable!("grouped by refine origin"),
            })
            .collect();
        for (&i, img) in idx.iter().zip(refine_batch(ev, &reqs, &starts, t_start)?) {
            out[i] = img;
        }
    }
    Ok(out)
}

fn to_example(id: u64, class: usize, img: &[f64], shape: crate::diffusion::ImageShape) -> Example {
    Example::with_shape(id, class, shape, img.iter().map(|&v| v as f32).collect())
}

/// `count` queries sampled from `theta0`, classes round-robin, seeds keyed by `seed`.
pub fn sample_queries(theta0: &ParamVector, count: usize, seed: u64, dcfg: &DiffusionConfig) -> Result<Vec<Query>> {
    let ev = Evaluator::new(theta0, dcfg)?;
    let mut queries: Vec<Query> = (0..count)
        .map(|i| {
            let class = i % dcfg.num_classes;
            let eps_seed = rng::mix(seed, Stream::Query, i as u64, 0);
            Query {
                example: to_example(QUERY_ID_BASE + i as u64, class, &[], dcfg.image_shape),
                eps_seed: Some(eps_seed),
                origin: QueryOrigin::Sample,
            }
        })
        .collect();
    for (q, img) in queries.clone().iter().zip(regenerate_many(&queries, &ev)?) {
        let i = (q.id() - QUERY_ID_BASE) as usize;
        queries[i].example = to_example(q.id(), q.example.class, &img, dcfg.image_shape);
    }
    Ok(queries)
}

/// One query per planted exact-duplicate group: the group's base image
/// noised to `t_start` and denoised by `theta0`.
pub fn group_queries(ds: &Dataset, theta0: &ParamVector, t_start: usize, seed: u64, dcfg: &DiffusionConfig) -> Result<Vec<Query>> {
    let ev = Evaluator::new(theta0, dcfg)?;
    let mut queries = Vec::new();
    for g in ds.spec.planted_groups.iter().filter(|g| g.jitter_std == 0.0) {
        let base = group_base_image(&ds.spec, g.group_id)?;
        let q = Query {
            example: to_example(QUERY_ID_BASE + (1 << 20) + g.group_id, g.class, &[], dcfg.image_shape),
            eps_seed: Some(rng::mix(seed, Stream::Query, g.group_id, 1)),
            origin: QueryOrigin::Refine {
                start: base.x.clone(),
                t_start,
                group_id: Some(g.group_id),
            },
        };
        let img = q.regenerate(&ev)?;
        queries.push(Query {
            example: to_example(q.id(), g.class, &img, dcfg.image_shape),
            ..q
        });
    }
    Ok(queries)
}

pub fn write_queries(path: &std::path::Path, queries: &[Query]) -> Result<()> {
    crate::container::write_atomic(path, serde_json::to_string_pretty(queries)?.as_bytes())
}

pub fn read_queries(path: &std::path::Path) -> Result<Vec<Query>> {
    Ok(serde_json::from_slice(&crate::container::read_file(path)?)?)
}
