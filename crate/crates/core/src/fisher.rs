//! Diagonal Fisher information of the training loss.
//!
//! `F[i]` is the mean over draws of the squared per-example gradient
//! `g[i]²`, where each draw samples an example, a timestep and a noise
//! vector from a `(seed, draw index)`-keyed stream.
//!
//! Draws are grouped into fixed, index-aligned chunks of [`CHUNK`]; chunk
//! sums are combined with a fixed binary tree. Accumulation is in f64.

use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{decode, encode, read_file, write_atomic, Payload, FISHER_MAGIC};
use crate::data::{Dataset, Example};
use crate::diffusion::loss::{eval_rows, Evaluator, LossRow, NoisePredictor};
use crate::diffusion::model::Reduction;
use crate::diffusion::params::{Gradient, Layout, Segment, SegmentSet};
use crate::diffusion::{DiffusionConfig, ParamVector};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub const CHUNK: u64 = 256;

/// Default relative damping, as a fraction of `mean(F)`.
pub const DEFAULT_DAMPING: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FisherConfig {
    pub draws: u64,
    pub seed: u64,
    pub damping: f64,
    /// Draw horizontally flipped examples half of the time, matching training.
    pub flip: bool,
}

impl Default for FisherConfig {
    fn default() -> Self {
        Self {
            draws: 10_000,
            seed: 0,
            damping: DEFAULT_DAMPING,
            flip: true,
        }
    }
}

/// Produces per-draw squared gradients for Fisher estimation.
pub trait DrawSource: Sync {
    fn layout(&self) -> Layout;

    /// `Σ_{d ∈ draws} g_d²` elementwise. Must be a pure function of `(seed, draws)`.
    fn sum_sq(&self, seed: u64, draws: Range<u64>) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiagonal {
    /// Raw sums of squared gradients; `values()` divides by `sample_count`.
    sums: Vec<f64>,
    pub layout: Layout,
    pub sample_count: u64,
    pub damping: f64,
    /// Content hash of the parameters the estimate was taken at.
    pub theta_hash: String,
}

impl FisherDiagonal {
    pub fn from_sums(sums: Vec<f64>, layout: Layout, sample_count: u64, damping: f64, theta_hash: String) -> Result<Self> {
        if sums.len() != layout.total() {
            return Err(Error::LayoutMismatch("Fisher sums do not match layout".into()));
        }
        if sample_count == 0 {
            return Err(Error::Validation("Fisher needs at least one draw".into()));
        }
        if !(damping > 0.0) {
            return Err(Error::Validation("Fisher damping must be > 0".into()));
        }
        if sums.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Validation("Fisher values must be finite and non-negative".into()));
        }
        Ok(Self {
            sums,
            layout,
            sample_count,
            damping,
            theta_hash,
        })
    }

    /// A uniform diagonal, mostly useful for tests and ablations.
    pub fn constant(layout: Layout, value: f64, damping: f64) -> Self {
        Self {
            sums: vec![value; layout.total()],
            layout,
            sample_count: 1,
            damping,
            theta_hash: String::new(),
        }
    }

    pub fn values(&self) -> Vec<f64> {
        let n = self.sample_count as f64;
        self.sums.iter().map(|s| s / n).collect()
    }

    pub fn sums(&self) -> &[f64] {
        &self.sums
    }

    pub fn mean(&self) -> f64 {
        self.sums.iter().sum::<f64>() / (self.sample_count as f64 * self.sums.len().max(1) as f64)
    }

    /// Additive term in the preconditioner denominator: `λ·mean(F)`, or `λ`
    /// when the whole diagonal is zero.
    pub fn damping_term(&self) -> f64 {
        let m = self.mean();
        if m > 0.0 {
            self.damping * m
        } else {
            self.damping
        }
    }

    /// Combines two estimates over disjoint draw sets.
    pub fn merge(&self, other: &FisherDiagonal) -> Result<FisherDiagonal> {
        if self.layout != other.layout {
            return Err(Error::LayoutMismatch("cannot merge Fisher estimates with different layouts".into()));
        }
        let sums = self.sums.iter().zip(&other.sums).map(|(a, b)| a + b).collect();
        Ok(FisherDiagonal {
            sums,
            layout: self.layout.clone(),
            sample_count: self.sample_count + other.sample_count,
            damping: self.damping,
            theta_hash: self.theta_hash.clone(),
        })
    }

    pub fn write(&self, path: &Path, provenance: serde_json::Value) -> Result<()> {
        let header = FisherHeader {
            layout: self.layout.segments().to_vec(),
            sample_count: self.sample_count,
            damping: self.damping,
            theta_hash: self.theta_hash.clone(),
            provenance,
        };
        write_atomic(path, &encode(FISHER_MAGIC, &header, &Payload::F64(self.sums.clone()))?)
    }

    pub fn read(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (h, payload): (FisherHeader, _) = decode(FISHER_MAGIC, &read_file(path)?, path)?;
        let Payload::F64(sums) = payload else {
            return Err(Error::format(path, "Fisher payload must be f64"));
        };
        let layout = Layout::from_segments(h.layout).map_err(|e| Error::format(path, e.to_string()))?;
        if layout.total() != sums.len() {
            return Err(Error::format(path, "Fisher payload does not match layout"));
        }
        Ok((Self::from_sums(sums, layout, h.sample_count, h.damping, h.theta_hash)?, h.provenance))
    }
}

#[derive(Serialize, Deserialize)]
struct FisherHeader {
    layout: Vec<Segment>,
    sample_count: u64,
    damping: f64,
    theta_hash: String,
    provenance: serde_json::Value,
}

/// Sums chunk partials with a fixed binary tree, splitting at the largest
/// power of two below the length. Halves made of 2^k whole chunks therefore
/// combine to exactly the full-range sum.
fn tree_sum(parts: &[Vec<f64>]) -> Vec<f64> {
    match parts.len() {
        0 => Vec::new(),
        1 => parts[0].clone(),
        n => {
            let split = if n.is_power_of_two() { n / 2 } else { 1 << (usize::BITS - 1 - n.leading_zeros()) };
            let (l, r) = (tree_sum(&parts[..split]), tree_sum(&parts[split..]));
            l.iter().zip(&r).map(|(a, b)| a + b).collect()
        }
    }
}

/// Estimates the diagonal from draws `start .. start + count`.
pub fn estimate_range<S: DrawSource>(source: &S, seed: u64, start: u64, count: u64, damping: f64, theta_hash: String) -> Result<FisherDiagonal> {
    if count == 0 {
        return Err(Error::Validation("Fisher needs at least one draw".into()));
    }
    let end = start + count;
    let mut ranges = Vec::new();
    let mut lo = start;
    while lo < end {
        let hi = ((lo / CHUNK + 1) * CHUNK).min(end);
        ranges.push(lo..hi);
        lo = hi;
    }
    let parts: Vec<Vec<f64>> = ranges
        .into_par_iter()
        .map(|r| source.sum_sq(seed, r))
        .collect::<Result<_>>()?;
    FisherDiagonal::from_sums(tree_sum(&parts), source.layout(), count, damping, theta_hash)
}

/// Fisher draws for the diffusion model: uniform example (from the id-sorted
/// dataset), uniform timestep, keyed noise, optional flip.
pub struct DiffusionDraws<P: NoisePredictor<f64>> {
    pub evaluator: Evaluator<P>,
    examples: Vec<Example>,
    flip: bool,
}

impl<P: NoisePredictor<f64>> DiffusionDraws<P> {
    pub fn new(evaluator: Evaluator<P>, ds: &Dataset, flip: bool) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut examples = ds.examples.clone();
        examples.sort_by_key(|e| e.id);
        Ok(Self {
            evaluator,
            examples,
            flip,
        })
    }

    fn row(&self, seed: u64, d: u64) -> (Example, usize, Vec<f64>) {
        let steps = self.evaluator.cfg.steps as u64;
        let idx = rng::below(seed, Stream::FisherDraw, d, 0, self.examples.len() as u64) as usize;
        let t = 1 + rng::below(seed, Stream::FisherDraw, d, 1, steps) as usize;
        let eps = rng::normal_vec(seed, Stream::FisherDraw, d, 2, self.evaluator.cfg.pixels());
        let e = &self.examples[idx];
        let e = if self.flip && rng::unit(seed, Stream::FisherDraw, d, 3) < 0.5 {
            e.flip()
        } else {
            e.clone()
        };
        (e, t, eps)
    }
}

impl<P: NoisePredictor<f64>> DrawSource for DiffusionDraws<P> {
    fn layout(&self) -> Layout {
        self.evaluator.predictor.layout()
    }

    fn sum_sq(&self, seed: u64, draws: Range<u64>) -> Result<Vec<f64>> {
        let items: Vec<(Example, usize, Vec<f64>)> = draws.clone().map(|d| self.row(seed, d)).collect();
        let rows: Vec<LossRow<'_>> = items
            .iter()
            .map(|(e, t, eps)| LossRow {
                x0: &e.x,
                class: e.class,
                t: *t,
                eps: eps.clone(),
                weight: 1.0,
            })
            .collect();
        let ev = &self.evaluator;
        let out = eval_rows(&ev.predictor, &ev.schedule, &rows, None, Some(Reduction::SumOfSquares));
        let sums = out.grad.expect("gradient requested");
        if sums.iter().all(|v| v.is_finite()) {
            return Ok(sums);
        }
        // locate the offending draw
        for (d, row) in draws.zip(rows) {
            let one = eval_rows(&ev.predictor, &ev.schedule, &[row], None, Some(Reduction::SumOfSquares));
            if one.grad.expect("gradient requested").iter().any(|v| !v.is_finite()) {
                return Err(Error::FisherDraw { draw: d });
            }
        }
        Err(Error::FisherDraw { draw: u64::MAX })
    }
}

/// Diagonal Fisher of the diffusion training loss at `theta0`.
pub fn estimate_fisher(ds: &Dataset, theta0: &ParamVector, cfg: &FisherConfig, dcfg: &DiffusionConfig) -> Result<FisherDiagonal> {
    if cfg.draws == 0 {
        return Err(Error::Validation("draws must be >= 1".into()));
    }
    let draws = DiffusionDraws::new(Evaluator::new(theta0, dcfg)?, ds, cfg.flip)?;
    estimate_range(&draws, cfg.seed, 0, cfg.draws, cfg.damping, theta0.content_hash())
}

/// `out[i] = g[i] / (F[i] + λ·mean(F))` inside `mask`, 0 elsewhere.
pub fn precondition(g: &Gradient, fisher: &FisherDiagonal, mask: &SegmentSet) -> Result<Gradient> {
    if g.layout != fisher.layout {
        return Err(Error::LayoutMismatch("gradient and Fisher layouts differ".into()));
    }
    let keep = g.layout.mask_for(mask)?;
    let damp = fisher.damping_term();
    let n = fisher.sample_count as f64;
    let values = g
        .values
        .iter()
        .zip(&fisher.sums)
        .zip(&keep)
        .map(|((gi, si), &k)| if k { gi / (si / n + damp) } else { 0.0 })
        .collect();
    Ok(Gradient {
        values,
        layout: g.layout.clone(),
    })
}

/// Closed-form check model: scalar `y = a·x + N(0, σ²)` with `x ~ N(0, s²)`.
/// The per-draw gradient of the negative log-likelihood at the true `a` is
/// `−(y − a x)·x / σ²`, whose second moment is `E[x²]/σ²`.
#[derive(Debug, Clone, Copy)]
pub struct LinearGaussian {
    pub slope: f64,
    pub x_std: f64,
    pub noise_std: f64,
}

impl LinearGaussian {
    pub fn closed_form(&self) -> f64 {
        self.x_std * self.x_std / (self.noise_std * self.noise_std)
    }
}

impl DrawSource for LinearGaussian {
    fn layout(&self) -> Layout {
        Layout::from_sizes([("slope", 1)])
    }

    fn sum_sq(&self, seed: u64, draws: Range<u64>) -> Result<Vec<f64>> {
        let var = self.noise_std * self.noise_std;
        let mut acc = 0.0;
        for d in draws {
            let z = rng::normal_vec(seed, Stream::FisherDraw, d, 0, 2);
            let x = self.x_std * z[0];
            let y = self.slope * x + self.noise_std * z[1];
            let g = -(y - self.slope * x) * x / var;
            acc += g * g;
        }
        Ok(vec![acc])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::model::{COND_KEY, COND_VALUE};
    use proptest::prelude::*;

    #[test]
    fn tree_sum_halves_combine_exactly() {
        let parts: Vec<Vec<f64>> = (0..8).map(|i| vec![0.1 * i as f64 + 1e-9, 1.0 / (i + 1) as f64]).collect();
        let full = tree_sum(&parts);
        let (a, b) = (tree_sum(&parts[..4]), tree_sum(&parts[4..]));
        let merged: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        assert_eq!(full, merged);
    }

    #[test]
    fn precondition_identity_and_mask() {
        let layout = Layout::from_sizes([("a", 2), (COND_KEY, 2), (COND_VALUE, 1)]);
        let g = Gradient {
            values: vec![1.0, -2.0, 3.0, 0.5, -0.25],
            layout: layout.clone(),
        };
        let f = FisherDiagonal::constant(layout.clone(), 1.0, 1e-300);
        let all = precondition(&g, &f, &SegmentSet::All).unwrap();
        for (a, b) in all.values.iter().zip(&g.values) {
            assert!((a - b).abs() < 1e-12);
        }
        let masked = precondition(&g, &f, &SegmentSet::conditioning()).unwrap();
        assert_eq!(&masked.values[..2], &[0.0, 0.0]);
        assert!(masked.values[2..].iter().all(|v| *v != 0.0));
        assert!(matches!(
            precondition(&g, &f, &SegmentSet::named(["missing"])),
            Err(Error::UnknownSegment(_))
        ));
    }

    #[test]
    fn zero_fisher_stays_finite() {
        let layout = Layout::from_sizes([("a", 3)]);
        let f = FisherDiagonal::constant(layout.clone(), 0.0, DEFAULT_DAMPING);
        let g = Gradient {
            values: vec![1.0, -1.0, 1e3],
            layout,
        };
        let out = precondition(&g, &f, &SegmentSet::All).unwrap();
        assert!(out.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rejects_bad_diagonals() {
        let layout = Layout::from_sizes([("a", 2)]);
        assert!(FisherDiagonal::from_sums(vec![1.0, -1.0], layout.clone(), 1, 1e-8, String::new()).is_err());
        assert!(FisherDiagonal::from_sums(vec![1.0, 1.0], layout.clone(), 0, 1e-8, String::new()).is_err());
        assert!(FisherDiagonal::from_sums(vec![1.0, 1.0], layout, 1, 0.0, String::new()).is_err());
    }

    proptest! {
        #[test]
        fn precondition_matches_scalar_loop(
            g in proptest::collection::vec(-10.0f64..10.0, 6),
            f in proptest::collection::vec(0.0f64..5.0, 6),
        ) {
            let layout = Layout::from_sizes([("a", 3), ("b", 3)]);
            let fd = FisherDiagonal::from_sums(f.clone(), layout.clone(), 1, 1e-3, String::new()).unwrap();
            let grad = Gradient { values: g.clone(), layout };
            let out = precondition(&grad, &fd, &SegmentSet::named(["b"])).unwrap();
            let mean = f.iter().sum::<f64>() / 6.0;
            let damp = if mean > 0.0 { 1e-3 * mean } else { 1e-3 };
            for i in 0..6 {
                let expect = if i >= 3 { g[i] / (f[i] + damp) } else { 0.0 };
                prop_assert!((out.values[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
                prop_assert!(out.values[i].is_finite());
            }
        }
    }
}
