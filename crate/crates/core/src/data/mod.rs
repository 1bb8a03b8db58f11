//! Conditioned image datasets with planted influence structure.

mod glyphs;
pub mod io;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::diffusion::schedule::ImageShape;
use crate::error::{Error, Result};
use crate::hashing::ContentHasher;
use crate::rng::{self, Stream};

/// An (image, condition) pair. Pixel values lie in [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: u64,
    pub class: usize,
    pub shape: ImageShape,
    pub x: Vec<f32>,
    #[serde(default)]
    pub flipped: bool,
}

impl Example {
    /// Example with the default 1×8×8 shape.
    pub fn new(id: u64, class: usize, x: Vec<f32>) -> Self {
        Self::with_shape(id, class, ImageShape::default(), x)
    }

    pub fn with_shape(id: u64, class: usize, shape: ImageShape, x: Vec<f32>) -> Self {
        Self {
            id,
            class,
            shape,
            x,
            flipped: false,
        }
    }

    /// Mirror along the width axis. The id is kept; `flipped` toggles so
    /// that flipping twice restores the original.
    pub fn flip(&self) -> Example {
        let ImageShape { channels, height, width } = self.shape;
        let mut x = vec![0.0; self.x.len()];
        for c in 0..channels {
            for y in 0..height {
                let row = (c * height + y) * width;
                for w in 0..width {
                    x[row + w] = self.x[row + width - 1 - w];
                }
            }
        }
        Example {
            id: self.id,
            class: self.class,
            shape: self.shape,
            x,
            flipped: !self.flipped,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.x.len() != self.shape.numel() {
            return Err(Error::Validation(format!("example {} has wrong pixel count", self.id)));
        }
        if self.class >= num_classes {
            return Err(Error::Validation(format!("example {} has invalid class {}", self.id, self.class)));
        }
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("example {} has non-finite pixels", self.id)));
        }
        Ok(())
    }

    pub fn content_hash(&self) -> String {
        let mut h = ContentHasher::new();
        h.u64(self.class as u64).u64(self.flipped as u64).f32s(&self.x);
        h.finish()
    }
}

/// A cluster of copies of one base sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedGroup {
    pub group_id: u64,
    pub class: usize,
    pub count: usize,
    /// Standard deviation of the Gaussian pixel jitter applied to each copy.
    pub jitter_std: f64,
    /// Glyph kind of the base sample; the class's own glyph when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub glyph: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub n: usize,
    pub num_classes: usize,
    pub image_shape: ImageShape,
    pub planted_groups: Vec<PlantedGroup>,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n: 2000,
            num_classes: 4,
            image_shape: ImageShape::default(),
            planted_groups: default_groups(4),
            seed: 0,
        }
    }
}

/// Per class, an exact-duplicate group drawn with a foreign glyph, plus a
/// jittered cluster of the same glyph that acts as a distractor.
pub fn default_groups(num_classes: usize) -> Vec<PlantedGroup> {
    let mut g = Vec::new();
    for c in 0..num_classes {
        let glyph = Some((c + 4) % 8);
        g.push(PlantedGroup {
            group_id: g.len() as u64,
            class: c,
            count: 10,
            jitter_std: 0.0,
            glyph,
        });
        g.push(PlantedGroup {
            group_id: g.len() as u64,
            class: c,
            count: 10,
            jitter_std: 0.2,
            glyph,
        });
    }
    g
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Validation("num_classes must be >= 1".into()));
        }
        if self.image_shape.numel() == 0 {
            return Err(Error::Validation("image shape has no pixels".into()));
        }
        let mut ids = BTreeSet::new();
        let mut per_class = vec![0usize; self.num_classes];
        for g in &self.planted_groups {
            if !ids.insert(g.group_id) {
                return Err(Error::Validation(format!("duplicate group id {}", g.group_id)));
            }
            if g.class >= self.num_classes {
                return Err(Error::Validation(format!("group {} has invalid class {}", g.group_id, g.class)));
            }
            if !(g.jitter_std >= 0.0 && g.jitter_std.is_finite()) {
                return Err(Error::Validation(format!("group {} has invalid jitter", g.group_id)));
            }
            per_class[g.class] += g.count;
        }
        let total: usize = per_class.iter().sum();
        if total > self.n {
            return Err(Error::Validation(format!(
                "planted groups need {total} examples but n = {}",
                self.n
            )));
        }
        for (c, &need) in per_class.iter().enumerate() {
            let available = class_ids(self.n, self.num_classes, c).count();
            if need > available {
                return Err(Error::Validation(format!(
                    "class {c} has {available} slots but groups need {need}"
                )));
            }
        }
        Ok(())
    }
}

/// Ids assigned to class `c` by round-robin.
fn class_ids(n: usize, num_classes: usize, c: usize) -> impl Iterator<Item = u64> {
    (c..n).step_by(num_classes).map(|i| i as u64)
}

/// An ordered set of examples with stable ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub spec: DatasetSpec,
    pub group_of: BTreeMap<u64, u64>,
    /// Original file names for ingested datasets; empty for synthetic ones.
    #[serde(default)]
    pub sources: BTreeMap<u64, String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.examples.iter().map(|e| e.id)
    }

    pub fn get(&self, id: u64) -> Option<&Example> {
        self.examples.binary_search_by_key(&id, |e| e.id).ok().map(|i| &self.examples[i])
    }

    /// Size of the original id universe `0..n`, stable under [`leave_out`].
    pub fn universe(&self) -> usize {
        self.spec.n
    }

    pub fn group_members(&self, group_id: u64) -> Vec<u64> {
        self.group_of
            .iter()
            .filter(|(_, &g)| g == group_id)
            .map(|(&id, _)| id)
            .collect()
    }

    pub fn image_shape(&self) -> ImageShape {
        self.spec.image_shape
    }

    pub fn content_hash(&self) -> String {
        let mut h = ContentHasher::new();
        h.u64(self.examples.len() as u64);
        for e in &self.examples {
            h.u64(e.id).u64(e.class as u64).u64(e.flipped as u64).f32s(&e.x);
        }
        h.finish()
    }

    /// Ids from the original universe that are no longer present.
    pub fn removed_ids(&self) -> Vec<u64> {
        let live: BTreeSet<u64> = self.ids().collect();
        (0..self.spec.n as u64).filter(|i| !live.contains(i)).collect()
    }
}

/// Builds the synthetic dataset described by `spec`.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let shape = spec.image_shape;
    let mut examples: Vec<Example> = (0..spec.n)
        .map(|i| {
            let class = i % spec.num_classes;
            let x = glyphs::render(class, shape, spec.seed, i as u64);
            Example::with_shape(i as u64, class, shape, x)
        })
        .collect();

    let mut group_of = BTreeMap::new();
    let mut used = BTreeSet::new();
    for g in &spec.planted_groups {
        // keyed shuffle of the class's free slots
        let mut free: Vec<u64> = class_ids(spec.n, spec.num_classes, g.class)
            .filter(|i| !used.contains(i))
            .collect();
        free.sort_by_key(|&i| rng::mix(spec.seed, Stream::Dataset, g.group_id, i));
        let base = glyphs::render_kind(g.glyph, g.class, shape, spec.seed, (1u64 << 40) | g.group_id);
        for &id in free.iter().take(g.count) {
            used.insert(id);
            group_of.insert(id, g.group_id);
            let mut x = base.clone();
            if g.jitter_std > 0.0 {
                let noise = rng::normal_vec(spec.seed, Stream::Dataset, (2u64 << 40) | g.group_id, id, x.len());
                for (v, n) in x.iter_mut().zip(noise) {
                    *v = (*v as f64 + g.jitter_std * n).clamp(-1.0, 1.0) as f32;
                }
            }
            examples[id as usize].x = x;
        }
    }
    Ok(Dataset {
        examples,
        spec: spec.clone(),
        group_of,
        sources: BTreeMap::new(),
    })
}

/// The base image of a planted group, before jitter.
pub fn group_base_image(spec: &DatasetSpec, group_id: u64) -> Result<Example> {
    let g = spec
        .planted_groups
        .iter()
        .find(|g| g.group_id == group_id)
        .ok_or_else(|| Error::Validation(format!("no planted group {group_id}")))?;
    let x = glyphs::render_kind(g.glyph, g.class, spec.image_shape, spec.seed, (1u64 << 40) | g.group_id);
    Ok(Example::with_shape(u64::MAX - group_id, g.class, spec.image_shape, x))
}

/// `ds` without `removed`; surviving ids are kept as they are.
pub fn leave_out(ds: &Dataset, removed: &BTreeSet<u64>) -> Result<Dataset> {
    for &id in removed {
        if ds.get(id).is_none() {
            return Err(Error::UnknownId(id));
        }
    }
    let mut out = ds.clone();
    out.examples.retain(|e| !removed.contains(&e.id));
    out.group_of.retain(|id, _| !removed.contains(id));
    out.sources.retain(|id, _| !removed.contains(id));
    Ok(out)
}

pub fn flip(e: &Example) -> Example {
    e.flip()
}
