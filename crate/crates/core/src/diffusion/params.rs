use std::collections::BTreeSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing::ContentHasher;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Ordered list of named segments that tile a flat parameter array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<Segment>,
}

impl Layout {
    /// Builds a contiguous layout from `(name, len)` pairs.
    pub fn from_sizes<'a>(sizes: impl IntoIterator<Item = (&'a str, usize)>) -> Self {
        let mut offset = 0;
        let segments = sizes
            .into_iter()
            .map(|(name, len)| {
                let s = Segment {
                    name: name.to_string(),
                    offset,
                    len,
                };
                offset += len;
                s
            })
            .collect();
        Self { segments }
    }

    /// Accepts an externally supplied segment list after checking it tiles
    /// `[0, total)` exactly with unique names.
    pub fn from_segments(segments: Vec<Segment>) -> Result<Self> {
        let mut next = 0;
        let mut names = BTreeSet::new();
        for s in &segments {
            if s.offset != next {
                return Err(Error::LayoutMismatch(format!(
                    "segment `{}` starts at {} but previous segment ended at {}",
                    s.name, s.offset, next
                )));
            }
            if !names.insert(s.name.as_str()) {
                return Err(Error::LayoutMismatch(format!("duplicate segment `{}`", s.name)));
            }
            next += s.len;
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total(&self) -> usize {
        self.segments.last().map_or(0, |s| s.offset + s.len)
    }

    pub fn get(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn range(&self, name: &str) -> Result<Range<usize>> {
        self.get(name)
            .map(Segment::range)
            .ok_or_else(|| Error::UnknownSegment(name.to_string()))
    }

    /// Name of the segment holding flat index `i`.
    pub fn segment_of(&self, i: usize) -> &str {
        self.segments
            .iter()
            .find(|s| s.range().contains(&i))
            .map_or("<out of range>", |s| s.name.as_str())
    }

    /// Per-index membership for a set of segment names. Unknown names are an error.
    pub fn mask_for(&self, names: &SegmentSet) -> Result<Vec<bool>> {
        let mut mask = vec![false; self.total()];
        match names {
            SegmentSet::All => mask.iter_mut().for_each(|m| *m = true),
            SegmentSet::Named(set) => {
                for name in set {
                    for i in self.range(name)? {
                        mask[i] = true;
                    }
                }
            }
        }
        Ok(mask)
    }

    /// Flat index ranges selected by `names`, in layout order.
    pub fn ranges_for(&self, names: &SegmentSet) -> Result<Vec<Range<usize>>> {
        match names {
            SegmentSet::All => Ok(self.segments.iter().map(Segment::range).collect()),
            SegmentSet::Named(set) => {
                for n in set {
                    self.range(n)?;
                }
                Ok(self
                    .segments
                    .iter()
                    .filter(|s| set.contains(&s.name))
                    .map(Segment::range)
                    .collect())
            }
        }
    }
}

/// A selection of parameter segments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SegmentSet {
    #[serde(with = "all_tag")]
    All,
    Named(BTreeSet<String>),
}

mod all_tag {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("all")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s == "all" {
            Ok(())
        } else {
            Err(serde::de::Error::custom("expected \"all\" or a list of segment names"))
        }
    }
}

impl SegmentSet {
    pub fn named<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        SegmentSet::Named(names.into_iter().map(Into::into).collect())
    }

    /// The conditioning projections, the default unlearning target.
    pub fn conditioning() -> Self {
        Self::named([super::model::COND_KEY, super::model::COND_VALUE])
    }
}

/// Flat f32 parameter vector with a named segment layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f32>,
    layout: Layout,
}

impl ParamVector {
    pub fn new(values: Vec<f32>, layout: Layout) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(Error::LayoutMismatch(format!(
                "{} values for a layout of {}",
                values.len(),
                layout.total()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Layout) -> Self {
        Self {
            values: vec![0.0; layout.total()],
            layout,
        }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Result<&[f32]> {
        Ok(&self.values[self.layout.range(name)?])
    }

    pub fn segment_mut(&mut self, name: &str) -> Result<&mut [f32]> {
        let r = self.layout.range(name)?;
        Ok(&mut self.values[r])
    }

    pub fn same_layout(&self, other: &Layout) -> Result<()> {
        if &self.layout != other {
            return Err(Error::LayoutMismatch("parameter layouts differ".into()));
        }
        Ok(())
    }

    /// First non-finite value, reported by segment name.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                context: context.to_string(),
                segment: self.layout.segment_of(i).to_string(),
            });
        }
        Ok(())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn l2_distance(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| {
                let d = a as f64 - b as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn content_hash(&self) -> String {
        let mut h = ContentHasher::new();
        for s in self.layout.segments() {
            h.bytes(s.name.as_bytes()).u64(s.offset as u64).u64(s.len as u64);
        }
        h.f32s(&self.values);
        h.finish()
    }
}

/// A gradient or other f64 quantity laid out like a [`ParamVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub values: Vec<f64>,
    pub layout: Layout,
}

impl Gradient {
    pub fn zeros(layout: Layout) -> Self {
        Self {
            values: vec![0.0; layout.total()],
            layout,
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Gradient) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                context: context.to_string(),
                segment: self.layout.segment_of(i).to_string(),
            });
        }
        Ok(())
    }

    pub fn segment(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.values[self.layout.range(name)?])
    }
}
