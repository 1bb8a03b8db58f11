//! Small convolutional classifier whose features measure generation deviation.
//!
//! conv 3×3 (C→8, stride 1) → relu → conv 3×3 (8→16, stride 2) → relu →
//! linear → class logits. The flattened second activation is the embedding.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::container::{decode, encode, read_file, write_atomic, Payload};
use crate::data::Dataset;
use crate::diffusion::ImageShape;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub const ENCODER_MAGIC: &[u8; 8] = b"UATTRENC";

const C1: usize = 8;
const C2: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Geometry {
    shape: ImageShape,
    classes: usize,
}

impl Geometry {
    fn h2(&self) -> usize {
        self.shape.height.div_ceil(2)
    }

    fn w2(&self) -> usize {
        self.shape.width.div_ceil(2)
    }

    fn embed_dim(&self) -> usize {
        C2 * self.h2() * self.w2()
    }
}

/// Trained encoder weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    geo: Geometry,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    w3: Array2<f64>,
    b3: Array1<f64>,
}

/// 3×3, pad 1 patches of an NHWC activation stored as `(n·h·w, c)`.
fn im2col(x: &Array2<f64>, n: usize, h: usize, w: usize, stride: usize) -> (Array2<f64>, usize, usize) {
    let c = x.ncols();
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut cols = Array2::zeros((n * oh * ow, c * 9));
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (b * oh + oy) * ow + ox;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * stride + ky) as isize - 1;
                        let ix = (ox * stride + kx) as isize - 1;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        let src = (b * h + iy as usize) * w + ix as usize;
                        for ch in 0..c {
                            cols[[row, (ky * 3 + kx) * c + ch]] = x[[src, ch]];
                        }
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

/// Adjoint of [`im2col`].
fn col2im(cols: &Array2<f64>, n: usize, h: usize, w: usize, c: usize, stride: usize) -> Array2<f64> {
    let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
    let mut x = Array2::zeros((n * h * w, c));
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (b * oh + oy) * ow + ox;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (oy * stride + ky) as isize - 1;
                        let ix = (ox * stride + kx) as isize - 1;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        let dst = (b * h + iy as usize) * w + ix as usize;
                        for ch in 0..c {
                            x[[dst, ch]] += cols[[row, (ky * 3 + kx) * c + ch]];
                        }
                    }
                }
            }
        }
    }
    x
}

struct Forward {
    cols1: Array2<f64>,
    a1: Array2<f64>,
    cols2: Array2<f64>,
    a2: Array2<f64>,
    /// `(n, embed_dim)` view of `a2`.
    emb: Array2<f64>,
    logits: Array2<f64>,
}

struct Grads {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    w3: Array2<f64>,
    b3: Array1<f64>,
}

impl Encoder {
    pub fn init(shape: ImageShape, classes: usize, seed: u64) -> Self {
        let geo = Geometry { shape, classes };
        let draw = |tag: u64, rows: usize, cols: usize| {
            let scale = (2.0 / cols as f64).sqrt();
            let v = rng::normal_vec(seed, Stream::Encoder, tag, 0, rows * cols);
            Array2::from_shape_vec((rows, cols), v.into_iter().map(|x| x * scale).collect()).expect("shape")
        };
        Self {
            w1: draw(1, C1, 9 * shape.channels),
            b1: Array1::zeros(C1),
            w2: draw(2, C2, 9 * C1),
            b2: Array1::zeros(C2),
            w3: draw(3, classes, geo.embed_dim()),
            b3: Array1::zeros(classes),
            geo,
        }
    }

    pub fn image_shape(&self) -> ImageShape {
        self.geo.shape
    }

    fn to_nhwc(&self, images: &[&[f64]]) -> Array2<f64> {
        let ImageShape { channels, height, width } = self.geo.shape;
        let mut x = Array2::zeros((images.len() * height * width, channels));
        for (b, img) in images.iter().enumerate() {
            for c in 0..channels {
                for y in 0..height {
                    for w in 0..width {
                        x[[(b * height + y) * width + w, c]] = img[(c * height + y) * width + w];
                    }
                }
            }
        }
        x
    }

    fn forward(&self, images: &[&[f64]]) -> Forward {
        let n = images.len();
        let ImageShape { height, width, .. } = self.geo.shape;
        let x = self.to_nhwc(images);
        let (cols1, _, _) = im2col(&x, n, height, width, 1);
        let a1 = (cols1.dot(&self.w1.t()) + &self.b1).mapv(|v| v.max(0.0));
        let (cols2, oh, ow) = im2col(&a1, n, height, width, 2);
        let a2 = (cols2.dot(&self.w2.t()) + &self.b2).mapv(|v| v.max(0.0));
        let emb = a2
            .clone()
            .into_shape_with_order((n, oh * ow * C2))
            .expect("contiguous activation");
        let logits = emb.dot(&self.w3.t()) + &self.b3;
        Forward {
            cols1,
            a1,
            cols2,
            a2,
            emb,
            logits,
        }
    }

    /// Mean cross-entropy and its gradient.
    fn loss_grad(&self, images: &[&[f64]], labels: &[usize]) -> (f64, Grads) {
        let n = images.len();
        let ImageShape { height, width, .. } = self.geo.shape;
        let f = self.forward(images);
        let mut d_logits = f.logits.clone();
        let mut loss = 0.0;
        for (mut row, &y) in d_logits.axis_iter_mut(Axis(0)).zip(labels) {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - m).exp());
            let z = row.sum();
            row.mapv_inplace(|v| v / z);
            loss -= row[y].ln();
            row[y] -= 1.0;
        }
        d_logits /= n as f64;
        let w3 = d_logits.t().dot(&f.emb);
        let b3 = d_logits.sum_axis(Axis(0));
        let d_emb = d_logits.dot(&self.w3);
        let mut d_a2 = d_emb.into_shape_with_order(f.a2.raw_dim()).expect("contiguous");
        d_a2.zip_mut_with(&f.a2, |d, &a| if a <= 0.0 { *d = 0.0 });
        let w2 = d_a2.t().dot(&f.cols2);
        let b2 = d_a2.sum_axis(Axis(0));
        let d_cols2 = d_a2.dot(&self.w2);
        let mut d_a1 = col2im(&d_cols2, n, height, width, C1, 2);
        d_a1.zip_mut_with(&f.a1, |d, &a| if a <= 0.0 { *d = 0.0 });
        let w1 = d_a1.t().dot(&f.cols1);
        let b1 = d_a1.sum_axis(Axis(0));
        (loss / n as f64, Grads { w1, b1, w2, b2, w3, b3 })
    }

    /// Trains a classifier on `ds` with keyed init and shuffling.
    pub fn train(ds: &Dataset, cfg: &EncoderConfig) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
            return Err(Error::Validation("invalid encoder config".into()));
        }
        let mut enc = Self::init(ds.image_shape(), ds.spec.num_classes, cfg.seed);
        let images: Vec<Vec<f64>> = ds.examples.iter().map(|e| e.x.iter().map(|&v| v as f64).collect()).collect();
        let mut vel: Option<Grads> = None;
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..images.len()).collect();
            order.sort_by_key(|&i| rng::mix(cfg.seed, Stream::Encoder, 1000 + epoch as u64, i as u64));
            for batch in order.chunks(cfg.batch_size) {
                let xs: Vec<&[f64]> = batch.iter().map(|&i| images[i].as_slice()).collect();
                let ys: Vec<usize> = batch.iter().map(|&i| ds.examples[i].class).collect();
                let (loss, g) = enc.loss_grad(&xs, &ys);
                if !loss.is_finite() {
                    return Err(Error::Numeric {
                        context: "encoder training".into(),
                        segment: "encoder".into(),
                    });
                }
                let mu = cfg.momentum;
                let v = match vel.take() {
                    None => g,
                    Some(v) => Grads {
                        w1: v.w1 * mu + &g.w1,
                        b1: v.b1 * mu + &g.b1,
                        w2: v.w2 * mu + &g.w2,
                        b2: v.b2 * mu + &g.b2,
                        w3: v.w3 * mu + &g.w3,
                        b3: v.b3 * mu + &g.b3,
                    },
                };
                let lr = cfg.learning_rate;
                enc.w1.scaled_add(-lr, &v.w1);
                enc.b1.scaled_add(-lr, &v.b1);
                enc.w2.scaled_add(-lr, &v.w2);
                enc.b2.scaled_add(-lr, &v.b2);
                enc.w3.scaled_add(-lr, &v.w3);
                enc.b3.scaled_add(-lr, &v.b3);
                vel = Some(v);
            }
        }
        Ok(enc)
    }

    pub fn embed(&self, image: &[f64]) -> Vec<f64> {
        self.forward(&[image]).emb.row(0).to_vec()
    }

    pub fn predict(&self, image: &[f64]) -> usize {
        let f = self.forward(&[image]);
        let row = f.logits.row(0);
        (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap_or(0)
    }

    /// `1 − cos` between embeddings; 0 when both are zero, 1 when one is.
    pub fn feature_distance(&self, a: &[f64], b: &[f64]) -> f64 {
        let (ea, eb) = (self.embed(a), self.embed(b));
        let dot: f64 = ea.iter().zip(&eb).map(|(x, y)| x * y).sum();
        let na = ea.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = eb.iter().map(|x| x * x).sum::<f64>().sqrt();
        match (na > 0.0, nb > 0.0) {
            (true, true) => (1.0 - dot / (na * nb)).max(0.0),
            (false, false) => 0.0,
            _ => 1.0,
        }
    }

    fn flat(&self) -> Vec<f64> {
        [
            self.w1.as_slice(),
            self.b1.as_slice(),
            self.w2.as_slice(),
            self.b2.as_slice(),
            self.w3.as_slice(),
            self.b3.as_slice(),
        ]
        .into_iter()
        .flat_map(|s| s.expect("standard layout").iter().copied())
        .collect()
    }

    pub fn write(&self, path: &std::path::Path, provenance: serde_json::Value) -> Result<()> {
        let header = serde_json::json!({ "geometry": self.geo, "provenance": provenance });
        write_atomic(path, &encode(ENCODER_MAGIC, &header, &Payload::F64(self.flat()))?)
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let (header, payload): (serde_json::Value, _) = decode(ENCODER_MAGIC, &read_file(path)?, path)?;
        let geo: Geometry = serde_json::from_value(header["geometry"].clone())?;
        let Payload::F64(v) = payload else {
            return Err(Error::format(path, "encoder payload must be f64"));
        };
        let mut enc = Self::init(geo.shape, geo.classes, 0);
        if v.len() != enc.flat().len() {
            return Err(Error::format(path, "encoder payload has the wrong length"));
        }
        let mut off = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&v[off..off + dst.len()]);
            off += dst.len();
        };
        take(enc.w1.as_slice_mut().expect("standard layout"));
        take(enc.b1.as_slice_mut().expect("standard layout"));
        take(enc.w2.as_slice_mut().expect("standard layout"));
        take(enc.b2.as_slice_mut().expect("standard layout"));
        take(enc.w3.as_slice_mut().expect("standard layout"));
        take(enc.b3.as_slice_mut().expect("standard layout"));
        Ok(enc)
    }
}
