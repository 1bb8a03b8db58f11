//! MLP noise predictor with class conditioning.
//!
//! ```text
//! in      = [x_t ; sinusoidal(t)]
//! a1      = W_in · in + b_in
//! e       = class_embed[c]
//! u1      = a1 ⊙ (1 + W_key · e) + W_value · e
//! h1      = silu(u1)
//! h2      = silu(W_hidden · h1 + b_hidden)
//! eps_hat = W_out · h2 + b_out
//! ```
//!
//! `cond_key` gates hidden features per class and `cond_value` shifts them,
//! the same roles the key/value projections play in cross-attention.
//! Gradients are written out by hand; [`Weights::backward`] can return either
//! the batch gradient or the sum of per-row squared gradients (for Fisher).

use std::fmt::Debug;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;

use super::params::{Layout, ParamVector};
use super::schedule::DiffusionConfig;
use crate::rng::{keyed, Stream};

pub const IN_WEIGHT: &str = "in_weight";
pub const IN_BIAS: &str = "in_bias";
pub const CLASS_EMBED: &str = "class_embed";
pub const COND_KEY: &str = "cond_key";
pub const COND_VALUE: &str = "cond_value";
pub const HIDDEN_WEIGHT: &str = "hidden_weight";
pub const HIDDEN_BIAS: &str = "hidden_bias";
pub const OUT_WEIGHT: &str = "out_weight";
pub const OUT_BIAS: &str = "out_bias";

/// Scalar type the network can run in. Parameters are stored as f32;
/// evaluation paths promote them to f64.
pub trait Real:
    Float + LinalgScalar + ScalarOperand + Send + Sync + Debug + Default + 'static
{
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub pixels: usize,
    pub time_dim: usize,
    pub class_dim: usize,
    pub hidden: usize,
    pub num_classes: usize,
}

impl Architecture {
    pub fn for_config(cfg: &DiffusionConfig) -> Self {
        Self {
            pixels: cfg.pixels(),
            time_dim: 32,
            class_dim: 32,
            hidden: 128,
            num_classes: cfg.num_classes,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.pixels + self.time_dim
    }

    pub fn layout(&self) -> Layout {
        let h = self.hidden;
        Layout::from_sizes([
            (IN_WEIGHT, h * self.input_dim()),
            (IN_BIAS, h),
            (CLASS_EMBED, self.num_classes * self.class_dim),
            (COND_KEY, h * self.class_dim),
            (COND_VALUE, h * self.class_dim),
            (HIDDEN_WEIGHT, h * h),
            (HIDDEN_BIAS, h),
            (OUT_WEIGHT, self.pixels * h),
            (OUT_BIAS, self.pixels),
        ])
    }

    /// Seeded initialization: scaled normal weights, zero biases.
    pub fn init(&self, seed: u64) -> ParamVector {
        let layout = self.layout();
        let mut p = ParamVector::zeros(layout.clone());
        let scales = [
            (IN_WEIGHT, (1.0 / self.input_dim() as f64).sqrt()),
            (CLASS_EMBED, 1.0),
            (COND_KEY, 0.5 / (self.class_dim as f64).sqrt()),
            (COND_VALUE, 0.5 / (self.class_dim as f64).sqrt()),
            (HIDDEN_WEIGHT, (1.0 / self.hidden as f64).sqrt()),
            (OUT_WEIGHT, 0.5 / (self.hidden as f64).sqrt()),
        ];
        for (k, (name, scale)) in scales.iter().enumerate() {
            let mut rng = keyed(seed, Stream::Init, k as u64, 0);
            for v in p.segment_mut(name).expect("layout has segment") {
                let z: f64 = rng.sample(StandardNormal);
                *v = (z * scale) as f32;
            }
        }
        p
    }
}

/// Sinusoidal timestep features, `[sin(t·f_k) ; cos(t·f_k)]`.
pub fn time_embedding<F: Real>(t: usize, dim: usize, out: &mut [F]) {
    let half = dim / 2;
    for k in 0..half {
        let freq = (-(1000f64).ln() * k as f64 / half as f64).exp();
        let a = t as f64 * freq;
        out[k] = F::of(a.sin());
        out[half + k] = F::of(a.cos());
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu<F: Real>(u: F) -> F {
    let x = u.f64();
    F::of(x * sigmoid(x))
}

#[inline]
fn silu_grad<F: Real>(u: F) -> F {
    let x = u.f64();
    let s = sigmoid(x);
    F::of(s * (1.0 + x * (1.0 - s)))
}

/// Network weights unpacked into matrices.
#[derive(Debug, Clone)]
pub struct Weights<F: Real> {
    pub arch: Architecture,
    w_in: Array2<F>,
    b_in: Array1<F>,
    class_embed: Array2<F>,
    w_key: Array2<F>,
    w_value: Array2<F>,
    w_hidden: Array2<F>,
    b_hidden: Array1<F>,
    w_out: Array2<F>,
    b_out: Array1<F>,
}

/// Activations kept for the backward pass.
pub struct Cache<F: Real> {
    input: Array2<F>,
    a1: Array2<F>,
    emb: Array2<F>,
    key: Array2<F>,
    u1: Array2<F>,
    h1: Array2<F>,
    a2: Array2<F>,
    h2: Array2<F>,
    classes: Vec<usize>,
}

/// How [`Weights::backward`] reduces over batch rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Plain gradient of the summed row losses.
    Sum,
    /// Sum over rows of the elementwise square of each row's gradient.
    SumOfSquares,
}

impl<F: Real> Weights<F> {
    pub fn from_params(arch: Architecture, p: &ParamVector) -> Self {
        let get = |name: &str| -> Vec<F> {
            p.segment(name)
                .expect("layout has segment")
                .iter()
                .map(|&v| F::of(v as f64))
                .collect()
        };
        let m = |name: &str, r: usize, c: usize| {
            Array2::from_shape_vec((r, c), get(name)).expect("segment shape")
        };
        let h = arch.hidden;
        Self {
            arch,
            w_in: m(IN_WEIGHT, h, arch.input_dim()),
            b_in: Array1::from(get(IN_BIAS)),
            class_embed: m(CLASS_EMBED, arch.num_classes, arch.class_dim),
            w_key: m(COND_KEY, h, arch.class_dim),
            w_value: m(COND_VALUE, h, arch.class_dim),
            w_hidden: m(HIDDEN_WEIGHT, h, h),
            b_hidden: Array1::from(get(HIDDEN_BIAS)),
            w_out: m(OUT_WEIGHT, arch.pixels, h),
            b_out: Array1::from(get(OUT_BIAS)),
        }
    }

    /// Predicts noise for each row of `x_t`.
    pub fn forward(&self, x_t: ArrayView2<F>, timesteps: &[usize], classes: &[usize]) -> (Array2<F>, Cache<F>) {
        let a = self.arch;
        let b = x_t.nrows();
        debug_assert_eq!(timesteps.len(), b);
        debug_assert_eq!(classes.len(), b);

        let mut input = Array2::<F>::zeros((b, a.input_dim()));
        input.slice_mut(s![.., ..a.pixels]).assign(&x_t);
        let mut temb = vec![F::zero(); a.time_dim];
        for (r, &t) in timesteps.iter().enumerate() {
            time_embedding(t, a.time_dim, &mut temb);
            for (j, v) in temb.iter().enumerate() {
                input[[r, a.pixels + j]] = *v;
            }
        }

        let a1 = input.dot(&self.w_in.t()) + &self.b_in;
        let mut emb = Array2::<F>::zeros((b, a.class_dim));
        for (r, &c) in classes.iter().enumerate() {
            emb.row_mut(r).assign(&self.class_embed.row(c));
        }
        let key = emb.dot(&self.w_key.t());
        let value = emb.dot(&self.w_value.t());

        let mut u1 = a1.clone();
        ndarray::Zip::from(&mut u1)
            .and(&key)
            .and(&value)
            .for_each(|u, &k, &v| *u = *u * (F::one() + k) + v);
        let h1 = u1.mapv(silu);
        let a2 = h1.dot(&self.w_hidden.t()) + &self.b_hidden;
        let h2 = a2.mapv(silu);
        let out = h2.dot(&self.w_out.t()) + &self.b_out;

        let cache = Cache {
            input,
            a1,
            emb,
            key,
            u1,
            h1,
            a2,
            h2,
            classes: classes.to_vec(),
        };
        (out, cache)
    }

    /// Pulls `d_out` (dLoss/dOutput per row) back to the parameters, returning
    /// a flat vector in layout order.
    pub fn backward(&self, cache: &Cache<F>, d_out: &Array2<F>, reduction: Reduction) -> Vec<F> {
        let a = self.arch;
        let d_h2 = d_out.dot(&self.w_out);
        let mut d_a2 = d_h2;
        ndarray::Zip::from(&mut d_a2)
            .and(&cache.a2)
            .for_each(|d, &x| *d = *d * silu_grad(x));
        let d_h1 = d_a2.dot(&self.w_hidden);
        let mut d_u1 = d_h1;
        ndarray::Zip::from(&mut d_u1)
            .and(&cache.u1)
            .for_each(|d, &x| *d = *d * silu_grad(x));
        let mut d_a1 = d_u1.clone();
        ndarray::Zip::from(&mut d_a1)
            .and(&cache.key)
            .for_each(|d, &k| *d = *d * (F::one() + k));
        let mut d_key = d_u1.clone();
        ndarray::Zip::from(&mut d_key)
            .and(&cache.a1)
            .for_each(|d, &x| *d = *d * x);
        let d_value = &d_u1;
        let d_emb = d_key.dot(&self.w_key) + d_value.dot(&self.w_value);

        let layout = a.layout();
        let mut grad = vec![F::zero(); layout.total()];
        let mut put = |name: &str, m: Array2<F>| {
            let r = layout.range(name).expect("layout has segment");
            for (g, v) in grad[r].iter_mut().zip(m.iter()) {
                *g = *v;
            }
        };

        // weight gradient for `y = W x`: sum_r delta_r ⊗ x_r
        let outer = |delta: &Array2<F>, x: &Array2<F>| match reduction {
            Reduction::Sum => delta.t().dot(x),
            Reduction::SumOfSquares => delta.mapv(|v| v * v).t().dot(&x.mapv(|v| v * v)),
        };
        let bias = |delta: &Array2<F>| -> Array2<F> {
            let s = match reduction {
                Reduction::Sum => delta.sum_axis(Axis(0)),
                Reduction::SumOfSquares => delta.mapv(|v| v * v).sum_axis(Axis(0)),
            };
            s.insert_axis(Axis(0))
        };

        put(IN_WEIGHT, outer(&d_a1, &cache.input));
        put(IN_BIAS, bias(&d_a1));
        put(COND_KEY, outer(&d_key, &cache.emb));
        put(COND_VALUE, outer(d_value, &cache.emb));
        put(HIDDEN_WEIGHT, outer(&d_a2, &cache.h1));
        put(HIDDEN_BIAS, bias(&d_a2));
        put(OUT_WEIGHT, outer(d_out, &cache.h2));
        put(OUT_BIAS, bias(d_out));

        let mut d_table = Array2::<F>::zeros((a.num_classes, a.class_dim));
        for (r, &c) in cache.classes.iter().enumerate() {
            let mut row = d_table.row_mut(c);
            match reduction {
                Reduction::Sum => row.zip_mut_with(&d_emb.row(r), |t, &v| *t = *t + v),
                Reduction::SumOfSquares => row.zip_mut_with(&d_emb.row(r), |t, &v| *t = *t + v * v),
            }
        }
        put(CLASS_EMBED, d_table);
        grad
    }
}
