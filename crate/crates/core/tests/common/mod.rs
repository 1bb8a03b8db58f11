//! Shared fixtures and independent scalar references.

#![allow(dead_code)]

use uattr::data::{generate, Dataset, DatasetSpec, Example};
use uattr::diffusion::{Architecture, DiffusionConfig, ParamVector};
use uattr::train::{train, TrainConfig};

pub fn small_spec(n: usize) -> DatasetSpec {
    DatasetSpec {
        n,
        ..DatasetSpec::default()
    }
}

/// A small dataset and a model trained on it for `epochs` epochs.
pub fn trained_small(n: usize, epochs: usize) -> (Dataset, DiffusionConfig, ParamVector) {
    let ds = generate(&small_spec(n)).unwrap();
    let dcfg = DiffusionConfig::default();
    let tcfg = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let theta = train(&ds, &tcfg, &dcfg).unwrap().checkpoint.params;
    (ds, dcfg, theta)
}

pub fn random_theta(seed: u64) -> (DiffusionConfig, ParamVector) {
    let dcfg = DiffusionConfig::default();
    let theta = Architecture::for_config(&dcfg).init(seed);
    (dcfg, theta)
}

pub fn wave_example(id: u64, class: usize, phase: f32) -> Example {
    Example::new(id, class, (0..64).map(|j| ((j as f32) * 0.37 + phase).sin() * 0.8).collect())
}

/// `ᾱ_t` as a running product of `1 − β_s` with `β` linear in `s`.
pub fn alpha_bar(t: usize, cfg: &DiffusionConfig) -> f64 {
    (1..=t)
        .map(|s| {
            let beta = cfg.beta_start + (s - 1) as f64 / (cfg.steps - 1) as f64 * (cfg.beta_end - cfg.beta_start);
            1.0 - beta
        })
        .product()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Denoiser forward pass written as plain loops over the flat parameters.
pub fn scalar_forward(theta: &ParamVector, x_t: &[f64], t: usize, class: usize) -> Vec<f64> {
    let seg = |name: &str| -> Vec<f64> { theta.segment(name).unwrap().iter().map(|&v| v as f64).collect() };
    let (w_in, b_in, emb_table) = (seg("in_weight"), seg("in_bias"), seg("class_embed"));
    let (w_key, w_value) = (seg("cond_key"), seg("cond_value"));
    let (w_h, b_h, w_out, b_out) = (seg("hidden_weight"), seg("hidden_bias"), seg("out_weight"), seg("out_bias"));
    let (pixels, tdim, cdim, hidden) = (x_t.len(), 32, 32, 128);

    let mut input = x_t.to_vec();
    let half = tdim / 2;
    let mut cosines = Vec::new();
    for k in 0..half {
        let freq = (-(1000f64).ln() * k as f64 / half as f64).exp();
        input.push((t as f64 * freq).sin());
        cosines.push((t as f64 * freq).cos());
    }
    input.extend(cosines);
    let e = &emb_table[class * cdim..(class + 1) * cdim];

    let mut h1 = vec![0.0; hidden];
    for i in 0..hidden {
        let mut a = b_in[i];
        for j in 0..input.len() {
            a += w_in[i * input.len() + j] * input[j];
        }
        let (mut k, mut v) = (0.0, 0.0);
        for j in 0..cdim {
            k += w_key[i * cdim + j] * e[j];
            v += w_value[i * cdim + j] * e[j];
        }
        h1[i] = silu(a * (1.0 + k) + v);
    }
    let mut h2 = vec![0.0; hidden];
    for i in 0..hidden {
        let mut a = b_h[i];
        for j in 0..hidden {
            a += w_h[i * hidden + j] * h1[j];
        }
        h2[i] = silu(a);
    }
    (0..pixels)
        .map(|p| b_out[p] + (0..hidden).map(|j| w_out[p * hidden + j] * h2[j]).sum::<f64>())
        .collect()
}

/// ε-MSE at one timestep through [`scalar_forward`].
pub fn scalar_loss(theta: &ParamVector, z: &Example, t: usize, eps: &[f64], cfg: &DiffusionConfig) -> f64 {
    let ab = alpha_bar(t, cfg);
    let x_t: Vec<f64> = z.x.iter().zip(eps).map(|(&x, e)| ab.sqrt() * x as f64 + (1.0 - ab).sqrt() * e).collect();
    let out = scalar_forward(theta, &x_t, t, z.class);
    out.iter().zip(eps).map(|(o, e)| (o - e) * (o - e)).sum::<f64>() / eps.len() as f64
}

pub fn mse(a: &[f64], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - *y as f64).powi(2)).sum::<f64>() / a.len() as f64
}
