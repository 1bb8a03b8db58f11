//! Procedural class glyphs.

use crate::diffusion::schedule::ImageShape;
use crate::rng::{self, Stream};

const KINDS: usize = 8;

/// Whether point `(u, v)` (in 8-pixel units, relative to the glyph centre)
/// lies on glyph `kind`.
fn inside(kind: usize, u: f64, v: f64, thick: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    match kind {
        0 => v.abs() <= 0.6 * thick && u.abs() <= 2.6,
        1 => u.abs() <= 0.6 * thick && v.abs() <= 2.6,
        2 => (v.abs() <= 0.5 * thick && u.abs() <= 2.2) || (u.abs() <= 0.5 * thick && v.abs() <= 2.2),
        3 => r <= 2.0 + 0.3 * thick,
        4 => u.abs() <= 2.5 && v.abs() <= 2.5 && ((u + 10.0).floor() as i64 + (v + 10.0).floor() as i64) % 2 == 0,
        5 => (u - v).abs() <= 0.7 * thick && u.abs() <= 2.6 && v.abs() <= 2.6,
        6 => (r - 2.1).abs() <= 0.5 * thick,
        _ => {
            let m = u.abs().max(v.abs());
            (1.6..=2.6).contains(&m)
        }
    }
}

/// Renders one sample of `class`, with position and intensity drawn from
/// `(seed, key)`. Background is -1, glyph pixels take the sampled intensity.
pub(super) fn render(class: usize, shape: ImageShape, seed: u64, key: u64) -> Vec<f32> {
    render_kind(None, class, shape, seed, key)
}

/// As [`render`], with the glyph kind optionally overridden.
pub(super) fn render_kind(kind: Option<usize>, class: usize, shape: ImageShape, seed: u64, key: u64) -> Vec<f32> {
    let kind = kind.unwrap_or(class) % KINDS;
    let thick = 1.0 + 0.5 * (class / KINDS) as f64;
    let scale = shape.height.min(shape.width) as f64 / 8.0;
    let dx = (rng::unit(seed, Stream::Dataset, key, 1) * 3.0 - 1.5) * scale;
    let dy = (rng::unit(seed, Stream::Dataset, key, 2) * 3.0 - 1.5) * scale;
    let level = rng::unit(seed, Stream::Dataset, key, 3);
    let fg = (0.1 + 0.9 * level) as f32;
    let (cx, cy) = (shape.width as f64 / 2.0 + dx, shape.height as f64 / 2.0 + dy);
    let mut x = vec![-1.0f32; shape.numel()];
    for c in 0..shape.channels {
        for y in 0..shape.height {
            for w in 0..shape.width {
                let u = (w as f64 + 0.5 - cx) / scale;
                let v = (y as f64 + 0.5 - cy) / scale;
                if inside(kind, u, v, thick) {
                    x[(c * shape.height + y) * shape.width + w] = fg;
                }
            }
        }
    }
    x
}
