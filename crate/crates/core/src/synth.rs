//! Procedural dataset of small images with one labelled shape each, on a
//! smooth two-color background.

use djscc_autodiff::Tensor;
use rand::Rng as _;

use crate::data::ImageSet;
use crate::error::{CoreError, Result};
use crate::rng;

pub const CLASS_NAMES: [&str; 8] = [
    "disc", "square", "triangle", "ring", "cross", "hstripes", "vstripes", "diamond",
];

pub fn num_classes() -> usize {
    CLASS_NAMES.len()
}

fn inside(class: usize, dx: f64, dy: f64, r: f64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    match class {
        0 => dx * dx + dy * dy <= r * r,
        1 => ax <= r * 0.85 && ay <= r * 0.85,
        2 => dy <= r * 0.8 && dy >= -r && ax <= (dy + r) * 0.6,
        3 => {
            let d = (dx * dx + dy * dy).sqrt();
            d <= r && d >= r * 0.55
        }
        4 => (ax <= r * 0.3 && ay <= r) || (ay <= r * 0.3 && ax <= r),
        5 => ax <= r && ay <= r && ((dy + r) / (r * 0.5)).floor() as i64 % 2 == 0,
        6 => ax <= r && ay <= r && ((dx + r) / (r * 0.5)).floor() as i64 % 2 == 0,
        _ => ax + ay <= r,
    }
}

/// Renders image `index` of the stream keyed by `seed`; returns `(pixels in
/// [-1, 1] as [3, size, size], class)`.
pub fn render(seed: u64, index: u64, size: usize) -> (Vec<f32>, usize) {
    let mut r = rng::stream(seed, index, "synth");
    let class = r.gen_range(0..num_classes());
    let bg0: [f64; 3] = [r.gen_range(-1.0..0.2), r.gen_range(-1.0..0.2), r.gen_range(-1.0..0.2)];
    let bg1: [f64; 3] = [r.gen_range(-1.0..0.2), r.gen_range(-1.0..0.2), r.gen_range(-1.0..0.2)];
    let fg: [f64; 3] = [r.gen_range(-0.2..1.0), r.gen_range(-0.2..1.0), r.gen_range(-0.2..1.0)];
    let angle = r.gen_range(0.0..std::f64::consts::TAU);
    let s = size as f64;
    let radius = r.gen_range(0.22..0.38) * s;
    let cx = r.gen_range(radius..s - radius);
    let cy = r.gen_range(radius..s - radius);
    let (dirx, diry) = (angle.cos(), angle.sin());
    let mut px = vec![0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = (((fx / s - 0.5) * dirx + (fy / s - 0.5) * diry) + 0.75) / 1.5;
            let hit = inside(class, fx - cx, fy - cy, radius);
            for c in 0..3 {
                let v = if hit { fg[c] } else { bg0[c] + (bg1[c] - bg0[c]) * t };
                px[(c * size + y) * size + x] = v.clamp(-1.0, 1.0) as f32;
            }
        }
    }
    (px, class)
}

/// `n` images of side `size` from `seed`, ids `"{prefix}{index:05}"`.
pub fn generate(n: usize, size: usize, seed: u64, prefix: &str) -> Result<ImageSet> {
    generate_range(0..n as u64, size, seed, prefix)
}

/// Images for an explicit index range of the stream (train and test splits
/// use disjoint ranges of one seed).
pub fn generate_range(range: std::ops::Range<u64>, size: usize, seed: u64, prefix: &str) -> Result<ImageSet> {
    if range.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    let n = (range.end - range.start) as usize;
    let mut data = Vec::with_capacity(n * 3 * size * size);
    let mut labels = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    for i in range {
        let (px, class) = render(seed, i, size);
        data.extend(px);
        labels.push(class);
        ids.push(format!("{prefix}{i:05}"));
    }
    ImageSet::new(Tensor::from_vec(&[n, 3, size, size], data)?, labels, ids)
}
