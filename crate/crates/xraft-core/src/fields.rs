//! Seeded scalar field generation and Gaussian smoothing, shared by the
//! synthetic modality recipe, scene textures, and deformation generator.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Unit-variance Gaussian noise field of size `w * h`, row-major.
pub fn noise_field(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Vec<f32> {
    let normal = Normal::new(0.0f64, 1.0).expect("valid normal");
    (0..w * h).map(|_| normal.sample(rng) as f32).collect()
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut k = Vec::with_capacity(2 * radius + 1);
    let s2 = 2.0 * sigma * sigma;
    for i in 0..=2 * radius {
        let d = i as f32 - radius as f32;
        k.push((-d * d / s2).exp());
    }
    k
}

/// Separable Gaussian blur. Near the border the kernel is renormalized
/// over its in-bounds support, so smoothed fields keep their amplitude at
/// the edges instead of fading to zero.
pub fn gaussian_blur(field: &[f32], w: usize, h: usize, sigma: f32) -> Vec<f32> {
    assert_eq!(field.len(), w * h);
    if sigma <= 0.0 {
        return field.to_vec();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = kernel.len() / 2;
    let mut tmp = vec![0.0f32; w * h];
    for y in 0..h {
        let row = &field[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0f32;
            let mut mass = 0.0f32;
            for (i, kv) in kernel.iter().enumerate() {
                let xi = x as isize + i as isize - radius as isize;
                if xi >= 0 && (xi as usize) < w {
                    acc += kv * row[xi as usize];
                    mass += kv;
                }
            }
            tmp[y * w + x] = acc / mass;
        }
    }
    let mut out = vec![0.0f32; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f32;
            let mut mass = 0.0f32;
            for (i, kv) in kernel.iter().enumerate() {
                let yi = y as isize + i as isize - radius as isize;
                if yi >= 0 && (yi as usize) < h {
                    acc += kv * tmp[yi as usize * w + x];
                    mass += kv;
                }
            }
            out[y * w + x] = acc / mass;
        }
    }
    out
}

/// Smooth field rescaled linearly into [lo, hi]. A constant input maps to
/// `hi` everywhere.
pub fn smooth_field_in_range(
    rng: &mut ChaCha8Rng,
    w: usize,
    h: usize,
    sigma: f32,
    lo: f32,
    hi: f32,
) -> Vec<f32> {
    let mut f = gaussian_blur(&noise_field(rng, w, h), w, h, sigma);
    let (mut min, mut max) = (f32::INFINITY, f32::NEG_INFINITY);
    for v in &f {
        min = min.min(*v);
        max = max.max(*v);
    }
    if max - min < 1e-12 {
        for v in f.iter_mut() {
            *v = hi;
        }
    } else {
        let scale = (hi - lo) / (max - min);
        for v in f.iter_mut() {
            *v = lo + (*v - min) * scale;
        }
    }
    f
}

/// Uniform draw helper used by the synthetic generators.
pub fn uniform(rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> f32 {
    if hi <= lo {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}
