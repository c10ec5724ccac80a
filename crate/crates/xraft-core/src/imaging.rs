//! Hyperspectral cube handling: color-space conversion to RGB and BBB,
//! per-pixel band means, and synthetic blue-modality generation.

use crate::error::{Error, Result};
use crate::fields::{noise_field, smooth_field_in_range, uniform};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Scalar, Tensor};
use rand_distr::{Distribution, Normal};

/// Acquisition lighting mode of a cube.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    White,
    Blue,
}

impl Modality {
    pub fn tag(self) -> u8 {
        match self {
            Modality::White => 0,
            Modality::Blue => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Modality::White),
            1 => Ok(Modality::Blue),
            t => Err(Error::Invalid(format!("unknown modality tag {t}"))),
        }
    }
}

/// Multi-band image stack, band-major row-major storage.
#[derive(Debug, Clone)]
pub struct HsiCube {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub modality: Modality,
    pub data: Vec<f32>,
}

impl HsiCube {
    pub fn zeros(width: usize, height: usize, bands: usize, modality: Modality) -> Self {
        HsiCube {
            width,
            height,
            bands,
            modality,
            data: vec![0.0; width * height * bands],
        }
    }

    pub fn from_data(
        width: usize,
        height: usize,
        bands: usize,
        modality: Modality,
        data: Vec<f32>,
    ) -> Result<Self> {
        if data.len() != width * height * bands {
            return Err(Error::Shape(format!(
                "cube {width}x{height}x{bands} needs {} values, got {}",
                width * height * bands,
                data.len()
            )));
        }
        Ok(HsiCube {
            width,
            height,
            bands,
            modality,
            data,
        })
    }

    #[inline]
    pub fn band(&self, b: usize) -> &[f32] {
        &self.data[b * self.width * self.height..(b + 1) * self.width * self.height]
    }

    #[inline]
    pub fn band_mut(&mut self, b: usize) -> &mut [f32] {
        &mut self.data[b * self.width * self.height..(b + 1) * self.width * self.height]
    }

    /// Per-pixel mean over all bands; the input of the dark mask.
    pub fn channel_mean(&self) -> Vec<f32> {
        let hw = self.width * self.height;
        let mut out = vec![0.0f32; hw];
        for b in 0..self.bands {
            let plane = self.band(b);
            for (o, v) in out.iter_mut().zip(plane) {
                *o += v;
            }
        }
        let inv = 1.0 / self.bands as f32;
        for o in out.iter_mut() {
            *o *= inv;
        }
        out
    }

    /// [C,H,W] tensor of the raw bands (model input in HSI mode).
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|v| T::from_f64(*v as f64)).collect();
        Tensor::new(&[self.bands, self.height, self.width], data).expect("cube shape consistent")
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Plain channel-major float image (3 channels for RGB/BBB renders).
#[derive(Debug, Clone)]
pub struct Image {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * width * height {
            return Err(Error::Shape(format!(
                "image {channels}x{height}x{width} needs {} values, got {}",
                channels * width * height,
                data.len()
            )));
        }
        Ok(Image {
            channels,
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * self.width * self.height..(c + 1) * self.width * self.height]
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|v| T::from_f64(*v as f64)).collect();
        Tensor::new(&[self.channels, self.height, self.width], data).expect("image shape consistent")
    }
}

/// 3 x C matrix taking band intensities to (R, G, B).
#[derive(Debug, Clone)]
pub struct ColorMatrix {
    pub bands: usize,
    /// Row-major 3 x bands.
    pub q: Vec<f32>,
}

impl ColorMatrix {
    pub fn new(bands: usize, q: Vec<f32>) -> Result<Self> {
        if q.len() != 3 * bands {
            return Err(Error::Shape(format!(
                "color matrix needs 3x{bands} = {} entries, got {}",
                3 * bands,
                q.len()
            )));
        }
        Ok(ColorMatrix { bands, q })
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.q[i * self.bands..(i + 1) * self.bands]
    }

    /// Shipped default: Gaussian approximations of colorimetric matching
    /// curves sampled at `bands` evenly spaced centers from 400 to 700 nm,
    /// each row normalized to unit sum. The real acquisition matrix is a
    /// configuration artifact; this stands in for it.
    pub fn default_for_bands(bands: usize) -> Self {
        assert!(bands >= 1);
        let centers: Vec<f32> = (0..bands)
            .map(|i| {
                if bands == 1 {
                    550.0
                } else {
                    400.0 + 300.0 * i as f32 / (bands - 1) as f32
                }
            })
            .collect();
        let gauss = |lambda: f32, mu: f32, sigma: f32| {
            (-(lambda - mu) * (lambda - mu) / (2.0 * sigma * sigma)).exp()
        };
        let mut q = Vec::with_capacity(3 * bands);
        for (mu, sigma) in [(600.0, 50.0), (550.0, 45.0), (450.0, 40.0)] {
            let row: Vec<f32> = centers.iter().map(|l| gauss(*l, mu, sigma)).collect();
            let sum: f32 = row.iter().sum();
            q.extend(row.iter().map(|v| v / sum));
        }
        ColorMatrix { bands, q }
    }
}

/// rgb_i(x, y) = sum_c Q[i,c] * cube[c,x,y]. Values are left unclamped;
/// clamping to [0,1] happens only when rendering to 8-bit files.
pub fn to_rgb(cube: &HsiCube, q: &ColorMatrix) -> Result<Image> {
    if q.bands != cube.bands {
        return Err(Error::Shape(format!(
            "color matrix expects {} bands, cube has {}",
            q.bands, cube.bands
        )));
    }
    let hw = cube.width * cube.height;
    let mut data = vec![0.0f32; 3 * hw];
    for i in 0..3 {
        let row = q.row(i);
        let dst = &mut data[i * hw..(i + 1) * hw];
        for (c, qv) in row.iter().enumerate() {
            let plane = cube.band(c);
            for (d, v) in dst.iter_mut().zip(plane) {
                *d += qv * v;
            }
        }
    }
    Image::new(3, cube.width, cube.height, data)
}

/// Replicates the blue channel across all three channels: the greyscale
/// projection that keeps only the spectrum shared by both lighting modes.
pub fn to_bbb(rgb: &Image) -> Result<Image> {
    if rgb.channels != 3 {
        return Err(Error::Shape(format!(
            "to_bbb expects a 3-channel image, got {}",
            rgb.channels
        )));
    }
    let hw = rgb.width * rgb.height;
    let blue = rgb.channel(2);
    let mut data = Vec::with_capacity(3 * hw);
    for _ in 0..3 {
        data.extend_from_slice(blue);
    }
    Image::new(3, rgb.width, rgb.height, data)
}

/// Recipe for synthesizing a blue-light counterpart of a white cube:
/// band mixing biased toward low bands, global attenuation, a smooth
/// spatially varying darkening field, and additive Gaussian noise.
#[derive(Debug, Clone)]
pub struct ModalityRecipe {
    pub seed: u64,
    /// Apply the low-band-biased mixing matrix. Off means identity mix.
    pub band_mix: bool,
    /// Global intensity scale; 0 produces a fully dark cube.
    pub attenuation: f32,
    /// Minimum of the darkening field; 1.0 disables darkening.
    pub dark_floor: f32,
    /// Smoothness (pixels) of the darkening field.
    pub dark_sigma: f32,
    /// Standard deviation of the additive noise.
    pub noise_sigma: f32,
}

impl ModalityRecipe {
    /// No mixing, no attenuation, no darkening, no noise.
    pub fn identity() -> Self {
        ModalityRecipe {
            seed: 0,
            band_mix: false,
            attenuation: 1.0,
            dark_floor: 1.0,
            dark_sigma: 12.0,
            noise_sigma: 0.0,
        }
    }

    /// Defaults mimicking a low-SNR blue acquisition.
    pub fn default_blue(seed: u64) -> Self {
        ModalityRecipe {
            seed,
            band_mix: true,
            attenuation: 0.3,
            dark_floor: 0.2,
            dark_sigma: 12.0,
            noise_sigma: 0.02,
        }
    }
}

/// Row-normalized mixing matrix concentrating output energy in the low
/// bands, seeded deterministically.
fn band_mix_matrix(rng: &mut rand_chacha::ChaCha8Rng, bands: usize) -> Vec<f32> {
    let mut m = vec![0.0f32; bands * bands];
    for c in 0..bands {
        let mut sum = 0.0f32;
        for k in 0..bands {
            let locality = (-(k as f32 - 0.5 * c as f32).powi(2) / (2.0 * 1.5f32.powi(2))).exp();
            let low_bias = (-(k as f32) / 4.0).exp();
            let jitter = 0.7 + 0.6 * uniform(rng, 0.0, 1.0);
            let v = locality * low_bias * jitter;
            m[c * bands + k] = v;
            sum += v;
        }
        for k in 0..bands {
            m[c * bands + k] /= sum;
        }
    }
    m
}

/// Synthesizes a blue-modality counterpart with known geometric identity:
/// the output is pixel-aligned with the input.
pub fn synth_modality(cube: &HsiCube, recipe: &ModalityRecipe) -> HsiCube {
    let (w, h, bands) = (cube.width, cube.height, cube.bands);
    let hw = w * h;
    let mut rng = stream_rng(recipe.seed, Stream::Modality, 0);

    let mixed: Vec<f32> = if recipe.band_mix {
        let m = band_mix_matrix(&mut rng, bands);
        let mut out = vec![0.0f32; bands * hw];
        for c in 0..bands {
            let dst = &mut out[c * hw..(c + 1) * hw];
            for k in 0..bands {
                let coef = m[c * bands + k];
                let src = cube.band(k);
                for (d, v) in dst.iter_mut().zip(src) {
                    *d += coef * v;
                }
            }
        }
        out
    } else {
        cube.data.clone()
    };

    let dark: Option<Vec<f32>> = if recipe.dark_floor < 1.0 {
        Some(smooth_field_in_range(
            &mut rng,
            w,
            h,
            recipe.dark_sigma,
            recipe.dark_floor,
            1.0,
        ))
    } else {
        None
    };

    let mut data = mixed;
    for c in 0..bands {
        let plane = &mut data[c * hw..(c + 1) * hw];
        match &dark {
            Some(d) => {
                for (v, dv) in plane.iter_mut().zip(d) {
                    *v *= recipe.attenuation * dv;
                }
            }
            None => {
                for v in plane.iter_mut() {
                    *v *= recipe.attenuation;
                }
            }
        }
    }

    if recipe.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f64, recipe.noise_sigma as f64).expect("valid sigma");
        for v in data.iter_mut() {
            *v += normal.sample(&mut rng) as f32;
        }
    }

    HsiCube {
        width: w,
        height: h,
        bands,
        modality: Modality::Blue,
        data,
    }
}

/// Procedural white scene: a few smooth spatial components with random
/// band spectra, plus a fine shared texture so every projection keeps
/// matchable detail. Values land in [0.05, 1].
pub fn synth_scene(rng: &mut rand_chacha::ChaCha8Rng, w: usize, h: usize, bands: usize) -> HsiCube {
    let hw = w * h;
    let n_components = 4;
    let mut comps: Vec<Vec<f32>> = Vec::with_capacity(n_components);
    for _ in 0..n_components {
        let sigma = uniform(rng, 5.0, 10.0);
        comps.push(smooth_field_in_range(rng, w, h, sigma, 0.0, 1.0));
    }
    let comps = comps;
    // Fine texture shared across bands keeps local correspondence findable.
    let fine = {
        let raw = noise_field(rng, w, h);
        crate::fields::gaussian_blur(&raw, w, h, 0.8)
    };
    let spectra: Vec<Vec<f32>> = (0..n_components)
        .map(|_| (0..bands).map(|_| uniform(rng, 0.1, 1.0)).collect())
        .collect();
    let mut data = vec![0.0f32; bands * hw];
    for b in 0..bands {
        let gain = uniform(rng, 0.5, 1.0);
        let plane = &mut data[b * hw..(b + 1) * hw];
        for p in 0..hw {
            let mut v = 0.0f32;
            for k in 0..n_components {
                v += spectra[k][b] * comps[k][p];
            }
            v = v / n_components as f32 + 0.35 * gain * fine[p];
            plane[p] = v;
        }
    }
    // Normalize to a bright, positive range.
    let (mut min, mut max) = (f32::INFINITY, f32::NEG_INFINITY);
    for v in &data {
        min = min.min(*v);
        max = max.max(*v);
    }
    let span = (max - min).max(1e-6);
    for v in data.iter_mut() {
        *v = 0.05 + 0.95 * (*v - min) / span;
    }
    HsiCube {
        width: w,
        height: h,
        bands,
        modality: Modality::White,
        data,
    }
}
