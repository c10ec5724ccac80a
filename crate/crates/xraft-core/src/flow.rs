//! Flow-field semantics: warping, composition, endpoint error, and the
//! validity masks used both inside the differentiable loss and in plain
//! evaluation.
//!
//! A flow field maps source pixel (x, y) to target position
//! (x + u(x,y), y + v(x,y)). Warping is a pull: `warp(entity, flow)`
//! samples the entity (which lives in the flow's target frame) at the
//! displaced positions, producing a result in the flow's source frame.
//! Samples outside the entity read zero.

use crate::error::{Error, Result};
use crate::imaging::HsiCube;
use crate::tensor::{concat, Scalar, Tensor};

/// Dense displacement field in pixel units. Storage is two planes
/// (u then v), each row-major height x width.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            data: vec![0.0; 2 * width * height],
        }
    }

    pub fn from_planes(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 2 * width * height {
            return Err(Error::Shape(format!(
                "flow {width}x{height} needs {} values, got {}",
                2 * width * height,
                data.len()
            )));
        }
        Ok(FlowField {
            width,
            height,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, u: f32, v: f32) -> Self {
        let hw = width * height;
        let mut data = vec![u; 2 * hw];
        for s in data[hw..].iter_mut() {
            *s = v;
        }
        FlowField {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn u(&self) -> &[f32] {
        &self.data[..self.width * self.height]
    }

    #[inline]
    pub fn v(&self) -> &[f32] {
        &self.data[self.width * self.height..]
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.data[i], self.data[self.width * self.height + i])
    }

    /// Bilinear sample with zero padding outside the field.
    pub fn sample(&self, x: f32, y: f32) -> (f32, f32) {
        let hw = self.width * self.height;
        (
            bilinear_zero(&self.data[..hw], self.width, self.height, x, y),
            bilinear_zero(&self.data[hw..], self.width, self.height, x, y),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean_norm(&self) -> f32 {
        let hw = self.width * self.height;
        if hw == 0 {
            return 0.0;
        }
        let mut acc = 0.0f64;
        for i in 0..hw {
            let (u, v) = (self.data[i] as f64, self.data[hw + i] as f64);
            acc += (u * u + v * v).sqrt();
        }
        (acc / hw as f64) as f32
    }

    pub fn max_norm(&self) -> f32 {
        let hw = self.width * self.height;
        let mut best = 0.0f32;
        for i in 0..hw {
            let (u, v) = (self.data[i], self.data[hw + i]);
            best = best.max((u * u + v * v).sqrt());
        }
        best
    }

    /// [1,2,H,W] tensor view of the field.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|v| T::from_f64(*v as f64)).collect();
        Tensor::new(&[1, 2, self.height, self.width], data).expect("flow shape consistent")
    }

    /// Extracts sample `n` of a [N,2,H,W] tensor into a plain field.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, n: usize) -> Result<Self> {
        let shape = t.shape().to_vec();
        if shape.len() != 4 || shape[1] != 2 || n >= shape[0] {
            return Err(Error::Shape(format!(
                "flow tensor must be [N,2,H,W] with n < N, got {shape:?} (n={n})"
            )));
        }
        let (h, w) = (shape[2], shape[3]);
        let hw = h * w;
        let data = t.data();
        let base = n * 2 * hw;
        let out: Vec<f32> = data[base..base + 2 * hw]
            .iter()
            .map(|v| v.as_f64() as f32)
            .collect();
        FlowField::from_planes(w, h, out)
    }
}

/// Boolean per-pixel validity map (true = supervisable / credible).
#[derive(Debug, Clone, PartialEq)]
pub struct ValidityMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl ValidityMask {
    pub fn all_valid(width: usize, height: usize) -> Self {
        ValidityMask {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "mask {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(ValidityMask {
            width,
            height,
            data,
        })
    }

    pub fn count_valid(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn and(&self, other: &ValidityMask) -> Result<ValidityMask> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::Shape("mask size mismatch in and()".into()));
        }
        Ok(ValidityMask {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| *a && *b)
                .collect(),
        })
    }
}

#[inline]
fn bilinear_zero(plane: &[f32], w: usize, h: usize, x: f32, y: f32) -> f32 {
    let x0f = x.floor();
    let y0f = y.floor();
    let fx = x - x0f;
    let fy = y - y0f;
    let x0 = x0f as isize;
    let y0 = y0f as isize;
    let at = |xx: isize, yy: isize| -> f32 {
        if xx >= 0 && (xx as usize) < w && yy >= 0 && (yy as usize) < h {
            plane[yy as usize * w + xx as usize]
        } else {
            0.0
        }
    };
    at(x0, y0) * (1.0 - fx) * (1.0 - fy)
        + at(x0 + 1, y0) * fx * (1.0 - fy)
        + at(x0, y0 + 1) * (1.0 - fx) * fy
        + at(x0 + 1, y0 + 1) * fx * fy
}

/// Pulls channel planes backward along a flow: out(x,y) = planes sampled
/// at (x + u, y + v), zero outside.
pub fn warp_planes(
    planes: &[f32],
    channels: usize,
    width: usize,
    height: usize,
    flow: &FlowField,
) -> Result<Vec<f32>> {
    if flow.width != width || flow.height != height {
        return Err(Error::Shape(format!(
            "warp: flow {}x{} vs entity {width}x{height}",
            flow.width, flow.height
        )));
    }
    let hw = width * height;
    let mut out = vec![0.0f32; channels * hw];
    for y in 0..height {
        for x in 0..width {
            let i = y * width + x;
            let (u, v) = (flow.data[i], flow.data[hw + i]);
            let (sx, sy) = (x as f32 + u, y as f32 + v);
            for c in 0..channels {
                out[c * hw + i] = bilinear_zero(&planes[c * hw..(c + 1) * hw], width, height, sx, sy);
            }
        }
    }
    Ok(out)
}

/// Backward-warps every band of a cube.
pub fn warp_cube(cube: &HsiCube, flow: &FlowField) -> Result<HsiCube> {
    let data = warp_planes(&cube.data, cube.bands, cube.width, cube.height, flow)?;
    HsiCube::from_data(cube.width, cube.height, cube.bands, cube.modality, data)
}

/// Pulls a flow field along another: each component plane is sampled
/// bilinearly with zero padding.
pub fn warp_flow(inner: &FlowField, along: &FlowField) -> Result<FlowField> {
    let data = warp_planes(&inner.data, 2, inner.width, inner.height, along)?;
    FlowField::from_planes(inner.width, inner.height, data)
}

/// Cycle composition: compose(f_ab, f_bc) = f_ab + warp(f_bc, f_ab),
/// the flow from frame a to frame c via b.
pub fn compose(f_ab: &FlowField, f_bc: &FlowField) -> Result<FlowField> {
    if f_ab.width != f_bc.width || f_ab.height != f_bc.height {
        return Err(Error::Shape(format!(
            "compose: {}x{} vs {}x{}",
            f_ab.width, f_ab.height, f_bc.width, f_bc.height
        )));
    }
    let warped = warp_flow(f_bc, f_ab)?;
    let data = f_ab
        .data
        .iter()
        .zip(&warped.data)
        .map(|(a, b)| a + b)
        .collect();
    FlowField::from_planes(f_ab.width, f_ab.height, data)
}

/// Mean endpoint error over (optionally masked) pixels.
pub fn epe(f_pred: &FlowField, f_ref: &FlowField, mask: Option<&ValidityMask>) -> Result<f32> {
    if f_pred.width != f_ref.width || f_pred.height != f_ref.height {
        return Err(Error::Shape(format!(
            "epe: {}x{} vs {}x{}",
            f_pred.width, f_pred.height, f_ref.width, f_ref.height
        )));
    }
    if let Some(m) = mask {
        if m.width != f_pred.width || m.height != f_pred.height {
            return Err(Error::Shape("epe: mask size mismatch".into()));
        }
    }
    let hw = f_pred.width * f_pred.height;
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for i in 0..hw {
        if let Some(m) = mask {
            if !m.data[i] {
                continue;
            }
        }
        let du = (f_pred.data[i] - f_ref.data[i]) as f64;
        let dv = (f_pred.data[hw + i] - f_ref.data[hw + i]) as f64;
        acc += (du * du + dv * dv).sqrt();
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((acc / count as f64) as f32)
}

/// Forward-backward consistency residual: r(x) = f_ij(x) + warp(f_ji, f_ij)(x).
/// For a consistent round trip the residual vanishes.
pub fn fb_residual(f_ij: &FlowField, f_ji: &FlowField) -> Result<Vec<f32>> {
    let round = compose(f_ij, f_ji)?;
    let hw = f_ij.width * f_ij.height;
    let mut out = vec![0.0f32; hw];
    for i in 0..hw {
        let (u, v) = (round.data[i], round.data[hw + i]);
        out[i] = (u * u + v * v).sqrt();
    }
    Ok(out)
}

/// Occlusion mask: a pixel is supervisable iff the forward-backward
/// residual norm stays within `eps_o`.
pub fn occlusion_mask(f_ij: &FlowField, f_ji: &FlowField, eps_o: f32) -> Result<ValidityMask> {
    if eps_o <= 0.0 {
        return Err(Error::Invalid(format!(
            "occlusion threshold must be positive, got {eps_o}"
        )));
    }
    let residual = fb_residual(f_ij, f_ji)?;
    ValidityMask::from_data(
        f_ij.width,
        f_ij.height,
        residual.iter().map(|r| *r <= eps_o).collect(),
    )
}

/// Same residual test with the render-time threshold (default 3 px),
/// used to gray out uncertain correspondences.
pub fn discrepancy_mask(f_ij: &FlowField, f_ji: &FlowField, threshold: f32) -> Result<ValidityMask> {
    occlusion_mask(f_ij, f_ji, threshold)
}

/// Default discrepancy threshold for registration rendering.
pub const DISCREPANCY_THRESHOLD: f32 = 3.0;

/// Dark mask: a pixel is valid iff its mean intensity over all bands
/// exceeds `eps_d`. Always computed on the cube, even when the model
/// consumes an RGB rendering of it.
pub fn dark_mask(cube: &HsiCube, eps_d: f32) -> Result<ValidityMask> {
    if eps_d < 0.0 {
        return Err(Error::Invalid(format!(
            "dark threshold must be non-negative, got {eps_d}"
        )));
    }
    let mean = cube.channel_mean();
    ValidityMask::from_data(
        cube.width,
        cube.height,
        mean.iter().map(|m| *m > eps_d).collect(),
    )
}

/// Warps a boolean mask along a flow: 0/1 values are sampled bilinearly
/// (zero outside) and re-binarized at >= 0.5, so warps landing out of
/// bounds become invalid.
pub fn warp_mask(mask: &ValidityMask, flow: &FlowField) -> Result<ValidityMask> {
    let plane: Vec<f32> = mask.data.iter().map(|b| if *b { 1.0 } else { 0.0 }).collect();
    let warped = warp_planes(&plane, 1, mask.width, mask.height, flow)?;
    ValidityMask::from_data(
        mask.width,
        mask.height,
        warped.iter().map(|v| *v >= 0.5).collect(),
    )
}

/// Combined supervision mask in frame a:
/// M = m_ac * m_ab * warp(m_bc * m_db, f_ab).
/// `m_bc` and `m_db` live in frame b and are pulled over along f_ab.
pub fn combined_mask(
    m_ac: &ValidityMask,
    m_ab: &ValidityMask,
    m_bc: &ValidityMask,
    m_db: &ValidityMask,
    f_ab: &FlowField,
) -> Result<ValidityMask> {
    let b_frame = m_bc.and(m_db)?;
    let warped = warp_mask(&b_frame, f_ab)?;
    m_ac.and(m_ab)?.and(&warped)
}

// ---- differentiable counterparts over tensors ----------------------------

/// Constant [N,2,H,W] tensor holding the identity sampling grid
/// (channel 0 = x, channel 1 = y).
pub fn identity_grid<T: Scalar>(n: usize, h: usize, w: usize) -> Tensor<T> {
    let hw = h * w;
    let mut data = vec![T::zero(); n * 2 * hw];
    for s in 0..n {
        let base = s * 2 * hw;
        for y in 0..h {
            for x in 0..w {
                data[base + y * w + x] = T::from_usize(x);
                data[base + hw + y * w + x] = T::from_usize(y);
            }
        }
    }
    Tensor::new(&[n, 2, h, w], data).expect("grid shape consistent")
}

/// Differentiable pull-warp of [N,C,H,W] entities along [N,2,H,W] flows.
pub fn warp_tensor<T: Scalar>(entity: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    let es = entity.shape();
    let fs = flow.shape();
    if es.len() != 4 || fs.len() != 4 || fs[1] != 2 || es[0] != fs[0] || es[2..] != fs[2..] {
        return Err(Error::Shape(format!(
            "warp: entity {es:?} does not pair with flow {fs:?}"
        )));
    }
    let grid = identity_grid::<T>(fs[0], fs[2], fs[3]);
    let coords = grid.add(flow)?;
    entity.bilinear_sample(&coords)
}

/// Differentiable cycle composition over tensors.
pub fn compose_tensor<T: Scalar>(f_ab: &Tensor<T>, f_bc: &Tensor<T>) -> Result<Tensor<T>> {
    f_ab.add(&warp_tensor(f_bc, f_ab)?)
}

/// Differentiable masked mean endpoint error with per-sample averaging:
/// each sample is the mean of the per-pixel flow-difference norms over
/// its valid pixels; samples with empty masks contribute zero. Returns
/// ([N] per-sample losses, number of samples with support).
pub fn epe_tensor_per_sample<T: Scalar>(
    f_pred: &Tensor<T>,
    f_ref: &Tensor<T>,
    weight: &Tensor<T>,
) -> Result<(Tensor<T>, usize)> {
    let ps = f_pred.shape().to_vec();
    if weight.shape() != [ps[0], 1, ps[2], ps[3]] {
        return Err(Error::Shape(format!(
            "epe weight must be [N,1,H,W] matching flow {ps:?}, got {:?}",
            weight.shape()
        )));
    }
    let diff = f_pred.sub(f_ref)?;
    let norms = diff.vec_norm()?;
    let weighted = norms.mul(weight)?;
    let sums = weighted.sum_per_sample()?;
    // Per-sample normalization by valid-pixel counts, computed outside the
    // graph (the weights are constants).
    let wd = weight.data();
    let hw = ps[2] * ps[3];
    let mut inv = vec![T::zero(); ps[0]];
    let mut supported = 0usize;
    for s in 0..ps[0] {
        let count: T = wd[s * hw..(s + 1) * hw].iter().copied().sum();
        if count > T::zero() {
            inv[s] = T::one() / count;
            supported += 1;
        }
    }
    drop(wd);
    let inv_t = Tensor::new(&[ps[0]], inv)?;
    Ok((sums.mul(&inv_t)?, supported))
}

/// Tensor of 0/1 weights from validity masks (one per sample).
pub fn masks_to_weight_tensor<T: Scalar>(masks: &[ValidityMask]) -> Result<Tensor<T>> {
    if masks.is_empty() {
        return Err(Error::Shape("no masks given".into()));
    }
    let (w, h) = (masks[0].width, masks[0].height);
    let mut data = Vec::with_capacity(masks.len() * w * h);
    for m in masks {
        if m.width != w || m.height != h {
            return Err(Error::Shape("mask sizes differ across batch".into()));
        }
        data.extend(m.data.iter().map(|b| if *b { T::one() } else { T::zero() }));
    }
    Tensor::new(&[masks.len(), 1, h, w], data)
}

/// Stacks per-sample [1,2,H,W] flow tensors into one [N,2,H,W] batch.
pub fn stack_flows<T: Scalar>(flows: &[Tensor<T>]) -> Result<Tensor<T>> {
    concat(flows, 0)
}
