//! Correlation pyramid, windowed lookup, and the convolutional gated
//! recurrent update cell.

use super::encoder::ConvLayer;
use crate::error::{Error, Result};
use crate::tensor::{concat, corr_volume, Scalar, Tensor};
use rand_chacha::ChaCha8Rng;

/// All-pairs correlation pyramid. Level 0 is the full-resolution volume
/// reshaped so the source position acts as the batch axis; deeper levels
/// pool the target grid 2x per step.
pub struct CorrPyramid<T: Scalar> {
    /// Each level is [N*h*w, 1, hl, wl].
    levels: Vec<Tensor<T>>,
    n: usize,
    h: usize,
    w: usize,
}

impl<T: Scalar> CorrPyramid<T> {
    pub fn build(f_src: &Tensor<T>, f_tgt: &Tensor<T>, num_levels: usize) -> Result<Self> {
        let shape = f_src.shape().to_vec();
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let full = corr_volume(f_src, f_tgt)?;
        let mut levels = Vec::with_capacity(num_levels);
        let mut level = full.reshape(&[n * h * w, 1, h, w])?;
        for li in 0..num_levels {
            levels.push(level.clone());
            if li + 1 < num_levels {
                let s = level.shape();
                if s[2] % 2 != 0 || s[3] % 2 != 0 {
                    return Err(Error::Shape(format!(
                        "correlation level {li} has odd dims {}x{}; image size must be \
                         divisible by downsample * 2^(levels-1)",
                        s[2], s[3]
                    )));
                }
                level = level.avg_pool2()?;
            }
        }
        Ok(CorrPyramid { levels, n, h, w })
    }

    /// Gathers a (2r+1)^2 bilinear window around the flow target at every
    /// level. The flow must be detached; coordinates are constants and the
    /// gradient flows only into the correlation values.
    pub fn lookup(&self, flow: &Tensor<T>, radius: usize) -> Result<Tensor<T>> {
        let (n, h, w) = (self.n, self.h, self.w);
        if flow.shape() != [n, 2, h, w] {
            return Err(Error::Shape(format!(
                "corr lookup: flow shape {:?}, expected [{n},2,{h},{w}]",
                flow.shape()
            )));
        }
        let k = 2 * radius + 1;
        let hw = h * w;
        let flow_data = flow.data();
        let mut per_level = Vec::with_capacity(self.levels.len());
        for (li, level) in self.levels.iter().enumerate() {
            // Full-resolution coordinate c maps to c/2 - 0.25 per pooling
            // step: c / 2^l - 0.5 (1 - 2^-l) after l steps.
            let scale = T::from_f64(1.0 / (1 << li) as f64);
            let shift = T::from_f64(0.5 * (1.0 - 1.0 / (1 << li) as f64));
            let mut coords = vec![T::zero(); n * hw * 2 * k * k];
            for s in 0..n {
                for p in 0..hw {
                    let (y, x) = (p / w, p % w);
                    let u = flow_data[(s * 2) * hw + p];
                    let v = flow_data[(s * 2 + 1) * hw + p];
                    let cx = (T::from_usize(x) + u) * scale - shift;
                    let cy = (T::from_usize(y) + v) * scale - shift;
                    let base = (s * hw + p) * 2 * k * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let off = dy * k + dx;
                            coords[base + off] =
                                cx + T::from_f64(dx as f64 - radius as f64);
                            coords[base + k * k + off] =
                                cy + T::from_f64(dy as f64 - radius as f64);
                        }
                    }
                }
            }
            let coords = Tensor::new(&[n * hw, 2, k, k], coords)?;
            let sampled = level.bilinear_sample(&coords)?;
            let arranged = sampled
                .reshape(&[n, h, w, k * k])?
                .permute(&[0, 3, 1, 2])?;
            per_level.push(arranged);
        }
        concat(&per_level, 1)
    }
}

/// Motion encoder + ConvGRU + flow head. Channel widths are fixed at desk
/// scale; only the hidden/context split follows the hyperparameters.
pub struct UpdateBlock<T: Scalar> {
    pub corr_conv: ConvLayer<T>,
    pub flow_conv: ConvLayer<T>,
    pub motion_conv: ConvLayer<T>,
    pub gru_z: ConvLayer<T>,
    pub gru_r: ConvLayer<T>,
    pub gru_q: ConvLayer<T>,
    pub head1: ConvLayer<T>,
    pub head2: ConvLayer<T>,
}

const CORR_FEAT: usize = 48;
const FLOW_FEAT: usize = 16;
/// Motion features before the raw flow is appended.
const MOTION_FEAT: usize = 30;
const HEAD_FEAT: usize = 48;

impl<T: Scalar> UpdateBlock<T> {
    pub fn new(
        rng: &mut ChaCha8Rng,
        corr_channels: usize,
        hidden_dim: usize,
        context_dim: usize,
    ) -> Self {
        let motion_out = MOTION_FEAT + 2;
        let x_dim = motion_out + context_dim;
        UpdateBlock {
            corr_conv: ConvLayer::new(rng, corr_channels, CORR_FEAT, 1, 1, 0),
            flow_conv: ConvLayer::new(rng, 2, FLOW_FEAT, 3, 1, 1),
            motion_conv: ConvLayer::new(rng, CORR_FEAT + FLOW_FEAT, MOTION_FEAT, 3, 1, 1),
            gru_z: ConvLayer::new(rng, hidden_dim + x_dim, hidden_dim, 3, 1, 1),
            gru_r: ConvLayer::new(rng, hidden_dim + x_dim, hidden_dim, 3, 1, 1),
            gru_q: ConvLayer::new(rng, hidden_dim + x_dim, hidden_dim, 3, 1, 1),
            head1: ConvLayer::new(rng, hidden_dim, HEAD_FEAT, 3, 1, 1),
            head2: ConvLayer::new(rng, HEAD_FEAT, 2, 3, 1, 1),
        }
    }

    /// One recurrent step: returns (new hidden state, flow delta).
    pub fn step(
        &self,
        hidden: &Tensor<T>,
        ctx_inp: &Tensor<T>,
        corr_feat: &Tensor<T>,
        flow: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let cf = self.corr_conv.forward(corr_feat)?.relu();
        let ff = self.flow_conv.forward(flow)?.relu();
        let motion = self
            .motion_conv
            .forward(&concat(&[cf, ff], 1)?)?
            .relu();
        let motion = concat(&[motion, flow.clone()], 1)?;
        let x = concat(&[motion, ctx_inp.clone()], 1)?;
        let hx = concat(&[hidden.clone(), x.clone()], 1)?;
        let z = self.gru_z.forward(&hx)?.sigmoid();
        let r = self.gru_r.forward(&hx)?.sigmoid();
        let rh = r.mul(hidden)?;
        let q = self.gru_q.forward(&concat(&[rh, x], 1)?)?.tanh_act();
        let keep = z.mul_scalar(-T::one()).add_scalar(T::one());
        let new_hidden = keep.mul(hidden)?.add(&z.mul(&q)?)?;
        let delta = self.head2.forward(&self.head1.forward(&new_hidden)?.relu())?;
        Ok((new_hidden, delta))
    }

    pub fn clone_params(&self) -> Self {
        UpdateBlock {
            corr_conv: self.corr_conv.clone_params(),
            flow_conv: self.flow_conv.clone_params(),
            motion_conv: self.motion_conv.clone_params(),
            gru_z: self.gru_z.clone_params(),
            gru_r: self.gru_r.clone_params(),
            gru_q: self.gru_q.clone_params(),
            head1: self.head1.clone_params(),
            head2: self.head2.clone_params(),
        }
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.corr_conv.collect_params(&format!("{prefix}.corr_conv"), out);
        self.flow_conv.collect_params(&format!("{prefix}.flow_conv"), out);
        self.motion_conv.collect_params(&format!("{prefix}.motion_conv"), out);
        self.gru_z.collect_params(&format!("{prefix}.gru_z"), out);
        self.gru_r.collect_params(&format!("{prefix}.gru_r"), out);
        self.gru_q.collect_params(&format!("{prefix}.gru_q"), out);
        self.head1.collect_params(&format!("{prefix}.head1"), out);
        self.head2.collect_params(&format!("{prefix}.head2"), out);
    }
}
