//! Convolutional image encoders: six 3x3 layers with instance
//! normalization, striding down to the working resolution.

use crate::error::Result;
use crate::tensor::{Scalar, Tensor};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const IN_EPS: f64 = 1e-5;

/// One convolution with its geometry.
pub struct ConvLayer<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> ConvLayer<T> {
    /// He-initialized layer: weights ~ N(0, 2/(cin*k*k)), zero bias.
    pub fn new(
        rng: &mut ChaCha8Rng,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let wdata: Vec<T> = (0..cout * cin * k * k)
            .map(|_| T::from_f64(normal.sample(rng)))
            .collect();
        ConvLayer {
            weight: Tensor::param(&[cout, cin, k, k], wdata).expect("conv weight shape"),
            bias: Tensor::param(&[cout], vec![T::zero(); cout]).expect("conv bias shape"),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(&self.weight, &self.bias, self.stride, self.padding)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Fresh layer with copied values (same trainability flags).
    pub fn clone_params(&self) -> Self {
        let w = Tensor::param(self.weight.shape(), self.weight.to_vec()).expect("clone weight");
        w.set_requires_grad(self.weight.requires_grad());
        let b = Tensor::param(self.bias.shape(), self.bias.to_vec()).expect("clone bias");
        b.set_requires_grad(self.bias.requires_grad());
        ConvLayer {
            weight: w,
            bias: b,
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Per-channel scale and shift applied after instance normalization.
pub struct NormLayer<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> NormLayer<T> {
    pub fn new(channels: usize) -> Self {
        NormLayer {
            gamma: Tensor::param(&[channels], vec![T::one(); channels]).expect("gamma shape"),
            beta: Tensor::param(&[channels], vec![T::zero(); channels]).expect("beta shape"),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.instance_norm(&self.gamma, &self.beta, T::from_f64(IN_EPS))
    }

    pub fn clone_params(&self) -> Self {
        let g = Tensor::param(self.gamma.shape(), self.gamma.to_vec()).expect("clone gamma");
        g.set_requires_grad(self.gamma.requires_grad());
        let b = Tensor::param(self.beta.shape(), self.beta.to_vec()).expect("clone beta");
        b.set_requires_grad(self.beta.requires_grad());
        NormLayer { gamma: g, beta: b }
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

struct Block<T: Scalar> {
    conv: ConvLayer<T>,
    norm: Option<NormLayer<T>>,
}

/// Six-layer convolutional encoder. Layers 1-5 carry instance norm and
/// relu; the last layer is a plain projection to the output dimension.
pub struct Encoder<T: Scalar> {
    blocks: Vec<Block<T>>,
}

/// Stride pattern that reaches the requested downsampling factor.
fn stride_pattern(downsample: usize) -> Option<[usize; 6]> {
    match downsample {
        8 => Some([2, 1, 2, 1, 2, 1]),
        4 => Some([2, 1, 2, 1, 1, 1]),
        2 => Some([2, 1, 1, 1, 1, 1]),
        _ => None,
    }
}

/// Intermediate widths; the final layer projects to `out_dim`.
const WIDTHS: [usize; 5] = [16, 16, 24, 24, 32];

impl<T: Scalar> Encoder<T> {
    pub fn new(rng: &mut ChaCha8Rng, in_channels: usize, out_dim: usize, downsample: usize) -> Self {
        let strides = stride_pattern(downsample)
            .unwrap_or_else(|| panic!("unsupported downsample factor {downsample}"));
        let mut blocks = Vec::with_capacity(6);
        let mut cin = in_channels;
        for (i, &stride) in strides.iter().enumerate() {
            let cout = if i == 5 { out_dim } else { WIDTHS[i] };
            let conv = ConvLayer::new(rng, cin, cout, 3, stride, 1);
            let norm = if i == 5 { None } else { Some(NormLayer::new(cout)) };
            blocks.push(Block { conv, norm });
            cin = cout;
        }
        Encoder { blocks }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.conv.forward(&h)?;
            if let Some(norm) = &block.norm {
                h = norm.forward(&h)?;
            }
            if i + 1 < self.blocks.len() {
                h = h.relu();
            }
        }
        Ok(h)
    }

    pub fn in_channels(&self) -> usize {
        self.blocks[0].conv.in_channels()
    }

    pub fn out_dim(&self) -> usize {
        self.blocks.last().expect("encoder has layers").conv.out_channels()
    }

    pub fn first_conv(&self) -> &ConvLayer<T> {
        &self.blocks[0].conv
    }

    /// Replaces the first convolution's weight tensor (bias kept), used by
    /// the cross-modal and hyperspectral weight transforms.
    pub fn replace_first_weight(&mut self, weight: Tensor<T>) {
        weight.set_requires_grad(self.blocks[0].conv.weight.requires_grad());
        self.blocks[0].conv.weight = weight;
    }

    pub fn clone_params(&self) -> Self {
        Encoder {
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    conv: b.conv.clone_params(),
                    norm: b.norm.as_ref().map(|n| n.clone_params()),
                })
                .collect(),
        }
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.conv.collect_params(&format!("{prefix}.conv{i}"), out);
            if let Some(n) = &b.norm {
                n.collect_params(&format!("{prefix}.norm{i}"), out);
            }
        }
    }

    pub fn set_requires_grad(&self, value: bool) {
        let mut params = Vec::new();
        self.collect_params("enc", &mut params);
        for (_, p) in params {
            p.set_requires_grad(value);
        }
    }
}
