//! Exact weight-initialization transforms for cross-modal and
//! hyperspectral first layers, and construction of the full model from a
//! pretrained single-modality base.

use super::encoder::Encoder;
use super::{BaseModel, EncoderBank, Hyper, InputMode, ModalityPairKey, XRaftModel};
use crate::error::{Error, Result};
use crate::imaging::ColorMatrix;
use crate::tensor::{Scalar, Tensor};

/// Channel index of blue in RGB inputs.
const BLUE: usize = 2;

/// Rewrites a pretrained RGB first-layer weight so the layer produces the
/// same output on an RGB image as the original would on that image's BBB
/// projection: the blue channel receives the channel-wise sum of the
/// pretrained weights, red and green are zeroed.
pub fn init_cross_rgb<T: Scalar>(weight: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = weight.shape().to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::Shape(format!(
            "init_cross_rgb expects [n,3,kh,kw] weights, got {shape:?}"
        )));
    }
    let (n, kh, kw) = (shape[0], shape[2], shape[3]);
    let khw = kh * kw;
    let data = weight.data();
    let mut out = vec![T::zero(); data.len()];
    for f in 0..n {
        for p in 0..khw {
            let mut sum = T::zero();
            for c in 0..3 {
                sum = sum + data[(f * 3 + c) * khw + p];
            }
            out[(f * 3 + BLUE) * khw + p] = sum;
        }
    }
    drop(data);
    Tensor::param(&shape, out)
}

/// Lifts RGB first-layer weights to hyperspectral inputs through the
/// color conversion matrix: C[n,c] = sum_i B[n,i] * Q[i,c], so convolving
/// the lifted weights with a cube equals convolving the originals with
/// the cube's RGB rendering.
pub fn lift_rgb_to_hsi<T: Scalar>(weight: &Tensor<T>, q: &ColorMatrix) -> Result<Tensor<T>> {
    let shape = weight.shape().to_vec();
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::Shape(format!(
            "lift_rgb_to_hsi expects [n,3,kh,kw] weights, got {shape:?}"
        )));
    }
    let (n, kh, kw) = (shape[0], shape[2], shape[3]);
    let khw = kh * kw;
    let bands = q.bands;
    let data = weight.data();
    let mut out = vec![T::zero(); n * bands * khw];
    for f in 0..n {
        for c in 0..bands {
            for p in 0..khw {
                let mut acc = T::zero();
                for i in 0..3 {
                    acc = acc + data[(f * 3 + i) * khw + p] * T::from_f64(q.q[i * bands + c] as f64);
                }
                out[(f * bands + c) * khw + p] = acc;
            }
        }
    }
    drop(data);
    Tensor::param(&[n, bands, kh, kw], out)
}

fn transform_encoder<T: Scalar>(
    enc: &Encoder<T>,
    cross: bool,
    mode: InputMode,
    q: &ColorMatrix,
) -> Result<Encoder<T>> {
    let mut out = enc.clone_params();
    if cross && matches!(mode, InputMode::Rgb | InputMode::Hsi) {
        let w = init_cross_rgb(&out.first_conv().weight)?;
        out.replace_first_weight(w);
    }
    if mode == InputMode::Hsi {
        let w = lift_rgb_to_hsi(&out.first_conv().weight, q)?;
        out.replace_first_weight(w);
    }
    Ok(out)
}

/// Builds the four-slot model from a pretrained base: every slot starts
/// as a clone of the base encoders; cross slots get the blue-channel
/// first-layer rewrite (RGB and HSI modes); in HSI mode every first
/// layer is additionally lifted through the color matrix. The update
/// block is copied unchanged.
pub fn build_xraft<T: Scalar>(
    base: &BaseModel<T>,
    mode: InputMode,
    q: &ColorMatrix,
) -> Result<XRaftModel<T>> {
    if base.hyper.input_channels != 3 {
        return Err(Error::Invalid(format!(
            "base model must consume 3-channel input, has {}",
            base.hyper.input_channels
        )));
    }
    if mode == InputMode::Hsi && q.bands != base.hyper.bands {
        return Err(Error::Config(format!(
            "color matrix covers {} bands but the model is configured for {}",
            q.bands, base.hyper.bands
        )));
    }
    let build_slot = |enc: &Encoder<T>| -> Result<[Encoder<T>; 4]> {
        let mut slots = Vec::with_capacity(4);
        for key in ModalityPairKey::ALL {
            slots.push(transform_encoder(enc, key.is_cross(), mode, q)?);
        }
        Ok(slots
            .try_into()
            .unwrap_or_else(|_| unreachable!("exactly four slots")))
    };
    let bank = EncoderBank {
        feature: build_slot(&base.feature)?,
        context: build_slot(&base.context)?,
    };
    let hyper = Hyper {
        mode,
        input_channels: if mode == InputMode::Hsi {
            base.hyper.bands
        } else {
            3
        },
        ..base.hyper.clone()
    };
    Ok(XRaftModel {
        bank,
        update: base.update.clone_params(),
        hyper,
    })
}
