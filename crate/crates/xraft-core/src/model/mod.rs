//! The cross-modal flow model: four feature and four context encoders
//! keyed by modality pair on top of shared correlation and recurrent
//! update machinery.

pub mod checkpoint;
pub mod encoder;
mod init;
pub mod update;

pub use checkpoint::{load_checkpoint, Checkpoint, ModelKind, CHECKPOINT_VERSION};
pub use init::{build_xraft, init_cross_rgb, lift_rgb_to_hsi};

use crate::error::{Error, Result};
use crate::imaging::{to_bbb, to_rgb, ColorMatrix, HsiCube};
pub use crate::imaging::Modality;
use crate::tensor::{concat, Scalar, Tensor};
use encoder::Encoder;
use rand_chacha::ChaCha8Rng;
use update::{CorrPyramid, UpdateBlock};

/// What the model consumes: RGB renderings, blue-replicated greyscale,
/// or the raw hyperspectral bands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMode {
    Rgb,
    Bbb,
    Hsi,
}

impl InputMode {
    pub fn tag(self) -> u32 {
        match self {
            InputMode::Rgb => 0,
            InputMode::Bbb => 1,
            InputMode::Hsi => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(InputMode::Rgb),
            1 => Ok(InputMode::Bbb),
            2 => Ok(InputMode::Hsi),
            t => Err(Error::Invalid(format!("unknown input mode tag {t}"))),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(InputMode::Rgb),
            "bbb" => Ok(InputMode::Bbb),
            "hsi" => Ok(InputMode::Hsi),
            _ => Err(Error::Config(format!(
                "unknown mode {s:?}, expected rgb, bbb, or hsi"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InputMode::Rgb => "rgb",
            InputMode::Bbb => "bbb",
            InputMode::Hsi => "hsi",
        }
    }
}

/// Architecture hyperparameters, serialized with every checkpoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hyper {
    pub mode: InputMode,
    pub input_channels: usize,
    /// Bands expected of input cubes (for RGB conversion and dark masks).
    pub bands: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub context_dim: usize,
    pub downsample: usize,
    pub corr_levels: usize,
    pub corr_radius: usize,
    pub iterations: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            mode: InputMode::Rgb,
            input_channels: 3,
            bands: 10,
            feature_dim: 64,
            hidden_dim: 32,
            context_dim: 32,
            downsample: 8,
            corr_levels: 2,
            corr_radius: 3,
            iterations: 8,
        }
    }
}

impl Hyper {
    pub fn corr_channels(&self) -> usize {
        let k = 2 * self.corr_radius + 1;
        self.corr_levels * k * k
    }

    fn context_out(&self) -> usize {
        self.hidden_dim + self.context_dim
    }
}

/// Which encoder of a pair slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Feature,
    Context,
}

/// Encoder selector: the modality of the image being encoded plus the
/// modality of its counterpart. Selection is non-directional; a white
/// image in a mixed pair uses the white-blue encoder whether it is the
/// source or the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModalityPairKey {
    pub own: Modality,
    pub other: Modality,
}

impl ModalityPairKey {
    pub const ALL: [ModalityPairKey; 4] = [
        ModalityPairKey { own: Modality::White, other: Modality::White },
        ModalityPairKey { own: Modality::White, other: Modality::Blue },
        ModalityPairKey { own: Modality::Blue, other: Modality::White },
        ModalityPairKey { own: Modality::Blue, other: Modality::Blue },
    ];

    pub fn new(own: Modality, other: Modality) -> Self {
        ModalityPairKey { own, other }
    }

    pub fn index(self) -> usize {
        (self.own.tag() as usize) * 2 + self.other.tag() as usize
    }

    pub fn is_cross(self) -> bool {
        self.own != self.other
    }

    pub fn slot_name(self) -> &'static str {
        match (self.own, self.other) {
            (Modality::White, Modality::White) => "ww",
            (Modality::White, Modality::Blue) => "wb",
            (Modality::Blue, Modality::White) => "bw",
            (Modality::Blue, Modality::Blue) => "bb",
        }
    }
}

/// Trainability policies for fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainPolicy {
    /// Freeze everything except the white-blue and blue-white feature and
    /// context encoders (the fine-tuning default).
    CrossEncodersOnly,
    /// Everything trainable (pretraining).
    All,
    /// Everything frozen (teachers, evaluation).
    Frozen,
}

/// Single-modality base model: one feature encoder, one context encoder,
/// and the shared update machinery. Serves as the pretrained starting
/// point, and as the frozen teacher for cycle supervision.
pub struct BaseModel<T: Scalar> {
    pub feature: Encoder<T>,
    pub context: Encoder<T>,
    pub update: UpdateBlock<T>,
    pub hyper: Hyper,
}

impl<T: Scalar> BaseModel<T> {
    pub fn new(rng: &mut ChaCha8Rng, hyper: Hyper) -> Self {
        let feature = Encoder::new(rng, hyper.input_channels, hyper.feature_dim, hyper.downsample);
        let context = Encoder::new(rng, hyper.input_channels, hyper.context_out(), hyper.downsample);
        let update = UpdateBlock::new(rng, hyper.corr_channels(), hyper.hidden_dim, hyper.context_dim);
        BaseModel {
            feature,
            context,
            update,
            hyper,
        }
    }

    pub fn forward(
        &self,
        source: &Tensor<T>,
        target: &Tensor<T>,
        iterations: usize,
    ) -> Result<Vec<Tensor<T>>> {
        raft_forward(
            &self.feature,
            &self.feature,
            &self.context,
            &self.update,
            &self.hyper,
            source,
            target,
            iterations,
        )
    }

    pub fn params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.feature.collect_params("feature", &mut out);
        self.context.collect_params("context", &mut out);
        self.update.collect_params("update", &mut out);
        out
    }

    pub fn set_trainable(&self, policy: TrainPolicy) {
        let value = matches!(policy, TrainPolicy::All);
        for (_, p) in self.params() {
            p.set_requires_grad(value);
        }
    }
}

/// Bank of per-modality-pair encoders. All four feature encoders share
/// one architecture, as do the four context encoders; the cross slots
/// (wb, bw) hold distinct parameter sets from the straight slots.
pub struct EncoderBank<T: Scalar> {
    pub feature: [Encoder<T>; 4],
    pub context: [Encoder<T>; 4],
}

/// The cross-modal flow model.
pub struct XRaftModel<T: Scalar> {
    pub bank: EncoderBank<T>,
    pub update: UpdateBlock<T>,
    pub hyper: Hyper,
}

impl<T: Scalar> XRaftModel<T> {
    /// Encodes an image with the encoder selected by (own, other).
    pub fn encode(
        &self,
        image: &Tensor<T>,
        key: ModalityPairKey,
        kind: EncoderKind,
    ) -> Result<Tensor<T>> {
        let enc = match kind {
            EncoderKind::Feature => &self.bank.feature[key.index()],
            EncoderKind::Context => &self.bank.context[key.index()],
        };
        let shape = image.shape();
        if shape.len() != 4 || shape[1] != enc.in_channels() {
            return Err(Error::Shape(format!(
                "encode: image shape {shape:?} does not match encoder input channels {}",
                enc.in_channels()
            )));
        }
        enc.forward(image)
    }

    /// Full iterative inference. Returns the per-iteration flow estimates
    /// at input resolution, vectors scaled to input pixels.
    pub fn forward(
        &self,
        source: &Tensor<T>,
        target: &Tensor<T>,
        src_mod: Modality,
        tgt_mod: Modality,
        iterations: usize,
    ) -> Result<Vec<Tensor<T>>> {
        let key_src = ModalityPairKey::new(src_mod, tgt_mod);
        let key_tgt = ModalityPairKey::new(tgt_mod, src_mod);
        raft_forward(
            &self.bank.feature[key_src.index()],
            &self.bank.feature[key_tgt.index()],
            &self.bank.context[key_src.index()],
            &self.update,
            &self.hyper,
            source,
            target,
            iterations,
        )
    }

    pub fn params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for key in ModalityPairKey::ALL {
            self.bank.feature[key.index()]
                .collect_params(&format!("feature.{}", key.slot_name()), &mut out);
        }
        for key in ModalityPairKey::ALL {
            self.bank.context[key.index()]
                .collect_params(&format!("context.{}", key.slot_name()), &mut out);
        }
        self.update.collect_params("update", &mut out);
        out
    }

    /// Applies a freezing policy. The default fine-tuning policy leaves
    /// only the cross-modal feature and context encoders trainable.
    pub fn set_trainable(&self, policy: TrainPolicy) {
        for key in ModalityPairKey::ALL {
            let trainable = match policy {
                TrainPolicy::CrossEncodersOnly => key.is_cross(),
                TrainPolicy::All => true,
                TrainPolicy::Frozen => false,
            };
            self.bank.feature[key.index()].set_requires_grad(trainable);
            self.bank.context[key.index()].set_requires_grad(trainable);
        }
        let mut update_params = Vec::new();
        self.update.collect_params("update", &mut update_params);
        let update_trainable = matches!(policy, TrainPolicy::All);
        for (_, p) in update_params {
            p.set_requires_grad(update_trainable);
        }
    }

    pub fn trainable_params(&self) -> Vec<(String, Tensor<T>)> {
        self.params()
            .into_iter()
            .filter(|(_, p)| p.requires_grad())
            .collect()
    }
}

/// Shared three-stage inference: encode, correlate, iterate.
#[allow(clippy::too_many_arguments)]
fn raft_forward<T: Scalar>(
    feat_src_enc: &Encoder<T>,
    feat_tgt_enc: &Encoder<T>,
    ctx_src_enc: &Encoder<T>,
    update: &UpdateBlock<T>,
    hyper: &Hyper,
    source: &Tensor<T>,
    target: &Tensor<T>,
    iterations: usize,
) -> Result<Vec<Tensor<T>>> {
    let ss = source.shape().to_vec();
    if ss != target.shape() {
        return Err(Error::Shape(format!(
            "forward: source {ss:?} vs target {:?}",
            target.shape()
        )));
    }
    if ss.len() != 4 || ss[1] != feat_src_enc.in_channels() {
        return Err(Error::Shape(format!(
            "forward: input shape {ss:?} does not match {} channels",
            feat_src_enc.in_channels()
        )));
    }
    let ds = hyper.downsample;
    let granularity = ds * (1 << (hyper.corr_levels - 1));
    if ss[2] % granularity != 0 || ss[3] % granularity != 0 {
        return Err(Error::Shape(format!(
            "forward: spatial dims {}x{} must be divisible by {granularity}",
            ss[2], ss[3]
        )));
    }
    if iterations == 0 {
        return Err(Error::Invalid("forward: iterations must be >= 1".into()));
    }
    let (n, h, w) = (ss[0], ss[2] / ds, ss[3] / ds);

    let f_src = feat_src_enc.forward(source)?;
    let f_tgt = feat_tgt_enc.forward(target)?;
    let pyramid = CorrPyramid::build(&f_src, &f_tgt, hyper.corr_levels)?;

    let ctx = ctx_src_enc.forward(source)?;
    let mut hidden = ctx.narrow(1, 0, hyper.hidden_dim)?.tanh_act();
    let ctx_inp = ctx.narrow(1, hyper.hidden_dim, hyper.context_dim)?.relu();

    let mut flow = Tensor::zeros(&[n, 2, h, w]);
    let mut outputs = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        // The flow estimate is detached each iteration: gradients reach
        // the recurrent state but not the coordinate chain.
        let flow_d = flow.detach();
        let corr_feat = pyramid.lookup(&flow_d, hyper.corr_radius)?;
        let (new_hidden, delta) = update.step(&hidden, &ctx_inp, &corr_feat, &flow_d)?;
        hidden = new_hidden;
        flow = flow_d.add(&delta)?;
        let up = flow
            .upsample_bilinear(ds)?
            .mul_scalar(T::from_usize(ds));
        outputs.push(up);
    }
    Ok(outputs)
}

/// Converts a cube into the model's input planes for `mode`.
pub fn model_input<T: Scalar>(
    cube: &HsiCube,
    mode: InputMode,
    q: &ColorMatrix,
) -> Result<Tensor<T>> {
    match mode {
        InputMode::Rgb => Ok(to_rgb(cube, q)?.to_tensor()),
        InputMode::Bbb => Ok(to_bbb(&to_rgb(cube, q)?)?.to_tensor()),
        InputMode::Hsi => Ok(cube.to_tensor()),
    }
}

/// Batches per-cube inputs into one [N,C,H,W] tensor.
pub fn batch_inputs<T: Scalar>(
    cubes: &[&HsiCube],
    mode: InputMode,
    q: &ColorMatrix,
) -> Result<Tensor<T>> {
    if cubes.is_empty() {
        return Err(Error::Shape("batch_inputs: no cubes".into()));
    }
    let singles: Vec<Tensor<T>> = cubes
        .iter()
        .map(|c| {
            let t = model_input(c, mode, q)?;
            let s = t.shape().to_vec();
            t.reshape(&[1, s[0], s[1], s[2]])
        })
        .collect::<Result<_>>()?;
    concat(&singles, 0)
}

#[cfg(test)]
mod tests;
