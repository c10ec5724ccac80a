//! Checkpoint format: magic "XRFT", version, hyperparameter block, then
//! length-prefixed named parameter tensors as little-endian f32.

use super::encoder::Encoder;
use super::update::UpdateBlock;
use super::{BaseModel, EncoderBank, Hyper, InputMode, XRaftModel};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Scalar, Tensor};
use std::fs;
use std::io::Write;
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"XRFT";
const MAX_ELEMENTS: u64 = 1 << 28;

/// Whether a checkpoint holds the single-modality base or the four-slot
/// cross-modal model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Base,
    XRaft,
}

impl ModelKind {
    fn tag(self) -> u32 {
        match self {
            ModelKind::Base => 0,
            ModelKind::XRaft => 1,
        }
    }

    fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(ModelKind::Base),
            1 => Ok(ModelKind::XRaft),
            t => Err(Error::Invalid(format!("unknown model kind tag {t}"))),
        }
    }
}

/// Deserialized checkpoint: named parameter payloads plus hyperparameters.
#[derive(Debug)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: ModelKind,
    pub hyper: Hyper,
    pub params: Vec<(String, Vec<usize>, Vec<f32>)>,
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn serialize<T: Scalar>(
    kind: ModelKind,
    hyper: &Hyper,
    params: &[(String, Tensor<T>)],
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, CHECKPOINT_VERSION);
    push_u32(&mut out, kind.tag());
    push_u32(&mut out, hyper.input_channels as u32);
    push_u32(&mut out, hyper.mode.tag());
    push_u32(&mut out, hyper.bands as u32);
    push_u32(&mut out, hyper.feature_dim as u32);
    push_u32(&mut out, hyper.hidden_dim as u32);
    push_u32(&mut out, hyper.context_dim as u32);
    push_u32(&mut out, hyper.downsample as u32);
    push_u32(&mut out, hyper.corr_levels as u32);
    push_u32(&mut out, hyper.corr_radius as u32);
    push_u32(&mut out, hyper.iterations as u32);
    push_u32(&mut out, params.len() as u32);
    for (name, tensor) in params {
        push_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        let shape = tensor.shape();
        push_u32(&mut out, shape.len() as u32);
        for d in shape {
            push_u32(&mut out, *d as u32);
        }
        for v in tensor.data().iter() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

impl<T: Scalar> BaseModel<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serialize(ModelKind::Base, &self.hyper, &self.params());
        write_bytes(path, &bytes)
    }

    /// Rebuilds a base model from checkpoint contents.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != ModelKind::Base {
            return Err(Error::Invalid(
                "checkpoint holds the cross-modal model, expected the base model".into(),
            ));
        }
        // Architecture rebuilt from the stored hyperparameters; the seed
        // is irrelevant because every parameter is overwritten.
        let mut rng = stream_rng(0, Stream::ModelInit, 0);
        let model = BaseModel::new(&mut rng, ckpt.hyper.clone());
        load_params(&model.params(), &ckpt.params)?;
        Ok(model)
    }
}

impl<T: Scalar> XRaftModel<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serialize(ModelKind::XRaft, &self.hyper, &self.params());
        write_bytes(path, &bytes)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.kind != ModelKind::XRaft {
            return Err(Error::Invalid(
                "checkpoint holds the base model, expected the cross-modal model".into(),
            ));
        }
        let mut rng = stream_rng(0, Stream::ModelInit, 0);
        let hyper = ckpt.hyper.clone();
        let make = |rng: &mut rand_chacha::ChaCha8Rng, dim: usize| -> [Encoder<T>; 4] {
            [
                Encoder::new(rng, hyper.input_channels, dim, hyper.downsample),
                Encoder::new(rng, hyper.input_channels, dim, hyper.downsample),
                Encoder::new(rng, hyper.input_channels, dim, hyper.downsample),
                Encoder::new(rng, hyper.input_channels, dim, hyper.downsample),
            ]
        };
        let feature = make(&mut rng, hyper.feature_dim);
        let context = make(&mut rng, hyper.hidden_dim + hyper.context_dim);
        let update = UpdateBlock::new(
            &mut rng,
            hyper.corr_channels(),
            hyper.hidden_dim,
            hyper.context_dim,
        );
        let model = XRaftModel {
            bank: EncoderBank { feature, context },
            update,
            hyper,
        };
        load_params(&model.params(), &ckpt.params)?;
        Ok(model)
    }
}

fn load_params<T: Scalar>(
    live: &[(String, Tensor<T>)],
    stored: &[(String, Vec<usize>, Vec<f32>)],
) -> Result<()> {
    if live.len() != stored.len() {
        return Err(Error::Invalid(format!(
            "checkpoint has {} parameters, model expects {}",
            stored.len(),
            live.len()
        )));
    }
    for ((lname, tensor), (sname, shape, values)) in live.iter().zip(stored) {
        if lname != sname {
            return Err(Error::Invalid(format!(
                "parameter order mismatch: model {lname:?} vs checkpoint {sname:?}"
            )));
        }
        if tensor.shape() != shape.as_slice() {
            return Err(Error::Invalid(format!(
                "parameter {lname:?} has shape {:?} in checkpoint, expected {:?}",
                shape,
                tensor.shape()
            )));
        }
        let mut data = tensor.data_mut();
        for (d, v) in data.iter_mut().zip(values) {
            *d = T::from_f64(*v as f64);
        }
    }
    Ok(())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads and validates a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let pstr = path.display().to_string();
    let mut pos = 0usize;
    let need = |pos: &mut usize, n: usize, what: &str| -> Result<std::ops::Range<usize>> {
        if *pos + n > buf.len() {
            return Err(Error::parse(
                &pstr,
                format!(
                    "truncated while reading {what}: need {n} bytes at offset {pos}, only {} left",
                    buf.len() - *pos
                ),
            ));
        }
        let r = *pos..*pos + n;
        *pos += n;
        Ok(r)
    };
    let magic = &buf[need(&mut pos, 4, "magic")?];
    if magic != MAGIC {
        return Err(Error::parse(
            &pstr,
            format!("bad magic {magic:?}, expected \"XRFT\""),
        ));
    }
    let mut u32_field = |what: &str, pos: &mut usize| -> Result<u32> {
        let r = need(pos, 4, what)?;
        Ok(u32::from_le_bytes([buf[r.start], buf[r.start + 1], buf[r.start + 2], buf[r.start + 3]]))
    };
    let version = u32_field("version", &mut pos)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::parse(
            &pstr,
            format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
        ));
    }
    let kind = ModelKind::from_tag(u32_field("kind", &mut pos)?)
        .map_err(|e| Error::parse(&pstr, e.to_string()))?;
    let input_channels = u32_field("input channels", &mut pos)? as usize;
    let mode = InputMode::from_tag(u32_field("mode", &mut pos)?)
        .map_err(|e| Error::parse(&pstr, e.to_string()))?;
    let bands = u32_field("bands", &mut pos)? as usize;
    let feature_dim = u32_field("feature dim", &mut pos)? as usize;
    let hidden_dim = u32_field("hidden dim", &mut pos)? as usize;
    let context_dim = u32_field("context dim", &mut pos)? as usize;
    let downsample = u32_field("downsample", &mut pos)? as usize;
    let corr_levels = u32_field("corr levels", &mut pos)? as usize;
    let corr_radius = u32_field("corr radius", &mut pos)? as usize;
    let iterations = u32_field("iterations", &mut pos)? as usize;
    let count = u32_field("parameter count", &mut pos)? as usize;
    if count > 100_000 {
        return Err(Error::parse(&pstr, format!("implausible parameter count {count}")));
    }
    let mut params = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = u32_field("name length", &mut pos)? as usize;
        if name_len > 4096 {
            return Err(Error::parse(&pstr, format!("implausible name length {name_len}")));
        }
        let r = need(&mut pos, name_len, "parameter name")?;
        let name = std::str::from_utf8(&buf[r])
            .map_err(|_| Error::parse(&pstr, format!("parameter {i} name is not UTF-8")))?
            .to_string();
        let ndim = u32_field("rank", &mut pos)? as usize;
        if ndim > 8 {
            return Err(Error::parse(&pstr, format!("implausible rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut numel: u64 = 1;
        for _ in 0..ndim {
            let d = u32_field("dimension", &mut pos)? as usize;
            numel *= d as u64;
            shape.push(d);
        }
        if numel > MAX_ELEMENTS {
            return Err(Error::parse(&pstr, format!("parameter {name:?} is implausibly large")));
        }
        let r = need(&mut pos, 4 * numel as usize, "parameter values")?;
        let mut values = Vec::with_capacity(numel as usize);
        for c in buf[r].chunks_exact(4) {
            values.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        }
        params.push((name, shape, values));
    }
    if pos != buf.len() {
        return Err(Error::parse(
            &pstr,
            format!("{} trailing bytes after payload", buf.len() - pos),
        ));
    }
    Ok(Checkpoint {
        version,
        kind,
        hyper: Hyper {
            mode,
            input_channels,
            bands,
            feature_dim,
            hidden_dim,
            context_dim,
            downsample,
            corr_levels,
            corr_radius,
            iterations,
        },
        params,
    })
}
