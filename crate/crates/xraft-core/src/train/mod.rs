//! Supervised pretraining on synthetic same-modality pairs and
//! self-supervised cross-modal fine-tuning with the masked cycle loss.

mod loss;

pub use loss::{cycle_loss, teacher_flow, teacher_flow_reverse, CycleLossOutput};

use crate::error::{Error, Result};
use crate::eval::{eval_synthetic, gen_deformation, apply_deformation, DeformRecipe, Direction};
use crate::flow::{epe_tensor_per_sample, FlowField};
use crate::imaging::{ColorMatrix, HsiCube};
use crate::model::{batch_inputs, BaseModel, InputMode, Modality, TrainPolicy, XRaftModel};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{no_grad, Adam, AdamConfig, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use std::io::Write;

/// One white-blue-white self-supervision sample. The optional field holds
/// a teacher flow loaded from a file; absent means the frozen teacher
/// model computes it.
pub struct Triplet {
    pub a: HsiCube,
    pub b: HsiCube,
    pub c: HsiCube,
    pub teacher_file: Option<FlowField>,
}

/// Fine-tuning hyperparameters. Defaults: batch 20, learning rate 5e-5,
/// mask thresholds 8.0 / 0.07, the first three flow iterations
/// supervised, validation every 10 batches, early-stop patience 20.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub eps_occlusion: f32,
    pub eps_dark: f32,
    pub supervised_iterations: usize,
    pub validate_every: usize,
    pub patience: usize,
    /// Hard cap on fine-tuning batches (early stopping usually fires
    /// first).
    pub max_batches: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 20,
            learning_rate: 5e-5,
            eps_occlusion: 8.0,
            eps_dark: 0.07,
            supervised_iterations: 3,
            validate_every: 10,
            patience: 20,
            max_batches: 1000,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || self.learning_rate <= 0.0
            || self.eps_occlusion <= 0.0
            || self.eps_dark < 0.0
            || self.supervised_iterations == 0
            || self.validate_every == 0
            || self.patience == 0
            || self.max_batches == 0
        {
            return Err(Error::Config(
                "training parameters must all be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Pretraining hyperparameters for the single-modality base model.
#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Deformation smoothness for the synthetic pairs.
    pub sigma: f32,
    /// Upper bound of the per-sample deformation amplitude.
    pub amplitude: f32,
    /// Fraction of zero-deformation pairs, anchoring the zero-flow case.
    pub identity_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 600,
            batch_size: 8,
            learning_rate: 2e-4,
            seed: 7,
            sigma: 8.0,
            amplitude: 8.0,
            identity_fraction: 0.1,
        }
    }
}

/// Loss trace of a pretraining run.
pub struct PretrainOutcome {
    pub losses: Vec<f32>,
}

/// Supervised pretraining: deformed white scenes paired with their
/// originals, endpoint error averaged over all iteration outputs, all
/// parameters trainable. The trained weights land in `model` in place.
pub fn pretrain<W: Write>(
    model: &BaseModel<f32>,
    scenes: &[HsiCube],
    q: &ColorMatrix,
    cfg: &PretrainConfig,
    log: &mut W,
) -> Result<PretrainOutcome> {
    if scenes.is_empty() {
        return Err(Error::Invalid("pretrain: no scenes".into()));
    }
    if cfg.steps == 0 || cfg.batch_size == 0 || cfg.learning_rate <= 0.0 {
        return Err(Error::Config("pretrain parameters must be positive".into()));
    }
    model.set_trainable(TrainPolicy::All);
    let params: Vec<_> = model.params().into_iter().map(|(_, p)| p).collect();
    let mut opt = Adam::new(
        &params,
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
    )?;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut rng = stream_rng(cfg.seed, Stream::Shuffle, step as u64);
        let mut sources = Vec::with_capacity(cfg.batch_size);
        let mut gts = Vec::with_capacity(cfg.batch_size);
        let mut targets = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let scene = &scenes[rng.gen_range(0..scenes.len())];
            let amplitude = if rng.gen_bool(cfg.identity_fraction) {
                0.0
            } else {
                cfg.amplitude * rng.gen_range(0.15..1.0f32)
            };
            let recipe = DeformRecipe::new(rng.gen(), cfg.sigma, amplitude);
            let gt = gen_deformation(scene.width, scene.height, &recipe);
            sources.push(apply_deformation(scene, &gt)?);
            gts.push(gt);
            targets.push(scene.clone());
        }
        let src_refs: Vec<&HsiCube> = sources.iter().collect();
        let tgt_refs: Vec<&HsiCube> = targets.iter().collect();
        let src = batch_inputs::<f32>(&src_refs, InputMode::Rgb, q)?;
        let tgt = batch_inputs::<f32>(&tgt_refs, InputMode::Rgb, q)?;
        let outs = model.forward(&src, &tgt, model.hyper.iterations)?;

        let (h, w) = (sources[0].height, sources[0].width);
        let mut gt_data = Vec::with_capacity(cfg.batch_size * 2 * h * w);
        for gt in &gts {
            gt_data.extend_from_slice(&gt.data);
        }
        let gt_batch = Tensor::<f32>::new(&[cfg.batch_size, 2, h, w], gt_data)?;
        let ones = Tensor::<f32>::full(&[cfg.batch_size, 1, h, w], 1.0);

        let mut total: Option<Tensor<f32>> = None;
        for out in &outs {
            let (per_sample, _) = epe_tensor_per_sample(out, &gt_batch, &ones)?;
            let s = per_sample.sum();
            total = Some(match total {
                Some(t) => t.add(&s)?,
                None => s,
            });
        }
        let loss = total
            .expect("at least one iteration")
            .mul_scalar(1.0 / (outs.len() * cfg.batch_size) as f32);
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(Error::Diverged(format!(
                "pretrain loss became {value} at batch {step}"
            )));
        }
        opt.zero_grads();
        loss.backward()?;
        opt.step();
        writeln!(log, "batch {step} loss {value:.6} skipped 0")
            .map_err(|e| Error::io("pretrain log", e))?;
        losses.push(value);
    }
    Ok(PretrainOutcome { losses })
}

/// Result of a fine-tuning run. The model ends loaded with the best
/// validation checkpoint.
pub struct FinetuneOutcome {
    pub batches_run: usize,
    pub validations: usize,
    pub initial_val_epe: f32,
    pub best_val_epe: f32,
    pub skipped_triplets: usize,
}

/// Validation metric: synthetic cross-modal endpoint error averaged over
/// both directions and all validation pairs, with per-pair deterministic
/// deformation recipes.
pub fn validation_epe(
    model: &XRaftModel<f32>,
    val_pairs: &[(HsiCube, HsiCube)],
    q: &ColorMatrix,
    seed: u64,
    sigma: f32,
    amplitude: f32,
) -> Result<f32> {
    if val_pairs.is_empty() {
        return Err(Error::Invalid("validation set is empty".into()));
    }
    let pred = |source: &HsiCube, target: &HsiCube| -> Result<FlowField> {
        no_grad(|| {
            let s = batch_inputs::<f32>(&[source], model.hyper.mode, q)?;
            let t = batch_inputs::<f32>(&[target], model.hyper.mode, q)?;
            let outs = model.forward(
                &s,
                &t,
                source.modality,
                target.modality,
                model.hyper.iterations,
            )?;
            FlowField::from_tensor(outs.last().expect("iterations >= 1"), 0)
        })
    };
    let mut acc = 0.0f64;
    for (i, (white, blue)) in val_pairs.iter().enumerate() {
        let mut rng = stream_rng(seed, Stream::EvalRecipes, i as u64);
        let recipe = DeformRecipe::new(rng.gen(), sigma, amplitude);
        acc += eval_synthetic(&pred, white, blue, &recipe, Direction::Both)? as f64;
    }
    Ok((acc / val_pairs.len() as f64) as f32)
}

/// Self-supervised fine-tuning with the masked cycle loss.
///
/// Teacher flows are computed once per triplet (or taken verbatim from
/// files) with the frozen teacher. Validation runs every
/// `validate_every` batches; the best checkpoint is kept and restored,
/// and training stops after `patience` validations without improvement
/// or at `max_batches`.
#[allow(clippy::too_many_arguments)]
pub fn finetune<W: Write>(
    model: &XRaftModel<f32>,
    teacher: &BaseModel<f32>,
    triplets: &[Triplet],
    val_pairs: &[(HsiCube, HsiCube)],
    q: &ColorMatrix,
    cfg: &TrainConfig,
    val_sigma: f32,
    val_amplitude: f32,
    log: &mut W,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    if triplets.is_empty() {
        return Err(Error::Invalid("finetune: no training triplets".into()));
    }
    teacher.set_trainable(TrainPolicy::Frozen);
    model.set_trainable(TrainPolicy::CrossEncodersOnly);
    let trainable: Vec<_> = model.trainable_params().into_iter().map(|(_, p)| p).collect();
    let mut opt = Adam::new(
        &trainable,
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
    )?;

    let teachers: Vec<(FlowField, FlowField)> = triplets
        .iter()
        .map(|t| {
            Ok((
                teacher_flow(t, teacher, q)?,
                teacher_flow_reverse(t, teacher, q)?,
            ))
        })
        .collect::<Result<_>>()?;

    let snapshot = |m: &XRaftModel<f32>| -> Vec<Vec<f32>> {
        m.params().iter().map(|(_, p)| p.to_vec()).collect()
    };
    let restore = |m: &XRaftModel<f32>, snap: &[Vec<f32>]| {
        for ((_, p), values) in m.params().iter().zip(snap) {
            p.data_mut().copy_from_slice(values);
        }
    };

    let initial_val = validation_epe(model, val_pairs, q, cfg.seed, val_sigma, val_amplitude)?;
    writeln!(log, "val 0 epe {initial_val:.6}").map_err(|e| Error::io("train log", e))?;
    let mut best_val = initial_val;
    let mut best_snapshot = snapshot(model);
    let mut validations = 1usize;
    let mut since_best = 0usize;
    let mut skipped_total = 0usize;
    let mut batches_run = 0usize;

    let mut order: Vec<usize> = (0..triplets.len()).collect();
    let mut cursor = triplets.len();
    let mut epoch = 0u64;

    'outer: for batch_idx in 0..cfg.max_batches {
        // Seeded epoch-wise shuffle.
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor >= order.len() {
                let mut rng = stream_rng(cfg.seed, Stream::Shuffle, 1_000_000 + epoch);
                order.shuffle(&mut rng);
                cursor = 0;
                epoch += 1;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let batch_triplets: Vec<&Triplet> = batch.iter().map(|i| &triplets[*i]).collect();
        let batch_teachers: Vec<(FlowField, FlowField)> =
            batch.iter().map(|i| teachers[*i].clone()).collect();

        let out = cycle_loss(model, &batch_triplets, &batch_teachers, q, cfg)?;
        skipped_total += out.skipped;
        let loss_value = match &out.loss {
            Some(loss) => {
                let v = loss.item()?;
                if !v.is_finite() {
                    return Err(Error::Diverged(format!(
                        "cycle loss became {v} at batch {batch_idx}"
                    )));
                }
                opt.zero_grads();
                loss.backward()?;
                opt.step();
                v
            }
            None => 0.0,
        };
        batches_run += 1;
        writeln!(
            log,
            "batch {batch_idx} loss {loss_value:.6} skipped {}",
            out.skipped
        )
        .map_err(|e| Error::io("train log", e))?;

        if (batch_idx + 1) % cfg.validate_every == 0 {
            let val = validation_epe(model, val_pairs, q, cfg.seed, val_sigma, val_amplitude)?;
            writeln!(log, "val {} epe {val:.6}", batch_idx + 1)
                .map_err(|e| Error::io("train log", e))?;
            validations += 1;
            if val < best_val {
                best_val = val;
                best_snapshot = snapshot(model);
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break 'outer;
                }
            }
        }
    }

    restore(model, &best_snapshot);
    Ok(FinetuneOutcome {
        batches_run,
        validations,
        initial_val_epe: initial_val,
        best_val_epe: best_val,
        skipped_triplets: skipped_total,
    })
}

/// Convenience for tests and pipelines: make a triplet from three cubes.
pub fn triplet(a: HsiCube, b: HsiCube, c: HsiCube) -> Triplet {
    Triplet {
        a,
        b,
        c,
        teacher_file: None,
    }
}

#[cfg(test)]
mod tests;
