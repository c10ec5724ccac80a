//! Teacher supervision and the masked flow-cycle-consistency loss.

use crate::error::{Error, Result};
use crate::flow::{
    combined_mask, compose_tensor, dark_mask, epe_tensor_per_sample, masks_to_weight_tensor,
    occlusion_mask, FlowField, ValidityMask,
};
use crate::imaging::{ColorMatrix, HsiCube};
use crate::model::{batch_inputs, BaseModel, InputMode, Modality, XRaftModel};
use crate::tensor::{no_grad, Scalar, Tensor};

use super::{TrainConfig, Triplet};

/// Teacher flow between the two white frames of a triplet. File-provided
/// flows are returned verbatim; otherwise the frozen teacher runs its
/// single-modality branch on RGB renderings, with no gradients recorded.
pub fn teacher_flow(
    triplet: &Triplet,
    teacher: &BaseModel<f32>,
    q: &ColorMatrix,
) -> Result<FlowField> {
    if let Some(file_flow) = &triplet.teacher_file {
        return Ok(file_flow.clone());
    }
    teacher_infer(teacher, &triplet.a, &triplet.c, q)
}

/// Reverse teacher flow (white C back to white A), always model-computed;
/// it only feeds the occlusion mask.
pub fn teacher_flow_reverse(
    triplet: &Triplet,
    teacher: &BaseModel<f32>,
    q: &ColorMatrix,
) -> Result<FlowField> {
    teacher_infer(teacher, &triplet.c, &triplet.a, q)
}

fn teacher_infer(
    teacher: &BaseModel<f32>,
    source: &HsiCube,
    target: &HsiCube,
    q: &ColorMatrix,
) -> Result<FlowField> {
    no_grad(|| {
        let s = batch_inputs::<f32>(&[source], InputMode::Rgb, q)?;
        let t = batch_inputs::<f32>(&[target], InputMode::Rgb, q)?;
        let outs = teacher.forward(&s, &t, teacher.hyper.iterations)?;
        FlowField::from_tensor(outs.last().expect("at least one iteration"), 0)
    })
}

/// Value of the cycle loss over a batch of triplets, plus bookkeeping.
pub struct CycleLossOutput<T: Scalar> {
    /// Mean masked cycle EPE over the supervised iterations and the
    /// triplets with mask support; absent when every triplet was skipped.
    pub loss: Option<Tensor<T>>,
    /// Triplets whose combined mask was empty.
    pub skipped: usize,
}

/// Masked flow-cycle-consistency loss over a batch.
///
/// For each triplet, the model infers white-to-blue and blue-to-white
/// flows through its cross-modal branches. The first
/// `supervised_iterations` iteration outputs are composed into a cycle
/// flow and scored against the teacher flow with a masked endpoint
/// error, equally weighted across iterations. Masks combine occlusion
/// checks on the teacher pair, both model directions, and the dark mask
/// of the blue cube; they are built from final-iteration flows and
/// detached from the gradient path.
pub fn cycle_loss<T: Scalar>(
    model: &XRaftModel<T>,
    triplets: &[&Triplet],
    teachers: &[(FlowField, FlowField)],
    q: &ColorMatrix,
    cfg: &TrainConfig,
) -> Result<CycleLossOutput<T>> {
    if triplets.is_empty() || triplets.len() != teachers.len() {
        return Err(Error::Invalid(format!(
            "cycle_loss: {} triplets vs {} teacher flows",
            triplets.len(),
            teachers.len()
        )));
    }
    let n = triplets.len();
    let mode = model.hyper.mode;
    let a_refs: Vec<&HsiCube> = triplets.iter().map(|t| &t.a).collect();
    let b_refs: Vec<&HsiCube> = triplets.iter().map(|t| &t.b).collect();
    let c_refs: Vec<&HsiCube> = triplets.iter().map(|t| &t.c).collect();
    let a_in = batch_inputs::<T>(&a_refs, mode, q)?;
    let b_in = batch_inputs::<T>(&b_refs, mode, q)?;
    let c_in = batch_inputs::<T>(&c_refs, mode, q)?;

    let iters = model.hyper.iterations;
    let f_ab = model.forward(&a_in, &b_in, Modality::White, Modality::Blue, iters)?;
    let f_bc = model.forward(&b_in, &c_in, Modality::Blue, Modality::White, iters)?;

    // Reverse-direction passes feed only the occlusion masks.
    let (f_ba_last, f_cb_last) = no_grad(|| -> Result<_> {
        let ba = model.forward(&b_in, &a_in, Modality::Blue, Modality::White, iters)?;
        let cb = model.forward(&c_in, &b_in, Modality::White, Modality::Blue, iters)?;
        Ok((
            ba.last().expect("iterations >= 1").detach(),
            cb.last().expect("iterations >= 1").detach(),
        ))
    })?;
    let f_ab_last = f_ab.last().expect("iterations >= 1").detach();
    let f_bc_last = f_bc.last().expect("iterations >= 1").detach();

    let mut masks: Vec<ValidityMask> = Vec::with_capacity(n);
    for (i, triplet) in triplets.iter().enumerate() {
        let (t_ac, t_ca) = &teachers[i];
        let ab = FlowField::from_tensor(&f_ab_last, i)?;
        let ba = FlowField::from_tensor(&f_ba_last, i)?;
        let bc = FlowField::from_tensor(&f_bc_last, i)?;
        let cb = FlowField::from_tensor(&f_cb_last, i)?;
        let m_ac = occlusion_mask(t_ac, t_ca, cfg.eps_occlusion)?;
        let m_ab = occlusion_mask(&ab, &ba, cfg.eps_occlusion)?;
        let m_bc = occlusion_mask(&bc, &cb, cfg.eps_occlusion)?;
        let m_db = dark_mask(&triplet.b, cfg.eps_dark)?;
        masks.push(combined_mask(&m_ac, &m_ab, &m_bc, &m_db, &ab)?);
    }
    let weight = masks_to_weight_tensor::<T>(&masks)?;

    let teacher_batch = {
        let mut data = Vec::with_capacity(n * 2 * triplets[0].a.height * triplets[0].a.width);
        for (t_ac, _) in teachers {
            data.extend(t_ac.data.iter().map(|v| T::from_f64(*v as f64)));
        }
        Tensor::<T>::new(
            &[n, 2, triplets[0].a.height, triplets[0].a.width],
            data,
        )?
    };

    let k_count = cfg.supervised_iterations.min(iters).max(1);
    let mut total: Option<Tensor<T>> = None;
    let mut supported = 0usize;
    for k in 0..k_count {
        let composed = compose_tensor(&f_ab[k], &f_bc[k])?;
        let (per_sample, sup) = epe_tensor_per_sample(&composed, &teacher_batch, &weight)?;
        supported = sup;
        let batch_sum = per_sample.sum();
        total = Some(match total {
            Some(t) => t.add(&batch_sum)?,
            None => batch_sum,
        });
    }
    if supported == 0 {
        return Ok(CycleLossOutput {
            loss: None,
            skipped: n,
        });
    }
    let scale = T::one() / T::from_usize(k_count * supported);
    Ok(CycleLossOutput {
        loss: Some(total.expect("at least one iteration").mul_scalar(scale)),
        skipped: n - supported,
    })
}
