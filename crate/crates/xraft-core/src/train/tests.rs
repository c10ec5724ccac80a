use super::*;
use crate::eval::identity_pair;
use crate::flow::{combined_mask, dark_mask, epe, occlusion_mask, FlowField};
use crate::imaging::{synth_modality, synth_scene, ColorMatrix, ModalityRecipe};
use crate::model::{build_xraft, Hyper, XRaftModel};
use crate::tensor::no_grad;

fn tiny_hyper() -> Hyper {
    Hyper {
        bands: 4,
        feature_dim: 12,
        hidden_dim: 8,
        context_dim: 8,
        downsample: 4,
        corr_levels: 2,
        corr_radius: 2,
        iterations: 4,
        ..Hyper::default()
    }
}

fn tiny_setup(seed: u64) -> (BaseModel<f32>, ColorMatrix, Vec<HsiCube>) {
    let mut rng = stream_rng(seed, Stream::ModelInit, 0);
    let base = BaseModel::<f32>::new(&mut rng, tiny_hyper());
    let q = ColorMatrix::default_for_bands(4);
    let mut srng = stream_rng(seed, Stream::Scenes, 0);
    let scenes: Vec<HsiCube> = (0..6).map(|_| synth_scene(&mut srng, 16, 16, 4)).collect();
    (base, q, scenes)
}

fn tiny_triplet(scene: &HsiCube, seed: u64) -> Triplet {
    let recipe = |s: u64, amp: f32| DeformRecipe::new(s, 4.0, amp);
    let f_a = gen_deformation(16, 16, &recipe(seed, 1.0));
    let f_b = gen_deformation(16, 16, &recipe(seed ^ 1, 1.5));
    let f_c = gen_deformation(16, 16, &recipe(seed ^ 2, 2.0));
    let blue = synth_modality(scene, &ModalityRecipe::default_blue(seed));
    triplet(
        apply_deformation(scene, &f_a).unwrap(),
        apply_deformation(&blue, &f_b).unwrap(),
        apply_deformation(scene, &f_c).unwrap(),
    )
}

#[test]
fn pretrain_zero_deformation_learns_zero_flow() {
    let (base, q, scenes) = tiny_setup(31);
    let cfg = PretrainConfig {
        steps: 60,
        batch_size: 4,
        learning_rate: 1e-3,
        seed: 5,
        identity_fraction: 1.0,
        ..PretrainConfig::default()
    };
    let mut log = Vec::new();
    let out = pretrain(&base, &scenes, &q, &cfg, &mut log).unwrap();
    // Loss on the task decreases over training.
    let head: f32 = out.losses[..10].iter().sum::<f32>() / 10.0;
    let tail: f32 = out.losses[out.losses.len() - 10..].iter().sum::<f32>() / 10.0;
    assert!(tail < head, "no improvement: head {head}, tail {tail}");

    // Identical source/target: the final mean flow magnitude is small.
    let s = crate::model::batch_inputs::<f32>(&[&scenes[0]], InputMode::Rgb, &q).unwrap();
    let outs = no_grad(|| base.forward(&s, &s, base.hyper.iterations)).unwrap();
    let f = FlowField::from_tensor(outs.last().unwrap(), 0).unwrap();
    assert!(f.mean_norm() < 0.5, "mean flow {} px", f.mean_norm());
}

#[test]
fn pretrain_is_deterministic() {
    let (base1, q, scenes) = tiny_setup(37);
    let cfg = PretrainConfig {
        steps: 8,
        batch_size: 2,
        learning_rate: 1e-3,
        seed: 11,
        ..PretrainConfig::default()
    };
    let mut log1 = Vec::new();
    let out1 = pretrain(&base1, &scenes, &q, &cfg, &mut log1).unwrap();
    let (base2, _, _) = tiny_setup(37);
    let mut log2 = Vec::new();
    let out2 = pretrain(&base2, &scenes, &q, &cfg, &mut log2).unwrap();
    assert_eq!(out1.losses, out2.losses);
    assert_eq!(log1, log2);
}

#[test]
fn teacher_flow_file_provenance_is_verbatim() {
    let (base, q, scenes) = tiny_setup(41);
    let stored = gen_deformation(16, 16, &DeformRecipe::new(3, 4.0, 2.0));
    let mut t = tiny_triplet(&scenes[0], 42);
    t.teacher_file = Some(stored.clone());
    let got = teacher_flow(&t, &base, &q).unwrap();
    assert_eq!(got.data, stored.data);
}

#[test]
fn teacher_parameters_unchanged_by_inference() {
    let (base, q, scenes) = tiny_setup(43);
    let before: Vec<Vec<f32>> = base.params().iter().map(|(_, p)| p.to_vec()).collect();
    let t = tiny_triplet(&scenes[1], 44);
    for _ in 0..3 {
        teacher_flow(&t, &base, &q).unwrap();
        teacher_flow_reverse(&t, &base, &q).unwrap();
    }
    let after: Vec<Vec<f32>> = base.params().iter().map(|(_, p)| p.to_vec()).collect();
    assert_eq!(before, after);
}

fn build_tiny_xraft(seed: u64) -> (XRaftModel<f32>, BaseModel<f32>, ColorMatrix, Vec<HsiCube>) {
    let (base, q, scenes) = tiny_setup(seed);
    let model = build_xraft(&base, InputMode::Rgb, &q).unwrap();
    (model, base, q, scenes)
}

#[test]
fn cycle_loss_zero_when_model_matches_teacher() {
    let (model, _base, q, scenes) = build_tiny_xraft(47);
    let t = tiny_triplet(&scenes[2], 48);
    let cfg = TrainConfig {
        supervised_iterations: 1,
        ..TrainConfig::default()
    };
    // Teacher = the model's own first-iteration composition: the loss on
    // the masked support is exactly zero.
    let composed = no_grad(|| -> crate::error::Result<FlowField> {
        let a = crate::model::batch_inputs::<f32>(&[&t.a], InputMode::Rgb, &q)?;
        let b = crate::model::batch_inputs::<f32>(&[&t.b], InputMode::Rgb, &q)?;
        let c = crate::model::batch_inputs::<f32>(&[&t.c], InputMode::Rgb, &q)?;
        let f_ab = model.forward(&a, &b, Modality::White, Modality::Blue, 4)?;
        let f_bc = model.forward(&b, &c, Modality::Blue, Modality::White, 4)?;
        let comp = crate::flow::compose_tensor(&f_ab[0], &f_bc[0])?;
        FlowField::from_tensor(&comp, 0)
    })
    .unwrap();
    let mut reverse = composed.clone();
    for v in reverse.data.iter_mut() {
        *v = -*v;
    }
    let out = cycle_loss(
        &model,
        &[&t],
        &[(composed, reverse)],
        &q,
        &cfg,
    )
    .unwrap();
    assert_eq!(out.skipped, 0);
    let loss = out.loss.unwrap().item().unwrap();
    assert!(loss <= 1e-6, "loss {loss}");
}

#[test]
fn cycle_loss_skips_all_dark_blue() {
    let (model, base, q, scenes) = build_tiny_xraft(53);
    let mut t = tiny_triplet(&scenes[3], 54);
    t.b = HsiCube::zeros(16, 16, 4, crate::imaging::Modality::Blue);
    let teachers = vec![(
        teacher_flow(&t, &base, &q).unwrap(),
        teacher_flow_reverse(&t, &base, &q).unwrap(),
    )];
    let out = cycle_loss(&model, &[&t], &teachers, &q, &TrainConfig::default()).unwrap();
    assert!(out.loss.is_none());
    assert_eq!(out.skipped, 1);
}

#[test]
fn cycle_loss_matches_per_pixel_oracle() {
    let (model, base, q, scenes) = build_tiny_xraft(59);
    let t = tiny_triplet(&scenes[4], 60);
    let teachers = vec![(
        teacher_flow(&t, &base, &q).unwrap(),
        teacher_flow_reverse(&t, &base, &q).unwrap(),
    )];
    let cfg = TrainConfig::default();
    let out = cycle_loss(&model, &[&t], &teachers, &q, &cfg).unwrap();
    let got = out.loss.expect("mask support expected").item().unwrap();

    // Independent recomputation from the model's raw flows.
    let (f_ab, f_bc, f_ba, f_cb) = no_grad(|| -> crate::error::Result<_> {
        let a = crate::model::batch_inputs::<f32>(&[&t.a], InputMode::Rgb, &q)?;
        let b = crate::model::batch_inputs::<f32>(&[&t.b], InputMode::Rgb, &q)?;
        let c = crate::model::batch_inputs::<f32>(&[&t.c], InputMode::Rgb, &q)?;
        let it = model.hyper.iterations;
        let ab = model.forward(&a, &b, Modality::White, Modality::Blue, it)?;
        let bc = model.forward(&b, &c, Modality::Blue, Modality::White, it)?;
        let ba = model.forward(&b, &a, Modality::Blue, Modality::White, it)?;
        let cb = model.forward(&c, &b, Modality::White, Modality::Blue, it)?;
        let to_fields = |v: &[crate::tensor::Tensor<f32>]| -> crate::error::Result<Vec<FlowField>> {
            v.iter().map(|t| FlowField::from_tensor(t, 0)).collect()
        };
        Ok((
            to_fields(&ab)?,
            to_fields(&bc)?,
            to_fields(&ba)?,
            to_fields(&cb)?,
        ))
    })
    .unwrap();

    let m_ac = occlusion_mask(&teachers[0].0, &teachers[0].1, cfg.eps_occlusion).unwrap();
    let m_ab = occlusion_mask(f_ab.last().unwrap(), f_ba.last().unwrap(), cfg.eps_occlusion).unwrap();
    let m_bc = occlusion_mask(f_bc.last().unwrap(), f_cb.last().unwrap(), cfg.eps_occlusion).unwrap();
    let m_db = dark_mask(&t.b, cfg.eps_dark).unwrap();
    let mask = combined_mask(&m_ac, &m_ab, &m_bc, &m_db, f_ab.last().unwrap()).unwrap();

    let mut want = 0.0f64;
    for k in 0..cfg.supervised_iterations {
        let composed = crate::flow::compose(&f_ab[k], &f_bc[k]).unwrap();
        want += epe(&composed, &teachers[0].0, Some(&mask)).unwrap() as f64;
    }
    want /= cfg.supervised_iterations as f64;
    assert!(
        (got as f64 - want).abs() <= 1e-5,
        "cycle loss {got} vs oracle {want}"
    );
}

#[test]
fn finetune_flat_validation_stops_and_keeps_earliest_best() {
    let (model, base, q, scenes) = build_tiny_xraft(61);
    let triplets: Vec<Triplet> = (0..4).map(|i| tiny_triplet(&scenes[i % 6], 70 + i as u64)).collect();
    let val: Vec<(HsiCube, HsiCube)> = (0..2)
        .map(|i| identity_pair(80 + i as u64, 16, 4))
        .collect();
    let cfg = TrainConfig {
        batch_size: 2,
        // Vanishing learning rate: validation cannot improve.
        learning_rate: 1e-13,
        validate_every: 1,
        patience: 2,
        max_batches: 50,
        seed: 3,
        ..TrainConfig::default()
    };
    let before: Vec<Vec<f32>> = model.params().iter().map(|(_, p)| p.to_vec()).collect();
    let mut log = Vec::new();
    let out = finetune(&model, &base, &triplets, &val, &q, &cfg, 4.0, 2.0, &mut log).unwrap();
    assert_eq!(out.batches_run, cfg.patience * cfg.validate_every);
    assert!((out.best_val_epe - out.initial_val_epe).abs() <= 1e-6);
    // Best checkpoint is the initial state.
    let after: Vec<Vec<f32>> = model.params().iter().map(|(_, p)| p.to_vec()).collect();
    assert_eq!(before, after);
}

#[test]
fn finetune_keeps_frozen_slots_byte_identical() {
    let (model, base, q, scenes) = build_tiny_xraft(67);
    let triplets: Vec<Triplet> = (0..4).map(|i| tiny_triplet(&scenes[i % 6], 90 + i as u64)).collect();
    let val = vec![identity_pair(99, 16, 4)];
    let cfg = TrainConfig {
        batch_size: 2,
        learning_rate: 1e-4,
        validate_every: 2,
        patience: 1,
        max_batches: 4,
        seed: 5,
        ..TrainConfig::default()
    };
    let frozen_before: Vec<Vec<f32>> = model
        .params()
        .iter()
        .filter(|(n, _)| n.contains(".ww.") || n.contains(".bb.") || n.starts_with("update"))
        .map(|(_, p)| p.to_vec())
        .collect();
    let mut log = Vec::new();
    finetune(&model, &base, &triplets, &val, &q, &cfg, 4.0, 2.0, &mut log).unwrap();
    let frozen_after: Vec<Vec<f32>> = model
        .params()
        .iter()
        .filter(|(n, _)| n.contains(".ww.") || n.contains(".bb.") || n.starts_with("update"))
        .map(|(_, p)| p.to_vec())
        .collect();
    assert_eq!(frozen_before, frozen_after);
}

#[test]
fn finetune_is_deterministic() {
    let run = || -> (Vec<u8>, Vec<f32>) {
        let (model, base, q, scenes) = build_tiny_xraft(71);
        let triplets: Vec<Triplet> =
            (0..4).map(|i| tiny_triplet(&scenes[i % 6], 110 + i as u64)).collect();
        let val = vec![identity_pair(120, 16, 4)];
        let cfg = TrainConfig {
            batch_size: 2,
            learning_rate: 1e-4,
            validate_every: 2,
            patience: 1,
            max_batches: 4,
            seed: 9,
            ..TrainConfig::default()
        };
        let mut log = Vec::new();
        finetune(&model, &base, &triplets, &val, &q, &cfg, 4.0, 2.0, &mut log).unwrap();
        let params: Vec<f32> = model
            .params()
            .iter()
            .flat_map(|(_, p)| p.to_vec())
            .collect();
        (log, params)
    };
    let (log1, p1) = run();
    let (log2, p2) = run();
    assert_eq!(log1, log2, "loss traces differ");
    assert_eq!(p1, p2, "final checkpoints differ");
}
