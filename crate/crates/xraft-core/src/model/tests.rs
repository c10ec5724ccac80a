use super::*;
use crate::imaging::{synth_modality, synth_scene, ModalityRecipe};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{finite_diff_check, Adam, AdamConfig};

fn small_hyper() -> Hyper {
    Hyper {
        mode: InputMode::Rgb,
        input_channels: 3,
        bands: 6,
        feature_dim: 12,
        hidden_dim: 8,
        context_dim: 8,
        downsample: 4,
        corr_levels: 2,
        corr_radius: 2,
        iterations: 3,
        ..Hyper::default()
    }
}

fn test_pair(seed: u64) -> (crate::imaging::HsiCube, crate::imaging::HsiCube) {
    let mut rng = stream_rng(seed, Stream::Scenes, 0);
    let white = synth_scene(&mut rng, 16, 16, 6);
    let blue = synth_modality(&white, &ModalityRecipe::default_blue(seed));
    (white, blue)
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

#[test]
fn init_cross_rgb_channel_sum() {
    let w = Tensor::<f32>::new(&[1, 3, 1, 1], vec![0.2, 0.3, 0.5]).unwrap();
    let b = init_cross_rgb(&w).unwrap();
    assert_eq!(b.to_vec(), vec![0.0, 0.0, 1.0]);
}

#[test]
fn init_cross_rgb_blue_only_is_fixed_point() {
    let w = Tensor::<f32>::new(&[2, 3, 1, 1], vec![0.0, 0.0, 0.7, 0.0, 0.0, -0.3]).unwrap();
    let b = init_cross_rgb(&w).unwrap();
    assert_eq!(b.to_vec(), w.to_vec());
}

#[test]
fn init_cross_rgb_conv_equals_conv_on_bbb() {
    let mut rng = stream_rng(3, Stream::ModelInit, 0);
    let layer = encoder::ConvLayer::<f32>::new(&mut rng, 3, 5, 3, 1, 1);
    let b_weight = init_cross_rgb(&layer.weight).unwrap();

    let (white, _) = test_pair(4);
    let q = crate::imaging::ColorMatrix::default_for_bands(6);
    let rgb = crate::imaging::to_rgb(&white, &q).unwrap();
    let bbb = crate::imaging::to_bbb(&rgb).unwrap();
    let x = rgb.to_tensor::<f32>().reshape(&[1, 3, 16, 16]).unwrap();
    let y = bbb.to_tensor::<f32>().reshape(&[1, 3, 16, 16]).unwrap();

    let via_b = x.conv2d(&b_weight, &layer.bias, 1, 1).unwrap();
    let via_a = y.conv2d(&layer.weight, &layer.bias, 1, 1).unwrap();
    assert!(max_abs_diff(&via_b.to_vec(), &via_a.to_vec()) <= 1e-5);
}

#[test]
fn lift_identity_matrix_keeps_weights() {
    let q = crate::imaging::ColorMatrix::new(3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    let w = Tensor::<f32>::new(&[2, 3, 1, 1], vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]).unwrap();
    let c = lift_rgb_to_hsi(&w, &q).unwrap();
    assert_eq!(c.to_vec(), w.to_vec());

    let zero = Tensor::<f32>::zeros(&[2, 3, 3, 3]);
    let lifted = lift_rgb_to_hsi(&zero, &crate::imaging::ColorMatrix::default_for_bands(8)).unwrap();
    assert!(lifted.to_vec().iter().all(|v| *v == 0.0));
}

#[test]
fn lift_conv_equals_conv_on_rgb() {
    let mut rng = stream_rng(5, Stream::ModelInit, 1);
    let layer = encoder::ConvLayer::<f32>::new(&mut rng, 3, 4, 3, 2, 1);
    let q = crate::imaging::ColorMatrix::default_for_bands(6);
    let lifted = lift_rgb_to_hsi(&layer.weight, &q).unwrap();

    let (white, _) = test_pair(6);
    let cube_t = white.to_tensor::<f32>().reshape(&[1, 6, 16, 16]).unwrap();
    let rgb = crate::imaging::to_rgb(&white, &q).unwrap();
    let rgb_t = rgb.to_tensor::<f32>().reshape(&[1, 3, 16, 16]).unwrap();

    let via_c = cube_t.conv2d(&lifted, &layer.bias, 2, 1).unwrap();
    let via_b = rgb_t.conv2d(&layer.weight, &layer.bias, 2, 1).unwrap();
    assert!(max_abs_diff(&via_c.to_vec(), &via_b.to_vec()) <= 1e-4);
}

#[test]
fn forward_returns_one_field_per_iteration() {
    let mut rng = stream_rng(7, Stream::ModelInit, 2);
    let base = BaseModel::<f32>::new(&mut rng, small_hyper());
    let (white, _) = test_pair(8);
    let q = crate::imaging::ColorMatrix::default_for_bands(6);
    let x = batch_inputs::<f32>(&[&white], InputMode::Rgb, &q).unwrap();
    let outs = base.forward(&x, &x, 5).unwrap();
    assert_eq!(outs.len(), 5);
    for o in &outs {
        assert_eq!(o.shape(), &[1, 2, 16, 16]);
    }
}

#[test]
fn forward_rejects_indivisible_dims() {
    let mut rng = stream_rng(9, Stream::ModelInit, 3);
    let base = BaseModel::<f32>::new(&mut rng, small_hyper());
    let x = Tensor::<f32>::zeros(&[1, 3, 12, 12]);
    assert!(base.forward(&x, &x, 2).is_err());
}

#[test]
fn encoder_selection_is_non_directional_and_keys_are_distinct() {
    let mut rng = stream_rng(11, Stream::ModelInit, 4);
    let base = BaseModel::<f32>::new(&mut rng, small_hyper());
    let q = crate::imaging::ColorMatrix::default_for_bands(6);
    let model = build_xraft(&base, InputMode::Rgb, &q).unwrap();
    let (white, _) = test_pair(12);
    let x = batch_inputs::<f32>(&[&white], InputMode::Rgb, &q).unwrap();

    // Same key regardless of the image's role in the pair.
    let wb = ModalityPairKey::new(Modality::White, Modality::Blue);
    let as_src = model.encode(&x, wb, EncoderKind::Feature).unwrap();
    let as_tgt = model.encode(&x, wb, EncoderKind::Feature).unwrap();
    assert_eq!(as_src.to_vec(), as_tgt.to_vec());

    // Perturb the wb slot: wb and ww now disagree on the same image.
    {
        let p = &model.bank.feature[wb.index()].first_conv().weight;
        let mut d = p.data_mut();
        d[0] += 0.25;
    }
    let via_wb = model.encode(&x, wb, EncoderKind::Feature).unwrap();
    let ww = ModalityPairKey::new(Modality::White, Modality::White);
    let via_ww = model.encode(&x, ww, EncoderKind::Feature).unwrap();
    assert!(max_abs_diff(&via_wb.to_vec(), &via_ww.to_vec()) > 1e-4);
}

#[test]
fn build_rgb_cross_forward_equals_base_on_bbb() {
    let mut rng = stream_rng(13, Stream::ModelInit, 5);
    let base = BaseModel::<f32>::new(&mut rng, small_hyper());
    let q = crate::imaging::ColorMatrix::default_for_bands(6);
    let model = build_xraft(&base, InputMode::Rgb, &q).unwrap();

    let (white, blue) = test_pair(14);
    let x = batch_inputs::<f32>(&[&white], InputMode::Rgb, &q).unwrap();
    let y = batch_inputs::<f32>(&[&blue], InputMode::Rgb, &q).unwrap();
    let bx = batch_inputs::<f32>(&[&white], InputMode::Bbb, &q).unwrap();
    let by = batch_inputs::<f32>(&[&blue], InputMode::Bbb, &q).unwrap();

    let cross = model
        .forward(&x, &y, Modality::White, Modality::Blue, 3)
        .unwrap();
    let on_bbb = base.forward(&bx, &by, 3).unwrap();
    for (a, b) in cross.iter().zip(&on_bbb) {
        assert!(
            max_abs_diff(&a.to_vec(), &b.to_vec()) <= 1e-4,
            "cross-modal flow differs from base-on-BBB"
        );
    }
}

#[test]
fn build_hsi_forward_equals_rgb_on_converted_inputs() {
    let mut rng = stream_rng(15, Stream::ModelInit, 6);
    let base = BaseModel::<f32>::new(&mut rng, small_hyper());
    let q = crate::imaging::ColorMatrix::default_for_bands(6);
    let rgb_model = build_xraft(&base, InputMode::Rgb, &q).unwrap();
    let hsi_model = build_xraft(&base, InputMode::Hsi, &q).unwrap();

    let (white, blue) = test_pair(16);
    let cube_x = batch_inputs::<f32>(&[&white], InputMode::Hsi, &q).unwrap();
    let cube_y = batch_inputs::<f32>(&[&blue], InputMode::Hsi, &q).unwrap();
    let rgb_x = batch_inputs::<f32>(&[&white], InputMode::Rgb, &q).unwrap();
    let rgb_y = batch_inputs::<f32>(&[&blue], InputMode::Rgb, &q).unwrap();

    let hsi = hsi_model
        .forward(&cube_x, &cube_y, Modality::White, Modality::Blue, 3)
        .unwrap();
    let rgb = rgb_model
        .forward(&rgb_x, &rgb_y, Modality::White, Modality::Blue, 3)
        .unwrap();
    for (a, b) in hsi.iter().zip(&rgb) {
        assert!(max_abs_diff(&a.to_vec(), &b.to_vec()) <= 1e-4);
    }
}

#[test]
fn build_clones_straight_slot_exactly() {
    let mut rng = stream_rng(17, Stream::ModelInit, 7);
    let base = BaseModel::<f32>::new(&mut rng, small_hyper());
    let q = crate::imaging::ColorMatrix::default_for_bands(6);
    let model = build_xraft(&base, InputMode::Rgb, &q).unwrap();
    let mut base_params = Vec::new();
    base.feature.collect_params("feature", &mut base_params);
    let mut ww_params = Vec::new();
    model.bank.feature[0].collect_params("feature", &mut ww_params);
    for ((_, a), (_, b)) in base_params.iter().zip(&ww_params) {
        assert_eq!(a.to_vec(), b.to_vec());
    }
}

#[test]
fn default_policy_freezes_everything_but_cross_encoders() {
    let mut rng = stream_rng(19, Stream::ModelInit, 8);
    let base = BaseModel::<f32>::new(&mut rng, small_hyper());
    let q = crate::imaging::ColorMatrix::default_for_bands(6);
    let model = build_xraft(&base, InputMode::Rgb, &q).unwrap();
    model.set_trainable(TrainPolicy::CrossEncodersOnly);

    let (white, blue) = test_pair(20);
    let x = batch_inputs::<f32>(&[&white], InputMode::Rgb, &q).unwrap();
    let y = batch_inputs::<f32>(&[&blue], InputMode::Rgb, &q).unwrap();
    // Both directions, as in a real training step: the source context
    // encoder of each direction participates.
    let wb = model
        .forward(&x, &y, Modality::White, Modality::Blue, 2)
        .unwrap();
    let bw = model
        .forward(&y, &x, Modality::Blue, Modality::White, 2)
        .unwrap();
    let lw = wb.last().unwrap().mul(wb.last().unwrap()).unwrap().sum();
    let lb = bw.last().unwrap().mul(bw.last().unwrap()).unwrap().sum();
    let loss = lw.add(&lb).unwrap();
    loss.backward().unwrap();

    for (name, p) in model.params() {
        let cross = name.contains(".wb.") || name.contains(".bw.");
        if cross {
            assert!(p.has_grad(), "{name} should receive gradient");
        } else {
            assert!(!p.has_grad(), "{name} is frozen but received gradient");
        }
    }

    // Frozen slots stay byte-identical under optimizer steps.
    let before: Vec<Vec<f32>> = model
        .params()
        .iter()
        .filter(|(n, _)| n.contains(".ww.") || n.contains(".bb.") || n.starts_with("update"))
        .map(|(_, p)| p.to_vec())
        .collect();
    let trainable: Vec<_> = model.trainable_params().into_iter().map(|(_, p)| p).collect();
    let mut opt = Adam::new(&trainable, AdamConfig::default()).unwrap();
    opt.step();
    opt.step();
    let after: Vec<Vec<f32>> = model
        .params()
        .iter()
        .filter(|(n, _)| n.contains(".ww.") || n.contains(".bb.") || n.starts_with("update"))
        .map(|(_, p)| p.to_vec())
        .collect();
    assert_eq!(before, after);
}

#[test]
fn all_trainable_policy_reaches_every_parameter() {
    let mut rng = stream_rng(21, Stream::ModelInit, 9);
    let base = BaseModel::<f32>::new(&mut rng, small_hyper());
    let q = crate::imaging::ColorMatrix::default_for_bands(6);
    let model = build_xraft(&base, InputMode::Rgb, &q).unwrap();
    model.set_trainable(TrainPolicy::All);

    let (white, blue) = test_pair(22);
    let x = batch_inputs::<f32>(&[&white], InputMode::Rgb, &q).unwrap();
    let y = batch_inputs::<f32>(&[&blue], InputMode::Rgb, &q).unwrap();
    // Both pair orders so that every slot participates.
    let a = model
        .forward(&x, &y, Modality::White, Modality::Blue, 2)
        .unwrap();
    let b = model
        .forward(&y, &x, Modality::Blue, Modality::White, 2)
        .unwrap();
    let c = model
        .forward(&x, &x, Modality::White, Modality::White, 2)
        .unwrap();
    let d = model
        .forward(&y, &y, Modality::Blue, Modality::Blue, 2)
        .unwrap();
    let mut loss = Tensor::scalar(0.0f32);
    for outs in [a, b, c, d] {
        let last = outs.last().unwrap();
        loss = loss.add(&last.mul(last).unwrap().sum()).unwrap();
    }
    loss.backward().unwrap();
    for (name, p) in model.params() {
        assert!(p.has_grad(), "{name} received no gradient");
    }
}

#[test]
fn checkpoint_round_trip_preserves_forward_bit_exactly() {
    let mut rng = stream_rng(23, Stream::ModelInit, 10);
    let base = BaseModel::<f32>::new(&mut rng, small_hyper());
    let q = crate::imaging::ColorMatrix::default_for_bands(6);
    let model = build_xraft(&base, InputMode::Hsi, &q).unwrap();

    let dir = std::env::temp_dir().join("xraft-model-tests");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join(format!("{}-roundtrip.xrft", std::process::id()));
    model.save(&path).unwrap();
    let loaded = XRaftModel::<f32>::from_checkpoint(&load_checkpoint(&path).unwrap()).unwrap();

    let (white, blue) = test_pair(24);
    let x = batch_inputs::<f32>(&[&white], InputMode::Hsi, &q).unwrap();
    let y = batch_inputs::<f32>(&[&blue], InputMode::Hsi, &q).unwrap();
    let a = model
        .forward(&x, &y, Modality::White, Modality::Blue, 3)
        .unwrap();
    let b = loaded
        .forward(&x, &y, Modality::White, Modality::Blue, 3)
        .unwrap();
    for (u, v) in a.iter().zip(&b) {
        assert_eq!(u.to_vec(), v.to_vec(), "forward differs after round trip");
    }
}

#[test]
fn checkpoint_rejects_corruption() {
    let mut rng = stream_rng(25, Stream::ModelInit, 11);
    let base = BaseModel::<f32>::new(&mut rng, small_hyper());
    let dir = std::env::temp_dir().join("xraft-model-tests");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join(format!("{}-corrupt.xrft", std::process::id()));
    base.save(&path).unwrap();

    // Wrong version.
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[4] = 99;
    let vpath = dir.join(format!("{}-version.xrft", std::process::id()));
    std::fs::write(&vpath, &bytes).unwrap();
    assert!(load_checkpoint(&vpath).unwrap_err().to_string().contains("version"));

    // Truncation.
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() / 2);
    let tpath = dir.join(format!("{}-trunc.xrft", std::process::id()));
    std::fs::write(&tpath, &bytes).unwrap();
    assert!(load_checkpoint(&tpath).unwrap_err().to_string().contains("truncated"));

    // Wrong magic.
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'Z';
    let mpath = dir.join(format!("{}-magic.xrft", std::process::id()));
    std::fs::write(&mpath, &bytes).unwrap();
    assert!(load_checkpoint(&mpath).unwrap_err().to_string().contains("magic"));
}

#[test]
fn fd_update_cell_gradients() {
    let mut rng = stream_rng(27, Stream::ModelInit, 12);
    let corr_ch = 8;
    let (hd, cd) = (4, 4);
    let update = UpdateBlock::<f64>::new(&mut rng, corr_ch, hd, cd);
    let mk = |rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize]| {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| crate::fields::uniform(rng, -1.0, 1.0) as f64)
            .collect();
        Tensor::<f64>::param(shape, data).unwrap()
    };
    let hidden = mk(&mut rng, &[1, hd, 3, 3]);
    let ctx = mk(&mut rng, &[1, cd, 3, 3]);
    let corr = mk(&mut rng, &[1, corr_ch, 3, 3]);
    let flow = mk(&mut rng, &[1, 2, 3, 3]);

    let mut params = Vec::new();
    update.collect_params("update", &mut params);
    let mut inputs: Vec<Tensor<f64>> = params.into_iter().map(|(_, p)| p).collect();
    inputs.extend([hidden.clone(), ctx.clone(), corr.clone(), flow.clone()]);

    let report = finite_diff_check(
        &inputs,
        || {
            let (h2, delta) = update.step(&hidden, &ctx, &corr, &flow)?;
            Ok(h2.mul(&h2)?.sum().add(&delta.mul(&delta)?.sum())?)
        },
        1e-5,
        24,
    )
    .unwrap();
    assert!(
        report.max_rel_err <= 1e-4,
        "update cell gradients off: {}",
        report.max_rel_err
    );
}
