use xraft_core::imaging::{synth_scene, synth_modality, ModalityRecipe, ColorMatrix, Modality};
use xraft_core::model::{BaseModel, Hyper, InputMode, batch_inputs, build_xraft};
use xraft_core::rng::{stream_rng, Stream};
use xraft_core::tensor::no_grad;
use std::time::Instant;

#[test]
fn timing_probe() {
    let mut rng = stream_rng(1, Stream::ModelInit, 0);
    let hyper = Hyper::default();
    let base = BaseModel::<f32>::new(&mut rng, hyper.clone());
    let q = ColorMatrix::default_for_bands(10);
    let model = build_xraft(&base, InputMode::Hsi, &q).unwrap();
    let mut srng = stream_rng(2, Stream::Scenes, 0);
    let n = 8;
    let whites: Vec<_> = (0..n).map(|_| synth_scene(&mut srng, 64, 64, 10)).collect();
    let blues: Vec<_> = whites.iter().map(|w| synth_modality(w, &ModalityRecipe::default_blue(3))).collect();
    let wrefs: Vec<&_> = whites.iter().collect();
    let brefs: Vec<&_> = blues.iter().collect();
    let x = batch_inputs::<f32>(&wrefs, InputMode::Hsi, &q).unwrap();
    let y = batch_inputs::<f32>(&brefs, InputMode::Hsi, &q).unwrap();

    // no-grad forward
    let t0 = Instant::now();
    let _ = no_grad(|| model.forward(&x, &y, Modality::White, Modality::Blue, 8)).unwrap();
    let fwd_nograd = t0.elapsed();

    // grad forward
    model.set_trainable(xraft_core::model::TrainPolicy::CrossEncodersOnly);
    let t1 = Instant::now();
    let outs = model.forward(&x, &y, Modality::White, Modality::Blue, 8).unwrap();
    let fwd_grad = t1.elapsed();

    let loss = outs[0].mul(&outs[0]).unwrap().sum()
        .add(&outs[1].mul(&outs[1]).unwrap().sum()).unwrap()
        .add(&outs[2].mul(&outs[2]).unwrap().sum()).unwrap();
    let t2 = Instant::now();
    loss.backward().unwrap();
    let bwd = t2.elapsed();

    println!("batch={n} 64x64: fwd_nograd={fwd_nograd:?} fwd_grad={fwd_grad:?} bwd(first3)={bwd:?}");
}
