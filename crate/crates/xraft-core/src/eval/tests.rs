use super::*;
use crate::flow::compose;

#[test]
fn gen_deformation_zero_amplitude_is_zero_field() {
    let f = gen_deformation(16, 12, &DeformRecipe::new(1, 8.0, 0.0));
    assert!(f.data.iter().all(|v| *v == 0.0));
}

#[test]
fn gen_deformation_max_norm_equals_amplitude() {
    for seed in [1u64, 2, 3] {
        let f = gen_deformation(32, 24, &DeformRecipe::new(seed, 6.0, 7.5));
        assert!((f.max_norm() - 7.5).abs() <= 1e-4, "max norm {}", f.max_norm());
    }
}

#[test]
fn gen_deformation_is_deterministic() {
    let a = gen_deformation(20, 20, &DeformRecipe::new(9, 8.0, 5.0));
    let b = gen_deformation(20, 20, &DeformRecipe::new(9, 8.0, 5.0));
    assert_eq!(a.data, b.data);
}

#[test]
fn apply_deformation_zero_flow_is_identity() {
    let (white, _) = identity_pair(5, 16, 4);
    let out = apply_deformation(&white, &FlowField::zeros(16, 16)).unwrap();
    assert_eq!(out.data, white.data);
}

#[test]
fn apply_deformation_integer_translation() {
    let (white, _) = identity_pair(6, 16, 3);
    let flow = FlowField::constant(16, 16, 2.0, 0.0);
    let out = apply_deformation(&white, &flow).unwrap();
    let hw = 256;
    for b in 0..3 {
        for y in 0..16 {
            for x in 0..14 {
                let got = out.data[b * hw + y * 16 + x];
                let want = white.data[b * hw + y * 16 + x + 2];
                assert!((got - want).abs() <= 1e-6);
            }
            // The last two columns sample outside and read zero.
            assert_eq!(out.data[b * hw + y * 16 + 15], 0.0);
        }
    }
}

#[test]
fn apply_deformation_band_independence() {
    let (white, _) = identity_pair(7, 16, 5);
    let flow = gen_deformation(16, 16, &DeformRecipe::new(8, 4.0, 3.0));
    let whole = apply_deformation(&white, &flow).unwrap();
    for b in 0..5 {
        let single = crate::imaging::HsiCube::from_data(
            16,
            16,
            1,
            white.modality,
            white.band(b).to_vec(),
        )
        .unwrap();
        let warped = apply_deformation(&single, &flow).unwrap();
        assert_eq!(warped.band(0), whole.band(b));
    }
}

#[test]
fn eval_synthetic_oracle_predictor_scores_near_zero() {
    let (white, blue) = identity_pair(9, 16, 4);
    let recipe = DeformRecipe::new(10, 6.0, 4.0);
    let pred = oracle_predictor(recipe.clone());
    let s = eval_synthetic(&pred, &white, &blue, &recipe, Direction::Both).unwrap();
    assert!(s < 1e-3, "oracle score {s}");
}

#[test]
fn eval_synthetic_zero_predictor_scores_mean_displacement() {
    let (white, blue) = identity_pair(11, 16, 4);
    let recipe = DeformRecipe::new(12, 6.0, 5.0);
    let gt = gen_deformation(16, 16, &recipe);
    let pred = zero_predictor();
    let s = eval_synthetic(&pred, &white, &blue, &recipe, Direction::WhiteToBlue).unwrap();
    assert!((s - gt.mean_norm()).abs() <= 1e-3, "{s} vs {}", gt.mean_norm());
}

#[test]
fn eval_synthetic_both_is_mean_of_directions() {
    let (white, blue) = identity_pair(13, 16, 4);
    let recipe = DeformRecipe::new(14, 6.0, 5.0);
    // A predictor with direction-dependent quality: returns a slightly
    // scaled ground truth when the source is blue.
    let pred = move |source: &HsiCube, _t: &HsiCube| {
        let mut f = gen_deformation(source.width, source.height, &DeformRecipe::new(14, 6.0, 5.0));
        if source.modality == Modality::Blue {
            for v in f.data.iter_mut() {
                *v *= 0.9;
            }
        }
        Ok(f)
    };
    let wb = eval_synthetic(&pred, &white, &blue, &recipe, Direction::WhiteToBlue).unwrap();
    let bw = eval_synthetic(&pred, &white, &blue, &recipe, Direction::BlueToWhite).unwrap();
    let both = eval_synthetic(&pred, &white, &blue, &recipe, Direction::Both).unwrap();
    assert!((both - 0.5 * (wb + bw)).abs() <= 1e-9);
    assert!(bw > wb);
}

#[test]
fn keypoint_examples() {
    let exact = FlowField::constant(16, 16, 2.0, 3.0);
    let pairs = vec![KeypointPair {
        src: (5.0, 5.0),
        dst: (7.0, 8.0),
    }];
    assert_eq!(eval_keypoints(&exact, &pairs).unwrap(), 0.0);

    let offset = vec![KeypointPair {
        src: (5.0, 5.0),
        dst: (10.0, 12.0),
    }];
    // Prediction lands at (7,8); annotation at (10,12): error 5.
    assert!((eval_keypoints(&exact, &offset).unwrap() - 5.0).abs() <= 1e-6);

    assert!(eval_keypoints(&exact, &[]).is_err());
}

#[test]
fn keypoints_invariant_to_ordering() {
    let flow = gen_deformation(16, 16, &DeformRecipe::new(15, 5.0, 4.0));
    let pairs: Vec<KeypointPair> = (0..7)
        .map(|i| KeypointPair {
            src: (2.0 + i as f32, 3.0 + (i % 3) as f32),
            dst: (4.0 + i as f32, 2.0 + i as f32),
        })
        .collect();
    let a = eval_keypoints(&flow, &pairs).unwrap();
    let mut rev = pairs.clone();
    rev.reverse();
    let b = eval_keypoints(&flow, &rev).unwrap();
    assert!((a - b).abs() <= 1e-6);
}

#[test]
fn mask_iou_examples() {
    let (w, h) = (16, 16);
    let mut blob = vec![false; w * h];
    for y in 4..10 {
        for x in 3..9 {
            blob[y * w + x] = true;
        }
    }
    let mask = SegMask::from_data(w, h, blob.clone()).unwrap();
    let zero = FlowField::zeros(w, h);
    assert_eq!(eval_mask_iou(&zero, &mask, &mask).unwrap(), 0.0);

    let mut disjoint = vec![false; w * h];
    for y in 12..15 {
        for x in 12..15 {
            disjoint[y * w + x] = true;
        }
    }
    let other = SegMask::from_data(w, h, disjoint).unwrap();
    assert_eq!(eval_mask_iou(&zero, &mask, &other).unwrap(), 1.0);

    // Empty vs empty: vacuous agreement.
    let empty = SegMask::from_data(w, h, vec![false; w * h]).unwrap();
    assert_eq!(eval_mask_iou(&zero, &empty, &empty).unwrap(), 0.0);

    // Mask shifted by exactly its compensating flow comes back clean.
    let mut shifted = vec![false; w * h];
    for y in 4..10 {
        for x in 5..11 {
            shifted[y * w + x] = true;
        }
    }
    let shifted = SegMask::from_data(w, h, shifted).unwrap();
    // dst_mask(x) = src_mask(x + 2): flow (2,0) pulls src onto dst.
    let flow = FlowField::constant(w, h, 2.0, 0.0);
    assert_eq!(eval_mask_iou(&flow, &shifted, &mask).unwrap(), 0.0);
}

#[test]
fn mask_iou_in_unit_range_and_monotone_under_overlap_erosion() {
    let flow = gen_deformation(16, 16, &DeformRecipe::new(16, 5.0, 2.0));
    let mut blob = vec![false; 256];
    for y in 5..12 {
        for x in 5..12 {
            blob[y * 16 + x] = true;
        }
    }
    let src = SegMask::from_data(16, 16, blob.clone()).unwrap();
    let dst = SegMask::from_data(16, 16, blob.clone()).unwrap();
    let base = eval_mask_iou(&flow, &src, &dst).unwrap();
    assert!((0.0..=1.0).contains(&base));

    // Erode the destination's overlap: error may only grow.
    let mut eroded = blob.clone();
    for y in 5..12 {
        eroded[y * 16 + 5] = false;
        eroded[y * 16 + 6] = false;
    }
    let dst2 = SegMask::from_data(16, 16, eroded).unwrap();
    let worse = eval_mask_iou(&flow, &src, &dst2).unwrap();
    assert!(worse >= base - 1e-6, "{worse} < {base}");
}

#[test]
fn report_emits_both_as_directional_mean_and_no_std_for_single_run() {
    let (white, blue) = identity_pair(17, 16, 4);
    let set = EvalSet {
        synthetic: vec![EvalCase {
            white: white.clone(),
            blue: blue.clone(),
            recipe: DeformRecipe::new(18, 6.0, 5.0),
        }],
        annotated: vec![],
    };
    let pred = zero_predictor();
    let runs: Vec<&dyn FlowPredictor> = vec![&pred];
    let report = eval_report("zero", &runs, &set).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert!(report.rows.iter().all(|r| r.std.is_none()));
    let wb = report.value("wb", "synthetic_epe").unwrap();
    let bw = report.value("bw", "synthetic_epe").unwrap();
    let both = report.value("both", "synthetic_epe").unwrap();
    assert!((both - 0.5 * (wb + bw)).abs() <= 1e-9);
    // No annotated cases: keypoint and mask rows are absent.
    assert!(report.value("wb", "keypoint_epe").is_none());
}

#[test]
fn report_multi_run_std_matches_recomputation() {
    let (white, blue) = identity_pair(19, 16, 4);
    let set = EvalSet {
        synthetic: vec![EvalCase {
            white,
            blue,
            recipe: DeformRecipe::new(20, 6.0, 5.0),
        }],
        annotated: vec![],
    };
    // Five "runs" of varying quality: scaled ground truth.
    let preds: Vec<Box<dyn FlowPredictor>> = (0..5)
        .map(|i| {
            let scale = 1.0 - 0.05 * i as f32;
            Box::new(move |source: &HsiCube, _t: &HsiCube| {
                let mut f =
                    gen_deformation(source.width, source.height, &DeformRecipe::new(20, 6.0, 5.0));
                for v in f.data.iter_mut() {
                    *v *= scale;
                }
                Ok(f)
            }) as Box<dyn FlowPredictor>
        })
        .collect();
    let runs: Vec<&dyn FlowPredictor> = preds.iter().map(|b| b.as_ref()).collect();
    let report = eval_report("scaled", &runs, &set).unwrap();
    let row = report
        .rows
        .iter()
        .find(|r| r.direction == "wb" && r.metric == "synthetic_epe")
        .unwrap();
    assert!(row.std.is_some());

    // Recompute mean and std from per-run evaluations.
    let mut values = Vec::new();
    for run in &runs {
        let (w2, b2) = identity_pair(19, 16, 4);
        let v = eval_synthetic(
            *run,
            &w2,
            &b2,
            &DeformRecipe::new(20, 6.0, 5.0),
            Direction::WhiteToBlue,
        )
        .unwrap() as f64;
        values.push(v);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var =
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (values.len() - 1) as f64;
    assert!((row.value - mean).abs() <= 1e-9);
    assert!((row.std.unwrap() - var.sqrt()).abs() <= 1e-9);
}

#[test]
fn composed_ground_truth_loops_shrink_under_composition() {
    // compose(f, inverse-ish) has small magnitude for smooth fields: a
    // sanity check that composition and generation interact correctly.
    let f = gen_deformation(24, 24, &DeformRecipe::new(21, 8.0, 3.0));
    let mut inv = f.clone();
    for v in inv.data.iter_mut() {
        *v = -*v;
    }
    let round = compose(&f, &inv).unwrap();
    assert!(round.mean_norm() < 0.75, "round-trip norm {}", round.mean_norm());
}
