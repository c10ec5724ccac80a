//! Evaluation harness: synthetic elastic deformations with exact pseudo
//! ground truth, keypoint endpoint error, segmentation-mask propagation
//! error, and the per-direction metrics report.

use crate::error::{Error, Result};
use crate::fields::{gaussian_blur, noise_field};
use crate::flow::{epe, warp_cube, warp_mask, FlowField, ValidityMask};
use crate::imaging::{ColorMatrix, HsiCube, Modality};
use crate::model::{BaseModel, InputMode, XRaftModel};
use crate::rng::{stream_rng, Stream};
use crate::tensor::no_grad;

/// Parameters of one synthetic elastic deformation.
#[derive(Debug, Clone)]
pub struct DeformRecipe {
    pub seed: u64,
    /// Gaussian smoothing radius of the displacement noise, in pixels.
    pub sigma: f32,
    /// Maximum displacement norm after rescaling, in pixels.
    pub amplitude: f32,
}

impl DeformRecipe {
    pub fn new(seed: u64, sigma: f32, amplitude: f32) -> Self {
        DeformRecipe {
            seed,
            sigma,
            amplitude,
        }
    }
}

impl Default for DeformRecipe {
    fn default() -> Self {
        DeformRecipe {
            seed: 0,
            sigma: 8.0,
            amplitude: 10.0,
        }
    }
}

/// Smooth random displacement field: per-component Gaussian noise,
/// Gaussian-smoothed, rescaled so the maximum vector norm equals the
/// amplitude exactly (zero amplitude gives the zero field).
pub fn gen_deformation(width: usize, height: usize, recipe: &DeformRecipe) -> FlowField {
    if recipe.amplitude == 0.0 {
        return FlowField::zeros(width, height);
    }
    let mut rng = stream_rng(recipe.seed, Stream::EvalRecipes, 0);
    let u = gaussian_blur(&noise_field(&mut rng, width, height), width, height, recipe.sigma);
    let v = gaussian_blur(&noise_field(&mut rng, width, height), width, height, recipe.sigma);
    let hw = width * height;
    let mut max_norm = 0.0f32;
    for i in 0..hw {
        max_norm = max_norm.max((u[i] * u[i] + v[i] * v[i]).sqrt());
    }
    let scale = if max_norm > 0.0 {
        recipe.amplitude / max_norm
    } else {
        0.0
    };
    let mut data = Vec::with_capacity(2 * hw);
    data.extend(u.iter().map(|x| x * scale));
    data.extend(v.iter().map(|x| x * scale));
    FlowField::from_planes(width, height, data).expect("deformation shape consistent")
}

/// Backward-warps every band of the cube along the flow. Deforming the
/// source of a pair makes the flow exact ground truth from the deformed
/// image to the untouched counterpart.
pub fn apply_deformation(cube: &HsiCube, flow: &FlowField) -> Result<HsiCube> {
    warp_cube(cube, flow)
}

/// Anything that can infer a flow field between two cubes.
pub trait FlowPredictor {
    fn predict(&self, source: &HsiCube, target: &HsiCube) -> Result<FlowField>;
}

impl<F> FlowPredictor for F
where
    F: Fn(&HsiCube, &HsiCube) -> Result<FlowField>,
{
    fn predict(&self, source: &HsiCube, target: &HsiCube) -> Result<FlowField> {
        self(source, target)
    }
}

/// Checkpointed model plus everything needed to run it on cubes.
pub enum ModelPredictor {
    Base {
        model: BaseModel<f32>,
        mode: InputMode,
        q: ColorMatrix,
    },
    XRaft {
        model: XRaftModel<f32>,
        q: ColorMatrix,
    },
}

impl ModelPredictor {
    pub fn iterations(&self) -> usize {
        match self {
            ModelPredictor::Base { model, .. } => model.hyper.iterations,
            ModelPredictor::XRaft { model, .. } => model.hyper.iterations,
        }
    }

    pub fn mode(&self) -> InputMode {
        match self {
            ModelPredictor::Base { mode, .. } => *mode,
            ModelPredictor::XRaft { model, .. } => model.hyper.mode,
        }
    }
}

impl FlowPredictor for ModelPredictor {
    fn predict(&self, source: &HsiCube, target: &HsiCube) -> Result<FlowField> {
        no_grad(|| match self {
            ModelPredictor::Base { model, mode, q } => {
                let s = crate::model::batch_inputs::<f32>(&[source], *mode, q)?;
                let t = crate::model::batch_inputs::<f32>(&[target], *mode, q)?;
                let outs = model.forward(&s, &t, model.hyper.iterations)?;
                FlowField::from_tensor(outs.last().expect("at least one iteration"), 0)
            }
            ModelPredictor::XRaft { model, q } => {
                let s = crate::model::batch_inputs::<f32>(&[source], model.hyper.mode, q)?;
                let t = crate::model::batch_inputs::<f32>(&[target], model.hyper.mode, q)?;
                let outs = model.forward(
                    &s,
                    &t,
                    source.modality,
                    target.modality,
                    model.hyper.iterations,
                )?;
                FlowField::from_tensor(outs.last().expect("at least one iteration"), 0)
            }
        })
    }
}

/// Inference direction through a white/blue pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    WhiteToBlue,
    BlueToWhite,
    Both,
}

impl Direction {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "wb" => Ok(Direction::WhiteToBlue),
            "bw" => Ok(Direction::BlueToWhite),
            "both" => Ok(Direction::Both),
            _ => Err(Error::Config(format!(
                "unknown direction {s:?}, expected wb, bw, or both"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::WhiteToBlue => "wb",
            Direction::BlueToWhite => "bw",
            Direction::Both => "both",
        }
    }
}

fn eval_synthetic_one(
    pred: &dyn FlowPredictor,
    source: &HsiCube,
    target: &HsiCube,
    recipe: &DeformRecipe,
) -> Result<f32> {
    let gt = gen_deformation(source.width, source.height, recipe);
    let deformed = apply_deformation(source, &gt)?;
    let flow = pred.predict(&deformed, target)?;
    epe(&flow, &gt, None)
}

/// Synthetic-deformation endpoint error on a low-motion white/blue pair:
/// the requested source image is elastically deformed, flow is inferred
/// back to the untouched counterpart, and EPE is measured against the
/// generated field (exact ground truth under the static-pair assumption).
pub fn eval_synthetic(
    pred: &dyn FlowPredictor,
    white: &HsiCube,
    blue: &HsiCube,
    recipe: &DeformRecipe,
    direction: Direction,
) -> Result<f32> {
    match direction {
        Direction::WhiteToBlue => eval_synthetic_one(pred, white, blue, recipe),
        Direction::BlueToWhite => eval_synthetic_one(pred, blue, white, recipe),
        Direction::Both => {
            let wb = eval_synthetic_one(pred, white, blue, recipe)?;
            let bw = eval_synthetic_one(pred, blue, white, recipe)?;
            Ok(0.5 * (wb + bw))
        }
    }
}

/// One annotated correspondence: a sub-pixel point in each frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointPair {
    pub src: (f32, f32),
    pub dst: (f32, f32),
}

/// Mean Euclidean error between flow-propagated source points and their
/// annotated targets. The flow is sampled bilinearly at each source point.
pub fn eval_keypoints(flow: &FlowField, pairs: &[KeypointPair]) -> Result<f32> {
    if pairs.is_empty() {
        return Err(Error::Invalid("keypoint list is empty".into()));
    }
    let mut acc = 0.0f64;
    for kp in pairs {
        let (u, v) = flow.sample(kp.src.0, kp.src.1);
        let px = kp.src.0 + u;
        let py = kp.src.1 + v;
        let dx = (px - kp.dst.0) as f64;
        let dy = (py - kp.dst.1) as f64;
        acc += (dx * dx + dy * dy).sqrt();
    }
    Ok((acc / pairs.len() as f64) as f32)
}

/// Binary segmentation mask (same storage as a validity mask).
pub type SegMask = ValidityMask;

/// Propagates `src_mask` (living in the flow's target frame) along the
/// flow into the flow's source frame (bilinear, re-binarized at 0.5) and
/// returns 1 - IoU against `dst_mask` (living in the source frame).
/// When both masks are empty the error is defined as 0.
pub fn eval_mask_iou(flow: &FlowField, src_mask: &SegMask, dst_mask: &SegMask) -> Result<f32> {
    if src_mask.width != dst_mask.width || src_mask.height != dst_mask.height {
        return Err(Error::Shape("mask sizes differ".into()));
    }
    let propagated = warp_mask(src_mask, flow)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (a, b) in propagated.data.iter().zip(&dst_mask.data) {
        if *a && *b {
            inter += 1;
        }
        if *a || *b {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(0.0);
    }
    Ok(1.0 - inter as f32 / union as f32)
}

/// One synthetic-EPE case: a geometrically aligned white/blue pair plus
/// the deformation recipe applied at evaluation time.
pub struct EvalCase {
    pub white: HsiCube,
    pub blue: HsiCube,
    pub recipe: DeformRecipe,
}

/// One annotated case: a pair with real relative motion, keypoints
/// (src in the white frame, dst in the blue frame), and a segmentation
/// mask per frame.
pub struct AnnotatedCase {
    pub white: HsiCube,
    pub blue: HsiCube,
    pub keypoints: Vec<KeypointPair>,
    pub mask_white: SegMask,
    pub mask_blue: SegMask,
}

/// Everything the report needs.
pub struct EvalSet {
    pub synthetic: Vec<EvalCase>,
    pub annotated: Vec<AnnotatedCase>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub direction: String,
    pub metric: String,
    pub value: f64,
    pub std: Option<f64>,
}

/// Machine-readable metrics table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
}

impl MetricsReport {
    /// Tab-separated rows: `model direction metric value [std]`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&r.model);
            out.push('\t');
            out.push_str(&r.direction);
            out.push('\t');
            out.push_str(&r.metric);
            out.push('\t');
            out.push_str(&format!("{:.6}", r.value));
            if let Some(s) = r.std {
                out.push_str(&format!("\t{s:.6}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn value(&self, direction: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.direction == direction && r.metric == metric)
            .map(|r| r.value)
    }
}

struct DirectionalScores {
    wb: Vec<f64>,
    bw: Vec<f64>,
}

fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, Some(var.sqrt()))
}

/// Runs every metric for every run of a model over the evaluation set and
/// assembles the per-direction and combined rows. Metrics without data
/// (no synthetic cases, no annotations) are simply absent from the table.
/// With several runs (checkpoints of independent trainings) each cell
/// carries mean and sample standard deviation.
pub fn eval_report(
    model_name: &str,
    runs: &[&dyn FlowPredictor],
    set: &EvalSet,
) -> Result<MetricsReport> {
    if runs.is_empty() {
        return Err(Error::Invalid("eval_report needs at least one run".into()));
    }
    let mut report = MetricsReport::default();
    let mut emit = |metric: &str, scores: DirectionalScores, report: &mut MetricsReport| {
        let both: Vec<f64> = scores
            .wb
            .iter()
            .zip(&scores.bw)
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        for (dir, vals) in [("wb", &scores.wb), ("bw", &scores.bw), ("both", &both)] {
            let (mean, std) = mean_std(vals);
            report.rows.push(ReportRow {
                model: model_name.to_string(),
                direction: dir.to_string(),
                metric: metric.to_string(),
                value: mean,
                std,
            });
        }
    };

    if !set.synthetic.is_empty() {
        let mut scores = DirectionalScores {
            wb: Vec::new(),
            bw: Vec::new(),
        };
        for run in runs {
            let mut wb = 0.0f64;
            let mut bw = 0.0f64;
            for case in &set.synthetic {
                wb += eval_synthetic(
                    *run,
                    &case.white,
                    &case.blue,
                    &case.recipe,
                    Direction::WhiteToBlue,
                )? as f64;
                bw += eval_synthetic(
                    *run,
                    &case.white,
                    &case.blue,
                    &case.recipe,
                    Direction::BlueToWhite,
                )? as f64;
            }
            scores.wb.push(wb / set.synthetic.len() as f64);
            scores.bw.push(bw / set.synthetic.len() as f64);
        }
        emit("synthetic_epe", scores, &mut report);
    }

    if !set.annotated.is_empty() {
        let mut kp_scores = DirectionalScores {
            wb: Vec::new(),
            bw: Vec::new(),
        };
        let mut iou_scores = DirectionalScores {
            wb: Vec::new(),
            bw: Vec::new(),
        };
        for run in runs {
            let (mut kp_wb, mut kp_bw, mut iou_wb, mut iou_bw) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
            for case in &set.annotated {
                let flow_wb = run.predict(&case.white, &case.blue)?;
                let flow_bw = run.predict(&case.blue, &case.white)?;
                kp_wb += eval_keypoints(&flow_wb, &case.keypoints)? as f64;
                let swapped: Vec<KeypointPair> = case
                    .keypoints
                    .iter()
                    .map(|k| KeypointPair {
                        src: k.dst,
                        dst: k.src,
                    })
                    .collect();
                kp_bw += eval_keypoints(&flow_bw, &swapped)? as f64;
                // The flow's source frame hosts the comparison: flow w->b
                // pulls the blue mask onto the white frame.
                iou_wb += eval_mask_iou(&flow_wb, &case.mask_blue, &case.mask_white)? as f64;
                iou_bw += eval_mask_iou(&flow_bw, &case.mask_white, &case.mask_blue)? as f64;
            }
            let n = set.annotated.len() as f64;
            kp_scores.wb.push(kp_wb / n);
            kp_scores.bw.push(kp_bw / n);
            iou_scores.wb.push(iou_wb / n);
            iou_scores.bw.push(iou_bw / n);
        }
        emit("keypoint_epe", kp_scores, &mut report);
        emit("mask_1-iou", iou_scores, &mut report);
    }

    Ok(report)
}

/// Identity predictor (zero flow), the naive baseline of sanity checks.
pub fn zero_predictor() -> impl FlowPredictor {
    |source: &HsiCube, _target: &HsiCube| Ok(FlowField::zeros(source.width, source.height))
}

/// Predictor that replays the ground-truth deformation of a recipe.
pub fn oracle_predictor(recipe: DeformRecipe) -> impl FlowPredictor {
    move |source: &HsiCube, _target: &HsiCube| {
        Ok(gen_deformation(source.width, source.height, &recipe))
    }
}

/// Convenience: geometric-identity eval pair (white scene and its
/// synthesized blue counterpart).
pub fn identity_pair(seed: u64, size: usize, bands: usize) -> (HsiCube, HsiCube) {
    let mut rng = stream_rng(seed, Stream::Scenes, 1000);
    let white = crate::imaging::synth_scene(&mut rng, size, size, bands);
    let blue = crate::imaging::synth_modality(
        &white,
        &crate::imaging::ModalityRecipe::default_blue(seed ^ 0x5ca1e),
    );
    debug_assert_eq!(white.modality, Modality::White);
    (white, blue)
}

#[cfg(test)]
mod tests;
