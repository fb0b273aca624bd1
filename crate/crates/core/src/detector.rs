//! Toy BEV detection head, training loop, evaluation metric, and the
//! ablation harness.
//!
//! The detector predicts per-class center heatmaps from a fused BEV feature
//! map. Training is plain gradient descent with cosine step decay over
//! per-scene steps, deterministic under the config seed. Evaluation extracts
//! peaks with 3x3 non-maximum suppression and scores per-class F1 against
//! ground-truth box centers.
//!
//! Variants mirror the slice ablations: a flattened single-slice baseline,
//! local-only and global-only slicing, the full two-stage pipeline, plus
//! height-band restrictions for the band-sensitivity study.

use crate::fusion::{
    fuse_pipeline, se_fuse, DualBranchParams, FusePipelineParams, FusionError, SeFusionParams,
};
use crate::geometry::{BevGridSpec, FrustumSpec, HeightSlice};
use crate::lidar::SliceSet;
use crate::pooling::{
    lift, pool_multislice_fused, DepthValidation, FrustumFeatures, PoolError,
};
use crate::scenes::{render_camera_features, RenderOptions, Scene, SceneError};
use crate::tensor::{Tape, Tensor, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::fmt;
use std::io::{self, BufRead, Write};
use thiserror::Error;

pub const CHECKPOINT_HEADER: &str = "BEVSAN-CKPT v1";

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported checkpoint version: found {found:?}, expected {CHECKPOINT_HEADER:?}")]
    Version { found: String },
    #[error("checkpoint is missing parameter block {0:?}")]
    MissingParam(String),
    #[error("training diverged (loss is not finite) at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("dataset has {got} scenes, config needs {need}")]
    NotEnoughScenes { got: usize, need: usize },
    #[error("{0}")]
    BadConfig(String),
}

// ── Variants and configuration ──────────────────────────────────────

/// Which slice stacks feed the model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    /// Single full-range slice, fusion bypassed.
    BaselineFlat,
    /// Single slice restricted to a height band.
    Band { lower: f64, upper: f64 },
    LocalOnly,
    GlobalOnly,
    FullSan,
}

impl Variant {
    pub fn label(&self) -> String {
        match self {
            Variant::BaselineFlat => "baseline-flat".to_string(),
            Variant::Band { lower, upper } => format!("band[{lower},{upper}]"),
            Variant::LocalOnly => "local-only".to_string(),
            Variant::GlobalOnly => "global-only".to_string(),
            Variant::FullSan => "full-SAN".to_string(),
        }
    }
}

/// Fusion strategy. `Mean` and `Se` are stage-1 choices for single-group
/// variants; `SeMean`, `SeSe` and `SeTrans` pick the stage-2 merge for the
/// full pipeline (stage 1 is SE for both groups).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    Mean,
    Se,
    SeMean,
    SeSe,
    SeTrans,
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FusionKind::Mean => "mean",
            FusionKind::Se => "se",
            FusionKind::SeMean => "se-mean",
            FusionKind::SeSe => "se-se",
            FusionKind::SeTrans => "se-trans",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for FusionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(FusionKind::Mean),
            "se" => Ok(FusionKind::Se),
            "se-mean" => Ok(FusionKind::SeMean),
            "se-se" => Ok(FusionKind::SeSe),
            "se-trans" => Ok(FusionKind::SeTrans),
            other => Err(format!("unknown fusion kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub variant: Variant,
    pub fusion: FusionKind,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub train_scenes: usize,
    pub val_scenes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::FullSan,
            fusion: FusionKind::SeTrans,
            epochs: 30,
            lr: 0.01,
            seed: 0,
            train_scenes: 200,
            val_scenes: 50,
        }
    }
}

impl TrainConfig {
    /// Reject variant/fusion combinations that have no defined pipeline.
    pub fn validate(&self) -> Result<(), DetectorError> {
        let ok = match self.variant {
            Variant::BaselineFlat | Variant::Band { .. } => true,
            Variant::LocalOnly | Variant::GlobalOnly => {
                matches!(self.fusion, FusionKind::Mean | FusionKind::Se)
            }
            Variant::FullSan => matches!(
                self.fusion,
                FusionKind::SeMean | FusionKind::SeSe | FusionKind::SeTrans
            ),
        };
        if ok {
            Ok(())
        } else {
            Err(DetectorError::BadConfig(format!(
                "fusion {} is not defined for variant {}",
                self.fusion,
                self.variant.label()
            )))
        }
    }
}

/// Geometry, rendering and slicing shared by every pipeline stage.
#[derive(Debug, Clone)]
pub struct PipelineSetup {
    pub grid: BevGridSpec,
    pub frustum: FrustumSpec,
    pub render: RenderOptions,
    pub slices: SliceSet,
}

impl Default for PipelineSetup {
    fn default() -> Self {
        PipelineSetup {
            grid: BevGridSpec::default(),
            frustum: FrustumSpec::new(24, 36, 1.0, 36.0, 24).expect("default frustum"),
            render: RenderOptions::default(),
            slices: SliceSet::paper_nuscenes(),
        }
    }
}

impl PipelineSetup {
    pub fn class_count(&self) -> usize {
        self.render.class_count
    }

    /// Slices pooled for a variant, in stack order.
    pub fn variant_slices(&self, variant: Variant) -> Vec<HeightSlice> {
        match variant {
            Variant::BaselineFlat => vec![self.grid.full_slice()],
            Variant::Band { lower, upper } => vec![HeightSlice::new(lower, upper)],
            Variant::LocalOnly => self.slices.locals.clone(),
            Variant::GlobalOnly => self.slices.globals.clone(),
            Variant::FullSan => self.slices.all(),
        }
    }
}

// ── Detection head ──────────────────────────────────────────────────

/// 3x3 conv (C -> C), ReLU, 1x1 conv (C -> K class heatmap logits).
#[derive(Debug, Clone)]
pub struct DetectionHead {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl DetectionHead {
    pub fn init(c: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        use rand::Rng;
        let bound1 = (1.0 / (c as f64 * 9.0)).sqrt();
        let bound2 = (1.0 / c as f64).sqrt();
        let w1: Vec<f64> = (0..c * c * 9).map(|_| rng.gen_range(-bound1..bound1)).collect();
        let w2: Vec<f64> = (0..k * c).map(|_| rng.gen_range(-bound2..bound2)).collect();
        DetectionHead {
            w1: Tensor::from_vec(w1, &[c, c, 3, 3]).expect("head w1"),
            b1: Tensor::zeros(&[c]),
            w2: Tensor::from_vec(w2, &[k, c, 1, 1]).expect("head w2"),
            // negative prior keeps the initial heatmaps near background
            b2: Tensor::full(&[k], -2.0),
        }
    }

    pub fn zeros(c: usize, k: usize) -> Self {
        DetectionHead {
            w1: Tensor::zeros(&[c, c, 3, 3]),
            b1: Tensor::zeros(&[c]),
            w2: Tensor::zeros(&[k, c, 1, 1]),
            b2: Tensor::zeros(&[k]),
        }
    }

    pub fn tracked(&self, tape: &mut Tape) -> Self {
        DetectionHead {
            w1: tape.leaf(&self.w1),
            b1: tape.leaf(&self.b1),
            w2: tape.leaf(&self.w2),
            b2: tape.leaf(&self.b2),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }
}

/// Per-class center heatmap logits, K x He x We.
pub fn head_forward(
    tape: &mut Tape,
    bev: &Tensor,
    head: &DetectionHead,
) -> Result<Tensor, TensorError> {
    let hidden = tape.conv2d(bev, &head.w1, &head.b1)?;
    let hidden = tape.relu(&hidden);
    tape.conv2d(&hidden, &head.w2, &head.b2)
}

// ── Model ───────────────────────────────────────────────────────────

/// All trainable parameters of one variant's pipeline.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub variant: Variant,
    pub fusion: FusionKind,
    pub se_global: Option<SeFusionParams>,
    pub se_local: Option<SeFusionParams>,
    pub dual: Option<DualBranchParams>,
    /// Second-stage SE over the stacked (B_g, B_l) pair.
    pub se_stage2: Option<SeFusionParams>,
    pub head: DetectionHead,
}

impl ModelParams {
    pub fn init(config: &TrainConfig, setup: &PipelineSetup) -> Result<Self, DetectorError> {
        config.validate()?;
        let c = setup.render.channels;
        let k = setup.class_count();
        let j_local = setup.slices.locals.len();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x5851_F42D_4C95_7F2D));
        let mut model = ModelParams {
            variant: config.variant,
            fusion: config.fusion,
            se_global: None,
            se_local: None,
            dual: None,
            se_stage2: None,
            head: DetectionHead::zeros(c, k),
        };
        match config.variant {
            Variant::BaselineFlat | Variant::Band { .. } => {}
            Variant::LocalOnly => {
                if config.fusion == FusionKind::Se {
                    model.se_local = Some(SeFusionParams::init(j_local, c, &mut rng));
                }
            }
            Variant::GlobalOnly => {
                if config.fusion == FusionKind::Se {
                    model.se_global = Some(SeFusionParams::init(3, c, &mut rng));
                }
            }
            Variant::FullSan => {
                model.se_global = Some(SeFusionParams::init(3, c, &mut rng));
                model.se_local = Some(SeFusionParams::init(j_local, c, &mut rng));
                match config.fusion {
                    FusionKind::SeTrans => model.dual = Some(DualBranchParams::init(c, &mut rng)),
                    FusionKind::SeSe => {
                        model.se_stage2 = Some(SeFusionParams::init(2, c, &mut rng));
                    }
                    _ => {}
                }
            }
        }
        model.head = DetectionHead::init(c, k, &mut rng);
        Ok(model)
    }

    /// Copy whose tensors are gradient-enabled leaves of `tape`.
    pub fn tracked(&self, tape: &mut Tape) -> Self {
        ModelParams {
            variant: self.variant,
            fusion: self.fusion,
            se_global: self.se_global.as_ref().map(|p| p.tracked(tape)),
            se_local: self.se_local.as_ref().map(|p| p.tracked(tape)),
            dual: self.dual.as_ref().map(|p| p.tracked(tape)),
            se_stage2: self.se_stage2.as_ref().map(|p| p.tracked(tape)),
            head: self.head.tracked(tape),
        }
    }

    /// Named parameter tensors in a fixed serialization order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        if let Some(p) = &self.se_global {
            for (name, t) in p.tensors() {
                out.push((format!("se_global.{name}"), t));
            }
        }
        if let Some(p) = &self.se_local {
            for (name, t) in p.tensors() {
                out.push((format!("se_local.{name}"), t));
            }
        }
        if let Some(p) = &self.dual {
            for (name, t) in p.g2l.tensors() {
                out.push((format!("dual.g2l.{name}"), t));
            }
            for (name, t) in p.l2g.tensors() {
                out.push((format!("dual.l2g.{name}"), t));
            }
        }
        if let Some(p) = &self.se_stage2 {
            for (name, t) in p.tensors() {
                out.push((format!("se_stage2.{name}"), t));
            }
        }
        for (name, t) in self.head.tensors() {
            out.push((format!("head.{name}"), t));
        }
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        if let Some(p) = &mut self.se_global {
            for (name, t) in p.tensors_mut() {
                out.push((format!("se_global.{name}"), t));
            }
        }
        if let Some(p) = &mut self.se_local {
            for (name, t) in p.tensors_mut() {
                out.push((format!("se_local.{name}"), t));
            }
        }
        if let Some(p) = &mut self.dual {
            for (name, t) in p.g2l.tensors_mut() {
                out.push((format!("dual.g2l.{name}"), t));
            }
            for (name, t) in p.l2g.tensors_mut() {
                out.push((format!("dual.l2g.{name}"), t));
            }
        }
        if let Some(p) = &mut self.se_stage2 {
            for (name, t) in p.tensors_mut() {
                out.push((format!("se_stage2.{name}"), t));
            }
        }
        for (name, t) in self.head.tensors_mut() {
            out.push((format!("head.{name}"), t));
        }
        out
    }
}

// ── Scene preparation ───────────────────────────────────────────────

/// Pooled slice stack plus heatmap targets for one scene.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    /// S x C x He x We.
    pub stack: Tensor,
    /// K x He x We Gaussian center splats.
    pub targets: Tensor,
    /// Ground-truth (class, x-cell, y-cell) centers in continuous cell
    /// coordinates.
    pub gt: Vec<(u32, f64, f64)>,
}

/// Render, lift and pool one scene into the given slice stack, and rasterize
/// its targets.
pub fn prepare_scene(
    scene: &Scene,
    setup: &PipelineSetup,
    slices: &[HeightSlice],
    coords: &[Vec<[f64; 3]>],
) -> Result<PreparedScene, DetectorError> {
    let c = setup.render.channels;
    let mut frustums = Vec::with_capacity(scene.cameras.len());
    for (cam_index, cam_coords) in coords.iter().enumerate() {
        let (feat, depth) = render_camera_features(scene, cam_index, &setup.frustum, &setup.render)?;
        let values = lift(&feat, &depth, DepthValidation::Strict)?;
        frustums.push(FrustumFeatures::new(values, cam_coords.clone())?);
    }
    let pooled = pool_multislice_fused(&frustums, &setup.grid, slices, c)?;
    Ok(PreparedScene {
        stack: pooled.stacked,
        targets: heatmap_targets(scene, &setup.grid, setup.class_count()),
        gt: gt_centers(scene, &setup.grid),
    })
}

/// Frustum-cell coordinates for every camera of `scene`'s rig; geometry only,
/// so the result is shared across scenes with the same rig.
pub fn rig_coords(scene: &Scene, fs: &FrustumSpec) -> Vec<Vec<[f64; 3]>> {
    scene
        .cameras
        .iter()
        .map(|cam| crate::geometry::frustum_points(cam, fs))
        .collect()
}

pub fn prepare_scenes(
    scenes: &[Scene],
    setup: &PipelineSetup,
    slices: &[HeightSlice],
) -> Result<Vec<PreparedScene>, DetectorError> {
    let Some(first) = scenes.first() else {
        return Ok(Vec::new());
    };
    let coords = rig_coords(first, &setup.frustum);
    scenes
        .iter()
        .map(|s| prepare_scene(s, setup, slices, &coords))
        .collect()
}

fn gt_centers(scene: &Scene, grid: &BevGridSpec) -> Vec<(u32, f64, f64)> {
    scene
        .boxes
        .iter()
        .map(|b| {
            (
                b.class_id,
                (b.center[0] - grid.x_min) / grid.cell_width() - 0.5,
                (b.center[1] - grid.y_min) / grid.cell_height() - 0.5,
            )
        })
        .collect()
}

/// Per-class Gaussian splats (sigma = 1 cell) at box centers, max-combined
/// where boxes overlap.
pub fn heatmap_targets(scene: &Scene, grid: &BevGridSpec, classes: usize) -> Tensor {
    let (he, we) = (grid.he, grid.we);
    let mut data = vec![0.0; classes * he * we];
    for (class_id, gx, gy) in gt_centers(scene, grid) {
        let k = class_id as usize;
        if k >= classes {
            continue;
        }
        for iy in 0..he {
            for ix in 0..we {
                let d2 = (ix as f64 - gx).powi(2) + (iy as f64 - gy).powi(2);
                if d2 > 9.0 {
                    continue; // truncate at 3 sigma
                }
                let v = (-0.5 * d2).exp();
                let cell = &mut data[(k * he + iy) * we + ix];
                if v > *cell {
                    *cell = v;
                }
            }
        }
    }
    Tensor::from_vec(data, &[classes, he, we]).expect("target shape")
}

// ── Loss ────────────────────────────────────────────────────────────

/// Weighted binary cross-entropy on heatmap logits. Cells with target above
/// 0.5 count as positives; the target term is weighted by negatives over
/// positives.
pub fn heatmap_loss(
    tape: &mut Tape,
    logits: &Tensor,
    targets: &Tensor,
) -> Result<Tensor, TensorError> {
    let pos = targets.data().iter().filter(|&&t| t > 0.5).count();
    let neg = targets.numel() - pos;
    let w = if pos == 0 { 1.0 } else { neg as f64 / pos as f64 };
    tape.weighted_bce(logits, targets, w)
}

// ── Forward pipeline ────────────────────────────────────────────────

/// Leading-axis range of a contiguous stack. Pooled stacks are constants
/// (gradients stop at the fusion inputs), so no tape node is needed.
fn narrow_stack(stack: &Tensor, from: usize, to: usize) -> Result<Tensor, TensorError> {
    debug_assert!(stack.node_id().is_none(), "narrow only supports constant stacks");
    let s = stack.shape();
    let inner: usize = s[1..].iter().product();
    let mut shape = s.to_vec();
    shape[0] = to - from;
    Tensor::from_vec(stack.data()[from * inner..to * inner].to_vec(), &shape)
}

/// Forward pass from a pooled slice stack to heatmap logits.
pub fn model_forward(
    tape: &mut Tape,
    model: &ModelParams,
    stack: &Tensor,
) -> Result<Tensor, DetectorError> {
    let s = stack.shape().to_vec();
    let (c, he, we) = (s[1], s[2], s[3]);
    let bev = match model.variant {
        Variant::BaselineFlat | Variant::Band { .. } => {
            // fusion bypassed: the single slice is the BEV feature
            tape.reshape(stack, &[c, he, we])?
        }
        Variant::LocalOnly | Variant::GlobalOnly => {
            let se = if model.variant == Variant::LocalOnly {
                &model.se_local
            } else {
                &model.se_global
            };
            match (model.fusion, se) {
                (FusionKind::Mean, _) => tape.mean_axis0(stack)?,
                (FusionKind::Se, Some(p)) => se_fuse(tape, stack, p)?,
                _ => {
                    return Err(DetectorError::BadConfig(format!(
                        "variant {} has no stage-1 parameters",
                        model.variant.label()
                    )))
                }
            }
        }
        Variant::FullSan => {
            let n_global = 3;
            let global = narrow_stack(stack, 0, n_global)?;
            let local = narrow_stack(stack, n_global, s[0])?;
            let (se_g, se_l) = match (&model.se_global, &model.se_local) {
                (Some(g), Some(l)) => (g, l),
                _ => {
                    return Err(DetectorError::BadConfig(
                        "full pipeline without stage-1 parameters".to_string(),
                    ))
                }
            };
            match model.fusion {
                FusionKind::SeTrans => {
                    let dual = model.dual.as_ref().ok_or_else(|| {
                        DetectorError::BadConfig("se-trans without transformer params".into())
                    })?;
                    fuse_pipeline(
                        tape,
                        &global,
                        &local,
                        &FusePipelineParams {
                            se_global: se_g.clone(),
                            se_local: se_l.clone(),
                            dual: dual.clone(),
                        },
                    )?
                }
                FusionKind::SeMean => {
                    let bg = se_fuse(tape, &global, se_g)?;
                    let bl = se_fuse(tape, &local, se_l)?;
                    let sum = tape.add(&bg, &bl)?;
                    tape.scale(&sum, 0.5)
                }
                FusionKind::SeSe => {
                    let stage2 = model.se_stage2.as_ref().ok_or_else(|| {
                        DetectorError::BadConfig("se-se without stage-2 parameters".into())
                    })?;
                    let bg = se_fuse(tape, &global, se_g)?;
                    let bl = se_fuse(tape, &local, se_l)?;
                    let bg4 = tape.reshape(&bg, &[1, c, he, we])?;
                    let bl4 = tape.reshape(&bl, &[1, c, he, we])?;
                    let pair = stack_pair(tape, &bg4, &bl4)?;
                    se_fuse(tape, &pair, stage2)?
                }
                _ => {
                    return Err(DetectorError::BadConfig(format!(
                        "fusion {} is not defined for the full pipeline",
                        model.fusion
                    )))
                }
            }
        }
    };
    Ok(head_forward(tape, &bev, &model.head)?)
}

/// Stack two 1 x C x H x W tensors into 2 x C x H x W on the tape, keeping
/// gradients flowing to both.
fn stack_pair(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let shape = a.shape().to_vec();
    let inner: usize = shape[1..].iter().product();
    let mut out_shape = shape.clone();
    out_shape[0] = 2;
    // embed each into the 2-slot stack with constant selectors
    let mut sel_a = vec![0.0; 2 * inner];
    let mut sel_b = vec![0.0; 2 * inner];
    for i in 0..inner {
        sel_a[i] = 1.0;
        sel_b[inner + i] = 1.0;
    }
    let n: usize = inner;
    let flat_a = tape.reshape(a, &[1, n])?;
    let flat_b = tape.reshape(b, &[1, n])?;
    // place a into slot 0: [a; a] * sel_a keeps the first copy only
    let dup_a = tile2(tape, &flat_a)?;
    let dup_b = tile2(tape, &flat_b)?;
    let dup_a = tape.reshape(&dup_a, &[2 * n])?;
    let dup_b = tape.reshape(&dup_b, &[2 * n])?;
    let masked_a = tape.mul(&dup_a, &Tensor::from_vec(sel_a, &[2 * n])?)?;
    let masked_b = tape.mul(&dup_b, &Tensor::from_vec(sel_b, &[2 * n])?)?;
    let joined = tape.add(&masked_a, &masked_b)?;
    tape.reshape(&joined, &out_shape)
}

/// [x] (1 x n) -> [x; x] (2 x n) via matmul with a constant ones column.
fn tile2(tape: &mut Tape, x: &Tensor) -> Result<Tensor, TensorError> {
    let ones = Tensor::from_vec(vec![1.0, 1.0], &[2, 1])?;
    tape.matmul(&ones, x)
}

// ── Training ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelParams,
    /// Mean loss per epoch.
    pub losses: Vec<f64>,
}

/// Gradient descent over per-scene steps with cosine step decay.
/// Deterministic under `config.seed`.
pub fn train(
    config: &TrainConfig,
    scenes: &[Scene],
    setup: &PipelineSetup,
) -> Result<TrainOutcome, DetectorError> {
    config.validate()?;
    if scenes.len() < config.train_scenes {
        return Err(DetectorError::NotEnoughScenes {
            got: scenes.len(),
            need: config.train_scenes,
        });
    }
    let slices = setup.variant_slices(config.variant);
    let prepared = prepare_scenes(&scenes[..config.train_scenes], setup, &slices)?;
    train_prepared(config, &prepared, setup)
}

/// Training core over already-pooled scenes; `prepare_scenes` has the
/// pooling contract.
pub fn train_prepared(
    config: &TrainConfig,
    prepared: &[PreparedScene],
    setup: &PipelineSetup,
) -> Result<TrainOutcome, DetectorError> {
    let mut model = ModelParams::init(config, setup)?;
    if prepared.is_empty() {
        return Err(DetectorError::NotEnoughScenes { got: 0, need: 1 });
    }
    let total_steps = (config.epochs * prepared.len()) as f64;
    let mut losses = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let mut epoch_loss = 0.0;
        for scene in prepared {
            let lr = config.lr
                * 0.5
                * (1.0 + (std::f64::consts::PI * step as f64 / total_steps).cos());
            let mut tape = Tape::new();
            let tracked = model.tracked(&mut tape);
            let logits = model_forward(&mut tape, &tracked, &scene.stack)?;
            let loss = heatmap_loss(&mut tape, &logits, &scene.targets)?;
            let loss_val = loss.item();
            if !loss_val.is_finite() {
                return Err(DetectorError::Diverged { epoch, step });
            }
            epoch_loss += loss_val;
            if lr != 0.0 {
                let grads = tape.backward(&loss)?;
                let tracked_named = tracked.named_tensors();
                for ((_, current), (_, leaf)) in
                    model.named_tensors_mut().into_iter().zip(&tracked_named)
                {
                    if let Some(g) = grads.grad(leaf) {
                        let updated: Vec<f64> = current
                            .data()
                            .iter()
                            .zip(g.data())
                            .map(|(p, gi)| p - lr * gi)
                            .collect();
                        *current = Tensor::from_vec(updated, current.shape())?;
                    }
                }
            }
            step += 1;
        }
        losses.push(epoch_loss / prepared.len() as f64);
    }
    Ok(TrainOutcome { model, losses })
}

// ── Evaluation ──────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ClassScore {
    pub class_id: u32,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_class: Vec<ClassScore>,
    pub mean_f1: f64,
}

/// A heatmap peak: class, cell, and sigmoid score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class_id: u32,
    pub ix: usize,
    pub iy: usize,
    pub score: f64,
}

pub const DETECTION_THRESHOLD: f64 = 0.4;
pub const MATCH_RADIUS_CELLS: f64 = 2.0;

/// Local maxima of the per-class sigmoid heatmaps above the threshold,
/// under 3x3 non-maximum suppression. Ties go to the lowest linear cell
/// index.
pub fn extract_detections(heatmaps: &Tensor) -> Vec<Detection> {
    let s = heatmaps.shape();
    let (k, he, we) = (s[0], s[1], s[2]);
    let mut out = Vec::new();
    for class in 0..k {
        for iy in 0..he {
            for ix in 0..we {
                let p = heatmaps.at(&[class, iy, ix]);
                if p < DETECTION_THRESHOLD {
                    continue;
                }
                let lin = iy * we + ix;
                let mut is_peak = true;
                'nms: for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let (ny, nx) = (iy as i64 + dy, ix as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= he as i64 || nx >= we as i64 {
                            continue;
                        }
                        let q = heatmaps.at(&[class, ny as usize, nx as usize]);
                        let nlin = ny as usize * we + nx as usize;
                        if q > p || (q == p && nlin < lin) {
                            is_peak = false;
                            break 'nms;
                        }
                    }
                }
                if is_peak {
                    out.push(Detection {
                        class_id: class as u32,
                        ix,
                        iy,
                        score: p,
                    });
                }
            }
        }
    }
    out
}

/// Greedy matching of detections to ground-truth centers: descending score
/// (ties to lowest linear index), each target matched at most once, a match
/// requires the same class within [`MATCH_RADIUS_CELLS`].
fn match_scene(
    detections: &[Detection],
    gt: &[(u32, f64, f64)],
    we: usize,
    classes: usize,
    tallies: &mut [(usize, usize, usize)],
) {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .total_cmp(&detections[a].score)
            .then_with(|| {
                let la = detections[a].iy * we + detections[a].ix;
                let lb = detections[b].iy * we + detections[b].ix;
                la.cmp(&lb)
            })
    });
    let mut taken = vec![false; gt.len()];
    for &di in &order {
        let d = &detections[di];
        let k = d.class_id as usize;
        if k >= classes {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (gi, &(class, gx, gy)) in gt.iter().enumerate() {
            if taken[gi] || class != d.class_id {
                continue;
            }
            let dist = (d.ix as f64 - gx).hypot(d.iy as f64 - gy);
            if dist <= MATCH_RADIUS_CELLS && best.is_none_or(|(_, bd)| dist < bd) {
                best = Some((gi, dist));
            }
        }
        match best {
            Some((gi, _)) => {
                taken[gi] = true;
                tallies[k].0 += 1;
            }
            None => tallies[k].1 += 1,
        }
    }
    for (gi, &(class, ..)) in gt.iter().enumerate() {
        if !taken[gi] {
            let k = class as usize;
            if k < classes {
                tallies[k].2 += 1;
            }
        }
    }
}

/// Per-class F1 over prepared scenes. A class with no targets and no
/// predictions anywhere scores 1.
pub fn evaluate_prepared(
    model: &ModelParams,
    prepared: &[PreparedScene],
    setup: &PipelineSetup,
) -> Result<EvalReport, DetectorError> {
    let classes = setup.class_count();
    let mut tallies = vec![(0usize, 0usize, 0usize); classes];
    for scene in prepared {
        let mut tape = Tape::new();
        let logits = model_forward(&mut tape, model, &scene.stack)?;
        let heat = tape.sigmoid(&logits);
        let detections = extract_detections(&heat);
        match_scene(
            &detections,
            &scene.gt,
            setup.grid.we,
            classes,
            &mut tallies,
        );
    }
    let per_class: Vec<ClassScore> = tallies
        .iter()
        .enumerate()
        .map(|(k, &(tp, fp, fn_))| {
            let denom = 2 * tp + fp + fn_;
            ClassScore {
                class_id: k as u32,
                f1: if denom == 0 {
                    1.0
                } else {
                    2.0 * tp as f64 / denom as f64
                },
                true_positives: tp,
                false_positives: fp,
                false_negatives: fn_,
            }
        })
        .collect();
    let mean_f1 = per_class.iter().map(|c| c.f1).sum::<f64>() / classes as f64;
    Ok(EvalReport { per_class, mean_f1 })
}

pub fn evaluate(
    model: &ModelParams,
    scenes: &[Scene],
    setup: &PipelineSetup,
) -> Result<EvalReport, DetectorError> {
    let slices = setup.variant_slices(model.variant);
    let prepared = prepare_scenes(scenes, setup, &slices)?;
    evaluate_prepared(model, &prepared, setup)
}

// ── Ablation harness ────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    /// Class name, or "mean" for the cross-class mean row.
    pub class: String,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct AblationSummary {
    pub variant: String,
    pub mean: f64,
    pub stddev: f64,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub summaries: Vec<AblationSummary>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,seed,class,score\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.variant, r.seed, r.class, r.score));
        }
        out
    }

    pub fn mean_of(&self, variant: &str) -> Option<f64> {
        self.summaries
            .iter()
            .find(|s| s.variant == variant)
            .map(|s| s.mean)
    }

    /// Per-seed mean scores of a variant, in seed order.
    pub fn seed_means(&self, variant: &str) -> Vec<(u64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.variant == variant && r.class == "mean")
            .map(|r| (r.seed, r.score))
            .collect()
    }
}

/// Train and evaluate every config x seed combination. The dataset is split
/// into the leading train scenes and trailing validation scenes per config.
/// Pooled stacks are cached per distinct slice set, and class names label
/// the per-class rows.
pub fn run_ablation(
    configs: &[TrainConfig],
    seeds: &[u64],
    scenes: &[Scene],
    setup: &PipelineSetup,
    class_names: &[String],
) -> Result<AblationReport, DetectorError> {
    let mut cache: HashMap<String, Vec<PreparedScene>> = HashMap::new();
    let mut rows = Vec::new();
    let mut summaries = Vec::new();

    for config in configs {
        config.validate()?;
        let need = config.train_scenes + config.val_scenes;
        if scenes.len() < need {
            return Err(DetectorError::NotEnoughScenes {
                got: scenes.len(),
                need,
            });
        }
        let slices = setup.variant_slices(config.variant);
        let key = slices
            .iter()
            .map(|s| format!("{:x}:{:x}", s.lower.to_bits(), s.upper.to_bits()))
            .collect::<Vec<_>>()
            .join(",");
        if !cache.contains_key(&key) {
            cache.insert(key.clone(), prepare_scenes(&scenes[..need], setup, &slices)?);
        }
        let prepared = &cache[&key];
        let (train_split, val_split) = prepared.split_at(config.train_scenes);

        let label = variant_label(config);
        let mut means = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let run_config = TrainConfig {
                seed,
                ..config.clone()
            };
            let outcome = train_prepared(&run_config, train_split, setup)?;
            let report = evaluate_prepared(&outcome.model, val_split, setup)?;
            for score in &report.per_class {
                let class = class_names
                    .get(score.class_id as usize)
                    .cloned()
                    .unwrap_or_else(|| score.class_id.to_string());
                rows.push(AblationRow {
                    variant: label.clone(),
                    seed,
                    class,
                    score: score.f1,
                });
            }
            rows.push(AblationRow {
                variant: label.clone(),
                seed,
                class: "mean".to_string(),
                score: report.mean_f1,
            });
            means.push(report.mean_f1);
        }
        let n = means.len() as f64;
        let mean = means.iter().sum::<f64>() / n;
        let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n;
        summaries.push(AblationSummary {
            variant: label,
            mean,
            stddev: var.sqrt(),
        });
    }
    Ok(AblationReport { rows, summaries })
}

/// Row label for a config: the variant, qualified by the fusion kind where
/// the variant alone is ambiguous.
pub fn variant_label(config: &TrainConfig) -> String {
    match config.variant {
        Variant::LocalOnly | Variant::GlobalOnly | Variant::FullSan => {
            format!("{}:{}", config.variant.label(), config.fusion)
        }
        _ => config.variant.label(),
    }
}

// ── Checkpoint serialization ────────────────────────────────────────

/// Write named parameter blocks: a `param <name> <rank> <extents...>` line
/// followed by one line of base-16 IEEE-754 words.
pub fn write_checkpoint(model: &ModelParams, out: &mut impl Write) -> io::Result<()> {
    let mut buf = String::new();
    buf.push_str(CHECKPOINT_HEADER);
    buf.push('\n');
    for (name, t) in model.named_tensors() {
        buf.push_str(&format!("param {} {}", name, t.rank()));
        for e in t.shape() {
            buf.push_str(&format!(" {e}"));
        }
        buf.push('\n');
        let mut first = true;
        for v in t.data() {
            if !first {
                buf.push(' ');
            }
            buf.push_str(&format!("{:016x}", v.to_bits()));
            first = false;
        }
        buf.push('\n');
    }
    out.write_all(buf.as_bytes())
}

struct CkptReader<R> {
    lines: io::Lines<R>,
    line_no: usize,
}

impl<R: BufRead> CkptReader<R> {
    fn next(&mut self) -> Result<Option<String>, DetectorError> {
        self.line_no += 1;
        match self.lines.next() {
            Some(l) => Ok(Some(l?)),
            None => Ok(None),
        }
    }
}

/// Read the named parameter blocks of a checkpoint.
pub fn read_checkpoint_blocks(
    input: impl BufRead,
) -> Result<Vec<(String, Tensor)>, DetectorError> {
    let mut reader = CkptReader {
        lines: input.lines(),
        line_no: 0,
    };
    let parse_err = |line: usize, msg: String| DetectorError::Parse { line, msg };

    let header = reader
        .next()?
        .ok_or_else(|| parse_err(1, "empty file, expected header".to_string()))?;
    if header != CHECKPOINT_HEADER {
        if header.starts_with("BEVSAN-CKPT ") {
            return Err(DetectorError::Version { found: header });
        }
        return Err(parse_err(1, format!("bad header {header:?}")));
    }

    let mut blocks = Vec::new();
    loop {
        let Some(line) = reader.next()? else {
            break;
        };
        if line.is_empty() {
            continue;
        }
        let header_line = reader.line_no;
        let fields: Vec<&str> = line.split_ascii_whitespace().collect();
        if fields.first() != Some(&"param") || fields.len() < 3 {
            return Err(parse_err(header_line, format!("expected param line, got {line:?}")));
        }
        let name = fields[1].to_string();
        let rank: usize = fields[2]
            .parse()
            .map_err(|e| parse_err(header_line, format!("bad rank: {e}")))?;
        if fields.len() != 3 + rank {
            return Err(parse_err(
                header_line,
                format!("param {name} declares rank {rank} but has {} extents", fields.len() - 3),
            ));
        }
        let mut shape = Vec::with_capacity(rank);
        for f in &fields[3..] {
            shape.push(
                f.parse::<usize>()
                    .map_err(|e| parse_err(header_line, format!("bad extent: {e}")))?,
            );
        }
        let numel: usize = shape.iter().product();
        let data_line = reader
            .next()?
            .ok_or_else(|| parse_err(header_line, format!("param {name} missing value line")))?;
        let value_line = reader.line_no;
        let words: Vec<&str> = data_line.split_ascii_whitespace().collect();
        if words.len() != numel {
            return Err(parse_err(
                value_line,
                format!("param {name} has {} values, shape needs {numel}", words.len()),
            ));
        }
        let mut data = Vec::with_capacity(numel);
        for w in words {
            if w.len() != 16 {
                return Err(parse_err(
                    value_line,
                    format!("value word {w:?} is not 16 hex digits"),
                ));
            }
            let bits = u64::from_str_radix(w, 16)
                .map_err(|e| parse_err(value_line, format!("bad value word {w:?}: {e}")))?;
            data.push(f64::from_bits(bits));
        }
        let tensor = Tensor::from_vec(data, &shape)
            .map_err(|e| parse_err(header_line, format!("param {name}: {e}")))?;
        blocks.push((name, tensor));
    }
    Ok(blocks)
}

/// Rebuild a model from checkpoint blocks. The variant and fusion kind are
/// not stored in the checkpoint; they come from the caller (training
/// manifests record them).
pub fn model_from_blocks(
    blocks: Vec<(String, Tensor)>,
    variant: Variant,
    fusion: FusionKind,
) -> Result<ModelParams, DetectorError> {
    let map: HashMap<String, Tensor> = blocks.into_iter().collect();
    let take = |name: &str| -> Result<Tensor, DetectorError> {
        map.get(name)
            .cloned()
            .ok_or_else(|| DetectorError::MissingParam(name.to_string()))
    };
    let se = |prefix: &str| -> Result<SeFusionParams, DetectorError> {
        Ok(SeFusionParams {
            w1: take(&format!("{prefix}.w1"))?,
            b1: take(&format!("{prefix}.b1"))?,
            w_gate: take(&format!("{prefix}.w_gate"))?,
            b_gate: take(&format!("{prefix}.b_gate"))?,
            w2: take(&format!("{prefix}.w2"))?,
            b2: take(&format!("{prefix}.b2"))?,
        })
    };
    let attn = |prefix: &str| -> Result<crate::fusion::AttentionParams, DetectorError> {
        Ok(crate::fusion::AttentionParams {
            wq: take(&format!("{prefix}.wq"))?,
            bq: take(&format!("{prefix}.bq"))?,
            wk: take(&format!("{prefix}.wk"))?,
            bk: take(&format!("{prefix}.bk"))?,
            wv: take(&format!("{prefix}.wv"))?,
            bv: take(&format!("{prefix}.bv"))?,
            wo: take(&format!("{prefix}.wo"))?,
            bo: take(&format!("{prefix}.bo"))?,
        })
    };

    let has = |prefix: &str| map.keys().any(|k| k.starts_with(prefix));
    Ok(ModelParams {
        variant,
        fusion,
        se_global: if has("se_global.") { Some(se("se_global")?) } else { None },
        se_local: if has("se_local.") { Some(se("se_local")?) } else { None },
        dual: if has("dual.") {
            Some(DualBranchParams {
                g2l: attn("dual.g2l")?,
                l2g: attn("dual.l2g")?,
            })
        } else {
            None
        },
        se_stage2: if has("se_stage2.") { Some(se("se_stage2")?) } else { None },
        head: DetectionHead {
            w1: take("head.w1")?,
            b1: take("head.b1")?,
            w2: take("head.w2")?,
            b2: take("head.b2")?,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{default_profiles, generate_dataset, SceneGenOptions};
    use crate::tensor::finite_diff_check_multi;
    use rand::Rng;

    fn tiny_setup() -> PipelineSetup {
        PipelineSetup::default()
    }

    fn tiny_dataset(count: usize) -> Vec<Scene> {
        let setup = tiny_setup();
        let (scenes, _) = generate_dataset(
            900,
            count,
            &default_profiles(),
            &setup.grid,
            &SceneGenOptions::default(),
        );
        scenes
    }

    #[test]
    fn head_zero_weights_give_zero_logits() {
        let head = DetectionHead::zeros(4, 2);
        let mut tape = Tape::new();
        let bev = Tensor::full(&[4, 6, 6], 1.25);
        let out = head_forward(&mut tape, &bev, &head).unwrap();
        assert_eq!(out.shape(), &[2, 6, 6]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_shape_contract_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = DetectionHead::init(8, 2, &mut rng);
        let mut tape = Tape::new();
        let bev = Tensor::zeros(&[8, 16, 16]);
        let out = head_forward(&mut tape, &bev, &head).unwrap();
        assert_eq!(out.shape(), &[2, 16, 16]);

        // finite differences through the head
        let head_small = DetectionHead::init(3, 2, &mut rng);
        let bev: Vec<f64> = (0..3 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bev = Tensor::from_vec(bev, &[3, 4, 4]).unwrap();
        let w1 = head_small.w1.clone();
        let err = finite_diff_check_multi(
            |tape, inputs| {
                let h = DetectionHead {
                    w1: inputs[1].clone(),
                    b1: head_small.b1.clone(),
                    w2: head_small.w2.clone(),
                    b2: head_small.b2.clone(),
                };
                let logits = head_forward(tape, &inputs[0], &h)?;
                let sq = tape.mul(&logits, &logits)?;
                Ok(tape.sum(&sq))
            },
            &[bev, w1],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "head fd error {err}");
    }

    #[test]
    fn heatmap_loss_against_closed_form() {
        // logits = logit(targets) makes the loss the targets' own
        // (weighted) entropy
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let targets: Vec<f64> = (0..32).map(|_| rng.gen_range(0.05..0.95)).collect();
        let logits: Vec<f64> = targets.iter().map(|t| (t / (1.0 - t)).ln()).collect();
        let t = Tensor::from_vec(targets.clone(), &[2, 4, 4]).unwrap();
        let l = Tensor::from_vec(logits, &[2, 4, 4]).unwrap();
        let mut tape = Tape::new();
        let loss = heatmap_loss(&mut tape, &l, &t).unwrap();

        let pos = targets.iter().filter(|&&x| x > 0.5).count();
        let w = (targets.len() - pos) as f64 / pos as f64;
        let expect: f64 = targets
            .iter()
            .map(|&x| -(w * x * x.ln() + (1.0 - x) * (1.0 - x).ln()))
            .sum::<f64>()
            / targets.len() as f64;
        assert!((loss.item() - expect).abs() <= 1e-10);
    }

    #[test]
    fn heatmap_loss_confident_negatives_and_nonnegative() {
        let targets = Tensor::zeros(&[1, 3, 3]);
        let logits = Tensor::full(&[1, 3, 3], -40.0);
        let mut tape = Tape::new();
        let loss = heatmap_loss(&mut tape, &logits, &targets).unwrap();
        assert!(loss.item() >= 0.0 && loss.item() <= 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let t: Vec<f64> = (0..9).map(|_| rng.gen_range(0.0..1.0)).collect();
            let l: Vec<f64> = (0..9).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let loss = heatmap_loss(
                &mut tape,
                &Tensor::from_vec(l, &[1, 3, 3]).unwrap(),
                &Tensor::from_vec(t, &[1, 3, 3]).unwrap(),
            )
            .unwrap();
            assert!(loss.item() >= 0.0);
        }
    }

    #[test]
    fn targets_are_gaussian_splats() {
        let setup = tiny_setup();
        let scenes = tiny_dataset(3);
        for scene in &scenes {
            let t = heatmap_targets(scene, &setup.grid, 2);
            assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            for (class, gx, gy) in gt_centers(scene, &setup.grid) {
                let (ix, iy) = (gx.round() as usize, gy.round() as usize);
                if ix < setup.grid.we && iy < setup.grid.he {
                    let v = t.at(&[class as usize, iy, ix]);
                    assert!(v > 0.3, "peak cell has target {v}");
                }
            }
        }
    }

    #[test]
    fn baseline_flat_uses_reference_pooling_directly() {
        // structural identity: the flat variant's BEV input equals the
        // single-slice reference pool output
        let setup = tiny_setup();
        let scenes = tiny_dataset(2);
        let slices = setup.variant_slices(Variant::BaselineFlat);
        assert_eq!(slices.len(), 1);
        let prepared = prepare_scenes(&scenes, &setup, &slices).unwrap();
        let coords = rig_coords(&scenes[0], &setup.frustum);
        for (scene, prep) in scenes.iter().zip(&prepared) {
            let mut frustums = Vec::new();
            for (i, c) in coords.iter().enumerate() {
                let (f, d) =
                    render_camera_features(scene, i, &setup.frustum, &setup.render).unwrap();
                let v = lift(&f, &d, DepthValidation::Strict).unwrap();
                frustums.push(FrustumFeatures::new(v, c.clone()).unwrap());
            }
            let reference = crate::pooling::pool_slice_reference(
                &frustums,
                &setup.grid,
                &slices[0],
                setup.render.channels,
            )
            .unwrap();
            assert_eq!(&prep.stack.data()[..], reference.data());
        }
    }

    #[test]
    fn training_lr_zero_keeps_parameters() {
        let setup = tiny_setup();
        let scenes = tiny_dataset(4);
        let config = TrainConfig {
            variant: Variant::BaselineFlat,
            epochs: 2,
            lr: 0.0,
            train_scenes: 4,
            val_scenes: 0,
            ..TrainConfig::default()
        };
        let outcome = train(&config, &scenes, &setup).unwrap();
        let fresh = ModelParams::init(&config, &setup).unwrap();
        for ((_, a), (_, b)) in outcome
            .model
            .named_tensors()
            .iter()
            .zip(fresh.named_tensors().iter())
        {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(outcome.losses.len(), 2);
    }

    #[test]
    fn training_is_deterministic_under_seed() {
        let setup = tiny_setup();
        let scenes = tiny_dataset(5);
        let config = TrainConfig {
            variant: Variant::LocalOnly,
            fusion: FusionKind::Se,
            epochs: 2,
            lr: 0.05,
            seed: 11,
            train_scenes: 5,
            val_scenes: 0,
            ..TrainConfig::default()
        };
        let a = train(&config, &scenes, &setup).unwrap();
        let b = train(&config, &scenes, &setup).unwrap();
        assert_eq!(a.losses, b.losses);
        for ((na, ta), (nb, tb)) in a
            .model
            .named_tensors()
            .iter()
            .zip(b.model.named_tensors().iter())
        {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn invalid_variant_fusion_combo_is_rejected() {
        let bad = TrainConfig {
            variant: Variant::FullSan,
            fusion: FusionKind::Mean,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(DetectorError::BadConfig(_))));
        let bad = TrainConfig {
            variant: Variant::LocalOnly,
            fusion: FusionKind::SeTrans,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn forward_paths_cover_all_variants() {
        let setup = tiny_setup();
        let scenes = tiny_dataset(1);
        let combos = [
            (Variant::BaselineFlat, FusionKind::SeTrans),
            (Variant::Band { lower: -2.0, upper: -1.0 }, FusionKind::SeTrans),
            (Variant::LocalOnly, FusionKind::Mean),
            (Variant::LocalOnly, FusionKind::Se),
            (Variant::GlobalOnly, FusionKind::Se),
            (Variant::FullSan, FusionKind::SeMean),
            (Variant::FullSan, FusionKind::SeSe),
            (Variant::FullSan, FusionKind::SeTrans),
        ];
        for (variant, fusion) in combos {
            let config = TrainConfig {
                variant,
                fusion,
                ..TrainConfig::default()
            };
            let slices = setup.variant_slices(variant);
            let prepared = prepare_scenes(&scenes, &setup, &slices).unwrap();
            let model = ModelParams::init(&config, &setup).unwrap();
            let mut tape = Tape::new();
            let logits = model_forward(&mut tape, &model, &prepared[0].stack).unwrap();
            assert_eq!(
                logits.shape(),
                &[2, setup.grid.he, setup.grid.we],
                "variant {variant:?} fusion {fusion}"
            );
        }
    }

    #[test]
    fn stack_pair_keeps_gradients_flowing() {
        let mut tape = Tape::new();
        let a = tape.var(vec![1.0, 2.0], &[1, 1, 1, 2]).unwrap();
        let b = tape.var(vec![3.0, 4.0], &[1, 1, 1, 2]).unwrap();
        let pair = stack_pair(&mut tape, &a, &b).unwrap();
        assert_eq!(pair.shape(), &[2, 1, 1, 2]);
        assert_eq!(pair.data(), &[1.0, 2.0, 3.0, 4.0]);
        let s = tape.sum(&pair);
        let grads = tape.backward(&s).unwrap();
        assert_eq!(grads.grad(&a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.grad(&b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn perfect_heatmaps_score_one_and_empty_scores_zero() {
        let setup = tiny_setup();
        let scenes = tiny_dataset(6);
        let slices = setup.variant_slices(Variant::BaselineFlat);
        let prepared = prepare_scenes(&scenes, &setup, &slices).unwrap();
        // oracle detections straight from the targets
        let classes = setup.class_count();
        let mut tallies = vec![(0usize, 0usize, 0usize); classes];
        let mut any_gt = false;
        for p in &prepared {
            let detections = extract_detections(&p.targets);
            any_gt |= !p.gt.is_empty();
            match_scene(&detections, &p.gt, setup.grid.we, classes, &mut tallies);
        }
        assert!(any_gt);
        for &(tp, fp, fn_) in &tallies {
            assert_eq!(fp, 0, "oracle produced false positives");
            // overlapping same-class splats can merge peaks; allow the rare
            // merged pair but require near-perfect recall
            assert!(fn_ * 20 <= tp.max(1), "tp {tp} fn {fn_}");
        }

        // all-background heatmaps: no detections, score 0 where GT exists
        let zeros = Tensor::zeros(&[classes, setup.grid.he, setup.grid.we]);
        assert!(extract_detections(&zeros).is_empty());
    }

    #[test]
    fn random_heatmaps_score_poorly() {
        let setup = tiny_setup();
        let scenes = tiny_dataset(10);
        let slices = setup.variant_slices(Variant::BaselineFlat);
        let prepared = prepare_scenes(&scenes, &setup, &slices).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let classes = setup.class_count();
        let mut tallies = vec![(0usize, 0usize, 0usize); classes];
        for p in &prepared {
            let noise: Vec<f64> = (0..classes * setup.grid.he * setup.grid.we)
                .map(|_| rng.gen_range(0.0..1.0))
                .collect();
            let heat =
                Tensor::from_vec(noise, &[classes, setup.grid.he, setup.grid.we]).unwrap();
            let detections = extract_detections(&heat);
            match_scene(&detections, &p.gt, setup.grid.we, classes, &mut tallies);
        }
        for &(tp, fp, fn_) in &tallies {
            let denom = 2 * tp + fp + fn_;
            let f1 = if denom == 0 { 1.0 } else { 2.0 * tp as f64 / denom as f64 };
            assert!(f1 < 0.2, "random predictions scored {f1}");
        }
    }

    #[test]
    fn nms_tie_break_prefers_lowest_linear_index() {
        // two equal adjacent peaks: only the lower linear index survives
        let mut data = vec![0.0; 25];
        data[2 * 5 + 2] = 0.9;
        data[2 * 5 + 3] = 0.9;
        let heat = Tensor::from_vec(data, &[1, 5, 5]).unwrap();
        let det = extract_detections(&heat);
        assert_eq!(det.len(), 1);
        assert_eq!((det[0].ix, det[0].iy), (2, 2));
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let setup = tiny_setup();
        let config = TrainConfig::default();
        let model = ModelParams::init(&config, &setup).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&model, &mut bytes).unwrap();
        let blocks = read_checkpoint_blocks(io::BufReader::new(&bytes[..])).unwrap();
        let rebuilt = model_from_blocks(blocks, model.variant, model.fusion).unwrap();
        for ((na, ta), (nb, tb)) in model
            .named_tensors()
            .iter()
            .zip(rebuilt.named_tensors().iter())
        {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            assert_eq!(ta.data(), tb.data());
        }

        // byte determinism
        let mut again = Vec::new();
        write_checkpoint(&model, &mut again).unwrap();
        assert_eq!(bytes, again);

        // version gate and truncation
        let bad = "BEVSAN-CKPT v9\n";
        assert!(matches!(
            read_checkpoint_blocks(io::BufReader::new(bad.as_bytes())),
            Err(DetectorError::Version { .. })
        ));
        let cut = &bytes[..bytes.len() - 10];
        assert!(matches!(
            read_checkpoint_blocks(io::BufReader::new(cut)),
            Err(DetectorError::Parse { .. })
        ));
    }

    #[test]
    fn ablation_structure() {
        let setup = tiny_setup();
        let scenes = tiny_dataset(8);
        let configs = vec![
            TrainConfig {
                variant: Variant::BaselineFlat,
                epochs: 1,
                lr: 0.01,
                train_scenes: 6,
                val_scenes: 2,
                ..TrainConfig::default()
            },
            TrainConfig {
                variant: Variant::LocalOnly,
                fusion: FusionKind::Se,
                epochs: 1,
                lr: 0.01,
                train_scenes: 6,
                val_scenes: 2,
                ..TrainConfig::default()
            },
        ];
        let names = vec!["cone".to_string(), "bus".to_string()];
        let report = run_ablation(&configs, &[1, 2], &scenes, &setup, &names).unwrap();
        // 2 variants x 2 seeds x (2 classes + mean)
        assert_eq!(report.rows.len(), 2 * 2 * 3);
        assert_eq!(report.summaries.len(), 2);
        let csv = report.to_csv();
        assert!(csv.starts_with("variant,seed,class,score\n"));
        assert_eq!(report.seed_means("baseline-flat").len(), 2);
        assert!(report.mean_of("local-only:se").is_some());
    }
}
