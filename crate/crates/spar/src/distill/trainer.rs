//! Teacher precomputation and the distillation loop.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use super::{adamw_update, augment, augment_rng, ensure_min_side, OptimizerState, TrainConfig};
use super::{FeatureStore, FeatureStoreRecord};
use crate::tensor::{mse, FeatureGrid, Scalar};
use crate::vit::{backward_tail, forward, forward_window, ModelParams, ViTConfig};
use crate::window::{plan_windows, stitch_features};
use crate::{Result, SparError};

/// Copies the `K x K` pixel window at `(r0, c0)`.
fn pixel_window(image: &FeatureGrid, r0: usize, c0: usize, window: usize) -> FeatureGrid {
    let ch = image.channels();
    FeatureGrid::from_fn(window, window, ch, |r, c, k| image.get(r0 + r, c0 + c, k))
}

/// Sliding-window teacher features for one already-augmented image:
/// plans windows at the model's native side, forwards each crop, and
/// stitches the per-window maps into the single-pass layout.
pub fn teacher_features(
    image: &FeatureGrid,
    params: &ModelParams,
    cfg: &ViTConfig,
    stride: usize,
    threads: usize,
) -> Result<FeatureGrid> {
    let (h, w, _) = image.shape();
    let plan = plan_windows(h, w, cfg.native_side, stride, cfg.patch_size)?;
    let feats: Vec<FeatureGrid> = if threads > 1 {
        plan.origins
            .par_iter()
            .map(|&(r0, c0)| forward_window(&pixel_window(image, r0, c0, cfg.native_side), params, cfg))
            .collect::<Result<_>>()?
    } else {
        plan.origins
            .iter()
            .map(|&(r0, c0)| forward_window(&pixel_window(image, r0, c0, cfg.native_side), params, cfg))
            .collect::<Result<_>>()?
    };
    stitch_features(&feats, &plan, cfg.patch_size)
}

/// Augments every image once, runs the sliding-window teacher, stitches
/// features and writes one store record per image, in dataset order.
pub fn precompute_teacher(
    dataset: &[(String, FeatureGrid)],
    teacher_params: &ModelParams,
    teacher_cfg: &ViTConfig,
    cfg: &TrainConfig,
    window: usize,
    stride: usize,
    store_path: &Path,
    threads: usize,
) -> Result<FeatureStore> {
    cfg.validate()?;
    if window != teacher_cfg.native_side {
        return Err(SparError::InvalidArgument(format!(
            "teacher window {window} must equal the model's native side {}",
            teacher_cfg.native_side
        )));
    }
    let job = |(index, (id, image)): (usize, &(String, FeatureGrid))| -> Result<FeatureStoreRecord> {
        let mut rng = augment_rng(cfg.seed, index as u64);
        let augmented = augment(image, &mut rng, cfg, teacher_cfg.patch_size)?;
        let augmented = ensure_min_side(&augmented, window, teacher_cfg.patch_size)?;
        let stitched = teacher_features(&augmented, teacher_params, teacher_cfg, stride, 1)?;
        Ok(FeatureStoreRecord::new_f32(id.clone(), &stitched))
    };
    let records: Vec<FeatureStoreRecord> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| SparError::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(|| dataset.par_iter().enumerate().map(job).collect::<Result<_>>())?
    } else {
        dataset.iter().enumerate().map(job).collect::<Result<_>>()?
    };
    let store = FeatureStore::from_records(records)?;
    store.write(store_path)?;
    Ok(store)
}

/// One distillation step: single-pass forward, MSE against the stored
/// teacher features, backward through the trainable tail, AdamW update.
/// Returns the pre-update loss.
pub fn train_step(
    params: &mut ModelParams,
    image: &FeatureGrid,
    teacher: &FeatureGrid,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    vit_cfg: &ViTConfig,
) -> Result<Scalar> {
    let (student, cache) = forward(image, params, vit_cfg)?;
    if student.shape() != teacher.shape() {
        return Err(SparError::ShapeMismatch(format!(
            "student features {:?} do not match stored teacher features {:?}; \
             augmentation and store are out of sync",
            student.shape(),
            teacher.shape()
        )));
    }
    let loss = mse(&student, teacher)?;
    debug_assert!(loss.is_finite() && loss >= 0.0);
    let numel = student.data().len() as f64;
    let (h, w, d) = student.shape();
    let grad_data: Vec<f64> = student
        .data()
        .iter()
        .zip(teacher.data())
        .map(|(s, t)| 2.0 * (s - t) / numel)
        .collect();
    let grad = FeatureGrid::from_vec(h, w, d, grad_data)?;
    let grads = backward_tail(&cache, &grad, params, vit_cfg)?;
    adamw_update(params, &grads, state, cfg)?;
    Ok(loss)
}

/// Runs `cfg.epochs` passes over the dataset in fixed order with batch
/// size 1. Only tensors selected by `cfg.trainable` change; one log line
/// `epoch step image_id loss` is emitted per step.
pub fn train(
    cfg: &TrainConfig,
    vit_cfg: &ViTConfig,
    dataset: &[(String, FeatureGrid)],
    store: &FeatureStore,
    student_init: ModelParams,
    window: usize,
    log: &mut dyn Write,
) -> Result<ModelParams> {
    cfg.validate()?;
    let mut params = student_init;
    params.trainable = cfg.trainable.mask(vit_cfg.num_blocks);
    let mut state = OptimizerState::new();
    for epoch in 0..cfg.epochs {
        for (index, (id, image)) in dataset.iter().enumerate() {
            let record = store.get(id).ok_or_else(|| SparError::MissingRecord {
                image_id: id.clone(),
            })?;
            let mut rng = augment_rng(cfg.seed, index as u64);
            let augmented = augment(image, &mut rng, cfg, vit_cfg.patch_size)?;
            let augmented = ensure_min_side(&augmented, window, vit_cfg.patch_size)?;
            let loss = train_step(&mut params, &augmented, &record.features, &mut state, cfg, vit_cfg)?;
            writeln!(log, "{epoch} {index} {id} {loss}")
                .map_err(|e| SparError::io("writing training log", e))?;
        }
    }
    Ok(params)
}
