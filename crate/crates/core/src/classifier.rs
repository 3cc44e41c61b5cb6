//! The view classifier: model construction, the training loop, inference and
//! checkpoints.
//!
//! Training follows a fixed protocol: adaptive-moment updates over augmented
//! epochs, per-epoch validation accuracy, and parameters restored from the
//! epoch with the highest validation accuracy (earlier epoch on ties).
//! Inference never touches sector masks.

use std::collections::HashMap;
use std::fs;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::CamModel;
use crate::augment::{AugmentError, Augmenter};
use crate::data::Frame;
use crate::nn::{Adam, Mode, ResNet};
use crate::objective::{
    cross_entropy_with_grad, example_weight, weighted_cross_entropy_with_grad, ObjectiveError,
    WeightingConfig,
};
use crate::rng::{derived_rng, Rng};

const TAG_INIT: u64 = 0x494e4954;
const TAG_SHUFFLE: u64 = 0x53485546;
const CHECKPOINT_MAGIC: &[u8; 8] = b"BMCK0001";

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (lr {lr}); aborting")]
    NonFiniteLoss { epoch: usize, batch: usize, lr: f64 },
    #[error("input resolution {got:?} does not match model resolution {expected}")]
    ResolutionMismatch { expected: usize, got: (usize, usize) },
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("checkpoint io failed for {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

/// Architecture description. The network is a stem convolution, four stages
/// of two residual blocks (downsampling between stages), global average
/// pooling and a linear head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub resolution: usize,
    /// Channel widths of the four stages.
    pub widths: [usize; 4],
    pub num_classes: usize,
    /// Stage whose output feeds GradCAM; the final stage by default.
    pub gradcam_stage: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            resolution: 64,
            widths: [16, 32, 64, 128],
            num_classes: 4,
            gradcam_stage: 3,
        }
    }
}

impl ModelSpec {
    /// Full-width variant for 112x112 fidelity runs.
    pub fn full_width_112() -> Self {
        Self {
            resolution: 112,
            widths: [64, 128, 256, 512],
            num_classes: 4,
            gradcam_stage: 3,
        }
    }

    pub fn validate(&self) -> Result<(), ClassifierError> {
        if self.resolution % 8 != 0 {
            return Err(ClassifierError::Config(format!(
                "resolution {} must be divisible by 8 (three downsampling stages)",
                self.resolution
            )));
        }
        if self.resolution / 8 < 4 {
            return Err(ClassifierError::Config(format!(
                "resolution {} leaves a final feature map below 4x4",
                self.resolution
            )));
        }
        if self.num_classes < 2 {
            return Err(ClassifierError::Config("need at least 2 classes".into()));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(ClassifierError::Config("stage widths must be positive".into()));
        }
        if self.gradcam_stage > 3 {
            return Err(ClassifierError::Config(format!(
                "gradcam_stage {} out of range (0..=3)",
                self.gradcam_stage
            )));
        }
        Ok(())
    }

    /// Spatial size of the final-stage feature map.
    pub fn final_feature_size(&self) -> usize {
        self.resolution / 8
    }
}

/// Training protocol parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            seeds: vec![1, 2, 3],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        if self.epochs == 0 {
            return Err(ClassifierError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(ClassifierError::Config("batch size must be >= 2".into()));
        }
        if self.seeds.is_empty() {
            return Err(ClassifierError::Config("need at least one seed".into()));
        }
        Ok(())
    }
}

/// A built (possibly trained) classifier.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    net: ResNet,
}

/// Builds a model with seed-determined initial parameters.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model, ClassifierError> {
    spec.validate()?;
    let mut rng: Rng = derived_rng(seed, &[TAG_INIT]);
    let net = ResNet::new(&spec.widths, spec.num_classes, &mut rng);
    Ok(Model {
        spec: spec.clone(),
        net,
    })
}

impl Model {
    fn check_resolution(&self, dim: (usize, usize)) -> Result<(), ClassifierError> {
        if dim != (self.spec.resolution, self.spec.resolution) {
            return Err(ClassifierError::ResolutionMismatch {
                expected: self.spec.resolution,
                got: dim,
            });
        }
        Ok(())
    }

    pub(crate) fn net_mut(&mut self) -> &mut ResNet {
        &mut self.net
    }
}

impl CamModel for Model {
    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn forward_features(&mut self, x: &Array4<f32>) -> (Array2<f32>, Array4<f32>) {
        let logits = self.net.forward(x, Mode::EvalCached);
        let features = self
            .net
            .stage_output(self.spec.gradcam_stage)
            .expect("stage output cached")
            .clone();
        (logits, features)
    }

    fn head_forward(&self, features: &Array4<f32>) -> Array2<f32> {
        self.net
            .forward_from_stage_ref(features, self.spec.gradcam_stage)
    }

    fn head_backward(&mut self, dlogits: &Array2<f32>) -> Array4<f32> {
        self.net
            .backward_to_stage(dlogits, Some(self.spec.gradcam_stage))
    }
}

/// Which loss drives training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Plain mean cross-entropy.
    PlainCrossEntropy,
    /// Example-level weighted cross-entropy.
    Weighted(WeightingConfig),
}

/// Per-epoch training record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// 1-based epoch index.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

/// A trained model with its history and checkpoint bookkeeping.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochStats>,
    /// 1-based epoch whose validation accuracy was highest (earliest on ties).
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

/// Trains a model for one seed. Deterministic given (spec, augmenter,
/// objective, cfg, data, seed).
pub fn train(
    spec: &ModelSpec,
    augmenter: &Augmenter,
    objective: &Objective,
    cfg: &TrainConfig,
    train_frames: &[Frame],
    val_frames: &[Frame],
    seed: u64,
) -> Result<TrainOutcome, ClassifierError> {
    cfg.validate()?;
    if train_frames.is_empty() || val_frames.is_empty() {
        return Err(ClassifierError::Config("empty train or val set".into()));
    }
    for f in train_frames.iter().chain(val_frames.iter()) {
        if f.image.dim() != (spec.resolution, spec.resolution) {
            return Err(ClassifierError::ResolutionMismatch {
                expected: spec.resolution,
                got: f.image.dim(),
            });
        }
    }
    let mut model = build_model(spec, seed)?;
    let mut opt = Adam::new(cfg.learning_rate as f32);
    let val_labels: Vec<usize> = val_frames.iter().map(|f| f.label).collect();
    let val_images: Vec<&Array2<f32>> = val_frames.iter().map(|f| &f.image).collect();

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<(String, Vec<usize>, Vec<f32>)>)> = None;

    for epoch in 1..=cfg.epochs {
        let examples = augmenter.epoch(train_frames, epoch as u64)?;
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut shuffle_rng = derived_rng(seed, &[TAG_SHUFFLE, epoch as u64]);
        for i in (1..order.len()).rev() {
            let j = rand::Rng::random_range(&mut shuffle_rng, 0..=i);
            order.swap(i, j);
        }

        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for (batch_idx, batch_ids) in order.chunks(cfg.batch_size).enumerate() {
            let batch = batch_ids.len();
            let mut x = Array4::<f32>::zeros((batch, 1, spec.resolution, spec.resolution));
            let mut labels = Vec::with_capacity(batch);
            let mut weights = Vec::with_capacity(batch);
            for (i, &id) in batch_ids.iter().enumerate() {
                let ex = &examples[id];
                x.index_axis_mut(Axis(0), i)
                    .index_axis_mut(Axis(0), 0)
                    .assign(&ex.image);
                labels.push(ex.label);
                weights.push(match objective {
                    Objective::PlainCrossEntropy => 1.0,
                    Objective::Weighted(w) => example_weight(ex.is_backmixed, w),
                });
            }
            model.net.zero_grad();
            let logits = model.net.forward(&x, Mode::Train);
            let logits64 = logits.mapv(|v| v as f64);
            let (loss, dlogits64) = match objective {
                Objective::PlainCrossEntropy => cross_entropy_with_grad(&logits64, &labels)?,
                Objective::Weighted(_) => {
                    weighted_cross_entropy_with_grad(&logits64, &labels, &weights)?
                }
            };
            if !loss.is_finite() {
                return Err(ClassifierError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    lr: cfg.learning_rate,
                });
            }
            let dlogits = dlogits64.mapv(|v| v as f32);
            model.net.backward(&dlogits);
            opt.step(&mut model.net.params_mut());
            loss_sum += loss * batch as f64;
            seen += batch;
        }
        let train_loss = loss_sum / seen as f64;

        let (val_pred, _) = predict_refs(&model, &val_images, cfg.batch_size)?;
        let correct = val_pred
            .iter()
            .zip(&val_labels)
            .filter(|(p, l)| p == l)
            .count();
        let val_accuracy = correct as f64 / val_labels.len() as f64;
        history.push(EpochStats {
            epoch,
            train_loss,
            val_accuracy,
        });
        log::info!(
            "epoch {epoch}/{}: train_loss {train_loss:.4} val_acc {val_accuracy:.4}",
            cfg.epochs
        );

        let is_better = match &best {
            None => true,
            Some((acc, _, _)) => val_accuracy > *acc,
        };
        if is_better {
            best = Some((val_accuracy, epoch, model.net.state_tensors()));
        }
    }

    let (best_val_accuracy, best_epoch, state) = best.expect("at least one epoch");
    let map: HashMap<String, (Vec<usize>, Vec<f32>)> = state
        .into_iter()
        .map(|(n, s, d)| (n, (s, d)))
        .collect();
    model
        .net
        .load_state_tensors(&map)
        .map_err(ClassifierError::Config)?;
    model.net.clear_caches();
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_accuracy,
    })
}

/// Deterministic inference over images; no masks involved. Returns predicted
/// labels and the raw logits.
pub fn predict(
    model: &Model,
    images: &[Array2<f32>],
) -> Result<(Vec<usize>, Array2<f32>), ClassifierError> {
    let refs: Vec<&Array2<f32>> = images.iter().collect();
    predict_refs(model, &refs, 64)
}

fn predict_refs(
    model: &Model,
    images: &[&Array2<f32>],
    batch_size: usize,
) -> Result<(Vec<usize>, Array2<f32>), ClassifierError> {
    if images.is_empty() {
        return Err(ClassifierError::Config("no images to predict".into()));
    }
    for img in images {
        model.check_resolution(img.dim())?;
    }
    let res = model.spec.resolution;
    let mut labels = Vec::with_capacity(images.len());
    let mut logits_all = Array2::<f32>::zeros((images.len(), model.spec.num_classes));
    let mut row = 0usize;
    for chunk in images.chunks(batch_size) {
        let mut x = Array4::<f32>::zeros((chunk.len(), 1, res, res));
        for (i, img) in chunk.iter().enumerate() {
            x.index_axis_mut(Axis(0), i)
                .index_axis_mut(Axis(0), 0)
                .assign(*img);
        }
        let logits = model.net.forward_infer(&x);
        for r in logits.rows() {
            let best = r
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap_or(0);
            labels.push(best);
            logits_all.row_mut(row).assign(&r);
            row += 1;
        }
    }
    Ok((labels, logits_all))
}

/// Serialized checkpoint: magic, JSON header (spec, train config, seed,
/// tensor table), then raw little-endian f32 tensor data in table order.
#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    spec: ModelSpec,
    train_config: TrainConfig,
    seed: u64,
    tensors: Vec<(String, Vec<usize>)>,
}

pub fn save_checkpoint(
    path: &Path,
    model: &mut Model,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(), ClassifierError> {
    let io = |source| ClassifierError::Io {
        path: path.to_path_buf(),
        source,
    };
    let state = model.net.state_tensors();
    let header = CheckpointHeader {
        spec: model.spec.clone(),
        train_config: cfg.clone(),
        seed,
        tensors: state.iter().map(|(n, s, _)| (n.clone(), s.clone())).collect(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut file = fs::File::create(path).map_err(io)?;
    file.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())
        .map_err(io)?;
    file.write_all(&header_json).map_err(io)?;
    for (_, _, data) in &state {
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        file.write_all(&bytes).map_err(io)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, TrainConfig, u64), ClassifierError> {
    let io = |source| ClassifierError::Io {
        path: path.to_path_buf(),
        source,
    };
    let format = |reason: String| ClassifierError::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut file = fs::File::open(path).map_err(io)?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(format("bad magic".into()));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes).map_err(io)?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json).map_err(io)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&header_json).map_err(|e| format(format!("bad header: {e}")))?;
    let mut model = build_model(&header.spec, header.seed)?;
    let mut tensors = HashMap::new();
    for (name, shape) in &header.tensors {
        let count: usize = shape.iter().product();
        let mut bytes = vec![0u8; count * 4];
        file.read_exact(&mut bytes)
            .map_err(|e| format(format!("tensor {name} truncated: {e}")))?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.insert(name.clone(), (shape.clone(), data));
    }
    model
        .net
        .load_state_tensors(&tensors)
        .map_err(|e| format(e))?;
    Ok((model, header.train_config, header.seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{AugmentationPlan, StandardAugmentConfig};
    use crate::data::Domain;
    use crate::sector::SectorMask;

    fn tiny_frames(n: usize, res: usize) -> Vec<Frame> {
        // Two-class toy task: bright top half vs bright bottom half.
        let mut rng = derived_rng(100, &[5]);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let image = Array2::from_shape_fn((res, res), |(y, _)| {
                    let base = if (label == 0) == (y < res / 2) { 0.8 } else { 0.2 };
                    (base + rand::Rng::random_range(&mut rng, -0.05f32..0.05)).clamp(0.0, 1.0)
                });
                Frame {
                    image,
                    label,
                    patient_id: format!("t{i}"),
                    domain: Domain::InDist,
                    mask: Some(SectorMask::from_fn(res, res, |y, x| {
                        y > 2 && y < res - 2 && x > 2 && x < res - 2
                    })),
                }
            })
            .collect()
    }

    fn no_aug() -> StandardAugmentConfig {
        StandardAugmentConfig {
            rotate_deg: 0.0,
            brightness: 0.0,
            contrast: (1.0, 1.0),
            flip_prob: 0.0,
        }
    }

    fn quick_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            learning_rate: 1e-3,
            seeds: vec![1],
        }
    }

    fn quick_spec() -> ModelSpec {
        ModelSpec {
            resolution: 32,
            widths: [4, 8, 8, 8],
            num_classes: 2,
            gradcam_stage: 3,
        }
    }

    #[test]
    fn model_shapes_and_seed_determinism() {
        let spec = quick_spec();
        let mut a = build_model(&spec, 9).unwrap();
        let x = Array4::<f32>::zeros((8, 1, 32, 32));
        let logits = a.net.forward(&x, Mode::Infer);
        assert_eq!(logits.dim(), (8, 2));

        let mut b = build_model(&spec, 9).unwrap();
        let mut c = build_model(&spec, 10).unwrap();
        let pa = a.net.params_mut();
        let pb = b.net.params_mut();
        let pc = c.net.params_mut();
        for ((x, y), z) in pa.iter().zip(pb.iter()).zip(pc.iter()) {
            assert_eq!(x.value, y.value);
            let _ = z;
        }
        assert!(pa.iter().zip(pc.iter()).any(|(x, z)| x.value != z.value));
    }

    #[test]
    fn invalid_resolution_rejected() {
        let mut spec = quick_spec();
        spec.resolution = 30;
        assert!(build_model(&spec, 1).is_err());
        spec.resolution = 24; // 24/8 = 3 < 4
        assert!(build_model(&spec, 1).is_err());
    }

    #[test]
    fn overfits_a_tiny_set() {
        let frames = tiny_frames(32, 32);
        let plan = AugmentationPlan::with_supervised_ids(&frames, 0.0, vec![], no_aug(), 3).unwrap();
        let outcome = train(
            &quick_spec(),
            &Augmenter::Plan(plan),
            &Objective::PlainCrossEntropy,
            &quick_cfg(30),
            &frames,
            &frames,
            1,
        )
        .unwrap();
        let images: Vec<Array2<f32>> = frames.iter().map(|f| f.image.clone()).collect();
        let (pred, logits) = predict(&outcome.model, &images).unwrap();
        let correct = pred
            .iter()
            .zip(frames.iter())
            .filter(|(p, f)| **p == f.label)
            .count();
        assert_eq!(correct, frames.len(), "train accuracy below 100%");
        // Softmax rows sum to one.
        for row in logits.rows() {
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let sum: f32 = row.iter().map(|&v| (v - max).exp()).sum();
            let total: f32 = row.iter().map(|&v| (v - max).exp() / sum).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_selection_prefers_earlier_on_ties() {
        // Synthetic history check of the argmax rule.
        let accs = [0.5, 0.9, 0.8, 0.9];
        let mut best: Option<(f64, usize)> = None;
        for (i, &a) in accs.iter().enumerate() {
            let better = best.map_or(true, |(acc, _)| a > acc);
            if better {
                best = Some((a, i + 1));
            }
        }
        assert_eq!(best.unwrap().1, 2);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let frames = tiny_frames(16, 32);
        let run = || {
            let plan =
                AugmentationPlan::with_supervised_ids(&frames, 0.0, vec![], no_aug(), 3).unwrap();
            train(
                &quick_spec(),
                &Augmenter::Plan(plan),
                &Objective::PlainCrossEntropy,
                &quick_cfg(3),
                &frames,
                &frames,
                7,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.history.len(), b.history.len());
        for (x, y) in a.history.iter().zip(b.history.iter()) {
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
            assert_eq!(x.val_accuracy.to_bits(), y.val_accuracy.to_bits());
        }
    }

    #[test]
    fn duplicate_rows_predict_identically() {
        let spec = quick_spec();
        let model = build_model(&spec, 4).unwrap();
        let img = Array2::from_shape_fn((32, 32), |(y, x)| ((y * x) % 7) as f32 / 7.0);
        let (pred, logits) = predict(&model, &[img.clone(), img]).unwrap();
        assert_eq!(pred[0], pred[1]);
        for c in 0..2 {
            assert_eq!(logits[[0, c]].to_bits(), logits[[1, c]].to_bits());
        }
    }

    #[test]
    fn resolution_mismatch_errors() {
        let model = build_model(&quick_spec(), 4).unwrap();
        let img = Array2::<f32>::zeros((16, 16));
        assert!(matches!(
            predict(&model, &[img]),
            Err(ClassifierError::ResolutionMismatch { .. })
        ));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let frames = tiny_frames(8, 32);
        let plan = AugmentationPlan::with_supervised_ids(&frames, 0.0, vec![], no_aug(), 3).unwrap();
        let cfg = quick_cfg(2);
        let outcome = train(
            &quick_spec(),
            &Augmenter::Plan(plan),
            &Objective::PlainCrossEntropy,
            &cfg,
            &frames,
            &frames,
            2,
        )
        .unwrap();
        let mut model = outcome.model;
        save_checkpoint(&path, &mut model, &cfg, 2).unwrap();
        let (restored, cfg2, seed) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(seed, 2);
        let images: Vec<Array2<f32>> = frames.iter().map(|f| f.image.clone()).collect();
        let (_, la) = predict(&model, &images).unwrap();
        let (_, lb) = predict(&restored, &images).unwrap();
        for (a, b) in la.iter().zip(lb.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
