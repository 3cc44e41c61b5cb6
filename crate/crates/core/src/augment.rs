//! Training-time augmentations: standard geometric/photometric transforms,
//! BackMix background swapping, the semi-supervised subset plan, and the
//! Black/Noise/Shuffle background baselines.
//!
//! BackMix keeps a frame's sector and replaces everything outside it with the
//! zero-in-painted background of another training frame, so background content
//! stops predicting the label. In the semi-supervised setting only the
//! f-fraction of frames with masks is eligible, and donor backgrounds come
//! only from that same subset.

use ndarray::Array2;
use rand::Rng as _;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::Frame;
use crate::rng::{derived_rng, Rng};
use crate::sector::SectorMask;

const TAG_SUBSET: u64 = 0x53554253;
const TAG_EXAMPLE: u64 = 0x4558414d;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("shape mismatch: {a:?} vs {b:?}")]
    ShapeMismatch {
        a: (usize, usize),
        b: (usize, usize),
    },
    #[error("configuration error: {0}")]
    Config(String),
}

/// Parameter ranges for the standard augmentations.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardAugmentConfig {
    /// Rotation range in degrees: angle ~ U(-rotate_deg, +rotate_deg).
    pub rotate_deg: f64,
    /// Brightness delta ~ U(-brightness, +brightness).
    pub brightness: f32,
    /// Contrast factor ~ U(contrast.0, contrast.1).
    pub contrast: (f32, f32),
    pub flip_prob: f64,
}

impl Default for StandardAugmentConfig {
    fn default() -> Self {
        Self {
            rotate_deg: 30.0,
            brightness: 0.2,
            contrast: (0.8, 1.2),
            flip_prob: 0.5,
        }
    }
}

/// One concrete draw of standard-augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub angle_deg: f64,
    pub brightness: f32,
    pub contrast: f32,
    pub flip: bool,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        angle_deg: 0.0,
        brightness: 0.0,
        contrast: 1.0,
        flip: false,
    };
}

pub fn sample_params(cfg: &StandardAugmentConfig, rng: &mut Rng) -> AugmentParams {
    let angle_deg = if cfg.rotate_deg > 0.0 {
        rng.random_range(-cfg.rotate_deg..=cfg.rotate_deg)
    } else {
        0.0
    };
    let brightness = if cfg.brightness > 0.0 {
        rng.random_range(-cfg.brightness..=cfg.brightness)
    } else {
        0.0
    };
    let contrast = if cfg.contrast.0 < cfg.contrast.1 {
        rng.random_range(cfg.contrast.0..=cfg.contrast.1)
    } else {
        cfg.contrast.0
    };
    let flip = rng.random::<f64>() < cfg.flip_prob;
    AugmentParams {
        angle_deg,
        brightness,
        contrast,
        flip,
    }
}

/// Rotation with bilinear sampling and zero fill, about the image center.
fn rotate_bilinear(src: &Array2<f32>, angle_deg: f64) -> Array2<f32> {
    let (h, w) = src.dim();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (sin_a, cos_a) = angle_deg.to_radians().sin_cos();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let dy = y as f64 - cy;
        let dx = x as f64 - cx;
        let sx = cos_a * dx + sin_a * dy + cx;
        let sy = -sin_a * dx + cos_a * dy + cy;
        let x0 = sx.floor();
        let y0 = sy.floor();
        let fx = (sx - x0) as f32;
        let fy = (sy - y0) as f32;
        let sample = |yy: f64, xx: f64| -> f32 {
            if yy >= 0.0 && xx >= 0.0 && (yy as usize) < h && (xx as usize) < w {
                src[[yy as usize, xx as usize]]
            } else {
                0.0
            }
        };
        let v00 = sample(y0, x0);
        let v01 = sample(y0, x0 + 1.0);
        let v10 = sample(y0 + 1.0, x0);
        let v11 = sample(y0 + 1.0, x0 + 1.0);
        (v00 * (1.0 - fx) + v01 * fx) * (1.0 - fy) + (v10 * (1.0 - fx) + v11 * fx) * fy
    })
}

/// Rotation with nearest-neighbor sampling and zero fill (for masks).
fn rotate_nearest(src: &Array2<u8>, angle_deg: f64) -> Array2<u8> {
    let (h, w) = src.dim();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (sin_a, cos_a) = angle_deg.to_radians().sin_cos();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let dy = y as f64 - cy;
        let dx = x as f64 - cx;
        let sx = (cos_a * dx + sin_a * dy + cx).round();
        let sy = (-sin_a * dx + cos_a * dy + cy).round();
        if sy >= 0.0 && sx >= 0.0 && (sy as usize) < h && (sx as usize) < w {
            src[[sy as usize, sx as usize]]
        } else {
            0
        }
    })
}

fn flip_horizontal<T: Copy>(src: &Array2<T>) -> Array2<T> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((h, w), |(y, x)| src[[y, w - 1 - x]])
}

/// Applies fixed augmentation parameters to an image and (identically) to its
/// mask. Output intensities are clamped to [0,1]. Identity parameters return
/// the inputs unchanged, bit for bit.
pub fn standard_augment_with(
    image: &Array2<f32>,
    mask: Option<&SectorMask>,
    params: &AugmentParams,
) -> (Array2<f32>, Option<SectorMask>) {
    let mut img = if params.angle_deg != 0.0 {
        rotate_bilinear(image, params.angle_deg)
    } else {
        image.clone()
    };
    if params.contrast != 1.0 || params.brightness != 0.0 {
        img.mapv_inplace(|v| {
            ((v - 0.5) * params.contrast + 0.5 + params.brightness).clamp(0.0, 1.0)
        });
    }
    if params.flip {
        img = flip_horizontal(&img);
    }
    let mask = mask.map(|m| {
        let mut grid = if params.angle_deg != 0.0 {
            rotate_nearest(m.grid(), params.angle_deg)
        } else {
            m.grid().clone()
        };
        if params.flip {
            grid = flip_horizontal(&grid);
        }
        SectorMask::new(grid).expect("rotation preserves binary values")
    });
    (img, mask)
}

/// Draws parameters from `cfg` and applies them.
pub fn standard_augment(
    image: &Array2<f32>,
    mask: Option<&SectorMask>,
    cfg: &StandardAugmentConfig,
    rng: &mut Rng,
) -> (Array2<f32>, Option<SectorMask>) {
    let params = sample_params(cfg, rng);
    standard_augment_with(image, mask, &params)
}

/// Superimposes the sector of frame `i` onto the zero-in-painted background of
/// frame `j`. Pixels outside `mask_i` that fall inside `mask_j` stay zero.
pub fn backmix(
    frame_i: &Array2<f32>,
    mask_i: &SectorMask,
    frame_j: &Array2<f32>,
    mask_j: &SectorMask,
) -> Result<Array2<f32>, AugmentError> {
    let shape = frame_i.dim();
    for other in [mask_i.dim(), frame_j.dim(), mask_j.dim()] {
        if other != shape {
            return Err(AugmentError::ShapeMismatch { a: shape, b: other });
        }
    }
    let mut out = frame_i.clone();
    for (((o, &mi), &fj), &mj) in out
        .iter_mut()
        .zip(mask_i.grid().iter())
        .zip(frame_j.iter())
        .zip(mask_j.grid().iter())
    {
        if mi == 0 {
            *o = if mj == 0 { fj } else { 0.0 };
        }
    }
    Ok(out)
}

/// Background replacement baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    /// Background filled with zeros.
    Black,
    /// Background filled with U(0,1) noise.
    Noise,
    /// Background pixel values permuted in place over background positions.
    Shuffle,
}

/// Replaces background pixels per `kind`; sector pixels are untouched.
pub fn baseline_background(
    image: &Array2<f32>,
    mask: &SectorMask,
    kind: BaselineKind,
    rng: &mut Rng,
) -> Result<Array2<f32>, AugmentError> {
    if image.dim() != mask.dim() {
        return Err(AugmentError::ShapeMismatch {
            a: image.dim(),
            b: mask.dim(),
        });
    }
    let mut out = image.clone();
    match kind {
        BaselineKind::Black => {
            for (o, &m) in out.iter_mut().zip(mask.grid().iter()) {
                if m == 0 {
                    *o = 0.0;
                }
            }
        }
        BaselineKind::Noise => {
            for (o, &m) in out.iter_mut().zip(mask.grid().iter()) {
                if m == 0 {
                    *o = rng.random::<f32>();
                }
            }
        }
        BaselineKind::Shuffle => {
            let mut values: Vec<f32> = image
                .iter()
                .zip(mask.grid().iter())
                .filter(|(_, &m)| m == 0)
                .map(|(&v, _)| v)
                .collect();
            for i in (1..values.len()).rev() {
                let j = rng.random_range(0..=i);
                values.swap(i, j);
            }
            let mut it = values.into_iter();
            for (o, &m) in out.iter_mut().zip(mask.grid().iter()) {
                if m == 0 {
                    *o = it.next().expect("one value per background pixel");
                }
            }
        }
    }
    Ok(out)
}

/// One donor entry: the zero-in-painted background of a supervised frame.
#[derive(Debug, Clone)]
pub struct PoolEntry {
    pub source_id: usize,
    pub background: Array2<f32>,
    pub mask: SectorMask,
}

/// The semi-supervised augmentation plan: which training examples carry masks
/// (and therefore get BackMix), and the donor background pool drawn from that
/// same subset. Immutable after construction.
#[derive(Debug, Clone)]
pub struct AugmentationPlan {
    pub f: f64,
    /// Sorted training-example ids forming the supervised subset.
    pub supervised_ids: Vec<usize>,
    pub background_pool: Vec<PoolEntry>,
    pub std_cfg: StandardAugmentConfig,
    pub seed: u64,
}

impl AugmentationPlan {
    /// Draws the supervised subset of size `round(f * frames.len())` and
    /// builds the donor pool.
    pub fn build(
        frames: &[Frame],
        f: f64,
        std_cfg: StandardAugmentConfig,
        seed: u64,
    ) -> Result<Self, AugmentError> {
        if !(0.0..=1.0).contains(&f) {
            return Err(AugmentError::Config(format!("f must be in [0,1], got {f}")));
        }
        let size = (f * frames.len() as f64).round() as usize;
        let mut ids: Vec<usize> = (0..frames.len()).collect();
        let mut rng = derived_rng(seed, &[TAG_SUBSET]);
        for i in (1..ids.len()).rev() {
            let j = rng.random_range(0..=i);
            ids.swap(i, j);
        }
        ids.truncate(size);
        ids.sort_unstable();
        Self::with_supervised_ids(frames, f, ids, std_cfg, seed)
    }

    /// Builds a plan around an explicitly chosen supervised subset (used by
    /// the disjoint-subset ablation).
    pub fn with_supervised_ids(
        frames: &[Frame],
        f: f64,
        supervised_ids: Vec<usize>,
        std_cfg: StandardAugmentConfig,
        seed: u64,
    ) -> Result<Self, AugmentError> {
        if f > 0.0 && supervised_ids.len() < 2 {
            return Err(AugmentError::Config(format!(
                "background pool needs at least 2 entries to exclude self, got {}",
                supervised_ids.len()
            )));
        }
        let mut background_pool = Vec::with_capacity(supervised_ids.len());
        for &id in &supervised_ids {
            let frame = frames.get(id).ok_or_else(|| {
                AugmentError::Config(format!("supervised id {id} out of range"))
            })?;
            let mask = frame.mask.as_ref().ok_or_else(|| {
                AugmentError::Config(format!(
                    "supervised frame {id} has no sector mask; only masked frames are eligible"
                ))
            })?;
            let mut background = frame.image.clone();
            for (b, &m) in background.iter_mut().zip(mask.grid().iter()) {
                if m == 1 {
                    *b = 0.0;
                }
            }
            background_pool.push(PoolEntry {
                source_id: id,
                background,
                mask: mask.clone(),
            });
        }
        Ok(Self {
            f,
            supervised_ids,
            background_pool,
            std_cfg,
            seed,
        })
    }

    pub fn is_supervised(&self, id: usize) -> bool {
        self.supervised_ids.binary_search(&id).is_ok()
    }
}

/// One augmented training example.
#[derive(Debug, Clone)]
pub struct AugmentedExample {
    pub image: Array2<f32>,
    pub label: usize,
    pub is_backmixed: bool,
}

/// Runs one epoch of augmentation over the training frames, in order.
///
/// Every example gets the standard augmentations; supervised examples then get
/// BackMix with a donor drawn uniformly from the pool excluding themselves.
/// Draws are re-derived per (epoch, example), so donor assignments change
/// across epochs while the supervised subset stays fixed.
pub fn apply_epoch(
    plan: &AugmentationPlan,
    frames: &[Frame],
    epoch: u64,
) -> Result<Vec<AugmentedExample>, AugmentError> {
    let (examples, _) = apply_epoch_traced(plan, frames, epoch)?;
    Ok(examples)
}

/// As [`apply_epoch`], also reporting the donor source id per example — the
/// instrumentation hook for auditing pool closure.
pub fn apply_epoch_traced(
    plan: &AugmentationPlan,
    frames: &[Frame],
    epoch: u64,
) -> Result<(Vec<AugmentedExample>, Vec<Option<usize>>), AugmentError> {
    let results: Result<Vec<(AugmentedExample, Option<usize>)>, AugmentError> = frames
        .par_iter()
        .enumerate()
        .map(|(id, frame)| augment_one(plan, frame, id, epoch))
        .collect();
    let pairs = results?;
    Ok(pairs.into_iter().unzip())
}

fn augment_one(
    plan: &AugmentationPlan,
    frame: &Frame,
    id: usize,
    epoch: u64,
) -> Result<(AugmentedExample, Option<usize>), AugmentError> {
    let mut rng = derived_rng(plan.seed, &[TAG_EXAMPLE, epoch, id as u64]);
    let params = sample_params(&plan.std_cfg, &mut rng);
    if !plan.is_supervised(id) {
        let (image, _) = standard_augment_with(&frame.image, None, &params);
        return Ok((
            AugmentedExample {
                image,
                label: frame.label,
                is_backmixed: false,
            },
            None,
        ));
    }
    let mask = frame.mask.as_ref().ok_or_else(|| {
        AugmentError::Config(format!("supervised frame {id} lost its mask"))
    })?;
    let (image, aug_mask) = standard_augment_with(&frame.image, Some(mask), &params);
    let aug_mask = aug_mask.expect("mask passed through");
    let own = plan
        .supervised_ids
        .binary_search(&id)
        .expect("supervised id present");
    let mut pick = rng.random_range(0..plan.background_pool.len() - 1);
    if pick >= own {
        pick += 1;
    }
    let donor = &plan.background_pool[pick];
    let mut out = image;
    for ((o, &mi), &bj) in out
        .iter_mut()
        .zip(aug_mask.grid().iter())
        .zip(donor.background.iter())
    {
        if mi == 0 {
            *o = bj;
        }
    }
    Ok((
        AugmentedExample {
            image: out,
            label: frame.label,
            is_backmixed: true,
        },
        Some(donor.source_id),
    ))
}

/// Runs one epoch of a Black/Noise/Shuffle baseline: standard augmentations
/// followed by background replacement on every frame (all masks required).
pub fn apply_epoch_baseline(
    kind: BaselineKind,
    std_cfg: &StandardAugmentConfig,
    frames: &[Frame],
    seed: u64,
    epoch: u64,
) -> Result<Vec<AugmentedExample>, AugmentError> {
    frames
        .par_iter()
        .enumerate()
        .map(|(id, frame)| {
            let mut rng = derived_rng(seed, &[TAG_EXAMPLE, epoch, id as u64]);
            let params = sample_params(std_cfg, &mut rng);
            let mask = frame.mask.as_ref().ok_or_else(|| {
                AugmentError::Config(format!(
                    "frame {id} has no mask; background baselines need masks for every frame"
                ))
            })?;
            let (image, aug_mask) = standard_augment_with(&frame.image, Some(mask), &params);
            let image =
                baseline_background(&image, &aug_mask.expect("mask passed"), kind, &mut rng)?;
            Ok(AugmentedExample {
                image,
                label: frame.label,
                is_backmixed: false,
            })
        })
        .collect()
}

/// The per-epoch augmentation pipeline handed to the trainer.
#[derive(Debug, Clone)]
pub enum Augmenter {
    /// Standard augmentations plus BackMix on the plan's supervised subset.
    /// A plan with f=0 degrades to standard augmentations only.
    Plan(AugmentationPlan),
    /// Standard augmentations plus a background baseline on every frame.
    Baseline {
        kind: BaselineKind,
        std_cfg: StandardAugmentConfig,
        seed: u64,
    },
}

impl Augmenter {
    pub fn epoch(&self, frames: &[Frame], epoch: u64) -> Result<Vec<AugmentedExample>, AugmentError> {
        match self {
            Augmenter::Plan(plan) => apply_epoch(plan, frames, epoch),
            Augmenter::Baseline {
                kind,
                std_cfg,
                seed,
            } => apply_epoch_baseline(*kind, std_cfg, frames, *seed, epoch),
        }
    }

    /// Seed used to derive epoch-level streams (e.g. batch shuffling).
    pub fn seed(&self) -> u64 {
        match self {
            Augmenter::Plan(plan) => plan.seed,
            Augmenter::Baseline { seed, .. } => *seed,
        }
    }
}

/// Splits `0..n` into `k` disjoint supervised subsets of size `round(f*n)`,
/// shuffled by `seed`. Errors when `k * f > 1`.
pub fn disjoint_subsets(
    n: usize,
    f: f64,
    k: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>, AugmentError> {
    let size = (f * n as f64).round() as usize;
    if k * size > n {
        return Err(AugmentError::Config(format!(
            "cannot draw {k} disjoint subsets of {size} from {n} examples"
        )));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    let mut rng = derived_rng(seed, &[TAG_SUBSET, k as u64]);
    for i in (1..ids.len()).rev() {
        let j = rng.random_range(0..=i);
        ids.swap(i, j);
    }
    Ok((0..k)
        .map(|i| {
            let mut subset: Vec<usize> = ids[i * size..(i + 1) * size].to_vec();
            subset.sort_unstable();
            subset
        })
        .collect())
}
