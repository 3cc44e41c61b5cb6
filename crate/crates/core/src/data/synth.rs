//! Synthetic sectored-image dataset with a planted background shortcut.
//!
//! Every frame is a fan-shaped speckle sector containing a class-discriminative
//! arrangement of dark chambers, set against a black background carrying one
//! bright metadata-style glyph. With correlation `rho` the glyph identity
//! matches the class, so a lazy classifier can read the label off the
//! background; decorrelated draws come from a reserve part of the glyph
//! alphabet that is never tied to any class. Out-of-distribution frames are
//! always decorrelated and use a distinct glyph style and placement.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::glyphs::{self, RESERVE_GLYPHS};
use super::{split_by_patient, DataError, DatasetManifest, Domain, Frame, ManifestRecord};
use crate::rng::{derive_seed, derived_rng, Rng};
use crate::sector::{self, SectorMask};

const TAG_PATIENT: u64 = 0x50415449;
const TAG_FRAME: u64 = 0x4652414d;

// Per-frame jitter applied on top of each patient's base geometry.
const JITTER_APEX_PX: f64 = 1.0;
const JITTER_RADIUS_FRAC: f64 = 0.02;
const JITTER_ANGLE_DEG: f64 = 1.5;

/// Sampling ranges for the fan geometry, in fractions of the image size
/// (angles in degrees). One geometry is drawn per patient.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GeometryRanges {
    pub apex_y: (f64, f64),
    pub apex_x: (f64, f64),
    pub half_angle_deg: (f64, f64),
    pub radius_frac: (f64, f64),
}

impl Default for GeometryRanges {
    fn default() -> Self {
        Self {
            apex_y: (0.03, 0.08),
            apex_x: (0.46, 0.54),
            half_angle_deg: (24.0, 30.0),
            radius_frac: (0.70, 0.80),
        }
    }
}

/// Speckle texture and pattern-contrast parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TextureParams {
    /// Speckle intensity range after smoothing.
    pub speckle_lo: f32,
    pub speckle_hi: f32,
    /// 3x3 box-blur passes applied to the raw noise field.
    pub smoothing_passes: usize,
    /// Multiplicative darkening of the class pattern (chamber) pixels.
    pub pattern_gain: f32,
    /// Glyph ink intensity for in-distribution frames.
    pub glyph_intensity: f32,
    /// Glyph ink intensity for out-of-distribution frames.
    pub glyph_intensity_ood: f32,
}

impl Default for TextureParams {
    fn default() -> Self {
        Self {
            speckle_lo: 0.20,
            speckle_hi: 0.80,
            smoothing_passes: 1,
            pattern_gain: 0.30,
            glyph_intensity: 0.95,
            glyph_intensity_ood: 0.70,
        }
    }
}

/// Full description of a synthetic dataset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticSpec {
    pub resolution: usize,
    pub num_classes: usize,
    pub frames_per_patient: usize,
    /// In-distribution patients, split by `split_ratios`.
    pub num_patients: usize,
    /// Out-of-distribution patients; all of them land in the o.o.d test split.
    pub num_patients_ood: usize,
    /// Probability that an in-distribution frame's glyph matches its class.
    pub shortcut_rho: f64,
    pub split_ratios: [f64; 3],
    pub geometry: GeometryRanges,
    pub texture: TextureParams,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            resolution: 64,
            num_classes: 4,
            frames_per_patient: 8,
            num_patients: 300,
            num_patients_ood: 50,
            shortcut_rho: 1.0,
            split_ratios: [0.8, 0.1, 0.1],
            geometry: GeometryRanges::default(),
            texture: TextureParams::default(),
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let cfg = |msg: String| Err(DataError::Config(msg));
        if self.num_classes < 2 || self.num_classes > glyphs::MAX_CLASSES {
            return cfg(format!(
                "num_classes must be in 2..={}, got {}",
                glyphs::MAX_CLASSES,
                self.num_classes
            ));
        }
        if !(0.0..=1.0).contains(&self.shortcut_rho) {
            return cfg(format!("shortcut_rho must be in [0,1], got {}", self.shortcut_rho));
        }
        if self.resolution < 32 {
            return cfg(format!("resolution must be >= 32, got {}", self.resolution));
        }
        if self.frames_per_patient == 0 || self.num_patients == 0 {
            return cfg("need at least one patient and one frame per patient".into());
        }
        let g = &self.geometry;
        for (name, (lo, hi)) in [
            ("apex_y", g.apex_y),
            ("apex_x", g.apex_x),
            ("half_angle_deg", g.half_angle_deg),
            ("radius_frac", g.radius_frac),
        ] {
            if lo > hi || lo < 0.0 {
                return cfg(format!("geometry range {name} is invalid: ({lo}, {hi})"));
            }
        }
        // Worst-case extents, with per-frame jitter folded in, must stay
        // strictly inside the image.
        let h = self.resolution as f64;
        let apex_y_max = g.apex_y.1 * h + JITTER_APEX_PX;
        let radius_max = (g.radius_frac.1 + JITTER_RADIUS_FRAC) * h;
        let angle_max = (g.half_angle_deg.1 + JITTER_ANGLE_DEG).to_radians();
        if apex_y_max + radius_max > h - 1.0 {
            return cfg(format!(
                "sector cannot fit vertically: apex_y + radius reaches {:.1} of {:.0} rows",
                apex_y_max + radius_max,
                h
            ));
        }
        let lateral = radius_max * angle_max.sin();
        let room_left = g.apex_x.0 * h - JITTER_APEX_PX - 1.0;
        let room_right = (1.0 - g.apex_x.1) * h - JITTER_APEX_PX - 1.0;
        if lateral > room_left || lateral > room_right {
            return cfg(format!(
                "sector cannot fit horizontally: lateral reach {lateral:.1}px exceeds margin {:.1}px",
                room_left.min(room_right)
            ));
        }
        if g.apex_y.0 * h - JITTER_APEX_PX < 0.0 {
            return cfg("apex_y range puts the fan apex above the frame".into());
        }
        Ok(())
    }
}

/// Concrete fan geometry of one frame, in pixel units.
#[derive(Debug, Clone, Copy)]
struct FanGeometry {
    apex_y: f64,
    apex_x: f64,
    half_angle: f64,
    radius: f64,
}

impl FanGeometry {
    fn contains(&self, y: usize, x: usize) -> bool {
        let dy = y as f64 - self.apex_y;
        let dx = x as f64 - self.apex_x;
        if dy < 0.0 {
            return false;
        }
        if dy * dy + dx * dx > self.radius * self.radius {
            return false;
        }
        dx.abs().atan2(dy) <= self.half_angle
    }

    /// True when the pixel and a ring of probes `margin` pixels away are all
    /// inside the sector; keeps drawn content clear of the boundary.
    fn contains_with_margin(&self, y: usize, x: usize, margin: f64) -> bool {
        if !self.contains(y, x) {
            return false;
        }
        let m = margin;
        let d = (margin * 0.7071).round();
        for (py, px) in [
            (y as f64 - m, x as f64),
            (y as f64 + m, x as f64),
            (y as f64, x as f64 - m),
            (y as f64, x as f64 + m),
            (y as f64 - d, x as f64 - d),
            (y as f64 - d, x as f64 + d),
            (y as f64 + d, x as f64 - d),
            (y as f64 + d, x as f64 + d),
        ] {
            if py < 0.0 || px < 0.0 {
                return false;
            }
            if !self.contains(py.round() as usize, px.round() as usize) {
                return false;
            }
        }
        true
    }

    fn mask(&self, resolution: usize) -> SectorMask {
        SectorMask::from_fn(resolution, resolution, |y, x| self.contains(y, x))
    }
}

fn sample_range(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn patient_geometry(spec: &SyntheticSpec, domain: Domain, patient: usize) -> FanGeometry {
    let tag = match domain {
        Domain::InDist => 0,
        Domain::OutDist => 1,
    };
    let mut rng = derived_rng(spec.seed, &[TAG_PATIENT, tag, patient as u64]);
    let h = spec.resolution as f64;
    FanGeometry {
        apex_y: sample_range(&mut rng, spec.geometry.apex_y) * h,
        apex_x: sample_range(&mut rng, spec.geometry.apex_x) * h,
        half_angle: sample_range(&mut rng, spec.geometry.half_angle_deg).to_radians(),
        radius: sample_range(&mut rng, spec.geometry.radius_frac) * h,
    }
}

/// 3x3 box blur with clamped borders.
fn box_blur(field: &Array2<f32>) -> Array2<f32> {
    let (h, w) = field.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut sum = 0.0f32;
        let mut count = 0.0f32;
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let ny = y as i64 + dy;
                let nx = x as i64 + dx;
                if ny >= 0 && nx >= 0 && ny < h as i64 && nx < w as i64 {
                    sum += field[[ny as usize, nx as usize]];
                    count += 1.0;
                }
            }
        }
        sum / count
    })
}

/// Is local point (lx, ly) inside the class-`c` chamber arrangement scaled by `u`?
fn pattern_contains(class: usize, lx: f64, ly: f64, u: f64) -> bool {
    let circle = |cx: f64, cy: f64, r: f64| {
        let dx = lx - cx * u;
        let dy = ly - cy * u;
        dx * dx + dy * dy <= (r * u) * (r * u)
    };
    match class {
        0 => {
            let ex = lx / (1.35 * u);
            let ey = ly / (0.80 * u);
            ex * ex + ey * ey <= 1.0
        }
        1 => circle(-0.85, 0.0, 0.60) || circle(0.85, 0.0, 0.60),
        2 => {
            let d = (lx * lx + ly * ly).sqrt();
            d >= 0.55 * u && d <= 1.05 * u
        }
        3 => {
            circle(-0.80, -0.80, 0.48)
                || circle(0.80, -0.80, 0.48)
                || circle(-0.80, 0.80, 0.48)
                || circle(0.80, 0.80, 0.48)
        }
        4 => lx.abs() <= 1.30 * u && ly.abs() <= 0.42 * u,
        5 => lx.abs() <= 0.42 * u && ly.abs() <= 1.30 * u,
        6 => lx.abs() + ly.abs() <= 1.05 * u,
        _ => {
            let a = (lx - ly).abs() <= 0.40 * u;
            let b = (lx + ly).abs() <= 0.40 * u;
            (a || b) && lx.abs().max(ly.abs()) <= 1.20 * u
        }
    }
}

struct GlyphStyle {
    scale: usize,
    intensity: f32,
}

/// Finds a background position for the glyph such that no ink pixel touches
/// the sector. Tries random positions in the domain-specific band first, then
/// falls back to a deterministic raster scan.
fn place_glyph(
    rng: &mut Rng,
    geometry: &FanGeometry,
    glyph: &Array2<u8>,
    resolution: usize,
    domain: Domain,
) -> (usize, usize) {
    let (gh, gw) = glyph.dim();
    // A 5px clearance around the glyph box keeps two rounds of morphological
    // closing from bridging glyph ink into the sector component.
    let clearance = 5usize;
    let fits = |y0: usize, x0: usize| {
        let lo_y = y0.saturating_sub(clearance);
        let lo_x = x0.saturating_sub(clearance);
        for y in lo_y..(y0 + gh + clearance).min(resolution) {
            for x in lo_x..(x0 + gw + clearance).min(resolution) {
                if geometry.contains(y, x) {
                    return false;
                }
            }
        }
        true
    };
    let h = resolution;
    let w = resolution;
    for _ in 0..200 {
        let (y0, x0) = match domain {
            Domain::InDist => {
                // Top corners, mirroring vendor overlays.
                let y0 = rng.random_range(1..=(h / 12).max(2));
                let left = rng.random_range(0..2u8) == 0;
                let x0 = if left {
                    rng.random_range(1..=(w / 8).max(2))
                } else {
                    rng.random_range((w - w / 8 - gw).max(1)..=(w - gw - 1))
                };
                (y0, x0)
            }
            Domain::OutDist => {
                // Anywhere in the lower two thirds.
                let y0 = rng.random_range(h / 3..=(h - gh - 1));
                let x0 = rng.random_range(1..=(w - gw - 1));
                (y0, x0)
            }
        };
        if y0 + gh < h && x0 + gw < w && fits(y0, x0) {
            return (y0, x0);
        }
    }
    for y0 in 0..h - gh {
        for x0 in 0..w - gw {
            if fits(y0, x0) {
                return (y0, x0);
            }
        }
    }
    // A valid spec guarantees background corners; keep the degenerate case loud.
    panic!("no background position for glyph; sector covers the whole frame");
}

fn synthesize_frame(
    spec: &SyntheticSpec,
    domain: Domain,
    patient: usize,
    frame_idx: usize,
) -> (Frame, usize) {
    let res = spec.resolution;
    let tag = match domain {
        Domain::InDist => 0,
        Domain::OutDist => 1,
    };
    let mut rng = derived_rng(
        spec.seed,
        &[TAG_FRAME, tag, patient as u64, frame_idx as u64],
    );
    let base = patient_geometry(spec, domain, patient);
    let geometry = FanGeometry {
        apex_y: base.apex_y + rng.random_range(-JITTER_APEX_PX..=JITTER_APEX_PX),
        apex_x: base.apex_x + rng.random_range(-JITTER_APEX_PX..=JITTER_APEX_PX),
        half_angle: base.half_angle
            + rng
                .random_range(-JITTER_ANGLE_DEG..=JITTER_ANGLE_DEG)
                .to_radians(),
        radius: base.radius * (1.0 + rng.random_range(-JITTER_RADIUS_FRAC..=JITTER_RADIUS_FRAC)),
    };
    let mask = geometry.mask(res);
    let class = (patient + frame_idx) % spec.num_classes;

    // Speckle texture.
    let mut noise = Array2::from_shape_fn((res, res), |_| rng.random::<f32>());
    for _ in 0..spec.texture.smoothing_passes {
        noise = box_blur(&noise);
    }
    let lo = spec.texture.speckle_lo;
    let hi = spec.texture.speckle_hi;

    // Class pattern pose.
    let center_y = geometry.apex_y + 0.62 * geometry.radius + rng.random_range(-3.0..=3.0);
    let center_x = geometry.apex_x + rng.random_range(-3.0..=3.0);
    let rot = rng.random_range(-20f64..=20.0).to_radians();
    let u = 0.16 * geometry.radius * rng.random_range(0.85..=1.15);
    let (sin_r, cos_r) = rot.sin_cos();

    let mut image = Array2::<f32>::zeros((res, res));
    for ((y, x), v) in image.indexed_iter_mut() {
        if mask.grid()[[y, x]] == 1 {
            let mut t = lo + noise[[y, x]] * (hi - lo);
            let dy = y as f64 - center_y;
            let dx = x as f64 - center_x;
            let lx = dx * cos_r + dy * sin_r;
            let ly = -dx * sin_r + dy * cos_r;
            // Chambers stay clear of the sector boundary so dark pixels never
            // open notches into the background.
            if pattern_contains(class, lx, ly, u) && geometry.contains_with_margin(y, x, 3.0) {
                t *= spec.texture.pattern_gain;
            }
            *v = t;
        }
    }

    // Background glyph.
    let matches_class = domain == Domain::InDist && rng.random::<f64>() < spec.shortcut_rho;
    let glyph_id = if matches_class {
        class
    } else {
        spec.num_classes + rng.random_range(0..RESERVE_GLYPHS)
    };
    let style = match domain {
        Domain::InDist => GlyphStyle {
            scale: 2,
            intensity: spec.texture.glyph_intensity,
        },
        Domain::OutDist => GlyphStyle {
            scale: 2,
            intensity: spec.texture.glyph_intensity_ood,
        },
    };
    let bitmap = glyphs::render_glyph(glyph_id, style.scale);
    let (y0, x0) = place_glyph(&mut rng, &geometry, &bitmap, res, domain);
    for ((gy, gx), &v) in bitmap.indexed_iter() {
        if v == 1 {
            image[[y0 + gy, x0 + gx]] = style.intensity;
        }
    }

    // Quantize so that a save/load round-trip is pixel-identical.
    image.mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);

    let patient_id = match domain {
        Domain::InDist => format!("p{patient:04}"),
        Domain::OutDist => format!("o{patient:04}"),
    };
    (
        Frame {
            image,
            label: class,
            patient_id,
            domain,
            mask: Some(mask),
        },
        glyph_id,
    )
}

/// A dataset synthesized in memory: the manifest plus the frames for each
/// split, aligned with the manifest record order.
pub struct GeneratedDataset {
    pub manifest: DatasetManifest,
    pub train: Vec<Frame>,
    pub val: Vec<Frame>,
    pub test: Vec<Frame>,
    pub test_ood: Vec<Frame>,
}

/// Synthesizes all frames and assigns splits, without touching the filesystem.
pub fn synthesize_dataset(spec: &SyntheticSpec) -> Result<GeneratedDataset, DataError> {
    spec.validate()?;
    let mut jobs: Vec<(Domain, usize, usize)> = Vec::new();
    for p in 0..spec.num_patients {
        for k in 0..spec.frames_per_patient {
            jobs.push((Domain::InDist, p, k));
        }
    }
    for p in 0..spec.num_patients_ood {
        for k in 0..spec.frames_per_patient {
            jobs.push((Domain::OutDist, p, k));
        }
    }
    let frames: Vec<(ManifestRecord, Frame)> = jobs
        .par_iter()
        .map(|&(domain, p, k)| {
            let (frame, glyph_id) = synthesize_frame(spec, domain, p, k);
            let record = ManifestRecord {
                path: format!("images/{}_f{k}.png", frame.patient_id),
                label: frame.label,
                patient_id: frame.patient_id.clone(),
                domain,
                mask_path: Some(format!("masks/{}_f{k}.png", frame.patient_id)),
                glyph_id: Some(glyph_id),
            };
            (record, frame)
        })
        .collect();

    let (id_pairs, ood_pairs): (Vec<_>, Vec<_>) = frames
        .into_iter()
        .partition(|(r, _)| r.domain == Domain::InDist);

    let id_records: Vec<ManifestRecord> = id_pairs.iter().map(|(r, _)| r.clone()).collect();
    let split_seed = derive_seed(spec.seed, &[0x53504c49]);
    let mut manifest = split_by_patient(id_records, spec.split_ratios, split_seed)?;
    manifest.test_ood = ood_pairs.iter().map(|(r, _)| r.clone()).collect();

    let lookup: std::collections::HashMap<String, Frame> = id_pairs
        .into_iter()
        .map(|(r, f)| (r.path, f))
        .collect();
    let collect = |records: &[ManifestRecord]| -> Vec<Frame> {
        records
            .iter()
            .map(|r| lookup.get(&r.path).expect("frame synthesized").clone())
            .collect()
    };
    let train = collect(&manifest.train);
    let val = collect(&manifest.val);
    let test = collect(&manifest.test);
    let test_ood: Vec<Frame> = ood_pairs.into_iter().map(|(_, f)| f).collect();

    Ok(GeneratedDataset {
        manifest,
        train,
        val,
        test,
        test_ood,
    })
}

/// Synthesizes the dataset and writes images, masks and manifests to `out_dir`.
pub fn generate_synthetic_dataset(
    spec: &SyntheticSpec,
    out_dir: &Path,
) -> Result<DatasetManifest, DataError> {
    let generated = synthesize_dataset(spec)?;
    write_dataset(&generated, spec, out_dir)?;
    Ok(generated.manifest)
}

fn write_dataset(
    generated: &GeneratedDataset,
    spec: &SyntheticSpec,
    out_dir: &Path,
) -> Result<(), DataError> {
    let io_err = |path: &Path, source: std::io::Error| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    for sub in ["images", "masks"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    }
    let splits: [(&[ManifestRecord], &[Frame]); 4] = [
        (&generated.manifest.train, &generated.train),
        (&generated.manifest.val, &generated.val),
        (&generated.manifest.test, &generated.test),
        (&generated.manifest.test_ood, &generated.test_ood),
    ];
    for (records, frames) in splits {
        records
            .par_iter()
            .zip(frames.par_iter())
            .try_for_each(|(record, frame)| -> Result<(), DataError> {
                let img_path = out_dir.join(&record.path);
                let raw: Vec<u8> = frame
                    .image
                    .iter()
                    .map(|&v| (v * 255.0).round() as u8)
                    .collect();
                let (h, w) = frame.image.dim();
                image::GrayImage::from_raw(w as u32, h as u32, raw)
                    .expect("buffer matches dims")
                    .save(&img_path)
                    .map_err(|e| DataError::CorruptImage {
                        path: img_path.clone(),
                        reason: e.to_string(),
                    })?;
                if let (Some(mask_rel), Some(mask)) = (&record.mask_path, &frame.mask) {
                    sector::write_mask(&out_dir.join(mask_rel), mask)?;
                }
                Ok(())
            })?;
    }
    generated.manifest.save(out_dir)?;
    let spec_path = out_dir.join("spec.json");
    let text = serde_json::to_string_pretty(spec).expect("spec serializes");
    fs::write(&spec_path, text).map_err(|e| io_err(&spec_path, e))?;
    Ok(())
}

/// Loads the dataset in `dir` if it was generated from `spec`, otherwise
/// (re)generates it. Returns the manifest either way.
pub fn ensure_dataset(spec: &SyntheticSpec, dir: &Path) -> Result<DatasetManifest, DataError> {
    let spec_path = dir.join("spec.json");
    if spec_path.exists() {
        let text = fs::read_to_string(&spec_path).map_err(|e| DataError::Io {
            path: spec_path.clone(),
            source: e,
        })?;
        if let Ok(existing) = serde_json::from_str::<SyntheticSpec>(&text) {
            if existing == *spec {
                return DatasetManifest::load(dir);
            }
        }
    }
    generate_synthetic_dataset(spec, dir)
}
