//! Sector/background decomposition and classical sector-mask estimation.
//!
//! An ultrasound-style frame carries image data inside a fan-shaped sector;
//! everything outside is background. Masks are strictly binary: the focus
//! metrics and the compositing augmentations all treat membership as a set.

use std::collections::VecDeque;
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SectorError {
    #[error("shape mismatch: image is {image:?}, mask is {mask:?}")]
    ShapeMismatch {
        image: (usize, usize),
        mask: (usize, usize),
    },
    #[error("no sector found: thresholding left an empty foreground")]
    NoSectorFound,
    #[error("mask file {path} contains non-binary value {value}")]
    NonBinaryValue { path: String, value: u8 },
    #[error("mask io failed for {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

/// Binary per-pixel mask separating sector (1) from background (0).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectorMask {
    grid: Array2<u8>,
}

impl SectorMask {
    /// Wraps a grid, verifying every value is 0 or 1.
    pub fn new(grid: Array2<u8>) -> Result<Self, SectorError> {
        if let Some(&v) = grid.iter().find(|&&v| v > 1) {
            return Err(SectorError::NonBinaryValue {
                path: "<memory>".into(),
                value: v,
            });
        }
        Ok(Self { grid })
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        Self {
            grid: Array2::from_shape_fn((h, w), |(y, x)| u8::from(f(y, x))),
        }
    }

    pub fn grid(&self) -> &Array2<u8> {
        &self.grid
    }

    pub fn dim(&self) -> (usize, usize) {
        self.grid.dim()
    }

    /// Fraction of pixels inside the sector.
    pub fn coverage(&self) -> f64 {
        let ones: usize = self.grid.iter().map(|&v| v as usize).sum();
        ones as f64 / self.grid.len() as f64
    }

    /// Mask as f32 0/1 values, for arithmetic against image grids.
    pub fn to_f32(&self) -> Array2<f32> {
        self.grid.mapv(|v| v as f32)
    }

    pub fn intersection_over_union(&self, other: &SectorMask) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.grid.iter().zip(other.grid.iter()) {
            inter += usize::from(a == 1 && b == 1);
            union += usize::from(a == 1 || b == 1);
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Splits an image into its in-sector part and its zero-in-painted background.
///
/// `sector + background` reconstructs the input exactly: each pixel is copied
/// into exactly one of the two outputs and zeroed in the other.
pub fn decompose(
    image: &Array2<f32>,
    mask: &SectorMask,
) -> Result<(Array2<f32>, Array2<f32>), SectorError> {
    if image.dim() != mask.dim() {
        return Err(SectorError::ShapeMismatch {
            image: image.dim(),
            mask: mask.dim(),
        });
    }
    let mut sector = image.clone();
    let mut background = image.clone();
    for ((s, b), &m) in sector
        .iter_mut()
        .zip(background.iter_mut())
        .zip(mask.grid.iter())
    {
        if m == 1 {
            *b = 0.0;
        } else {
            *s = 0.0;
        }
    }
    Ok((sector, background))
}

/// How the estimator binarizes intensities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    /// Otsu's between-class-variance maximizer over a 256-bin histogram.
    Otsu,
    /// Fixed cutoff in [0,1]; pixels >= cutoff are foreground.
    Fixed(f32),
}

#[derive(Debug, Clone, Copy)]
pub struct EstimatorConfig {
    pub threshold: Threshold,
    /// Closing iterations: n dilations followed by n erosions with a 3x3 kernel.
    pub closing_iters: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            threshold: Threshold::Otsu,
            closing_iters: 2,
        }
    }
}

/// An estimated mask plus a degeneracy flag for all-foreground frames.
#[derive(Debug, Clone)]
pub struct MaskEstimate {
    pub mask: SectorMask,
    /// Set when the threshold stage kept every pixel (e.g. an all-ones image);
    /// the mask is full-coverage and should be treated with suspicion.
    pub degenerate: bool,
}

/// Estimates a sector mask with classical image processing:
/// threshold, 3x3 morphological closing, largest connected component,
/// hole filling. Deterministic; no learned parameters.
pub fn estimate_sector_mask(
    image: &Array2<f32>,
    cfg: &EstimatorConfig,
) -> Result<MaskEstimate, SectorError> {
    let (h, w) = image.dim();
    let cutoff = match cfg.threshold {
        Threshold::Fixed(t) => t,
        Threshold::Otsu => otsu_threshold(image),
    };
    let mut fg = Array2::<u8>::zeros((h, w));
    let mut count = 0usize;
    for (o, &v) in fg.iter_mut().zip(image.iter()) {
        if v >= cutoff {
            *o = 1;
            count += 1;
        }
    }
    if count == 0 {
        return Err(SectorError::NoSectorFound);
    }
    if count == h * w {
        return Ok(MaskEstimate {
            mask: SectorMask { grid: fg },
            degenerate: true,
        });
    }
    for _ in 0..cfg.closing_iters {
        fg = dilate3(&fg);
    }
    for _ in 0..cfg.closing_iters {
        fg = erode3(&fg);
    }
    let fg = largest_component(&fg).ok_or(SectorError::NoSectorFound)?;
    let fg = fill_holes(&fg);
    Ok(MaskEstimate {
        mask: SectorMask { grid: fg },
        degenerate: false,
    })
}

/// Otsu threshold over a 256-bin histogram of clamped intensities,
/// returned in [0,1]. The returned cutoff is the lower edge of the first
/// foreground bin, so comparisons use `>=`.
fn otsu_threshold(image: &Array2<f32>) -> f32 {
    let mut hist = [0usize; 256];
    for &v in image.iter() {
        let bin = (v.clamp(0.0, 1.0) * 255.0).round() as usize;
        hist[bin.min(255)] += 1;
    }
    let total = image.len() as f64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let mut sum_b = 0.0;
    let mut weight_b = 0.0;
    let mut best = (0.0f64, 0usize);
    for (i, &c) in hist.iter().enumerate() {
        weight_b += c as f64;
        if weight_b == 0.0 {
            continue;
        }
        let weight_f = total - weight_b;
        if weight_f == 0.0 {
            break;
        }
        sum_b += i as f64 * c as f64;
        let mean_b = sum_b / weight_b;
        let mean_f = (sum_all - sum_b) / weight_f;
        let var = weight_b * weight_f * (mean_b - mean_f) * (mean_b - mean_f);
        if var > best.0 {
            best = (var, i);
        }
    }
    // Threshold bin t separates background bins <= t from foreground bins > t.
    (best.1 as f32 + 1.0) / 255.0
}

fn dilate3(grid: &Array2<u8>) -> Array2<u8> {
    let (h, w) = grid.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny >= 0 && nx >= 0 && ny < h as i64 && nx < w as i64 {
                    if grid[[ny as usize, nx as usize]] == 1 {
                        return 1;
                    }
                }
            }
        }
        0
    })
}

fn erode3(grid: &Array2<u8>) -> Array2<u8> {
    let (h, w) = grid.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny >= 0 && nx >= 0 && ny < h as i64 && nx < w as i64 {
                    if grid[[ny as usize, nx as usize]] == 0 {
                        return 0;
                    }
                } else {
                    // Outside the frame counts as background, so erosion
                    // shrinks components that touch the border.
                    return 0;
                }
            }
        }
        1
    })
}

/// Keeps only the largest 4-connected foreground component.
fn largest_component(grid: &Array2<u8>) -> Option<Array2<u8>> {
    let (h, w) = grid.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut best: Option<(u32, usize)> = None;
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if grid[[y, x]] == 1 && labels[[y, x]] == 0 {
                next += 1;
                let label = next;
                let mut size = 0usize;
                labels[[y, x]] = label;
                queue.push_back((y, x));
                while let Some((cy, cx)) = queue.pop_front() {
                    size += 1;
                    for (ny, nx) in neighbors4(cy, cx, h, w) {
                        if grid[[ny, nx]] == 1 && labels[[ny, nx]] == 0 {
                            labels[[ny, nx]] = label;
                            queue.push_back((ny, nx));
                        }
                    }
                }
                if best.map_or(true, |(_, s)| size > s) {
                    best = Some((label, size));
                }
            }
        }
    }
    let (keep, _) = best?;
    Some(labels.mapv(|l| u8::from(l == keep)))
}

/// Sets every background pixel unreachable from the border to foreground.
fn fill_holes(grid: &Array2<u8>) -> Array2<u8> {
    let (h, w) = grid.dim();
    let mut outside = Array2::<u8>::zeros((h, w));
    let mut queue = VecDeque::new();
    let push = |y: usize, x: usize, outside: &mut Array2<u8>, queue: &mut VecDeque<_>| {
        if grid[[y, x]] == 0 && outside[[y, x]] == 0 {
            outside[[y, x]] = 1;
            queue.push_back((y, x));
        }
    };
    for x in 0..w {
        push(0, x, &mut outside, &mut queue);
        push(h - 1, x, &mut outside, &mut queue);
    }
    for y in 0..h {
        push(y, 0, &mut outside, &mut queue);
        push(y, w - 1, &mut outside, &mut queue);
    }
    while let Some((cy, cx)) = queue.pop_front() {
        for (ny, nx) in neighbors4(cy, cx, h, w) {
            if grid[[ny, nx]] == 0 && outside[[ny, nx]] == 0 {
                outside[[ny, nx]] = 1;
                queue.push_back((ny, nx));
            }
        }
    }
    Array2::from_shape_fn((h, w), |(y, x)| {
        if grid[[y, x]] == 1 || outside[[y, x]] == 0 {
            1
        } else {
            0
        }
    })
}

fn neighbors4(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let mut out = [(0usize, 0usize); 4];
    let mut n = 0;
    if y > 0 {
        out[n] = (y - 1, x);
        n += 1;
    }
    if y + 1 < h {
        out[n] = (y + 1, x);
        n += 1;
    }
    if x > 0 {
        out[n] = (y, x - 1);
        n += 1;
    }
    if x + 1 < w {
        out[n] = (y, x + 1);
        n += 1;
    }
    out.into_iter().take(n)
}

/// Reads a mask file; pixels must be exactly 0 (background) or 255 (sector).
pub fn read_mask(path: &Path) -> Result<SectorMask, SectorError> {
    let img = image::open(path)
        .map_err(|source| SectorError::Io {
            path: path.display().to_string(),
            source,
        })?
        .into_luma8();
    let (w, h) = img.dimensions();
    let mut grid = Array2::<u8>::zeros((h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        grid[[y as usize, x as usize]] = match p.0[0] {
            0 => 0,
            255 => 1,
            v => {
                return Err(SectorError::NonBinaryValue {
                    path: path.display().to_string(),
                    value: v,
                })
            }
        };
    }
    Ok(SectorMask { grid })
}

/// Writes a mask as an 8-bit grayscale file with 0=background, 255=sector.
pub fn write_mask(path: &Path, mask: &SectorMask) -> Result<(), SectorError> {
    let (h, w) = mask.dim();
    let raw: Vec<u8> = mask.grid.iter().map(|&v| v * 255).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, raw)
        .expect("buffer length matches dimensions");
    img.save(path).map_err(|source| SectorError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn fan_mask(h: usize, w: usize) -> SectorMask {
        // Downward fan: apex near top-center, half-angle ~33 degrees.
        let (ay, ax) = (3.0, w as f64 / 2.0);
        let radius = 0.88 * h as f64;
        SectorMask::from_fn(h, w, |y, x| {
            let dy = y as f64 - ay;
            let dx = x as f64 - ax;
            let dist = (dy * dy + dx * dx).sqrt();
            dy > 0.0 && dist <= radius && (dx / dy).abs() <= 33f64.to_radians().tan()
        })
    }

    #[test]
    fn decompose_full_mask_is_identity() {
        let image = array![[0.2f32, 0.4], [0.6, 0.8]];
        let mask = SectorMask::from_fn(2, 2, |_, _| true);
        let (s, b) = decompose(&image, &mask).unwrap();
        assert_eq!(s, image);
        assert!(b.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decompose_hand_example() {
        let image = array![[0.2f32, 0.4], [0.6, 0.8]];
        let mask = SectorMask::new(array![[1u8, 0], [0, 1]]).unwrap();
        let (s, b) = decompose(&image, &mask).unwrap();
        assert_eq!(s, array![[0.2f32, 0.0], [0.0, 0.8]]);
        assert_eq!(b, array![[0.0f32, 0.4], [0.6, 0.0]]);
    }

    #[test]
    fn decompose_shape_mismatch_errors() {
        let image = Array2::<f32>::zeros((2, 3));
        let mask = SectorMask::from_fn(2, 2, |_, _| true);
        assert!(matches!(
            decompose(&image, &mask),
            Err(SectorError::ShapeMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn decompose_partitions_exactly(values in proptest::collection::vec(0f32..=1.0, 36),
                                        bits in proptest::collection::vec(0u8..=1, 36)) {
            let image = Array2::from_shape_vec((6, 6), values).unwrap();
            let mask = SectorMask::new(Array2::from_shape_vec((6, 6), bits).unwrap()).unwrap();
            let (s, b) = decompose(&image, &mask).unwrap();
            for ((&sv, &bv), &iv) in s.iter().zip(b.iter()).zip(image.iter()) {
                prop_assert_eq!(sv + bv, iv);
                prop_assert!(sv == 0.0 || bv == 0.0);
            }
        }
    }

    #[test]
    fn estimator_recovers_synthetic_fan() {
        let truth = fan_mask(64, 64);
        // Speckle inside, black outside, plus two bright glyph-like blobs in
        // the background that the largest-component stage must discard.
        let mut rng = crate::rng::derived_rng(5, &[0]);
        let mut image = Array2::<f32>::zeros((64, 64));
        for ((y, x), v) in image.indexed_iter_mut() {
            if truth.grid()[[y, x]] == 1 {
                *v = 0.3 + 0.5 * rand::Rng::random::<f32>(&mut rng);
            }
        }
        for (gy, gx) in [(2usize, 2usize), (50, 55)] {
            for dy in 0..6 {
                for dx in 0..6 {
                    image[[gy + dy, gx + dx]] = 0.95;
                }
            }
        }
        let est = estimate_sector_mask(&image, &EstimatorConfig::default()).unwrap();
        assert!(!est.degenerate);
        let iou = est.mask.intersection_over_union(&truth);
        assert!(iou >= 0.95, "IoU {iou} below 0.95");
    }

    #[test]
    fn estimator_is_idempotent_on_masked_image() {
        let truth = fan_mask(64, 64);
        let mut rng = crate::rng::derived_rng(6, &[0]);
        let mut image = Array2::<f32>::zeros((64, 64));
        for ((y, x), v) in image.indexed_iter_mut() {
            if truth.grid()[[y, x]] == 1 {
                *v = 0.3 + 0.5 * rand::Rng::random::<f32>(&mut rng);
            }
        }
        let first = estimate_sector_mask(&image, &EstimatorConfig::default())
            .unwrap()
            .mask;
        let masked = &image * &first.to_f32();
        let second = estimate_sector_mask(&masked, &EstimatorConfig::default())
            .unwrap()
            .mask;
        let iou = second.intersection_over_union(&first);
        assert!(iou >= 0.99, "re-estimate IoU {iou} below 0.99");
    }

    #[test]
    fn estimator_rejects_all_zero_image() {
        let image = Array2::<f32>::zeros((16, 16));
        assert!(matches!(
            estimate_sector_mask(&image, &EstimatorConfig::default()),
            Err(SectorError::NoSectorFound)
        ));
    }

    #[test]
    fn estimator_flags_all_ones_image_as_degenerate() {
        let image = Array2::<f32>::ones((16, 16));
        let est = estimate_sector_mask(&image, &EstimatorConfig::default()).unwrap();
        assert!(est.degenerate);
        assert_eq!(est.mask.coverage(), 1.0);
    }

    #[test]
    fn mask_roundtrip_and_format_checks() {
        let dir = tempfile::tempdir().unwrap();
        let mask = fan_mask(112, 112);
        let path = dir.path().join("mask.png");
        write_mask(&path, &mask).unwrap();
        let back = read_mask(&path).unwrap();
        assert_eq!(back, mask);
        assert_eq!(back.dim(), (112, 112));

        let bad = image::GrayImage::from_pixel(4, 4, image::Luma([128u8]));
        let bad_path = dir.path().join("bad.png");
        bad.save(&bad_path).unwrap();
        assert!(matches!(
            read_mask(&bad_path),
            Err(SectorError::NonBinaryValue { value: 128, .. })
        ));
    }
}
