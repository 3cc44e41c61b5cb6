//! GradCAM class-activation maps.
//!
//! Channel weights are the spatially averaged gradients of a class logit with
//! respect to a convolutional feature map; the map is the rectified weighted
//! sum of feature channels, bilinearly upsampled to the input resolution and
//! normalized by its per-image maximum so scores live in [0,1].

use std::path::Path;

use ndarray::{Array2, Array4, Axis};
use thiserror::Error;

use crate::data::Frame;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("class index {class} out of range for {classes} classes")]
    BadClass { class: usize, classes: usize },
    #[error("frame {index}: {source}")]
    Frame {
        index: usize,
        #[source]
        source: Box<AttributionError>,
    },
    #[error("map io failed for {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: image::ImageError,
    },
}

/// Per-pixel importance scores in [0,1]. Unless `degenerate`, the maximum
/// score is exactly 1.
#[derive(Debug, Clone)]
pub struct ActivationMap {
    pub grid: Array2<f32>,
    /// Set when the rectified raw map was identically zero; the grid is then
    /// all zeros and the frame carries no attribution signal.
    pub degenerate: bool,
}

/// A model attribution can interrogate: forward with feature capture at the
/// designated convolutional stage, plus logit-space backprop to that stage.
///
/// One attribution computation at a time per model instance; the forward and
/// backward calls share internal caches.
pub trait CamModel {
    fn num_classes(&self) -> usize;
    /// Inference-statistics forward that caches intermediates; returns the
    /// logits and the target-stage feature maps.
    fn forward_features(&mut self, x: &Array4<f32>) -> (Array2<f32>, Array4<f32>);
    /// Logits as a function of the target-stage features only.
    fn head_forward(&self, features: &Array4<f32>) -> Array2<f32>;
    /// Gradient of `dlogits . logits` with respect to the target-stage
    /// features. Must follow a `forward_features` call.
    fn head_backward(&mut self, dlogits: &Array2<f32>) -> Array4<f32>;
}

/// Bilinear upsampling with half-pixel centers (no corner alignment).
pub(crate) fn upsample_bilinear(src: &Array2<f32>, oh: usize, ow: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    if (h, w) == (oh, ow) {
        return src.clone();
    }
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let dy = (fy - y0 as f64) as f32;
        let dx = (fx - x0 as f64) as f32;
        let top = src[[y0, x0]] * (1.0 - dx) + src[[y0, x1]] * dx;
        let bot = src[[y1, x0]] * (1.0 - dx) + src[[y1, x1]] * dx;
        top * (1.0 - dy) + bot * dy
    })
}

/// GradCAM for a single image and class.
pub fn gradcam<M: CamModel>(
    model: &mut M,
    image: &Array2<f32>,
    target_class: usize,
) -> Result<ActivationMap, AttributionError> {
    if target_class >= model.num_classes() {
        return Err(AttributionError::BadClass {
            class: target_class,
            classes: model.num_classes(),
        });
    }
    let (h, w) = image.dim();
    let mut x = Array4::<f32>::zeros((1, 1, h, w));
    x.index_axis_mut(Axis(0), 0)
        .index_axis_mut(Axis(0), 0)
        .assign(image);
    let (logits, features) = model.forward_features(&x);
    let mut dlogits = Array2::<f32>::zeros(logits.raw_dim());
    dlogits[[0, target_class]] = 1.0;
    let dfeat = model.head_backward(&dlogits);
    Ok(map_from_gradients(&features, &dfeat, h, w))
}

/// Channel weights, weighted sum, rectification, upsample, max-normalize.
fn map_from_gradients(
    features: &Array4<f32>,
    dfeat: &Array4<f32>,
    out_h: usize,
    out_w: usize,
) -> ActivationMap {
    let (_, channels, fh, fw) = features.dim();
    let spatial = (fh * fw) as f32;
    let mut raw = Array2::<f32>::zeros((fh, fw));
    let dfeat0 = dfeat.index_axis(Axis(0), 0);
    let feat0 = features.index_axis(Axis(0), 0);
    for c in 0..channels {
        let grad_lane = dfeat0.index_axis(Axis(0), c);
        let alpha: f32 = grad_lane.iter().sum::<f32>() / spatial;
        let feat_lane = feat0.index_axis(Axis(0), c);
        for (r, &f) in raw.iter_mut().zip(feat_lane.iter()) {
            *r += alpha * f;
        }
    }
    raw.mapv_inplace(|v| v.max(0.0));
    let up = upsample_bilinear(&raw, out_h, out_w);
    let max = up.iter().cloned().fold(0.0f32, f32::max);
    if max == 0.0 {
        ActivationMap {
            grid: Array2::zeros((out_h, out_w)),
            degenerate: true,
        }
    } else {
        ActivationMap {
            grid: up.mapv(|v| v / max),
            degenerate: false,
        }
    }
}

/// GradCAM over a set of frames, attributing either the predicted class or
/// the true label. Order is preserved.
pub fn gradcam_batch<M: CamModel>(
    model: &mut M,
    frames: &[Frame],
    use_predicted_class: bool,
) -> Result<Vec<ActivationMap>, AttributionError> {
    let classes: Vec<usize> = if use_predicted_class {
        predict_classes(model, frames)
    } else {
        frames.iter().map(|f| f.label).collect()
    };
    frames
        .iter()
        .zip(classes)
        .enumerate()
        .map(|(index, (frame, class))| {
            gradcam(model, &frame.image, class).map_err(|source| AttributionError::Frame {
                index,
                source: Box::new(source),
            })
        })
        .collect()
}

fn predict_classes<M: CamModel>(model: &mut M, frames: &[Frame]) -> Vec<usize> {
    let mut out = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(64) {
        let (h, w) = chunk[0].image.dim();
        let mut x = Array4::<f32>::zeros((chunk.len(), 1, h, w));
        for (i, f) in chunk.iter().enumerate() {
            x.index_axis_mut(Axis(0), i)
                .index_axis_mut(Axis(0), 0)
                .assign(&f.image);
        }
        let (logits, _) = model.forward_features(&x);
        for row in logits.rows() {
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap_or(0);
            out.push(best);
        }
    }
    out
}

/// Writes a map as an 8-bit grayscale image.
pub fn write_map(path: &Path, map: &ActivationMap) -> Result<(), AttributionError> {
    let (h, w) = map.grid.dim();
    let raw: Vec<u8> = map
        .grid
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    image::GrayImage::from_raw(w as u32, h as u32, raw)
        .expect("buffer matches dims")
        .save(path)
        .map_err(|source| AttributionError::Io {
            path: path.display().to_string(),
            source,
        })
}

/// Five-point heat colormap from cold (dark blue) to hot (red).
fn heat_color(v: f32) -> [f32; 3] {
    const STOPS: [(f32, [f32; 3]); 5] = [
        (0.00, [0.05, 0.03, 0.35]),
        (0.25, [0.00, 0.45, 0.85]),
        (0.50, [0.10, 0.80, 0.30]),
        (0.75, [0.95, 0.85, 0.10]),
        (1.00, [0.90, 0.10, 0.05]),
    ];
    let v = v.clamp(0.0, 1.0);
    for pair in STOPS.windows(2) {
        let (a, ca) = pair[0];
        let (b, cb) = pair[1];
        if v <= b {
            let t = if b > a { (v - a) / (b - a) } else { 0.0 };
            return [
                ca[0] + (cb[0] - ca[0]) * t,
                ca[1] + (cb[1] - ca[1]) * t,
                ca[2] + (cb[2] - ca[2]) * t,
            ];
        }
    }
    STOPS[4].1
}

/// Writes the map blended over the input image as an RGB file for the
/// qualitative panels.
pub fn write_overlay(
    path: &Path,
    image: &Array2<f32>,
    map: &ActivationMap,
) -> Result<(), AttributionError> {
    let (h, w) = image.dim();
    let alpha = 0.45f32;
    let mut raw = Vec::with_capacity(h * w * 3);
    for (&g, &z) in image.iter().zip(map.grid.iter()) {
        let heat = heat_color(z);
        for channel in heat {
            let v = g * (1.0 - alpha) + channel * alpha;
            raw.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    image::RgbImage::from_raw(w as u32, h as u32, raw)
        .expect("buffer matches dims")
        .save(path)
        .map_err(|source| AttributionError::Io {
            path: path.display().to_string(),
            source,
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Conv2d, Linear, Mode};
    use crate::rng::derived_rng;

    /// Hand-built one-conv toy model: conv -> relu -> gap -> linear.
    pub(crate) struct ToyConvNet {
        pub conv: Conv2d,
        pub fc: Linear,
        feat_hw: (usize, usize),
        features: Option<Array4<f32>>,
    }

    impl ToyConvNet {
        pub fn new(cin: usize, channels: usize, classes: usize, seed: u64) -> Self {
            let mut rng = derived_rng(seed, &[21]);
            Self {
                conv: Conv2d::new("toy.conv", cin, channels, 3, 1, 1, true, &mut rng),
                fc: Linear::new("toy.fc", channels, classes, &mut rng),
                feat_hw: (0, 0),
                features: None,
            }
        }
    }

    impl CamModel for ToyConvNet {
        fn num_classes(&self) -> usize {
            self.fc.bias.value.len()
        }

        fn forward_features(&mut self, x: &Array4<f32>) -> (Array2<f32>, Array4<f32>) {
            let mut f = self.conv.forward_ref(x);
            crate::nn::relu_inplace(&mut f);
            let (_, _, h, w) = f.dim();
            self.feat_hw = (h, w);
            let logits = self.head_forward(&f);
            self.features = Some(f.clone());
            (logits, f)
        }

        fn head_forward(&self, features: &Array4<f32>) -> Array2<f32> {
            let (_, _, h, w) = features.dim();
            let pooled = features.sum_axis(Axis(3)).sum_axis(Axis(2)) / (h * w) as f32;
            self.fc.forward_ref(&pooled)
        }

        fn head_backward(&mut self, dlogits: &Array2<f32>) -> Array4<f32> {
            let dpool = self.fc.backward_input_ref(dlogits);
            let (h, w) = self.feat_hw;
            let (batch, channels) = dpool.dim();
            let mut out = Array4::<f32>::zeros((batch, channels, h, w));
            for b in 0..batch {
                for c in 0..channels {
                    out.index_axis_mut(Axis(0), b)
                        .index_axis_mut(Axis(0), c)
                        .fill(dpool[[b, c]] / (h * w) as f32);
                }
            }
            out
        }
    }

    fn quadrant_toy() -> (ToyConvNet, Array2<f32>) {
        // Single conv channel that fires only where the input is bright;
        // positive head weight on class 0 for that channel.
        let mut toy = ToyConvNet::new(1, 1, 2, 3);
        toy.conv.weight.value.fill(0.0);
        // Center tap of the 3x3 kernel.
        toy.conv.weight.value.as_slice_mut().unwrap()[4] = 1.0;
        toy.conv.bias.as_mut().unwrap().value.fill(0.0);
        toy.fc.weight.value.fill(0.0);
        toy.fc.weight.value.as_slice_mut().unwrap()[0] = 2.0; // class 0 <- channel 0
        toy.fc.bias.value.fill(0.0);
        let mut image = Array2::<f32>::zeros((16, 16));
        for y in 0..8 {
            for x in 0..8 {
                image[[y, x]] = 1.0;
            }
        }
        (toy, image)
    }

    #[test]
    fn toy_model_localizes_top_left_quadrant() {
        let (mut toy, image) = quadrant_toy();
        let map = gradcam(&mut toy, &image, 0).unwrap();
        assert!(!map.degenerate);
        let ((ay, ax), amax) = map
            .grid
            .indexed_iter()
            .fold(((0, 0), f32::MIN), |acc, (idx, &v)| {
                if v > acc.1 {
                    (idx, v)
                } else {
                    acc
                }
            });
        assert_eq!(amax, 1.0);
        assert!(ay < 8 && ax < 8, "argmax ({ay},{ax}) outside top-left quadrant");
        // Activation concentrated in the bright quadrant.
        let inside: f32 = map.grid.slice(ndarray::s![..8, ..8]).sum();
        let total: f32 = map.grid.sum();
        assert!(inside / total > 0.8, "inside fraction {}", inside / total);
    }

    #[test]
    fn zero_head_gives_degenerate_map() {
        let (mut toy, image) = quadrant_toy();
        toy.fc.weight.value.fill(0.0);
        let map = gradcam(&mut toy, &image, 0).unwrap();
        assert!(map.degenerate);
        assert!(map.grid.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_class_errors() {
        let (mut toy, image) = quadrant_toy();
        assert!(matches!(
            gradcam(&mut toy, &image, 5),
            Err(AttributionError::BadClass { class: 5, classes: 2 })
        ));
    }

    #[test]
    fn channel_weights_match_finite_differences() {
        // The head is affine in the features, so central differences on the
        // frozen toy model are exact up to rounding.
        let mut toy = ToyConvNet::new(1, 3, 2, 7);
        let mut rng = derived_rng(8, &[3]);
        let image = Array2::from_shape_fn((12, 12), |_| rand::Rng::random::<f32>(&mut rng));
        let mut x = Array4::<f32>::zeros((1, 1, 12, 12));
        x.index_axis_mut(Axis(0), 0)
            .index_axis_mut(Axis(0), 0)
            .assign(&image);
        let (logits, features) = toy.forward_features(&x);
        let mut dlogits = Array2::<f32>::zeros(logits.raw_dim());
        dlogits[[0, 1]] = 1.0;
        let dfeat = toy.head_backward(&dlogits);

        let (_, channels, fh, fw) = features.dim();
        let spatial = (fh * fw) as f32;
        let h = 0.5f32;
        for c in 0..channels {
            let analytic: f32 = dfeat
                .index_axis(Axis(0), 0)
                .index_axis(Axis(0), c)
                .iter()
                .sum::<f32>()
                / spatial;
            // Finite-difference channel weight: bump every pixel of channel c.
            let mut plus = features.clone();
            plus.index_axis_mut(Axis(0), 0)
                .index_axis_mut(Axis(0), c)
                .mapv_inplace(|v| v + h);
            let mut minus = features.clone();
            minus
                .index_axis_mut(Axis(0), 0)
                .index_axis_mut(Axis(0), c)
                .mapv_inplace(|v| v - h);
            let fd = (toy.head_forward(&plus)[[0, 1]] - toy.head_forward(&minus)[[0, 1]])
                / (2.0 * h * spatial);
            let denom = analytic.abs().max(fd.abs()).max(1e-6);
            assert!(
                ((analytic - fd) / denom).abs() < 1e-3,
                "channel {c}: analytic {analytic} vs fd {fd}"
            );
        }
    }

    #[test]
    fn upsample_preserves_argmax_region() {
        // Holds for maps with a dominant peak, which normalized activation
        // maps have; an interpolated blend of two mid-level cells can only
        // beat the peak's nearest sample when the margin is thin.
        let mut rng = derived_rng(9, &[3]);
        for trial in 0..20u32 {
            let mut src =
                Array2::from_shape_fn((8, 8), |_| rand::Rng::random_range(&mut rng, 0.0f32..0.8));
            let peak = (
                rand::Rng::random_range(&mut rng, 0..8usize),
                rand::Rng::random_range(&mut rng, 0..8usize),
            );
            src[peak] = 1.0;
            let _ = trial;
            let up = upsample_bilinear(&src, 64, 64);
            let (src_max_idx, _) = src
                .indexed_iter()
                .fold(((0, 0), f32::MIN), |acc, (idx, &v)| {
                    if v > acc.1 {
                        (idx, v)
                    } else {
                        acc
                    }
                });
            let (up_max_idx, _) = up
                .indexed_iter()
                .fold(((0, 0), f32::MIN), |acc, (idx, &v)| {
                    if v > acc.1 {
                        (idx, v)
                    } else {
                        acc
                    }
                });
            // Back-project the upsampled argmax: it must sit within one source
            // cell of the source argmax (its bilinear footprint).
            let fy = (up_max_idx.0 as f64 + 0.5) * (8.0 / 64.0) - 0.5;
            let fx = (up_max_idx.1 as f64 + 0.5) * (8.0 / 64.0) - 0.5;
            assert!(
                (fy - src_max_idx.0 as f64).abs() <= 1.0 && (fx - src_max_idx.1 as f64).abs() <= 1.0,
                "upsampled argmax {up_max_idx:?} -> ({fy:.2},{fx:.2}) far from source argmax {src_max_idx:?}"
            );
        }
    }

    #[test]
    fn maps_are_normalized_unless_degenerate() {
        let mut toy = ToyConvNet::new(1, 4, 3, 11);
        let mut rng = derived_rng(10, &[3]);
        for _ in 0..5 {
            let image = Array2::from_shape_fn((16, 16), |_| rand::Rng::random::<f32>(&mut rng));
            let map = gradcam(&mut toy, &image, 1).unwrap();
            assert!(map.grid.iter().all(|&v| (0.0..=1.0).contains(&v)));
            if !map.degenerate {
                let max = map.grid.iter().cloned().fold(0.0f32, f32::max);
                assert_eq!(max, 1.0);
            }
        }
    }
}
