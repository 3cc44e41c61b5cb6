//! Batch normalization over (batch, H, W) per channel.
//!
//! Reductions run per channel over contiguous per-example planes (parallel
//! across channels), application runs parallel across examples; both give a
//! fixed arithmetic order independent of thread scheduling.

use ndarray::{Array1, Array4, Axis};
use rayon::prelude::*;

use super::{Mode, Param};

const EPS: f32 = 1e-5;
const MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
    channels: usize,
    cache: Option<Cache>,
}

#[derive(Debug, Clone)]
struct Cache {
    x: Array4<f32>,
    mean: Array1<f32>,
    inv_std: Array1<f32>,
    /// Whether normalization used batch statistics (training) or running ones.
    batch_stats: bool,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), Array1::ones(channels).into_dyn()),
            beta: Param::new(format!("{name}.beta"), Array1::zeros(channels).into_dyn()),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            channels,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f32>, mode: Mode) -> Array4<f32> {
        let (batch, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "{}: channels", self.gamma.name);
        let hw = h * w;
        let m = (batch * hw) as f32;
        let xs = x.as_slice().expect("contiguous");

        let (mean, inv_std) = if mode.batch_stats() {
            let stats: Vec<(f32, f32)> = (0..c)
                .into_par_iter()
                .map(|ci| {
                    let mut sum = 0.0f32;
                    for b in 0..batch {
                        let plane = &xs[(b * c + ci) * hw..(b * c + ci + 1) * hw];
                        let mut s = 0.0f32;
                        for &v in plane {
                            s += v;
                        }
                        sum += s;
                    }
                    let mu = sum / m;
                    let mut var_sum = 0.0f32;
                    for b in 0..batch {
                        let plane = &xs[(b * c + ci) * hw..(b * c + ci + 1) * hw];
                        let mut s = 0.0f32;
                        for &v in plane {
                            let d = v - mu;
                            s += d * d;
                        }
                        var_sum += s;
                    }
                    (mu, var_sum / m)
                })
                .collect();
            let mean = Array1::from_iter(stats.iter().map(|s| s.0));
            let var = Array1::from_iter(stats.iter().map(|s| s.1));
            // Running stats use the unbiased variance.
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            for ci in 0..c {
                self.running_mean[ci] =
                    (1.0 - MOMENTUM) * self.running_mean[ci] + MOMENTUM * mean[ci];
                self.running_var[ci] =
                    (1.0 - MOMENTUM) * self.running_var[ci] + MOMENTUM * var[ci] * unbias;
            }
            let inv_std = var.mapv(|v| 1.0 / (v + EPS).sqrt());
            (mean, inv_std)
        } else {
            (
                self.running_mean.clone(),
                self.running_var.mapv(|v| 1.0 / (v + EPS).sqrt()),
            )
        };

        let gamma = self.gamma.value.as_slice().expect("contiguous");
        let beta = self.beta.value.as_slice().expect("contiguous");
        let scale: Vec<f32> = (0..c).map(|ci| gamma[ci] * inv_std[ci]).collect();
        let offset: Vec<f32> = (0..c).map(|ci| beta[ci] - mean[ci] * scale[ci]).collect();
        let mut y = x.clone();
        y.axis_iter_mut(Axis(0)).into_par_iter().for_each(|mut ex| {
            let exs = ex.as_slice_mut().expect("contiguous");
            for ci in 0..c {
                let a = scale[ci];
                let b = offset[ci];
                for v in &mut exs[ci * hw..(ci + 1) * hw] {
                    *v = *v * a + b;
                }
            }
        });

        if mode.caches() {
            self.cache = Some(Cache {
                x: x.clone(),
                mean,
                inv_std,
                batch_stats: mode.batch_stats(),
            });
        }
        y
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let cache = self.cache.take().expect("bn backward without forward");
        let (batch, c, h, w) = cache.x.dim();
        let hw = h * w;
        let m = (batch * hw) as f32;
        let gamma = self.gamma.value.as_slice().expect("contiguous");
        let xs = cache.x.as_slice().expect("contiguous");
        let dys = dy.as_slice().expect("contiguous");

        // Per-channel sums of dy and dy*xhat.
        let sums: Vec<(f32, f32)> = (0..c)
            .into_par_iter()
            .map(|ci| {
                let mu = cache.mean[ci];
                let istd = cache.inv_std[ci];
                let mut s_dy = 0.0f32;
                let mut s_dy_xhat = 0.0f32;
                for b in 0..batch {
                    let off = (b * c + ci) * hw;
                    let xp = &xs[off..off + hw];
                    let dp = &dys[off..off + hw];
                    let mut a = 0.0f32;
                    let mut b2 = 0.0f32;
                    for (&xv, &dv) in xp.iter().zip(dp.iter()) {
                        a += dv;
                        b2 += dv * (xv - mu);
                    }
                    s_dy += a;
                    s_dy_xhat += b2 * istd;
                }
                (s_dy, s_dy_xhat)
            })
            .collect();

        for ci in 0..c {
            self.gamma.grad.as_slice_mut().unwrap()[ci] += sums[ci].1;
            self.beta.grad.as_slice_mut().unwrap()[ci] += sums[ci].0;
        }

        let mut dx = Array4::<f32>::zeros(cache.x.raw_dim());
        {
            let batch_stats = cache.batch_stats;
            let mean = &cache.mean;
            let inv_std = &cache.inv_std;
            dx.axis_iter_mut(Axis(0))
                .into_par_iter()
                .enumerate()
                .for_each(|(b, mut ex)| {
                    let exs = ex.as_slice_mut().expect("contiguous");
                    for ci in 0..c {
                        let off = (b * c + ci) * hw;
                        let xp = &xs[off..off + hw];
                        let dp = &dys[off..off + hw];
                        let out = &mut exs[ci * hw..(ci + 1) * hw];
                        let istd = inv_std[ci];
                        let mu = mean[ci];
                        if batch_stats {
                            let (s_dy, s_dy_xhat) = sums[ci];
                            let k = gamma[ci] * istd / m;
                            for ((o, &dv), &xv) in out.iter_mut().zip(dp.iter()).zip(xp.iter()) {
                                let xhat = (xv - mu) * istd;
                                *o = k * (m * dv - s_dy - xhat * s_dy_xhat);
                            }
                        } else {
                            // Frozen statistics: the normalization is affine.
                            let a = gamma[ci] * istd;
                            for (o, &dv) in out.iter_mut().zip(dp.iter()) {
                                *o = a * dv;
                            }
                        }
                    }
                });
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derived_rng;
    use rand::Rng as _;

    #[test]
    fn training_forward_standardizes_channels() {
        let mut rng = derived_rng(3, &[7]);
        let mut bn = BatchNorm2d::new("bn", 3);
        let x = Array4::from_shape_fn((4, 3, 5, 5), |_| rng.random_range(-2.0f32..5.0));
        let y = bn.forward(&x, Mode::Train);
        for ci in 0..3 {
            let lane = y.index_axis(Axis(1), ci);
            let m: f32 = lane.iter().sum::<f32>() / lane.len() as f32;
            let v: f32 = lane.iter().map(|&v| (v - m) * (v - m)).sum::<f32>() / lane.len() as f32;
            assert!(m.abs() < 1e-4, "mean {m}");
            assert!((v - 1.0).abs() < 1e-3, "var {v}");
        }
    }

    #[test]
    fn eval_differs_from_train_after_updates() {
        let mut rng = derived_rng(4, &[7]);
        let mut bn = BatchNorm2d::new("bn", 2);
        let x = Array4::from_shape_fn((8, 2, 4, 4), |_| rng.random_range(0.0f32..10.0));
        let y_train = bn.forward(&x, Mode::Train);
        let y_eval = bn.forward(&x, Mode::Infer);
        assert!(y_train
            .iter()
            .zip(y_eval.iter())
            .any(|(a, b)| (a - b).abs() > 1e-4));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = derived_rng(5, &[7]);
        let mut bn = BatchNorm2d::new("bn", 2);
        let x = Array4::from_shape_fn((3, 2, 4, 4), |_| rng.random_range(-1.0f32..1.0));
        let g = Array4::from_shape_fn((3, 2, 4, 4), |_| rng.random_range(-1.0f32..1.0));
        let _ = bn.forward(&x, Mode::Train);
        let dx = bn.backward(&g);

        let loss = |bn: &BatchNorm2d, x: &Array4<f32>| -> f64 {
            let mut bn = bn.clone();
            bn.running_mean.fill(0.0);
            bn.running_var.fill(1.0);
            bn.forward(&x.clone(), Mode::Train)
                .iter()
                .zip(g.iter())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum()
        };
        let h = 1e-2f32;
        for &idx in &[(0usize, 0usize, 0usize, 0usize), (2, 1, 3, 3), (1, 0, 2, 1)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&bn, &xp) - loss(&bn, &xm)) / (2.0 * h as f64);
            let an = dx[idx] as f64;
            assert!((fd - an).abs() < 3e-2 * fd.abs().max(1.0), "dx {an} vs fd {fd}");
        }
    }

    #[test]
    fn gamma_beta_gradients_accumulate() {
        let mut rng = derived_rng(6, &[7]);
        let mut bn = BatchNorm2d::new("bn", 2);
        let x = Array4::from_shape_fn((2, 2, 3, 3), |_| rng.random_range(-1.0f32..1.0));
        let g = Array4::from_shape_fn((2, 2, 3, 3), |_| rng.random_range(-1.0f32..1.0));
        let _ = bn.forward(&x, Mode::Train);
        let _ = bn.backward(&g);
        let dbeta: f32 = g.index_axis(Axis(1), 0).iter().sum();
        assert!((bn.beta.grad.as_slice().unwrap()[0] - dbeta).abs() < 1e-3);
    }
}
