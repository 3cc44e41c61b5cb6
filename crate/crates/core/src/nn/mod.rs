//! Minimal CNN building blocks with explicit forward/backward passes.
//!
//! Everything is f32. Parallel work is split over fixed-size batch chunks (or
//! over channels) with sequential reductions in a fixed order, so results are
//! bitwise reproducible regardless of thread scheduling.

mod adam;
mod batchnorm;
mod conv;
mod linear;
mod resnet;

pub use adam::Adam;
pub use batchnorm::BatchNorm2d;
pub use conv::Conv2d;
pub use linear::Linear;
pub use resnet::{BasicBlock, ResNet};

use ndarray::{Array4, ArrayD};

/// Batch-chunk size for data-parallel layer work. Fixed so that chunk
/// boundaries (and therefore reduction order) never depend on thread count.
pub(crate) const BATCH_CHUNK: usize = 16;

pub(crate) fn batch_chunks(batch: usize) -> Vec<(usize, usize)> {
    (0..batch.div_ceil(BATCH_CHUNK))
        .map(|i| (i * BATCH_CHUNK, ((i + 1) * BATCH_CHUNK).min(batch)))
        .collect()
}

/// How a forward pass will be used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, caches for backward, running-stat updates.
    Train,
    /// Inference statistics, but caches kept so gradients can still flow
    /// (used by attribution on a frozen model).
    EvalCached,
    /// Inference statistics, no caches.
    Infer,
}

impl Mode {
    pub(crate) fn caches(self) -> bool {
        !matches!(self, Mode::Infer)
    }

    pub(crate) fn batch_stats(self) -> bool {
        matches!(self, Mode::Train)
    }
}

/// A learnable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: ArrayD<f32>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

pub(crate) fn relu_inplace(x: &mut Array4<f32>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Masks `grad` by the positivity of `activated` (the post-ReLU output).
pub(crate) fn relu_backward_inplace(grad: &mut Array4<f32>, activated: &Array4<f32>) {
    for (g, &a) in grad.iter_mut().zip(activated.iter()) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_batch_exactly() {
        for batch in [1, 5, 16, 17, 48, 64] {
            let chunks = batch_chunks(batch);
            assert_eq!(chunks[0].0, 0);
            assert_eq!(chunks.last().unwrap().1, batch);
            for pair in chunks.windows(2) {
                assert_eq!(pair[0].1, pair[1].0);
            }
        }
    }
}
