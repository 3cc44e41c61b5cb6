//! Residual classifier: stem conv, four stages of two basic blocks with
//! downsampling between stages, global average pooling, linear head.

use ndarray::{Array1, Array2, Array4, Axis};

use super::{relu_backward_inplace, relu_inplace, BatchNorm2d, Conv2d, Linear, Mode, Param};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    down: Option<(Conv2d, BatchNorm2d)>,
    cache_out1: Option<Array4<f32>>,
    cache_y: Option<Array4<f32>>,
}

impl BasicBlock {
    pub fn new(name: &str, cin: usize, cout: usize, stride: usize, rng: &mut Rng) -> Self {
        let down = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(&format!("{name}.down.conv"), cin, cout, 1, stride, 0, false, rng),
                BatchNorm2d::new(&format!("{name}.down.bn"), cout),
            )
        });
        Self {
            conv1: Conv2d::new(&format!("{name}.conv1"), cin, cout, 3, stride, 1, false, rng),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), cout),
            conv2: Conv2d::new(&format!("{name}.conv2"), cout, cout, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), cout),
            down,
            cache_out1: None,
            cache_y: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<f32>, mode: Mode) -> Array4<f32> {
        let mut a = self.bn1.forward(&self.conv1.forward(x, mode), mode);
        relu_inplace(&mut a);
        if mode.caches() {
            self.cache_out1 = Some(a.clone());
        }
        let mut y = self.bn2.forward(&self.conv2.forward(&a, mode), mode);
        let shortcut = match &mut self.down {
            Some((conv, bn)) => bn.forward(&conv.forward(x, mode), mode),
            None => x.clone(),
        };
        y += &shortcut;
        relu_inplace(&mut y);
        if mode.caches() {
            self.cache_y = Some(y.clone());
        }
        y
    }

    pub fn forward_ref(&self, x: &Array4<f32>) -> Array4<f32> {
        let mut a = self.bn1_infer(&self.conv1.forward_ref(x));
        relu_inplace(&mut a);
        let mut y = self.bn2_infer(&self.conv2.forward_ref(&a));
        let shortcut = match &self.down {
            Some((conv, bn)) => {
                let mut s = conv.forward_ref(x);
                s = Self::bn_infer(bn, &s);
                s
            }
            None => x.clone(),
        };
        y += &shortcut;
        relu_inplace(&mut y);
        y
    }

    fn bn1_infer(&self, x: &Array4<f32>) -> Array4<f32> {
        Self::bn_infer(&self.bn1, x)
    }

    fn bn2_infer(&self, x: &Array4<f32>) -> Array4<f32> {
        Self::bn_infer(&self.bn2, x)
    }

    fn bn_infer(bn: &BatchNorm2d, x: &Array4<f32>) -> Array4<f32> {
        // Immutable inference-mode batchnorm.
        let mut bn = bn.clone();
        bn.forward(x, Mode::Infer)
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let y = self.cache_y.take().expect("block backward without forward");
        let mut dz = dy.clone();
        relu_backward_inplace(&mut dz, &y);
        let d_shortcut = dz.clone();
        let mut da = self.conv2.backward(&self.bn2.backward(&dz));
        let out1 = self.cache_out1.take().expect("cache_out1");
        relu_backward_inplace(&mut da, &out1);
        let dx_main = self.conv1.backward(&self.bn1.backward(&da));
        let dx_short = match &mut self.down {
            Some((conv, bn)) => conv.backward(&bn.backward(&d_shortcut)),
            None => d_shortcut,
        };
        dx_main + dx_short
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.conv1.params_mut();
        out.extend(self.bn1.params_mut());
        out.extend(self.conv2.params_mut());
        out.extend(self.bn2.params_mut());
        if let Some((conv, bn)) = &mut self.down {
            out.extend(conv.params_mut());
            out.extend(bn.params_mut());
        }
        out
    }

    fn batchnorms_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        let mut out = vec![&mut self.bn1, &mut self.bn2];
        if let Some((_, bn)) = &mut self.down {
            out.push(bn);
        }
        out
    }

    pub fn clear_caches(&mut self) {
        self.conv1.clear_cache();
        self.bn1.clear_cache();
        self.conv2.clear_cache();
        self.bn2.clear_cache();
        if let Some((conv, bn)) = &mut self.down {
            conv.clear_cache();
            bn.clear_cache();
        }
        self.cache_out1 = None;
        self.cache_y = None;
    }
}

/// The residual classifier network.
#[derive(Debug, Clone)]
pub struct ResNet {
    stem_conv: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Vec<BasicBlock>>,
    fc: Linear,
    num_classes: usize,
    cache_stem: Option<Array4<f32>>,
    feat_hw: std::cell::Cell<(usize, usize)>,
}

impl ResNet {
    /// Builds the network: stem conv to `widths[0]`, then four stages of two
    /// blocks each, downsampling by two between stages.
    pub fn new(widths: &[usize; 4], num_classes: usize, rng: &mut Rng) -> Self {
        let stem_conv = Conv2d::new("stem.conv", 1, widths[0], 3, 1, 1, false, rng);
        let stem_bn = BatchNorm2d::new("stem.bn", widths[0]);
        let mut stages = Vec::new();
        let mut cin = widths[0];
        for (s, &cout) in widths.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..2 {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let name = format!("s{s}.b{b}");
                blocks.push(BasicBlock::new(&name, cin, cout, stride, rng));
                cin = cout;
            }
            stages.push(blocks);
        }
        let fc = Linear::new("fc", widths[3], num_classes, rng);
        Self {
            stem_conv,
            stem_bn,
            stages,
            fc,
            num_classes,
            cache_stem: None,
            feat_hw: std::cell::Cell::new((0, 0)),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    fn pool(&self, features: &Array4<f32>) -> Array2<f32> {
        let (_, _, h, w) = features.dim();
        self.feat_hw.set((h, w));
        let sum = features.sum_axis(Axis(3)).sum_axis(Axis(2));
        sum / (h * w) as f32
    }

    pub fn forward(&mut self, x: &Array4<f32>, mode: Mode) -> Array2<f32> {
        let mut a = self.stem_bn.forward(&self.stem_conv.forward(x, mode), mode);
        relu_inplace(&mut a);
        if mode.caches() {
            self.cache_stem = Some(a.clone());
        }
        for stage in &mut self.stages {
            for block in stage {
                a = block.forward(&a, mode);
            }
        }
        let pooled = self.pool(&a);
        self.fc.forward(&pooled, mode)
    }

    /// Inference on a shared reference; no caches are written.
    pub fn forward_infer(&self, x: &Array4<f32>) -> Array2<f32> {
        let mut bn = self.stem_bn.clone();
        let mut a = bn.forward(&self.stem_conv.forward_ref(x), Mode::Infer);
        relu_inplace(&mut a);
        for stage in &self.stages {
            for block in stage {
                a = block.forward_ref(&a);
            }
        }
        let pooled = self.pool(&a);
        self.fc.forward_ref(&pooled)
    }

    /// Output of the last block of `stage` from the most recent caching
    /// forward pass.
    pub fn stage_output(&self, stage: usize) -> Option<&Array4<f32>> {
        self.stages[stage].last()?.cache_y.as_ref()
    }

    /// Propagates a logit-space cotangent back to the output of
    /// `stop_after_stage` (gradients for deeper parameters are accumulated on
    /// the way). With `None` the gradient flows to the input.
    pub fn backward_to_stage(
        &mut self,
        dlogits: &Array2<f32>,
        stop_after_stage: Option<usize>,
    ) -> Array4<f32> {
        let dpool = self.fc.backward(dlogits);
        let mut grad = self.pool_backward(&dpool);
        for s in (0..self.stages.len()).rev() {
            if stop_after_stage == Some(s) {
                return grad;
            }
            for block in self.stages[s].iter_mut().rev() {
                grad = block.backward(&grad);
            }
        }
        let stem = self.cache_stem.take().expect("stem cache");
        relu_backward_inplace(&mut grad, &stem);
        self.stem_conv.backward(&self.stem_bn.backward(&grad))
    }

    /// Full backward pass for training.
    pub fn backward(&mut self, dlogits: &Array2<f32>) {
        let _ = self.backward_to_stage(dlogits, None);
    }

    fn pool_backward(&self, dpool: &Array2<f32>) -> Array4<f32> {
        let (h, w) = self.feat_hw.get();
        let (batch, channels) = dpool.dim();
        let scale = 1.0 / (h * w) as f32;
        let mut out = Array4::<f32>::zeros((batch, channels, h, w));
        for b in 0..batch {
            for c in 0..channels {
                let v = dpool[[b, c]] * scale;
                out.index_axis_mut(Axis(0), b)
                    .index_axis_mut(Axis(0), c)
                    .fill(v);
            }
        }
        out
    }

    /// Gradient of the logits w.r.t. the final-stage features, without
    /// touching parameter gradients (head is pool + linear, both affine).
    pub fn head_backward_ref(&self, dlogits: &Array2<f32>) -> Array4<f32> {
        let dpool = self.fc.backward_input_ref(dlogits);
        self.pool_backward(&dpool)
    }

    /// Logits from final-stage features (global average pool + linear head).
    pub fn head_forward_ref(&self, features: &Array4<f32>) -> Array2<f32> {
        let pooled = self.pool(features);
        self.fc.forward_ref(&pooled)
    }

    /// Logits from the output of `after_stage`, running any later stages in
    /// inference mode on a shared reference.
    pub fn forward_from_stage_ref(&self, features: &Array4<f32>, after_stage: usize) -> Array2<f32> {
        let mut a = features.clone();
        for stage in &self.stages[after_stage + 1..] {
            for block in stage {
                a = block.forward_ref(&a);
            }
        }
        self.head_forward_ref(&a)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.stem_conv.params_mut();
        out.extend(self.stem_bn.params_mut());
        for stage in &mut self.stages {
            for block in stage {
                out.extend(block.params_mut());
            }
        }
        out.extend(self.fc.params_mut());
        out
    }

    fn batchnorms_mut(&mut self) -> Vec<&mut BatchNorm2d> {
        let mut out = vec![&mut self.stem_bn];
        for stage in &mut self.stages {
            for block in stage {
                out.extend(block.batchnorms_mut());
            }
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn clear_caches(&mut self) {
        self.stem_conv.clear_cache();
        self.stem_bn.clear_cache();
        self.fc.clear_cache();
        self.cache_stem = None;
        for stage in &mut self.stages {
            for block in stage {
                block.clear_caches();
            }
        }
    }

    /// All state tensors (parameters and batchnorm running statistics) as
    /// (name, shape, data), in a stable order.
    pub fn state_tensors(&mut self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out = Vec::new();
        for p in self.params_mut() {
            out.push((
                p.name.clone(),
                p.value.shape().to_vec(),
                p.value.iter().cloned().collect(),
            ));
        }
        for bn in self.batchnorms_mut() {
            let prefix = bn.gamma.name.trim_end_matches(".gamma").to_string();
            out.push((
                format!("{prefix}.running_mean"),
                vec![bn.running_mean.len()],
                bn.running_mean.to_vec(),
            ));
            out.push((
                format!("{prefix}.running_var"),
                vec![bn.running_var.len()],
                bn.running_var.to_vec(),
            ));
        }
        out
    }

    /// Restores state written by [`ResNet::state_tensors`].
    pub fn load_state_tensors(
        &mut self,
        tensors: &std::collections::HashMap<String, (Vec<usize>, Vec<f32>)>,
    ) -> Result<(), String> {
        for p in self.params_mut() {
            let (shape, data) = tensors
                .get(&p.name)
                .ok_or_else(|| format!("missing tensor {}", p.name))?;
            if shape.as_slice() != p.value.shape() {
                return Err(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    p.name,
                    shape,
                    p.value.shape()
                ));
            }
            for (dst, &src) in p.value.iter_mut().zip(data.iter()) {
                *dst = src;
            }
        }
        for bn in self.batchnorms_mut() {
            let prefix = bn.gamma.name.trim_end_matches(".gamma").to_string();
            for (field, arr) in [
                ("running_mean", &mut bn.running_mean),
                ("running_var", &mut bn.running_var),
            ] {
                let name = format!("{prefix}.{field}");
                let (shape, data) = tensors
                    .get(&name)
                    .ok_or_else(|| format!("missing tensor {name}"))?;
                if shape.as_slice() != [arr.len()] {
                    return Err(format!("tensor {name} has wrong shape {shape:?}"));
                }
                *arr = Array1::from_vec(data.clone());
            }
        }
        Ok(())
    }
}
