//! Adaptive-moment optimizer.

use ndarray::ArrayD;

use super::Param;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: i32,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update step. Parameter order must stay identical across calls.
    pub fn step(&mut self, params: &mut [&mut Param]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect();
            self.v = params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect();
        }
        assert_eq!(self.m.len(), params.len(), "parameter set changed");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (((mv, vv), g), w) in m
                .iter_mut()
                .zip(v.iter_mut())
                .zip(p.grad.iter())
                .zip(p.value.iter_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * g;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * g * g;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn descends_a_quadratic() {
        // Minimize (w - 3)^2 elementwise.
        let mut p = Param::new("w", arr1(&[0.0f32, 10.0]).into_dyn());
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            p.zero_grad();
            let grad: Vec<f32> = p.value.iter().map(|&w| 2.0 * (w - 3.0)).collect();
            for (g, n) in p.grad.iter_mut().zip(grad) {
                *g = n;
            }
            opt.step(&mut [&mut p]);
        }
        for &w in p.value.iter() {
            assert!((w - 3.0).abs() < 1e-2, "converged to {w}");
        }
    }
}
