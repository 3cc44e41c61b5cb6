//! Fully connected layer.

use ndarray::{Array1, Array2, Axis, Ix2};
use rand::Rng as _;

use super::{Mode, Param};
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param, // (cout, cin)
    pub bias: Param,   // (cout)
    cache_x: Option<Array2<f32>>,
}

impl Linear {
    pub fn new(name: &str, cin: usize, cout: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (cin as f32).sqrt();
        let weight = Array2::from_shape_fn((cout, cin), |_| rng.random_range(-bound..bound));
        let bias = Array1::from_shape_fn(cout, |_| rng.random_range(-bound..bound));
        Self {
            weight: Param::new(format!("{name}.weight"), weight.into_dyn()),
            bias: Param::new(format!("{name}.bias"), bias.into_dyn()),
            cache_x: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<f32>, mode: Mode) -> Array2<f32> {
        let y = self.forward_ref(x);
        if mode.caches() {
            self.cache_x = Some(x.clone());
        }
        y
    }

    pub fn forward_ref(&self, x: &Array2<f32>) -> Array2<f32> {
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let b = self.bias.value.as_slice().expect("contiguous");
        let mut y = x.dot(&w.t());
        for mut row in y.rows_mut() {
            for (v, &bv) in row.iter_mut().zip(b.iter()) {
                *v += bv;
            }
        }
        y
    }

    pub fn backward(&mut self, dy: &Array2<f32>) -> Array2<f32> {
        let x = self.cache_x.take().expect("linear backward without forward");
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        let dw = dy.t().dot(&x);
        let db = dy.sum_axis(Axis(0));
        let mut wg = self.weight.grad.view_mut().into_dimensionality::<Ix2>().unwrap();
        wg += &dw;
        for (g, d) in self.bias.grad.iter_mut().zip(db.iter()) {
            *g += d;
        }
        dy.dot(&w)
    }

    /// Gradient w.r.t. the input without touching parameter gradients or the
    /// cache; usable on a shared reference.
    pub fn backward_input_ref(&self, dy: &Array2<f32>) -> Array2<f32> {
        let w = self.weight.value.view().into_dimensionality::<Ix2>().unwrap();
        dy.dot(&w)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn clear_cache(&mut self) {
        self.cache_x = None;
    }
}
