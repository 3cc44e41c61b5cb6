//! 2D convolution with two interchangeable kernels.
//!
//! Wide feature maps with few channels run direct loops whose inner body is a
//! contiguous row fused-multiply-add; channel-heavy small maps go through
//! im2col + GEMM where the matrix product amortizes the packing cost. Both
//! paths produce identical layouts and the choice is a pure function of the
//! output width, so results stay deterministic.

use ndarray::{Array2, Array4, Ix2};
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{batch_chunks, Mode, Param};
use crate::rng::Rng;

/// Output rows at least this wide use the direct kernel.
const DIRECT_MIN_WIDTH: usize = 24;

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// Weight stored as (cout, cin*k*k).
    pub weight: Param,
    pub bias: Option<Param>,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cache_x: Option<Array4<f32>>,
}

struct Geometry {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl Conv2d {
    /// Kaiming-normal initialization: std = sqrt(2 / fan_in).
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        assert!(k == 3 || k == 1, "supported kernels: 3x3 and 1x1");
        let fan_in = (cin * k * k) as f32;
        let std = (2.0 / fan_in).sqrt();
        let weight = Array2::from_shape_fn((cout, cin * k * k), |_| {
            let z: f32 = rng.sample(StandardNormal);
            z * std
        });
        let bias = bias.then(|| {
            Param::new(
                format!("{name}.bias"),
                ndarray::Array1::<f32>::zeros(cout).into_dyn(),
            )
        });
        Self {
            weight: Param::new(format!("{name}.weight"), weight.into_dyn()),
            bias,
            cin,
            cout,
            k,
            stride,
            pad,
            cache_x: None,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn geometry(&self, h: usize, w: usize) -> Geometry {
        let (oh, ow) = self.out_hw(h, w);
        Geometry {
            cin: self.cin,
            cout: self.cout,
            k: self.k,
            stride: self.stride,
            pad: self.pad,
            h,
            w,
            oh,
            ow,
        }
    }

    pub fn forward(&mut self, x: &Array4<f32>, mode: Mode) -> Array4<f32> {
        let y = self.forward_ref(x);
        if mode.caches() {
            self.cache_x = Some(x.clone());
        }
        y
    }

    /// Forward pass without caching; usable on a shared reference.
    pub fn forward_ref(&self, x: &Array4<f32>) -> Array4<f32> {
        let (batch, cin, h, w) = x.dim();
        assert_eq!(cin, self.cin, "{}: input channels", self.weight.name);
        let g = self.geometry(h, w);
        let xs = x.as_slice().expect("input contiguous");
        let ws = self.weight.value.as_slice().expect("weight contiguous");
        let direct = g.ow >= DIRECT_MIN_WIDTH;

        let mut y = Array4::<f32>::zeros((batch, self.cout, g.oh, g.ow));
        {
            let ys = y.as_slice_mut().expect("output contiguous");
            let x_len = cin * h * w;
            let y_len = self.cout * g.oh * g.ow;
            let chunks = split_chunks(ys, batch, y_len);
            chunks.into_par_iter().for_each(|(first_example, y_chunk)| {
                for (i, y_ex) in y_chunk.chunks_mut(y_len).enumerate() {
                    let ex = first_example + i;
                    let x_ex = &xs[ex * x_len..(ex + 1) * x_len];
                    if direct {
                        forward_direct(x_ex, ws, y_ex, &g);
                    } else {
                        forward_gemm(x_ex, ws, y_ex, &g);
                    }
                }
            });
            if let Some(b) = &self.bias {
                let bs = b.value.as_slice().expect("contiguous");
                for ex in 0..batch {
                    for (co, &bv) in bs.iter().enumerate() {
                        let off = ex * y_len + co * g.oh * g.ow;
                        for v in &mut ys[off..off + g.oh * g.ow] {
                            *v += bv;
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let x = self.cache_x.take().expect("conv backward without forward");
        let (batch, cin, h, w) = x.dim();
        let (_, cout, oh, ow) = dy.dim();
        assert_eq!(cout, self.cout);
        let g = self.geometry(h, w);
        debug_assert_eq!((g.oh, g.ow), (oh, ow));
        let xs = x.as_slice().expect("contiguous");
        let dys = dy.as_slice().expect("contiguous");
        let ws = self.weight.value.as_slice().expect("contiguous");
        let kdim = cin * self.k * self.k;
        let x_len = cin * h * w;
        let y_len = cout * oh * ow;
        let direct = ow >= DIRECT_MIN_WIDTH;

        let mut dx = Array4::<f32>::zeros((batch, cin, h, w));
        let parts: Vec<(Vec<f32>, Vec<f32>)> = {
            let dxs = dx.as_slice_mut().expect("contiguous");
            let chunks = split_chunks(dxs, batch, x_len);
            chunks
                .into_par_iter()
                .map(|(first_example, dx_chunk)| {
                    let mut dw = vec![0.0f32; cout * kdim];
                    let mut db = vec![0.0f32; if self.bias.is_some() { cout } else { 0 }];
                    for (i, dx_ex) in dx_chunk.chunks_mut(x_len).enumerate() {
                        let ex = first_example + i;
                        let x_ex = &xs[ex * x_len..(ex + 1) * x_len];
                        let dy_ex = &dys[ex * y_len..(ex + 1) * y_len];
                        if direct {
                            backward_direct(x_ex, dy_ex, ws, dx_ex, &mut dw, &g);
                        } else {
                            backward_gemm(x_ex, dy_ex, ws, dx_ex, &mut dw, &g);
                        }
                        if !db.is_empty() {
                            for co in 0..cout {
                                let mut s = 0.0f32;
                                for &v in &dy_ex[co * oh * ow..(co + 1) * oh * ow] {
                                    s += v;
                                }
                                db[co] += s;
                            }
                        }
                    }
                    (dw, db)
                })
                .collect()
        };

        let wg = self.weight.grad.as_slice_mut().expect("contiguous");
        for (dw, db) in parts {
            for (g, d) in wg.iter_mut().zip(dw.iter()) {
                *g += d;
            }
            if let Some(bias) = &mut self.bias {
                for (g, d) in bias.grad.iter_mut().zip(db.iter()) {
                    *g += d;
                }
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.weight];
        if let Some(b) = &mut self.bias {
            out.push(b);
        }
        out
    }

    pub fn clear_cache(&mut self) {
        self.cache_x = None;
    }
}

/// Splits a flat batch buffer into fixed-size example chunks for parallel
/// work; boundaries depend only on the batch size.
fn split_chunks(buf: &mut [f32], batch: usize, example_len: usize) -> Vec<(usize, &mut [f32])> {
    let mut parts = Vec::new();
    let mut rest = buf;
    for (s, e) in batch_chunks(batch) {
        let (head, tail) = rest.split_at_mut((e - s) * example_len);
        parts.push((s, head));
        rest = tail;
    }
    parts
}

fn forward_direct(x: &[f32], w: &[f32], y: &mut [f32], g: &Geometry) {
    if g.k == 3 && g.stride == 1 && g.pad == 1 {
        return forward_fused3(x, w, y, g);
    }
    let kk = g.k * g.k;
    for co in 0..g.cout {
        let y_plane = &mut y[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
        let w_co = &w[co * g.cin * kk..(co + 1) * g.cin * kk];
        for ci in 0..g.cin {
            let x_plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            let w_ci = &w_co[ci * kk..(ci + 1) * kk];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = w_ci[ky * g.k + kx];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let x_row = &x_plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let y_row = &mut y_plane[oy * g.ow..(oy + 1) * g.ow];
                        let shift = kx as isize - g.pad as isize;
                        for (ox, d) in y_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride) as isize + shift;
                            if ix >= 0 && ix < g.w as isize {
                                *d += wv * x_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Fused 3x3 stride-1 pad-1 forward: one pass per (co, ci, oy, ky) row with
/// all three horizontal taps applied together.
fn forward_fused3(x: &[f32], w: &[f32], y: &mut [f32], g: &Geometry) {
    let n = g.w;
    for co in 0..g.cout {
        let y_plane = &mut y[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
        let w_co = &w[co * g.cin * 9..(co + 1) * g.cin * 9];
        for ci in 0..g.cin {
            let x_plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            let w9 = &w_co[ci * 9..ci * 9 + 9];
            for oy in 0..g.oh {
                let y_row = &mut y_plane[oy * g.ow..(oy + 1) * g.ow];
                for ky in 0..3usize {
                    let iy = oy as isize + ky as isize - 1;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let x_row = &x_plane[iy as usize * n..(iy as usize + 1) * n];
                    let w0 = w9[ky * 3];
                    let w1 = w9[ky * 3 + 1];
                    let w2 = w9[ky * 3 + 2];
                    // Interior: y[ox] += w0*x[ox-1] + w1*x[ox] + w2*x[ox+1].
                    let (first, rest) = y_row.split_first_mut().expect("row non-empty");
                    let (last, mid) = rest.split_last_mut().expect("row len >= 2");
                    *first += w1 * x_row[0] + w2 * x_row[1];
                    *last += w0 * x_row[n - 2] + w1 * x_row[n - 1];
                    let a = &x_row[0..n - 2];
                    let b = &x_row[1..n - 1];
                    let c = &x_row[2..n];
                    for (((d, &xa), &xb), &xc) in
                        mid.iter_mut().zip(a.iter()).zip(b.iter()).zip(c.iter())
                    {
                        *d += w0 * xa + w1 * xb + w2 * xc;
                    }
                }
            }
        }
    }
}

fn backward_direct(x: &[f32], dy: &[f32], w: &[f32], dx: &mut [f32], dw: &mut [f32], g: &Geometry) {
    if g.k == 3 && g.stride == 1 && g.pad == 1 {
        return backward_fused3(x, dy, w, dx, dw, g);
    }
    let kk = g.k * g.k;
    for co in 0..g.cout {
        let dy_plane = &dy[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
        let w_co = &w[co * g.cin * kk..(co + 1) * g.cin * kk];
        let dw_co = &mut dw[co * g.cin * kk..(co + 1) * g.cin * kk];
        for ci in 0..g.cin {
            let x_plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            let dx_plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            let w_ci = &w_co[ci * kk..(ci + 1) * kk];
            let dw_ci = &mut dw_co[ci * kk..(ci + 1) * kk];
            for ky in 0..g.k {
                for kx in 0..g.k {
                    let wv = w_ci[ky * g.k + kx];
                    let mut grad_acc = 0.0f32;
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let x_row = &x_plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dx_row = &mut dx_plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dy_row = &dy_plane[oy * g.ow..(oy + 1) * g.ow];
                        let shift = kx as isize - g.pad as isize;
                        for (ox, &gv) in dy_row.iter().enumerate() {
                            let ix = (ox * g.stride) as isize + shift;
                            if ix >= 0 && ix < g.w as isize {
                                grad_acc += x_row[ix as usize] * gv;
                                dx_row[ix as usize] += wv * gv;
                            }
                        }
                    }
                    dw_ci[ky * g.k + kx] += grad_acc;
                }
            }
        }
    }
}

/// Fused 3x3 stride-1 pad-1 backward: per (co, ci, oy, ky) row, one pass
/// updates the dx row (three taps) and another accumulates the three weight
/// gradients as row dot products.
fn backward_fused3(x: &[f32], dy: &[f32], w: &[f32], dx: &mut [f32], dw: &mut [f32], g: &Geometry) {
    let n = g.w;
    for co in 0..g.cout {
        let dy_plane = &dy[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
        let w_co = &w[co * g.cin * 9..(co + 1) * g.cin * 9];
        let dw_co = &mut dw[co * g.cin * 9..(co + 1) * g.cin * 9];
        for ci in 0..g.cin {
            let x_plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            let dx_plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            let w9 = &w_co[ci * 9..ci * 9 + 9];
            let dw9 = &mut dw_co[ci * 9..ci * 9 + 9];
            for oy in 0..g.oh {
                let dy_row = &dy_plane[oy * g.ow..(oy + 1) * g.ow];
                for ky in 0..3usize {
                    let iy = oy as isize + ky as isize - 1;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let x_row = &x_plane[iy as usize * n..(iy as usize + 1) * n];
                    let dx_row = &mut dx_plane[iy as usize * n..(iy as usize + 1) * n];
                    let w0 = w9[ky * 3];
                    let w1 = w9[ky * 3 + 1];
                    let w2 = w9[ky * 3 + 2];
                    // dx[ox+kx-1] += w[kx] * dy[ox] for the three taps:
                    // dx[i] += w0*dy[i+1] + w1*dy[i] + w2*dy[i-1] (interior).
                    let (first, rest) = dx_row.split_first_mut().expect("row non-empty");
                    let (last, mid) = rest.split_last_mut().expect("row len >= 2");
                    *first += w0 * dy_row[1] + w1 * dy_row[0];
                    *last += w1 * dy_row[n - 1] + w2 * dy_row[n - 2];
                    let da = &dy_row[2..n];
                    let db = &dy_row[1..n - 1];
                    let dc = &dy_row[0..n - 2];
                    for (((d, &ga), &gb), &gc) in
                        mid.iter_mut().zip(da.iter()).zip(db.iter()).zip(dc.iter())
                    {
                        *d += w0 * ga + w1 * gb + w2 * gc;
                    }
                    // dw[kx] += dot(dy, x shifted by kx-1).
                    let mut a0 = 0.0f32;
                    let mut a1 = 0.0f32;
                    let mut a2 = 0.0f32;
                    let xa = &x_row[0..n - 2];
                    let xb = &x_row[1..n - 1];
                    let xc = &x_row[2..n];
                    let dmid = &dy_row[1..n - 1];
                    for (((&g0, &x0), &x1), &x2) in
                        dmid.iter().zip(xa.iter()).zip(xb.iter()).zip(xc.iter())
                    {
                        a0 += g0 * x0;
                        a1 += g0 * x1;
                        a2 += g0 * x2;
                    }
                    // Edge columns.
                    a1 += dy_row[0] * x_row[0] + dy_row[n - 1] * x_row[n - 1];
                    a2 += dy_row[0] * x_row[1];
                    a0 += dy_row[n - 1] * x_row[n - 2];
                    dw9[ky * 3] += a0;
                    dw9[ky * 3 + 1] += a1;
                    dw9[ky * 3 + 2] += a2;
                }
            }
        }
    }
}

/// Patch matrix for one example: (cin*k*k, oh*ow), row-major.
fn im2col(x: &[f32], g: &Geometry, cols: &mut [f32]) {
    let ohw = g.oh * g.ow;
    for c in 0..g.cin {
        let x_plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let out = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut out[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let x_row = &x_plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let shift = kx as isize - g.pad as isize;
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride) as isize + shift;
                        *d = if ix >= 0 && ix < g.w as isize {
                            x_row[ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn forward_gemm(x: &[f32], w: &[f32], y: &mut [f32], g: &Geometry) {
    let kdim = g.cin * g.k * g.k;
    let ohw = g.oh * g.ow;
    let mut cols = vec![0.0f32; kdim * ohw];
    im2col(x, g, &mut cols);
    let w2 = ndarray::ArrayView2::from_shape((g.cout, kdim), w).expect("weight shape");
    let c2 = ndarray::ArrayView2::from_shape((kdim, ohw), &cols[..]).expect("cols shape");
    let out = w2.dot(&c2);
    y.copy_from_slice(out.as_slice().expect("contiguous"));
}

fn backward_gemm(x: &[f32], dy: &[f32], w: &[f32], dx: &mut [f32], dw: &mut [f32], g: &Geometry) {
    let kdim = g.cin * g.k * g.k;
    let ohw = g.oh * g.ow;
    let mut cols = vec![0.0f32; kdim * ohw];
    im2col(x, g, &mut cols);
    let w2 = ndarray::ArrayView2::from_shape((g.cout, kdim), w).expect("weight shape");
    let c2 = ndarray::ArrayView2::from_shape((kdim, ohw), &cols[..]).expect("cols shape");
    let dy2 = ndarray::ArrayView2::from_shape((g.cout, ohw), dy).expect("dy shape");
    // dW += dy . colsT
    let dw_new = dy2.dot(&c2.t());
    for (acc, &v) in dw.iter_mut().zip(dw_new.as_slice().expect("contiguous")) {
        *acc += v;
    }
    // dcols = wT . dy, scattered back into dx.
    let dcols = w2.t().dot(&dy2);
    let dc = dcols.as_slice().expect("contiguous");
    for c in 0..g.cin {
        let dx_plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &dc[row * ohw..(row + 1) * ohw];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dx_row =
                        &mut dx_plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s_row = &src[oy * g.ow..(oy + 1) * g.ow];
                    let shift = kx as isize - g.pad as isize;
                    for (ox, &v) in s_row.iter().enumerate() {
                        let ix = (ox * g.stride) as isize + shift;
                        if ix >= 0 && ix < g.w as isize {
                            dx_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}
