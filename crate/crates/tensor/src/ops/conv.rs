use std::rc::Rc;

use crate::ops::linalg::gemm_into;
use crate::{Float, Tensor};

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col<T: Float>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (k, pad, h, w, oh, ow) = (g.k, g.pad as isize, g.h, g.w, g.oh, g.ow);
    let mut row = 0;
    for ci in 0..g.cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let shift = kx as isize - pad;
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = ox as isize + shift;
                        *d = if ix >= 0 && ix < w as isize { src[ix as usize] } else { T::zero() };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Float>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let (k, pad, h, w, oh, ow) = (g.k, g.pad as isize, g.h, g.w, g.oh, g.ow);
    let mut row = 0;
    for ci in 0..g.cin {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let shift = kx as isize - pad;
                    for (ox, &v) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = ox as isize + shift;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

impl<T: Float> Tensor<T> {
    /// Stride-1 2-D convolution (cross-correlation) of `[B, Cin, H, W]` with
    /// `[Cout, Cin, k, k]` weights, zero padding `pad` and per-channel bias.
    pub fn conv2d(&self, weight: &Tensor<T>, bias: &Tensor<T>, pad: usize) -> Tensor<T> {
        assert_eq!(self.rank(), 4, "conv2d input must be NCHW");
        let (b, cin, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        let (cout, cin2, k, k2) = (weight.dim(0), weight.dim(1), weight.dim(2), weight.dim(3));
        assert_eq!(cin, cin2, "conv2d channel mismatch: input {cin}, weight {cin2}");
        assert_eq!(k, k2, "square kernels only");
        assert_eq!(bias.shape(), &[cout], "conv2d bias shape");
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
        let geom = ConvGeom {
            cin,
            h,
            w,
            k,
            pad,
            oh: h + 2 * pad - k + 1,
            ow: w + 2 * pad - k + 1,
        };
        let direct = k == 1 && pad == 0;
        let (rows, ncols) = (geom.rows(), geom.cols());
        let mut out = vec![T::zero(); b * cout * ncols];
        let mut cols = if direct { Vec::new() } else { vec![T::zero(); rows * ncols] };
        for n in 0..b {
            let xs = &self.data()[n * cin * h * w..(n + 1) * cin * h * w];
            let os = &mut out[n * cout * ncols..(n + 1) * cout * ncols];
            for (c, chunk) in os.chunks_mut(ncols).enumerate() {
                chunk.fill(bias.data()[c]);
            }
            let src: &[T] = if direct {
                xs
            } else {
                im2col(xs, &geom, &mut cols);
                &cols
            };
            gemm_into(cout, rows, ncols, weight.data(), (rows as isize, 1), src, (ncols as isize, 1), os, T::one());
        }
        Tensor::from_op(
            vec![b, cout, geom.oh, geom.ow],
            out,
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |g, _, p| {
                let (x, wt) = (&p[0], &p[1]);
                let need_x = x.requires_grad();
                let need_w = wt.requires_grad();
                let mut gx = need_x.then(|| vec![T::zero(); x.numel()]);
                let mut gw = need_w.then(|| vec![T::zero(); wt.numel()]);
                let mut cols = vec![T::zero(); if direct { 0 } else { rows * ncols }];
                let mut gcols = vec![T::zero(); if need_x && !direct { rows * ncols } else { 0 }];
                let per_in = cin * geom.h * geom.w;
                for n in 0..b {
                    let gs = &g[n * cout * ncols..(n + 1) * cout * ncols];
                    if let Some(gw) = gw.as_mut() {
                        let xs = &x.data()[n * per_in..(n + 1) * per_in];
                        let src: &[T] = if direct {
                            xs
                        } else {
                            im2col(xs, &geom, &mut cols);
                            &cols
                        };
                        // gW += g (cout x ncols) @ cols^T (ncols x rows)
                        gemm_into(cout, ncols, rows, gs, (ncols as isize, 1), src, (1, ncols as isize), gw, T::one());
                    }
                    if let Some(gx) = gx.as_mut() {
                        let dst = &mut gx[n * per_in..(n + 1) * per_in];
                        if direct {
                            // W^T (rows x cout) @ g (cout x ncols)
                            gemm_into(rows, cout, ncols, wt.data(), (1, rows as isize), gs, (ncols as isize, 1), dst, T::one());
                        } else {
                            gemm_into(rows, cout, ncols, wt.data(), (1, rows as isize), gs, (ncols as isize, 1), &mut gcols, T::zero());
                            col2im(&gcols, &geom, dst);
                        }
                    }
                }
                let gb = p[2].requires_grad().then(|| {
                    let mut gb = vec![T::zero(); cout];
                    for n in 0..b {
                        for (c, acc) in gb.iter_mut().enumerate() {
                            let base = (n * cout + c) * ncols;
                            *acc += g[base..base + ncols].iter().copied().sum::<T>();
                        }
                    }
                    gb
                });
                vec![gx, gw, gb]
            }),
        )
    }

    /// 2x2 average pooling with stride 2 on `[B, C, H, W]` (H, W even).
    pub fn avg_pool2(&self) -> Tensor<T> {
        assert_eq!(self.rank(), 4, "avg_pool2 input must be NCHW");
        let (b, c, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial size, got {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::c(0.25);
        let x = self.data();
        let mut out = vec![T::zero(); b * c * oh * ow];
        for plane in 0..b * c {
            let src = &x[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    let s = src[2 * i * w + 2 * j]
                        + src[2 * i * w + 2 * j + 1]
                        + src[(2 * i + 1) * w + 2 * j]
                        + src[(2 * i + 1) * w + 2 * j + 1];
                    dst[i * ow + j] = s * quarter;
                }
            }
        }
        Tensor::from_op(
            vec![b, c, oh, ow],
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); b * c * h * w];
                for plane in 0..b * c {
                    let gs = &g[plane * oh * ow..(plane + 1) * oh * ow];
                    let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                    for i in 0..oh {
                        for j in 0..ow {
                            let v = gs[i * ow + j] * quarter;
                            dst[2 * i * w + 2 * j] = v;
                            dst[2 * i * w + 2 * j + 1] = v;
                            dst[(2 * i + 1) * w + 2 * j] = v;
                            dst[(2 * i + 1) * w + 2 * j + 1] = v;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Bilinear resize of `[B, C, H, W]` to `[B, C, out_h, out_w]` with
    /// half-pixel centers and edge clamping.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Tensor<T> {
        assert_eq!(self.rank(), 4, "resize_bilinear input must be NCHW");
        let (b, c, h, w) = (self.dim(0), self.dim(1), self.dim(2), self.dim(3));
        if (h, w) == (out_h, out_w) {
            return self.clone();
        }
        let ry = Rc::new(axis_taps::<T>(h, out_h));
        let rx = Rc::new(axis_taps::<T>(w, out_w));
        let x = self.data();
        let mut out = vec![T::zero(); b * c * out_h * out_w];
        for plane in 0..b * c {
            let src = &x[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
            for (i, &(y0, y1, fy)) in ry.iter().enumerate() {
                for (j, &(x0, x1, fx)) in rx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                    dst[i * out_w + j] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        Tensor::from_op(
            vec![b, c, out_h, out_w],
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); b * c * h * w];
                for plane in 0..b * c {
                    let gs = &g[plane * out_h * out_w..(plane + 1) * out_h * out_w];
                    let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                    for (i, &(y0, y1, fy)) in ry.iter().enumerate() {
                        for (j, &(x0, x1, fx)) in rx.iter().enumerate() {
                            let v = gs[i * out_w + j];
                            let (top, bot) = (v * (T::one() - fy), v * fy);
                            dst[y0 * w + x0] += top * (T::one() - fx);
                            dst[y0 * w + x1] += top * fx;
                            dst[y1 * w + x0] += bot * (T::one() - fx);
                            dst[y1 * w + x1] += bot * fx;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}

/// Source taps `(i0, i1, frac)` for each output index of a half-pixel resize.
fn axis_taps<T: Float>(n_in: usize, n_out: usize) -> Vec<(usize, usize, T)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, T::c(src - i0 as f64))
        })
        .collect()
}
