use std::rc::Rc;

use crate::{Float, Tensor};

/// Bilinear tap for one output pixel after border clamping.
#[derive(Clone, Copy)]
struct Tap<T> {
    i00: usize,
    i01: usize,
    i10: usize,
    i11: usize,
    fx: T,
    fy: T,
    /// Whether the sample position was inside the domain along x / y.
    inside_x: bool,
    inside_y: bool,
}

fn clamp_axis<T: Float>(p: T, n: usize) -> (usize, usize, T, bool) {
    let hi = T::c((n - 1) as f64);
    let inside = p >= T::zero() && p <= hi;
    let pc = p.max(T::zero()).min(hi);
    let i0 = pc.floor().to_usize().unwrap_or(0).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, pc - T::c(i0 as f64), inside)
}

fn taps<T: Float>(disp: &[T], b: usize, h: usize, w: usize) -> Vec<Tap<T>> {
    let hw = h * w;
    let mut taps = Vec::with_capacity(b * hw);
    for n in 0..b {
        let dx = &disp[(2 * n) * hw..(2 * n + 1) * hw];
        let dy = &disp[(2 * n + 1) * hw..(2 * n + 2) * hw];
        for i in 0..h {
            for j in 0..w {
                let k = i * w + j;
                let (x0, x1, fx, inside_x) = clamp_axis(T::c(j as f64) + dx[k], w);
                let (y0, y1, fy, inside_y) = clamp_axis(T::c(i as f64) + dy[k], h);
                taps.push(Tap {
                    i00: y0 * w + x0,
                    i01: y0 * w + x1,
                    i10: y1 * w + x0,
                    i11: y1 * w + x1,
                    fx,
                    fy,
                    inside_x,
                    inside_y,
                });
            }
        }
    }
    taps
}

impl<T: Float> Tensor<T> {
    /// Samples `self` (`[B, C, H, W]`) at `x + disp(x)` with bilinear
    /// interpolation and border padding.
    ///
    /// `disp` is `[B, 2, H, W]` in pixels; channel 0 is the horizontal
    /// (column) component and channel 1 the vertical (row) component.
    /// Differentiable in both arguments.
    pub fn warp_bilinear(&self, disp: &Tensor<T>) -> Tensor<T> {
        let (b, c, h, w) = check_warp_shapes(self, disp);
        let hw = h * w;
        let taps = Rc::new(taps(disp.data(), b, h, w));
        let x = self.data();
        let mut out = vec![T::zero(); b * c * hw];
        for n in 0..b {
            let tn = &taps[n * hw..(n + 1) * hw];
            for ch in 0..c {
                let src = &x[(n * c + ch) * hw..(n * c + ch + 1) * hw];
                let dst = &mut out[(n * c + ch) * hw..(n * c + ch + 1) * hw];
                for (d, t) in dst.iter_mut().zip(tn) {
                    let top = src[t.i00] + (src[t.i01] - src[t.i00]) * t.fx;
                    let bot = src[t.i10] + (src[t.i11] - src[t.i10]) * t.fx;
                    *d = top + (bot - top) * t.fy;
                }
            }
        }
        Tensor::from_op(
            vec![b, c, h, w],
            out,
            vec![self.clone(), disp.clone()],
            Box::new(move |g, _, p| {
                let gimg = p[0].requires_grad().then(|| {
                    let mut gi = vec![T::zero(); b * c * hw];
                    for n in 0..b {
                        let tn = &taps[n * hw..(n + 1) * hw];
                        for ch in 0..c {
                            let gs = &g[(n * c + ch) * hw..(n * c + ch + 1) * hw];
                            let dst = &mut gi[(n * c + ch) * hw..(n * c + ch + 1) * hw];
                            for (&gv, t) in gs.iter().zip(tn) {
                                let (ox, oy) = (T::one() - t.fx, T::one() - t.fy);
                                dst[t.i00] += gv * ox * oy;
                                dst[t.i01] += gv * t.fx * oy;
                                dst[t.i10] += gv * ox * t.fy;
                                dst[t.i11] += gv * t.fx * t.fy;
                            }
                        }
                    }
                    gi
                });
                let gdisp = p[1].requires_grad().then(|| {
                    let x = p[0].data();
                    let mut gd = vec![T::zero(); b * 2 * hw];
                    for n in 0..b {
                        let tn = &taps[n * hw..(n + 1) * hw];
                        for ch in 0..c {
                            let src = &x[(n * c + ch) * hw..(n * c + ch + 1) * hw];
                            let gs = &g[(n * c + ch) * hw..(n * c + ch + 1) * hw];
                            for (k, (&gv, t)) in gs.iter().zip(tn).enumerate() {
                                if t.inside_x {
                                    let d = (src[t.i01] - src[t.i00]) * (T::one() - t.fy)
                                        + (src[t.i11] - src[t.i10]) * t.fy;
                                    gd[(2 * n) * hw + k] += gv * d;
                                }
                                if t.inside_y {
                                    let d = (src[t.i10] - src[t.i00]) * (T::one() - t.fx)
                                        + (src[t.i11] - src[t.i01]) * t.fx;
                                    gd[(2 * n + 1) * hw + k] += gv * d;
                                }
                            }
                        }
                    }
                    gd
                });
                vec![gimg, gdisp]
            }),
        )
    }

    /// Nearest-neighbour sampling at `x + disp(x)` with border padding.
    /// Gradient flows to `self` only.
    pub fn warp_nearest(&self, disp: &Tensor<T>) -> Tensor<T> {
        let (b, c, h, w) = check_warp_shapes(self, disp);
        let hw = h * w;
        let d = disp.data();
        let mut index = Vec::with_capacity(b * hw);
        let half = T::c(0.5);
        for n in 0..b {
            for i in 0..h {
                for j in 0..w {
                    let k = i * w + j;
                    let px = (T::c(j as f64) + d[(2 * n) * hw + k]).max(T::zero()).min(T::c((w - 1) as f64));
                    let py = (T::c(i as f64) + d[(2 * n + 1) * hw + k]).max(T::zero()).min(T::c((h - 1) as f64));
                    // Round half up.
                    let xi = (px + half).floor().to_usize().unwrap_or(0).min(w - 1);
                    let yi = (py + half).floor().to_usize().unwrap_or(0).min(h - 1);
                    index.push(yi * w + xi);
                }
            }
        }
        let index = Rc::new(index);
        let x = self.data();
        let mut out = vec![T::zero(); b * c * hw];
        for n in 0..b {
            let idx = &index[n * hw..(n + 1) * hw];
            for ch in 0..c {
                let base = (n * c + ch) * hw;
                for (k, &s) in idx.iter().enumerate() {
                    out[base + k] = x[base + s];
                }
            }
        }
        Tensor::from_op(
            vec![b, c, h, w],
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gi = vec![T::zero(); b * c * hw];
                for n in 0..b {
                    let idx = &index[n * hw..(n + 1) * hw];
                    for ch in 0..c {
                        let base = (n * c + ch) * hw;
                        for (k, &s) in idx.iter().enumerate() {
                            gi[base + s] += g[base + k];
                        }
                    }
                }
                vec![Some(gi)]
            }),
        )
    }
}

fn check_warp_shapes<T: Float>(img: &Tensor<T>, disp: &Tensor<T>) -> (usize, usize, usize, usize) {
    assert_eq!(img.rank(), 4, "warp input must be NCHW");
    let (b, c, h, w) = (img.dim(0), img.dim(1), img.dim(2), img.dim(3));
    assert_eq!(
        disp.shape(),
        &[b, 2, h, w],
        "displacement shape must be [B, 2, H, W] matching the image {:?}",
        img.shape()
    );
    (b, c, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_shift_moves_delta() {
        let mut img = vec![0.0f64; 25];
        img[2 * 5 + 2] = 1.0;
        let img = Tensor::new(img, &[1, 1, 5, 5]);
        let mut d = vec![0.0; 50];
        d[..25].fill(1.0); // sample one pixel to the right
        let out = img.warp_bilinear(&Tensor::new(d, &[1, 2, 5, 5]));
        // out(x) = img(x + 1): the delta appears one column to the left.
        assert_eq!(out.data()[2 * 5 + 1], 1.0);
        assert_eq!(out.data().iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn nearest_matches_bilinear_on_integer_shift() {
        let img = Tensor::<f64>::new((0..16).map(|v| v as f64).collect(), &[1, 1, 4, 4]);
        let mut d = vec![0.0; 32];
        d[16..].fill(-1.0);
        let disp = Tensor::new(d, &[1, 2, 4, 4]);
        assert_eq!(img.warp_nearest(&disp).data(), img.warp_bilinear(&disp).data());
    }
}
