use std::rc::Rc;

use crate::{Float, Tensor};

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Float> Tensor<T> {
    /// Per-sample, per-channel normalization over the spatial dimensions of an
    /// NCHW tensor (no affine parameters).
    pub fn instance_norm(&self, eps: f64) -> Tensor<T> {
        assert_eq!(self.rank(), 4, "instance_norm input must be NCHW");
        let planes = self.dim(0) * self.dim(1);
        let n = self.dim(2) * self.dim(3);
        let nf = T::c(n as f64);
        let eps = T::c(eps);
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        let mut inv_std = Vec::with_capacity(planes);
        for p in 0..planes {
            let src = &x[p * n..(p + 1) * n];
            let mean = src.iter().copied().sum::<T>() / nf;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = (var + eps).sqrt().recip();
            inv_std.push(is);
            for (o, &v) in out[p * n..(p + 1) * n].iter_mut().zip(src) {
                *o = (v - mean) * is;
            }
        }
        let inv_std = Rc::new(inv_std);
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut gx = vec![T::zero(); g.len()];
                for p in 0..planes {
                    let gs = &g[p * n..(p + 1) * n];
                    let ys = &y[p * n..(p + 1) * n];
                    let sum_g = gs.iter().copied().sum::<T>();
                    let sum_gy = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>();
                    let k = inv_std[p] / nf;
                    for ((o, &gi), &yi) in gx[p * n..(p + 1) * n].iter_mut().zip(gs).zip(ys) {
                        *o = k * (nf * gi - sum_g - yi * sum_gy);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Tensor<T> {
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |c: usize| (o * n + c) * inner + i;
                let mut m = T::neg_infinity();
                for c in 0..n {
                    m = m.max(x[at(c)]);
                }
                let mut s = T::zero();
                for c in 0..n {
                    let e = (x[at(c)] - m).exp();
                    out[at(c)] = e;
                    s += e;
                }
                for c in 0..n {
                    out[at(c)] /= s;
                }
            }
        }
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |c: usize| (o * n + c) * inner + i;
                        let dot: T = (0..n).map(|c| g[at(c)] * y[at(c)]).sum();
                        for c in 0..n {
                            gx[at(c)] = y[at(c)] * (g[at(c)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Log-softmax along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Tensor<T> {
        let (outer, n, inner) = split_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |c: usize| (o * n + c) * inner + i;
                let mut m = T::neg_infinity();
                for c in 0..n {
                    m = m.max(x[at(c)]);
                }
                let lse = m + (0..n).map(|c| (x[at(c)] - m).exp()).sum::<T>().ln();
                for c in 0..n {
                    out[at(c)] = x[at(c)] - lse;
                }
            }
        }
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |c: usize| (o * n + c) * inner + i;
                        let sg: T = (0..n).map(|c| g[at(c)]).sum();
                        for c in 0..n {
                            gx[at(c)] = g[at(c)] - y[at(c)].exp() * sg;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}
