use std::rc::Rc;

use crate::ops::elementwise::broadcast_offsets;
use crate::tensor::numel;
use crate::{Float, Tensor};

impl<T: Float> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Tensor<T> {
        assert_eq!(
            numel(shape),
            self.numel(),
            "cannot reshape {:?} into {shape:?}",
            self.shape()
        );
        Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        )
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let s: T = self.data().iter().copied().sum();
        Tensor::from_op(
            vec![],
            vec![s],
            vec![self.clone()],
            Box::new(|g, _, p| vec![Some(vec![g[0]; p[0].numel()])]),
        )
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = self.numel() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// Sums over `axes`, keeping them as size-1 dimensions.
    pub fn sum_keepdim(&self, axes: &[usize]) -> Tensor<T> {
        let mut out_shape = self.shape().to_vec();
        for &a in axes {
            assert!(a < out_shape.len(), "axis {a} out of range for {:?}", self.shape());
            out_shape[a] = 1;
        }
        // Offsets of each input element in the reduced output.
        let offsets = Rc::new(broadcast_offsets(&out_shape, self.shape()));
        let mut data = vec![T::zero(); numel(&out_shape)];
        for (&o, &v) in offsets.iter().zip(self.data()) {
            data[o] += v;
        }
        Tensor::from_op(
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(offsets.iter().map(|&o| g[o]).collect())]),
        )
    }

    pub fn mean_keepdim(&self, axes: &[usize]) -> Tensor<T> {
        let n: usize = axes.iter().map(|&a| self.dim(a)).product();
        self.sum_keepdim(axes).mul_scalar(1.0 / n as f64)
    }

    /// Concatenates along `axis`.
    pub fn cat(parts: &[Tensor<T>], axis: usize) -> Tensor<T> {
        assert!(!parts.is_empty(), "cat of nothing");
        let base = parts[0].shape().to_vec();
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            assert_eq!(s.len(), base.len(), "cat rank mismatch");
            for (d, (&x, &y)) in s.iter().zip(&base).enumerate() {
                assert!(d == axis || x == y, "cat shape mismatch {s:?} vs {base:?}");
            }
            sizes.push(s[axis]);
        }
        let total: usize = sizes.iter().sum();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &sz) in parts.iter().zip(&sizes) {
                let chunk = sz * inner;
                data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Tensor::from_op(
            out_shape,
            data,
            parts.to_vec(),
            Box::new(move |g, _, p| {
                let mut grads: Vec<Vec<T>> = sizes
                    .iter()
                    .map(|&sz| Vec::with_capacity(outer * sz * inner))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (gp, &sz) in grads.iter_mut().zip(&sizes) {
                        let chunk = sz * inner;
                        gp.extend_from_slice(&g[pos..pos + chunk]);
                        pos += chunk;
                    }
                }
                grads
                    .into_iter()
                    .zip(p)
                    .map(|(g, t)| t.requires_grad().then_some(g))
                    .collect()
            }),
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor<T> {
        let shape = self.shape();
        assert!(start + len <= shape[axis], "narrow out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        Tensor::from_op(
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |g, _, p| {
                let mut gi = vec![T::zero(); p[0].numel()];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    gi[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gi)]
            }),
        )
    }

    /// Repeats along a size-1 leading axis: `[1, ...] -> [n, ...]`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor<T> {
        self.add(&Tensor::zeros(shape))
    }
}
