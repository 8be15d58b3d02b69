use crate::{Float, Tensor};

/// `c = a @ b` for row-major `a: m x k`, `b: k x n` viewed through strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (isize, isize),
    b: &[T],
    (rsb, csb): (isize, isize),
    c: &mut [T],
    beta: T,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices whose extents cover the strided matrices;
    // `c` is a distinct mutable borrow.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl<T: Float> Tensor<T> {
    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.rank(), 2, "matmul lhs must be rank 2");
        assert_eq!(other.rank(), 2, "matmul rhs must be rank 2");
        let (m, k) = (self.dim(0), self.dim(1));
        let (k2, n) = (other.dim(0), other.dim(1));
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![T::zero(); m * n];
        gemm_into(m, k, n, self.data(), (k as isize, 1), other.data(), (n as isize, 1), &mut out, T::zero());
        Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, p| {
                let ga = p[0].requires_grad().then(|| {
                    let mut ga = vec![T::zero(); m * k];
                    // g (m x n) @ b^T (n x k)
                    gemm_into(m, n, k, g, (n as isize, 1), p[1].data(), (1, n as isize), &mut ga, T::zero());
                    ga
                });
                let gb = p[1].requires_grad().then(|| {
                    let mut gb = vec![T::zero(); k * n];
                    // a^T (k x m) @ g (m x n)
                    gemm_into(k, m, n, p[0].data(), (1, k as isize), g, (n as isize, 1), &mut gb, T::zero());
                    gb
                });
                vec![ga, gb]
            }),
        )
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Tensor<T> {
        assert_eq!(self.rank(), 2, "transpose input must be rank 2");
        let (r, c) = (self.dim(0), self.dim(1));
        let x = self.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        Tensor::from_op(
            vec![c, r],
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Affine map `x @ w^T + b` with `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&self, weight: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.rank(), 2, "linear input must be [B, in]");
        let (bsz, fin) = (self.dim(0), self.dim(1));
        let fout = weight.dim(0);
        assert_eq!(weight.shape(), &[fout, fin], "linear weight shape");
        assert_eq!(bias.shape(), &[fout], "linear bias shape");
        let mut out = vec![T::zero(); bsz * fout];
        for row in out.chunks_mut(fout) {
            row.copy_from_slice(bias.data());
        }
        gemm_into(bsz, fin, fout, self.data(), (fin as isize, 1), weight.data(), (1, fin as isize), &mut out, T::one());
        Tensor::from_op(
            vec![bsz, fout],
            out,
            vec![self.clone(), weight.clone(), bias.clone()],
            Box::new(move |g, _, p| {
                let gx = p[0].requires_grad().then(|| {
                    let mut gx = vec![T::zero(); bsz * fin];
                    gemm_into(bsz, fout, fin, g, (fout as isize, 1), p[1].data(), (fin as isize, 1), &mut gx, T::zero());
                    gx
                });
                let gw = p[1].requires_grad().then(|| {
                    let mut gw = vec![T::zero(); fout * fin];
                    gemm_into(fout, bsz, fin, g, (1, fout as isize), p[0].data(), (fin as isize, 1), &mut gw, T::zero());
                    gw
                });
                let gb = p[2].requires_grad().then(|| {
                    let mut gb = vec![T::zero(); fout];
                    for row in g.chunks(fout) {
                        for (a, &v) in gb.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    gb
                });
                vec![gx, gw, gb]
            }),
        )
    }
}
