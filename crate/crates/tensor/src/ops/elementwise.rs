use std::rc::Rc;

use crate::tensor::numel;
use crate::{Float, Tensor};

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every element of `out_shape`, the flat offset into a tensor of
/// `in_shape` broadcast against it.
pub(crate) fn broadcast_offsets(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - in_shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..in_shape.len()).rev() {
        strides[i + pad] = if in_shape[i] == 1 { 0 } else { s };
        s *= in_shape[i];
    }
    let total = numel(out_shape);
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    offsets
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    #[inline]
    fn apply<T: Float>(self, a: T, b: T) -> T {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }
}

fn binary<T: Float>(a: &Tensor<T>, b: &Tensor<T>, op: BinOp) -> Tensor<T> {
    if a.shape() == b.shape() {
        let data: Vec<T> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| op.apply(x, y))
            .collect();
        return Tensor::from_op(
            a.shape().to_vec(),
            data,
            vec![a.clone(), b.clone()],
            Box::new(move |g, out, p| {
                let (ad, bd) = (p[0].data(), p[1].data());
                let ga = p[0].requires_grad().then(|| match op {
                    BinOp::Add | BinOp::Sub => g.to_vec(),
                    BinOp::Mul => g.iter().zip(bd).map(|(&g, &y)| g * y).collect(),
                    BinOp::Div => g.iter().zip(bd).map(|(&g, &y)| g / y).collect(),
                });
                let gb = p[1].requires_grad().then(|| match op {
                    BinOp::Add => g.to_vec(),
                    BinOp::Sub => g.iter().map(|&g| -g).collect(),
                    BinOp::Mul => g.iter().zip(ad).map(|(&g, &x)| g * x).collect(),
                    BinOp::Div => g
                        .iter()
                        .zip(out)
                        .zip(bd)
                        .map(|((&g, &o), &y)| -g * o / y)
                        .collect(),
                });
                vec![ga, gb]
            }),
        );
    }

    let out_shape = broadcast_shape(a.shape(), b.shape()).unwrap_or_else(|| {
        panic!("cannot broadcast {:?} with {:?}", a.shape(), b.shape())
    });
    let oa = Rc::new(broadcast_offsets(a.shape(), &out_shape));
    let ob = Rc::new(broadcast_offsets(b.shape(), &out_shape));
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<T> = oa
        .iter()
        .zip(ob.iter())
        .map(|(&i, &j)| op.apply(ad[i], bd[j]))
        .collect();
    Tensor::from_op(
        out_shape,
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g, out, p| {
            let (ad, bd) = (p[0].data(), p[1].data());
            let ga = p[0].requires_grad().then(|| {
                let mut ga = vec![T::zero(); ad.len()];
                for (k, (&i, &j)) in oa.iter().zip(ob.iter()).enumerate() {
                    ga[i] += match op {
                        BinOp::Add | BinOp::Sub => g[k],
                        BinOp::Mul => g[k] * bd[j],
                        BinOp::Div => g[k] / bd[j],
                    };
                }
                ga
            });
            let gb = p[1].requires_grad().then(|| {
                let mut gb = vec![T::zero(); bd.len()];
                for (k, (&i, &j)) in oa.iter().zip(ob.iter()).enumerate() {
                    gb[j] += match op {
                        BinOp::Add => g[k],
                        BinOp::Sub => -g[k],
                        BinOp::Mul => g[k] * ad[i],
                        BinOp::Div => -g[k] * out[k] / bd[j],
                    };
                }
                gb
            });
            vec![ga, gb]
        }),
    )
}

/// Elementwise map whose derivative is expressed through the input `x` and
/// output `y`.
fn unary<T: Float>(
    a: &Tensor<T>,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + 'static,
) -> Tensor<T> {
    let data: Vec<T> = a.data().iter().map(|&x| f(x)).collect();
    Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone()],
        Box::new(move |g, out, p| {
            let x = p[0].data();
            vec![Some(
                g.iter()
                    .zip(x)
                    .zip(out)
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect(),
            )]
        }),
    )
}

impl<T: Float> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        binary(self, other, BinOp::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Tensor<T> {
        binary(self, other, BinOp::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Tensor<T> {
        binary(self, other, BinOp::Mul)
    }

    pub fn div(&self, other: &Tensor<T>) -> Tensor<T> {
        binary(self, other, BinOp::Div)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::c(c);
        unary(self, move |x| x + c, |_, _| T::one())
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::c(c);
        unary(self, move |x| x * c, move |_, _| c)
    }

    pub fn neg(&self) -> Tensor<T> {
        unary(self, |x| -x, |_, _| -T::one())
    }

    pub fn exp(&self) -> Tensor<T> {
        unary(self, |x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Tensor<T> {
        unary(self, |x| x.ln(), |x, _| x.recip())
    }

    pub fn sqrt(&self) -> Tensor<T> {
        unary(self, |x| x.sqrt(), |_, y| T::c(0.5) / y)
    }

    pub fn sqr(&self) -> Tensor<T> {
        unary(self, |x| x * x, |x, _| x + x)
    }

    pub fn recip(&self) -> Tensor<T> {
        unary(self, |x| x.recip(), |_, y| -y * y)
    }

    pub fn abs(&self) -> Tensor<T> {
        unary(self, |x| x.abs(), |x, _| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        unary(
            self,
            |x| T::one() / (T::one() + (-x).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    pub fn tanh(&self) -> Tensor<T> {
        unary(self, |x| x.tanh(), |_, y| T::one() - y * y)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Tensor<T> {
        unary(
            self,
            |x| {
                if x > T::c(20.0) {
                    x
                } else if x < T::c(-20.0) {
                    x.exp()
                } else {
                    x.exp().ln_1p()
                }
            },
            |x, _| T::one() / (T::one() + (-x).exp()),
        )
    }

    pub fn relu(&self) -> Tensor<T> {
        unary(
            self,
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor<T> {
        let s = T::c(slope);
        unary(
            self,
            move |x| if x > T::zero() { x } else { x * s },
            move |x, _| if x > T::zero() { T::one() } else { s },
        )
    }

    /// Clamps from below; the gradient is zero where the clamp is active.
    pub fn clamp_min(&self, lo: f64) -> Tensor<T> {
        let lo = T::c(lo);
        unary(
            self,
            move |x| if x < lo { lo } else { x },
            move |x, _| if x < lo { T::zero() } else { T::one() },
        )
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor<T> {
        let (lo, hi) = (T::c(lo), T::c(hi));
        unary(
            self,
            move |x| x.max(lo).min(hi),
            move |x, _| {
                if x < lo || x > hi {
                    T::zero()
                } else {
                    T::one()
                }
            },
        )
    }

    /// `arccos`, defined on `[-1, 1]`; callers clamp first.
    pub fn acos(&self) -> Tensor<T> {
        unary(self, |x| x.acos(), |x, _| -T::one() / (T::one() - x * x).sqrt())
    }

    pub fn powf(&self, e: f64) -> Tensor<T> {
        let e = T::c(e);
        unary(self, move |x| x.powf(e), move |x, _| e * x.powf(e - T::one()))
    }
}
