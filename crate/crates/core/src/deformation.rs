//! Stationary-velocity-field diffeomorphisms on 2-D grids.
//!
//! A displacement field `u` of shape `[B, 2, H, W]` (channel 0 horizontal,
//! channel 1 vertical, in pixels) stands for the map `x -> x + u(x)`.
//! Warping samples the input there: `warp(img, u)(x) = img(x + u(x))`, with
//! border padding.

use std::str::FromStr;

use anatomix_tensor::{Float, Tensor};

use crate::{Error, Result};

/// Default number of scaling-and-squaring steps.
pub const SQUARING_STEPS: u32 = 7;

/// Gaussian over a velocity field at one scale.
#[derive(Clone, Debug)]
pub struct VelocityField<T: Float> {
    /// `[B, 2, h, w]`, pixels per unit time at this scale.
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
    /// Zero-based scale index.
    pub level: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

#[derive(Clone, Debug)]
pub struct Deformation<T: Float> {
    pub disp: Tensor<T>,
    pub direction: Direction,
}

impl<T: Float> Deformation<T> {
    pub fn identity(batch: usize, h: usize, w: usize) -> Self {
        Self {
            disp: Tensor::zeros(&[batch, 2, h, w]),
            direction: Direction::Forward,
        }
    }

    pub fn new(disp: Tensor<T>, direction: Direction) -> Result<Self> {
        if disp.rank() != 4 || disp.dim(1) != 2 {
            return Err(Error::Dimension(format!(
                "displacement must be [B, 2, H, W], got {:?}",
                disp.shape()
            )));
        }
        if !disp.is_finite() {
            return Err(Error::Numeric("non-finite displacement".into()));
        }
        Ok(Self { disp, direction })
    }

    /// `(H, W)`.
    pub fn resolution(&self) -> (usize, usize) {
        (self.disp.dim(2), self.disp.dim(3))
    }
}

/// Per-scale velocities and the composed full-resolution deformations.
#[derive(Clone, Debug)]
pub struct DeformationStack<T: Float> {
    pub velocities: Vec<VelocityField<T>>,
    /// `phi = phi^{l_1} o ... o phi^{l_J}`.
    pub forward: Deformation<T>,
    pub inverse: Deformation<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Bilinear,
    Nearest,
}

impl FromStr for Interp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear" => Ok(Self::Bilinear),
            "nearest" => Ok(Self::Nearest),
            other => Err(Error::Config(format!("unknown interpolation mode `{other}`"))),
        }
    }
}

fn check_disp<T: Float>(t: &Tensor<T>) -> Result<()> {
    if t.rank() != 4 || t.dim(1) != 2 {
        return Err(Error::Dimension(format!("field must be [B, 2, H, W], got {:?}", t.shape())));
    }
    Ok(())
}

/// Samples `img` (`[B, C, H, W]`) at `x + d(x)` with border padding.
pub fn warp<T: Float>(img: &Tensor<T>, d: &Deformation<T>, interp: Interp) -> Result<Tensor<T>> {
    warp_disp(img, &d.disp, interp)
}

pub fn warp_disp<T: Float>(img: &Tensor<T>, disp: &Tensor<T>, interp: Interp) -> Result<Tensor<T>> {
    check_disp(disp)?;
    if img.rank() != 4 || img.dim(0) != disp.dim(0) || img.shape()[2..] != disp.shape()[2..] {
        return Err(Error::Dimension(format!(
            "cannot warp {:?} with displacement {:?}",
            img.shape(),
            disp.shape()
        )));
    }
    Ok(match interp {
        Interp::Bilinear => img.warp_bilinear(disp),
        Interp::Nearest => img.warp_nearest(disp),
    })
}

/// Scaling and squaring on a raw field: `u = v / 2^steps`, then `steps`
/// times `u <- u + u o (id + u)`.
pub fn exponentiate_disp<T: Float>(v: &Tensor<T>, steps: u32) -> Result<Tensor<T>> {
    check_disp(v)?;
    if steps == 0 {
        return Err(Error::Config("scaling and squaring needs at least one step".into()));
    }
    if !v.is_finite() {
        return Err(Error::Numeric("non-finite velocity".into()));
    }
    let mut u = v.mul_scalar(0.5f64.powi(steps as i32));
    for _ in 0..steps {
        u = u.add(&u.warp_bilinear(&u));
    }
    Ok(u)
}

/// `exp(v)` at the resolution of `v`.
pub fn exponentiate<T: Float>(v: &Tensor<T>, steps: u32) -> Result<Deformation<T>> {
    Ok(Deformation {
        disp: exponentiate_disp(v, steps)?,
        direction: Direction::Forward,
    })
}

/// `exp(-v)`.
pub fn invert<T: Float>(v: &Tensor<T>, steps: u32) -> Result<Deformation<T>> {
    Ok(Deformation {
        disp: exponentiate_disp(&v.neg(), steps)?,
        direction: Direction::Inverse,
    })
}

/// Displacement of the deformation whose warp equals warping by `inner`
/// then by `outer`: `u_outer + u_inner o (id + u_outer)`.
pub fn compose<T: Float>(outer: &Deformation<T>, inner: &Deformation<T>) -> Result<Deformation<T>> {
    if outer.disp.shape() != inner.disp.shape() {
        return Err(Error::Dimension(format!(
            "composing {:?} with {:?}; resample first",
            outer.disp.shape(),
            inner.disp.shape()
        )));
    }
    Ok(Deformation {
        disp: outer.disp.add(&inner.disp.warp_bilinear(&outer.disp)),
        direction: outer.direction,
    })
}

/// Bilinear upsampling of a displacement field to `(h, w)`, rescaling each
/// component by the resolution ratio along its axis.
pub fn upsample_deformation<T: Float>(d: &Deformation<T>, h: usize, w: usize) -> Result<Deformation<T>> {
    let (sh, sw) = d.resolution();
    if h < sh || w < sw {
        return Err(Error::Unsupported(format!(
            "downsampling a deformation from {sh}x{sw} to {h}x{w}"
        )));
    }
    if (h, w) == (sh, sw) {
        return Ok(d.clone());
    }
    let ratio = Tensor::from_f64(&[w as f64 / sw as f64, h as f64 / sh as f64], &[1, 2, 1, 1]);
    Ok(Deformation {
        disp: d.disp.resize_bilinear(h, w).mul(&ratio),
        direction: d.direction,
    })
}

/// Folds per-scale forward deformations (coarse first) into
/// `phi^{l_1} o ... o phi^{l_J}` at resolution `(h, w)`.
pub fn compose_forward<T: Float>(parts: &[Deformation<T>], h: usize, w: usize) -> Result<Deformation<T>> {
    let mut acc: Option<Deformation<T>> = None;
    for p in parts {
        let p = upsample_deformation(p, h, w)?;
        acc = Some(match acc {
            None => p,
            Some(a) => compose(&p, &a)?,
        });
    }
    acc.ok_or_else(|| Error::Config("empty deformation stack".into()))
}

/// Folds per-scale inverse deformations (coarse first) into
/// `(phi^{l_J})^-1 o ... o (phi^{l_1})^-1` at resolution `(h, w)`.
pub fn compose_inverse<T: Float>(parts: &[Deformation<T>], h: usize, w: usize) -> Result<Deformation<T>> {
    let mut acc: Option<Deformation<T>> = None;
    for p in parts.iter().rev() {
        let p = upsample_deformation(p, h, w)?;
        acc = Some(match acc {
            None => p,
            Some(a) => compose(&p, &a)?,
        });
    }
    let mut d = acc.ok_or_else(|| Error::Config("empty deformation stack".into()))?;
    d.direction = Direction::Inverse;
    Ok(d)
}

/// Per-pixel node degree of the 4-neighbourhood grid graph, `[1, 1, h, w]`.
fn grid_degree<T: Float>(h: usize, w: usize) -> Tensor<T> {
    let mut deg = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let d = (i > 0) as u8 + (i + 1 < h) as u8 + (j > 0) as u8 + (j + 1 < w) as u8;
            deg.push(T::c(d as f64));
        }
    }
    Tensor::new(deg, &[1, 1, h, w])
}

/// `KL(N(mean, diag var) || N(0, Lambda^-1))` with
/// `Lambda = lambda_mag I + lambda_smooth L` (`L` the grid Laplacian),
/// summed over the batch, constants dropped:
///
/// `0.5 [lambda_smooth sum_edges |mu_i - mu_j|^2 + lambda_mag sum |mu|^2
///       + sum Lambda_ii var - sum log var]`.
pub fn velocity_kl<T: Float>(v: &VelocityField<T>, lambda_smooth: f64, lambda_mag: f64) -> Result<Tensor<T>> {
    if lambda_smooth <= 0.0 || lambda_mag <= 0.0 {
        return Err(Error::Config(format!(
            "velocity prior weights must be positive, got smooth {lambda_smooth}, magnitude {lambda_mag}"
        )));
    }
    check_disp(&v.mean)?;
    if v.mean.shape() != v.var.shape() {
        return Err(Error::Dimension("velocity mean and variance shapes differ".into()));
    }
    let (h, w) = (v.mean.dim(2), v.mean.dim(3));
    let mu = &v.mean;
    let mut edges = mu.sqr().sum_all().mul_scalar(0.0);
    if w > 1 {
        let dx = mu.narrow(3, 1, w - 1).sub(&mu.narrow(3, 0, w - 1));
        edges = edges.add(&dx.sqr().sum_all());
    }
    if h > 1 {
        let dy = mu.narrow(2, 1, h - 1).sub(&mu.narrow(2, 0, h - 1));
        edges = edges.add(&dy.sqr().sum_all());
    }
    let diag = grid_degree::<T>(h, w).mul_scalar(lambda_smooth).add_scalar(lambda_mag);
    let trace = v.var.mul(&diag).sum_all();
    let logdet = v.var.ln().sum_all();
    Ok(edges
        .mul_scalar(lambda_smooth)
        .add(&mu.sqr().sum_all().mul_scalar(lambda_mag))
        .add(&trace)
        .sub(&logdet)
        .mul_scalar(0.5))
}

/// Diagonal of the prior precision, `lambda_mag + lambda_smooth deg(i)`,
/// as a `[1, 1, h, w]` map.
pub fn prior_precision_diag<T: Float>(h: usize, w: usize, lambda_smooth: f64, lambda_mag: f64) -> Tensor<T> {
    grid_degree::<T>(h, w).mul_scalar(lambda_smooth).add_scalar(lambda_mag)
}

/// Jacobian determinant of `x -> x + u(x)` by central differences on the
/// interior (border `margin` pixels skipped). Returns one value per
/// interior pixel of the first batch element.
pub fn jacobian_determinants<T: Float>(disp: &Tensor<T>, margin: usize) -> Vec<f64> {
    let (h, w) = (disp.dim(2), disp.dim(3));
    let d = disp.data();
    let ux = |i: usize, j: usize| d[i * w + j].f64();
    let uy = |i: usize, j: usize| d[h * w + i * w + j].f64();
    let m = margin.max(1);
    let mut out = Vec::new();
    for i in m..h.saturating_sub(m) {
        for j in m..w.saturating_sub(m) {
            let dux_dx = (ux(i, j + 1) - ux(i, j - 1)) / 2.0;
            let dux_dy = (ux(i + 1, j) - ux(i - 1, j)) / 2.0;
            let duy_dx = (uy(i, j + 1) - uy(i, j - 1)) / 2.0;
            let duy_dy = (uy(i + 1, j) - uy(i - 1, j)) / 2.0;
            out.push((1.0 + dux_dx) * (1.0 + duy_dy) - dux_dy * duy_dx);
        }
    }
    out
}
