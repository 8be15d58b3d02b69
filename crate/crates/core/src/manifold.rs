//! Basis bank, log-linear mixture posterior and the surrogate template KL.

use anatomix_tensor::{Float, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::simplex::CompositionWeights;
use crate::{Error, Result};

/// Floor added after the softplus of every variance head.
pub const VAR_FLOOR: f64 = 1e-6;

/// Raw scale that maps to variance 1 through `softplus(x) + VAR_FLOOR`.
pub fn unit_variance_raw() -> f64 {
    ((1.0 - VAR_FLOOR).exp() - 1.0).ln()
}

/// `softplus(raw) + VAR_FLOOR`.
pub fn positive_variance<T: Float>(raw: &Tensor<T>) -> Tensor<T> {
    raw.softplus().add_scalar(VAR_FLOOR)
}

/// Diagonal Gaussian over a feature map (or a batch of them).
#[derive(Clone, Debug)]
pub struct DiagonalGaussian<T: Float> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Float> DiagonalGaussian<T> {
    pub fn new(mean: Tensor<T>, var: Tensor<T>) -> Result<Self> {
        if mean.shape() != var.shape() {
            return Err(Error::Dimension(format!(
                "mean {:?} and variance {:?} differ in shape",
                mean.shape(),
                var.shape()
            )));
        }
        if var.data().iter().any(|v| !(*v > T::zero()) || !v.is_finite()) {
            return Err(Error::Numeric("variance must be finite and positive".into()));
        }
        Ok(Self { mean, var })
    }

    pub fn shape(&self) -> &[usize] {
        self.mean.shape()
    }
}

/// `M` learnable diagonal Gaussians per scale, shared by all images.
///
/// Scale `l` stores a raw mean and a raw scale of shape `[M, C, H, W]`; the
/// variance is `softplus(raw_scale) + VAR_FLOOR`.
#[derive(Clone, Debug)]
pub struct BasisBank<T: Float> {
    m: usize,
    shapes: Vec<[usize; 3]>,
    pub raw_mean: Vec<Tensor<T>>,
    pub raw_scale: Vec<Tensor<T>>,
}

impl<T: Float> BasisBank<T> {
    /// Means from `N(0, 0.1^2)`, variances 1.
    pub fn init<R: Rng>(m: usize, shapes: &[[usize; 3]], rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, 0.1).expect("valid normal");
        let raw = unit_variance_raw();
        let mut means = Vec::with_capacity(shapes.len());
        let mut scales = Vec::with_capacity(shapes.len());
        for s in shapes {
            let n = m * s.iter().product::<usize>();
            let shape = [m, s[0], s[1], s[2]];
            means.push(Tensor::param(
                (0..n).map(|_| T::c(normal.sample(rng))).collect(),
                &shape,
            ));
            scales.push(Tensor::param(vec![T::c(raw); n], &shape));
        }
        Self::from_raw(means, scales)
    }

    /// Builds a bank from raw parameter tensors of shape `[M, C, H, W]`.
    pub fn from_raw(raw_mean: Vec<Tensor<T>>, raw_scale: Vec<Tensor<T>>) -> Result<Self> {
        if raw_mean.is_empty() || raw_mean.len() != raw_scale.len() {
            return Err(Error::Dimension(format!(
                "{} mean and {} scale tensors",
                raw_mean.len(),
                raw_scale.len()
            )));
        }
        let m = raw_mean[0].dim(0);
        if m < 2 {
            return Err(Error::Dimension(format!("basis bank needs M >= 2, got {m}")));
        }
        let mut shapes = Vec::new();
        for (a, b) in raw_mean.iter().zip(&raw_scale) {
            if a.rank() != 4 || a.shape() != b.shape() || a.dim(0) != m {
                return Err(Error::Dimension(format!(
                    "basis tensors must be [M, C, H, W] with M = {m}; got {:?} and {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            shapes.push([a.dim(1), a.dim(2), a.dim(3)]);
        }
        Ok(Self {
            m,
            shapes,
            raw_mean,
            raw_scale,
        })
    }

    /// Bank with explicit means and variances; used by oracles and tests.
    pub fn from_moments(means: Vec<Tensor<T>>, vars: Vec<Tensor<T>>) -> Result<Self> {
        let raw_scale = vars
            .iter()
            .map(|v| {
                let raw: Vec<T> = v
                    .data()
                    .iter()
                    .map(|&s| {
                        let t = s.f64() - VAR_FLOOR;
                        // Inverse softplus, stable for large t.
                        T::c(if t > 30.0 { t } else { t.exp_m1().ln() })
                    })
                    .collect();
                Tensor::new(raw, v.shape())
            })
            .collect();
        Self::from_raw(means, raw_scale)
    }

    pub fn num_bases(&self) -> usize {
        self.m
    }

    pub fn num_levels(&self) -> usize {
        self.shapes.len()
    }

    /// `[C, H, W]` of scale `level`.
    pub fn level_shape(&self, level: usize) -> [usize; 3] {
        self.shapes[level]
    }

    fn check_level(&self, level: usize) -> Result<()> {
        if level >= self.shapes.len() {
            return Err(Error::Dimension(format!(
                "level {level} out of range for {} levels",
                self.shapes.len()
            )));
        }
        Ok(())
    }

    pub fn means(&self, level: usize) -> Tensor<T> {
        self.raw_mean[level].clone()
    }

    pub fn vars(&self, level: usize) -> Tensor<T> {
        positive_variance(&self.raw_scale[level])
    }

    /// Basis `m` at scale `level`, shape `[C, H, W]`.
    pub fn basis(&self, level: usize, m: usize) -> DiagonalGaussian<T> {
        let [c, h, w] = self.shapes[level];
        DiagonalGaussian {
            mean: self.means(level).narrow(0, m, 1).reshape(&[c, h, w]),
            var: self.vars(level).narrow(0, m, 1).reshape(&[c, h, w]),
        }
    }

    pub fn parameters(&self) -> Vec<Tensor<T>> {
        self.raw_mean.iter().chain(&self.raw_scale).cloned().collect()
    }
}

fn check_finite<T: Float>(t: &Tensor<T>, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite {what}")))
    }
}

/// Precision-weighted fusion of the bases at `level` for a batch of weights
/// `w` of shape `[B, M]` (a differentiable tensor, typically a softmax).
///
/// Returns a batched Gaussian of shape `[B, C, H, W]` with
/// `var = 1 / sum_m w_m / var_m` and `mean = var * sum_m w_m mean_m / var_m`.
pub fn mix_posterior_batch<T: Float>(bank: &BasisBank<T>, w: &Tensor<T>, level: usize) -> Result<DiagonalGaussian<T>> {
    bank.check_level(level)?;
    let m = bank.num_bases();
    if w.rank() != 2 || w.dim(1) != m {
        return Err(Error::Dimension(format!("weights {:?} do not match M = {m}", w.shape())));
    }
    let [c, h, wd] = bank.level_shape(level);
    let n = c * h * wd;
    let mean = bank.means(level).reshape(&[m, n]);
    let var = bank.vars(level).reshape(&[m, n]);
    check_finite(&mean, "basis mean")?;
    check_finite(&var, "basis variance")?;
    let prec = var.recip();
    let fused_prec = w.matmul(&prec);
    let fused_var = fused_prec.recip();
    let fused_mean = fused_var.mul(&w.matmul(&prec.mul(&mean)));
    let b = w.dim(0);
    Ok(DiagonalGaussian {
        mean: fused_mean.reshape(&[b, c, h, wd]),
        var: fused_var.reshape(&[b, c, h, wd]),
    })
}

/// Fused posterior for a single composition vector, shape `[C, H, W]`.
pub fn mix_posterior<T: Float>(bank: &BasisBank<T>, w: &CompositionWeights, level: usize) -> Result<DiagonalGaussian<T>> {
    if w.len() != bank.num_bases() {
        return Err(Error::Dimension(format!(
            "{} weights for {} bases",
            w.len(),
            bank.num_bases()
        )));
    }
    let wt = Tensor::from_f64(w.as_slice(), &[1, w.len()]);
    let g = mix_posterior_batch(bank, &wt, level)?;
    let [c, h, wd] = bank.level_shape(level);
    Ok(DiagonalGaussian {
        mean: g.mean.reshape(&[c, h, wd]),
        var: g.var.reshape(&[c, h, wd]),
    })
}

/// Uniform-weight fusion of the bases at `level`.
pub fn mix_prior<T: Float>(bank: &BasisBank<T>, level: usize) -> Result<DiagonalGaussian<T>> {
    mix_posterior(bank, &CompositionWeights::uniform(bank.num_bases())?, level)
}

/// Elementwise `KL(q || p)` for diagonal Gaussians given as tensors; `p` may
/// broadcast against `q`. Not reduced.
pub fn kl_diag_elementwise<T: Float>(
    q_mean: &Tensor<T>,
    q_var: &Tensor<T>,
    p_mean: &Tensor<T>,
    p_var: &Tensor<T>,
) -> Tensor<T> {
    let diff = q_mean.sub(p_mean);
    p_var
        .ln()
        .sub(&q_var.ln())
        .add(&q_var.add(&diff.sqr()).div(p_var))
        .add_scalar(-1.0)
        .mul_scalar(0.5)
}

/// Closed-form `KL(q || p)` summed over all elements.
pub fn kl_diag_gaussian<T: Float>(q: &DiagonalGaussian<T>, p: &DiagonalGaussian<T>) -> Result<Tensor<T>> {
    if q.shape() != p.shape() {
        return Err(Error::Dimension(format!(
            "KL between shapes {:?} and {:?}",
            q.shape(),
            p.shape()
        )));
    }
    Ok(kl_diag_elementwise(&q.mean, &q.var, &p.mean, &p.var).sum_all())
}

/// How the per-scale KL sums are reduced in [`surrogate_template_loss`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateReduction {
    /// `sum_l (1/M) sum_m KL(q_m || p)`.
    Sum,
    /// As `Sum`, with each scale divided by its element count `C H W`.
    PerElement,
}

/// Average KL of every basis to the uniform-mixture prior, summed over scales.
pub fn surrogate_template_loss<T: Float>(bank: &BasisBank<T>, reduction: TemplateReduction) -> Result<Tensor<T>> {
    let m = bank.num_bases();
    let uniform = Tensor::full(T::c(1.0 / m as f64), &[1, m]);
    let mut total: Option<Tensor<T>> = None;
    for level in 0..bank.num_levels() {
        let [c, h, w] = bank.level_shape(level);
        let n = c * h * w;
        let prior = mix_posterior_batch(bank, &uniform, level)?;
        let kl = kl_diag_elementwise(
            &bank.means(level).reshape(&[m, n]),
            &bank.vars(level).reshape(&[m, n]),
            &prior.mean.reshape(&[1, n]),
            &prior.var.reshape(&[1, n]),
        )
        .sum_all();
        let denom = match reduction {
            TemplateReduction::Sum => m as f64,
            TemplateReduction::PerElement => (m * n) as f64,
        };
        let term = kl.mul_scalar(1.0 / denom);
        total = Some(match total {
            Some(t) => t.add(&term),
            None => term,
        });
    }
    Ok(total.expect("bank has at least one level"))
}

/// Whether a template was drawn from the posterior or is its mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Sampled,
    Expectation,
}

/// Multi-scale latent maps, coarsest first.
#[derive(Clone, Debug)]
pub struct AnatomyTemplate<T: Float> {
    pub z: Vec<Tensor<T>>,
    pub provenance: Provenance,
}

/// Reparameterized draw `mean + sqrt(var) * eps` per scale, or the means.
pub fn sample_template<T: Float, R: Rng>(
    posteriors: &[DiagonalGaussian<T>],
    mode: Provenance,
    rng: &mut R,
) -> AnatomyTemplate<T> {
    let z = posteriors
        .iter()
        .map(|p| match mode {
            Provenance::Expectation => p.mean.clone(),
            Provenance::Sampled => {
                let eps = standard_normal(p.mean.shape(), rng);
                p.mean.add(&p.var.sqrt().mul(&eps))
            }
        })
        .collect();
    AnatomyTemplate { z, provenance: mode }
}

/// Constant tensor of independent standard normal draws.
pub fn standard_normal<T: Float, R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let n = anatomix_tensor::numel(shape);
    Tensor::new(
        (0..n)
            .map(|_| T::c(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)))
            .collect(),
        shape,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bank_1d(means: &[f64], vars: &[f64]) -> BasisBank<f64> {
        let m = means.len();
        BasisBank::from_moments(
            vec![Tensor::new(means.to_vec(), &[m, 1, 1, 1])],
            vec![Tensor::new(vars.to_vec(), &[m, 1, 1, 1])],
        )
        .unwrap()
    }

    fn cw(v: &[f64]) -> CompositionWeights {
        CompositionWeights::new(v.to_vec()).unwrap()
    }

    #[test]
    fn unit_variance_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bank = BasisBank::<f64>::init(3, &[[2, 2, 2]], &mut rng).unwrap();
        for v in bank.vars(0).data() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_selects_a_basis() {
        let bank = bank_1d(&[0.3, -1.0, 2.0], &[0.5, 2.0, 1.5]);
        let g = mix_posterior(&bank, &cw(&[0.0, 1.0, 0.0]), 0).unwrap();
        assert!((g.mean.data()[0] + 1.0).abs() < 1e-12);
        assert!((g.var.data()[0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn equal_variance_average() {
        let bank = bank_1d(&[1.0, 3.0], &[0.7, 0.7]);
        let g = mix_posterior(&bank, &cw(&[0.5, 0.5]), 0).unwrap();
        assert!((g.mean.data()[0] - 2.0).abs() < 1e-12);
        assert!((g.var.data()[0] - 0.7).abs() < 1e-9);
    }

    #[test]
    fn prior_is_uniform_posterior_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bank = BasisBank::<f64>::init(4, &[[2, 3, 3]], &mut rng).unwrap();
        let p = mix_prior(&bank, 0).unwrap();
        let q = mix_posterior(&bank, &CompositionWeights::uniform(4).unwrap(), 0).unwrap();
        assert_eq!(p.mean.data(), q.mean.data());
        assert_eq!(p.var.data(), q.var.data());
    }

    #[test]
    fn kl_analytic() {
        let q = DiagonalGaussian::new(Tensor::new(vec![0.0], &[1]), Tensor::new(vec![1.0], &[1])).unwrap();
        let p = DiagonalGaussian::new(Tensor::new(vec![1.0], &[1]), Tensor::new(vec![1.0], &[1])).unwrap();
        assert!((kl_diag_gaussian(&q, &p).unwrap().item() - 0.5f64).abs() < 1e-15);
        assert_eq!(kl_diag_gaussian(&q, &q).unwrap().item(), 0.0);
        let bad = DiagonalGaussian::new(Tensor::new(vec![0.0; 2], &[2]), Tensor::new(vec![1.0; 2], &[2])).unwrap();
        assert!(matches!(kl_diag_gaussian(&q, &bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn surrogate_hand_value() {
        let bank = bank_1d(&[0.0, 2.0], &[1.0, 1.0]);
        let l = surrogate_template_loss(&bank, TemplateReduction::Sum).unwrap().item();
        assert!((l - 0.5).abs() < 1e-9, "{l}");
        let same = bank_1d(&[0.4, 0.4], &[2.0, 2.0]);
        assert!(surrogate_template_loss(&same, TemplateReduction::Sum).unwrap().item().abs() < 1e-12);
    }

    #[test]
    fn expectation_template_is_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let post = vec![DiagonalGaussian::new(Tensor::new(vec![1.5, -0.5], &[2]), Tensor::new(vec![1e-12, 1e-12], &[2])).unwrap()];
        let t = sample_template(&post, Provenance::Expectation, &mut rng);
        assert_eq!(t.z[0].data(), &[1.5, -0.5]);
        let s = sample_template(&post, Provenance::Sampled, &mut rng);
        assert!((s.z[0].data()[0] - 1.5f64).abs() < 1e-4);
    }

    fn bank_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        (
            proptest::collection::vec(-2.0f64..2.0, 4 * 3),
            proptest::collection::vec(0.05f64..3.0, 4 * 3),
            proptest::collection::vec(0.01f64..1.0, 4),
        )
    }

    proptest! {
        #[test]
        fn fused_variance_is_bounded_and_permutation_equivariant((mu, var, w) in bank_strategy()) {
            let s: f64 = w.iter().sum();
            let w: Vec<f64> = w.iter().map(|v| v / s).collect();
            let bank = BasisBank::from_moments(
                vec![Tensor::new(mu.clone(), &[4, 3, 1, 1])],
                vec![Tensor::new(var.clone(), &[4, 3, 1, 1])],
            ).unwrap();
            let g = mix_posterior(&bank, &cw(&w), 0).unwrap();
            let vars = bank.vars(0).to_vec();
            for e in 0..3 {
                let col: Vec<f64> = (0..4).map(|m| vars[m * 3 + e]).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(0.0, f64::max);
                prop_assert!(g.var.data()[e] >= lo * (1.0 - 1e-9) && g.var.data()[e] <= hi * (1.0 + 1e-9));
            }
            // Reverse the basis order and the weights together.
            let perm = [3usize, 2, 1, 0];
            let pm: Vec<f64> = perm.iter().flat_map(|&m| mu[m * 3..m * 3 + 3].to_vec()).collect();
            let pv: Vec<f64> = perm.iter().flat_map(|&m| var[m * 3..m * 3 + 3].to_vec()).collect();
            let pw: Vec<f64> = perm.iter().map(|&m| w[m]).collect();
            let pbank = BasisBank::from_moments(
                vec![Tensor::new(pm, &[4, 3, 1, 1])],
                vec![Tensor::new(pv, &[4, 3, 1, 1])],
            ).unwrap();
            let pg = mix_posterior(&pbank, &cw(&pw), 0).unwrap();
            for e in 0..3 {
                prop_assert!((pg.mean.data()[e] - g.mean.data()[e]).abs() < 1e-9);
                prop_assert!((pg.var.data()[e] - g.var.data()[e]).abs() < 1e-9);
            }
        }

        #[test]
        fn posterior_mean_is_lipschitz_in_w((mu, var, w) in bank_strategy(), j in 0usize..4) {
            let s: f64 = w.iter().sum();
            let w: Vec<f64> = w.iter().map(|v| v / s).collect();
            let bank = BasisBank::from_moments(
                vec![Tensor::new(mu.clone(), &[4, 3, 1, 1])],
                vec![Tensor::new(var, &[4, 3, 1, 1])],
            ).unwrap();
            // Move mass delta from the largest entry to entry j.
            let delta = 1e-4;
            let k = (0..4).max_by(|&a, &b| w[a].total_cmp(&w[b])).unwrap();
            let mut w2 = w.clone();
            w2[k] -= delta;
            w2[j] += delta;
            let a = mix_posterior(&bank, &cw(&w), 0).unwrap();
            let b = mix_posterior(&bank, &cw(&w2), 0).unwrap();
            // Slope bound: |d mean| <= (max var / min var) * range(mu) * |dw|_1 / min_w-mass.
            let spread = mu.iter().cloned().fold(f64::MIN, f64::max) - mu.iter().cloned().fold(f64::MAX, f64::min);
            let ratio = 3.0 / 0.05;
            let bound = ratio * spread * 2.0 * delta;
            for e in 0..3 {
                prop_assert!((a.mean.data()[e] - b.mean.data()[e]).abs() <= bound + 1e-12);
            }
        }

        #[test]
        fn template_loss_vanishes_only_for_coincident_bases(
            mu in proptest::collection::vec(-1.0f64..1.0, 3),
            var in proptest::collection::vec(0.2f64..2.0, 3),
            shift in 0.05f64..1.0,
        ) {
            let same = BasisBank::from_moments(
                vec![Tensor::new([mu.clone(), mu.clone()].concat(), &[2, 3, 1, 1])],
                vec![Tensor::new([var.clone(), var.clone()].concat(), &[2, 3, 1, 1])],
            ).unwrap();
            prop_assert!(surrogate_template_loss(&same, TemplateReduction::Sum).unwrap().item() < 1e-9);
            let mut mu2 = mu.clone();
            mu2[0] += shift;
            let diff = BasisBank::from_moments(
                vec![Tensor::new([mu, mu2].concat(), &[2, 3, 1, 1])],
                vec![Tensor::new([var.clone(), var].concat(), &[2, 3, 1, 1])],
            ).unwrap();
            prop_assert!(surrogate_template_loss(&diff, TemplateReduction::Sum).unwrap().item() > 1e-6);
        }
    }
}
