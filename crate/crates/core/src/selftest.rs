//! Analytic-oracle checks runnable from the command line.

use anatomix_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::deformation;
use crate::losses::{self, BatchTerms, LossWeights};
use crate::manifold::{self, BasisBank, DiagonalGaussian};
use crate::simplex::{fisher_rao_distance, geodesic_interpolate, CompositionWeights};
use crate::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

/// Runs every oracle and returns one entry per property.
pub fn run_all(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let suites: [(&'static str, fn(&mut ChaCha8Rng) -> Result<Check>); 5] = [
        ("mixture", mixture),
        ("kl", kl_monte_carlo),
        ("geodesic", geodesic),
        ("svf", svf),
        ("decomposition", decomposition),
    ];
    suites
        .iter()
        .map(|(name, f)| f(&mut rng).unwrap_or_else(|e| check(name, false, format!("error: {e}"))))
        .collect()
}

fn gauss_pdf(x: f64, m: f64, v: f64) -> f64 {
    (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
}

/// Fused 1-D posterior against the normalized product `prod q_m^{w_m}` on a
/// quadrature grid.
fn mixture(rng: &mut ChaCha8Rng) -> Result<Check> {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let m = rng.random_range(2..5);
        let means: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let vars: Vec<f64> = (0..m).map(|_| rng.random_range(0.3..2.0)).collect();
        let mut w: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        let bank = BasisBank::from_moments(
            vec![Tensor::<f64>::new(means.clone(), &[m, 1, 1, 1])],
            vec![Tensor::<f64>::new(vars.clone(), &[m, 1, 1, 1])],
        )?;
        let g = manifold::mix_posterior(&bank, &CompositionWeights::new(w.clone())?, 0)?;
        let (gm, gv) = (g.mean.item(), g.var.item());
        let n = 20001;
        let (lo, hi) = (-12.0, 12.0);
        let dx = (hi - lo) / (n - 1) as f64;
        let xs: Vec<f64> = (0..n).map(|i| lo + i as f64 * dx).collect();
        let dens: Vec<f64> = xs
            .iter()
            .map(|&x| (0..m).map(|k| gauss_pdf(x, means[k], bank.vars(0).data()[k]).powf(w[k])).product())
            .collect();
        let z: f64 = dens.iter().sum::<f64>() * dx;
        for (x, d) in xs.iter().zip(&dens) {
            worst = worst.max((d / z - gauss_pdf(*x, gm, gv)).abs());
        }
    }
    Ok(check("mixture", worst < 1e-6, format!("max density error {worst:.3e}")))
}

/// Closed-form KL against a Monte-Carlo estimate.
fn kl_monte_carlo(rng: &mut ChaCha8Rng) -> Result<Check> {
    let n = 100_000;
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let d = 3;
        let qm: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let qv: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..2.0)).collect();
        let pm: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pv: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..2.0)).collect();
        let t = |v: &[f64]| Tensor::<f64>::new(v.to_vec(), &[d]);
        let q = DiagonalGaussian::new(t(&qm), t(&qv))?;
        let p = DiagonalGaussian::new(t(&pm), t(&pv))?;
        let exact = manifold::kl_diag_gaussian(&q, &p)?.item();
        let normal = Normal::new(0.0, 1.0).expect("valid normal");
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let mut lr = 0.0;
            for k in 0..d {
                let x = qm[k] + qv[k].sqrt() * normal.sample(rng);
                lr += gauss_pdf(x, qm[k], qv[k]).ln() - gauss_pdf(x, pm[k], pv[k]).ln();
            }
            sum += lr;
            sq += lr * lr;
        }
        let mean = sum / n as f64;
        let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
        worst = worst.max((mean - exact).abs() / se);
    }
    Ok(check("kl", worst < 3.0, format!("worst deviation {worst:.2} standard errors")))
}

/// Fisher-Rao analytic cases and arc-length linearity.
fn geodesic(rng: &mut ChaCha8Rng) -> Result<Check> {
    let e0 = CompositionWeights::one_hot(3, 0)?;
    let e1 = CompositionWeights::one_hot(3, 1)?;
    let mut err = fisher_rao_distance(&e0, &e0)?.abs();
    err = err.max((fisher_rao_distance(&e0, &e1)? - std::f64::consts::PI).abs());
    let mut lin = 0.0f64;
    for _ in 0..50 {
        let mut draw = || {
            let v: Vec<f64> = (0..4).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = v.iter().sum();
            CompositionWeights::new(v.into_iter().map(|x| x / s).collect())
        };
        let (a, b) = (draw()?, draw()?);
        let total = fisher_rao_distance(&a, &b)?;
        for i in 0..=10 {
            let t = i as f64 / 10.0;
            let p = geodesic_interpolate(&a, &b, t)?;
            lin = lin.max((fisher_rao_distance(&a, &p)? - t * total).abs());
        }
    }
    Ok(check(
        "geodesic",
        err < 1e-9 && lin < 1e-5,
        format!("analytic error {err:.2e}, linearity error {lin:.2e}"),
    ))
}

/// Scaling and squaring: constant fields are exact translations and a
/// smooth field composed with its inverse is close to the identity.
fn svf(rng: &mut ChaCha8Rng) -> Result<Check> {
    let (h, w) = (32, 32);
    let mut v = vec![0.0f64; 2 * h * w];
    let (ax, ay) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
    for i in 0..h {
        for j in 0..w {
            let (x, y) = (j as f64 / w as f64, i as f64 / h as f64);
            v[i * w + j] = ax * (std::f64::consts::PI * y).sin();
            v[h * w + i * w + j] = ay * (std::f64::consts::PI * x).cos();
        }
    }
    let v = Tensor::<f64>::new(v, &[1, 2, h, w]);
    let fwd = deformation::exponentiate(&v, deformation::SQUARING_STEPS)?;
    let inv = deformation::invert(&v, deformation::SQUARING_STEPS)?;
    let id = deformation::compose(&fwd, &inv)?;
    let d = id.disp.data();
    let mut worst = 0.0f64;
    for i in 6..h - 6 {
        for j in 6..w - 6 {
            worst = worst.max(d[i * w + j].abs()).max(d[h * w + i * w + j].abs());
        }
    }
    let c = Tensor::<f64>::full(1.5, &[1, 2, h, w]);
    let t = deformation::exponentiate(&c, deformation::SQUARING_STEPS)?;
    let terr = t.disp.data().iter().map(|x| (x - 1.5).abs()).fold(0.0, f64::max);
    Ok(check(
        "svf",
        worst < 0.5 && terr < 1e-9,
        format!("inverse error {worst:.3e} px, translation error {terr:.2e} px"),
    ))
}

/// `SA(l) = 1/2 [SF1(2 l4, 2 l5) + SF2]` on random term values.
fn decomposition(rng: &mut ChaCha8Rng) -> Result<Check> {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mut s = || Tensor::<f64>::scalar(rng.random_range(-3.0..3.0));
        let src = BatchTerms {
            recon: s(),
            seg: Some(s()),
            vel: s(),
            usage: s(),
            structure: Some(s()),
        };
        let tgt = BatchTerms {
            recon: s(),
            seg: None,
            vel: s(),
            usage: s(),
            structure: None,
        };
        let tem = s();
        let lam: [f64; 5] = std::array::from_fn(|_| rng.random_range(0.0..10.0));
        let wt = LossWeights::new(lam, 0.05);
        let mut l2 = lam;
        l2[3] *= 2.0;
        l2[4] *= 2.0;
        let sa = losses::stage_loss_sa(&src, &tgt, &tem, &wt)?.loss.item();
        let sf1 = losses::stage_loss_sf1(&src, &tem, &LossWeights::new(l2, 0.05))?.loss.item();
        let sf2 = losses::stage_loss_sf2(&tgt, &wt).loss.item();
        worst = worst.max((sa - 0.5 * (sf1 + sf2)).abs() / sa.abs().max(1e-12));
    }
    Ok(check("decomposition", worst < 1e-6, format!("max relative error {worst:.2e}")))
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_oracles_pass() {
        for c in super::run_all(7) {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
