//! Likelihood terms, manifold-structuring losses and the stage objectives.
//!
//! Every loss is a positive quantity to be minimized. The evidence lower
//! bound of a batch is `L_LB = -(l1 seg + l2 recon + l3 vel)` where `seg`
//! and `recon` are negative log-likelihoods and `vel` is the velocity KL.

use std::f64::consts::PI;
use std::fmt;

use anatomix_tensor::{Float, Tensor};
use serde::{Deserialize, Serialize};

use crate::evaluation::mean_foreground_dice;
use crate::{Error, Result};

/// Smoothing constant of the soft Dice.
pub const DICE_SMOOTH: f64 = 1e-5;
/// Probabilities are floored here before the logarithm of the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-7;
/// Floor added to the Laplace scale.
pub const SCALE_FLOOR: f64 = 1e-3;

/// Weights `l1..l5` of the stage objectives and the usage threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: [f64; 5],
    pub tau: f64,
}

impl LossWeights {
    pub fn new(lambda: [f64; 5], tau: f64) -> Self {
        Self { lambda, tau }
    }

    /// Parses `"l1,l2,l3,l4,l5"`.
    pub fn parse_lambdas(s: &str) -> Result<[f64; 5]> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 5 {
            return Err(Error::Config(format!("expected 5 comma-separated weights, got `{s}`")));
        }
        let mut out = [0.0; 5];
        for (o, p) in out.iter_mut().zip(&parts) {
            *o = p
                .parse()
                .map_err(|_| Error::Config(format!("weight `{p}` is not a number")))?;
        }
        Ok(out)
    }

    /// Violations for `M` bases: negative weights, `tau` outside `(0, 1/M]`.
    pub fn violations(&self, m: usize) -> Vec<String> {
        let mut v = Vec::new();
        for (i, l) in self.lambda.iter().enumerate() {
            if !(l.is_finite() && *l >= 0.0) {
                v.push(format!("lambda{} = {l} must be finite and >= 0", i + 1));
            }
        }
        let max_tau = 1.0 / m as f64;
        if !(self.tau > 0.0 && self.tau <= max_tau + 1e-12) {
            v.push(format!("tau = {} must lie in (0, 1/M] = (0, {max_tau:.6}]", self.tau));
        }
        v
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        let v = self.violations(m);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: [1.0, 15.0, 65.0, 0.5, 1.0],
            tau: 0.05,
        }
    }
}

/// Laplace negative log-likelihood `|x - mu| / b + log(2 b)`, averaged over
/// all elements.
pub fn recon_nll<T: Float>(x: &Tensor<T>, mu: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != mu.shape() || x.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "image {:?}, location {:?}, scale {:?}",
            x.shape(),
            mu.shape(),
            b.shape()
        )));
    }
    if b.data().iter().any(|v| !(*v > T::zero())) {
        return Err(Error::Numeric("Laplace scale must be positive".into()));
    }
    Ok(x.sub(mu).abs().div(b).add(&b.mul_scalar(2.0).ln()).mean_all())
}

/// One-hot encoding `[B, K+1, H, W]` of labels laid out `[B, H, W]`.
pub fn one_hot<T: Float>(labels: &[u8], batch: usize, classes: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let hw = h * w;
    if labels.len() != batch * hw {
        return Err(Error::Dimension(format!(
            "{} labels for a {batch}x{h}x{w} batch",
            labels.len()
        )));
    }
    let mut out = vec![T::zero(); batch * classes * hw];
    for n in 0..batch {
        for (k, &y) in labels[n * hw..(n + 1) * hw].iter().enumerate() {
            let y = y as usize;
            if y >= classes {
                return Err(Error::Data(format!("label {y} outside 0..{}", classes - 1)));
            }
            out[(n * classes + y) * hw + k] = T::one();
        }
    }
    Ok(Tensor::new(out, &[batch, classes, h, w]))
}

/// Cross-entropy plus `1 - soft Dice` averaged over foreground classes and
/// samples. `probs` is `[B, K+1, H, W]`, `labels` is `[B, H, W]`.
pub fn seg_loss<T: Float>(probs: &Tensor<T>, labels: &[u8]) -> Result<Tensor<T>> {
    if probs.rank() != 4 || probs.dim(1) < 2 {
        return Err(Error::Dimension(format!("probabilities must be [B, K+1, H, W], got {:?}", probs.shape())));
    }
    let (b, k1, h, w) = (probs.dim(0), probs.dim(1), probs.dim(2), probs.dim(3));
    let y = one_hot::<T>(labels, b, k1, h, w)?;
    let ce = y
        .mul(&probs.clamp_min(PROB_FLOOR).ln())
        .sum_all()
        .mul_scalar(-1.0 / (b * h * w) as f64);
    let pf = probs.narrow(1, 1, k1 - 1);
    let yf = y.narrow(1, 1, k1 - 1);
    let inter = pf.mul(&yf).sum_keepdim(&[2, 3]);
    let denom = pf.sum_keepdim(&[2, 3]).add(&yf.sum_keepdim(&[2, 3])).add_scalar(DICE_SMOOTH);
    let dice = inter.mul_scalar(2.0).add_scalar(DICE_SMOOTH).div(&denom).mean_all();
    Ok(ce.add(&dice.neg().add_scalar(1.0)))
}

/// `sum_m max(0, tau - mean_i w_m(x_i))` for weights `[B, M]`.
pub fn usage_loss<T: Float>(w: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    if w.rank() != 2 || w.dim(0) == 0 {
        return Err(Error::Dimension(format!("weights must be [B >= 1, M], got {:?}", w.shape())));
    }
    Ok(w.mean_keepdim(&[0]).neg().add_scalar(tau).relu().sum_all())
}

/// Pairwise Fisher-Rao similarities `1 - FR(w_i, w_j) / pi` as a `[B, B]`
/// tensor, differentiable in `w`. The Bhattacharyya coefficient is kept one
/// machine epsilon inside `(-1, 1)`, where `acos` has a finite derivative.
pub fn fr_similarity_matrix<T: Float>(w: &Tensor<T>) -> Tensor<T> {
    let s = w.sqrt();
    let margin = T::epsilon().f64();
    s.matmul(&s.transpose())
        .clamp(-1.0 + margin, 1.0 - margin)
        .acos()
        .mul_scalar(-2.0 / PI)
        .add_scalar(1.0)
}

/// `sum_{i<j} (Sim_ij - C_ij)^2` where `Sim` is the mean foreground Dice of
/// the warped ground truths (a constant) and `C` the Fisher-Rao similarity of
/// the weights `[B, M]`. `warped_labels` holds `B` label maps of equal size.
pub fn struct_loss<T: Float>(w: &Tensor<T>, warped_labels: &[&[u8]], classes: usize) -> Result<Tensor<T>> {
    let b = warped_labels.len();
    if w.rank() != 2 || w.dim(0) != b {
        return Err(Error::Dimension(format!("{b} label maps for weights {:?}", w.shape())));
    }
    if b < 2 {
        log::warn!("structural loss needs at least two labelled samples; returning 0");
        return Ok(w.sum_all().mul_scalar(0.0));
    }
    let mut sim = vec![T::zero(); b * b];
    let mut mask = vec![T::zero(); b * b];
    for i in 0..b {
        for j in i + 1..b {
            sim[i * b + j] = T::c(mean_foreground_dice(warped_labels[i], warped_labels[j], classes));
            mask[i * b + j] = T::one();
        }
    }
    let sim = Tensor::new(sim, &[b, b]);
    let mask = Tensor::new(mask, &[b, b]);
    Ok(sim.sub(&fr_similarity_matrix(w)).sqr().mul(&mask).sum_all())
}

/// Per-batch terms feeding the evidence lower bound. `seg` and `structure`
/// are present for labelled batches only.
#[derive(Clone, Debug)]
pub struct BatchTerms<T: Float> {
    pub recon: Tensor<T>,
    pub seg: Option<Tensor<T>>,
    pub vel: Tensor<T>,
    pub usage: Tensor<T>,
    pub structure: Option<Tensor<T>>,
}

fn scaled<T: Float>(t: &Tensor<T>, c: f64) -> Tensor<T> {
    t.mul_scalar(c)
}

/// `l1 L_seg + l2 L_recon - l3 L_vel` with the likelihood terms as negated
/// losses.
pub fn elbo_source<T: Float>(terms: &BatchTerms<T>, weights: &LossWeights) -> Result<Tensor<T>> {
    let seg = terms
        .seg
        .as_ref()
        .ok_or_else(|| Error::Data("source batch without segmentation term".into()))?;
    let [l1, ..] = weights.lambda;
    Ok(elbo_target(terms, weights).sub(&scaled(seg, l1)))
}

/// `l2 L_recon - l3 L_vel`.
pub fn elbo_target<T: Float>(terms: &BatchTerms<T>, weights: &LossWeights) -> Tensor<T> {
    let [_, l2, l3, ..] = weights.lambda;
    scaled(&terms.recon, -l2).sub(&scaled(&terms.vel, l3))
}

/// Which objective a [`LossReport`] belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Sa,
    Sf1,
    Sf2,
    Baseline,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Sa => "sa",
            Stage::Sf1 => "sf1",
            Stage::Sf2 => "sf2",
            Stage::Baseline => "baseline",
        })
    }
}

/// Scalar values of every term of one step, plus the stage total.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub stage: Stage,
    pub weights: LossWeights,
    pub recon_s: f64,
    pub recon_t: f64,
    pub seg: f64,
    pub vel_s: f64,
    pub vel_t: f64,
    pub tem: f64,
    pub usage_s: f64,
    pub usage_t: f64,
    pub structure: f64,
    pub total: f64,
    pub batch_ids: Vec<String>,
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] total={:.6} recon_s={:.6} recon_t={:.6} seg={:.6} vel_s={:.6} vel_t={:.6} tem={:.6} usage_s={:.6} usage_t={:.6} struct={:.6}",
            self.stage,
            self.total,
            self.recon_s,
            self.recon_t,
            self.seg,
            self.vel_s,
            self.vel_t,
            self.tem,
            self.usage_s,
            self.usage_t,
            self.structure
        )
    }
}

impl LossReport {
    fn empty(stage: Stage, weights: LossWeights) -> Self {
        Self {
            stage,
            weights,
            recon_s: 0.0,
            recon_t: 0.0,
            seg: 0.0,
            vel_s: 0.0,
            vel_t: 0.0,
            tem: 0.0,
            usage_s: 0.0,
            usage_t: 0.0,
            structure: 0.0,
            total: 0.0,
            batch_ids: Vec::new(),
        }
    }

    /// Re-evaluates the stage formula from the stored parts.
    pub fn recompute_total(&self) -> f64 {
        let [l1, l2, l3, l4, l5] = self.weights.lambda;
        let nlb_s = l1 * self.seg + l2 * self.recon_s + l3 * self.vel_s;
        let nlb_t = l2 * self.recon_t + l3 * self.vel_t;
        match self.stage {
            Stage::Sa => 0.5 * (nlb_s + nlb_t) + l4 * self.tem + l5 * self.structure + 0.5 * (self.usage_s + self.usage_t),
            Stage::Sf1 => nlb_s + l4 * self.tem + l5 * self.structure + self.usage_s,
            Stage::Sf2 => nlb_t + self.usage_t,
            Stage::Baseline => self.seg,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.recon_s,
            self.recon_t,
            self.seg,
            self.vel_s,
            self.vel_t,
            self.tem,
            self.usage_s,
            self.usage_t,
            self.structure,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub const CSV_HEADER: &'static str = "step,stage,total,recon_s,recon_t,seg,vel_s,vel_t,tem,usage_s,usage_t,struct";

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.stage,
            self.total,
            self.recon_s,
            self.recon_t,
            self.seg,
            self.vel_s,
            self.vel_t,
            self.tem,
            self.usage_s,
            self.usage_t,
            self.structure
        )
    }
}

fn val<T: Float>(t: &Tensor<T>) -> f64 {
    t.item().f64()
}

/// Differentiable objective together with its report.
pub struct StageLoss<T: Float> {
    pub loss: Tensor<T>,
    pub report: LossReport,
}

fn structure_term<T: Float>(src: &BatchTerms<T>) -> Result<&Tensor<T>> {
    src.structure
        .as_ref()
        .ok_or_else(|| Error::Data("source batch without structural term".into()))
}

/// `-1/2 [L_LB(Bs) + L_LB(Bt)] + l4 tem + l5 struct(Bs) + 1/2 [usage(Bs) + usage(Bt)]`.
pub fn stage_loss_sa<T: Float>(
    src: &BatchTerms<T>,
    tgt: &BatchTerms<T>,
    tem: &Tensor<T>,
    weights: &LossWeights,
) -> Result<StageLoss<T>> {
    let [_, _, _, l4, l5] = weights.lambda;
    let st = structure_term(src)?;
    let loss = elbo_source(src, weights)?
        .add(&elbo_target(tgt, weights))
        .mul_scalar(-0.5)
        .add(&scaled(tem, l4))
        .add(&scaled(st, l5))
        .add(&src.usage.add(&tgt.usage).mul_scalar(0.5));
    let mut r = LossReport::empty(Stage::Sa, *weights);
    r.recon_s = val(&src.recon);
    r.recon_t = val(&tgt.recon);
    r.seg = val(src.seg.as_ref().expect("checked by elbo_source"));
    r.vel_s = val(&src.vel);
    r.vel_t = val(&tgt.vel);
    r.tem = val(tem);
    r.usage_s = val(&src.usage);
    r.usage_t = val(&tgt.usage);
    r.structure = val(st);
    r.total = r.recompute_total();
    Ok(StageLoss { loss, report: r })
}

/// `-L_LB(Bs) + l4 tem + l5 struct(Bs) + usage(Bs)`.
pub fn stage_loss_sf1<T: Float>(src: &BatchTerms<T>, tem: &Tensor<T>, weights: &LossWeights) -> Result<StageLoss<T>> {
    let [_, _, _, l4, l5] = weights.lambda;
    let st = structure_term(src)?;
    let loss = elbo_source(src, weights)?
        .neg()
        .add(&scaled(tem, l4))
        .add(&scaled(st, l5))
        .add(&src.usage);
    let mut r = LossReport::empty(Stage::Sf1, *weights);
    r.recon_s = val(&src.recon);
    r.seg = val(src.seg.as_ref().expect("checked by elbo_source"));
    r.vel_s = val(&src.vel);
    r.tem = val(tem);
    r.usage_s = val(&src.usage);
    r.structure = val(st);
    r.total = r.recompute_total();
    Ok(StageLoss { loss, report: r })
}

/// `-L_LB(Bt) + usage(Bt)`.
pub fn stage_loss_sf2<T: Float>(tgt: &BatchTerms<T>, weights: &LossWeights) -> StageLoss<T> {
    let loss = elbo_target(tgt, weights).neg().add(&tgt.usage);
    let mut r = LossReport::empty(Stage::Sf2, *weights);
    r.recon_t = val(&tgt.recon);
    r.vel_t = val(&tgt.vel);
    r.usage_t = val(&tgt.usage);
    r.total = r.recompute_total();
    StageLoss { loss, report: r }
}

/// Supervised segmentation loss alone (no-adaptation reference).
pub fn stage_loss_baseline<T: Float>(seg: &Tensor<T>, weights: &LossWeights) -> StageLoss<T> {
    let mut r = LossReport::empty(Stage::Baseline, *weights);
    r.seg = val(seg);
    r.total = r.recompute_total();
    StageLoss {
        loss: seg.clone(),
        report: r,
    }
}
