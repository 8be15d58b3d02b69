//! Source-accessible (single stage) and source-free (two stage) training.
//!
//! Each entry point takes only the data its setting may see: [`train_sa`]
//! gets both domains, [`train_sf1`] only labelled source data and
//! [`train_sf2`] only target images plus the stage-1 checkpoint.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anatomix_tensor::optim::{AdamW, AdamWConfig};
use anatomix_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, RngState};
use crate::data::Sample;
use crate::deformation::{self, Interp};
use crate::evaluation;
use crate::losses::{self, BatchTerms, LossReport, LossWeights, Stage, StageLoss};
use crate::manifold::{self, Provenance, TemplateReduction};
use crate::networks::{Bound, Forward, Group, Model, ModelConfig};
use crate::{io_err, Error, Result, F};

/// Groups held fixed during source-free stage 2.
pub const SF2_FROZEN: [Group; 2] = [Group::Bases, Group::SegDecoder];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sf2Selection {
    /// Lowest reconstruction NLL on target validation images.
    ReconNll,
    /// Highest Dice on labelled target validation images.
    TargetDice,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Stage,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub batch_source: usize,
    pub batch_target: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Normalization of the template term.
    pub template_reduction: TemplateReduction,
    /// Whether the usage hinge is part of the objective (ablation switch).
    pub usage: bool,
    pub sf2_selection: Sf2Selection,
    /// Validation period in epochs; the last epoch is always validated.
    pub validate_every: usize,
}

/// Loss weights for each stage on the cardiac benchmark.
pub fn default_lambdas(mode: Stage) -> [f64; 5] {
    match mode {
        Stage::Sa => [1.0, 15.0, 65.0, 0.5, 1.0],
        Stage::Sf1 => [1.0, 15.0, 65.0, 2.0, 1.0],
        Stage::Sf2 => [0.0, 15.0, 65.0, 0.0, 0.0],
        Stage::Baseline => [1.0, 0.0, 0.0, 0.0, 0.0],
    }
}

impl TrainConfig {
    pub fn new(mode: Stage) -> Self {
        Self {
            mode,
            model: ModelConfig::default(),
            weights: LossWeights::new(default_lambdas(mode), 0.05),
            batch_source: 4,
            batch_target: 4,
            lr: 1e-3,
            weight_decay: 1e-4,
            epochs: match mode {
                Stage::Sf2 => 100,
                _ => 300,
            },
            seed: 0,
            template_reduction: TemplateReduction::PerElement,
            usage: true,
            sf2_selection: Sf2Selection::ReconNll,
            validate_every: 1,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = self.model.violations();
        v.extend(self.weights.violations(self.model.num_bases));
        if self.mode == Stage::Baseline {
            v.push("mode must be one of sa, sf1, sf2".into());
        }
        if self.batch_source == 0 || self.batch_target == 0 {
            v.push("batch sizes must be >= 1".into());
        }
        if matches!(self.mode, Stage::Sa | Stage::Sf1) && self.batch_source < 2 {
            v.push("the structural term needs batch_source >= 2".into());
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            v.push("lr must be > 0 and weight_decay >= 0".into());
        }
        if self.epochs == 0 || self.validate_every == 0 {
            v.push("epochs and validate_every must be >= 1".into());
        }
        v
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json))
    }

    fn optimizer(&self) -> AdamW {
        AdamW::new(AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        })
    }
}

/// Training and validation splits of one domain.
#[derive(Clone, Debug, Default)]
pub struct DomainData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Where a run writes its logs and checkpoints.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
    pub fn loss_log(&self) -> PathBuf {
        self.dir.join("loss_log.csv")
    }
    pub fn validation_log(&self) -> PathBuf {
        self.dir.join("validation.csv")
    }
    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
}

/// Result of a training run.
pub struct TrainOutcome {
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub best_score: f64,
    pub reports: Vec<LossReport>,
    /// `(epoch, score)` per validation.
    pub validation: Vec<(usize, f64)>,
}

/// Stacks images into `[B, 1, H, W]`.
pub fn image_batch(samples: &[&Sample], size: usize) -> Result<Tensor<F>> {
    let mut data = Vec::with_capacity(samples.len() * size * size);
    for s in samples {
        if s.height != size || s.width != size {
            return Err(Error::Dimension(format!(
                "sample `{}` is {}x{}, the model expects {size}x{size}",
                s.subject_id, s.height, s.width
            )));
        }
        data.extend_from_slice(&s.image);
    }
    Ok(Tensor::new(data, &[samples.len(), 1, size, size]))
}

fn label_batch(samples: &[&Sample]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for s in samples {
        let l = s
            .label
            .as_ref()
            .ok_or_else(|| Error::Data(format!("sample `{}` has no label", s.subject_id)))?;
        out.extend_from_slice(l);
    }
    Ok(out)
}

/// Labels brought into template space by the forward deformation
/// (nearest neighbour, so classes stay hard).
pub fn labels_to_template(fwd: &Forward, labels: &[u8]) -> Result<Vec<u8>> {
    let d = &fwd.stack.forward.disp;
    let (b, h, w) = (d.dim(0), d.dim(2), d.dim(3));
    let img = Tensor::<F>::new(labels.iter().map(|&v| v as F).collect(), &[b, 1, h, w]);
    let detached = deformation::Deformation {
        disp: d.detach(),
        direction: fwd.stack.forward.direction,
    };
    let warped = deformation::warp(&img, &detached, Interp::Nearest)?;
    Ok(warped.data().iter().map(|&v| v.round() as u8).collect())
}

/// Per-batch loss terms from one forward pass.
pub fn batch_terms(
    model: &Model,
    fwd: &Forward,
    x: &Tensor<F>,
    labels: Option<&[u8]>,
    weights: &LossWeights,
    usage: bool,
) -> Result<BatchTerms<F>> {
    let cfg = &model.config;
    let recon = losses::recon_nll(x, &fwd.recon_mu, &fwd.recon_b)?;
    let mut vel: Option<Tensor<F>> = None;
    for v in &fwd.stack.velocities {
        let kl = deformation::velocity_kl(v, cfg.lambda_smooth, cfg.lambda_mag)?.mul_scalar(1.0 / v.mean.numel() as f64);
        vel = Some(match vel {
            Some(t) => t.add(&kl),
            None => kl,
        });
    }
    let vel = vel.unwrap_or_else(|| Tensor::scalar(0.0));
    let usage = if usage {
        losses::usage_loss(&fwd.weights, weights.tau)?
    } else {
        fwd.weights.sum_all().mul_scalar(0.0)
    };
    let (seg, structure) = match labels {
        None => (None, None),
        Some(l) => {
            let seg = losses::seg_loss(&fwd.seg, l)?;
            let warped = labels_to_template(fwd, l)?;
            let hw = x.dim(2) * x.dim(3);
            let maps: Vec<&[u8]> = warped.chunks(hw).collect();
            let st = losses::struct_loss(&fwd.weights, &maps, cfg.num_classes + 1)?;
            (Some(seg), Some(st))
        }
    };
    Ok(BatchTerms {
        recon,
        seg,
        vel,
        usage,
        structure,
    })
}

/// Index stream over a training split, reshuffled every epoch and whenever
/// it runs out within one.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl Sampler {
    fn new(n: usize, batch: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            batch: batch.min(n),
        }
    }

    fn reshuffle(&mut self, rng: &mut ChaCha8Rng) {
        self.order.sort_unstable();
        self.order.shuffle(rng);
        self.pos = 0;
    }

    fn steps(&self) -> usize {
        self.order.len() / self.batch
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.reshuffle(rng);
        }
        let b = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        b
    }
}

fn ids(samples: &[&Sample]) -> Vec<String> {
    samples.iter().map(|s| s.subject_id.clone()).collect()
}

fn require(name: &str, v: &[Sample]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::Data(format!("{name} split is empty")));
    }
    Ok(())
}

struct Run<'a> {
    cfg: &'a TrainConfig,
    paths: &'a RunPaths,
    model: Model,
    opt: AdamW,
    rng: ChaCha8Rng,
    step: u64,
    epoch: usize,
    log: BufWriter<File>,
    vlog: BufWriter<File>,
    reports: Vec<LossReport>,
    validation: Vec<(usize, f64)>,
    best: Option<(f64, Checkpoint)>,
    higher_is_better: bool,
}

impl<'a> Run<'a> {
    fn start(
        cfg: &'a TrainConfig,
        paths: &'a RunPaths,
        model: Model,
        resume: Option<&Checkpoint>,
        higher_is_better: bool,
    ) -> Result<Self> {
        fs::create_dir_all(&paths.dir).map_err(io_err(&paths.dir))?;
        let (opt, rng, step, epoch, best) = match resume {
            Some(c) if c.stage == cfg.mode => {
                if c.config_hash != cfg.hash() {
                    log::warn!("resuming with a configuration that differs from the checkpoint's");
                }
                let best = match Checkpoint::load(&paths.best()) {
                    Ok(b) => b.best_score.map(|s| (s, b)),
                    Err(_) => None,
                };
                (c.optimizer.clone(), c.rng.restore()?, c.step, c.epoch, best)
            }
            _ => (cfg.optimizer(), ChaCha8Rng::seed_from_u64(cfg.seed), 0, 0, None),
        };
        let append = step > 0;
        let open = |p: &Path, header: &str| -> Result<BufWriter<File>> {
            let f = fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(append)
                .truncate(!append)
                .open(p)
                .map_err(io_err(p))?;
            let mut w = BufWriter::new(f);
            if !append {
                writeln!(w, "{header}").map_err(io_err(p))?;
            }
            Ok(w)
        };
        let log = open(&paths.loss_log(), LossReport::CSV_HEADER)?;
        let vlog = open(&paths.validation_log(), "epoch,step,score")?;
        Ok(Self {
            cfg,
            paths,
            model,
            opt,
            rng,
            step,
            epoch,
            log,
            vlog,
            reports: Vec::new(),
            validation: Vec::new(),
            best,
            higher_is_better,
        })
    }

    fn apply(&mut self, p: &Bound, sl: StageLoss<F>) -> Result<()> {
        self.step += 1;
        let mut report = sl.report;
        if !report.is_finite() || !sl.loss.item().is_finite() {
            log::error!("non-finite loss at step {}: {report}", self.step);
            return Err(Error::NonFiniteLoss {
                step: self.step,
                report: Box::new(report),
            });
        }
        let grads = sl.loss.backward();
        self.opt.begin_step();
        for i in self.model.store.trainable() {
            if let Some(g) = grads.get(&p.0[i]) {
                let data = self.model.store.data_mut(i)?;
                self.opt.update(i, data, g);
            }
        }
        let path = self.paths.loss_log();
        writeln!(self.log, "{}", report.csv_row(self.step)).map_err(io_err(&path))?;
        report.batch_ids.shrink_to_fit();
        self.reports.push(report);
        Ok(())
    }

    fn checkpoint(&self, best_score: Option<f64>) -> Checkpoint {
        Checkpoint {
            stage: self.cfg.mode,
            model: self.model.clone(),
            optimizer: self.opt.clone(),
            rng: RngState::capture(&self.rng),
            config_hash: self.cfg.hash(),
            step: self.step,
            epoch: self.epoch,
            best_score,
        }
    }

    fn end_epoch(&mut self, validate: impl Fn(&Model) -> Result<f64>) -> Result<()> {
        self.epoch += 1;
        let vpath = self.paths.validation_log();
        self.log.flush().map_err(io_err(self.paths.loss_log()))?;
        let due = self.epoch % self.cfg.validate_every == 0 || self.epoch == self.cfg.epochs;
        if due {
            let score = validate(&self.model)?;
            writeln!(self.vlog, "{},{},{score:e}", self.epoch, self.step).map_err(io_err(&vpath))?;
            self.vlog.flush().map_err(io_err(&vpath))?;
            self.validation.push((self.epoch, score));
            let better = match &self.best {
                None => true,
                Some((b, _)) => {
                    if self.higher_is_better {
                        score > *b
                    } else {
                        score < *b
                    }
                }
            };
            log::info!("[{}] epoch {} step {} validation {score:.5}", self.cfg.mode, self.epoch, self.step);
            if better {
                let ck = self.checkpoint(Some(score));
                ck.save(&self.paths.best())?;
                self.best = Some((score, ck));
            }
        }
        let last = self.checkpoint(self.best.as_ref().map(|b| b.0));
        last.save(&self.paths.last())
    }

    fn finish(self) -> TrainOutcome {
        let last = self.checkpoint(self.best.as_ref().map(|b| b.0));
        let (best_score, best) = self.best.unwrap_or_else(|| (f64::NAN, last.clone()));
        TrainOutcome {
            last,
            best,
            best_score,
            reports: self.reports,
            validation: self.validation,
        }
    }
}

fn check(cfg: &TrainConfig, mode: Stage) -> Result<()> {
    let mut v = cfg.violations();
    if cfg.mode != mode {
        v.push(format!("configuration is for mode {}, not {mode}", cfg.mode));
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(v))
    }
}

fn fresh_model(cfg: &TrainConfig) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    Model::new(cfg.model.clone(), &mut rng)
}

fn resumed_model(cfg: &TrainConfig, resume: Option<&Checkpoint>) -> Result<Model> {
    match resume {
        Some(c) => {
            if c.stage != cfg.mode {
                return Err(Error::Config(format!("cannot resume {} training from a {} checkpoint", cfg.mode, c.stage)));
            }
            if c.model.config != cfg.model {
                return Err(Error::Config("checkpoint architecture differs from the configuration".into()));
            }
            Ok(c.model.clone())
        }
        None => fresh_model(cfg),
    }
}

/// Mean foreground Dice of expectation-mode predictions.
pub fn validation_dice(model: &Model, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    let preds = evaluation::predict(model, samples)?;
    let k = model.config.num_classes + 1;
    let mut total = 0.0;
    for (s, p) in samples.iter().zip(&preds) {
        let truth = s
            .label
            .as_ref()
            .ok_or_else(|| Error::Data(format!("validation sample `{}` has no label", s.subject_id)))?;
        total += evaluation::mean_foreground_dice(p, truth, k);
    }
    Ok(total / samples.len() as f64)
}

/// Mean expectation-mode reconstruction NLL.
pub fn validation_recon_nll(model: &Model, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    let p = model.bind();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    for chunk in samples.chunks(evaluation::INFERENCE_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let x = image_batch(&refs, model.config.image_size)?;
        let f = model.forward(&p, &x, Provenance::Expectation, &mut rng)?;
        total += losses::recon_nll(&x, &f.recon_mu, &f.recon_b)?.item() as f64 * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Single-stage training on labelled source and unlabelled target data;
/// model selection by target validation Dice.
pub fn train_sa(
    cfg: &TrainConfig,
    source: &DomainData,
    target: &DomainData,
    paths: &RunPaths,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    check(cfg, Stage::Sa)?;
    require("source train", &source.train)?;
    require("target train", &target.train)?;
    require("target validation", &target.val)?;
    let model = resumed_model(cfg, resume)?;
    let mut run = Run::start(cfg, paths, model, resume, true)?;
    let size = cfg.model.image_size;
    let reduction = cfg.template_reduction;
    let mut ss = Sampler::new(source.train.len(), cfg.batch_source);
    let mut st = Sampler::new(target.train.len(), cfg.batch_target);
    while run.epoch < cfg.epochs {
        ss.reshuffle(&mut run.rng);
        st.reshuffle(&mut run.rng);
        for _ in 0..ss.steps().max(st.steps()) {
            let bs: Vec<&Sample> = ss.next(&mut run.rng).into_iter().map(|i| &source.train[i]).collect();
            let bt: Vec<&Sample> = st.next(&mut run.rng).into_iter().map(|i| &target.train[i]).collect();
            let (xs, ys, xt) = (image_batch(&bs, size)?, label_batch(&bs)?, image_batch(&bt, size)?);
            let p = run.model.bind();
            let fs = run.model.forward(&p, &xs, Provenance::Sampled, &mut run.rng)?;
            let ft = run.model.forward(&p, &xt, Provenance::Sampled, &mut run.rng)?;
            let src = batch_terms(&run.model, &fs, &xs, Some(&ys), &cfg.weights, cfg.usage)?;
            let tgt = batch_terms(&run.model, &ft, &xt, None, &cfg.weights, cfg.usage)?;
            let tem = manifold::surrogate_template_loss(&run.model.bank(&p)?, reduction)?;
            let mut sl = losses::stage_loss_sa(&src, &tgt, &tem, &cfg.weights)?;
            sl.report.batch_ids = [ids(&bs), ids(&bt)].concat();
            run.apply(&p, sl)?;
        }
        run.end_epoch(|m| validation_dice(m, &target.val))?;
    }
    Ok(run.finish())
}

/// Source-free stage 1: labelled source data only; model selection by
/// source validation Dice.
pub fn train_sf1(cfg: &TrainConfig, source: &DomainData, paths: &RunPaths, resume: Option<&Checkpoint>) -> Result<TrainOutcome> {
    check(cfg, Stage::Sf1)?;
    require("source train", &source.train)?;
    require("source validation", &source.val)?;
    let model = resumed_model(cfg, resume)?;
    let mut run = Run::start(cfg, paths, model, resume, true)?;
    let size = cfg.model.image_size;
    let reduction = cfg.template_reduction;
    let mut ss = Sampler::new(source.train.len(), cfg.batch_source);
    while run.epoch < cfg.epochs {
        ss.reshuffle(&mut run.rng);
        for _ in 0..ss.steps() {
            let bs: Vec<&Sample> = ss.next(&mut run.rng).into_iter().map(|i| &source.train[i]).collect();
            let (xs, ys) = (image_batch(&bs, size)?, label_batch(&bs)?);
            let p = run.model.bind();
            let fs = run.model.forward(&p, &xs, Provenance::Sampled, &mut run.rng)?;
            let src = batch_terms(&run.model, &fs, &xs, Some(&ys), &cfg.weights, cfg.usage)?;
            let tem = manifold::surrogate_template_loss(&run.model.bank(&p)?, reduction)?;
            let mut sl = losses::stage_loss_sf1(&src, &tem, &cfg.weights)?;
            sl.report.batch_ids = ids(&bs);
            run.apply(&p, sl)?;
        }
        run.end_epoch(|m| validation_dice(m, &source.val))?;
    }
    Ok(run.finish())
}

/// Source-free stage 2: target images only, basis bank and segmentation
/// decoder frozen. `start` is the stage-1 checkpoint, or a stage-2
/// checkpoint to resume from.
pub fn train_sf2(cfg: &TrainConfig, target: &DomainData, start: &Checkpoint, paths: &RunPaths) -> Result<TrainOutcome> {
    check(cfg, Stage::Sf2)?;
    require("target train", &target.train)?;
    require("target validation", &target.val)?;
    if !matches!(start.stage, Stage::Sf1 | Stage::Sf2) {
        return Err(Error::Config(format!("stage 2 starts from a stage-1 checkpoint, got {}", start.stage)));
    }
    if start.model.config != cfg.model {
        return Err(Error::Config("checkpoint architecture differs from the configuration".into()));
    }
    let mut model = start.model.clone();
    for g in SF2_FROZEN {
        model.store.freeze(g);
    }
    let resume = (start.stage == Stage::Sf2).then_some(start);
    let higher = cfg.sf2_selection == Sf2Selection::TargetDice;
    let mut run = Run::start(cfg, paths, model, resume, higher)?;
    let size = cfg.model.image_size;
    let mut st = Sampler::new(target.train.len(), cfg.batch_target);
    while run.epoch < cfg.epochs {
        st.reshuffle(&mut run.rng);
        for _ in 0..st.steps() {
            let bt: Vec<&Sample> = st.next(&mut run.rng).into_iter().map(|i| &target.train[i]).collect();
            let xt = image_batch(&bt, size)?;
            let p = run.model.bind();
            let ft = run.model.forward(&p, &xt, Provenance::Sampled, &mut run.rng)?;
            let tgt = batch_terms(&run.model, &ft, &xt, None, &cfg.weights, cfg.usage)?;
            let mut sl = losses::stage_loss_sf2(&tgt, &cfg.weights);
            sl.report.batch_ids = ids(&bt);
            run.apply(&p, sl)?;
        }
        match cfg.sf2_selection {
            Sf2Selection::ReconNll => run.end_epoch(|m| validation_recon_nll(m, &target.val))?,
            Sf2Selection::TargetDice => run.end_epoch(|m| validation_dice(m, &target.val))?,
        }
    }
    Ok(run.finish())
}
