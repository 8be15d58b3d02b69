//! Segmentation metrics, manifold traversals, latent export and basis
//! activation counts.

use std::fs;
use std::path::Path;

use anatomix_tensor::Tensor;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{Domain, Sample};
use crate::manifold::Provenance;
use crate::networks::{renormalized, Model};
use crate::simplex::{fisher_rao_distance, geodesic_interpolate, CompositionWeights};
use crate::{io_err, training, Error, Result, F};

/// Dice of class `k` between two label maps; both empty gives 1.
pub fn dsc(pred: &[u8], truth: &[u8], k: u8) -> f64 {
    let (mut a, mut b, mut i) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        let (pa, tb) = (p == k, t == k);
        a += pa as usize;
        b += tb as usize;
        i += (pa && tb) as usize;
    }
    if a + b == 0 {
        1.0
    } else {
        2.0 * i as f64 / (a + b) as f64
    }
}

/// Mean of [`dsc`] over foreground classes `1..classes`.
pub fn mean_foreground_dice(a: &[u8], b: &[u8], classes: usize) -> f64 {
    (1..classes).map(|k| dsc(a, b, k as u8)).sum::<f64>() / (classes - 1) as f64
}

/// Images per inference forward pass.
pub const INFERENCE_BATCH: usize = 16;

/// Expectation-mode argmax label maps; ties go to the lowest class index.
pub fn predict(model: &Model, samples: &[Sample]) -> Result<Vec<Vec<u8>>> {
    let p = model.bind();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let size = model.config.image_size;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(INFERENCE_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let x = training::image_batch(&refs, size)?;
        let f = model.forward(&p, &x, Provenance::Expectation, &mut rng)?;
        out.extend(argmax_labels(&f.seg));
    }
    Ok(out)
}

/// Per-pixel argmax over the class axis of `[B, K+1, H, W]`.
pub fn argmax_labels(probs: &Tensor<F>) -> Vec<Vec<u8>> {
    let (b, k, h, w) = (probs.dim(0), probs.dim(1), probs.dim(2), probs.dim(3));
    let d = probs.data();
    let hw = h * w;
    (0..b)
        .map(|n| {
            (0..hw)
                .map(|i| {
                    let mut best = 0;
                    for c in 1..k {
                        if d[(n * k + c) * hw + i] > d[(n * k + best) * hw + i] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect()
}

/// Pixels of class `k` with a 4-neighbour outside the class (the image
/// border counts as outside), as `(row, col)`.
pub fn surface(labels: &[u8], h: usize, w: usize, k: u8) -> Vec<(usize, usize)> {
    let at = |i: isize, j: isize| i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w && labels[i as usize * w + j as usize] == k;
    let mut out = Vec::new();
    for i in 0..h as isize {
        for j in 0..w as isize {
            if at(i, j) && !(at(i - 1, j) && at(i + 1, j) && at(i, j - 1) && at(i, j + 1)) {
                out.push((i as usize, j as usize));
            }
        }
    }
    out
}

/// Exact squared Euclidean distance transform along one line (lower
/// envelope of parabolas), with sample spacing `s`.
fn edt_1d(f: &[f64], s: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let pos = |q: usize| q as f64 * s;
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(p) => p,
        None => {
            out.fill(f64::INFINITY);
            return;
        }
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let sx = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            if sx <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = sx;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Distance in mm from every pixel to the nearest of `points`.
fn distance_map(points: &[(usize, usize)], h: usize, w: usize, spacing: (f64, f64)) -> Vec<f64> {
    let mut g = vec![f64::INFINITY; h * w];
    for &(i, j) in points {
        g[i * w + j] = 0.0;
    }
    let mut col = vec![0.0; h];
    let mut tmp = vec![0.0; h];
    for j in 0..w {
        for i in 0..h {
            col[i] = g[i * w + j];
        }
        edt_1d(&col, spacing.0, &mut tmp);
        for i in 0..h {
            g[i * w + j] = tmp[i];
        }
    }
    let mut row = vec![0.0; w];
    for i in 0..h {
        edt_1d(&g[i * w..(i + 1) * w], spacing.1, &mut row);
        g[i * w..(i + 1) * w].copy_from_slice(&row);
    }
    g.iter().map(|v| v.sqrt()).collect()
}

/// Average symmetric surface distance of one class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Assd {
    /// Millimetres.
    pub value: f64,
    /// Set when exactly one mask is empty and `value` is the image diagonal.
    pub fallback: bool,
}

/// Mean of the two directed average surface distances of class `k`.
/// `spacing` is `(row, column)` mm per pixel.
pub fn assd(pred: &[u8], truth: &[u8], h: usize, w: usize, k: u8, spacing: (f64, f64)) -> Assd {
    let (sa, sb) = (surface(pred, h, w, k), surface(truth, h, w, k));
    match (sa.is_empty(), sb.is_empty()) {
        (true, true) => Assd {
            value: 0.0,
            fallback: false,
        },
        (true, false) | (false, true) => Assd {
            value: ((h as f64 * spacing.0).powi(2) + (w as f64 * spacing.1).powi(2)).sqrt(),
            fallback: true,
        },
        (false, false) => {
            let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| {
                let d = distance_map(to, h, w, spacing);
                from.iter().map(|&(i, j)| d[i * w + j]).sum::<f64>() / from.len() as f64
            };
            Assd {
                value: 0.5 * (directed(&sa, &sb) + directed(&sb, &sa)),
                fallback: false,
            }
        }
    }
}

/// Metrics of one subject. Dice in percent, ASSD in mm, one entry per
/// foreground class.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubjectMetrics {
    pub subject_id: String,
    pub dsc: Vec<f64>,
    pub assd: Vec<f64>,
    pub assd_fallback: Vec<bool>,
}

impl SubjectMetrics {
    pub fn mean_dsc(&self) -> f64 {
        mean(&self.dsc)
    }
    pub fn mean_assd(&self) -> f64 {
        mean(&self.assd)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; zero for fewer than two values.
fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Mean and standard deviation over subjects.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    fn of(v: &[f64]) -> Self {
        Self {
            mean: mean(v),
            std: std_dev(v),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    /// Foreground classes `K`.
    pub classes: usize,
    pub subjects: Vec<SubjectMetrics>,
    pub dsc: Vec<Summary>,
    pub assd: Vec<Summary>,
    pub dsc_avg: Summary,
    pub assd_avg: Summary,
    /// Number of (subject, class) ASSD values that used the diagonal fallback.
    pub fallbacks: usize,
}

impl MetricReport {
    pub fn from_subjects(classes: usize, subjects: Vec<SubjectMetrics>) -> Result<Self> {
        if subjects.is_empty() {
            return Err(Error::Data("no subjects to report".into()));
        }
        let col = |f: &dyn Fn(&SubjectMetrics) -> f64| subjects.iter().map(f).collect::<Vec<_>>();
        let dsc = (0..classes).map(|k| Summary::of(&col(&|s| s.dsc[k]))).collect();
        let assd = (0..classes).map(|k| Summary::of(&col(&|s| s.assd[k]))).collect();
        let dsc_avg = Summary::of(&col(&|s| s.mean_dsc()));
        let assd_avg = Summary::of(&col(&|s| s.mean_assd()));
        let fallbacks = subjects.iter().flat_map(|s| &s.assd_fallback).filter(|f| **f).count();
        Ok(Self {
            classes,
            subjects,
            dsc,
            assd,
            dsc_avg,
            assd_avg,
            fallbacks,
        })
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["subject_id".to_string()];
        cols.extend((1..=self.classes).map(|k| format!("dsc_{k}")));
        cols.push("dsc_avg".into());
        cols.extend((1..=self.classes).map(|k| format!("assd_{k}")));
        cols.push("assd_avg".into());
        cols.push("assd_fallback".into());
        cols.join(",")
    }

    /// Per-subject rows. Values are written with full round-trip precision.
    pub fn to_csv(&self) -> String {
        let mut s = self.csv_header() + "\n";
        for m in &self.subjects {
            let mut row = vec![m.subject_id.clone()];
            row.extend(m.dsc.iter().map(|v| format!("{v:?}")));
            row.push(format!("{:?}", m.mean_dsc()));
            row.extend(m.assd.iter().map(|v| format!("{v:?}")));
            row.push(format!("{:?}", m.mean_assd()));
            let flags: Vec<String> = m
                .assd_fallback
                .iter()
                .enumerate()
                .filter(|(_, f)| **f)
                .map(|(k, _)| (k + 1).to_string())
                .collect();
            row.push(flags.join(" "));
            s += &row.join(",");
            s.push('\n');
        }
        s
    }

    /// Plain-text table: mean ± std per class and on average.
    pub fn table(&self) -> String {
        let mut s = String::new();
        s += &format!("{:<8} {:>18} {:>18}\n", "class", "DSC (%)", "ASSD (mm)");
        for k in 0..self.classes {
            s += &format!(
                "{:<8} {:>18} {:>18}\n",
                k + 1,
                format!("{:.2} ± {:.2}", self.dsc[k].mean, self.dsc[k].std),
                format!("{:.2} ± {:.2}", self.assd[k].mean, self.assd[k].std)
            );
        }
        s += &format!(
            "{:<8} {:>18} {:>18}\n",
            "avg",
            format!("{:.2} ± {:.2}", self.dsc_avg.mean, self.dsc_avg.std),
            format!("{:.2} ± {:.2}", self.assd_avg.mean, self.assd_avg.std)
        );
        s += &format!("subjects: {}\n", self.subjects.len());
        if self.fallbacks > 0 {
            s += &format!(
                "note: {} ASSD value(s) had exactly one empty mask and use the image-diagonal fallback\n",
                self.fallbacks
            );
        }
        s
    }

    /// Writes `metrics.csv`, `summary.txt` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let p = dir.join("metrics.csv");
        fs::write(&p, self.to_csv()).map_err(io_err(&p))?;
        let p = dir.join("summary.txt");
        fs::write(&p, self.table()).map_err(io_err(&p))?;
        let p = dir.join("summary.json");
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(&p, json + "\n").map_err(io_err(&p))
    }
}

/// Metrics of predicted label maps against the labels of `samples`.
pub fn evaluate_predictions(preds: &[Vec<u8>], samples: &[Sample], classes: usize) -> Result<MetricReport> {
    if preds.len() != samples.len() {
        return Err(Error::Dimension(format!("{} predictions for {} samples", preds.len(), samples.len())));
    }
    let mut subjects = Vec::with_capacity(samples.len());
    for (p, s) in preds.iter().zip(samples) {
        let truth = s
            .label
            .as_ref()
            .ok_or_else(|| Error::Data(format!("sample `{}` has no label", s.subject_id)))?;
        if p.len() != truth.len() || truth.len() != s.height * s.width {
            return Err(Error::Dimension(format!("prediction size mismatch for `{}`", s.subject_id)));
        }
        let mut m = SubjectMetrics {
            subject_id: s.subject_id.clone(),
            dsc: Vec::with_capacity(classes),
            assd: Vec::with_capacity(classes),
            assd_fallback: Vec::with_capacity(classes),
        };
        for k in 1..=classes as u8 {
            m.dsc.push(100.0 * dsc(p, truth, k));
            let a = assd(p, truth, s.height, s.width, k, s.spacing);
            m.assd.push(a.value);
            m.assd_fallback.push(a.fallback);
        }
        subjects.push(m);
    }
    MetricReport::from_subjects(classes, subjects)
}

/// Expectation-mode evaluation of a labelled split.
pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<MetricReport> {
    if let Some(s) = samples.iter().find(|s| s.label.is_none()) {
        return Err(Error::Data(format!("evaluation needs labels; `{}` has none", s.subject_id)));
    }
    let preds = predict(model, samples)?;
    evaluate_predictions(&preds, samples, model.config.num_classes)
}

/// Composition weights of each sample (content encoder and weight head only).
pub fn infer_compositions(model: &Model, samples: &[Sample]) -> Result<Vec<CompositionWeights>> {
    let p = model.bind();
    let size = model.config.image_size;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(INFERENCE_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let x = training::image_batch(&refs, size)?;
        let c = model.encode_content(&p, &x)?;
        let w = model.infer_weights(&p, &c[0]);
        let m = w.dim(1);
        for row in w.data().chunks(m) {
            out.push(renormalized(row.iter().map(|&v| v as f64).collect())?);
        }
    }
    Ok(out)
}

/// Decoded template-space segmentations along a geodesic.
#[derive(Clone, Debug)]
pub struct Traversal {
    pub alphas: Vec<f64>,
    pub weights: Vec<CompositionWeights>,
    /// Per step, class probabilities `[K+1, H, W]` row-major.
    pub probs: Vec<Vec<F>>,
    pub labels: Vec<Vec<u8>>,
    pub size: usize,
    pub classes: usize,
}

impl Traversal {
    /// `alpha, w_1..w_M, fr_from_start` rows.
    pub fn weight_path_csv(&self) -> Result<String> {
        let m = self.weights[0].len();
        let mut s = String::from("alpha");
        for i in 1..=m {
            s += &format!(",w_{i}");
        }
        s += ",fr_from_start\n";
        for (a, w) in self.alphas.iter().zip(&self.weights) {
            s += &format!("{a:?}");
            for v in w.as_slice() {
                s += &format!(",{v:?}");
            }
            s += &format!(",{:?}\n", fisher_rao_distance(&self.weights[0], w)?);
        }
        Ok(s)
    }
}

/// Decodes the geodesic from `w` to `w2` at `n_steps` uniform fractions.
pub fn traverse(model: &Model, w: &CompositionWeights, w2: &CompositionWeights, n_steps: usize) -> Result<Traversal> {
    if n_steps < 2 {
        return Err(Error::Config(format!("a traversal needs at least 2 steps, got {n_steps}")));
    }
    let m = model.config.num_bases;
    if w.len() != m || w2.len() != m {
        return Err(Error::Dimension(format!("weights of length {} / {} for M = {m}", w.len(), w2.len())));
    }
    let alphas: Vec<f64> = (0..n_steps).map(|i| i as f64 / (n_steps - 1) as f64).collect();
    let weights = alphas
        .iter()
        .map(|&a| geodesic_interpolate(w, w2, a))
        .collect::<Result<Vec<_>>>()?;
    let flat: Vec<F> = weights.iter().flat_map(|c| c.as_slice().iter().map(|&v| v as F)).collect();
    let p = model.bind();
    let tmpl = model.template_for_weights(&p, &Tensor::new(flat, &[n_steps, m]))?;
    let seg = model.decode_segmentation_template(&p, &tmpl.z);
    let labels = argmax_labels(&seg);
    let per = seg.numel() / n_steps;
    let probs = seg.data().chunks(per).map(|c| c.to_vec()).collect();
    Ok(Traversal {
        alphas,
        weights,
        probs,
        labels,
        size: model.config.image_size,
        classes: model.config.num_classes,
    })
}

/// Traversal between the compositions inferred for two images.
pub fn traverse_inter_image(model: &Model, x: &Sample, x2: &Sample, n_steps: usize) -> Result<Traversal> {
    let w = infer_compositions(model, std::slice::from_ref(x))?.remove(0);
    let w2 = infer_compositions(model, std::slice::from_ref(x2))?.remove(0);
    traverse(model, &w, &w2, n_steps)
}

/// Traversal between one-hot compositions of bases `i` and `j` (one-based).
pub fn traverse_inter_basis(model: &Model, i: usize, j: usize, n_steps: usize) -> Result<Traversal> {
    let m = model.config.num_bases;
    for (name, v) in [("i", i), ("j", j)] {
        if v == 0 || v > m {
            return Err(Error::Config(format!("basis index {name} = {v} outside 1..={m}")));
        }
    }
    traverse(model, &CompositionWeights::one_hot(m, i - 1)?, &CompositionWeights::one_hot(m, j - 1)?, n_steps)
}

/// Gray level of class `c` out of `k` foreground classes.
fn shade(c: u8, k: usize) -> u8 {
    (c as usize * 255 / k.max(1)) as u8
}

/// Writes traversal rows side by side as one 8-bit PNG, one row per
/// traversal, one tile per step.
pub fn write_traversal_grid(rows: &[Traversal], path: &Path) -> Result<()> {
    let first = rows.first().ok_or_else(|| Error::Data("no traversal rows".into()))?;
    let s = first.size;
    let n = first.labels.len();
    let (w, h) = (n * s, rows.len() * s);
    let mut px = vec![0u8; w * h];
    for (r, t) in rows.iter().enumerate() {
        for (c, lab) in t.labels.iter().enumerate() {
            for i in 0..s {
                for j in 0..s {
                    px[(r * s + i) * w + c * s + j] = shade(lab[i * s + j], t.classes);
                }
            }
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    crate::data::write_png8(path, w, h, &px)
}

/// One exported composition vector.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentRow {
    pub subject_id: String,
    pub domain: Domain,
    pub w: Vec<f64>,
}

pub fn export_latents(model: &Model, samples: &[Sample]) -> Result<Vec<LatentRow>> {
    let ws = infer_compositions(model, samples)?;
    Ok(samples
        .iter()
        .zip(ws)
        .map(|(s, w)| LatentRow {
            subject_id: s.subject_id.clone(),
            domain: s.domain,
            w: w.into_inner(),
        })
        .collect())
}

pub fn latents_csv(rows: &[LatentRow]) -> String {
    let m = rows.first().map_or(0, |r| r.w.len());
    let mut s = String::from("subject_id,domain");
    for i in 1..=m {
        s += &format!(",w_{i}");
    }
    s.push('\n');
    for r in rows {
        let d = match r.domain {
            Domain::Source => "source",
            Domain::Target => "target",
        };
        s += &format!("{},{d}", r.subject_id);
        for v in &r.w {
            s += &format!(",{v:?}");
        }
        s.push('\n');
    }
    s
}

/// Two-component principal component analysis.
#[derive(Clone, Debug)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    /// Unit principal axes, largest variance first.
    pub axes: [Vec<f64>; 2],
    pub projected: Vec<[f64; 2]>,
    /// Fraction of total variance carried by the two axes.
    pub explained: f64,
}

/// PCA of the rows of `data` through the symmetric eigendecomposition of
/// the covariance matrix.
pub fn pca2(data: &[Vec<f64>]) -> Result<Pca2> {
    let n = data.len();
    let d = data.first().map_or(0, Vec::len);
    if n < 2 || d < 2 {
        return Err(Error::Data(format!("PCA needs at least 2 rows of dimension >= 2, got {n} x {d}")));
    }
    let mean: Vec<f64> = (0..d).map(|j| data.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, d, |i, j| data[i][j] - mean[j]);
    let cov = (x.transpose() * &x) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let axis = |k: usize| -> Vec<f64> { eig.eigenvectors.column(order[k]).iter().copied().collect() };
    let axes = [axis(0), axis(1)];
    let explained = if total > 0.0 {
        (eig.eigenvalues[order[0]].max(0.0) + eig.eigenvalues[order[1]].max(0.0)) / total
    } else {
        1.0
    };
    let projected = (0..n)
        .map(|i| {
            let row = x.row(i);
            let dot = |a: &Vec<f64>| row.iter().zip(a).map(|(u, v)| u * v).sum::<f64>();
            [dot(&axes[0]), dot(&axes[1])]
        })
        .collect();
    Ok(Pca2 {
        mean,
        axes,
        projected,
        explained,
    })
}

/// Scatter of the PCA projection, source in blue and target in orange, on a
/// white `size x size` RGB canvas.
pub fn write_pca_scatter(rows: &[LatentRow], pca: &Pca2, path: &Path, size: usize) -> Result<()> {
    let mut px = vec![255u8; size * size * 3];
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &pca.projected {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let margin = 8.0;
    let scale = |v: f64, a: usize| {
        let span = (hi[a] - lo[a]).max(1e-12);
        margin + (v - lo[a]) / span * (size as f64 - 2.0 * margin)
    };
    for (r, p) in rows.iter().zip(&pca.projected) {
        let color = match r.domain {
            Domain::Source => [31u8, 119, 180],
            Domain::Target => [255u8, 127, 14],
        };
        let cx = scale(p[0], 0).round() as isize;
        let cy = (size as f64 - scale(p[1], 1)).round() as isize;
        for dy in -2..=2isize {
            for dx in -2..=2isize {
                let (x, y) = (cx + dx, cy + dy);
                if dx * dx + dy * dy <= 4 && x >= 0 && y >= 0 && (x as usize) < size && (y as usize) < size {
                    let o = (y as usize * size + x as usize) * 3;
                    px[o..o + 3].copy_from_slice(&color);
                }
            }
        }
    }
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(f), size as u32, size as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let err = |e: png::EncodingError| Error::Data(format!("{}: {e}", path.display()));
    enc.write_header().map_err(err)?.write_image_data(&px).map_err(err)
}

/// Caption stating the variance the plot's two axes explain.
pub fn pca_caption(pca: &Pca2) -> String {
    format!(
        "PCA of composition weights; components 1-2 explain {:.4}% of the variance (blue: source, orange: target)",
        100.0 * pca.explained
    )
}

/// Weight above which a basis counts as used by an image.
pub const ACTIVATION_THRESHOLD: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ActivationReport {
    pub activated: usize,
    pub mean_usage: Vec<f64>,
    pub max_weight: Vec<f64>,
    pub threshold: f64,
}

/// Bases whose largest weight over `weights` exceeds `threshold`.
pub fn activation_from_weights(weights: &[CompositionWeights], threshold: f64) -> Result<ActivationReport> {
    let m = weights.first().map(|w| w.len()).ok_or_else(|| Error::Data("no weights".into()))?;
    let mut mean_usage = vec![0.0; m];
    let mut max_weight = vec![0.0f64; m];
    for w in weights {
        for (i, &v) in w.as_slice().iter().enumerate() {
            mean_usage[i] += v / weights.len() as f64;
            max_weight[i] = max_weight[i].max(v);
        }
    }
    Ok(ActivationReport {
        activated: max_weight.iter().filter(|&&v| v > threshold).count(),
        mean_usage,
        max_weight,
        threshold,
    })
}

pub fn basis_activation_report(model: &Model, samples: &[Sample], threshold: f64) -> Result<ActivationReport> {
    activation_from_weights(&infer_compositions(model, samples)?, threshold)
}
