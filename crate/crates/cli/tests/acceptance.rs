//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Arguments filter criteria by number, e.g.
//! `cargo test --test acceptance -- 3 11`.

use std::collections::HashSet;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use anatomix_core::data::{generate_split, GeneratorConfig, Sample, Split};
use anatomix_core::deformation::{self, VelocityField};
use anatomix_core::evaluation::{self, assd, dsc, surface, ACTIVATION_THRESHOLD};
use anatomix_core::losses::{self, LossWeights, Stage};
use anatomix_core::manifold::{self, BasisBank, DiagonalGaussian, Provenance, TemplateReduction};
use anatomix_core::networks::{Group, Model, ModelConfig};
use anatomix_core::simplex::{fisher_rao_distance, geodesic_interpolate, CompositionWeights};
use anatomix_core::tensor::gradcheck::{numeric_gradient, relative_error};
use anatomix_core::tensor::Tensor;
use anatomix_core::training::{self, DomainData, RunPaths, TrainConfig, SF2_FROZEN};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type T64 = Tensor<f64>;

const MIXTURE_DENSITY_TOL: f64 = 1e-6;
const MIXTURE_TIME_LIMIT_S: f64 = 10.0;
const KL_INSTANCES: usize = 50;
const KL_SAMPLES: usize = 100_000;
const KL_MAX_SE: f64 = 3.0;
const FR_ANALYTIC_TOL: f64 = 1e-9;
const GEODESIC_LINEARITY_TOL: f64 = 1e-5;
const SIMPLEX_CLOSURE_TOL: f64 = 1e-6;
const SIMPLEX_INTERPOLATIONS: usize = 1000;
const SVF_FIELDS: usize = 100;
const SVF_SIZE: usize = 64;
const SVF_MAX_SPEED_PX: f64 = 8.0;
const SVF_INVERSE_TOL_PX: f64 = 0.5;
const SVF_POSITIVE_JACOBIAN_FRACTION: f64 = 0.999;
const SVF_EXPM_TOL_PX: f64 = 0.05;
const SVF_INTERIOR_MARGIN: usize = 8;
const DECOMPOSITION_TOL: f64 = 1e-6;
const DECOMPOSITION_STATES: usize = 20;
const GRAD_TOL: f64 = 1e-4;
const BENCH_SA_MIN_DSC: f64 = 0.85;
const BENCH_SF_MAX_GAP: f64 = 0.05;
const BENCH_MIN_MARGIN: f64 = 0.10;
const BENCH_CPU_BUDGET_S: f64 = 2.0 * 3600.0;
const ACTIVATION_M: usize = 6;
const ACTIVATION_TAU: f64 = 0.05;
const METRIC_PAIRS: usize = 50;
const ASSD_TOL_MM: f64 = 1e-9;

/// Benchmark image side and epoch budgets.
const BENCH_SIZE: usize = 64;
const SA_EPOCHS: usize = 40;
const SF1_EPOCHS: usize = 30;
const SF2_EPOCHS: usize = 30;
/// Loss weights (l1..l5) of the benchmark runs.
const SA_LAMBDAS: [f64; 5] = [1.0, 15.0, 1.0, 0.5, 1.0];
const SF1_LAMBDAS: [f64; 5] = [1.0, 15.0, 1.0, 2.0, 1.0];
const SF2_LAMBDAS: [f64; 5] = [0.0, 15.0, 1.0, 0.0, 0.0];

struct Outcome {
    id: &'static str,
    passed: bool,
    detail: String,
}

fn outcome(id: &'static str, passed: bool, detail: String) -> Outcome {
    Outcome { id, passed, detail }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn gauss_pdf(x: f64, m: f64, v: f64) -> f64 {
    (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt()
}

fn mixture_oracle() -> Vec<Outcome> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let m = rng.random_range(2..6);
        let means = rand_vec(&mut rng, m, -3.0, 3.0);
        let vars = rand_vec(&mut rng, m, 0.2, 3.0);
        let mut w = rand_vec(&mut rng, m, 0.01, 1.0);
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        let bank = BasisBank::from_moments(
            vec![T64::new(means.clone(), &[m, 1, 1, 1])],
            vec![T64::new(vars.clone(), &[m, 1, 1, 1])],
        )
        .unwrap();
        let q = manifold::mix_posterior(&bank, &CompositionWeights::new(w.clone()).unwrap(), 0).unwrap();
        let (qm, qv) = (q.mean.item(), q.var.item());
        // Stored variances pass through the positive parameterization, so
        // the oracle reads them back rather than trusting the inputs.
        let vars = bank.vars(0).data().to_vec();
        let (lo, hi, n) = (-15.0, 15.0, 30_001);
        let dx = (hi - lo) / (n - 1) as f64;
        let dens: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let x = lo + i as f64 * dx;
                (x, (0..m).map(|k| gauss_pdf(x, means[k], vars[k]).powf(w[k])).product())
            })
            .collect();
        // Simpson's rule for the normalizer.
        let z = dx / 3.0
            * dens
                .iter()
                .enumerate()
                .map(|(i, (_, d))| d * if i == 0 || i == n - 1 { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 })
                .sum::<f64>();
        for (x, d) in dens {
            worst = worst.max((d / z - gauss_pdf(x, qm, qv)).abs());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    vec![outcome(
        "1",
        worst < MIXTURE_DENSITY_TOL && secs < MIXTURE_TIME_LIMIT_S,
        format!("mixture oracle: max density error {worst:.2e} (< {MIXTURE_DENSITY_TOL:e}), {secs:.2} s (< {MIXTURE_TIME_LIMIT_S} s)"),
    )]
}

fn kl_oracle() -> Vec<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..KL_INSTANCES {
        let d = rng.random_range(1..5);
        let qm = rand_vec(&mut rng, d, -1.0, 1.0);
        let qv = rand_vec(&mut rng, d, 0.3, 2.0);
        let pm = rand_vec(&mut rng, d, -1.0, 1.0);
        let pv = rand_vec(&mut rng, d, 0.3, 2.0);
        let g = |m: &[f64], v: &[f64]| DiagonalGaussian::new(T64::new(m.to_vec(), &[d]), T64::new(v.to_vec(), &[d])).unwrap();
        let exact = manifold::kl_diag_gaussian(&g(&qm, &qv), &g(&pm, &pv)).unwrap().item();
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..KL_SAMPLES {
            let mut lr = 0.0;
            for k in 0..d {
                let x = qm[k] + qv[k].sqrt() * normal.sample(&mut rng);
                lr += gauss_pdf(x, qm[k], qv[k]).ln() - gauss_pdf(x, pm[k], pv[k]).ln();
            }
            sum += lr;
            sq += lr * lr;
        }
        let n = KL_SAMPLES as f64;
        let mean = sum / n;
        let se = ((sq / n - mean * mean) / (n - 1.0)).sqrt();
        worst = worst.max((mean - exact).abs() / se);
    }
    vec![outcome(
        "2",
        worst < KL_MAX_SE,
        format!("KL oracle: worst |closed form - Monte Carlo| = {worst:.2} SE over {KL_INSTANCES} instances (< {KL_MAX_SE})"),
    )]
}

fn random_simplex(rng: &mut ChaCha8Rng, m: usize) -> CompositionWeights {
    // Occasionally exact zeros, to exercise the simplex boundary.
    let mut v: Vec<f64> = (0..m).map(|_| if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.0..1.0) }).collect();
    if v.iter().all(|&x| x == 0.0) {
        v[0] = 1.0;
    }
    let s: f64 = v.iter().sum();
    CompositionWeights::new(v.into_iter().map(|x| x / s).collect()).unwrap()
}

fn geometry() -> Vec<Outcome> {
    let e = |i| CompositionWeights::one_hot(3, i).unwrap();
    let half = CompositionWeights::new(vec![0.5, 0.5, 0.0]).unwrap();
    let analytic = [
        (fisher_rao_distance(&e(0), &e(0)).unwrap(), 0.0),
        (fisher_rao_distance(&e(0), &half).unwrap(), std::f64::consts::FRAC_PI_2),
        (fisher_rao_distance(&e(0), &e(1)).unwrap(), std::f64::consts::PI),
    ];
    let fr_err = analytic.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut lin, mut closure) = (0.0f64, 0.0f64);
    let mut done = 0;
    while done < SIMPLEX_INTERPOLATIONS {
        let m = rng.random_range(2..9);
        let (a, b) = (random_simplex(&mut rng, m), random_simplex(&mut rng, m));
        let t = rng.random_range(0.0..=1.0);
        // Disjoint supports are antipodal; the geodesic is not unique there.
        let Ok(p) = geodesic_interpolate(&a, &b, t) else { continue };
        done += 1;
        let s: f64 = p.as_slice().iter().sum();
        let neg = p.as_slice().iter().map(|&x| (-x).max(0.0)).fold(0.0, f64::max);
        closure = closure.max((s - 1.0).abs()).max(neg);
        let total = fisher_rao_distance(&a, &b).unwrap();
        lin = lin.max((fisher_rao_distance(&a, &p).unwrap() - t * total).abs());
    }
    vec![outcome(
        "3",
        fr_err < FR_ANALYTIC_TOL && lin < GEODESIC_LINEARITY_TOL && closure < SIMPLEX_CLOSURE_TOL,
        format!(
            "geometry: FR analytic error {fr_err:.1e} (< {FR_ANALYTIC_TOL:e}), arc-length linearity {lin:.1e} (< {GEODESIC_LINEARITY_TOL:e}), simplex closure {closure:.1e} over {SIMPLEX_INTERPOLATIONS} interpolations (< {SIMPLEX_CLOSURE_TOL:e})"
        ),
    )]
}

/// Sum of a few random low-frequency modes, scaled to a random peak speed
/// of at most `SVF_MAX_SPEED_PX`.
fn smooth_field(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; 2 * n * n];
    for c in 0..2 {
        for _ in 0..4 {
            let (fx, fy) = (rng.random_range(0.0..1.5), rng.random_range(0.0..1.5));
            let (px, py) = (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3));
            let a = rng.random_range(-1.0..1.0);
            for i in 0..n {
                for j in 0..n {
                    let (x, y) = (j as f64 / n as f64, i as f64 / n as f64);
                    let tau = std::f64::consts::TAU;
                    v[c * n * n + i * n + j] += a * (tau * fx * x + px).sin() * (tau * fy * y + py).cos();
                }
            }
        }
    }
    let peak = (0..n * n).map(|k| v[k].hypot(v[n * n + k])).fold(0.0, f64::max);
    let target = rng.random_range(1.0..=SVF_MAX_SPEED_PX);
    v.iter().map(|x| x * target / peak).collect()
}

fn diffeomorphism() -> Vec<Outcome> {
    let n = SVF_SIZE;
    let mgn = SVF_INTERIOR_MARGIN;
    let steps = deformation::SQUARING_STEPS;
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut inv_err, mut worst_frac) = (0.0f64, 1.0f64);
    for _ in 0..SVF_FIELDS {
        let v = T64::new(smooth_field(&mut rng, n), &[1, 2, n, n]);
        let fwd = deformation::exponentiate(&v, steps).unwrap();
        let inv = deformation::invert(&v, steps).unwrap();
        let id = deformation::compose(&fwd, &inv).unwrap();
        let d = id.disp.data();
        for i in mgn..n - mgn {
            for j in mgn..n - mgn {
                inv_err = inv_err.max(d[i * n + j].hypot(d[n * n + i * n + j]));
            }
        }
        let jac = deformation::jacobian_determinants(&fwd.disp, mgn);
        let frac = jac.iter().filter(|&&j| j > 0.0).count() as f64 / jac.len() as f64;
        worst_frac = worst_frac.min(frac);
    }

    // v(x) = A x about the image centre; exp is a rotation by 0.1 rad.
    let (a, c) = (0.1f64, (n as f64 - 1.0) / 2.0);
    let mut lv = vec![0.0; 2 * n * n];
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (j as f64 - c, i as f64 - c);
            lv[i * n + j] = a * y;
            lv[n * n + i * n + j] = -a * x;
        }
    }
    let phi = deformation::exponentiate(&T64::new(lv, &[1, 2, n, n]), steps).unwrap();
    let d = phi.disp.data();
    let mut expm_err = 0.0f64;
    for i in mgn..n - mgn {
        for j in mgn..n - mgn {
            let (x, y) = (j as f64 - c, i as f64 - c);
            let (ex, ey) = (a.cos() * x + a.sin() * y - x, -a.sin() * x + a.cos() * y - y);
            expm_err = expm_err.max((d[i * n + j] - ex).hypot(d[n * n + i * n + j] - ey));
        }
    }
    vec![outcome(
        "4",
        inv_err < SVF_INVERSE_TOL_PX && worst_frac >= SVF_POSITIVE_JACOBIAN_FRACTION && expm_err < SVF_EXPM_TOL_PX,
        format!(
            "diffeomorphism: {SVF_FIELDS} fields at {n}x{n}, max interior |phi o phi^-1 - id| {inv_err:.3} px (< {SVF_INVERSE_TOL_PX}), min positive-Jacobian fraction {worst_frac:.5} (>= {SVF_POSITIVE_JACOBIAN_FRACTION}), matrix-exponential error {expm_err:.4} px (< {SVF_EXPM_TOL_PX})"
        ),
    )]
}

fn tiny_model_config(m: usize) -> ModelConfig {
    ModelConfig {
        levels: 3,
        velocity_levels: vec![0, 2],
        num_bases: m,
        image_size: 16,
        latent_channels: 4,
        base_channels: 4,
        registration_channels: 4,
        ..ModelConfig::default()
    }
}

fn decomposition() -> Vec<Outcome> {
    let g = GeneratorConfig {
        size: 16,
        ..GeneratorConfig::default()
    };
    let src = generate_split(&g, Split::SourceTrain);
    let tgt = generate_split(&g, Split::TargetTrain);
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst = 0.0f64;
    for _ in 0..DECOMPOSITION_STATES {
        let model = Model::new(tiny_model_config(rng.random_range(2..7)), &mut rng).unwrap();
        let pick = |rng: &mut ChaCha8Rng, xs: &'_ [Sample]| -> Vec<Sample> {
            (0..rng.random_range(2..5)).map(|_| xs[rng.random_range(0..xs.len())].clone()).collect()
        };
        let (bs, bt) = (pick(&mut rng, &src), pick(&mut rng, &tgt));
        let lam: [f64; 5] = std::array::from_fn(|_| rng.random_range(0.0..20.0));
        let w = LossWeights::new(lam, 0.05);
        let p = model.bind();
        let terms = |xs: &[Sample], rng: &mut ChaCha8Rng, labelled: bool| {
            let refs: Vec<&Sample> = xs.iter().collect();
            let x = training::image_batch(&refs, 16).unwrap();
            let f = model.forward(&p, &x, Provenance::Sampled, rng).unwrap();
            let labels: Option<Vec<u8>> = labelled.then(|| xs.iter().flat_map(|s| s.label.clone().unwrap()).collect());
            training::batch_terms(&model, &f, &x, labels.as_deref(), &w, true).unwrap()
        };
        let (ts, tt) = (terms(&bs, &mut rng, true), terms(&bt, &mut rng, false));
        let tem = manifold::surrogate_template_loss(&model.bank(&p).unwrap(), TemplateReduction::PerElement).unwrap();
        let sa = losses::stage_loss_sa(&ts, &tt, &tem, &w).unwrap().loss.item() as f64;
        let mut l2 = lam;
        l2[3] *= 2.0;
        l2[4] *= 2.0;
        let sf1 = losses::stage_loss_sf1(&ts, &tem, &LossWeights::new(l2, 0.05)).unwrap().loss.item() as f64;
        let sf2 = losses::stage_loss_sf2(&tt, &w).loss.item() as f64;
        worst = worst.max((sa - 0.5 * (sf1 + sf2)).abs() / sa.abs().max(1e-12));
    }
    vec![outcome(
        "5",
        worst < DECOMPOSITION_TOL,
        format!("decomposition: max relative |SA - (SF1 + SF2)/2| {worst:.2e} over {DECOMPOSITION_STATES} model/batch states (< {DECOMPOSITION_TOL:e})"),
    )]
}

/// Worst relative error of d f / d input over all inputs.
fn grad_error(inputs: &[(Vec<f64>, Vec<usize>)], f: impl Fn(&[T64]) -> T64) -> f64 {
    let params: Vec<T64> = inputs.iter().map(|(d, s)| T64::param(d.clone(), s)).collect();
    let grads = f(&params).backward();
    let mut worst = 0.0f64;
    for (i, (data, shape)) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(&params[i]);
        let numeric = numeric_gradient(
            |x| {
                let ts: Vec<T64> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, (d, s))| if j == i { T64::new(x.to_vec(), shape) } else { T64::new(d.clone(), s) })
                    .collect();
                f(&ts).item()
            },
            data,
            1e-6,
        );
        worst = worst.max(relative_error(&analytic, &numeric, 1e-6));
    }
    worst
}

fn gradients() -> Vec<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut rows: Vec<(&str, f64)> = Vec::new();

    let (m, shape) = (3, [3usize, 2, 2, 2]);
    let n: usize = shape.iter().product();
    let bank_in = vec![
        (rand_vec(&mut rng, n, -1.0, 1.0), shape.to_vec()),
        (rand_vec(&mut rng, n, -0.5, 0.5), shape.to_vec()),
        (rand_vec(&mut rng, n * 2, -1.0, 1.0), vec![m, 1, 4, 4]),
        (rand_vec(&mut rng, n * 2, -0.5, 0.5), vec![m, 1, 4, 4]),
    ];
    rows.push((
        "template",
        grad_error(&bank_in, |t| {
            let bank = BasisBank::from_raw(vec![t[0].clone(), t[2].clone()], vec![t[1].clone(), t[3].clone()]).unwrap();
            manifold::surrogate_template_loss(&bank, TemplateReduction::PerElement).unwrap()
        }),
    ));

    // Logits through a softmax keep the weights on the simplex; the hinge is
    // checked away from its kink.
    let logits = vec![(rand_vec(&mut rng, 5 * 4, -2.0, 2.0), vec![5, 4])];
    let tau = {
        let w = T64::new(logits[0].0.clone(), &[5, 4]).softmax(1);
        let mut usage: Vec<f64> = (0..4).map(|k| (0..5).map(|i| w.data()[i * 4 + k]).sum::<f64>() / 5.0).collect();
        usage.sort_by(f64::total_cmp);
        0.5 * (usage[1] + usage[2])
    };
    rows.push(("usage", grad_error(&logits, |t| losses::usage_loss(&t[0].softmax(1), tau).unwrap())));

    let labels: Vec<Vec<u8>> = (0..5).map(|_| (0..36).map(|_| rng.random_range(0..3)).collect()).collect();
    let refs: Vec<&[u8]> = labels.iter().map(Vec::as_slice).collect();
    rows.push(("struct", grad_error(&logits, |t| losses::struct_loss(&t[0].softmax(1), &refs, 3).unwrap())));

    let vel_in = vec![
        (rand_vec(&mut rng, 2 * 2 * 5 * 5, -2.0, 2.0), vec![2, 2, 5, 5]),
        (rand_vec(&mut rng, 2 * 2 * 5 * 5, 0.2, 2.0), vec![2, 2, 5, 5]),
    ];
    rows.push((
        "velocity_kl",
        grad_error(&vel_in, |t| {
            let v = VelocityField {
                mean: t[0].clone(),
                var: t[1].clone(),
                level: 0,
            };
            deformation::velocity_kl(&v, 10.0, 0.01).unwrap()
        }),
    ));

    // Keep |x - mu| away from zero, where the Laplace term has a kink.
    let x = rand_vec(&mut rng, 2 * 16, 0.0, 1.0);
    let mu: Vec<f64> = x.iter().map(|v| v + if rng.random_bool(0.5) { 0.3 } else { -0.3 } * rng.random_range(0.2..1.0)).collect();
    let nll_in = vec![
        (x, vec![2, 1, 4, 4]),
        (mu, vec![2, 1, 4, 4]),
        (rand_vec(&mut rng, 2 * 16, 0.1, 1.0), vec![2, 1, 4, 4]),
    ];
    rows.push(("recon_nll", grad_error(&nll_in, |t| losses::recon_nll(&t[0], &t[1], &t[2]).unwrap())));

    let seg_labels: Vec<u8> = (0..2 * 25).map(|_| rng.random_range(0..4)).collect();
    let seg_in = vec![(rand_vec(&mut rng, 2 * 4 * 25, -2.0, 2.0), vec![2, 4, 5, 5])];
    rows.push(("seg_loss", grad_error(&seg_in, |t| losses::seg_loss(&t[0].softmax(1), &seg_labels).unwrap())));

    let worst = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    let listing: Vec<String> = rows.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    vec![outcome(
        "6",
        worst < GRAD_TOL,
        format!("gradient checks (rel. err < {GRAD_TOL:e}): {}", listing.join(", ")),
    )]
}

fn bench_config(mode: Stage, lambdas: [f64; 5], epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::new(mode);
    c.model.image_size = BENCH_SIZE;
    c.model.num_bases = ACTIVATION_M;
    c.weights = LossWeights::new(lambdas, ACTIVATION_TAU);
    c.epochs = epochs;
    c
}

fn mean_dice(model: &Model, samples: &[Sample]) -> f64 {
    evaluation::evaluate(model, samples).unwrap().dsc_avg.mean / 100.0
}

fn benchmark() -> Vec<Outcome> {
    let t0 = Instant::now();
    let g = GeneratorConfig::default();
    assert_eq!(g.size, BENCH_SIZE);
    let split = |s| generate_split(&g, s);
    let source = DomainData {
        train: split(Split::SourceTrain),
        val: split(Split::SourceVal),
    };
    let target = DomainData {
        train: split(Split::TargetTrain),
        val: split(Split::TargetVal),
    };
    let test = split(Split::TargetTest);
    let dir = tempfile::tempdir().unwrap();
    let paths = |name: &str| RunPaths::new(dir.path().join(name));

    let sa = training::train_sa(&bench_config(Stage::Sa, SA_LAMBDAS, SA_EPOCHS), &source, &target, &paths("sa"), None).unwrap();
    let sf1 = training::train_sf1(&bench_config(Stage::Sf1, SF1_LAMBDAS, SF1_EPOCHS), &source, &paths("sf1"), None).unwrap();
    let sf2 = training::train_sf2(&bench_config(Stage::Sf2, SF2_LAMBDAS, SF2_EPOCHS), &target, &sf1.best, &paths("sf2")).unwrap();
    let mut ablated_cfg = bench_config(Stage::Sa, SA_LAMBDAS, SA_EPOCHS);
    ablated_cfg.usage = false;
    let ablated = training::train_sa(&ablated_cfg, &source, &target, &paths("sa_no_usage"), None).unwrap();
    let secs = t0.elapsed().as_secs_f64();

    let d_sa = mean_dice(&sa.best.model, &test);
    let d_sf = mean_dice(&sf2.best.model, &test);
    let d_base = mean_dice(&sf1.best.model, &test);
    let passed7 = d_sa >= BENCH_SA_MIN_DSC
        && (d_sf - d_sa).abs() <= BENCH_SF_MAX_GAP
        && d_sa - d_base >= BENCH_MIN_MARGIN
        && d_sf - d_base >= BENCH_MIN_MARGIN
        && secs < BENCH_CPU_BUDGET_S;

    let (before, after) = (&sf1.best.model.store, &sf2.best.model.store);
    let frozen: Vec<String> = SF2_FROZEN
        .iter()
        .map(|&g| format!("{g} {}", &after.group_checksum(g)[..12]))
        .collect();
    let passed8 = SF2_FROZEN.iter().all(|&g| before.group_checksum(g) == after.group_checksum(g))
        && after.group_checksum(Group::Content) != before.group_checksum(Group::Content);

    let mut all = source.train.clone();
    all.extend(target.train.iter().cloned());
    let act = evaluation::basis_activation_report(&sa.best.model, &all, ACTIVATION_THRESHOLD).unwrap();
    let act_ablated = evaluation::basis_activation_report(&ablated.best.model, &all, ACTIVATION_THRESHOLD).unwrap();
    let usage = |u: &[f64]| u.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ");

    vec![
        outcome(
            "7",
            passed7,
            format!(
                "benchmark ({BENCH_SIZE}x{BENCH_SIZE}, target test DSC): SA {d_sa:.4} (>= {BENCH_SA_MIN_DSC}), SF {d_sf:.4} (|SF - SA| {:.4} <= {BENCH_SF_MAX_GAP}), no adaptation {d_base:.4} (margins {:.4} / {:.4} >= {BENCH_MIN_MARGIN}), {:.1} min CPU (< {} min)",
                (d_sf - d_sa).abs(),
                d_sa - d_base,
                d_sf - d_base,
                secs / 60.0,
                BENCH_CPU_BUDGET_S / 60.0
            ),
        ),
        outcome("8", passed8, format!("freeze invariant: frozen checksums after sf2 equal stage 1 ({})", frozen.join(", "))),
        outcome(
            "9",
            act.activated == ACTIVATION_M && act_ablated.activated <= ACTIVATION_M,
            format!(
                "basis activation (M = {ACTIVATION_M}, tau = {ACTIVATION_TAU}): {} of {ACTIVATION_M} activated, mean usage [{}]; usage-ablated run: {} activated, mean usage [{}]",
                act.activated,
                usage(&act.mean_usage),
                act_ablated.activated,
                usage(&act_ablated.mean_usage)
            ),
        ),
    ]
}

fn determinism() -> Vec<Outcome> {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("c.toml");
    std::fs::write(
        &cfg,
        "version = 1\nseed = 11\nlevels = 3\nimage_size = 16\nlatent_channels = 4\nbase_channels = 4\nregistration_channels = 4\nepochs = 2\ngen_size = 16\ngen_source_train = 8\ngen_source_val = 2\ngen_target_train = 8\ngen_target_val = 2\ngen_target_test = 4\n",
    )
    .unwrap();
    let run = |args: &[&Path]| {
        let out = Command::new(env!("CARGO_BIN_EXE_anatomix"))
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    let p = Path::new;
    run(&[p("generate-data"), p("--config"), &cfg, p("--out"), &root.join("data")]);
    let mut files = Vec::new();
    for r in ["a", "b"] {
        let out = root.join(r);
        run(&[p("train"), p("--mode"), p("sa"), p("--config"), &cfg, p("--data"), &root.join("data"), p("--out"), &out, p("--deterministic")]);
        run(&[p("evaluate"), p("--ckpt"), &out.join("best.ckpt"), p("--data"), &root.join("data"), p("--out"), &out.join("eval")]);
        let read = |f: &str| std::fs::read(out.join(f)).unwrap();
        files.push([read("loss_log.csv"), read("validation.csv"), read("eval/metrics.csv"), read("eval/summary.json")]);
    }
    let same = files[0] == files[1];
    let rows = String::from_utf8_lossy(&files[0][0]).lines().count() - 1;
    vec![outcome(
        "10",
        same && rows > 0,
        format!("determinism: two --deterministic runs give bitwise-identical loss logs ({rows} steps), validation logs and metric reports: {same}"),
    )]
}

fn brute_dsc(a: &[u8], b: &[u8], k: u8) -> f64 {
    let sa: HashSet<usize> = (0..a.len()).filter(|&i| a[i] == k).collect();
    let sb: HashSet<usize> = (0..b.len()).filter(|&i| b[i] == k).collect();
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
}

/// Surface by explicit neighbour test, then all-pairs distances.
fn brute_assd(a: &[u8], b: &[u8], h: usize, w: usize, k: u8, sp: (f64, f64)) -> f64 {
    let surf = |m: &[u8]| -> Vec<(f64, f64)> {
        let inside = |i: i64, j: i64| i >= 0 && j >= 0 && i < h as i64 && j < w as i64 && m[i as usize * w + j as usize] == k;
        let mut out = Vec::new();
        for i in 0..h as i64 {
            for j in 0..w as i64 {
                if inside(i, j) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(di, dj)| !inside(i + di, j + dj)) {
                    out.push((i as f64 * sp.0, j as f64 * sp.1));
                }
            }
        }
        out
    };
    let (sa, sb) = (surf(a), surf(b));
    if sa.is_empty() && sb.is_empty() {
        return 0.0;
    }
    let directed = |f: &[(f64, f64)], t: &[(f64, f64)]| {
        f.iter()
            .map(|p| t.iter().map(|q| (p.0 - q.0).hypot(p.1 - q.1)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / f.len() as f64
    };
    0.5 * (directed(&sa, &sb) + directed(&sb, &sa))
}

fn metrics() -> Vec<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let (mut dsc_exact, mut assd_err, mut compared) = (true, 0.0f64, 0);
    for _ in 0..METRIC_PAIRS {
        let (h, w) = (rng.random_range(4..24), rng.random_range(4..24));
        let density = rng.random_range(0.05..0.6);
        let mut mask = || -> Vec<u8> {
            (0..h * w)
                .map(|_| if rng.random_bool(density) { rng.random_range(1..3) } else { 0 })
                .collect()
        };
        let (a, b) = (mask(), mask());
        let sp = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
        for k in 1..3u8 {
            dsc_exact &= dsc(&a, &b, k) == brute_dsc(&a, &b, k);
            if surface(&a, h, w, k).is_empty() != surface(&b, h, w, k).is_empty() {
                continue;
            }
            assd_err = assd_err.max((assd(&a, &b, h, w, k, sp).value - brute_assd(&a, &b, h, w, k, sp)).abs());
            compared += 1;
        }
    }
    vec![outcome(
        "11",
        dsc_exact && assd_err < ASSD_TOL_MM && compared > METRIC_PAIRS,
        format!("metrics on {METRIC_PAIRS} random mask pairs: dsc exact {dsc_exact}, max assd error {assd_err:.1e} mm over {compared} class pairs (< {ASSD_TOL_MM:e})"),
    )]
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let suites: [(&[&str], fn() -> Vec<Outcome>); 9] = [
        (&["1"], mixture_oracle),
        (&["2"], kl_oracle),
        (&["3"], geometry),
        (&["4"], diffeomorphism),
        (&["5"], decomposition),
        (&["6"], gradients),
        (&["11"], metrics),
        (&["10"], determinism),
        (&["7", "8", "9"], benchmark),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (ids, suite) in suites {
        if !filters.is_empty() && !ids.iter().any(|i| filters.iter().any(|f| f == i)) {
            continue;
        }
        for o in suite() {
            ran += 1;
            failed += !o.passed as usize;
            println!("{} criterion {:>2}: {}", if o.passed { "PASS" } else { "FAIL" }, o.id, o.detail);
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
