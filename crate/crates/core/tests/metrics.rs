use anatomix_core::data::{Domain, Sample};
use anatomix_core::evaluation::{assd, dsc, evaluate_predictions, mean_foreground_dice, surface, MetricReport};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// All-pairs ASSD.
fn brute_assd(a: &[u8], b: &[u8], h: usize, w: usize, k: u8, sp: (f64, f64)) -> f64 {
    let (sa, sb) = (surface(a, h, w, k), surface(b, h, w, k));
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| {
        from.iter()
            .map(|&(i, j)| {
                to.iter()
                    .map(|&(p, q)| {
                        let dy = (i as f64 - p as f64) * sp.0;
                        let dx = (j as f64 - q as f64) * sp.1;
                        (dy * dy + dx * dx).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / from.len() as f64
    };
    0.5 * (directed(&sa, &sb) + directed(&sb, &sa))
}

fn blob_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<u8> {
    let mut m = vec![0u8; h * w];
    for _ in 0..rng.random_range(1..4) {
        let (ci, cj) = (rng.random_range(0..h) as f64, rng.random_range(0..w) as f64);
        let r = rng.random_range(1.0..5.0);
        for i in 0..h {
            for j in 0..w {
                if (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2) <= r * r {
                    m[i * w + j] = rng.random_range(1..3);
                }
            }
        }
    }
    m
}

#[test]
fn dsc_hand_cases() {
    let block = |r: usize, c: usize| {
        let mut m = vec![0u8; 16];
        for i in r..r + 2 {
            for j in c..c + 2 {
                m[i * 4 + j] = 1;
            }
        }
        m
    };
    assert_eq!(dsc(&block(0, 0), &block(0, 0), 1), 1.0);
    assert_eq!(dsc(&block(0, 0), &block(2, 2), 1), 0.0);
    assert_eq!(dsc(&block(0, 0), &block(0, 1), 1), 0.5);
    assert_eq!(dsc(&[0; 16], &[0; 16], 1), 1.0);
    assert_eq!(dsc(&block(0, 0), &[0; 16], 1), 0.0);
}

#[test]
fn assd_hand_cases() {
    let (h, w) = (12, 12);
    let mut a = vec![0u8; h * w];
    let mut b = vec![0u8; h * w];
    a[3 * w + 2] = 1;
    b[3 * w + 7] = 1;
    assert!((assd(&a, &b, h, w, 1, (1.0, 1.0)).value - 5.0).abs() < 1e-12);
    assert_eq!(assd(&a, &a, h, w, 1, (1.0, 1.0)).value, 0.0);
    let both_empty = assd(&[0; 144], &[0; 144], h, w, 1, (1.0, 1.0));
    assert_eq!((both_empty.value, both_empty.fallback), (0.0, false));
    let one_empty = assd(&a, &[0; 144], h, w, 1, (2.0, 1.0));
    assert!(one_empty.fallback);
    assert!((one_empty.value - (24.0f64.powi(2) + 12.0f64.powi(2)).sqrt()).abs() < 1e-12);
}

#[test]
fn assd_matches_all_pairs_on_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let (h, w) = (rng.random_range(6..20), rng.random_range(6..20));
        let (a, b) = (blob_mask(&mut rng, h, w), blob_mask(&mut rng, h, w));
        let sp = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
        for k in 1..3u8 {
            let got = assd(&a, &b, h, w, k, sp);
            if got.fallback || surface(&a, h, w, k).is_empty() {
                continue;
            }
            let want = brute_assd(&a, &b, h, w, k, sp);
            assert!((got.value - want).abs() < 1e-9, "{} vs {want}", got.value);
        }
    }
}

fn sample(id: &str, label: Vec<u8>, n: usize) -> Sample {
    Sample {
        subject_id: id.into(),
        domain: Domain::Target,
        height: n,
        width: n,
        image: vec![0.0; n * n],
        label: Some(label),
        spacing: (1.5, 1.5),
    }
}

#[test]
fn perfect_and_background_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 16;
    let samples: Vec<Sample> = (0..4)
        .map(|i| {
            let mut l = blob_mask(&mut rng, n, n);
            l[0] = 1;
            l[1] = 2;
            l[2] = 3;
            sample(&format!("s{i}"), l, n)
        })
        .collect();
    let truth: Vec<Vec<u8>> = samples.iter().map(|s| s.label.clone().unwrap()).collect();
    let r = evaluate_predictions(&truth, &samples, 3).unwrap();
    assert_eq!(r.dsc_avg.mean, 100.0);
    assert_eq!(r.assd_avg.mean, 0.0);
    let bg = vec![vec![0u8; n * n]; 4];
    let r = evaluate_predictions(&bg, &samples, 3).unwrap();
    for s in &r.dsc {
        assert_eq!(s.mean, 0.0);
    }
    assert_eq!(r.fallbacks, 12);
}

#[test]
fn report_mean_recomputes_from_csv_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 16;
    let samples: Vec<Sample> = (0..7).map(|i| sample(&format!("s{i}"), blob_mask(&mut rng, n, n), n)).collect();
    let preds: Vec<Vec<u8>> = (0..7).map(|_| blob_mask(&mut rng, n, n)).collect();
    let r: MetricReport = evaluate_predictions(&preds, &samples, 3).unwrap();
    let csv = r.to_csv();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "dsc_avg").expect("dsc_avg column");
    let vals: Vec<f64> = lines.map(|l| l.split(',').nth(col).unwrap().parse().unwrap()).collect();
    assert_eq!(vals.len(), 7);
    let mean = vals.iter().sum::<f64>() / 7.0;
    let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0).sqrt();
    assert!((mean - r.dsc_avg.mean).abs() < 1e-9);
    assert!((std - r.dsc_avg.std).abs() < 1e-9);
    assert!(r.table().contains("DSC"));
}

#[test]
fn missing_labels_is_a_data_error() {
    let mut s = sample("x", vec![0; 16], 4);
    s.label = None;
    assert!(evaluate_predictions(&[vec![0; 16]], &[s], 3).is_err());
}

fn mask(n: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..3, n)
}

proptest! {
    #[test]
    fn dsc_and_assd_are_symmetric(a in mask(64), b in mask(64), k in 1u8..3) {
        prop_assert_eq!(dsc(&a, &b, k), dsc(&b, &a, k));
        let (x, y) = (assd(&a, &b, 8, 8, k, (1.0, 1.3)), assd(&b, &a, 8, 8, k, (1.0, 1.3)));
        prop_assert!((x.value - y.value).abs() < 1e-12);
        prop_assert!(x.value >= 0.0);
        let d = mean_foreground_dice(&a, &b, 3);
        prop_assert!((0.0..=1.0).contains(&d));
    }
}
