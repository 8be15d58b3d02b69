use anatomix_core::data::{
    dataset_checksum, generate, generate_split, load_dataset, load_split, preprocess, render_image, sample_anatomy,
    GeneratorConfig, IntensityMap, Split, MANIFEST,
};
use anatomix_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn small() -> GeneratorConfig {
    GeneratorConfig {
        size: 32,
        source_train: 5,
        source_val: 2,
        target_train: 4,
        target_val: 2,
        target_test: 3,
        ..GeneratorConfig::default()
    }
}

#[test]
fn same_seed_gives_identical_checksums() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate(&small(), a.path()).unwrap();
    generate(&small(), b.path()).unwrap();
    assert_eq!(dataset_checksum(a.path()).unwrap(), dataset_checksum(b.path()).unwrap());
    let c = tempfile::tempdir().unwrap();
    generate(&GeneratorConfig { seed: 1, ..small() }, c.path()).unwrap();
    assert_ne!(dataset_checksum(a.path()).unwrap(), dataset_checksum(c.path()).unwrap());
}

#[test]
fn round_trip_is_pixel_equal() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    generate(&cfg, dir.path()).unwrap();
    let all = load_dataset(dir.path()).unwrap();
    assert_eq!(all.len(), Split::ALL.len());
    for split in Split::ALL {
        let want = generate_split(&cfg, split);
        let got = &all[split.name()];
        assert_eq!(got.len(), cfg.count(split));
        for (g, w) in got.iter().zip(&want) {
            assert_eq!(g.subject_id, w.subject_id);
            assert_eq!(g.domain, w.domain);
            assert_eq!(g.spacing, w.spacing);
            assert_eq!(g.label, w.label);
            assert_eq!(g.image, w.image, "{}", g.subject_id);
        }
        assert_eq!(got.iter().all(|s| s.label.is_some()), split.labelled());
    }
}

#[test]
fn labels_stay_in_range_and_images_are_normalized() {
    let cfg = GeneratorConfig { size: 32, ..GeneratorConfig::default() };
    let samples = generate_split(&cfg, Split::SourceTrain);
    let mut seen = [false; 4];
    for s in &samples {
        let l = s.label.as_ref().unwrap();
        assert!(l.contains(&0));
        for &v in l {
            assert!((v as usize) <= cfg.num_classes);
            seen[v as usize] = true;
        }
        let lo = s.image.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = s.image.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert!(lo == 0.0 && hi == 1.0, "{lo} {hi}");
    }
    assert!(seen.iter().all(|&s| s));
}

#[test]
fn degenerate_shift_gives_identical_images() {
    let flat = IntensityMap {
        gamma: 1.0,
        invert: false,
        noise_std: 0.0,
        bias_amplitude: 0.0,
    };
    let cfg = GeneratorConfig {
        source: flat.clone(),
        target: flat.clone(),
        ..small()
    };
    let a = sample_anatomy(&cfg, &mut ChaCha8Rng::seed_from_u64(9));
    let x = render_image(&a, 32, cfg.intensity(anatomix_core::data::Domain::Source), &mut ChaCha8Rng::seed_from_u64(1));
    let y = render_image(&a, 32, cfg.intensity(anatomix_core::data::Domain::Target), &mut ChaCha8Rng::seed_from_u64(2));
    assert_eq!(x, y);
}

#[test]
fn empty_directory_loads_nothing() {
    let dir = tempfile::tempdir().unwrap();
    assert!(load_dataset(dir.path()).unwrap().is_empty());
}

fn edit_manifest(f: impl FnOnce(&mut Value)) -> Error {
    let dir = tempfile::tempdir().unwrap();
    generate(&small(), dir.path()).unwrap();
    let split = dir.path().join("source_train");
    let p = split.join(MANIFEST);
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
    f(&mut v);
    std::fs::write(&p, v.to_string()).unwrap();
    load_split(&split).unwrap_err()
}

#[test]
fn malformed_manifest_names_the_field() {
    let e = edit_manifest(|v| {
        v["samples"][1].as_object_mut().unwrap().remove("spacing_mm");
    });
    assert!(matches!(&e, Error::Schema { field, .. } if field == "samples[1].spacing_mm"), "{e}");
    let e = edit_manifest(|v| v["samples"][0]["height"] = Value::from("tall"));
    assert!(matches!(&e, Error::Schema { field, .. } if field == "samples[0].height"), "{e}");
    let e = edit_manifest(|v| v["version"] = Value::from(7));
    assert!(matches!(&e, Error::Schema { field, .. } if field == "version"), "{e}");
    assert!(e.to_string().contains("version"));
}

#[test]
fn unlabelled_source_sample_is_a_data_error() {
    let e = edit_manifest(|v| {
        v["samples"][0].as_object_mut().unwrap().remove("label");
    });
    assert!(matches!(e, Error::Data(_)), "{e}");
}

#[test]
fn preprocess_equal_spacing_only_normalizes() {
    let img: Vec<f32> = (0..64).map(|i| 2.0 + i as f32 * 0.5).collect();
    let out = preprocess(&img, 8, 8, (1.0, 1.0), (1.0, 1.0), 8).unwrap();
    for (o, i) in out.iter().zip(&img) {
        assert!((o - (i - 2.0) / 31.5).abs() < 1e-6);
    }
    assert_eq!(preprocess(&[3.0; 64], 8, 8, (1.0, 1.0), (1.0, 1.0), 8).unwrap(), vec![0.0; 64]);
}

#[test]
fn preprocess_halves_a_ramp_at_double_spacing() {
    // Ramp values are >= 1, so after min-max scaling only zero padding maps
    // to 0 and the resampled extent can be counted directly.
    let (h, w) = (16, 16);
    let img: Vec<f32> = (0..h * w).map(|i| 1.0 + (i % w) as f32).collect();
    let out = preprocess(&img, h, w, (1.0, 1.0), (2.0, 2.0), 16).unwrap();
    let cols: Vec<usize> = (0..16).filter(|&j| out[8 * 16 + j] > 0.0).collect();
    let rows: Vec<usize> = (0..16).filter(|&i| out[i * 16 + 8] > 0.0).collect();
    assert_eq!(cols, (4..12).collect::<Vec<_>>());
    assert_eq!(rows, (4..12).collect::<Vec<_>>());
    assert!(preprocess(&img, h, w, (0.0, 1.0), (1.0, 1.0), 8).is_err());
}
