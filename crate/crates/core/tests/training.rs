use anatomix_core::checkpoint::Checkpoint;
use anatomix_core::data::{generate_split, GeneratorConfig, Split};
use anatomix_core::losses::Stage;
use anatomix_core::manifold::Provenance;
use anatomix_core::networks::{Group, ModelConfig};
use anatomix_core::training::{
    image_batch, train_sa, train_sf1, train_sf2, DomainData, RunPaths, TrainConfig, SF2_FROZEN,
};
use anatomix_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn gen() -> GeneratorConfig {
    GeneratorConfig {
        size: 16,
        source_train: 8,
        source_val: 2,
        target_train: 8,
        target_val: 2,
        target_test: 2,
        ..GeneratorConfig::default()
    }
}

fn data(train: Split, val: Split) -> DomainData {
    DomainData {
        train: generate_split(&gen(), train),
        val: generate_split(&gen(), val),
    }
}

fn tiny(mode: Stage, epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::new(mode);
    c.model = ModelConfig {
        levels: 3,
        velocity_levels: vec![0, 2],
        num_bases: 4,
        image_size: 16,
        latent_channels: 4,
        base_channels: 4,
        registration_channels: 4,
        ..ModelConfig::default()
    };
    c.epochs = epochs;
    c.seed = 3;
    c
}

#[test]
fn one_epoch_smoke_for_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let src = data(Split::SourceTrain, Split::SourceVal);
    let tgt = data(Split::TargetTrain, Split::TargetVal);

    let sa = RunPaths::new(dir.path().join("sa"));
    let out = train_sa(&tiny(Stage::Sa, 1), &src, &tgt, &sa, None).unwrap();
    assert!(out.reports.iter().all(|r| r.total.is_finite()));
    assert_eq!(out.reports.len(), 2);
    assert!(sa.last().is_file() && sa.best().is_file());
    assert_eq!(Checkpoint::load(&sa.last()).unwrap().stage, Stage::Sa);

    let sf1 = RunPaths::new(dir.path().join("sf1"));
    let s1 = train_sf1(&tiny(Stage::Sf1, 1), &src, &sf1, None).unwrap();
    let log = std::fs::read_to_string(sf1.loss_log()).unwrap();
    assert_eq!(log.lines().count(), 1 + s1.reports.len());

    let sf2 = RunPaths::new(dir.path().join("sf2"));
    let s2 = train_sf2(&tiny(Stage::Sf2, 1), &tgt, &s1.last, &sf2).unwrap();
    assert_eq!(s2.last.stage, Stage::Sf2);
    assert!(sf2.validation_log().is_file());
}

#[test]
fn sf2_leaves_frozen_groups_bitwise_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let src = data(Split::SourceTrain, Split::SourceVal);
    let tgt = data(Split::TargetTrain, Split::TargetVal);
    let s1 = train_sf1(&tiny(Stage::Sf1, 1), &src, &RunPaths::new(dir.path().join("a")), None).unwrap();
    let s2 = train_sf2(&tiny(Stage::Sf2, 2), &tgt, &s1.last, &RunPaths::new(dir.path().join("b"))).unwrap();
    let (before, after) = (&s1.last.model.store, &s2.last.model.store);
    for g in Group::ALL {
        let same = before.group_checksum(g) == after.group_checksum(g);
        assert_eq!(same, SF2_FROZEN.contains(&g), "{g}");
    }
    // Frozen slots are never registered with the optimizer.
    for (i, p) in after.params.iter().enumerate() {
        if SF2_FROZEN.contains(&p.group) {
            assert!(s2.last.optimizer.slot(i).is_none(), "{}", p.name);
        }
    }
    let mut store = s2.last.model.store.clone();
    let i = store.params.iter().position(|p| p.group == Group::Bases).unwrap();
    assert!(matches!(store.data_mut(i), Err(Error::Invariant(_))));
}

#[test]
fn sf2_rejects_a_source_accessible_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let src = data(Split::SourceTrain, Split::SourceVal);
    let tgt = data(Split::TargetTrain, Split::TargetVal);
    let sa = train_sa(&tiny(Stage::Sa, 1), &src, &tgt, &RunPaths::new(dir.path().join("sa")), None).unwrap();
    let e = train_sf2(&tiny(Stage::Sf2, 1), &tgt, &sa.last, &RunPaths::new(dir.path().join("x"))).err().unwrap();
    assert!(matches!(e, Error::Config(_)), "{e}");
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let src = data(Split::SourceTrain, Split::SourceVal);
    let paths = RunPaths::new(dir.path());
    let out = train_sf1(&tiny(Stage::Sf1, 1), &src, &paths, None).unwrap();
    let bytes = out.last.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.step, out.last.step);
    assert_eq!(back.config_hash, out.last.config_hash);

    let refs: Vec<_> = src.val.iter().collect();
    let x = image_batch(&refs, 16).unwrap();
    let fwd = |c: &Checkpoint| {
        let p = c.model.bind();
        let f = c.model.forward(&p, &x, Provenance::Expectation, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (f.seg.data().to_vec(), f.recon_mu.data().to_vec(), f.weights.data().to_vec())
    };
    let (a, b) = (fwd(&out.last), fwd(&Checkpoint::load(&paths.last()).unwrap()));
    assert!(a.0.iter().zip(&b.0).all(|(u, v)| u.to_bits() == v.to_bits()));
    assert!(a.1.iter().zip(&b.1).all(|(u, v)| u.to_bits() == v.to_bits()));
    assert!(a.2.iter().zip(&b.2).all(|(u, v)| u.to_bits() == v.to_bits()));

    let mut bad = bytes.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 1;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn fixed_seed_runs_log_identical_losses() {
    let src = data(Split::SourceTrain, Split::SourceVal);
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let paths = RunPaths::new(dir.path());
        train_sf1(&tiny(Stage::Sf1, 2), &src, &paths, None).unwrap();
        std::fs::read(paths.loss_log()).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let src = data(Split::SourceTrain, Split::SourceVal);
    let full = tempfile::tempdir().unwrap();
    let full_paths = RunPaths::new(full.path());
    let straight = train_sf1(&tiny(Stage::Sf1, 2), &src, &full_paths, None).unwrap();

    let split = tempfile::tempdir().unwrap();
    let paths = RunPaths::new(split.path());
    let first = train_sf1(&tiny(Stage::Sf1, 1), &src, &paths, None).unwrap();
    let resumed = train_sf1(&tiny(Stage::Sf1, 2), &src, &paths, Some(&first.last)).unwrap();
    assert_eq!(resumed.last.to_bytes(), straight.last.to_bytes());
    assert_eq!(
        std::fs::read(paths.loss_log()).unwrap(),
        std::fs::read(full_paths.loss_log()).unwrap()
    );
}

#[test]
fn invalid_configs_are_rejected_before_training() {
    let src = data(Split::SourceTrain, Split::SourceVal);
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(Stage::Sf1, 1);
    c.weights.tau = 0.3;
    c.batch_source = 1;
    match train_sf1(&c, &src, &RunPaths::new(dir.path()), None) {
        Err(Error::Validation(v)) => assert!(v.len() >= 2, "{v:?}"),
        other => panic!("expected validation errors, got {:?}", other.err()),
    }
    let empty = DomainData { train: vec![], val: src.val.clone() };
    assert!(train_sf1(&tiny(Stage::Sf1, 1), &empty, &RunPaths::new(dir.path()), None).is_err());
}
