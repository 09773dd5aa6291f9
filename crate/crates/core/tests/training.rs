use std::fs;
use std::path::{Path, PathBuf};

use fcgan::checkpoint::{load_checkpoint, save_checkpoint, FORMAT_VERSION};
use fcgan::train::{
    fit, TrainConfig, TrainState, LATEST_CHECKPOINT, VALIDATION_FILE, VALIDATION_HEADER,
};
use fcgan::{Checkpoint, Error, WidthMultiplier};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/faces")
}

fn tiny(out: &Path) -> TrainConfig {
    TrainConfig {
        width_multiplier: WidthMultiplier::new(1, 32).unwrap(),
        image_size: 64,
        batch_size: 2,
        max_steps: 8,
        checkpoint_every: 4,
        seed: 2,
        log_wall_time: false,
        corpus_dir: Some(fixtures()),
        output_dir: Some(out.to_path_buf()),
        ..Default::default()
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let cfg = tiny(Path::new("unused"));
    let ckpt = Checkpoint {
        config: cfg.without_paths(),
        state: TrainState::init(&cfg).unwrap(),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.fcgn");
    save_checkpoint(&path, &ckpt).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes(), fs::read(&path).unwrap());
    assert_eq!(&fs::read(&path).unwrap()[..4], b"FCGN");
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let cfg = tiny(Path::new("unused"));
    let bytes = Checkpoint {
        config: cfg.without_paths(),
        state: TrainState::init(&cfg).unwrap(),
    }
    .to_bytes();
    let dir = tempfile::tempdir().unwrap();

    let cut = dir.path().join("cut.fcgn");
    fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    match load_checkpoint(&cut) {
        Err(Error::Checkpoint { offset, .. }) => assert!(offset > 8 && offset <= bytes.len() / 2),
        other => panic!("expected checkpoint error, got {other:?}"),
    }

    let mut future = bytes.clone();
    future[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    let path = dir.path().join("future.fcgn");
    fs::write(&path, &future).unwrap();
    assert!(matches!(
        load_checkpoint(&path),
        Err(Error::Version { found, expected }) if found == FORMAT_VERSION + 1 && expected == FORMAT_VERSION
    ));
}

#[test]
fn fit_writes_validation_rows_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let out = fit(&tiny(dir.path())).unwrap();
    assert_eq!(out.checkpoint.state.step, 8);
    // 10 fixtures split 9/1/0; two-image batches give 4 steps per epoch.
    let text = fs::read_to_string(dir.path().join(VALIDATION_FILE)).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], VALIDATION_HEADER);
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,4,") && lines[2].starts_with("2,8,"));
    for line in &lines[1..] {
        for v in line.split(',').skip(2) {
            assert!(v.parse::<f64>().unwrap().is_finite());
        }
    }
}

#[test]
fn divergence_halts_and_keeps_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e30,
        checkpoint_every: 1,
        max_steps: 50,
        ..tiny(dir.path())
    };
    let err = fit(&cfg).unwrap_err();
    let Error::Diverged { step, .. } = err else {
        panic!("expected divergence, got {err:?}");
    };
    let kept = load_checkpoint(&dir.path().join(LATEST_CHECKPOINT)).unwrap();
    assert_eq!(kept.state.step, step - 1);
    assert!(kept.state.g.params.ensure_finite("g").is_ok());
    let rows = fs::read_to_string(dir.path().join("metrics.csv"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(rows as u64, step);
}

#[test]
fn resume_rejects_mismatched_layout() {
    let dir = tempfile::tempdir().unwrap();
    fit(&TrainConfig {
        max_steps: 4,
        ..tiny(dir.path())
    })
    .unwrap();
    let other = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        width_multiplier: WidthMultiplier::new(1, 16).unwrap(),
        resume: Some(dir.path().join(LATEST_CHECKPOINT)),
        ..tiny(other.path())
    };
    assert!(matches!(fit(&cfg), Err(Error::Invalid(_))));
}

#[test]
fn config_file_paths_are_relative_to_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    fs::write(&path, "output_dir = out\ncorpus_dir = /abs/corpus\n").unwrap();
    let cfg = TrainConfig::load(&path).unwrap();
    assert_eq!(cfg.output_dir.unwrap(), dir.path().join("out"));
    assert_eq!(cfg.corpus_dir.unwrap(), PathBuf::from("/abs/corpus"));
}
