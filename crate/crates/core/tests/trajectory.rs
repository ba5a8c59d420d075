mod common;

use std::path::PathBuf;

use sha2::{Digest, Sha256};
use trajlens::optim::OptimizerKind;
use trajlens::tensor::Dtype;
use trajlens::trajectory::{decode, encode, record_run, StorageMode, TrajectoryLog};
use trajlens::Error;

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/small_f64.trj")
}

#[test]
fn golden_file_bytes_are_stable() {
    let log = record_run(
        &common::golden_setup(StorageMode::Full, Dtype::F64),
        &common::golden_dataset(),
    )
    .unwrap();
    let bytes = encode(&log).unwrap();
    let path = golden_path();
    if std::env::var_os("TRAJLENS_BLESS").is_some() {
        std::fs::write(&path, &bytes).unwrap();
    }
    let golden = std::fs::read(&path).expect("golden file present");
    assert_eq!(bytes, golden);
    assert_eq!(decode(&golden).unwrap(), log);
}

#[test]
fn roundtrip_through_disk_all_modes() {
    let dir = tempfile::tempdir().unwrap();
    for storage in [StorageMode::Full, StorageMode::Replay] {
        for dtype in [Dtype::F64, Dtype::F32] {
            let log = record_run(
                &common::golden_setup(storage, dtype),
                &common::golden_dataset(),
            )
            .unwrap();
            let path = dir.path().join(format!("{storage:?}-{dtype:?}.trj"));
            log.write(&path).unwrap();
            let back = TrajectoryLog::read(&path).unwrap();
            assert_eq!(back, log, "{storage:?} {dtype:?}");
            assert_eq!(encode(&back).unwrap(), std::fs::read(&path).unwrap());
        }
    }
}

#[test]
fn corrupted_and_truncated_files_rejected() {
    let log = record_run(
        &common::golden_setup(StorageMode::Full, Dtype::F64),
        &common::golden_dataset(),
    )
    .unwrap();
    let bytes = encode(&log).unwrap();
    for pos in [0, 7, 100, bytes.len() / 2, bytes.len() - 5] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x10;
        assert!(decode(&bad).is_err(), "flip at {pos}");
    }
    let mut bad = bytes.clone();
    bad[bytes.len() / 2] ^= 1;
    assert!(matches!(decode(&bad), Err(Error::Checksum { .. })));
    assert!(decode(&bytes[..bytes.len() - 9]).is_err());
    assert!(decode(&bytes[..3]).is_err());
}

#[test]
fn replay_reproduces_losses_bit_exactly() {
    for kind in [
        OptimizerKind::Sgd,
        OptimizerKind::momentum(),
        OptimizerKind::adam(),
    ] {
        let (setup, ds) = common::blob_setup(kind, 0.05, StorageMode::Replay);
        let log = record_run(&setup, &ds).unwrap();
        assert!(!log.has_updates());
        let mut losses = Vec::new();
        log.replay(&ds, |_, _, _, loss| {
            losses.push(loss);
            Ok(())
        })
        .unwrap();
        let stored: Vec<u64> = log.steps.iter().map(|s| s.loss.to_bits()).collect();
        assert_eq!(
            losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>(),
            stored
        );
    }
}

#[test]
fn replay_detects_a_changed_loss() {
    let (setup, ds) = common::blob_setup(OptimizerKind::Sgd, 0.05, StorageMode::Replay);
    let mut log = record_run(&setup, &ds).unwrap();
    log.steps[7].loss = f64::from_bits(log.steps[7].loss.to_bits() + 1);
    let err = log.replay(&ds, |_, _, _, _| Ok(())).unwrap_err();
    assert!(
        matches!(err, Error::ReplayDivergence { step: 7, .. }),
        "{err}"
    );
}

#[test]
fn replay_and_stored_updates_agree() {
    let (setup, ds) = common::blob_setup(OptimizerKind::adam(), 0.01, StorageMode::Full);
    let mut full = record_run(&setup, &ds).unwrap();
    let mut replay_setup = setup.clone();
    replay_setup.storage = StorageMode::Replay;
    let mut replay = record_run(&replay_setup, &ds).unwrap();
    full.fill_coherence(None).unwrap();
    replay.fill_coherence(Some(&ds)).unwrap();
    for (a, b) in full.steps.iter().zip(&replay.steps) {
        assert_eq!(
            a.coherence.unwrap().to_bits(),
            b.coherence.unwrap().to_bits()
        );
    }
}

#[test]
fn identical_setups_hash_identically() {
    let (setup, ds) = common::blob_setup(OptimizerKind::momentum(), 0.05, StorageMode::Full);
    let h = || {
        hex(&Sha256::digest(
            encode(&record_run(&setup, &ds).unwrap()).unwrap(),
        ))
    };
    assert_eq!(h(), h());
}

fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

#[test]
fn update_identity_holds() {
    for kind in [
        OptimizerKind::Sgd,
        OptimizerKind::momentum(),
        OptimizerKind::adam(),
    ] {
        let (setup, ds) = common::blob_setup(kind, 0.05, StorageMode::Full);
        let log = record_run(&setup, &ds).unwrap();
        let id = log.update_identity().unwrap();
        assert!(id.stepwise_replay_exact, "{kind:?}");
        assert!(
            id.max_scaled_error <= 1e-12,
            "{kind:?} {}",
            id.max_scaled_error
        );
        assert!(
            id.reconstruction_error <= 1e-10,
            "{kind:?} {}",
            id.reconstruction_error
        );
    }
}

#[test]
fn divergence_reports_iteration() {
    let mut setup = common::golden_setup(StorageMode::Full, Dtype::F64);
    setup.optimizer.eta = 1e3;
    setup.epochs = 200;
    match record_run(&setup, &common::golden_dataset()) {
        Err(Error::Divergence { iteration, .. }) => assert!(iteration.is_some()),
        Err(Error::NonFiniteGradient { .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|l| l.len())),
    }
}
