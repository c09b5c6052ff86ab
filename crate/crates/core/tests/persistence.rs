#[path = "common/tiny.rs"]
mod tiny;

use mgp_core::env::{collect_demonstrations, read_corpus, write_corpus, TaskKind};
use mgp_core::harness::Checkpoint;
use mgp_core::Error;
use proptest::prelude::*;

fn corpus_bytes(task: TaskKind, n: usize, seed: u64) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.mgpd");
    write_corpus(&path, &collect_demonstrations(task, n, seed).unwrap()).unwrap();
    std::fs::read(&path).unwrap()
}

#[test]
fn checkpoint_file_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.mgp");
    let ck = tiny::checkpoint(TaskKind::ButtonSequence, 4);
    ck.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.encode(), bytes);
    assert!(same_values(back.tokenizer.params(), ck.tokenizer.params()));
    assert_eq!(back.tokenizer.codebook(), ck.tokenizer.codebook());
    for ((m1, a), (m2, b)) in back.models.iter().zip(&ck.models) {
        assert_eq!(m1, m2);
        assert_eq!(a.config(), b.config());
        assert!(same_values(a.params(), b.params()));
    }
}

#[test]
fn corpus_file_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.mgpd");
    let demos = collect_demonstrations(TaskKind::ButtonSequence, 5, 2).unwrap();
    write_corpus(&path, &demos).unwrap();
    assert_eq!(read_corpus(&path).unwrap(), demos);
    let again = dir.path().join("d.mgpd");
    write_corpus(&again, &read_corpus(&path).unwrap()).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn missing_files_are_io_errors_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("absent.mgp");
    match Checkpoint::load(&path) {
        Err(Error::Io { path: p, .. }) => assert_eq!(p, path),
        other => panic!("expected I/O error, got {other:?}"),
    }
    assert!(matches!(read_corpus(&path), Err(Error::Io { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn checkpoint_with_any_flipped_byte_is_rejected(seed in 0u64..4, at in any::<prop::sample::Index>(), bit in 0u8..8) {
        let mut bytes = tiny::checkpoint(TaskKind::PointReach, seed).encode();
        let i = at.index(bytes.len());
        bytes[i] ^= 1 << bit;
        let first = Checkpoint::decode(&bytes);
        let rejected = matches!(first, Err(Error::Format { .. }));
        prop_assert!(rejected, "byte {}: {:?}", i, first.map(|_| ()));
        // same input, same verdict
        let second = Checkpoint::decode(&bytes);
        prop_assert_eq!(format!("{:?}", first.err()), format!("{:?}", second.err()));
    }

    #[test]
    fn truncated_checkpoint_is_rejected(at in any::<prop::sample::Index>()) {
        let bytes = tiny::checkpoint(TaskKind::PointReach, 1).encode();
        let cut = at.index(bytes.len());
        let rejected = matches!(Checkpoint::decode(&bytes[..cut]), Err(Error::Format { .. }));
        prop_assert!(rejected, "cut at {}", cut);
    }

    #[test]
    fn checkpoint_round_trips_for_any_seed(seed in any::<u64>()) {
        let bytes = tiny::checkpoint(TaskKind::DynamicTarget, seed).encode();
        prop_assert_eq!(Checkpoint::decode(&bytes).unwrap().encode(), bytes);
    }

    #[test]
    fn corpus_with_any_flipped_byte_is_rejected(at in any::<prop::sample::Index>(), bit in 0u8..8) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.mgpd");
        let mut bytes = corpus_bytes(TaskKind::PointReach, 2, 0);
        let i = at.index(bytes.len());
        bytes[i] ^= 1 << bit;
        std::fs::write(&path, &bytes).unwrap();
        let rejected = matches!(read_corpus(&path), Err(Error::Format { .. }));
        prop_assert!(rejected, "byte {}", i);
    }
}

#[test]
fn trained_checkpoint_round_trips_exactly() {
    let cfg = tiny::config(TaskKind::PointReach);
    let demos = mgp_core::harness::demonstrations(&cfg).unwrap();
    let (tokenizer, _) = mgp_core::harness::train_stage1(&cfg, &demos).unwrap();
    let (models, _) = mgp_core::harness::train_stage2(&cfg, &demos, &tokenizer).unwrap();
    let ck = Checkpoint {
        config_hash: cfg.hash(),
        tokenizer,
        models,
    };
    let back = Checkpoint::decode(&ck.encode()).unwrap();
    assert_eq!(back.encode(), ck.encode());
    assert_eq!(back.tokenizer.codebook(), ck.tokenizer.codebook());
    assert!(same_values(back.tokenizer.params(), ck.tokenizer.params()));
    for ((ma, a), (mb, b)) in back.models.iter().zip(&ck.models) {
        assert_eq!(ma, mb);
        assert_eq!(a.config(), b.config());
        assert!(same_values(a.params(), b.params()));
    }
}

/// Parameter values only; optimizer moments are not part of a checkpoint.
fn same_values(a: &mgp_core::numeric::ParameterStore, b: &mgp_core::numeric::ParameterStore) -> bool {
    a.iter().count() == b.iter().count()
        && a.iter().zip(b.iter()).all(|((n1, t1), (n2, t2))| {
            n1 == n2
                && t1.shape() == t2.shape()
                && t1.data().iter().zip(t2.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}
