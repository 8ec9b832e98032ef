use modelhub_core::registry::{
    load_registry, ModelSource, ModelStatus, Registry, RegistryError, RegistryPaths,
};
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Op {
    Register { repo: u8, version: u8 },
    Transition { pick: usize, to: u8 },
    Containerize { pick: usize },
    Access { pick: usize },
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0u8..6, 1u8..4).prop_map(|(repo, version)| Op::Register { repo, version }),
        (any::<usize>(), 0u8..5).prop_map(|(pick, to)| Op::Transition { pick, to }),
        any::<usize>().prop_map(|pick| Op::Containerize { pick }),
        any::<usize>().prop_map(|pick| Op::Access { pick }),
    ]
}

fn status(n: u8) -> ModelStatus {
    match n {
        0 => ModelStatus::Acquiring,
        1 => ModelStatus::Running,
        2 => ModelStatus::Stopped,
        3 => ModelStatus::Failed("x".into()),
        _ => ModelStatus::Registered,
    }
}

fn apply(reg: &mut Registry, op: &Op) {
    let key = |pick: usize, reg: &Registry| {
        let recs = reg.records();
        (!recs.is_empty()).then(|| {
            let r = &recs[pick % recs.len()];
            (r.model_id.clone(), r.version.clone())
        })
    };
    // Rejected operations are part of the workload; only accepted ones are journaled.
    let _ = match op {
        Op::Register { repo, version } => reg
            .register_model(ModelSource::hub(format!("org/r{repo}")), "R", &version.to_string(), "op")
            .map(drop),
        Op::Transition { pick, to } => match key(*pick, reg) {
            Some((id, v)) => reg.transition_status(&id, &v, status(*to)).map(drop),
            None => Ok(()),
        },
        Op::Containerize { pick } => match key(*pick, reg) {
            Some((id, v)) => reg.mark_containerized(&id, &v, &"ab".repeat(32), "img").map(drop),
            None => Ok(()),
        },
        Op::Access { pick } => match key(*pick, reg) {
            Some((id, v)) => reg.record_access(&id, &v, "a-1", None).map(drop),
            None => Ok(()),
        },
    };
}

#[test]
fn empty_journal_is_empty_registry() {
    let reg = load_registry(b"").unwrap();
    assert!(reg.is_empty());
    assert_eq!(reg.next_seq(), 0);
}

#[test]
fn registrations_survive_snapshot_boundary() {
    let dir = tempfile::tempdir().unwrap();
    let paths = RegistryPaths::in_dir(dir.path());
    let mut reg = Registry::open(&paths).unwrap();
    for i in 0..300 {
        reg.register_model(ModelSource::hub(format!("org/m{i}")), "M", "1", "op").unwrap();
    }
    drop(reg);
    let reopened = Registry::open(&paths).unwrap();
    assert_eq!(reopened.len(), 300);
    assert!(paths.snapshot.exists());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distinct_registrations_all_land(k in 0usize..=100) {
        let dir = tempfile::tempdir().unwrap();
        let paths = RegistryPaths::in_dir(dir.path());
        let mut reg = Registry::open(&paths).unwrap();
        for i in 0..k {
            reg.register_model(ModelSource::hub(format!("org/model-{i}")), "Model", "1", "op").unwrap();
        }
        prop_assert_eq!(reg.len(), k);
        let journal = std::fs::read(&paths.journal).unwrap_or_default();
        prop_assert_eq!(load_registry(&journal).unwrap().len(), k);
    }

    #[test]
    fn replay_matches_live_state(ops in prop::collection::vec(op(), 0..120)) {
        let dir = tempfile::tempdir().unwrap();
        let paths = RegistryPaths::in_dir(dir.path());
        let mut live = Registry::open(&paths).unwrap();
        for op in &ops {
            apply(&mut live, op);
        }
        let journal = std::fs::read(&paths.journal).unwrap_or_default();
        prop_assert_eq!(&load_registry(&journal).unwrap(), &live);
        prop_assert_eq!(&Registry::open(&paths).unwrap(), &live);
    }

    #[test]
    fn mid_line_truncation_is_detected(n in 1usize..20, frac in 0.0f64..1.0) {
        let dir = tempfile::tempdir().unwrap();
        let paths = RegistryPaths::in_dir(dir.path());
        let mut disk = Registry::open(&paths).unwrap();
        for i in 0..n {
            let src = ModelSource::hub(format!("org/t{i}"));
            disk.register_model(src, "T", "1", "op").unwrap();
        }
        let journal = std::fs::read(&paths.journal).unwrap();
        let cut = 1 + ((journal.len() - 1) as f64 * frac) as usize;
        prop_assume!(journal[cut - 1] != b'\n');
        let result = load_registry(&journal[..cut]);
        prop_assert!(matches!(result, Err(RegistryError::CorruptJournal { .. })), "{result:?}");
    }
}
