use fedvad_core::dataset::{synthesize_dataset, DatasetManifest, SplitRole, SyntheticSpec, VideoRecord};
use fedvad_core::federation::{self, FederationError, Metric, Scope};
use fedvad_core::splits::{split_random, SplitAssignment, SplitStrategy};
use fedvad_core::FederationConfig;

fn small() -> (DatasetManifest, DatasetManifest) {
    synthesize_dataset(&SyntheticSpec {
        num_videos: 30,
        num_test_videos: 10,
        feature_dim: 8,
        segments_range: (6, 10),
        seed: 5,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn cfg(k: usize) -> FederationConfig {
    FederationConfig {
        participants: k,
        rounds: 2,
        local_iters: 3,
        local_lr: 0.1,
        batch_size: 8,
        plr_warmup_rounds: 1,
        seed: 2,
        ..FederationConfig::default()
    }
}

fn model_bytes(m: &fedvad_core::DetectorParams) -> Vec<u8> {
    let mut b = Vec::new();
    m.write_to(&mut b).unwrap();
    b
}

#[test]
fn centralized_equals_single_participant_collaboration() {
    let (train, test) = small();
    let c = FederationConfig { server_lr: 1.0, ..cfg(1) };
    let central = federation::run_centralized(&c, &train, Some(&test)).unwrap();
    let split = split_random(&train, 1, 0).unwrap();
    let collab = federation::run_collaborative(&c, &split, &train, Some(&test)).unwrap();
    assert_eq!(model_bytes(&central.model), model_bytes(&collab.model));
    assert_eq!(central.report, collab.report);

    let local = federation::run_local(&c, &split, &train, Some(&test)).unwrap();
    assert_eq!(local.len(), 1);
    assert_eq!(model_bytes(&local[0].1.model), model_bytes(&central.model));
}

#[test]
fn report_has_one_block_per_round() {
    let (train, test) = small();
    let c = cfg(3);
    let split = split_random(&train, 3, 1).unwrap();
    let out = federation::run_collaborative(&c, &split, &train, Some(&test)).unwrap();
    let r = &out.report;
    assert_eq!(r.auc_by_round().len(), c.rounds);
    let losses = r.records.iter().filter(|x| x.metric == Metric::Loss).count();
    assert_eq!(losses, c.rounds * c.participants);
    assert!(r.records.iter().all(|x| x.value.is_finite()));
    assert!(r
        .records
        .iter()
        .filter(|x| x.metric == Metric::Auc)
        .all(|x| x.scope == Scope::Global));
    let text = r.to_text();
    assert!(text.starts_with("#round\tscope\tmetric\tvalue\n"));
    assert!(text.contains("1\t0\tloss\t"));
    assert!(text.contains("2\tglobal\tauc\t"));
    // labels cover exactly each participant's videos
    for (labels, ids) in out.segment_labels.iter().zip(&split.participants) {
        assert_eq!(labels.labels.len(), ids.len());
    }
}

#[test]
fn runs_are_repeatable() {
    let (train, test) = small();
    let c = cfg(2);
    let split = split_random(&train, 2, 4).unwrap();
    let a = federation::run_collaborative(&c, &split, &train, Some(&test)).unwrap();
    let b = federation::run_collaborative(&c, &split, &train, Some(&test)).unwrap();
    assert_eq!(a.report.to_text(), b.report.to_text());
    assert_eq!(model_bytes(&a.model), model_bytes(&b.model));
    let la = federation::run_local(&c, &split, &train, Some(&test)).unwrap();
    let lb = federation::run_local(&c, &split, &train, Some(&test)).unwrap();
    for ((_, x), (_, y)) in la.iter().zip(&lb) {
        assert_eq!(x.report, y.report);
    }
}

#[test]
fn option_paths_run() {
    let (train, test) = small();
    let split = split_random(&train, 2, 4).unwrap();
    for c in [
        FederationConfig { use_weak_labels: true, ..cfg(2) },
        FederationConfig { plr_all_videos: true, ..cfg(2) },
        FederationConfig { plr_warmup_rounds: 0, dropout: 0.0, l2_coeff: 1e-4, ..cfg(2) },
    ] {
        let out = federation::run_collaborative(&c, &split, &train, Some(&test)).unwrap();
        assert!(out.access_log.only_self_access());
        assert!(out.report.final_auc().is_some());
    }
}

#[test]
fn weak_labels_override_video_labels() {
    let (train, _) = small();
    let c = FederationConfig { use_weak_labels: true, ..cfg(1) };
    let out = federation::run_centralized(&c, &train, None).unwrap();
    for v in &train.videos {
        assert_eq!(out.video_labels[0].get(&v.video_id), v.weak_label);
    }
    assert!(out.report.auc_by_round().is_empty());
}

#[test]
fn validation_and_protocol_errors() {
    let (train, test) = small();
    let empty = DatasetManifest::new(vec![], 8, SplitRole::Train).unwrap();
    assert!(matches!(
        federation::run_centralized(&cfg(1), &empty, Some(&test)),
        Err(FederationError::EmptyTrainingSet)
    ));

    let split = split_random(&train, 3, 0).unwrap();
    assert!(matches!(
        federation::run_collaborative(&cfg(2), &split, &train, None),
        Err(FederationError::ParticipantCount { .. })
    ));

    let mut holes = split.clone();
    let moved = std::mem::take(&mut holes.participants[2]);
    holes.participants[0].extend(moved);
    assert!(matches!(
        federation::run_collaborative(&cfg(3), &holes, &train, None),
        Err(FederationError::EmptyParticipant(2))
    ));
    // local mode skips the empty participant instead
    let local = federation::run_local(&cfg(3), &holes, &train, None).unwrap();
    assert_eq!(local.iter().map(|(id, _)| *id).collect::<Vec<_>>(), vec![0, 1]);

    let bogus = SplitAssignment {
        participants: vec![vec!["nope".into()]],
        strategy: SplitStrategy::Random,
        seed: 0,
    };
    assert!(matches!(
        federation::run_collaborative(&cfg(1), &bogus, &train, None),
        Err(FederationError::UnknownVideo(_))
    ));

    let bad = FederationConfig { beta: 0.0, ..cfg(1) };
    assert!(matches!(federation::run_centralized(&bad, &train, None), Err(FederationError::Config(_))));
}

#[test]
fn no_null_model_aborts() {
    // a single video per participant is labelled normal but one segment
    // cannot form a null model
    let v = |id: &str| VideoRecord::new(id, vec![1.0, 2.0], 2, 1).unwrap();
    let train = DatasetManifest::new(vec![v("a"), v("b")], 2, SplitRole::Train).unwrap();
    let split = split_random(&train, 2, 0).unwrap();
    assert!(matches!(
        federation::run_collaborative(&cfg(2), &split, &train, None),
        Err(FederationError::NoNullModel)
    ));
}
