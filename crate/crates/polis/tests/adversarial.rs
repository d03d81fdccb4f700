use polis::cluster::Wire;
use polis::scenarios::{binding, canaries, fork, invalid_initial_state, random_log};

#[tokio::test]
async fn partition_is_detected_everywhere() {
    let out = fork(11, Wire::InProcess, true).await.unwrap();
    assert_eq!(out.detected, out.members, "{out:?}");
    assert_eq!(out.frozen, out.members, "{out:?}");
}

#[tokio::test]
async fn racing_commits_without_partition_raise_nothing() {
    for seed in 0..3 {
        let out = fork(seed, Wire::InProcess, false).await.unwrap();
        assert_eq!((out.detected, out.frozen), (0, 0), "{out:?}");
    }
}

#[tokio::test]
async fn doctored_announcement_flagged_by_all_honest_members() {
    let out = invalid_initial_state(5, Wire::InProcess, 5, true).await.unwrap();
    assert!(out.joiner_deceived);
    assert_eq!(out.flagged, out.honest, "{out:?}");
}

#[tokio::test]
async fn honest_invitation_flags_nothing() {
    let out = invalid_initial_state(6, Wire::InProcess, 4, false).await.unwrap();
    assert!(!out.joiner_deceived);
    assert_eq!(out.flagged, 0);
}

#[tokio::test]
async fn random_logs_converge() {
    for seed in 0..5 {
        let out = random_log(seed, 25).await.unwrap();
        assert!(out.identical(), "seed {seed}");
        assert!(out.epoch > 3 && out.alerts == 0, "{out:?}");
    }
}

#[tokio::test]
async fn canaries_stay_private() {
    let dir = tempfile::tempdir().unwrap();
    let out = canaries(3, dir.path()).await.unwrap();
    assert!(out.ds_hits.is_empty(), "{out:?}");
    assert!(out.ms_hits.is_empty(), "{out:?}");
    assert!(out.escalated_visible, "{out:?}");
}

#[tokio::test]
async fn reports_bind_senders_and_reject_tampering() {
    let out = binding(9, 60).await.unwrap();
    assert_eq!(out.accepted, 60);
    assert_eq!(out.honest_verified, 60);
    assert_eq!(out.mutated_rejected, out.mutated);
}
