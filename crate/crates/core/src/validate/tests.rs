use super::*;
use crate::gridnav::{AgentPose, Action, Cell, Heading};
use crate::metrics::{evaluate, write_jsonl, Agent, EvalOptions};
use crate::net::DmtfNet;
use crate::testkit::{tiny_env, tiny_model, tiny_suites};

fn traj(episode: u64, t: u32, done: bool) -> TrajectoryRecord {
    TrajectoryRecord {
        episode,
        t,
        pose: AgentPose::new(Cell::new(1, 1), Heading::N),
        action: Action::MoveForward,
        reward: 0.0,
        geodesic: 3,
        w_vis: Some(0.3),
        w_aud: Some(1.0 - 0.3),
        done,
    }
}

fn dumps() -> (Vec<TrajectoryRecord>, Vec<AttentionRecord>) {
    let (set, _) = tiny_suites(9, 8);
    let net = DmtfNet::new(tiny_model(), 2).unwrap();
    let opts = EvalOptions {
        workers: 1,
        trajectories: true,
        attention: true,
    };
    let out = evaluate(Agent::Policy(&net), &tiny_env(), &set.manifest, &set.suites[1], &[], &opts).unwrap();
    (out.trajectories, out.attention)
}

#[test]
fn trajectory_rules() {
    check_trajectories(&[traj(0, 0, false), traj(0, 1, true), traj(1, 0, true)]).unwrap();
    let bad = [
        vec![traj(0, 0, false), traj(0, 0, true)],
        vec![traj(0, 0, true), traj(0, 1, true)],
        vec![traj(0, 0, false)],
        vec![TrajectoryRecord { w_aud: Some(0.6), ..traj(0, 0, true) }],
        vec![TrajectoryRecord { w_aud: None, ..traj(0, 0, true) }],
    ];
    for b in bad {
        assert!(check_trajectories(&b).is_err(), "{b:?}");
    }
}

#[test]
fn real_dumps_pass_and_tampering_is_caught() {
    let (t, a) = dumps();
    assert!(!a.is_empty());
    check_trajectories(&t).unwrap();
    check_attention(&a).unwrap();

    let mut shifted = a.clone();
    shifted[0].weights[0] += 1e-3;
    assert!(check_attention(&shifted).is_err());
    let mut moved = a.clone();
    let n = moved[0].weights.len();
    moved[0].weights.swap(0, n - 1);
    moved[0].weights.swap(1, n - 2);
    assert!(check_attention(&moved).is_err(), "visual mass moved to audio keys");
    let mut relabeled = a.clone();
    relabeled[0].w_aud = 1.0 - relabeled[0].w_vis + 1e-9;
    assert!(check_attention(&relabeled).is_err());
}

#[test]
fn files_are_recognized_by_kind() {
    let dir = tempfile::tempdir().unwrap();
    let (set, _) = tiny_suites(9, 8);
    set.write(dir.path(), false).unwrap();
    assert_eq!(validate_path(&dir.path().join("val_heard.json")).unwrap(), ArtifactKind::Suite);
    assert_eq!(validate_path(&dir.path().join(MANIFEST_FILE)).unwrap(), ArtifactKind::TemplateManifest);

    let (t, a) = dumps();
    write_jsonl(&dir.path().join("t.jsonl"), &t).unwrap();
    write_jsonl(&dir.path().join("a.jsonl"), &a).unwrap();
    assert_eq!(validate_path(&dir.path().join("t.jsonl")).unwrap(), ArtifactKind::Trajectories);
    assert_eq!(validate_path(&dir.path().join("a.jsonl")).unwrap(), ArtifactKind::Attention);

    let report = evaluate(Agent::Oracle, &tiny_env(), &set.manifest, &set.suites[1], &[], &EvalOptions::default())
        .unwrap()
        .report;
    report.write(dir.path(), "rep").unwrap();
    assert_eq!(validate_path(&dir.path().join("rep.csv")).unwrap(), ArtifactKind::Report);
    assert_eq!(validate_path(&dir.path().join("rep.json")).unwrap(), ArtifactKind::Report);

    // A summary that no longer matches its records.
    let mut forged = report.clone();
    forged.summary.sr = 0.5;
    forged.write(dir.path(), "forged").unwrap();
    assert!(validate_path(&dir.path().join("forged.json")).is_err());

    let mut broken = set.suites[1].clone();
    broken.episodes[0].template = set.manifest.unheard[0];
    crate::gridnav::write_json(&dir.path().join("broken.json"), &broken).unwrap();
    assert_eq!(validate_path(&dir.path().join("broken.json")).unwrap_err().exit_code(), 3);
    std::fs::write(dir.path().join("x.txt"), "hi").unwrap();
    assert!(validate_path(&dir.path().join("x.txt")).is_err());
}
