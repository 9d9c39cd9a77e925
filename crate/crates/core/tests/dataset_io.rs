use crl_lab::dataset::{load_dataset, save_dataset, sidecar_path};
use crl_lab::error::Error;
use crl_lab::mss::{mss_discover, CiInvarianceTest};
use crl_lab::multienv::{generate_crl_problem, true_candidate, CrlProblemConfig};

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    let ds = generate_crl_problem(&CrlProblemConfig { samples_per_env: 50, ..Default::default() }, 4).unwrap();
    let files = save_dataset(&ds, &path).unwrap();
    assert!(files.len() >= 2);
    let back = load_dataset(&path).unwrap();
    assert_eq!(back, ds);
}

#[test]
fn missing_sidecar_disables_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    let ds = generate_crl_problem(&CrlProblemConfig { samples_per_env: 50, ..Default::default() }, 4).unwrap();
    save_dataset(&ds, &path).unwrap();
    std::fs::remove_file(sidecar_path(&path)).unwrap();
    let bare = load_dataset(&path).unwrap();
    assert!(bare.ground_truth.is_none());
    assert_eq!(bare.envs.len(), ds.envs.len());
    assert_eq!(bare.envs[1].x, ds.envs[1].x);
    assert!(bare.envs.iter().all(|e| e.spec.is_none() && e.latents.is_none()));
    assert!(true_candidate(&bare).is_err());
    assert!(mss_discover(&bare, &CiInvarianceTest::oracle()).is_err());
}

#[test]
fn malformed_row_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "env_id,x_0,x_1\ne0,1.0,2.0\ne0,1.0,oops\n").unwrap();
    match load_dataset(&path) {
        Err(Error::Parse { row, .. }) => assert_eq!(row, 3),
        other => panic!("expected a parse error, got {other:?}"),
    }
    std::fs::write(&path, "env_id,x_0,x_1\ne0,1.0\n").unwrap();
    let err = load_dataset(&path).unwrap_err();
    assert!(err.to_string().contains('2'), "{err}");
}
