use std::path::Path;

use ddrom::pipeline::{read_evaluation, run_pipeline, Manifest, RunConfig, Stage, StageStatus, MANIFEST_FILE};
use ddrom::Error;

const TAYLOR_GREEN: &str = r#"
case = "taylor_green"
output_dir = "unused"

[grid]
nx = 13
ny = 13
lx = 1.0
ly = 1.0

[parameters]
t_offline = [0.0, 0.1]
t_online = [0.0, 0.2]
dt_offline = 0.02
dt_online = 0.02
nu_train = [5.0e-3, 1.0e-2, 2.0e-2]
nu_test = [1.5e-2]

[modes]
r = 1
q = 1
d = 1
h = 1

[closures]
modes = ["standard", "physics", "hybrid"]

[closures.eddy_viscosity]
architecture = { kind = "mlp", hidden = [6], activation = "tanh" }
train = { epochs = 50 }

[closures.correction]
architecture = { kind = "mlp", hidden = [6], activation = "relu" }
train = { epochs = 50 }

[ensemble]
n_networks = 2
seed = 3
"#;

fn config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::from_toml_str(TAYLOR_GREEN).unwrap();
    cfg.output_dir = dir.to_path_buf();
    cfg
}

fn statuses(m: &Manifest) -> Vec<(Stage, StageStatus)> {
    m.stages.iter().map(|r| (r.stage, r.status)).collect()
}

#[test]
fn smoke_run_completes_all_stages() {
    let dir = tempfile::tempdir().unwrap();
    let m = run_pipeline(&config(dir.path()), Stage::Report).unwrap();
    assert_eq!(m.stages.len(), 8);
    assert!(m.stages.iter().all(|r| r.status == StageStatus::Completed));
    for rec in &m.stages {
        assert!(!rec.artifacts.is_empty(), "{:?} produced no artifacts", rec.stage);
        for a in &rec.artifacts {
            assert!(dir.path().join(&a.path).exists(), "{}", a.path);
        }
    }
    assert!(dir.path().join(MANIFEST_FILE).exists());
    let table = std::fs::read_to_string(dir.path().join("report/summary.txt")).unwrap();
    assert!(table.starts_with("# errors in the grid-weighted"));

    // rank-1 data: the single-mode ROM is the projection, which is exact
    let eval = read_evaluation(dir.path()).unwrap();
    let exact = eval.series.iter().find(|s| s.label == "exact").unwrap();
    assert!(exact.values.iter().all(|v| *v < 1e-10), "{:?}", exact.values);
}

#[test]
fn rerun_reuses_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let first = run_pipeline(&cfg, Stage::Report).unwrap();
    let second = run_pipeline(&cfg, Stage::Report).unwrap();
    assert!(second.stages.iter().all(|r| r.status == StageStatus::Reused));
    for (a, b) in first.stages.iter().zip(&second.stages) {
        assert_eq!(a.hash, b.hash);
        assert_eq!(a.artifacts, b.artifacts);
    }
}

#[test]
fn identical_configs_give_identical_manifests() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m1 = run_pipeline(&config(d1.path()), Stage::Report).unwrap();
    let m2 = run_pipeline(&config(d2.path()), Stage::Report).unwrap();
    assert_eq!(m1, m2);
}

#[test]
fn changing_dt_online_reruns_only_online_stages() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    run_pipeline(&cfg, Stage::Report).unwrap();
    cfg.parameters.dt_online = 0.01;
    let m = run_pipeline(&cfg, Stage::Report).unwrap();
    let expected = [
        (Stage::Generate, StageStatus::Reused),
        (Stage::Pod, StageStatus::Reused),
        (Stage::Assemble, StageStatus::Reused),
        (Stage::Corrections, StageStatus::Reused),
        (Stage::Train, StageStatus::Reused),
        (Stage::Solve, StageStatus::Completed),
        (Stage::Evaluate, StageStatus::Completed),
        (Stage::Report, StageStatus::Completed),
    ];
    assert_eq!(statuses(&m), expected);
}

#[test]
fn tampered_artifact_invalidates_its_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    run_pipeline(&cfg, Stage::Assemble).unwrap();
    std::fs::write(dir.path().join("operators/reduced.ops"), b"garbage").unwrap();
    let m = run_pipeline(&cfg, Stage::Assemble).unwrap();
    assert_eq!(
        statuses(&m),
        [
            (Stage::Generate, StageStatus::Reused),
            (Stage::Pod, StageStatus::Reused),
            (Stage::Assemble, StageStatus::Completed),
        ]
    );
}

#[test]
fn partial_run_stops_at_requested_stage() {
    let dir = tempfile::tempdir().unwrap();
    let m = run_pipeline(&config(dir.path()), Stage::Pod).unwrap();
    assert_eq!(m.stages.len(), 2);
    assert!(!dir.path().join("operators").exists());
}

#[test]
fn stage_failure_is_recorded_in_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    // Taylor–Green velocity snapshots have rank 1
    cfg.modes.d = Some(2);
    let err = run_pipeline(&cfg, Stage::Report).unwrap_err();
    assert!(matches!(err, Error::Stage { ref stage, .. } if stage == "pod"), "{err}");
    let m = Manifest::read(dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(
        statuses(&m),
        [(Stage::Generate, StageStatus::Completed), (Stage::Pod, StageStatus::Failed)]
    );
    assert!(m.stages[1].message.as_deref().unwrap().contains("rank"));
    assert!(dir.path().join("snapshots/train.snap").exists());
}

#[test]
fn invalid_configs_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.modes.d = Some(0);
    let msg = cfg.validate().unwrap_err().to_string();
    assert!(msg.contains("modes.d"), "{msg}");

    let bad = TAYLOR_GREEN.replace("\"taylor_green\"", "\"cylinder\"");
    let msg = RunConfig::from_toml_str(&bad).unwrap_err().to_string();
    assert!(msg.contains("case") || msg.contains("cylinder"), "{msg}");

    let bad = TAYLOR_GREEN.replace("\"standard\", ", "\"standard\", \"magic\", ");
    assert!(RunConfig::from_toml_str(&bad).is_err());

    let bad = TAYLOR_GREEN.replace("nu_test = [1.5e-2]", "nu_test = [1.5e-2]\nnu_bogus = 1");
    assert!(RunConfig::from_toml_str(&bad).is_err());

    let mut cfg = config(dir.path());
    cfg.case = ddrom::pipeline::Case::External;
    let msg = cfg.validate().unwrap_err().to_string();
    assert!(msg.contains("external"), "{msg}");
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["taylor_green.toml", "wake_case_a.toml"] {
        let cfg = RunConfig::from_file(root.join(name)).unwrap();
        cfg.validate().unwrap();
    }
}
