use std::path::Path;
use std::process::{Command, Output};

use aros_cli::{files, read_report, SweepRow};
use aros_core::config::{DataConfig, RunConfig};
use aros_core::redteam::ScorerKind;

fn aros(args: &[&str], out: &Path, config: Option<&Path>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_aros"));
    c.args(args).arg("--out").arg(out);
    if let Some(p) = config {
        c.arg("--config").arg(p);
    }
    c.env_remove("AROS_THREADS");
    c.output().expect("aros binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A small, fast pipeline: few samples, few epochs, a short attack.
fn tiny_config(dir: &Path, seed: u64) -> std::path::PathBuf {
    let mut cfg = RunConfig::default();
    cfg.master_seed = seed;
    if let DataConfig::Synthetic {
        n_train,
        n_id_test,
        n_ood_test,
        ..
    } = &mut cfg.data
    {
        *n_train = 200;
        *n_id_test = 40;
        *n_ood_test = 40;
    }
    cfg.pretrain.epochs = 3;
    cfg.stabnet.epochs = 2;
    cfg.attack.steps = 5;
    cfg.attack.restarts = 1;
    let path = dir.join(format!("tiny-{seed}.json"));
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

#[test]
fn missing_upstream_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = aros(&["train-aros"], dir.path(), None);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains(files::CLASSIFIER), "{}", stderr(&o));
}

#[test]
fn unknown_config_field_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let mut v: serde_json::Value = serde_json::from_str(&RunConfig::default().to_json()).unwrap();
    v["surprise"] = serde_json::json!(1);
    std::fs::write(&path, v.to_string()).unwrap();
    let o = aros(&["train-classifier"], dir.path(), Some(&path));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn invalid_thread_count_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_aros"))
        .args(["train-classifier", "--out"])
        .arg(dir.path())
        .env("AROS_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("AROS_THREADS"));
}

#[test]
fn negative_epsilon_is_rejected_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let o = aros(&["evaluate", "--epsilon=-0.1"], dir.path(), None);
    assert_ne!(o.status.code(), Some(0));
    assert!(!dir.path().join(files::EVAL_JSON).exists());
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = tiny_config(dir.path(), 3);
    for cmd in [
        "train-classifier",
        "craft-ood",
        "train-aros",
        "verify-stability",
        "evaluate",
        "sweep-epsilon",
    ] {
        let o = aros(&[cmd], &out, Some(&cfg));
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    for f in [
        files::CLASSIFIER,
        files::CLASSIFIER_CURVE,
        files::EMBEDDINGS,
        files::CRAFT_JSON,
        files::CRAFT_CSV,
        files::MODEL,
        files::AROS_JSON,
        files::AROS_CURVE,
        files::EVAL_JSON,
        files::EVAL_CSV,
        files::STABILITY_JSON,
        files::STABILITY_CSV,
        files::SWEEP_JSON,
        files::SWEEP_CSV,
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }

    // Reports carry the resolved config and seed.
    let sweep = read_report::<Vec<SweepRow>>(&out.join(files::SWEEP_JSON)).unwrap();
    assert_eq!(sweep.seed, 3);
    assert_eq!(sweep.config, RunConfig::load(&cfg).unwrap());
    assert_eq!(sweep.result.len(), 2 * 4);
    for kind in [ScorerKind::Aros, ScorerKind::Msp] {
        let rows: Vec<&SweepRow> = sweep.result.iter().filter(|r| r.scorer == kind).collect();
        let eps: Vec<f64> = rows.iter().map(|r| r.epsilon).collect();
        assert_eq!(eps, [0.0, 0.025, 0.05, 0.1]);
        // The attack keeps the clean input as a candidate, so it never helps.
        for r in &rows[1..] {
            assert!(
                r.auroc <= rows[0].auroc + 1e-12,
                "{kind}: {} > {}",
                r.auroc,
                rows[0].auroc
            );
        }
    }

    // The CSV mirrors the JSON rows.
    let mut rdr = csv::Reader::from_path(out.join(files::SWEEP_CSV)).unwrap();
    let csv_rows: Vec<SweepRow> = rdr.deserialize().map(|r| r.unwrap()).collect();
    assert_eq!(csv_rows, sweep.result);
}

#[test]
fn stale_checkpoint_is_a_compatibility_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = tiny_config(dir.path(), 1);
    let o = aros(&["train-classifier"], &out, Some(&cfg));
    assert!(o.status.success(), "{}", stderr(&o));
    let o = aros(&["craft-ood", "--seed", "2"], &out, Some(&cfg));
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
    assert!(stderr(&o).contains("master seed"), "{}", stderr(&o));
}
