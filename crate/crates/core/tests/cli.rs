use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use usnprune::data::{Dataset, SceneParams};
use usnprune::harness::report::TABLE_FILES;
use usnprune::harness::{ArmConfig, DatasetConfig, ExperimentConfig};
use usnprune::network::Network;
use usnprune::pipeline::{PruningMode, PruningSchedule};

fn bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_usnprune"))
        .args(args)
        .arg("--out-dir")
        .arg(dir)
        .arg("--jobs")
        .arg("1")
        .output()
        .unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset = DatasetConfig {
        scene: SceneParams { height: 16, width: 16, keypoints: 2, blob_sigma: 1.0, margin: 2.0, ..SceneParams::default() },
        n_train: 12,
        n_val: 4,
        n_test: 2,
        seed: 3,
    };
    cfg.train.epochs = 3;
    cfg.train.batch_size = 6;
    cfg.train.samples_per_image = 1;
    cfg.train.schedule = PruningSchedule { rho: 0.0, n_steps: 1, t_start: 0, t_end: 2, t_interval: 1 };
    cfg.seeds = vec![0];
    cfg.arms = vec![
        ArmConfig::new("none", PruningMode::Usn, 0.0, 10.0),
        ArmConfig::new("usn", PruningMode::Usn, 0.25, 10.0),
    ];
    cfg.certify.campaign.n_cells = 2;
    cfg.certify.campaign.max_cells = 8;
    cfg.certify.campaign.falsify_samples = 4;
    cfg.visualize.images = 2;
    cfg.visualize.samples_per_image = 2;
    let p = dir.join("config.json");
    cfg.save(&p).unwrap();
    p.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(bin(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(bin(dir.path(), &["train"]).status.code(), Some(1), "missing --arm");
    assert_eq!(bin(dir.path(), &["--help"]).status.code(), Some(0));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seeds = \"zero\"").unwrap();
    let out = bin(dir.path(), &["generate", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.toml"));

    let cfg = tiny_config(dir.path());
    let out = bin(dir.path(), &["train", "--config", &cfg, "--arm", "missing"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let ck = dir.path().join("broken.json");
    fs::write(&ck, "{ not json").unwrap();
    let out = bin(dir.path(), &["certify", "--config", &cfg, "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_on_empty_directory_writes_headers() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("empty");
    fs::create_dir(&input).unwrap();
    let out = bin(dir.path(), &["report", "--input", input.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in TABLE_FILES {
        let text = fs::read_to_string(dir.path().join(f)).unwrap();
        assert_eq!(text.lines().count(), 1, "{f}");
        assert!(text.starts_with("arm,"));
    }
}

#[test]
fn generate_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = tiny_config(a.path());
    for d in [a.path(), b.path()] {
        assert!(bin(d, &["generate", "--config", &cfg, "--seed", "9"]).status.success());
    }
    let fa = fs::read(a.path().join("dataset.json")).unwrap();
    assert_eq!(fa, fs::read(b.path().join("dataset.json")).unwrap());
    assert_eq!(Dataset::load(a.path().join("dataset.json")).unwrap().seed, 9);
}

#[test]
fn train_prune_certify_report_visualize() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);
    assert!(bin(d, &["generate", "--config", &cfg]).status.success());
    for arm in ["none", "usn"] {
        let out = bin(d, &["train", "--config", &cfg, "--arm", arm, "--seed", "0"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let none = d.join("checkpoints/none-s0.json");
    let usn = d.join("checkpoints/usn-s0.json");
    assert!(d.join("logs/usn-s0.csv").exists());
    assert_eq!(fs::read_to_string(d.join("runs.csv")).unwrap().lines().count(), 3);
    assert_eq!(Network::load(&usn).unwrap().alive_channels()[..4], [6, 12, 12, 12]);

    let pruned = d.join("pruned.json");
    let out = bin(
        d,
        &["prune", "--config", &cfg, "--checkpoint", none.to_str().unwrap(), "--rho", "0.5", "--output", pruned.to_str().unwrap()],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(Network::load(&pruned).unwrap().alive_channels()[..4], [4, 8, 8, 8]);
    let rnd = d.join("random.json");
    let out = bin(
        d,
        &["prune", "--checkpoint", none.to_str().unwrap(), "--rho", "0.5", "--random", "--output", rnd.to_str().unwrap()],
    );
    assert!(out.status.success());
    assert_eq!(Network::load(&rnd).unwrap().alive_channels()[..4], [4, 8, 8, 8]);

    let out = bin(d, &["certify", "--config", &cfg, "--checkpoint", none.to_str().unwrap(), usn.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let raw = fs::read_to_string(d.join("campaign.csv")).unwrap();
    // 2 networks × 2 images × 2 perturbations.
    assert_eq!(raw.lines().count(), 1 + 8);

    let out = bin(d, &["report", "--config", &cfg]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("4 (arm, perturbation) rows"));
    let by_arm = fs::read_to_string(d.join("accuracy_by_arm.csv")).unwrap();
    assert!(by_arm.lines().any(|l| l.starts_with("usn,usn,0.25,10")), "{by_arm}");

    let out = bin(d, &["visualize", "--config", &cfg, "--checkpoint", usn.to_str().unwrap()]);
    assert!(out.status.success());
    let neurons = fs::read_to_string(d.join("neurons.csv")).unwrap();
    assert_eq!(neurons.lines().count(), 1 + 8 * 256 + 16 * 64 + 16 * 16 + 16 * 4);
    assert!(neurons.lines().nth(1).unwrap().starts_with("usn-s0,"));
}

#[test]
fn experiment_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = bin(dir.path(), &["experiment", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("verified accuracy"));
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["runs"].as_array().unwrap().len(), 2);
}
