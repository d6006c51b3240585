use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use exaggerator_cli::manifest::{hash_path, read_manifests, LOCK_FILE};

const TINY: &[&str] = &[
    "data.samples=160",
    "data.image_size=16",
    "data.radius_min=2",
    "data.radius_max=6",
    "data.jitter=1",
    "classifier.epochs=2",
    "classifier.channels=4,4,4",
    "train.steps=3",
    "train.delta=0.25",
    "train.batch_size=4",
    "train.base_channels=2",
    "train.down_steps=1",
    "train.gen_blocks=1",
    "train.disc_channels=2",
    "train.disc_blocks=1",
    "train.calibration_batches=2",
    "train.checkpoint_interval=2",
    "eval.queries=6",
];

fn exe(args: &[&str], extra: &[String]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_exaggerator"));
    cmd.args(args).args(extra).env_remove("EXAGGERATOR_OUT");
    cmd.output().expect("binary runs")
}

fn tiny_flags() -> Vec<String> {
    TINY.iter().flat_map(|s| ["--set".to_string(), s.to_string()]).collect()
}

fn ok(args: &[&str]) -> Output {
    let o = exe(args, &tiny_flags());
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn fails(args: &[&str]) -> String {
    let o = exe(args, &tiny_flags());
    assert!(!o.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8_lossy(&o.stderr).to_string();
    assert_eq!(err.trim_end().lines().count(), 1, "diagnostic is not one line: {err}");
    err
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    clf: PathBuf,
    expl: PathBuf,
    query: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let (data, clf, expl) = (root.join("data"), root.join("clf"), root.join("expl"));
    ok(&["synth-data", "--out", p(&data)]);
    ok(&["train-classifier", "--data", p(&data), "--out", p(&clf)]);
    ok(&["train-explainer", "--data", p(&data), "--classifier", p(&clf), "--out", p(&expl)]);
    let query = data.join("images").join("000000.png");
    Fixture {
        _dir: dir,
        root,
        data,
        clf,
        expl,
        query,
    }
}

#[test]
fn pipeline_writes_artifacts_and_manifests() {
    let f = fixture();
    for d in [&f.data, &f.clf, &f.expl] {
        let ms = read_manifests(d).unwrap();
        assert_eq!(ms.len(), 1, "{}", d.display());
        assert!(!d.join(LOCK_FILE).exists());
    }
    let m = &read_manifests(&f.expl).unwrap()[0];
    assert_eq!(m.command, "train-explainer");
    assert_eq!(m.config["train.steps"], "3");
    assert_eq!(m.seeds["train.seed"], 0);
    assert_eq!(m.inputs[p(&f.data)], hash_path(&f.data).unwrap());
    assert!(f.expl.join("bundle/manifest.json").exists());
    assert!(f.expl.join("checkpoints/step-000002").exists());
    let metrics = fs::read_to_string(f.expl.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next(), Some("step,loss_name,value"));
    assert_eq!(metrics.lines().count(), 1 + 3 * 6);
    let ds = read_manifests(&f.data).unwrap();
    assert_eq!(ds[0].config["data.samples"], "160");
}

#[test]
fn explain_strips_and_series() {
    let f = fixture();
    let zero = f.root.join("x0");
    ok(&["explain", "--bundle", p(&f.expl), "--classifier", p(&f.clf), "--image", p(&f.query), "--delta", "0", "--out", p(&zero)]);
    let strip = image::open(zero.join("strip.png")).unwrap();
    assert_eq!(strip.width(), 2 * 16 + 2);
    assert_eq!(fs::read_to_string(zero.join("series.csv")).unwrap().lines().count(), 2);
    let sal = fs::read_to_string(zero.join("saliency.csv")).unwrap();
    assert_eq!(sal.lines().count(), 16);
    assert!(zero.join("saliency.png").exists());

    let sweep = f.root.join("xs");
    ok(&["explain", "--bundle", p(&f.expl), "--classifier", p(&f.clf), "--image", p(&f.query), "--sweep", "--out", p(&sweep)]);
    let strip = image::open(sweep.join("strip.png")).unwrap();
    assert_eq!(strip.width(), 5 * 16 + 4 * 2);
    let series = fs::read_to_string(sweep.join("series.csv")).unwrap();
    assert_eq!(series.lines().count(), 1 + 4);

    let err = fails(&["explain", "--bundle", p(&f.expl), "--classifier", p(&f.clf), "--image", p(&f.query), "--sweep", "0.1", "--out", p(&f.root.join("bad1"))]);
    assert!(err.contains("differs from the bundle"), "{err}");
    let err = fails(&["explain", "--bundle", p(&f.expl), "--classifier", p(&f.clf), "--image", p(&f.query), "--delta", "0.3", "--out", p(&f.root.join("bad2"))]);
    assert!(err.contains("not a multiple"), "{err}");
}

#[test]
fn evaluate_writes_report_and_curves() {
    let f = fixture();
    let out = f.root.join("eval");
    let o = ok(&[
        "evaluate",
        "--bundle",
        p(&f.expl),
        "--classifier",
        p(&f.clf),
        "--data",
        p(&f.data),
        "--metrics",
        "compatibility,self_consistency,pixel_flip,measurement,closeness",
        "--out",
        p(&out),
    ]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["compatibility"]["queries"], 6);
    assert!(report["self_consistency"]["reconstruction"].is_number());
    assert!(report.get("fid").is_none());
    for name in ["compatibility.csv", "compatibility.png", "pixel_flip.csv", "pixel_flip.png"] {
        assert!(out.join(name).exists(), "{name}");
    }
    assert!(String::from_utf8_lossy(&o.stdout).contains("schema_version"));
}

#[test]
fn evaluate_rejects_unknown_metric() {
    let err = fails(&["evaluate", "--bundle", "b", "--classifier", "c", "--data", "d", "--metrics", "compatibility,foo"]);
    assert!(err.contains("unknown metric `foo`"), "{err}");
    for m in ["compatibility", "fid", "pixel_flip", "confounding", "flip_matrix", "measurement"] {
        assert!(err.contains(m), "{err}");
    }
}

#[test]
fn confounding_requires_an_oracle() {
    let f = fixture();
    let err = fails(&[
        "evaluate", "--bundle", p(&f.expl), "--classifier", p(&f.clf), "--data", p(&f.data), "--metrics", "confounding",
        "--out", p(&f.root.join("e")),
    ]);
    assert!(err.contains("--oracle"), "{err}");
}

#[test]
fn training_is_deterministic_and_inputs_untouched() {
    let f = fixture();
    let before = (hash_path(&f.data).unwrap(), hash_path(&f.clf).unwrap());
    let again = f.root.join("expl2");
    ok(&["train-explainer", "--data", p(&f.data), "--classifier", p(&f.clf), "--out", p(&again)]);
    assert_eq!(
        fs::read(f.expl.join("metrics.csv")).unwrap(),
        fs::read(again.join("metrics.csv")).unwrap()
    );
    assert_eq!(
        hash_path(&f.expl.join("bundle")).unwrap(),
        hash_path(&again.join("bundle")).unwrap()
    );
    assert_eq!(before, (hash_path(&f.data).unwrap(), hash_path(&f.clf).unwrap()));
    let other = f.root.join("expl3");
    ok(&["train-explainer", "--data", p(&f.data), "--classifier", p(&f.clf), "--seed", "9", "--out", p(&other)]);
    assert_ne!(
        fs::read(f.expl.join("metrics.csv")).unwrap(),
        fs::read(other.join("metrics.csv")).unwrap()
    );
}

#[test]
fn locked_or_overlapping_outputs_are_refused() {
    let f = fixture();
    let out = f.root.join("busy");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(LOCK_FILE), "1").unwrap();
    let err = fails(&["synth-data", "--out", p(&out)]);
    assert!(err.contains("locked"), "{err}");
    let err = fails(&["train-classifier", "--data", p(&f.data), "--out", p(&f.data)]);
    assert!(err.contains("overlaps"), "{err}");
}

#[test]
fn missing_inputs_and_bad_keys_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let err = fails(&["train-classifier", "--data", p(&dir.path().join("nope")), "--out", p(&dir.path().join("o"))]);
    assert!(err.starts_with("error: "), "{err}");
    let o = exe(&["synth-data", "--set", "data.sampels=3", "--out", p(&dir.path().join("o2"))], &[]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown config key `data.sampels`"));
}

#[test]
fn config_file_sweeps_expand_into_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.cfg");
    fs::write(&cfg, "# two seeds\ndata.samples = 20\ndata.image_size = 8\ndata.radius_max = 3\ndata.radius_min = 1\ndata.jitter = 0\ndata.seed = [1, 2]\n").unwrap();
    let out = dir.path().join("sweep");
    let o = exe(&["synth-data", "--config", p(&cfg), "--out", p(&out)], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a = read_manifests(&out.join("run-000")).unwrap();
    let b = read_manifests(&out.join("run-001")).unwrap();
    assert_eq!((a[0].seeds["data.seed"], b[0].seeds["data.seed"]), (1, 2));
    assert_ne!(
        hash_path(&out.join("run-000/images")).unwrap(),
        hash_path(&out.join("run-001/images")).unwrap()
    );
    // flags override file keys
    let out2 = dir.path().join("flag");
    let o = exe(&["synth-data", "--config", p(&cfg), "--seed", "7", "--out", p(&out2)], &[]);
    assert!(o.status.success());
    assert_eq!(read_manifests(&out2).unwrap()[0].seeds["data.seed"], 7);
}

#[test]
fn relative_outputs_land_under_the_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_exaggerator"))
        .args(["synth-data", "--set", "data.samples=4", "--set", "data.image_size=8", "--set", "data.radius_min=1"])
        .args(["--set", "data.radius_max=3", "--set", "data.jitter=0", "--out", "mine"])
        .env("EXAGGERATOR_OUT", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("mine/attributes.csv").exists());
}
