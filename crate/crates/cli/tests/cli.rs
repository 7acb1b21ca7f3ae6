use std::path::Path;
use std::process::{Command, Output};

use phieat::image::Image;

const TINY: &str = r#"
total_steps = 10
batch_pairs = 3
checkpoint_every = 0
dataset.families = ["checker", "stripes", "dots"]
dataset.instances_per_family = 2
dataset.geometries_per_material = 2
dataset.lightings_per_material = 2
dataset.resolution = 32
dataset.scenes = 2
backbone.image_size = 16
backbone.embed_dim = 16
backbone.depth = 1
backbone.num_heads = 2
backbone.num_registers = 2
backbone.prototype_count = 16
backbone.head_hidden_dim = 16
backbone.head_bottleneck_dim = 8
backbone.ibot_head_dim = 8
views.global_size = 16
views.local_size = 8
views.locals_per_view = 2
eval.k = 4
eval.queries_per_scene = 2
"#;

fn phieat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phieat")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_creates_the_output_dir_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("nested/a");
    let b = dir.path().join("b");
    let ra = phieat(&["gen", "--seed", "1", "--out", s(&a)]);
    let rb = phieat(&["gen", "--seed", "1", "--out", s(&b)]);
    assert!(ra.status.success(), "{}", stderr(&ra));
    assert!(rb.status.success());
    assert!(stdout(&ra).starts_with("1024 samples, 32 scenes, manifest "));
    assert_eq!(stdout(&ra), stdout(&rb));
    assert!(a.join("data/manifest.json").exists());
}

#[test]
fn train_writes_one_metric_line_per_step_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let full = dir.path().join("full");
    let r = phieat(&["train", "--config", &cfg, "--out", s(&full)]);
    assert!(r.status.success(), "{}", stderr(&r));
    let log = std::fs::read_to_string(full.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 10);
    assert!(full.join("checkpoints/last.safetensors").exists());

    let part = dir.path().join("part");
    let data = full.join("data");
    let r = phieat(&["train", "--config", &cfg, "--out", s(&part), "--data", s(&data), "--stop-after", "6"]);
    assert!(r.status.success(), "{}", stderr(&r));
    let r = phieat(&["train", "--config", &cfg, "--out", s(&part), "--data", s(&data), "--resume"]);
    assert!(r.status.success(), "{}", stderr(&r));
    let resumed = std::fs::read_to_string(part.join("metrics.jsonl")).unwrap();
    assert_eq!(resumed.lines().count(), 10);
    let total = |line: &str| serde_json::from_str::<serde_json::Value>(line).unwrap()["total"].as_f64().unwrap();
    for (x, y) in log.lines().zip(resumed.lines()) {
        let (x, y) = (total(x), total(y));
        assert!((x - y).abs() <= 1e-6 * x.abs().max(y.abs()), "{x} vs {y}");
    }
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let r = phieat(&["train", "--out", s(dir.path()), "--overrides", "loss.lambda_zz=1"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(stderr(&r).contains("loss.lambda_zz"), "{}", stderr(&r));
}

#[test]
fn eval_filters_protocols_and_rejects_missing_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    let r = phieat(&["eval", "--config", &cfg, "--out", s(&out), "--random-init", "--protocols", "knn"]);
    assert!(r.status.success(), "{}", stderr(&r));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    let keys: Vec<&String> = report.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["knn"]);

    let r = phieat(&["eval", "--config", &cfg, "--out", s(&out), "--checkpoint", "nope.safetensors"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn random_init_knn_is_near_chance_on_the_toy_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let r = phieat(&["eval", "--out", s(dir.path()), "--random-init", "--protocols", "knn"]);
    assert!(r.status.success(), "{}", stderr(&r));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    let top1 = report["knn"]["top1"].as_f64().unwrap();
    assert!((top1 - 0.125).abs() <= 0.05, "top1 {top1}");
}

#[test]
fn select_writes_heatmap_and_thresholded_mask() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    assert!(phieat(&["gen", "--config", &cfg, "--out", s(&out)]).status.success());
    let scene = out.join("data/scenes/scene-000.png");
    let r = phieat(&["select", "--config", &cfg, "--out", s(&out), "--random-init", "--image", s(&scene), "--query-x", "5", "--query-y", "5"]);
    assert!(r.status.success(), "{}", stderr(&r));
    for name in ["scene-000.heatmap.png", "scene-000.mask.png"] {
        let img = Image::load_png(&out.join(name)).unwrap();
        assert_eq!((img.width, img.height), (32, 32));
    }
}

#[test]
fn select_rejects_queries_outside_the_image() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("run");
    assert!(phieat(&["gen", "--config", &cfg, "--out", s(&out)]).status.success());
    let scene = out.join("data/scenes/scene-000.png");
    let r = phieat(&["select", "--config", &cfg, "--out", s(&out), "--random-init", "--image", s(&scene), "--query-x", "99", "--query-y", "0"]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn verify_passes_and_names_an_injected_fault() {
    let ok = phieat(&["verify"]);
    assert!(ok.status.success(), "{}{}", stdout(&ok), stderr(&ok));
    assert!(stdout(&ok).lines().all(|l| l.starts_with("PASS ")));

    let bad = phieat(&["verify", "--inject-fault"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stdout(&bad).contains("FAIL grad-isolated-losses"));
    assert!(stderr(&bad).contains("grad-isolated-losses"));
}
