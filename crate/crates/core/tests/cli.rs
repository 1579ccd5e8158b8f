use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use proto_lab::dataset::{load_dataset, read_ppm};
use proto_lab::geometry::PixelBox;
use proto_lab::protopnet::{load_checkpoint, predict};
use proto_lab::report::{RunManifest, GREEN, RUN_MANIFEST_FILE, YELLOW};
use proto_lab::Tensor;
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_proto-lab"));
    c.env("PROTO_LAB_THREADS", "1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn proto-lab")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A tiny corrupted dataset plus a briefly trained model, shared by tests.
struct Fixture {
    _dir: TempDir,
    data: PathBuf,
    model_dir: PathBuf,
    checkpoint: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("data");
        let model_dir = dir.path().join("model");
        ok(&[
            "gen-data",
            "--out",
            p(&data),
            "--classes",
            "3",
            "--train-per-class",
            "12",
            "--test-per-class",
            "6",
            "--corrupt-fraction",
            "0.5",
        ]);
        ok(&[
            "train",
            "--data",
            p(&data),
            "--out",
            p(&model_dir),
            "--warmup-epochs",
            "1",
            "--joint-epochs",
            "1",
            "--last-layer-iters",
            "2",
            "--prototypes-per-class",
            "2",
        ]);
        let checkpoint = model_dir.join("model.plab");
        Fixture {
            _dir: dir,
            data,
            model_dir,
            checkpoint,
        }
    })
}

fn correctly_classified_id(f: &Fixture) -> usize {
    let ds = load_dataset(&f.data).unwrap();
    let model = load_checkpoint(&f.checkpoint).unwrap();
    ds.test
        .iter()
        .find(|img| predict(&model, &img.image).unwrap().classification.class == img.label)
        .expect("at least one correct test image")
        .id
}

fn misclassified_id(f: &Fixture) -> Option<usize> {
    let ds = load_dataset(&f.data).unwrap();
    let model = load_checkpoint(&f.checkpoint).unwrap();
    ds.test
        .iter()
        .find(|img| predict(&model, &img.image).unwrap().classification.class != img.label)
        .map(|img| img.id)
}

fn pixel(img: &Tensor, y: usize, x: usize) -> [f64; 3] {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let d = img.data();
    [d[y * w + x], d[h * w + y * w + x], d[2 * h * w + y * w + x]]
}

fn outline(b: &PixelBox) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    for x in b.left..=b.right {
        v.push((b.top, x));
        v.push((b.bottom, x));
    }
    for y in b.top..=b.bottom {
        v.push((y, b.left));
        v.push((y, b.right));
    }
    v
}

fn read_box(v: &Value) -> PixelBox {
    serde_json::from_value(v.clone()).unwrap()
}

fn read_csv_body(path: &Path) -> (String, Vec<String>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines().map(str::to_string);
    let header = lines.next().unwrap();
    (header, lines.collect())
}

#[test]
fn gen_data_writes_manifest_and_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&[
            "gen-data",
            "--out",
            p(out),
            "--classes",
            "2",
            "--train-per-class",
            "3",
            "--test-per-class",
            "2",
            "--seed",
            "11",
        ]);
    }
    let ds = load_dataset(&a).unwrap();
    assert_eq!(ds.train.len(), 6);
    assert_eq!(ds.test.len(), 4);
    let manifest = RunManifest::read(&a.join(RUN_MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.command, "gen-data");
    assert_eq!(manifest.seed, Some(11));
    assert!(manifest.outputs.iter().any(|o| o.ends_with("manifest.csv")));
    for o in &manifest.outputs {
        if o.ends_with(RUN_MANIFEST_FILE) {
            continue;
        }
        assert_eq!(
            fs::read(a.join(o)).unwrap(),
            fs::read(b.join(o)).unwrap(),
            "{o} differs"
        );
    }
}

#[test]
fn missing_required_argument_is_a_usage_error() {
    let out = run(&["gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["train", "--data", "/nonexistent"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_dataset_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = run(&["train", "--data", "/nonexistent/data", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_thread_count_is_rejected() {
    let out = bin()
        .env("PROTO_LAB_THREADS", "zero")
        .args(["gradcheck", "--seeds", "1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn training_is_bitwise_reproducible() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    ok(&[
        "replay",
        "--manifest",
        p(&f.model_dir.join(RUN_MANIFEST_FILE)),
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(
        fs::read(&f.checkpoint).unwrap(),
        fs::read(dir.path().join("model.plab")).unwrap()
    );
    assert_eq!(
        fs::read(f.model_dir.join("metrics.csv")).unwrap(),
        fs::read(dir.path().join("metrics.csv")).unwrap()
    );
}

#[test]
fn gradcheck_passes_and_detects_injected_fault() {
    let dir = TempDir::new().unwrap();
    let out = ok(&["gradcheck", "--seeds", "1", "--out", p(dir.path())]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("composite_loss"));
    assert!(!stdout.contains("FAIL"));
    let report: Value = serde_json::from_slice(&fs::read(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert!(report["entries"]
        .as_array()
        .unwrap()
        .iter()
        .all(|e| e["passed"] == true));

    let out = run(&["gradcheck", "--seeds", "1", "--inject-fault", "relu"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stdout).unwrap().contains("FAIL"));

    let out = run(&["gradcheck", "--seeds", "1", "--inject-fault", "no-such-check"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_iteration_attack_is_a_noop_and_overlays_match_json() {
    let f = fixture();
    let id = correctly_classified_id(f);
    let dir = TempDir::new().unwrap();
    ok(&[
        "attack",
        "--checkpoint",
        p(&f.checkpoint),
        "--data",
        p(&f.data),
        "--image-id",
        &id.to_string(),
        "--iterations",
        "0",
        "--out",
        p(dir.path()),
    ]);
    let report: Value = serde_json::from_slice(&fs::read(dir.path().join("attack.json")).unwrap()).unwrap();
    let record = &report["record"];
    assert_eq!(record["image_id"], id);
    assert_eq!(record["iterations"], 0);
    assert_eq!(record["best_iteration"], 0);
    assert_eq!(record["success"], false);
    assert_eq!(record["before"], record["after"]);

    let clean = read_ppm(&dir.path().join("clean_overlay.ppm")).unwrap();
    for (y, x) in outline(&read_box(&report["clean_bbox"])) {
        assert_eq!(pixel(&clean, y, x), YELLOW, "clean overlay at ({y}, {x})");
    }
    let attacked = read_ppm(&dir.path().join("attacked_overlay.ppm")).unwrap();
    let yellow = outline(&read_box(&report["attacked_bbox"]));
    for (y, x) in &yellow {
        assert_eq!(pixel(&attacked, *y, *x), YELLOW);
    }
    let rects = report["noise_rects"].as_array().unwrap();
    assert!(!rects.is_empty());
    assert_eq!(rects, record["mask"].as_array().unwrap());
    for r in rects {
        for (y, x) in outline(&read_box(r)) {
            if !yellow.contains(&(y, x)) {
                assert_eq!(pixel(&attacked, y, x), GREEN, "noise outline at ({y}, {x})");
            }
        }
    }
    assert!(dir.path().join("prototype.ppm").exists());
}

#[test]
fn attack_on_misclassified_image_exits_4() {
    let f = fixture();
    let Some(id) = misclassified_id(f) else {
        return;
    };
    let dir = TempDir::new().unwrap();
    let out = run(&[
        "attack",
        "--checkpoint",
        p(&f.checkpoint),
        "--data",
        p(&f.data),
        "--image-id",
        &id.to_string(),
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn susceptibility_without_checkpoints_writes_header_only_csv() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    ok(&["susceptibility", "--data", p(&f.data), "--out", p(dir.path())]);
    let (header, body) = read_csv_body(&dir.path().join("susceptibility.csv"));
    assert_eq!(header, "# proto-lab susceptibility v1");
    assert_eq!(body.len(), 1);
    assert!(body[0].starts_with("checkpoint,clean_accuracy,adversarial_accuracy,success_rate"));
}

#[test]
fn susceptibility_rows_share_one_image_set() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    ok(&[
        "susceptibility",
        "--data",
        p(&f.data),
        "--checkpoint",
        p(&f.checkpoint),
        "--checkpoint",
        p(&f.checkpoint),
        "--out",
        p(dir.path()),
        "--images",
        "3",
        "--k",
        "2",
        "--iterations",
        "2",
        "--no-adv-eval",
    ]);
    let (_, body) = read_csv_body(&dir.path().join("susceptibility.csv"));
    assert_eq!(body.len(), 3);
    let strip = |l: &str| l.split_once(',').unwrap().1.to_string();
    assert_eq!(strip(&body[1]), strip(&body[2]));
    let records: Vec<_> = fs::read_dir(dir.path().join("records")).unwrap().collect();
    assert_eq!(records.len(), 2);
}

#[test]
fn jpeg_exp_writes_records_and_rejects_mismatched_dataset() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("exp");
    ok(&[
        "jpeg-exp",
        "--data",
        p(&f.data),
        "--checkpoint",
        p(&f.checkpoint),
        "--out",
        p(&out),
        "--n",
        "4",
        "--examples",
        "1",
    ]);
    let (header, body) = read_csv_body(&out.join("records.csv"));
    assert_eq!(header, "# proto-lab consistency records v1");
    let summary: Value = serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["summary"]["count"].as_u64().unwrap() as usize, body.len() - 1);
    let svgs = fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "svg"))
        .count();
    assert_eq!(svgs, if body.len() > 1 { 2 } else { 0 });

    let clean = dir.path().join("clean");
    ok(&[
        "gen-data",
        "--out",
        p(&clean),
        "--classes",
        "3",
        "--train-per-class",
        "2",
        "--test-per-class",
        "1",
    ]);
    let out = run(&[
        "jpeg-exp",
        "--data",
        p(&clean),
        "--checkpoint",
        p(&f.checkpoint),
        "--out",
        p(&dir.path().join("bad")),
    ]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn replay_reproduces_experiment_outputs() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    ok(&[
        "jpeg-exp",
        "--data",
        p(&f.data),
        "--checkpoint",
        p(&f.checkpoint),
        "--out",
        p(&first),
        "--n",
        "3",
    ]);
    ok(&[
        "replay",
        "--manifest",
        p(&first.join(RUN_MANIFEST_FILE)),
        "--out",
        p(&second),
    ]);
    let m1 = RunManifest::read(&first.join(RUN_MANIFEST_FILE)).unwrap();
    let m2 = RunManifest::read(&second.join(RUN_MANIFEST_FILE)).unwrap();
    assert_eq!(m1.outputs, m2.outputs);
    for o in &m1.outputs {
        if o.ends_with(RUN_MANIFEST_FILE) {
            continue;
        }
        assert_eq!(
            fs::read(first.join(o)).unwrap(),
            fs::read(second.join(o)).unwrap(),
            "{o} differs"
        );
    }
}
