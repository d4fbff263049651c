use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dualsdf_core::sampling::{read_sample_cache_file, MeshSdf};
use dualsdf_core::vad::Dataset;
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dualsdf"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "dualsdf {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY_CONFIG: &str = r#"{
  "net": { "latent_dim": 4, "hidden_dim": 16, "n_primitives": 4 },
  "hp": { "epochs": 2, "batch_shapes": 2, "fine_samples_per_shape": 64, "coarse_samples_per_shape": 32 }
}"#;

#[test]
fn usage_errors_exit_2() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["prepare", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["render", "--checkpoint", "c.dsdc", "--shape", "a"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));

    let out = run(&["render", "--checkpoint", "c", "--shape", "a", "--random", "1", "--out", "o.png"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_exits_0() {
    for sub in ["prepare", "train", "eval", "render", "manipulate", "interpolate", "serve"] {
        let out = run(&[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{sub}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.dsdc");
    let out = run(&["render", "--checkpoint", s(&missing), "--random", "1", "--out", "o.png"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = run(&["prepare", "--input", s(&empty), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn prepare_meshes_golden() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let input = fixtures().join("meshes");
    ok(&["prepare", "--input", s(&input), "--out", s(&out), "--fine", "300", "--coarse", "200", "--seed", "5"]);

    let mut files: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    files.sort();
    assert_eq!(
        files,
        [
            "cube.coarse.dsdf",
            "cube.fine.dsdf",
            "manifest.json",
            "tetra.coarse.dsdf",
            "tetra.fine.dsdf"
        ]
    );
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["fine_n"], 300);
    assert_eq!(manifest["coarse_n"], 200);
    let ids: Vec<&str> = manifest["shapes"].as_array().unwrap().iter().map(|e| e["id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["cube", "tetra"]);

    // Cached distances (stored as f32) agree with the normalised mesh.
    let fine = read_sample_cache_file(&out.join("cube.fine.dsdf"), "cube").unwrap();
    assert_eq!(fine.samples.len(), 300);
    let text = fs::read_to_string(input.join("cube.obj")).unwrap();
    let mesh = dualsdf_core::sampling::load_mesh(&text).unwrap();
    let (mesh, _) = dualsdf_core::sampling::normalize_to_unit_sphere(&mesh).unwrap();
    let sdf = MeshSdf::new(&mesh);
    for s in fine.samples.iter().take(50) {
        assert!((sdf.signed_distance(s.point) - s.sdf).abs() < 1e-6);
    }

    let again = dir.path().join("again");
    ok(&["prepare", "--input", s(&input), "--out", s(&again), "--fine", "300", "--coarse", "200", "--seed", "5"]);
    for f in &files {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn pipeline_end_to_end_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let config = p("tiny.json");
    fs::write(&config, TINY_CONFIG).unwrap();

    ok(&["prepare", "--procedural", "2", "--out", s(&p("data")), "--fine", "256", "--coarse", "128", "--seed", "1"]);
    let data = Dataset::load(&p("data")).unwrap();
    assert_eq!(data.shapes.len(), 2);
    let shape = data.shapes[0].id.clone();

    for run_dir in ["run_a", "run_b"] {
        ok(&[
            "train",
            "--data",
            s(&p("data")),
            "--out",
            s(&p(run_dir)),
            "--desk",
            "--config",
            s(&config),
            "--seed",
            "2",
        ]);
    }
    let ckpt = p("run_a").join("final.dsdc");
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(p("run_b").join("final.dsdc")).unwrap());
    let log = fs::read_to_string(p("run_a").join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    // Resuming for one more epoch extends the log.
    ok(&[
        "train",
        "--data",
        s(&p("data")),
        "--out",
        s(&p("run_a")),
        "--resume",
        s(&ckpt),
        "--epochs",
        "3",
    ]);
    assert_eq!(fs::read_to_string(p("run_a").join("log.csv")).unwrap().lines().count(), 4);
    let ckpt = p("run_b").join("final.dsdc");

    for (name, level) in [("a.png", "fine"), ("b.png", "fine"), ("c.ppm", "coarse")] {
        ok(&[
            "render",
            "--checkpoint",
            s(&ckpt),
            "--shape",
            &shape,
            "--level",
            level,
            "--width",
            "24",
            "--height",
            "16",
            "--steps",
            "16",
            "--out",
            s(&p(name)),
        ]);
    }
    assert_eq!(fs::read(p("a.png")).unwrap(), fs::read(p("b.png")).unwrap());
    assert!(fs::read(p("a.png")).unwrap().starts_with(b"\x89PNG"));
    assert!(fs::read(p("c.ppm")).unwrap().starts_with(b"P6\n24 16\n255\n"));

    ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&p("data")),
        "--out",
        s(&p("report.json")),
        "--iou-res",
        "12",
        "--mc-res",
        "12",
        "--points",
        "64",
        "--emd-points",
        "16",
    ]);
    let report: Value = serde_json::from_str(&fs::read_to_string(p("report.json")).unwrap()).unwrap();
    let row = &report[&shape];
    for key in ["iou_coarse", "iou_fine", "iou_fine_coarse"] {
        let v = row[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
    assert!(report["aggregate"]["iou_coarse"]["mean"].is_f64());

    fs::write(
        p("objective.json"),
        r#"{"terms": [{"kind": "MovePrimitive", "indices": [0], "target": [0.2, 0.0, 0.0]}]}"#,
    )
    .unwrap();
    let out = ok(&[
        "manipulate",
        "--checkpoint",
        s(&ckpt),
        "--random",
        "3",
        "--objective",
        s(&p("objective.json")),
        "--steps",
        "10",
        "--trace",
        s(&p("trace.jsonl")),
        "--out-latent",
        s(&p("z.json")),
    ]);
    let outcome: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(outcome["final_l_man"].as_f64().unwrap() <= outcome["initial_l_man"].as_f64().unwrap());
    let z: Vec<f64> = serde_json::from_str(&fs::read_to_string(p("z.json")).unwrap()).unwrap();
    assert_eq!(z.len(), 4);
    let trace = fs::read_to_string(p("trace.jsonl")).unwrap();
    let l: Vec<f64> = trace
        .lines()
        .map(|line| serde_json::from_str::<Value>(line).unwrap()["l_man"].as_f64().unwrap())
        .collect();
    assert!(l.windows(2).all(|w| w[1] <= w[0]));

    ok(&[
        "interpolate",
        "--checkpoint",
        s(&ckpt),
        "--from",
        &data.shapes[0].id,
        "--to",
        &data.shapes[1].id,
        "--count",
        "3",
        "--out",
        s(&p("interp.jsonl")),
    ]);
    let lines: Vec<Value> = fs::read_to_string(p("interp.jsonl"))
        .unwrap()
        .lines()
        .map(|line| serde_json::from_str(line).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[1]["t"], 0.5);

    ok(&[
        "interpolate",
        "--checkpoint",
        s(&ckpt),
        "--from",
        &data.shapes[0].id,
        "--to",
        &data.shapes[1].id,
        "--slots",
        "1",
        "--steps",
        "5",
        "--out",
        s(&p("heights.jsonl")),
    ]);
    assert!(fs::read_to_string(p("heights.jsonl")).unwrap().lines().count() >= 1);
}
