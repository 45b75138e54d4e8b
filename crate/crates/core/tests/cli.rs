use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use graspkit::geometry::{approach_rotation, GraspPose, Mask, Scene, Vec3};
use serde_json::Value;

fn graspkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graspkit")).args(args).output().unwrap()
}

fn ok_json(args: &[&str]) -> Value {
    let mut full = args.to_vec();
    full.push("--json");
    let out = graspkit(&full);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL_CONFIG: &str = r#"{
    "recipe": { "count_min": 1, "count_max": 2, "point_spacing": 0.008 },
    "label": { "seeds": 8 },
    "camera": { "width": 160, "height": 120, "fx": 150.0, "fy": 150.0, "cx": 79.5, "cy": 59.5 }
}"#;

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("config.json");
        std::fs::write(&config, SMALL_CONFIG).unwrap();
        Workspace { _dir: dir, root, config }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

#[test]
fn exit_codes() {
    assert_eq!(graspkit(&["--help"]).status.code(), Some(0));
    assert_eq!(graspkit(&["--version"]).status.code(), Some(0));
    assert_eq!(graspkit(&[]).status.code(), Some(1));
    assert_eq!(graspkit(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(graspkit(&["views", "--count", "0"]).status.code(), Some(1));
    assert_eq!(graspkit(&["nms", "--grasps", "/nonexistent/g.json", "--out", "/tmp/x.json"]).status.code(), Some(2));

    let ws = Workspace::new();
    let bad = ws.path("bad.json");
    std::fs::write(&bad, r#"{ "nms": { "translation": 0.03, "unknown_key": 1 } }"#).unwrap();
    assert_eq!(graspkit(&["--config", s(&bad), "views"]).status.code(), Some(1));
    std::fs::write(&bad, r#"{ "views": { "count": -3 } }"#).unwrap();
    assert_eq!(graspkit(&["--config", s(&bad), "views"]).status.code(), Some(1));
}

#[test]
fn views_manifest() {
    let ws = Workspace::new();
    let out = ws.path("views.json");
    let summary = ok_json(&["views", "--count", "256", "--radius", "0.5", "--out", s(&out)]);
    assert_eq!(summary["count"], 256);
    assert!(summary["min_pairwise_angle_deg"].as_f64().unwrap() >= 4.0);
    assert!(out.exists());
}

fn small_pipeline(ws: &Workspace, threads: &str) -> Vec<(String, Vec<u8>)> {
    let cfg = s(&ws.config);
    let common = ["--config", cfg, "--threads", threads, "--seed", "3"];
    let run = |args: &[&str]| {
        let mut full: Vec<&str> = common.to_vec();
        full.extend_from_slice(args);
        ok_json(&full)
    };
    let sim = ws.path("sim");
    run(&["simscene", "--out", s(&sim), "--views", "2"]);
    let scene = sim.join("scene.fgpc");
    let depth = sim.join("depth_0000.pgm");
    let meta = sim.join("depth_0000.json");

    let normals = run(&["normals", "--depth", s(&depth), "--meta", s(&meta), "--out", s(&ws.path("cam.fgpc"))]);
    assert!(normals["valid_normals"].as_u64().unwrap() > 0);

    let label = run(&[
        "label", "--scene", s(&scene), "--out", s(&ws.path("labeled.fgpc")), "--grasps", s(&ws.path("grasps.json")),
    ]);
    assert_eq!(label["seeds"], 8);

    run(&["group", "--scene", s(&ws.path("labeled.fgpc")), "--out", s(&ws.path("groups.f32")), "--seeds", "4"]);
    run(&["nms", "--grasps", s(&ws.path("grasps.json")), "--out", s(&ws.path("nms.json"))]);
    let eval = run(&["eval", "--scene", s(&scene), "--grasps", s(&ws.path("nms.json")), "--out", s(&ws.path("report.json"))]);
    let ap = eval["ap_overall"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&ap));

    run(&["noise", "--depth", s(&depth), "--meta", s(&meta), "--out", s(&ws.path("noisy.pgm")), "--sigma-pixel", "0.002"]);

    let d = graspkit::io::read_depth(&depth, &meta).unwrap();
    let mask_path = ws.path("mask.pgm");
    graspkit::io::write_mask(&Mask::new(d.width, d.height, true), &mask_path).unwrap();
    let filtered = run(&[
        "filter-mask", "--depth", s(&depth), "--meta", s(&meta), "--mask", s(&mask_path), "--grasps",
        s(&ws.path("nms.json")), "--out", s(&ws.path("masked.json")),
    ]);
    assert!(filtered["kept"].as_u64().unwrap() <= filtered["input"].as_u64().unwrap());

    let mut files: Vec<(String, Vec<u8>)> = walk(&ws.root)
        .into_iter()
        .map(|p| (p.strip_prefix(&ws.root).unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn small_pipeline_is_deterministic_across_thread_counts() {
    let a = Workspace::new();
    let b = Workspace::new();
    let fa = small_pipeline(&a, "1");
    let fb = small_pipeline(&b, "3");
    assert_eq!(fa.len(), fb.len());
    for ((na, da), (nb, db)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        assert!(da == db, "{na} differs between thread counts");
    }
}

#[test]
fn eval_of_all_successful_grasps_is_one() {
    let ws = Workspace::new();
    let mut points = Vec::new();
    let mut normals = Vec::new();
    for side in [-1.0, 1.0] {
        for i in 0..5 {
            for j in 0..5 {
                points.push(Vec3::new(-0.004 + 0.002 * i as f64, 0.015 * side, 0.004 * j as f64));
                normals.push(Vec3::new(0.0, side, 0.0));
            }
        }
    }
    let n = points.len();
    let scene = Scene::new(points, vec![1; n]).unwrap().with_normals(normals).unwrap();
    graspkit::io::write_scene(&scene, ws.path("plates.fgpc")).unwrap();
    let grasps: Vec<GraspPose> = (0..60)
        .map(|i| GraspPose {
            center: Vec3::zeros(),
            rotation: approach_rotation(&-Vec3::z(), 0.0),
            width: 0.05,
            depth: 0.01,
            score: 1.0 - i as f64 * 0.01,
            object_id: Some(1),
        })
        .collect();
    graspkit::io::write_grasps(&grasps, ws.path("g.json")).unwrap();
    let report = ok_json(&[
        "eval", "--scene", s(&ws.path("plates.fgpc")), "--grasps", s(&ws.path("g.json")), "--nms-t", "0",
    ]);
    assert_eq!(report["ap_overall"].as_f64().unwrap(), 1.0);
    assert_eq!(report["after_nms"], 60);

    let suppressed = ok_json(&["eval", "--scene", s(&ws.path("plates.fgpc")), "--grasps", s(&ws.path("g.json"))]);
    assert_eq!(suppressed["after_nms"], 1);
    let h50: f64 = (1..=50).map(|k| 1.0 / k as f64).sum::<f64>() / 50.0;
    assert!((suppressed["ap_overall"].as_f64().unwrap() - h50).abs() < 1e-12);
}

#[test]
fn small_gradient_check_passes() {
    let summary = ok_json(&["mra-check", "--instances", "2", "--groups", "3", "--seeds", "2", "--channels", "8", "--heads", "2"]);
    assert_eq!(summary["instances"], 2);
    assert!(summary["max_rel_error"].as_f64().unwrap() < 1e-5);
}
