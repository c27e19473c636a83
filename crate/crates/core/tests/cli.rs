//! End-to-end behaviour of the `sd4r` executable.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sd4r::checkpoint::{self, Checkpoint};
use sd4r::cli::{config_hash, RunManifest};
use sd4r::io::{read_json, write_cloud_csv};
use sd4r::model::Sd4rModel;
use sd4r::{PipelineConfig, PointCloud, RadarPoint};

fn sd4r(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sd4r"))
        .args(args)
        .output()
        .expect("spawn sd4r")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

/// A model whose vote head ignores its input: every point gets the same
/// logits and a zero offset, so virtual points coincide with their sources.
fn constant_vote_model(cfg: &PipelineConfig, logits: &[f64]) -> Sd4rModel {
    let mut m = Sd4rModel::init(cfg, 1);
    let last = m.heads.vote_head.layers_mut().last_mut().unwrap();
    last.weight.as_mut_slice().fill(0.0);
    last.bias.fill(0.0);
    last.bias[..logits.len()].copy_from_slice(logits);
    m
}

fn save_model(path: &Path, model: Sd4rModel) {
    checkpoint::save(
        path,
        &Checkpoint {
            model,
            velocity: None,
            epoch: 0,
        },
    )
    .unwrap();
}

#[test]
fn help_and_version_exit_zero() {
    let o = sd4r(&["--help"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("synth-gen") && stdout(&o).contains("ablate-radius"));
    assert_eq!(code(&sd4r(&["train", "--help"])), 0);
    assert_eq!(code(&sd4r(&["--version"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    let o = sd4r(&["eval", "--no-such-flag"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).starts_with("ERROR 1:"));
    assert_eq!(code(&sd4r(&[])), 1);
    assert_eq!(code(&sd4r(&["frobnicate"])), 1);
    assert_eq!(code(&sd4r(&["--set", "tau=1.5", "grad-check"])), 1);
    let o = sd4r(&["--threads", "0", "grad-check"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).starts_with("ERROR 1:"));
}

#[test]
fn grad_check_passes_on_a_fresh_model() {
    let o = sd4r(&["grad-check"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    let last = out.lines().last().unwrap();
    let err: f64 = last.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(err < 1e-6, "{out}");
}

#[test]
fn malformed_input_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "x,y,z,rcs,v_r\n1,2,oops,4,5\n").unwrap();
    let o = sd4r(&["inspect", "--input", &s(&bad), "--radii"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).starts_with("ERROR 2:"), "{}", stderr(&o));

    let o = sd4r(&["inspect", "--input", &s(&dir.path().join("missing.csv")), "--votes"]);
    assert_eq!(code(&o), 2);

    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let o = sd4r(&["grad-check", "--model", &s(&junk)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn non_finite_parameters_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::default();
    let mut m = Sd4rModel::init(&cfg, 0);
    m.heads.det_head.layers_mut()[0].bias[0] = f64::NAN;
    let path = dir.path().join("nan.bin");
    save_model(&path, m);
    let o = sd4r(&["grad-check", "--model", &s(&path)]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).starts_with("ERROR 3:"));
}

#[test]
fn inspect_radii_on_a_single_pillar() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::default();
    // all points in the pillar spanning x in [9.92, 10.08), y in [0, 0.16);
    // the model calls every point a car
    let cloud = PointCloud::new(
        [(9.95, 0.01), (9.99, 0.02), (10.03, 0.12), (10.07, 0.15)]
            .iter()
            .map(|&(x, y)| RadarPoint::new(x, y, 0.0, 10.0, 3.0))
            .collect(),
    );
    let input = dir.path().join("one.csv");
    write_cloud_csv(&input, &cloud).unwrap();
    let model = dir.path().join("car.bin");
    save_model(&model, constant_vote_model(&cfg, &[0.0, 0.0, 1.0, 0.0]));
    let o = sd4r(&["inspect", "--input", &s(&input), "--model", &s(&model), "--radii"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "pillar,ix,iy,n_points,n_fore,n_pedestrian,n_cyclist,n_car,radius");
    assert_eq!(lines.len(), 2, "{out}");
    // four sources and four coincident virtual points, all cars: R = W_car
    assert_eq!(lines[1], "0,62,160,8,8,0,0,8,0.4");
}

#[test]
fn inspect_votes_with_zero_offsets_keeps_positions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::default();
    let scenes = dir.path().join("data");
    assert_eq!(code(&sd4r(&["synth-gen", "--scenes", "2", "--out", &s(&scenes)])), 0);
    let model = dir.path().join("zero.bin");
    save_model(&model, constant_vote_model(&cfg, &[0.0; 4]));
    let o = sd4r(&[
        "inspect",
        "--input",
        &s(&scenes.join("scene_0001.csv")),
        "--model",
        &s(&model),
        "--votes",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    let mut rows = 0;
    for line in out.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[1..4], f[5..8], "{line}");
        rows += 1;
    }
    assert!(rows > 0);
}

#[test]
fn inspect_matches_golden_files() {
    let input = golden_dir().join("scene.csv");
    for what in ["radii", "pillars", "foreground", "votes"] {
        let o = sd4r(&["--seed", "42", "inspect", "--input", &s(&input), &format!("--{what}")]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let path = golden_dir().join(format!("inspect_{what}.csv"));
        if std::env::var_os("SD4R_BLESS").is_some() {
            std::fs::write(&path, &o.stdout).unwrap();
        }
        let golden = std::fs::read(&path).unwrap();
        assert!(golden == o.stdout, "inspect --{what} differs from {}", path.display());
    }
}

#[test]
fn resumed_training_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| s(&dir.path().join(n));
    assert_eq!(code(&sd4r(&["synth-gen", "--scenes", "6", "--out", &p("data")])), 0);
    let full = sd4r(&["train", "--data", &p("data"), "--out", &p("full.bin"), "--epochs", "4", "--log", &p("full.csv")]);
    assert_eq!(code(&full), 0, "{}", stderr(&full));
    assert_eq!(code(&sd4r(&["train", "--data", &p("data"), "--out", &p("half.bin"), "--epochs", "2"])), 0);
    let rest = sd4r(&[
        "train", "--data", &p("data"), "--out", &p("resumed.bin"), "--epochs", "4", "--resume", &p("half.bin"),
    ]);
    assert_eq!(code(&rest), 0, "{}", stderr(&rest));
    assert_eq!(std::fs::read(p("full.bin")).unwrap(), std::fs::read(p("resumed.bin")).unwrap());
    // the resumed run prints exactly the last two epochs of the full run
    let tail: Vec<String> = stdout(&full).lines().skip(2).map(String::from).collect();
    assert_eq!(stdout(&rest).lines().map(String::from).collect::<Vec<_>>(), tail);
    assert_eq!(std::fs::read_to_string(p("full.csv")).unwrap().lines().count(), 5);
}

#[test]
fn config_file_overrides_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    std::fs::write(p("cfg.json"), r#"{ "tau": 0.6, "knn_k": 5, "seed": 3 }"#).unwrap();
    let o = sd4r(&[
        "--config", &s(&p("cfg.json")), "--set", "tau=0.55", "--seed", "9",
        "synth-gen", "--scenes", "3", "--out", &s(&p("data")),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m: RunManifest = read_json(&p("data").join("run_manifest.json")).unwrap();
    assert_eq!(m.command, "synth-gen");
    assert_eq!((m.config.tau, m.config.knn_k, m.config.seed, m.seed), (0.55, 5, 9, 9));
    assert_eq!(m.config_hash, config_hash(&m.config));
    assert_eq!(m.version, env!("CARGO_PKG_VERSION"));

    std::fs::write(p("bad.json"), r#"{ "tau": 0.6, "no_such_key": 1 }"#).unwrap();
    let o = sd4r(&["--config", &s(&p("bad.json")), "grad-check"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn pipeline_and_ablation_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| s(&dir.path().join(n));
    assert_eq!(code(&sd4r(&["synth-gen", "--scenes", "10", "--out", &p("data")])), 0);
    assert_eq!(code(&sd4r(&["train", "--data", &p("data"), "--out", &p("ck.bin"), "--epochs", "2"])), 0);
    std::fs::create_dir(dir.path().join("raw")).unwrap();
    for n in ["scene_0008", "scene_0009"] {
        std::fs::copy(dir.path().join("data").join(format!("{n}.csv")), dir.path().join("raw").join(format!("{n}.csv")))
            .unwrap();
    }
    for args in [
        vec!["densify", "--input", &p("raw"), "--model", &p("ck.bin"), "--output", &p("dense")],
        vec!["detect", "--input", &p("dense"), "--model", &p("ck.bin"), "--output", &p("dets")],
        vec!["eval", "--dets", &p("dets"), "--gt", &p("data"), "--region", "corridor", "--out", &p("report.json")],
    ] {
        let o = sd4r(&args);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
    }
    let report: serde_json::Value = read_json(&dir.path().join("report.json")).unwrap();
    assert_eq!(report["metrics"]["region"], "corridor");
    assert_eq!(report["scenes"].as_array().unwrap().len(), 2);
    assert!(dir.path().join("report.json.manifest.json").exists());
    assert!(dir.path().join("dets").join("run_manifest.json").exists());

    let o = sd4r(&["ablate-radius", "--model", &p("ck.bin"), "--data", &p("data"), "--out", &p("m.csv")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = std::fs::read_to_string(p("m.csv")).unwrap();
    assert_eq!(table.lines().count(), 11);
    assert!(table.starts_with("r_pedestrian,r_cyclist,r_car,ap_pedestrian,ap_cyclist,ap_car,map\n"));
    assert!(table.lines().nth(10).unwrap().starts_with("0.2,0.3,0.4,"));

    let o = sd4r(&["ablate-radius", "--model", &p("ck.bin"), "--data", &p("data"), "--grid", "0.2,0.3"]);
    assert_eq!(code(&o), 1);
}
