use std::path::Path;
use std::process::{Command, Output};

fn warp4d(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_warp4d"))
        .args(args)
        .current_dir(cwd)
        .env_remove("SEE4D_THREADS")
        .output()
        .expect("spawn warp4d")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn version_lists_formats() {
    let dir = tempfile::tempdir().unwrap();
    let o = warp4d(&["--version"], dir.path());
    assert!(o.status.success());
    let s = String::from_utf8(o.stdout).unwrap();
    assert!(s.contains("DPF1"), "{s}");
    assert!(s.contains("warp4d-manifest/1"), "{s}");
}

#[test]
fn end_to_end_small_scene() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = warp4d(
        &["gen-scene", "--name", "block", "--out", "scenes", "--width", "32", "--height", "24", "--frames", "5"],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["cameras.json", "scene.json", "frames/frame_0004.png", "depth/depth_0004.dpf", "masks/mask_0004.png"] {
        assert!(d.join("scenes/block").join(f).is_file(), "missing {f}");
    }

    let o = warp4d(&["synth-warp", "--scene", "scenes/block", "--out", "synth", "--seed", "3"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("synth/manifest.json")).unwrap()).unwrap();
    let frames = m["frames"].as_array().unwrap();
    assert_eq!(frames.len(), 5);
    assert_eq!(frames[2]["seed"], 5);
    assert!(d.join("synth/warped/frame_0000.png").is_file());
    assert!(d.join("synth/mask/mask_0000.png").is_file());

    std::fs::write(d.join("targets.json"), r#"{"yaw_deg": [6.0]}"#).unwrap();
    std::fs::write(
        d.join("config.json"),
        r#"{"inpainter": "oracle", "pipeline": {"hops": 2, "window_length": 4, "overlap": 2, "depth_provider": "truth", "write_depth": true}}"#,
    )
    .unwrap();
    let run = |out: &str| {
        warp4d(
            &["run", "--scene", "scenes/block", "--targets", "targets.json", "--config", "config.json", "--out", out, "--seed", "9"],
            d,
        )
    };
    let o = run("out");
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("out/target_00/frame_0004.png").is_file());
    assert!(d.join("out/target_00/depth_0004.dpf").is_file());
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("out/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["schema"], "warp4d-manifest/1");
    assert_eq!(m["seed"], 9);
    assert_eq!(m["targets"][0]["status"], "ok");

    // Same seed, same bytes.
    let o = run("again");
    assert!(o.status.success(), "{}", stderr(&o));
    for i in 0..5 {
        let f = format!("target_00/frame_{i:04}.png");
        assert_eq!(std::fs::read(d.join("out").join(&f)).unwrap(), std::fs::read(d.join("again").join(&f)).unwrap());
    }

    let o = warp4d(&["eval", "--pred", "out/target_00", "--truth", "again/target_00", "--json", "m.json"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("PSNR") && table.contains("LPIPS"), "{table}");
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("m.json")).unwrap()).unwrap();
    assert_eq!(r["scenes"][0]["mean_psnr"], "inf");
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = warp4d(&["gen-scene", "--name", "nonesuch", "--out", "x"], d);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    std::fs::write(d.join("bad.json"), r#"{"pipeline": {"window_length": 4, "overlap": 4}}"#).unwrap();
    std::fs::write(d.join("t.json"), "[]").unwrap();
    let o = warp4d(&["run", "--scene", "s", "--targets", "t.json", "--config", "bad.json", "--out", "o"], d);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("pipeline.overlap"), "{}", stderr(&o));

    let o = Command::new(env!("CARGO_BIN_EXE_warp4d"))
        .args(["gen-scene", "--name", "apple", "--out", "x"])
        .current_dir(d)
        .env("SEE4D_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("t.json"), r#"{"yaw_deg": [5.0]}"#).unwrap();
    let o = warp4d(&["run", "--scene", "missing", "--targets", "t.json", "--out", "o"], d);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let o = warp4d(&["eval", "--pred", "missing", "--truth", "missing"], d);
    assert_eq!(o.status.code(), Some(3));
}
