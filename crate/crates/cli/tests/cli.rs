use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn neumat(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neumat"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn neumat")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| {
        panic!(
            "bad json ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&o.stdout),
            String::from_utf8_lossy(&o.stderr)
        )
    })
}

const TOY_JOB: &str = r#"{
  "material": {"builtin": "lambertian", "resolution": 16, "albedo": [0.6, 0.4, 0.2]},
  "model": {"brdf_arch": "2x16", "sampler_arch": "2x16", "encoder_arch": "2x16"},
  "training": {"iterations": ITERS, "batch_size": 512, "seed": 3},
  "output": "toy.nmat"
}"#;

fn train_toy(dir: &Path, iters: usize) -> Value {
    fs::write(dir.join("job.json"), TOY_JOB.replace("ITERS", &iters.to_string())).unwrap();
    let o = neumat(&["train", "--config", "job.json"], dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    stdout_json(&o)
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&neumat(&[], dir.path())), 2);
    assert_eq!(code(&neumat(&["frobnicate"], dir.path())), 2);
    assert_eq!(code(&neumat(&["render", "--scene", "x.json"], dir.path())), 2);
}

#[test]
fn missing_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&neumat(&["train", "--config", "none.json"], d)), 2);
    assert_eq!(code(&neumat(&["inspect", "--material", "none.nmat"], d)), 2);
    assert_eq!(code(&neumat(&["validate", "--material", "none.nmat"], d)), 2);
    assert_eq!(code(&neumat(&["render", "--scene", "none.json", "--out", "o.pfm"], d)), 2);
    fs::write(d.join("bad.json"), "{\"material\": {}, \"output\": \"x\", \"bogus\": 1}").unwrap();
    assert_eq!(code(&neumat(&["train", "--config", "bad.json"], d)), 2);
}

#[test]
fn zero_iteration_train_and_corrupt_archives() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let rep = train_toy(d, 0);
    assert_eq!(rep["iterations"], 0);
    let bytes = fs::read(d.join("toy.nmat")).unwrap();
    assert!(d.join("toy.nmat.opt.json").exists());

    let o = neumat(&["inspect", "--material", "toy.nmat"], d);
    assert_eq!(code(&o), 0);
    let ins = stdout_json(&o);
    assert_eq!(ins["brdf_decoder"], "20-16-16-3");

    for cut in [0, 7, bytes.len() / 2, bytes.len() - 1] {
        fs::write(d.join("cut.nmat"), &bytes[..cut]).unwrap();
        for cmd in ["inspect", "validate", "bench"] {
            let o = neumat(&[cmd, "--material", "cut.nmat"], d);
            assert_eq!(code(&o), 2, "{cmd} on {cut}-byte archive");
        }
    }
    let mut flipped = bytes.clone();
    flipped[0] ^= 0xff;
    fs::write(d.join("flip.nmat"), &flipped).unwrap();
    assert_eq!(code(&neumat(&["inspect", "--material", "flip.nmat"], d)), 2);
}

#[test]
fn toy_lambertian_trains_validates_benches_and_renders() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let rep = train_toy(d, 400);
    let loss = rep["final"]["brdf_l1log"].as_f64().unwrap();
    assert!(loss < 0.01, "final loss {loss}");
    let csv = fs::read_to_string(d.join("toy.csv")).unwrap();
    assert!(csv.starts_with("iteration,"));
    assert!(csv.lines().count() > 2);

    let o = neumat(&["validate", "--material", "toy.nmat"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert_eq!(stdout_json(&o)["passed"], true);

    let o = neumat(&["bench", "--material", "toy.nmat", "-n", "10"], d);
    assert_eq!(code(&o), 2);
    let o = neumat(&["bench", "--material", "toy.nmat", "-n", "100000"], d);
    assert_eq!(code(&o), 0);
    let b = stdout_json(&o);
    assert_eq!(b["outputs_agree"], true);
    assert_eq!(b["evaluations"], 100000);

    let scene = r#"{
      "camera": {"position": [0,0,4], "look_at": [0,0,0], "fov_deg": 40, "width": 24, "height": 16},
      "materials": {
        "toy": {"type": "neural", "path": "toy.nmat"},
        "ref": {"type": "reference", "builtin": "lambertian", "resolution": 16, "albedo": [0.6,0.4,0.2]}
      },
      "objects": [
        {"type": "sphere", "center": [-0.6,0,0], "radius": 0.5, "material": "toy"},
        {"type": "sphere", "center": [0.6,0,0], "radius": 0.5, "material": "ref"}
      ],
      "emitters": [{"type": "environment", "radiance": [1,1,1]}],
      "render": {"spp": 4}
    }"#;
    fs::write(d.join("scene.json"), scene).unwrap();
    let o = neumat(&["render", "--scene", "scene.json", "--out", "a.pfm"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let img = neumat::pfm::PfmImage::read(&d.join("a.pfm")).unwrap();
    assert_eq!((img.width, img.height), (24, 16));
    assert!(img.data.iter().all(|v| v.is_finite()));

    let o = neumat(&["render", "--scene", "scene.json", "--out", "b.pfm", "--compare", "a.pfm"], d);
    assert_eq!(code(&o), 0);
    let m = stdout_json(&o);
    assert_eq!(m["metrics"]["smape"].as_f64(), Some(0.0), "same seed renders identically");

    let o = neumat(
        &["render", "--scene", "scene.json", "--out", "c.pfm", "--spp", "2", "--seed", "9", "--compare", "a.pfm"],
        d,
    );
    assert_eq!(code(&o), 0);
    let s = stdout_json(&o)["metrics"]["smape"].as_f64().unwrap();
    assert!(s > 0.0 && s < 0.2, "smape {s}");
}

#[test]
fn trains_from_material_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let material = r#"{
      "width": 16, "height": 16,
      "textures": {
        "base": {"kind": "value_noise", "cells": 4, "min": [0.1, 0.1, 0.1], "max": [0.6, 0.4, 0.3], "seed": 3},
        "bumps": {"kind": "noise_slopes", "cells": 4, "amplitude": 0.3, "seed": 4}
      },
      "lobes": [
        {"type": "lambertian", "albedo": {"texture": "base"}},
        {"type": "coat", "specularity": 0.04, "roughness": 0.1, "normal": {"texture": "bumps"}}
      ],
      "combine": [{"op": "coat"}]
    }"#;
    fs::create_dir(d.join("mats")).unwrap();
    fs::write(d.join("mats/coated.json"), material).unwrap();
    let job = r#"{
      "material": {"path": "mats/coated.json"},
      "model": {"brdf_arch": "2x16", "sampler_arch": "2x16", "encoder_arch": "2x16"},
      "training": {"iterations": 20, "batch_size": 256, "seed": 1},
      "output": "coated.nmat"
    }"#;
    fs::write(d.join("job.json"), job).unwrap();
    let o = neumat(&["train", "--config", "job.json"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["iterations"], 20);
    assert!(d.join("coated.nmat").exists());
}
