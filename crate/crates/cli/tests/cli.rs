use std::path::Path;
use std::process::{Command, Output};

use spectral_bridge::data::{load_cube, save_cube, BandSpec, HyperCube};
use spectral_bridge::synth::{broadband_sensor, gen_sensor};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spectral-bridge")).args(args).current_dir(dir).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn missing_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["pretrain"]);
    assert_eq!(code(&o), 2);
    let o = run(dir.path(), &["pretrain", "--config", "absent.cfg"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn unknown_stage_and_bad_keys_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(dir.path(), &["train"])), 2);
    std::fs::write(dir.path().join("bad.cfg"), "[model]\nembed_dim = 10\n[paths]\ndata_dir = x\n").unwrap();
    std::fs::create_dir(dir.path().join("x")).unwrap();
    let o = run(dir.path(), &["pretrain", "--config", "bad.cfg"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    std::fs::write(dir.path().join("dup.cfg"), "[model]\nsteps = 1\nsteps = 2\n").unwrap();
    assert_eq!(code(&run(dir.path(), &["pretrain", "--config", "dup.cfg"])), 2);
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir(dir.path().join("ms")).unwrap();
    std::fs::write(dir.path().join("r.cfg"), "[paths]\nms_dir = ms\nfinetuned = nope.sbck\n").unwrap();
    let o = run(dir.path(), &["reconstruct", "--config", "r.cfg"]);
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn degrade_single_cube() {
    let dir = tempfile::tempdir().unwrap();
    let bands: Vec<BandSpec> = (0..64).map(|i| BandSpec { center_nm: 420.0 + 32.0 * i as f64, fwhm_nm: 32.0 }).collect();
    let cube = HyperCube::new(ndarray::Array3::<f32>::from_elem((64, 3, 2), 0.25), bands, "a", "t").unwrap();
    save_cube(&cube, dir.path().join("in.hsc")).unwrap();
    gen_sensor(&broadband_sensor()).unwrap().save(dir.path().join("srf.csv")).unwrap();
    let o = run(dir.path(), &["degrade", "--input", "in.hsc", "--srf", "srf.csv", "--output", "o/out.hsc", "--out", "art"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out: HyperCube<f32> = load_cube(dir.path().join("o/out.hsc")).unwrap();
    assert_eq!(out.num_bands(), 12);
    assert!(out.data().iter().all(|v| (v - 0.25).abs() < 1e-6));
    let manifest = std::fs::read_to_string(dir.path().join("art/manifest.txt")).unwrap();
    assert!(manifest.contains("stage = degrade") && manifest.contains("config_hash = ") && manifest.contains("seed = 0"));
}

#[test]
fn synthgen_respects_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("s.cfg"), "[scene]\ncount = 4\nbands = 8\nheight = 4\nwidth = 4\nscenes_per_tile = 1\n").unwrap();
    for (seed, out) in [("1", "a"), ("1", "b"), ("2", "c")] {
        let o = run(dir.path(), &["synthgen", "--config", "s.cfg", "--seed", seed, "--out", out]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |d: &str| std::fs::read(dir.path().join(d).join("hs/s00002.hsc")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
    let manifest = std::fs::read_to_string(dir.path().join("c/manifest.txt")).unwrap();
    assert!(manifest.contains("seed = 2"));
    for f in ["srf.csv", "labels.csv", "truth.csv", "split.csv"] {
        assert!(dir.path().join("a").join(f).is_file(), "{f}");
    }
}
