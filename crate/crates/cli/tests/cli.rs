use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use weenie::io::{load_manifest, load_wmod, load_wvol, save_wvol, TraceLog};
use weenie::joint::MappingMatrix;
use weenie::quality::evaluate;
use weenie::Volume;

fn weenie(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weenie")).args(args).output().unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Generates phantoms in `dir/ph`; `extra` flags follow the 24x24x2 default size.
fn phantom(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("ph");
    let out_s = s(&out);
    let mut args = vec!["phantom", "--out", out_s.as_str()];
    if !extra.contains(&"--size") {
        args.extend(["--size", "24x24x2"]);
    }
    args.extend_from_slice(extra);
    let o = weenie(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn write_config(dir: &Path, json: &str) -> PathBuf {
    let p = dir.join("cfg.json");
    fs::write(&p, json).unwrap();
    p
}

#[test]
fn phantom_is_deterministic_and_honours_flags() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let pa = phantom(a.path(), &["--count", "1", "--seed", "7", "--size", "32x32x4"]);
    let pb = phantom(b.path(), &["--count", "1", "--seed", "7", "--size", "32x32x4"]);
    for f in ["source/000.wvol", "target/000.wvol", "pairs.json"] {
        assert_eq!(fs::read(pa.join(f)).unwrap(), fs::read(pb.join(f)).unwrap(), "{f}");
    }
    assert_eq!(load_wvol(&pa.join("target/000.wvol")).unwrap().dims(), (32, 32, 4));
    let all = phantom(a.path(), &["--count", "4", "--registered-fraction", "1.0"]);
    assert!(load_manifest(&all.join("pairs.json")).unwrap().iter().all(|e| e.registered));
}

#[test]
fn phantom_into_unwritable_path_fails() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("file");
    fs::write(&file, b"x").unwrap();
    let o = weenie(&["phantom", "--out", &s(&file.join("sub")), "--count", "1"]);
    assert!(!o.status.success());
    assert!(!o.stderr.is_empty());
}

#[test]
fn align_recovers_permutation_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    let ph = phantom(dir.path(), &["--count", "4", "--seed", "2"]);
    // rename targets so that sorted order is a known permutation of the subjects
    let perm = [2usize, 0, 3, 1];
    let shuffled = dir.path().join("shuffled");
    fs::create_dir(&shuffled).unwrap();
    for (slot, &subject) in perm.iter().enumerate() {
        fs::copy(ph.join(format!("target/{subject:03}.wvol")), shuffled.join(format!("{slot:03}.wvol"))).unwrap();
    }
    let out = dir.path().join("aligned.json");
    let o = weenie(&["align", "--source-dir", &s(&ph.join("source")), "--target-dir", &s(&shuffled), "--out", &s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let entries = load_manifest(&out).unwrap();
    for (p, e) in entries.iter().enumerate() {
        let slot = perm.iter().position(|&subject| subject == p).unwrap();
        assert_eq!(e.target.file_name().unwrap().to_string_lossy(), format!("{slot:03}.wvol"));
        assert!(!e.registered && e.kernel.unwrap() > 0.0);
    }
    let bad = weenie(&["align", "--source-dir", &s(&ph.join("source")), "--target-dir", &s(&shuffled), "--out", &s(&out), "--sigma", "0"]);
    assert_eq!(bad.status.code(), Some(2));
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let none = weenie(&["align", "--source-dir", &s(&empty), "--target-dir", &s(&shuffled), "--out", &s(&out)]);
    assert_ne!(none.status.code(), Some(0));
}

#[test]
fn align_single_pair() {
    let dir = tempfile::tempdir().unwrap();
    let ph = phantom(dir.path(), &["--count", "1"]);
    let out = dir.path().join("one.json");
    let o = weenie(&["align", "--source-dir", &s(&ph.join("source")), "--target-dir", &s(&ph.join("target")), "--out", &s(&out)]);
    assert!(o.status.success());
    assert_eq!(load_manifest(&out).unwrap().len(), 1);
}

#[test]
fn train_synth_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ph = phantom(d, &["--count", "3", "--seed", "4"]);
    let cfg = write_config(d, r#"{"k": 4, "d": 5, "outer_iters": 2, "inner_iters": 30, "beta": 1.0}"#);
    let (model, trace) = (d.join("m.wmod"), d.join("trace.json"));
    let o = weenie(&["train", "--pairs", &s(&ph.join("pairs.json")), "--config", &s(&cfg), "--out", &s(&model), "--trace", &s(&trace)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log: TraceLog = serde_json::from_slice(&fs::read(&trace).unwrap()).unwrap();
    assert_eq!(log.iterations.len(), 3);
    assert!(log.iterations[2].total < log.iterations[0].total);
    let m = load_wmod(&model).unwrap();
    assert_eq!((m.k(), m.d()), (4, 5));

    let input = ph.join("source/000.wvol");
    let (o1, o2) = (d.join("o1.wvol"), d.join("o2.wvol"));
    for out in [&o1, &o2] {
        let o = weenie(&["synth", "--model", &s(&model), "--input", &s(&input), "--out", &s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(&o1).unwrap(), fs::read(&o2).unwrap());
    let src = load_wvol(&input).unwrap();
    let pred = load_wvol(&o1).unwrap();
    assert_eq!(pred.dims(), (2 * src.rows(), 2 * src.cols(), src.depth()));

    let zero_in = d.join("zero.wvol");
    save_wvol(&zero_in, &Volume::zeros(12, 12, 2)).unwrap();
    let zero_out = d.join("zero_out.wvol");
    assert!(weenie(&["synth", "--model", &s(&model), "--input", &s(&zero_in), "--out", &s(&zero_out)]).status.success());
    assert!(load_wvol(&zero_out).unwrap().voxels().all(|v| v == 0.0));

    let reference = ph.join("target/000.wvol");
    let report = d.join("report.json");
    let o = weenie(&["eval", "--pred", &s(&o1), "--ref", &s(&reference), "--json", &s(&report)]);
    assert!(o.status.success());
    let json: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    let lib = evaluate(&pred, &load_wvol(&reference).unwrap(), 1.0).unwrap();
    assert_eq!(json, serde_json::to_value(&lib).unwrap());
}

#[test]
fn zero_outer_iterations_write_identity_mapping() {
    let dir = tempfile::tempdir().unwrap();
    let ph = phantom(dir.path(), &["--count", "2"]);
    let cfg = write_config(dir.path(), r#"{"k": 3, "d": 5, "outer_iters": 0}"#);
    let model = dir.path().join("m.wmod");
    let o = weenie(&["train", "--pairs", &s(&ph.join("pairs.json")), "--config", &s(&cfg), "--out", &s(&model)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(load_wmod(&model).unwrap().w, MappingMatrix::identity(3));
}

#[test]
fn train_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = weenie(&["train", "--pairs", &s(&d.join("nope.json")), "--out", &s(&d.join("m.wmod"))]);
    assert_eq!(missing.status.code(), Some(2));
    let ph = phantom(d, &["--count", "2"]);
    let cfg = write_config(d, r#"{"k": 3, "lamda": 0.1}"#);
    let bad = weenie(&["train", "--pairs", &s(&ph.join("pairs.json")), "--config", &s(&cfg), "--out", &s(&d.join("m.wmod"))]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("lamda"));
    let manifest = d.join("bad_pairs.json");
    fs::write(&manifest, r#"[{"source": "a.wvol", "registered": true, "kernel": null}]"#).unwrap();
    let o = weenie(&["train", "--pairs", &s(&manifest), "--out", &s(&d.join("m.wmod"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("target"));
}

#[test]
fn eval_known_cases() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let a = Volume::from_fn(16, 16, 2, |i, j, z| ((i * 3 + j * 5 + z) % 11) as f64 / 16.0);
    let b = a.map(|v| v + 0.125);
    let (pa, pb, pc) = (d.join("a.wvol"), d.join("b.wvol"), d.join("c.wvol"));
    save_wvol(&pa, &a).unwrap();
    save_wvol(&pb, &b).unwrap();
    save_wvol(&pc, &Volume::zeros(8, 8, 2)).unwrap();
    let report = d.join("r.json");
    assert!(weenie(&["eval", "--pred", &s(&pa), "--ref", &s(&pa), "--json", &s(&report)]).status.success());
    let json: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(json["psnr_db"], "inf");
    assert_eq!(json["ssim"], 1.0);
    assert!(weenie(&["eval", "--pred", &s(&pa), "--ref", &s(&pb), "--json", &s(&report)]).status.success());
    let json: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    // 0.125 is exact in f32, so the error is uniform: 20 log10(8)
    assert!((json["psnr_db"].as_f64().unwrap() - 20.0 * 8f64.log10()).abs() < 1e-9);
    assert_ne!(weenie(&["eval", "--pred", &s(&pa), "--ref", &s(&pc)]).status.code(), Some(0));
}
