use std::path::Path;
use std::process::{Command, Output};

use pcreg::geom::{rotation_error_deg, RigidTransform};
use pcreg::io::read_transform;

fn pcreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcreg")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn synth_into(dir: &Path, preset: &str, seed: &str) {
    let o = pcreg(&["synth", "--preset", preset, "--seed", seed, "--out", dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

fn parse_transform(json: &serde_json::Value) -> RigidTransform {
    serde_json::from_value(json.clone()).unwrap()
}

#[test]
fn serialize_single_point_gives_code_zero() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("one.xyz");
    std::fs::write(&f, "0.25 -1.5 3.0\n").unwrap();
    let o = pcreg(&["serialize", "--in", f.to_str().unwrap(), "--curve", "zorder", "--depth", "16"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "index,code,rank\n0,0,0\n");
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = pcreg(&["serialize", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    let o = pcreg(&["serialize", "--in", "x.xyz", "--curve", "peano"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(pcreg(&["--help"]).status.code(), Some(0));
}

#[test]
fn synth_writes_pair_and_ground_truth_schema() {
    let dir = tempfile::tempdir().unwrap();
    synth_into(dir.path(), "highoverlap", "7");
    for f in ["src.xyz", "tgt.xyz", "gt.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let gt: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("gt.json")).unwrap()).unwrap();
    assert_eq!(gt["rotation"].as_array().unwrap().len(), 9);
    assert_eq!(gt["translation"].as_array().unwrap().len(), 3);

    let again = tempfile::tempdir().unwrap();
    synth_into(again.path(), "highoverlap", "7");
    for f in ["src.xyz", "tgt.xyz", "gt.json"] {
        assert_eq!(
            std::fs::read(dir.path().join(f)).unwrap(),
            std::fs::read(again.path().join(f)).unwrap()
        );
    }
}

#[test]
fn oracle_register_identical_files_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    synth_into(dir.path(), "highoverlap", "3");
    let tgt = dir.path().join("tgt.xyz");
    let o = pcreg(&["register", "--src", tgt.to_str().unwrap(), "--tgt", tgt.to_str().unwrap(), "--oracle-features"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let t = parse_transform(&v);
    assert!((t.rotation - nalgebra::Matrix3::identity()).abs().max() <= 1e-6);
    assert!(t.translation.abs().max() <= 1e-6);
    assert_eq!(v["diagnostics"]["mode"], "oracle");
}

#[test]
fn oracle_register_recovers_ground_truth_and_reports_no_overlap() {
    let dir = tempfile::tempdir().unwrap();
    synth_into(dir.path(), "highoverlap", "11");
    let p = |f: &str| dir.path().join(f).display().to_string();
    let o = pcreg(&["register", "--src", &p("src.xyz"), "--tgt", &p("tgt.xyz"), "--oracle-features", "--gt", &p("gt.json")]);
    assert_eq!(o.status.code(), Some(0));
    let est = parse_transform(&serde_json::from_str(&stdout(&o)).unwrap());
    let gt = read_transform(&dir.path().join("gt.json")).unwrap();
    assert!(rotation_error_deg(&est.rotation, &gt.rotation) < 0.5);
    assert!((est.translation - gt.translation).norm() < 0.05);

    // A ground truth that carries the source far from the target.
    let far = RigidTransform::new(gt.rotation, gt.translation + nalgebra::Vector3::new(50.0, 0.0, 0.0)).unwrap();
    pcreg::io::write_transform(&dir.path().join("far.json"), &far).unwrap();
    let o = pcreg(&["register", "--src", &p("src.xyz"), "--tgt", &p("tgt.xyz"), "--oracle-features", "--gt", &p("far.json")]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_input_file_is_a_usage_error() {
    let o = pcreg(&["register", "--src", "/nonexistent/a.xyz", "--tgt", "/nonexistent/b.xyz", "--oracle-features"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn gradcheck_losses_passes() {
    let o = pcreg(&["gradcheck", "--module", "losses"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 8);
    assert!(out.lines().all(|l| l.contains("PASS")));
}

#[test]
fn bench_emits_csv() {
    let o = pcreg(&["bench", "--lengths", "64,128", "--paths", "ssm,attn"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "length,path,flops,peak_bytes,ms");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("64,ssm,"));
    assert_eq!(pcreg(&["bench", "--lengths", "128,64"]).status.code(), Some(3));
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("params.bin");
    let o = pcreg(&["train-toy", "--pairs", "3", "--steps", "6", "--seed", "2", "--out", params.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = stdout(&o);
    assert!(csv.starts_with("step,total,"));
    assert_eq!(csv.lines().count(), 7);
    assert!(params.exists());

    let pairs = dir.path().join("pairs");
    for (i, seed) in ["1", "2"].iter().enumerate() {
        let sub = pairs.join(format!("pair{i}"));
        let o = pcreg(&["synth", "--preset", "tiny", "--seed", seed, "--out", sub.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0));
    }
    let o = pcreg(&["eval", "--pairs", pairs.to_str().unwrap(), "--params", params.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["pairs"], 2);
    assert_eq!(v["per_pair"].as_array().unwrap().len(), 2);
    assert_eq!(v["per_pair"][0]["name"], "pair0");

    let o = pcreg(&["eval", "--pairs", pairs.to_str().unwrap(), "--oracle-features"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["registration_recall"], 1.0);
}
