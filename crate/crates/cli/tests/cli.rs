use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chebtaylor"))
        .current_dir(dir)
        .args(args)
        .args(["--log-level", "error"])
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const ABB: [&str; 8] = ["--model", "lorenz", "--orbit-hint", "ABB", "--domains", "10", "--m", "50"];

#[test]
fn orbit_manifold_validate_export() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = run(d, &[&["orbit", "--out", "o"][..], &ABB].concat());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let line = stdout(&o).lines().find(|l| l.starts_with("L = ")).unwrap().to_string();
    let l: f64 = line[4..].trim().parse().unwrap();
    assert!((l - 1.1530).abs() <= 0.003, "{l}");
    for f in ["orbit.json", "orbit.bin", "orbit.csv", "orbit_summary.txt"] {
        assert!(d.join("o").join(f).exists(), "{f}");
    }

    let m = run(d, &[&["manifold", "--orbit", "o/orbit.json", "--order", "8", "--k", "1", "--stability", "unstable", "--out", "m"][..], &ABB].concat());
    assert_eq!(m.status.code(), Some(0), "{}", stderr(&m));
    let art = "m/manifold_unstable.json";
    let v = run(d, &["validate", art, "--t0", "0.00001"]);
    assert_eq!(v.status.code(), Some(0), "{}", stdout(&v));
    assert!(stdout(&v).contains("PASS conjugacy_error_mean"));

    // An order-2 chart at a large scale cannot conjugate over a unit time.
    let bad = run(d, &[&["manifold", "--orbit", "o/orbit.json", "--order", "2", "--k", "400", "--stability", "unstable", "--out", "m2"][..], &ABB].concat());
    assert_eq!(bad.status.code(), Some(0));
    let v = run(d, &["validate", "m2/manifold_unstable.json", "--t0", "1"]);
    assert_eq!(v.status.code(), Some(4), "{}", stdout(&v));

    let e = run(d, &["export", art, "--nt", "10", "--nsigma", "5", "--out", "e"]);
    assert_eq!(e.status.code(), Some(0), "{}", stderr(&e));
    let csv = fs::read_to_string(d.join("e/manifold_unstable_grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 10 * 5);
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("e/manifold_unstable_grid.json")).unwrap()).unwrap();
    assert!(meta.is_object());

    let blob = d.join("m/manifold_unstable.bin");
    let mut bytes = fs::read(&blob).unwrap();
    bytes[64] ^= 1;
    fs::write(&blob, bytes).unwrap();
    let v = run(d, &["validate", art]);
    assert_eq!(v.status.code(), Some(2));
    assert!(stderr(&v).contains("checksum"), "{}", stderr(&v));
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = run(d, &[&["orbit", "--proportions", "0.5,0.4"][..], &ABB].concat());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("proportions"), "{}", stderr(&o));
    assert_eq!(run(d, &["orbit"]).status.code(), Some(2));
    assert_eq!(run(d, &[&["orbit", "--model", "nope"][..]].concat()).status.code(), Some(2));
    assert_eq!(run(d, &["frobnicate"]).status.code(), Some(2));
    fs::write(d.join("cfg.json"), r#"{"model": {"model": "lorenz"}, "colour": 3}"#).unwrap();
    assert_eq!(run(d, &["orbit", "--config", "cfg.json"]).status.code(), Some(2));
}

#[test]
fn connect_refuses_different_energy_levels() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mesh = ["--model", "crtbp", "--domains", "8", "--m", "30"];
    for (hint, out) in [("L1@3.17", "a"), ("L2@3.16", "b")] {
        let o = run(d, &[&["orbit", "--orbit-hint", hint, "--out", out][..], &mesh].concat());
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let cfg = r#"{"model": {"model": "crtbp", "mu": 0.0123}, "hint": {"kind": "lyapunov", "point": 1, "energy": 3.17},
        "mesh": {"d": 8}, "m": 30, "n": 3, "k": 1.0, "connection": {"kind": "bvp", "sigma_u": -1.0, "sigma_s": 1.0}}"#;
    fs::write(d.join("c.json"), cfg).unwrap();
    let c = run(d, &["connect", "--config", "c.json", "--stable", "a/orbit.json", "--unstable", "b/orbit.json", "--out", "c"]);
    assert_eq!(c.status.code(), Some(2));
    assert!(stderr(&c).contains("energy"), "{}", stderr(&c));
}
