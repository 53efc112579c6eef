use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flipflop"))
}

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn list_kinds_prints_all_twelve() {
    let out = bin().arg("list-kinds").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 12);
    for k in ["spectrum", "chevron", "t1ff-pump", "si29-monitor", "triangulate"] {
        assert!(text.lines().any(|l| l.starts_with(k)), "{k}");
    }
}

#[test]
fn validate_accepts_examples() {
    let out = bin().arg("validate").arg(config("rabi.toml")).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn invalid_spec_exits_with_one_and_names_fields() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "kind = \"hahn\"\n[params]\namplitude = 1.0\ntaus = [1.0]\ncolour = 3\n").unwrap();
    for sub in ["validate", "run"] {
        let mut cmd = bin();
        cmd.arg(sub).arg(&p);
        if sub == "run" {
            cmd.arg("--out").arg(dir.path().join("o"));
        }
        let out = cmd.output().unwrap();
        assert_eq!(out.status.code(), Some(1), "{sub}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert!(err.contains("seed"), "{err}");
        assert!(err.contains("params.colour"), "{err}");
    }
    assert!(!dir.path().join("o").exists());
}

#[test]
fn runtime_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("tri.toml");
    let text = std::fs::read_to_string(config("triangulate.toml"))
        .unwrap()
        .replace("geometry.toml", &config("geometry.toml").display().to_string().replace('\\', "/"))
        .replace("mass = 0.9", "mass = 0.9\nsolver = { max_iterations = 2 }");
    std::fs::write(&p, text).unwrap();
    let out = bin().arg("run").arg(&p).arg("--out").arg(dir.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn run_writes_bundle_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for (d, threads) in [(&a, "1"), (&b, "4")] {
        let out = bin().arg("run").arg(config("t1e.toml")).arg("--out").arg(d).arg("--threads").arg(threads).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let data_a = std::fs::read(a.join("data.csv")).unwrap();
    assert_eq!(data_a, std::fs::read(b.join("data.csv")).unwrap());
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["kind"], "t1e");
    assert_eq!(meta["seed"], 16);

    let c = dir.path().join("c");
    let out = bin().arg("run").arg(a.join("metadata.json")).arg("--out").arg(&c).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(data_a, std::fs::read(c.join("data.csv")).unwrap());
}
