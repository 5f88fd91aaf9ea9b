use std::process::{Command, Output};

fn envme(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_envme")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn list_shows_bundled() {
    let o = envme(&["list"]);
    assert!(o.status.success());
    let s = stdout(&o);
    for name in ["cookie-activation", "dma-inject", "spoof-never-ready"] {
        assert!(s.contains(name), "{s}");
    }
}

#[test]
fn describe_prints_source() {
    let o = envme(&["describe", "dos-brick"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("assert bricked (event)"));
    assert!(s.contains("[[playbooks]]"));
    assert_eq!(envme(&["describe", "nope"]).status.code(), Some(2));
}

#[test]
fn run_passes_and_writes_log() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("out.jsonl");
    let o = envme(&["run", "init-shadow", "--log", log.to_str().unwrap(), "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("seed 3"));
    let text = std::fs::read_to_string(&log).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!lines.is_empty());
    assert_eq!(lines[0]["seq"], 0);
    assert!(lines.iter().any(|e| e["kind"] == "shadow-served"));
}

#[test]
fn json_report() {
    let o = envme(&["run", "iommu-blocks", "--json"]);
    assert!(o.status.success());
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["passed"], true);
    assert!(r["assertions"].as_array().unwrap().iter().all(|a| a["passed"] == true));
}

#[test]
fn failing_assertion_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fail.toml");
    std::fs::write(
        &path,
        r#"
name = "fail"
description = "expects a dma fault that never happens"

[[actions]]
kind = "boot"

[[assertions]]
name = "booted"
kind = "event"
event = "boot-start"

[[assertions]]
name = "faulted"
kind = "event"
event = "dma-fault"
"#,
    )
    .unwrap();
    let o = envme(&["run", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let s = stdout(&o);
    assert!(s.contains("PASS booted"));
    assert!(s.contains("FAIL faulted"));
}

#[test]
fn bad_config_exits_two_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "name = \"x\"\ndescription = \"y\"\n[[actions]]\nkind = \"fly\"\n").unwrap();
    let o = envme(&["run", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line"), "{err}");
}

#[test]
fn build_image_writes_image_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("img.toml");
    std::fs::write(
        &spec,
        r#"
size_mib = 4
seed = 1

[[files]]
path = "/etc/hostname"
text = "desk\n"

[[files]]
path = "/bin/blob"
random = 50000
"#,
    )
    .unwrap();
    let img = dir.path().join("img.raw");
    let o = envme(&["build-image", spec.to_str().unwrap(), "-o", img.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::metadata(&img).unwrap().len(), 4 << 20);
    let manifest = envme::image::manifest_path(&img);
    let m: envme::image::Manifest = serde_json::from_str(&std::fs::read_to_string(manifest).unwrap()).unwrap();
    assert_eq!(m.file("/bin/blob").unwrap().size, 50000);
}
