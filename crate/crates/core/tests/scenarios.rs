use envme::scenario::{self, run_config, ScenarioConfig, BUNDLED};
use std::path::Path;

#[test]
fn bundled_scenarios_pass() {
    for (name, _) in BUNDLED {
        let out = scenario::run_named(name, None).unwrap_or_else(|e| panic!("{name}: {e}"));
        for a in &out.report.assertions {
            assert!(a.passed, "{name}/{}: {}", a.name, a.message);
        }
        assert!(out.report.passed);
        assert_eq!(out.report.events, out.log.events().len());
    }
}

#[test]
fn same_seed_same_log() {
    for name in ["init-shadow", "dma-inject", "mining-ssh"] {
        let a = scenario::run_named(name, Some(11)).unwrap().log.to_jsonl();
        let b = scenario::run_named(name, Some(11)).unwrap().log.to_jsonl();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn seed_override_is_reported() {
    let out = scenario::run_named("cookie-activation", Some(99)).unwrap();
    assert_eq!(out.report.seed, 99);
    let out = scenario::run_named("cookie-activation", None).unwrap();
    assert_eq!(out.report.seed, 1);
}

#[test]
fn failing_assertion_names_violating_event() {
    let src = scenario::bundled_source("dos-brick").unwrap().replace(
        "name = \"one-good-boot\"\nkind = \"event\"\nevent = \"host-exec\"\ncount = 1",
        "name = \"one-good-boot\"\nkind = \"no-event\"\nevent = \"host-exec\"",
    );
    let cfg = ScenarioConfig::parse(&src).unwrap();
    let out = run_config(&cfg, Path::new("."), None).unwrap();
    assert!(!out.report.passed);
    let bad: Vec<_> = out.report.assertions.iter().filter(|a| !a.passed).collect();
    assert_eq!(bad.len(), 1);
    assert_eq!(bad[0].name, "one-good-boot");
    let ev = bad[0].violating_event.as_ref().expect("violating event");
    assert_eq!(ev.kind, "host-exec");
    assert_eq!(Some(ev.seq), out.log.first("host-exec").map(|e| e.seq));
}

#[test]
fn duplicate_assertion_names_rejected() {
    let src = r#"
name = "dup"
description = "x"
[[assertions]]
name = "a"
kind = "event"
event = "boot-start"
[[assertions]]
name = "a"
kind = "no-event"
event = "dos"
"#;
    assert!(ScenarioConfig::parse(src).is_err());
}

#[test]
fn unknown_keys_rejected() {
    let src = scenario::bundled_source("dos-brick").unwrap().replace("seed = 8\n\n[image]", "seed = 8\nsede = 1\n\n[image]");
    assert!(ScenarioConfig::parse(&src).is_err());
}

#[test]
fn missing_fixture_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.toml");
    std::fs::write(
        &path,
        r#"
name = "fixture"
description = "x"
[blobs.b]
file = "nope.bin"
[[assertions]]
name = "a"
kind = "event"
event = "boot-start"
"#,
    )
    .unwrap();
    assert!(scenario::run_named(path.to_str().unwrap(), None).is_err());
}

#[test]
fn log_lines_parse_back() {
    let out = scenario::run_named("shutdown-window", None).unwrap();
    let text = out.log.to_jsonl();
    let mut prev = None;
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let seq = v["seq"].as_u64().unwrap();
        assert!(prev.is_none_or(|p| seq > p));
        prev = Some(seq);
        assert!(v["actor"].is_string() && v["kind"].is_string());
    }
}
