use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fracstefan_cli::{parse_config_str, Mode};
use serde_json::Value;

fn bin(mode: &str, config: &str, out: &Path, extra: &[&str]) -> Output {
    let cfg = out.with_extension("json");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_fracstefan"))
        .arg(mode)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap()
}

fn manifest(out: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

/// Every file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, acc: &mut BTreeMap<String, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, acc);
            } else {
                acc.insert(p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    let mut acc = BTreeMap::new();
    walk(dir, dir, &mut acc);
    acc
}

#[test]
fn empty_config_gives_the_documented_defaults() {
    let c = parse_config_str("{}").unwrap();
    assert_eq!((c.grid.d, c.grid.n), (1, 512));
    assert_eq!((c.s, c.grid.half_width, c.grid.c_ext), (0.4, 4.0, 3.0));
    assert_eq!((c.dt, c.horizon), (1.0 / 256.0, 2.0));
    assert_eq!((c.mc.particles, c.mc.seed), (100_000, 42));
}

#[test]
fn unknown_and_mistyped_fields_are_located() {
    let e = parse_config_str(r#"{"grid": {"n": 64, "nodes": 3}}"#).unwrap_err();
    assert_eq!(e.path, "grid.nodes");
    let e = parse_config_str(r#"{"mc": {"N": "many"}}"#).unwrap_err();
    assert_eq!(e.path, "mc.N");
    let e = parse_config_str(r#"{"mu": {"segments": [{"lo": [-1], "hi": 1}]}}"#).unwrap_err();
    assert_eq!(e.path, "mu.segments[0].hi");
}

#[test]
fn transient_range_is_enforced_for_potential_modes() {
    let c = parse_config_str(r#"{"s": 0.6, "grid": {"n": 64}}"#).unwrap();
    for mode in [Mode::Melt, Mode::Freeze, Mode::Mc, Mode::Validate] {
        assert_eq!(c.setup(mode).err().unwrap().path, "s");
    }
    // The exit law and the survival tail need no potentials.
    assert!(c.setup(Mode::ExitLaw).is_ok());
    let c = parse_config_str(r#"{"s": 0.6, "grid": {"d": 2, "n": 16}}"#).unwrap();
    assert!(c.setup(Mode::Melt).is_ok());
}

#[test]
fn mushy_melting_data_is_rejected() {
    let c = parse_config_str(r#"{"grid": {"n": 64}, "mu": {"segments": [{"lo": [-1], "hi": [1], "value": 0.5}]}}"#)
        .unwrap();
    assert_eq!(c.setup(Mode::Melt).err().unwrap().path, "mu");
    // Freezing accepts the same data.
    assert!(c.setup(Mode::Freeze).is_ok());
}

#[test]
fn config_errors_exit_with_status_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin("melt", r#"{"s": 0.6}"#, &dir.path().join("a"), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`s`"));
    let out = bin("freeze", r#"{"grid": {"m": 1}}"#, &dir.path().join("b"), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("grid.m"));
}

#[test]
fn melt_writes_fields_barrier_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("melt");
    let res = bin("melt", r#"{"grid": {"n": 64}, "snapshots": 3}"#, &out, &[]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let m = manifest(&out);
    for key in ["config", "masses", "residuals", "extinction_time", "checks"] {
        assert!(m.get(key).is_some(), "missing {key}");
    }
    let nu = fs::read_to_string(out.join("nu.csv")).unwrap();
    assert!(nu.starts_with("x,value\n"));
    let barrier = fs::read_to_string(out.join("barrier.csv")).unwrap();
    assert!(barrier.starts_with("x,s\n"));
    assert!(barrier.contains(",inf\n"));
    let index = fs::read_to_string(out.join("eta/index.csv")).unwrap();
    assert_eq!(index.lines().count(), 4);
}

#[test]
fn planar_fields_carry_two_coordinates() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("plane");
    let res = bin("freeze", r#"{"grid": {"d": 2, "n": 16, "L": 2, "c_ext": 1}, "T": 0.25, "dt": 0.0625}"#, &out, &[]);
    assert!(res.status.code().unwrap() <= 1, "{}", String::from_utf8_lossy(&res.stderr));
    assert!(fs::read_to_string(out.join("u.csv")).unwrap().starts_with("x,y,value\n"));
    assert!(fs::read_to_string(out.join("barrier.csv")).unwrap().starts_with("x,y,s\n"));
}

#[test]
fn validate_emits_at_least_eight_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v");
    let res = bin("validate", r#"{"grid": {"n": 64}}"#, &out, &[]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stdout));
    let checks: Vec<Value> = serde_json::from_str(&fs::read_to_string(out.join("checks.json")).unwrap()).unwrap();
    assert!(checks.len() >= 8, "{} reports", checks.len());
    for c in &checks {
        for key in ["name", "metric", "tolerance", "pass", "provenance", "inputs_digest"] {
            assert!(c.get(key).is_some(), "{key} missing in {c}");
        }
    }
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mc = r#"{"grid": {"n": 64}, "mc": {"N": 4000, "trace": 3}}"#;
    let runs = [
        ("melt", r#"{"grid": {"n": 64}}"#, vec![]),
        ("mc", mc, vec!["--seed", "7", "--workers", "2"]),
        ("exit-law", r#"{"mc": {"N": 500}, "exit_law": {"dt": 0.01}}"#, vec![]),
    ];
    for (mode, cfg, extra) in runs {
        let a = dir.path().join(format!("{mode}_a"));
        let b = dir.path().join(format!("{mode}_b"));
        assert!(bin(mode, cfg, &a, &extra).status.code().unwrap() <= 1);
        assert!(bin(mode, cfg, &b, &extra).status.code().unwrap() <= 1);
        let (sa, sb) = (snapshot(&a), snapshot(&b));
        assert!(sa.len() > 1);
        assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
        for (k, v) in &sa {
            assert!(v == &sb[k], "{mode}: {k} differs");
        }
    }
}

#[test]
fn seed_flag_changes_the_sample() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"mc": {"N": 300}, "exit_law": {"dt": 0.01}}"#;
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    bin("exit-law", cfg, &a, &["--seed", "1"]);
    bin("exit-law", cfg, &b, &["--seed", "2"]);
    assert_ne!(fs::read(a.join("exit_positions.csv")).unwrap(), fs::read(b.join("exit_positions.csv")).unwrap());
    assert_eq!(manifest(&a)["config"]["mc"]["seed"], 1);
}
