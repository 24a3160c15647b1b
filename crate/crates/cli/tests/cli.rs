use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

const SMOKE: &str = r#"
name = "smoke"
n = [100]
seeds = [0]
t_max = 3
variants = ["AMPZ", "AMPW", "AMP"]

[profile]
family = "dense"

[activation]
family = "identity"

[tree_oracle]
n = 4
degree = 2
depth = 2
coefficients = [0.2, 1.0, -0.5]

[lv]
scale = 0.2
"#;

fn amplab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amplab")).current_dir(dir).args(args).output().unwrap()
}

fn csv_files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn smoke_run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("smoke.toml"), SMOKE).unwrap();
    let out = amplab(tmp.path(), &["full", "--config", "smoke.toml"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let root = tmp.path().join("out/smoke");
    let files = csv_files(&root);
    for f in [
        "de/n100.csv",
        "de/n100_summary.csv",
        "cells/n100_s0/sample.csv",
        "cells/n100_s0/amp_AMPZ.csv",
        "cells/n100_s0/amp_AMPW.csv",
        "cells/n100_s0/amp_AMP.csv",
        "verify/n100_gaps.csv",
        "verify/n100_s0_variants.csv",
        "tree_oracle.csv",
        "lv.csv",
    ] {
        let body = String::from_utf8(files.get(f).unwrap_or_else(|| panic!("missing {f}")).clone()).unwrap();
        assert!(body.lines().next().unwrap().contains("config_hash"), "{f}");
        assert!(body.lines().count() >= 2, "{f}");
    }
    let manifest = std::fs::read_to_string(root.join("MANIFEST.toml")).unwrap();
    assert!(manifest.contains("verify = \"ok\"") && manifest.contains("lv = \"ok\""), "{manifest}");
    let tree = String::from_utf8(files["tree_oracle.csv"].clone()).unwrap();
    let gap: f64 = tree.lines().nth(1).unwrap().split(',').nth(6).unwrap().parse().unwrap();
    assert!(gap <= 1e-10);
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("smoke.toml"), SMOKE).unwrap();
    for (out, workers) in [("a", "1"), ("b", "3")] {
        let o = amplab(tmp.path(), &["full", "--config", "smoke.toml", "--out", out, "--seeds", "0..3", "--workers", workers]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = csv_files(&tmp.path().join("a/smoke"));
    let b = csv_files(&tmp.path().join("b/smoke"));
    assert!(a.len() > 10);
    assert_eq!(a, b);
}

#[test]
fn invalid_correlation_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let text = SMOKE.replace("[profile]", "[correlation]\nkind = \"constant\"\nrho = 2.0\n\n[profile]");
    std::fs::write(tmp.path().join("bad.toml"), text).unwrap();
    let out = amplab(tmp.path(), &["de", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("correlation.rho") && err.contains("line 10"), "{err}");
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn stage_failure_keeps_partial_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let text = SMOKE.replace("[profile]", "x0 = { file = \"missing.txt\" }\n\n[profile]");
    std::fs::write(tmp.path().join("partial.toml"), text).unwrap();
    let out = amplab(tmp.path(), &["run", "--stage", "full", "--config", "partial.toml"]);
    assert_eq!(out.status.code(), Some(1));
    let manifest = std::fs::read_to_string(tmp.path().join("out/smoke/MANIFEST.toml")).unwrap();
    assert!(manifest.contains("failed_stage = \"de\""), "{manifest}");
    assert!(manifest.contains("missing.txt"));
    assert!(tmp.path().join("out/smoke/config.toml").exists());
}

#[test]
fn spiked_experiment_reports_projections() {
    let tmp = tempfile::tempdir().unwrap();
    let text = r#"
name = "spiked"
n = [400]
seeds = [1, 2]
t_max = 2

[profile]
family = "dense"

[activation]
family = "identity"

[spike]
lambda = 1.5
"#;
    std::fs::write(tmp.path().join("spike.toml"), text).unwrap();
    let out = amplab(tmp.path(), &["verify", "--config", "spike.toml"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let spike = std::fs::read_to_string(tmp.path().join("out/spiked/verify/n400_spike.csv")).unwrap();
    assert_eq!(spike.lines().count(), 5);
    for line in spike.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (mu, proj): (f64, f64) = (f[3].parse().unwrap(), f[4].parse().unwrap());
        assert!((proj - mu).abs() < 0.2 * mu.abs(), "{line}");
    }
    assert!(tmp.path().join("out/spiked/de/n400_mu.csv").exists());
}

#[test]
fn missing_section_for_stage_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let text = SMOKE.split("[tree_oracle]").next().unwrap().to_string();
    std::fs::write(tmp.path().join("c.toml"), text).unwrap();
    let out = amplab(tmp.path(), &["tree-oracle", "--config", "c.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tree_oracle"));
}
