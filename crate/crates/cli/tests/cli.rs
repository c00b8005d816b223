use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn pphom(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pphom"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(|v| v.parse::<f64>().unwrap_or(f64::NAN)).collect())
        .collect();
    (header, rows)
}

#[test]
fn check_rejects_drift_violation_with_margin() {
    let dir = tempfile::tempdir().unwrap();
    let out = pphom(&["check"], &configs().join("drift_violation.toml"), dir.path());
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("drift margin: -5.000000e0"), "{text}");
    assert!(dir.path().join("check.csv").exists());
}

#[test]
fn check_passes_shipped_admissible_configs() {
    for name in ["constant.toml", "harmonic_1d.toml", "separable_2d.toml", "oscillatory.toml"] {
        let dir = tempfile::tempdir().unwrap();
        let out = pphom(&["check", "--quiet"], &configs().join(name), dir.path());
        assert_eq!(out.status.code(), Some(0), "{name}");
        assert!(out.stdout.is_empty());
    }
}

#[test]
fn cell_on_constant_config_reproduces_coefficients() {
    let dir = tempfile::tempdir().unwrap();
    let out = pphom(&["cell"], &configs().join("constant.toml"), dir.path());
    assert_eq!(out.status.code(), Some(0));
    let (header, rows) = read_csv(&dir.path().join("cell.csv"));
    assert_eq!(header, ["t", "x1", "e_star_11", "d_star_1_11", "min_eigenvalue"]);
    assert_eq!(rows.len(), 65);
    for r in rows {
        assert!((r[2] - 1.5).abs() < 1e-12);
        assert!((r[3] - 0.3).abs() < 1e-12);
    }
}

#[test]
fn converge_error_column_decreases() {
    let dir = tempfile::tempdir().unwrap();
    let out = pphom(&["converge"], &configs().join("oscillatory.toml"), dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let (header, rows) = read_csv(&dir.path().join("convergence.csv"));
    assert_eq!(header, ["eps", "micro_n", "macro_n", "dt", "err_u", "err_v", "bound"]);
    assert_eq!(rows.iter().map(|r| r[0]).collect::<Vec<_>>(), vec![0.25, 0.125, 0.0625]);
    assert!(rows.windows(2).all(|w| w[1][4] < w[0][4]));
}

#[test]
fn converge_refuses_under_resolved_eps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("coarse.toml");
    std::fs::write(&cfg, "dimension = 1\nsystem_size = 1\neps = [0.25, 0.0625]\n[grid]\nmicro_n = 65\nmacro_n = 33\n").unwrap();
    let out = pphom(&["converge"], &cfg, &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("under-resolved"));
    assert!(!dir.path().join("out/convergence.csv").exists());
}

#[test]
fn micro_macro_and_residual_write_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("harmonic_1d.toml");
    assert_eq!(pphom(&["micro", "--quiet"], &cfg, dir.path()).status.code(), Some(0));
    assert_eq!(pphom(&["macro", "--quiet"], &cfg, dir.path()).status.code(), Some(0));
    assert_eq!(pphom(&["residual", "--quiet"], &cfg, dir.path()).status.code(), Some(0));
    for f in ["micro_eps4.csv", "micro_eps16.csv", "energy_eps8.csv", "bounds.csv", "macro.csv", "residual.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let (header, rows) = read_csv(&dir.path().join("macro.csv"));
    assert_eq!(header, ["t", "x1", "u1", "v1"]);
    assert_eq!(rows.len(), 21 * 65);
}

#[test]
fn config_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert_eq!(pphom(&["check"], &dir.path().join("missing.toml"), &out).status.code(), Some(3));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "dimension = [").unwrap();
    assert_eq!(pphom(&["check"], &bad, &out).status.code(), Some(4));
    std::fs::write(&bad, "dimension = 1\nsystem_size = 1\neps = [0.3]\n[time]\ndt = -1.0\n").unwrap();
    let res = pphom(&["check"], &bad, &out);
    assert_eq!(res.status.code(), Some(5));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("0.3") && err.contains("dt"), "{err}");
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("separable_2d.toml");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(pphom(&["cell", "--quiet"], &cfg, &a).status.code(), Some(0));
    assert_eq!(pphom(&["cell", "--quiet"], &cfg, &b).status.code(), Some(0));
    assert_eq!(std::fs::read(a.join("cell.csv")).unwrap(), std::fs::read(b.join("cell.csv")).unwrap());
}
