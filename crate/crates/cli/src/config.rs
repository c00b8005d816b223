//! Run configuration: TOML parsing and validation.
//!
//! Every problem found in a file is reported together. Missing files, TOML
//! syntax errors and semantic violations have distinct exit codes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Deserialize;

use pphom_core::coefficients::{CoefficientId, CoefficientSet, SamplingGrid, ScalarFamily, TensorField};
use pphom_core::discretization::SolveMethod;
use pphom_core::stepping::{SolverOptions, TimeConfig, TimeScheme};
use pphom_core::upscaled::CorrectorMode;

pub const EXIT_MISSING_FILE: i32 = 3;
pub const EXIT_SYNTAX: i32 = 4;
pub const EXIT_SEMANTIC: i32 = 5;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{}: cannot read configuration: {reason}", path.display())]
    Missing { path: PathBuf, reason: String },
    #[error("{}: syntax error: {message}", path.display())]
    Syntax { path: PathBuf, message: String },
    #[error("{}: {} violation(s):\n  - {}", path.display(), violations.len(), violations.join("\n  - "))]
    Semantic { path: PathBuf, violations: Vec<String> },
}

impl ConfigError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ConfigError::Missing { .. } => EXIT_MISSING_FILE,
            ConfigError::Syntax { .. } => EXIT_SYNTAX,
            ConfigError::Semantic { .. } => EXIT_SEMANTIC,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridConfig {
    pub macro_n: usize,
    pub micro_n: usize,
    pub cell_n: usize,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    /// File stem, used for default output locations.
    pub name: String,
    pub dimension: usize,
    pub system_size: usize,
    /// Sorted by decreasing value.
    pub eps: Vec<f64>,
    pub output_dir: PathBuf,
    pub grid: GridConfig,
    pub time: TimeConfig,
    pub corrector: CorrectorMode,
    pub solver: SolverOptions,
    pub sampling: SamplingGrid,
    pub uniform_ratio_max: f64,
    pub coefficients: CoefficientSet,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridSection {
    #[serde(default = "default_macro_n")]
    macro_n: usize,
    #[serde(default = "default_micro_n")]
    micro_n: usize,
    #[serde(default = "default_cell_n")]
    cell_n: usize,
}

fn default_macro_n() -> usize {
    33
}
fn default_micro_n() -> usize {
    257
}
fn default_cell_n() -> usize {
    64
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TimeSection {
    #[serde(default = "default_dt")]
    dt: f64,
    #[serde(default = "default_t_end")]
    t_end: f64,
    #[serde(default = "default_scheme")]
    scheme: TimeScheme,
    #[serde(default = "default_corrector")]
    corrector: CorrectorMode,
    #[serde(default = "one")]
    output_every: usize,
}

fn default_dt() -> f64 {
    0.05
}
fn default_t_end() -> f64 {
    1.0
}
fn default_scheme() -> TimeScheme {
    TimeScheme::ImplicitEuler
}
fn default_corrector() -> CorrectorMode {
    CorrectorMode::Stepped
}
fn one() -> usize {
    1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolverSection {
    #[serde(default = "default_linear")]
    linear: SolveMethod,
    #[serde(default = "default_tol")]
    tol: f64,
    #[serde(default = "default_picard_tol")]
    picard_tol: f64,
    #[serde(default = "default_picard_max")]
    picard_max: usize,
}

fn default_linear() -> SolveMethod {
    SolveMethod::Direct
}
fn default_tol() -> f64 {
    1e-12
}
fn default_picard_tol() -> f64 {
    1e-10
}
fn default_picard_max() -> usize {
    50
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SamplingSection {
    #[serde(default = "default_times")]
    times: usize,
    #[serde(default = "default_x_points")]
    x_points: usize,
    #[serde(default = "default_y_points")]
    y_points: usize,
}

fn default_times() -> usize {
    5
}
fn default_x_points() -> usize {
    17
}
fn default_y_points() -> usize {
    64
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VerificationSection {
    #[serde(default = "default_ratio")]
    uniform_ratio_max: f64,
}

fn default_ratio() -> f64 {
    1.5
}

/// `diag` lists the diagonal of a square coefficient; `entries` lists every
/// entry in row-major order.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorSection {
    diag: Option<Vec<ScalarFamily>>,
    entries: Option<Vec<ScalarFamily>>,
}

/// Accepted names per coefficient, first one canonical.
const COEFFICIENT_KEYS: [(&str, CoefficientId); 9] = [
    ("M", CoefficientId::M),
    ("E", CoefficientId::E),
    ("D", CoefficientId::D),
    ("H", CoefficientId::H),
    ("K", CoefficientId::K),
    ("J", CoefficientId::J),
    ("L", CoefficientId::L),
    ("G", CoefficientId::G),
    ("u_star", CoefficientId::UStar),
];

const TOP_KEYS: [&str; 11] = [
    "dimension",
    "system_size",
    "eps",
    "output_dir",
    "separable",
    "grid",
    "time",
    "solver",
    "sampling",
    "verification",
    "coefficients",
];

/// Deserializes `table[key]` (or an empty table when absent) into `T`.
fn section<T: DeserializeOwned>(table: &toml::Table, key: &str, violations: &mut Vec<String>) -> Option<T> {
    let value = table.get(key).cloned().unwrap_or_else(|| toml::Value::Table(toml::Table::new()));
    match value.try_into::<T>() {
        Ok(v) => Some(v),
        Err(e) => {
            violations.push(format!("[{key}]: {}", e.message().trim()));
            None
        }
    }
}

fn required<T: DeserializeOwned>(table: &toml::Table, key: &str, violations: &mut Vec<String>) -> Option<T> {
    match table.get(key) {
        None => {
            violations.push(format!("`{key}` is required"));
            None
        }
        Some(v) => match v.clone().try_into::<T>() {
            Ok(v) => Some(v),
            Err(e) => {
                violations.push(format!("`{key}`: {}", e.message().trim()));
                None
            }
        },
    }
}

/// Reads and validates a configuration file.
pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Missing { path: path.to_path_buf(), reason: e.to_string() })?;
    parse_config_str(&text, path)
}

/// Parses configuration text; `path` is used for messages and the run name.
pub fn parse_config_str(text: &str, path: &Path) -> Result<RunConfig, ConfigError> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| ConfigError::Syntax { path: path.to_path_buf(), message: e.message().trim().to_string() })?;
    let mut v = Vec::new();

    for key in table.keys() {
        if !TOP_KEYS.contains(&key.as_str()) {
            v.push(format!("unknown key `{key}`"));
        }
    }
    let dimension: Option<usize> = required(&table, "dimension", &mut v);
    let system_size: Option<usize> = required(&table, "system_size", &mut v);
    let eps: Option<Vec<f64>> = required(&table, "eps", &mut v);
    let output_dir: Option<PathBuf> = table.get("output_dir").and_then(|o| match o.clone().try_into() {
        Ok(p) => Some(p),
        Err(_) => {
            v.push("`output_dir` must be a string".into());
            None
        }
    });
    let separable: bool = match table.get("separable") {
        None => false,
        Some(toml::Value::Boolean(b)) => *b,
        Some(_) => {
            v.push("`separable` must be a boolean".into());
            false
        }
    };
    let grid: Option<GridSection> = section(&table, "grid", &mut v);
    let time: Option<TimeSection> = section(&table, "time", &mut v);
    let solver: Option<SolverSection> = section(&table, "solver", &mut v);
    let sampling: Option<SamplingSection> = section(&table, "sampling", &mut v);
    let verification: Option<VerificationSection> = section(&table, "verification", &mut v);
    let coefficients: Option<BTreeMap<String, TensorSection>> = section(&table, "coefficients", &mut v);

    if let Some(d) = dimension {
        if !(1..=2).contains(&d) {
            v.push(format!("`dimension` must be 1 or 2, got {d}"));
        }
    }
    if system_size == Some(0) {
        v.push("`system_size` must be at least 1".into());
    }
    if let Some(eps) = &eps {
        if eps.is_empty() {
            v.push("`eps` must list at least one value".into());
        }
        for &e in eps {
            let k = 1.0 / e;
            if !(e > 0.0) || !((k - k.round()).abs() <= 1e-9 * k.abs()) || k.round() < 2.0 {
                v.push(format!("`eps` entry {e} is not of the form 1/k with integer k >= 2"));
            }
        }
    }
    if let Some(g) = &grid {
        for (name, n, min) in [("macro_n", g.macro_n, 3), ("micro_n", g.micro_n, 3), ("cell_n", g.cell_n, 4)] {
            if n < min {
                v.push(format!("[grid] `{name}` must be at least {min}, got {n}"));
            }
        }
    }
    if let Some(t) = &time {
        if !(t.dt > 0.0) {
            v.push(format!("[time] `dt` must be positive, got {}", t.dt));
        }
        if !(t.t_end > 0.0) {
            v.push(format!("[time] `t_end` must be positive, got {}", t.t_end));
        }
        if t.dt > 0.0 && t.t_end > 0.0 && TimeConfig::new(t.dt, t.t_end).steps().is_err() {
            v.push(format!("[time] `t_end` = {} is not a multiple of `dt` = {}", t.t_end, t.dt));
        }
        if t.output_every == 0 {
            v.push("[time] `output_every` must be at least 1".into());
        }
    }
    if let Some(s) = &solver {
        if !(s.tol > 0.0) {
            v.push(format!("[solver] `tol` must be positive, got {}", s.tol));
        }
        if !(s.picard_tol > 0.0) {
            v.push(format!("[solver] `picard_tol` must be positive, got {}", s.picard_tol));
        }
        if s.picard_max == 0 {
            v.push("[solver] `picard_max` must be at least 1".into());
        }
    }
    if let Some(s) = &sampling {
        if s.times == 0 || s.x_points == 0 || s.y_points == 0 {
            v.push("[sampling] counts must be positive".into());
        }
    }
    if let Some(ver) = &verification {
        if !(ver.uniform_ratio_max >= 1.0) {
            v.push(format!("[verification] `uniform_ratio_max` must be at least 1, got {}", ver.uniform_ratio_max));
        }
    }

    let set = match (dimension, system_size) {
        (Some(d @ 1..=2), Some(n @ 1..)) => build_set(d, n, separable, coefficients.unwrap_or_default(), &mut v),
        _ => None,
    };

    if !v.is_empty() {
        return Err(ConfigError::Semantic { path: path.to_path_buf(), violations: v });
    }
    let (grid, time, solver, sampling, verification) =
        (grid.unwrap(), time.unwrap(), solver.unwrap(), sampling.unwrap(), verification.unwrap());
    let mut eps = eps.unwrap();
    eps.sort_by(|a, b| b.total_cmp(a));
    eps.dedup();
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    Ok(RunConfig {
        output_dir: output_dir.unwrap_or_else(|| PathBuf::from("out").join(&name)),
        name,
        dimension: dimension.unwrap(),
        system_size: system_size.unwrap(),
        eps,
        grid: GridConfig { macro_n: grid.macro_n, micro_n: grid.micro_n, cell_n: grid.cell_n },
        time: TimeConfig {
            dt: time.dt,
            t_end: time.t_end,
            scheme: time.scheme,
            output_every: time.output_every,
        },
        corrector: time.corrector,
        solver: SolverOptions {
            method: solver.linear,
            tol: solver.tol,
            picard_tol: solver.picard_tol,
            picard_max: solver.picard_max,
        },
        sampling: SamplingGrid::uniform(time.t_end, sampling.times, sampling.x_points, sampling.y_points),
        uniform_ratio_max: verification.uniform_ratio_max,
        coefficients: set.unwrap(),
    })
}

fn build_set(
    d: usize,
    n: usize,
    separable: bool,
    coefficients: BTreeMap<String, TensorSection>,
    v: &mut Vec<String>,
) -> Option<CoefficientSet> {
    let mut set = CoefficientSet::new(d, n).ok()?;
    set.separable = separable;
    for (key, sec) in coefficients {
        let Some(&(_, id)) = COEFFICIENT_KEYS.iter().find(|(k, _)| *k == key) else {
            v.push(format!("[coefficients.{key}]: unknown coefficient (expected one of M, E, D, H, K, J, L, G, u_star)"));
            continue;
        };
        let shape = id.shape(d, n);
        let len: usize = shape.iter().product();
        let field = match (sec.diag, sec.entries) {
            (Some(_), Some(_)) | (None, None) => {
                v.push(format!("[coefficients.{key}]: give exactly one of `diag` or `entries`"));
                continue;
            }
            (Some(diag), None) => {
                let square = shape.len() == 2 && shape[0] == shape[1];
                if !square {
                    v.push(format!("[coefficients.{key}]: `diag` needs a square coefficient, shape is {shape:?}"));
                    continue;
                }
                if diag.len() != shape[0] {
                    v.push(format!("[coefficients.{key}]: `diag` has {} entries, expected {}", diag.len(), shape[0]));
                    continue;
                }
                TensorField::diagonal(diag)
            }
            (None, Some(entries)) => {
                if entries.len() != len {
                    v.push(format!("[coefficients.{key}]: `entries` has {} values, expected {len} for shape {shape:?}", entries.len()));
                    continue;
                }
                match TensorField::from_families(shape, entries) {
                    Ok(f) => f,
                    Err(e) => {
                        v.push(format!("[coefficients.{key}]: {e}"));
                        continue;
                    }
                }
            }
        };
        if let Err(e) = set.set(id, field) {
            v.push(format!("[coefficients.{key}]: {e}"));
        }
    }
    Some(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        parse_config_str(text, Path::new("cfg/sample.toml"))
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse("dimension = 1\nsystem_size = 1\neps = [0.125, 0.25]\n").unwrap();
        assert_eq!(cfg.eps, vec![0.25, 0.125]);
        assert_eq!(cfg.grid, GridConfig { macro_n: 33, micro_n: 257, cell_n: 64 });
        assert_eq!(cfg.time.dt, 0.05);
        assert_eq!(cfg.time.t_end, 1.0);
        assert_eq!(cfg.corrector, CorrectorMode::Stepped);
        assert_eq!(cfg.solver, SolverOptions::default());
        assert_eq!(cfg.output_dir, PathBuf::from("out/sample"));
        assert_eq!(cfg.uniform_ratio_max, 1.5);
        assert_eq!(cfg.coefficients.sample_vec(CoefficientId::E, 0.0, &[0.5], &[0.5]), vec![1.0]);
    }

    #[test]
    fn all_violations_are_reported() {
        let err = parse(
            "dimension = 1\nsystem_size = 1\neps = [0.3, 0.25]\n[time]\ndt = -0.1\n[coefficients.Q]\ndiag = []\n",
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), EXIT_SEMANTIC);
        let ConfigError::Semantic { violations, .. } = err else { unreachable!() };
        assert!(violations.iter().any(|s| s.contains("eps") && s.contains("0.3")), "{violations:?}");
        assert!(violations.iter().any(|s| s.contains("dt")), "{violations:?}");
        assert!(violations.iter().any(|s| s.contains("coefficients.Q")), "{violations:?}");
        assert!(!violations.iter().any(|s| s.contains("0.25")));
    }

    #[test]
    fn syntax_and_missing_file_codes() {
        assert_eq!(parse("dimension = = 1").unwrap_err().exit_code(), EXIT_SYNTAX);
        assert_eq!(parse_config(Path::new("/nonexistent/x.toml")).unwrap_err().exit_code(), EXIT_MISSING_FILE);
    }

    #[test]
    fn families_and_shapes() {
        let cfg = parse(
            r#"
dimension = 2
system_size = 1
eps = [0.25]
[coefficients.E]
diag = [{ family = "periodic", mean = 2.0, amp = 1.0, k = [1, 0] }, { family = "constant", value = 3.0 }]
[coefficients.D]
entries = [{ family = "constant", value = 0.1 }, { family = "smooth", base = 0.2 }]
"#,
        )
        .unwrap();
        let e = cfg.coefficients.sample_vec(CoefficientId::E, 0.0, &[0.5, 0.5], &[0.25, 0.0]);
        assert_eq!(e, vec![3.0, 0.0, 0.0, 3.0]);
        let bad = parse("dimension = 1\nsystem_size = 1\neps = [0.5]\n[coefficients.D]\ndiag = [{ family = \"constant\", value = 1.0 }]\n");
        assert!(matches!(bad, Err(ConfigError::Semantic { .. })));
    }

    #[test]
    fn missing_required_keys_are_listed() {
        let ConfigError::Semantic { violations, .. } = parse("output_dir = 3\n").unwrap_err() else { panic!() };
        for key in ["dimension", "system_size", "eps", "output_dir"] {
            assert!(violations.iter().any(|s| s.contains(key)), "{key}: {violations:?}");
        }
    }
}
