//! Command orchestration and artifact emission.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use pphom_core::cell::{cell_sweep, min_symmetric_eigenvalue, CellTable};
use pphom_core::coefficients::{validate_assumptions, AssumptionReport, CoefficientId};
use pphom_core::discretization::{CellGrid, Field, Grid, MacroGrid};
use pphom_core::micro::{q_residual, run_micro, MicroTrajectory};
use pphom_core::upscaled::{run_macro, step_times};
use pphom_core::verification::{
    derive_constants, energy_certificate, micro_macro_convergence, time_l2, uniform_bound_check, ConstantsSource,
    ConvergenceSetup,
};

use crate::config::RunConfig;
use crate::table::{write_csv, Table, Value, WriteError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CERTIFICATE: i32 = 1;
pub const EXIT_SOLVER: i32 = 2;

/// Errors below this mean micro and macro solutions coincide.
const COINCIDENT: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    /// Validate structural assumptions; runs no solver.
    Check,
    /// Effective tensors at every macro node.
    Cell,
    /// Fine-scale trajectories, energy certificates and the uniform bound.
    Micro,
    /// Upscaled trajectory.
    Macro,
    /// Micro/macro error table over eps.
    Converge,
    /// Residual of the reconstructed single-equation form.
    Residual,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub code: i32,
    pub summary: String,
    pub files: Vec<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
enum RunError {
    #[error(transparent)]
    Solver(#[from] pphom_core::Error),
    #[error(transparent)]
    Write(#[from] WriteError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

struct Run<'a> {
    cfg: &'a RunConfig,
    out: &'a Path,
    files: Vec<PathBuf>,
    summary: String,
    code: i32,
}

impl Run<'_> {
    fn emit(&mut self, table: &Table, name: &str) -> Result<(), RunError> {
        let path = self.out.join(name);
        write_csv(table, &path)?;
        self.files.push(path);
        Ok(())
    }

    fn line(&mut self, text: impl AsRef<str>) {
        let _ = writeln!(self.summary, "{}", text.as_ref());
    }

    fn fail_certificate(&mut self) {
        self.code = self.code.max(EXIT_CERTIFICATE);
    }
}

/// Runs `cmd` and writes its CSV artifacts into `out`.
pub fn run_command(cmd: Command, cfg: &RunConfig, out: &Path) -> Outcome {
    let mut run = Run { cfg, out, files: Vec::new(), summary: String::new(), code: EXIT_OK };
    let result = std::fs::create_dir_all(out)
        .map_err(|source| RunError::Io { path: out.to_path_buf(), source })
        .and_then(|_| match cmd {
            Command::Check => check(&mut run),
            Command::Cell => cell(&mut run),
            Command::Micro => micro(&mut run),
            Command::Macro => macro_run(&mut run),
            Command::Converge => converge(&mut run),
            Command::Residual => residual(&mut run),
        });
    if let Err(e) = result {
        run.line(format!("error: {e}"));
        run.code = EXIT_SOLVER;
    }
    Outcome { code: run.code, summary: run.summary, files: run.files }
}

fn eps_tag(eps: f64) -> String {
    format!("eps{}", (1.0 / eps).round() as u64)
}

fn coord_header(d: usize) -> Vec<String> {
    (1..=d).map(|i| format!("x{i}")).collect()
}

fn coords<G: Grid>(grid: &G, k: usize) -> Vec<Value> {
    grid.point(k)[..grid.dim()].iter().map(|&v| v.into()).collect()
}

fn assumptions(run: &Run) -> AssumptionReport {
    validate_assumptions(&run.cfg.coefficients, &run.cfg.sampling)
}

fn check(run: &mut Run) -> Result<(), RunError> {
    let rep = assumptions(run);
    let mut t = Table::new(["structure_ok", "drift_margin", "g_min_det", "samples", "passes"]);
    t.push(vec![rep.structure_ok.into(), rep.drift_margin.into(), rep.g_min_det.into(), rep.samples_used.into(), rep.passes().into()]);
    run.emit(&t, "check.csv")?;
    run.line(format!("assumptions: {}", if rep.passes() { "PASS" } else { "FAIL" }));
    run.line(format!("drift margin: {:.6e}", rep.drift_margin));
    run.line(format!("min |det G|: {:.6e}", rep.g_min_det));
    for f in &rep.failures {
        run.line(format!("  - {f}"));
    }
    if rep.passes() {
        if let Ok(c) = derive_constants(&run.cfg.coefficients, &run.cfg.sampling) {
            run.line(format!("energy splitting factor q: {:.6e}", c.q));
        }
    } else {
        run.fail_certificate();
    }
    Ok(())
}

fn sweep(run: &Run, grid: &MacroGrid) -> Result<CellTable, RunError> {
    let cfg = run.cfg;
    let cell = CellGrid::new(cfg.dimension, cfg.grid.cell_n)?;
    Ok(cell_sweep(&cfg.coefficients, grid, &step_times(&cfg.time)?, &cell, &cfg.solver)?)
}

fn cell(run: &mut Run) -> Result<(), RunError> {
    let (d, n) = (run.cfg.dimension, run.cfg.system_size);
    let grid = MacroGrid::new(d, run.cfg.grid.macro_n)?;
    let table = sweep(run, &grid)?;
    let mut header = vec!["t".to_string()];
    header.extend(coord_header(d));
    for i in 1..=d {
        for j in 1..=d {
            header.push(format!("e_star_{i}{j}"));
        }
    }
    for i in 1..=d {
        for a in 1..=n {
            for b in 1..=n {
                header.push(format!("d_star_{i}_{a}{b}"));
            }
        }
    }
    header.push("min_eigenvalue".into());
    let mut t = Table::new(header);
    let mut lam_min = f64::INFINITY;
    for (ti, &time) in table.times.iter().enumerate() {
        for k in 0..grid.num_nodes() {
            let s = table.node(ti, k);
            let lam = min_symmetric_eigenvalue(&s.e_star, d);
            lam_min = lam_min.min(lam);
            let mut row = vec![time.into()];
            row.extend(coords(&grid, k));
            row.extend(s.e_star.iter().map(|&v| Value::from(v)));
            row.extend(s.d_star.iter().map(|&v| Value::from(v)));
            row.push(lam.into());
            t.push(row);
        }
    }
    run.emit(&t, "cell.csv")?;
    run.line(format!(
        "cell problems: {} node(s) x {} time(s), separable shortcut: {}",
        grid.num_nodes(),
        table.times.len(),
        table.separable
    ));
    run.line(format!("min eigenvalue of effective diffusion: {lam_min:.6e}"));
    if !(lam_min > 0.0) {
        run.fail_certificate();
    }
    Ok(())
}

fn trajectory_table(d: usize, n: usize, grid: &MacroGrid, states: impl Iterator<Item = (f64, Field, Field)>) -> Table {
    let mut header = vec!["t".to_string()];
    header.extend(coord_header(d));
    header.extend((1..=n).map(|a| format!("u{a}")));
    header.extend((1..=n).map(|a| format!("v{a}")));
    let mut t = Table::new(header);
    for (time, u, v) in states {
        for k in 0..grid.num_nodes() {
            let mut row = vec![time.into()];
            row.extend(coords(grid, k));
            row.extend(u.node(k).iter().map(|&x| Value::from(x)));
            row.extend(v.node(k).iter().map(|&x| Value::from(x)));
            t.push(row);
        }
    }
    t
}

fn micro_runs(run: &Run) -> Result<Vec<MicroTrajectory>, RunError> {
    let cfg = run.cfg;
    let grid = MacroGrid::new(cfg.dimension, cfg.grid.micro_n)?;
    let runs: Vec<_> =
        cfg.eps.par_iter().map(|&e| run_micro(&cfg.coefficients, e, &grid, &cfg.time, &cfg.solver)).collect();
    Ok(runs.into_iter().collect::<Result<_, _>>()?)
}

fn micro(run: &mut Run) -> Result<(), RunError> {
    let cfg = run.cfg;
    let (d, n) = (cfg.dimension, cfg.system_size);
    let runs = micro_runs(run)?;
    let admissible = assumptions(run).passes();
    if !admissible {
        run.line("assumptions fail; energy certificate skipped");
        run.fail_certificate();
    }
    for traj in &runs {
        let tag = eps_tag(traj.eps);
        let t = trajectory_table(d, n, &traj.grid, traj.states.iter().map(|s| (s.t, s.u.clone(), s.v.clone())));
        run.emit(&t, &format!("micro_{tag}.csv"))?;
        if admissible {
            let rep = energy_certificate(&cfg.coefficients, traj, ConstantsSource::Derived(cfg.sampling.clone()));
            let mut et = Table::new(["t", "left", "right", "pass"]);
            for i in 0..rep.times.len() {
                et.push(vec![rep.times[i].into(), rep.left[i].into(), rep.right[i].into(), rep.pass[i].into()]);
            }
            run.emit(&et, &format!("energy_{tag}.csv"))?;
            run.line(format!(
                "eps = {}: energy certificate {} (min margin {:.6e})",
                traj.eps,
                if rep.passes() { "PASS" } else { "FAIL" },
                rep.min_margin()
            ));
            if !rep.passes() {
                run.fail_certificate();
            }
        }
    }
    let bounds = uniform_bound_check(&runs);
    let mut bt = Table::new(["eps", "u_h1", "v_linf_h1", "composite"]);
    for r in &bounds.rows {
        bt.push(vec![r.eps.into(), r.u_h1.into(), r.v_linf_h1.into(), r.composite.into()]);
    }
    run.emit(&bt, "bounds.csv")?;
    run.line(format!("uniform bound ratio: {:.6} (limit {})", bounds.ratio, cfg.uniform_ratio_max));
    if bounds.ratio > cfg.uniform_ratio_max {
        run.fail_certificate();
    }
    Ok(())
}

fn macro_run(run: &mut Run) -> Result<(), RunError> {
    let cfg = run.cfg;
    let grid = MacroGrid::new(cfg.dimension, cfg.grid.macro_n)?;
    let table = sweep(run, &grid)?;
    let traj = run_macro(&cfg.coefficients, &table, &grid, &cfg.time, &cfg.solver, cfg.corrector)?;
    let t = trajectory_table(
        cfg.dimension,
        cfg.system_size,
        &grid,
        traj.states.iter().map(|s| (s.t, s.u.clone(), s.v.clone())),
    );
    run.emit(&t, "macro.csv")?;
    let memory = !cfg.coefficients.y_dependent(CoefficientId::J);
    run.line(format!(
        "macro run: {} step(s), corrector {:?}, memory term {}",
        traj.states.len() - 1,
        cfg.corrector,
        if memory { "absent" } else { "active" }
    ));
    Ok(())
}

fn converge(run: &mut Run) -> Result<(), RunError> {
    let cfg = run.cfg;
    let setup = ConvergenceSetup {
        eps: cfg.eps.clone(),
        micro: MacroGrid::new(cfg.dimension, cfg.grid.micro_n)?,
        macro_grid: MacroGrid::new(cfg.dimension, cfg.grid.macro_n)?,
        cell: CellGrid::new(cfg.dimension, cfg.grid.cell_n)?,
        time: cfg.time.clone(),
        opts: cfg.solver.clone(),
        mode: cfg.corrector,
    };
    let table = micro_macro_convergence(&cfg.coefficients, &setup)?;
    let mut t = Table::new(["eps", "micro_n", "macro_n", "dt", "err_u", "err_v", "bound"]);
    for r in &table.rows {
        t.push(vec![
            r.eps.into(),
            r.micro_n.into(),
            r.macro_n.into(),
            r.dt.into(),
            r.err_u.into(),
            r.err_v.into(),
            r.bound.into(),
        ]);
    }
    run.emit(&t, "convergence.csv")?;
    run.line(format!("observed rate in eps: u {:.4}, v {:.4}", table.rate_u, table.rate_v));
    if table.rows.iter().all(|r| r.err_u <= COINCIDENT) {
        run.line("micro and macro coincide (no cell dependence)");
    } else if !table.strictly_decreasing() {
        run.line("error is not strictly decreasing in eps");
        run.fail_certificate();
    }
    Ok(())
}

fn residual(run: &mut Run) -> Result<(), RunError> {
    let cfg = run.cfg;
    let runs = micro_runs(run)?;
    let mut t = Table::new(["eps", "t", "residual"]);
    for traj in &runs {
        let r = q_residual(&cfg.coefficients, traj);
        for &(time, value) in &r {
            t.push(vec![traj.eps.into(), time.into(), value.into()]);
        }
        run.line(format!("eps = {}: residual L2(0,T) = {:.6e}", traj.eps, time_l2(&r)));
    }
    run.emit(&t, "residual.csv")?;
    Ok(())
}
