//! Command-line driver: `crystal-surface <mode> --config <path> [--out <dir>]`.
//!
//! The configuration is one JSON document; unknown keys are rejected. Exit
//! codes: 0 success, 2 configuration error, 3 solver failure, 4 I/O error.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::analysis::{apriori_audit, classify_points, mms_study, CosinePair, EstimateReport};
use crate::coupled::{continuation_tau, evolve, CoupledResiduals, CoupledSolver, PicardConfig, ProblemData};
use crate::energy::ModelParams;
use crate::error::{Error, Result};
use crate::mesh::{Grid, NodeField};
use crate::solvers::{NewtonConfig, SolveReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Stationary,
    Evolve,
    Audit,
    Singular,
    Mms,
}

#[derive(Debug, Parser)]
#[command(name = "crystal-surface", about = "Finite-difference solver for the exponential crystal surface model")]
pub struct Args {
    #[arg(value_enum)]
    pub mode: Mode,
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (overrides `output` in the config; default `.`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub extents: Vec<f64>,
    /// Cells per axis; each axis has `cells + 1` nodes.
    pub cells: Vec<usize>,
}

impl GridSpec {
    pub fn build(&self) -> Result<Grid> {
        if self.extents.len() != self.cells.len() {
            return Err(Error::Config("grid.extents and grid.cells must have the same length".into()));
        }
        let nodes: Vec<usize> = self.cells.iter().map(|c| c + 1).collect();
        Grid::new(&self.extents, &nodes).map_err(|e| Error::Config(format!("grid: {e}")))
    }
}

/// Axis-aligned box carrying a constant value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Patch {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    Constant { value: f64 },
    /// Node-field CSV matching the grid, path relative to the config file.
    Csv { path: PathBuf },
    /// Piecewise constant: later patches override earlier ones.
    Patches { background: f64, patches: Vec<Patch> },
}

impl FieldSpec {
    pub fn build(&self, grid: Grid, base: &Path) -> Result<NodeField> {
        match self {
            FieldSpec::Constant { value } => {
                if !value.is_finite() {
                    return Err(Error::Config("constant field value must be finite".into()));
                }
                Ok(NodeField::constant(grid, *value))
            }
            FieldSpec::Csv { path } => {
                let full = base.join(path);
                let file = File::open(&full)?;
                NodeField::read_csv(grid, std::io::BufReader::new(file))
                    .map_err(|e| Error::Config(format!("{}: {e}", full.display())))
            }
            FieldSpec::Patches { background, patches } => {
                for (i, p) in patches.iter().enumerate() {
                    if p.lower.len() != grid.dim() || p.upper.len() != grid.dim() {
                        return Err(Error::Config(format!("patches[{i}] has the wrong dimension")));
                    }
                }
                Ok(NodeField::from_fn(grid, |x| {
                    patches
                        .iter()
                        .rev()
                        .find(|p| (0..x.len()).all(|i| x[i] >= p.lower[i] && x[i] <= p.upper[i]))
                        .map_or(*background, |p| p.value)
                }))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolveSpec {
    pub dt: f64,
    pub nsteps: usize,
    pub initial: FieldSpec,
    /// Write fields every this many steps (the last step is always written).
    #[serde(default = "one")]
    pub checkpoint_every: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    pub points: Vec<Vec<f64>>,
    pub eps: Vec<f64>,
    pub r_max: f64,
    pub levels: usize,
    /// Density to analyse; when absent the stationary problem is solved first.
    #[serde(default)]
    pub density: Option<FieldSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MmsSpec {
    pub dim: usize,
    /// Nodes per axis for each grid of the study.
    pub nodes: Vec<usize>,
    #[serde(default)]
    pub pair: CosinePair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Optional; must agree with the mode given on the command line.
    #[serde(default)]
    pub mode: Option<Mode>,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    pub params: ModelParams,
    #[serde(default)]
    pub tau_schedule: Option<Vec<f64>>,
    #[serde(default)]
    pub source: Option<FieldSpec>,
    #[serde(default)]
    pub evolve: Option<EvolveSpec>,
    #[serde(default)]
    pub probe: Option<ProbeSpec>,
    #[serde(default)]
    pub mms: Option<MmsSpec>,
    #[serde(default)]
    pub picard: PicardConfig,
    #[serde(default)]
    pub newton: NewtonConfig,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn missing(key: &str, mode: Mode) -> Error {
    Error::Config(format!("`{key}` is required in {mode:?} mode").to_lowercase())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks that the fields required by `mode` are present and in range.
    pub fn validate(&self, mode: Mode) -> Result<()> {
        if let Some(m) = self.mode {
            if m != mode {
                return Err(Error::Config(format!("config mode {m:?} differs from command-line mode {mode:?}")));
            }
        }
        self.params.validate().map_err(|e| Error::Config(format!("params: {e}")))?;
        self.picard.validate().map_err(|e| Error::Config(format!("picard: {e}")))?;
        self.newton.validate().map_err(|e| Error::Config(format!("newton: {e}")))?;
        if mode != Mode::Mms && self.grid.is_none() {
            return Err(missing("grid", mode));
        }
        match mode {
            Mode::Stationary | Mode::Audit => {
                if self.source.is_none() {
                    return Err(missing("source", mode));
                }
            }
            Mode::Evolve => {
                let ev = self.evolve.as_ref().ok_or_else(|| missing("evolve", mode))?;
                if !(ev.dt > 0.0) {
                    return Err(Error::Config("evolve.dt must be positive".into()));
                }
                if ev.checkpoint_every == 0 {
                    return Err(Error::Config("evolve.checkpoint_every must be at least 1".into()));
                }
            }
            Mode::Singular => {
                let pr = self.probe.as_ref().ok_or_else(|| missing("probe", mode))?;
                if pr.density.is_none() && self.source.is_none() {
                    return Err(Error::Config("singular mode needs probe.density or source".into()));
                }
                if pr.levels < 3 {
                    return Err(Error::Config("probe.levels must be at least 3".into()));
                }
            }
            Mode::Mms => {
                let m = self.mms.as_ref().ok_or_else(|| missing("mms", mode))?;
                if !(1..=2).contains(&m.dim) || m.nodes.len() < 2 {
                    return Err(Error::Config("mms.dim must be 1 or 2 with at least two grids".into()));
                }
            }
        }
        if let Some(s) = &self.tau_schedule {
            if s.is_empty() || s.iter().any(|t| !(*t > 0.0)) || s.windows(2).any(|w| w[1] >= w[0]) {
                return Err(Error::Config("tau_schedule must be positive and strictly decreasing".into()));
            }
        }
        Ok(())
    }
}

/// Exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidParameter(_) | Error::GridMismatch(_) => 2,
        Error::Io(_) => 4,
        _ => 3,
    }
}

#[derive(Debug, Serialize)]
struct StationaryReport<'a> {
    params: &'a ModelParams,
    picard: &'a SolveReport,
    residuals: CoupledResiduals,
    estimates: EstimateReport,
}

#[derive(Debug, Serialize)]
struct FailureReport<'a> {
    error: String,
    report: Option<&'a SolveReport>,
}

#[derive(Debug, Serialize)]
struct StageEstimates {
    tau: f64,
    picard_iterations: usize,
    estimates: EstimateReport,
}

#[derive(Debug, Serialize)]
struct AuditOutput {
    stages: Vec<StageEstimates>,
    failure: Option<String>,
}

#[derive(Debug, Serialize)]
struct ManifestEntry {
    step: usize,
    time: f64,
    u_file: Option<String>,
    rho_file: Option<String>,
    mass: f64,
    l2_norm: f64,
    surface_energy: f64,
    picard_iterations: usize,
    fixed_point_residual: f64,
}

#[derive(Debug, Serialize)]
struct Manifest {
    dt: f64,
    params: ModelParams,
    mean_factor: f64,
    energy_nonincreasing: bool,
    steps: Vec<ManifestEntry>,
    failure: Option<String>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.into()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn write_field(path: &Path, field: &NodeField) -> Result<()> {
    field.write_csv(BufWriter::new(File::create(path)?))
}

/// Runs `mode` with `config`, writing outputs into `out`. Paths inside the
/// configuration are resolved against `base`.
pub fn run(mode: Mode, config: &RunConfig, base: &Path, out: &Path) -> Result<()> {
    config.validate(mode)?;
    fs::create_dir_all(out)?;
    match mode {
        Mode::Stationary => run_stationary(config, base, out),
        Mode::Evolve => run_evolve(config, base, out),
        Mode::Audit => run_audit(config, base, out),
        Mode::Singular => run_singular(config, base, out),
        Mode::Mms => run_mms(config, out),
    }
}

fn problem(config: &RunConfig, base: &Path) -> Result<ProblemData> {
    let grid = config.grid.as_ref().expect("validated").build()?;
    let f = config.source.as_ref().expect("validated").build(grid, base)?;
    ProblemData::new(f, config.params)
}

/// Writes the failing solve's trace and passes the error on.
fn record_failure(out: &Path, name: &str, err: Error) -> Error {
    let report = FailureReport { error: err.to_string(), report: err.report() };
    if let Err(io) = write_json(&out.join(name), &report) {
        return io;
    }
    err
}

fn run_stationary(config: &RunConfig, base: &Path, out: &Path) -> Result<()> {
    let data = problem(config, base)?;
    let solver = CoupledSolver::new(data.grid());
    let (sol, report) = solver
        .solve(&data, &config.picard, &config.newton, None, None)
        .map_err(|e| record_failure(out, "report.json", e))?;
    write_field(&out.join("u.csv"), &sol.u)?;
    write_field(&out.join("rho.csv"), &sol.rho)?;
    sol.phi.write_csv(BufWriter::new(File::create(out.join("phi.csv"))?))?;
    let residuals = solver.residuals(&sol.u, &sol.rho, &data);
    let estimates = apriori_audit(&sol.u, &sol.rho, &data)?;
    write_json(
        &out.join("report.json"),
        &StationaryReport { params: &data.params, picard: &report, residuals, estimates },
    )
}

fn run_evolve(config: &RunConfig, base: &Path, out: &Path) -> Result<()> {
    let grid = config.grid.as_ref().expect("validated").build()?;
    let ev = config.evolve.as_ref().expect("validated");
    let u0 = ev.initial.build(grid, base)?;
    let traj = evolve(&u0, ev.dt, ev.nsteps, &config.params, &config.picard, &config.newton)?;
    let last = traj.steps.len() - 1;
    let mut steps = Vec::with_capacity(traj.steps.len());
    for st in &traj.steps {
        let write = st.step % ev.checkpoint_every == 0 || st.step == last;
        let (u_file, rho_file) = if write {
            let uf = format!("u_{:05}.csv", st.step);
            write_field(&out.join(&uf), &st.u)?;
            let rf = if st.step > 0 {
                let rf = format!("rho_{:05}.csv", st.step);
                write_field(&out.join(&rf), &st.rho)?;
                Some(rf)
            } else {
                None
            };
            (Some(uf), rf)
        } else {
            (None, None)
        };
        steps.push(ManifestEntry {
            step: st.step,
            time: st.time,
            u_file,
            rho_file,
            mass: st.mass,
            l2_norm: st.l2_norm,
            surface_energy: st.surface_energy,
            picard_iterations: st.report.iterations,
            fixed_point_residual: st.report.final_residual(),
        });
    }
    let failure = traj.failure.as_ref().map(|(n, e)| format!("step {n}: {e}"));
    let tau2dt = config.params.tau * config.params.tau * ev.dt;
    write_json(
        &out.join("manifest.json"),
        &Manifest {
            dt: ev.dt,
            params: config.params,
            mean_factor: 1.0 / (1.0 + tau2dt),
            energy_nonincreasing: traj.energy_nonincreasing(),
            steps,
            failure,
        },
    )?;
    match traj.failure {
        Some((_, e)) => Err(e),
        None => Ok(()),
    }
}

fn run_audit(config: &RunConfig, base: &Path, out: &Path) -> Result<()> {
    let data = problem(config, base)?;
    let schedule = config.tau_schedule.clone().unwrap_or_else(|| vec![config.params.tau]);
    let cont = continuation_tau(&data, &schedule, &config.picard, &config.newton)?;
    let stages = cont
        .stages
        .iter()
        .map(|s| StageEstimates { tau: s.tau, picard_iterations: s.report.iterations, estimates: s.estimates.clone() })
        .collect();
    let failure = cont.failure.as_ref().map(|(t, e)| format!("tau = {t:e}: {e}"));
    write_json(&out.join("estimates.json"), &AuditOutput { stages, failure })?;
    match cont.failure {
        Some((_, e)) => Err(e),
        None => Ok(()),
    }
}

fn run_singular(config: &RunConfig, base: &Path, out: &Path) -> Result<()> {
    let probe = config.probe.as_ref().expect("validated");
    let rho = match &probe.density {
        Some(spec) => spec.build(config.grid.as_ref().expect("validated").build()?, base)?,
        None => {
            let data = problem(config, base)?;
            CoupledSolver::new(data.grid())
                .solve(&data, &config.picard, &config.newton, None, None)
                .map_err(|e| record_failure(out, "report.json", e))?
                .0
                .rho
        }
    };
    let report = classify_points(&rho, &probe.points, &probe.eps, probe.r_max, probe.levels)?;
    write_json(&out.join("singularity.json"), &report)
}

fn run_mms(config: &RunConfig, out: &Path) -> Result<()> {
    let m = config.mms.as_ref().expect("validated");
    let rows = mms_study(m.dim, &m.nodes, &m.pair, &config.params, &config.picard, &config.newton)?;
    let mut text = String::from("h,nodes,error_u,error_rho,order_u,order_rho\n");
    let fmt = |o: Option<f64>| o.map_or(String::new(), |v| format!("{v:.6}"));
    for r in &rows {
        text.push_str(&format!(
            "{:.16e},{},{:.16e},{:.16e},{},{}\n",
            r.h,
            r.nodes,
            r.error_u,
            r.error_rho,
            fmt(r.order_u),
            fmt(r.order_rho)
        ));
    }
    fs::write(out.join("mms.csv"), text)?;
    Ok(())
}

/// Parses the config at `args.config` and runs; returns the process exit code.
pub fn execute(args: &Args) -> i32 {
    let text = match fs::read_to_string(&args.config) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", args.config.display());
            return 4;
        }
    };
    let result = RunConfig::from_json(&text).and_then(|config| {
        let base = args.config.parent().map(Path::to_path_buf).unwrap_or_default();
        let out = args
            .out
            .clone()
            .or_else(|| config.output.as_ref().map(|o| base.join(o)))
            .unwrap_or_else(|| PathBuf::from("."));
        run(args.mode, &config, &base, &out)
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if let Some(rep) = e.report() {
                if let Ok(json) = serde_json::to_string(rep) {
                    eprintln!("{json}");
                }
            }
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const STATIONARY: &str = r#"{
        "grid": {"extents": [1.0], "cells": [16]},
        "params": {"p": 1.5, "beta0": 1.0, "a": 1.0, "tau": 0.1},
        "source": {"kind": "constant", "value": 1.0}
    }"#;

    #[test]
    fn parses_minimal_config_with_defaults() {
        let c = RunConfig::from_json(STATIONARY).unwrap();
        assert_eq!(c.params.delta, 0.0);
        assert_eq!(c.picard, PicardConfig::default());
        assert!(c.validate(Mode::Stationary).is_ok());
        assert!(c.validate(Mode::Evolve).is_err());
        assert_eq!(c.grid.unwrap().build().unwrap().node_count(), 17);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_parameters() {
        let extra = STATIONARY.replacen("\"grid\"", "\"gird\": 1, \"grid\"", 1);
        let err = RunConfig::from_json(&extra).unwrap_err();
        assert_eq!(exit_code(&err), 2);
        assert!(err.to_string().contains("gird"));

        let bad_p = STATIONARY.replace("\"p\": 1.5", "\"p\": 0.5");
        let err = RunConfig::from_json(&bad_p).unwrap().validate(Mode::Stationary).unwrap_err();
        assert_eq!(exit_code(&err), 2);
        assert!(err.to_string().contains("p must lie in (1,2]"));

        let wrong_mode = STATIONARY.replacen('{', "{\"mode\": \"mms\",", 1);
        assert!(RunConfig::from_json(&wrong_mode).unwrap().validate(Mode::Stationary).is_err());
    }

    #[test]
    fn patches_override_in_order() {
        let g = Grid::rect(1.0, 1.0, 5, 5).unwrap();
        let spec: FieldSpec = serde_json::from_str(
            r#"{"kind": "patches", "background": 0.0, "patches": [
                {"lower": [0.0, 0.0], "upper": [0.5, 1.0], "value": 1.0},
                {"lower": [0.25, 0.0], "upper": [0.5, 0.5], "value": 2.0}]}"#,
        )
        .unwrap();
        let f = spec.build(g, Path::new(".")).unwrap();
        assert_eq!(f.values()[g.index(0, 4)], 1.0);
        assert_eq!(f.values()[g.index(1, 1)], 2.0);
        assert_eq!(f.values()[g.index(4, 0)], 0.0);

        let flat: FieldSpec = serde_json::from_str(
            r#"{"kind": "patches", "background": 0.0, "patches": [{"lower": [0.0], "upper": [1.0], "value": 1.0}]}"#,
        )
        .unwrap();
        assert!(flat.build(g, Path::new(".")).is_err());
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), 4);
        assert_eq!(exit_code(&Error::Positivity("x".into())), 3);
    }
}
