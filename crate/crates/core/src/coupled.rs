//! The coupled regularized system
//!
//! ```text
//! -Lap rho + tau ln rho + a u = f
//! -div(F_tau(|grad u|^2) grad u) - delta Lap u + tau u = ln rho (+ s)
//! ```
//!
//! solved by damped fixed-point iteration of the map `B(v) = u`, where `rho`
//! solves the density equation with source `f - a v` and `u` the height
//! equation with source `ln rho`. Integrating both equations gives the mean
//! identity `(a + tau^2) int u = int f (+ tau int s)`; iterates and their images
//! under `B` are shifted onto it, which removes the constant mode from the
//! iteration (its linearized amplification is `-a/tau^2`).

use serde::{Deserialize, Serialize};

use crate::analysis::{apriori_audit, EstimateReport};
use crate::energy::{energy_of_squared_slope, limit_flux, subgradient_select, ModelParams};
use crate::error::{Error, Result, Stage};
use crate::mesh::{integrate, norm_lp, EdgeField, Grid, NodeField};
use crate::solvers::{default_delta_schedule, rho_residual, solve_rho, HeightSolver, NewtonConfig, SolveReport};

/// Source term and parameters of a stationary problem.
#[derive(Debug, Clone)]
pub struct ProblemData {
    pub f: NodeField,
    pub params: ModelParams,
    /// Extra source added to the height equation; `None` for the physical system.
    /// Used by manufactured-solution studies.
    pub u_source: Option<NodeField>,
}

impl ProblemData {
    pub fn new(f: NodeField, params: ModelParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { f, params, u_source: None })
    }

    pub fn with_u_source(mut self, s: NodeField) -> Self {
        self.u_source = Some(s);
        self
    }

    pub fn grid(&self) -> &Grid {
        self.f.grid()
    }

    /// `int u` prescribed by integrating both equations.
    pub fn mean_identity_target(&self) -> f64 {
        let p = &self.params;
        let extra = self.u_source.as_ref().map_or(0.0, |s| p.tau * integrate(s));
        (integrate(&self.f) + extra) / (p.a + p.tau * p.tau)
    }
}

/// Discrete weak solution `(u, rho, phi)`; `phi` holds, on each edge, the
/// component along the edge of the selected subgradient of `|grad u|`.
#[derive(Debug, Clone)]
pub struct WeakSolutionTriple {
    pub u: NodeField,
    pub rho: NodeField,
    pub phi: EdgeField,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PicardConfig {
    /// Initial relaxation `omega` in `u <- (1 - omega) u + omega B(u)`.
    pub omega: f64,
    /// Growth factor of `omega` after a decrease of the fixed-point change.
    pub omega_growth: f64,
    /// Target for `|B(u) - u|_2 / max(1, |B(u)|_2)`.
    pub tol_fixed_point: f64,
    pub max_outer: usize,
    /// Shift iterates and their images onto the mean identity.
    pub mean_projection: bool,
    /// Re-solve with this viscosity once converged, when smaller than `params.delta`.
    pub polish_delta: Option<f64>,
    /// Barrier schedule for density solves without a positive warm start.
    pub delta_schedule: Vec<f64>,
}

impl Default for PicardConfig {
    fn default() -> Self {
        Self {
            omega: 0.5,
            omega_growth: 1.2,
            tol_fixed_point: 1e-9,
            max_outer: 200,
            mean_projection: true,
            polish_delta: Some(1e-10),
            delta_schedule: default_delta_schedule(),
        }
    }
}

impl PicardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.omega <= 1.0) {
            return Err(Error::InvalidParameter(format!("omega must lie in (0,1], got {}", self.omega)));
        }
        if !(self.omega_growth >= 1.0) {
            return Err(Error::InvalidParameter("omega_growth must be at least 1".into()));
        }
        if !(self.tol_fixed_point > 0.0) || self.max_outer == 0 {
            return Err(Error::InvalidParameter("tol_fixed_point must be positive and max_outer at least 1".into()));
        }
        Ok(())
    }
}

/// Strong-form residuals of a candidate solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoupledResiduals {
    /// `|-Lap rho + tau ln rho + a u - f|_2 / max(1, |f|_2)`.
    pub rho_equation: f64,
    /// `|A(u) - ln rho - s|_2 / max(1, |ln rho + s|_2)`.
    pub u_equation: f64,
    /// `|(a + tau^2) int u - int f (- tau int s)|`.
    pub mean_identity: f64,
}

/// Reusable solver for one grid.
pub struct CoupledSolver {
    height: HeightSolver,
}

impl CoupledSolver {
    pub fn new(grid: &Grid) -> Self {
        Self { height: HeightSolver::new(grid) }
    }

    pub fn height(&self) -> &HeightSolver {
        &self.height
    }

    /// One application of `B`: returns `(B(v), rho)`.
    pub fn picard_map(
        &self,
        v: &NodeField,
        data: &ProblemData,
        picard: &PicardConfig,
        newton: &NewtonConfig,
        warm: Option<(&NodeField, &NodeField)>,
    ) -> Result<(NodeField, NodeField)> {
        let p = &data.params;
        if !(p.tau > 0.0) {
            return Err(Error::InvalidParameter("coupled solves need tau > 0".into()));
        }
        let g = data.f.zip_map(v, |f, v| f - p.a * v);
        let (rho, _) = solve_rho(&g, p.tau, newton, &picard.delta_schedule, warm.map(|w| w.1))
            .map_err(|e| e.with_stage(Stage::Rho))?;
        let mut rhs = rho.map(f64::ln);
        if let Some(s) = &data.u_source {
            rhs = rhs.zip_map(s, |a, b| a + b);
        }
        let (u, _) = self
            .height
            .solve(&rhs, p, newton, warm.map(|w| w.0))
            .map_err(|e| e.with_stage(Stage::U))?;
        Ok((u, rho))
    }

    fn project_mean(&self, u: &mut NodeField, data: &ProblemData) {
        let g = *u.grid();
        let shift = (data.mean_identity_target() - integrate(u)) / g.volume();
        u.values_mut().iter_mut().for_each(|x| *x += shift);
    }

    fn iterate(
        &self,
        data: &ProblemData,
        picard: &PicardConfig,
        newton: &NewtonConfig,
        start: NodeField,
        mut warm_rho: Option<NodeField>,
        report: &mut SolveReport,
    ) -> Result<(NodeField, NodeField)> {
        let inner = newton.with_tol(newton.tol_residual.min(1e-3 * picard.tol_fixed_point));
        let mut u = start;
        let mut warm_u: Option<NodeField> = None;
        let mut omega = picard.omega;
        let mut prev_change = f64::INFINITY;
        for _ in 0..picard.max_outer {
            if picard.mean_projection {
                self.project_mean(&mut u, data);
            }
            let warm = match (&warm_u, &warm_rho) {
                (Some(wu), Some(wr)) => Some((wu, wr)),
                (None, Some(wr)) => Some((&u, wr)),
                _ => None,
            };
            let (mut w, rho) = self.picard_map(&u, data, picard, &inner, warm)?;
            if picard.mean_projection {
                // the inner solve leaves a constant-mode error of order
                // residual / tau; fixed points satisfy the identity exactly
                self.project_mean(&mut w, data);
            }
            report.iterations += 1;
            let change = norm_lp(&w.zip_map(&u, |a, b| a - b), 2.0);
            let rel = change / norm_lp(&w, 2.0).max(1.0);
            report.residual_history.push(rel);
            if rel <= picard.tol_fixed_point {
                report.converged = true;
                return Ok((w, rho));
            }
            omega = if change < prev_change {
                (omega * picard.omega_growth).min(1.0)
            } else {
                0.5 * omega
            };
            prev_change = change;
            u = u.zip_map(&w, |a, b| (1.0 - omega) * a + omega * b);
            warm_u = Some(w);
            warm_rho = Some(rho);
        }
        Err(Error::NonConvergence { stage: Stage::Picard, report: Box::new(report.clone()) })
    }

    /// Solves the coupled system from `initial` (default: the constant satisfying
    /// the mean identity).
    pub fn solve(
        &self,
        data: &ProblemData,
        picard: &PicardConfig,
        newton: &NewtonConfig,
        initial: Option<&NodeField>,
        initial_rho: Option<&NodeField>,
    ) -> Result<(WeakSolutionTriple, SolveReport)> {
        picard.validate()?;
        data.params.validate()?;
        if !(data.params.tau > 0.0) {
            return Err(Error::InvalidParameter("coupled solves need tau > 0".into()));
        }
        let grid = *data.grid();
        let start = match initial {
            Some(u) => u.clone(),
            None => NodeField::constant(grid, data.mean_identity_target() / grid.volume()),
        };
        let warm_rho = initial_rho.filter(|r| r.min() > 0.0).cloned();
        let mut report = SolveReport::default();
        let (mut u, mut rho) = self.iterate(data, picard, newton, start, warm_rho, &mut report)?;
        if let Some(pd) = picard.polish_delta {
            if data.params.delta > pd {
                let mut polished = data.clone();
                polished.params.delta = pd;
                (u, rho) = self.iterate(&polished, picard, newton, u, Some(rho), &mut report)?;
            }
        }
        let phi = self.height.stencil().map_longitudinal(&u, subgradient_select);
        Ok((WeakSolutionTriple { u, rho, phi }, report))
    }

    /// Edgewise limit flux `|grad u|^(p-2) grad u + beta0 phi` (component along each edge).
    pub fn limit_flux(&self, u: &NodeField, params: &ModelParams) -> EdgeField {
        self.height.stencil().map_longitudinal(u, |z| limit_flux(z, params))
    }

    /// Discrete surface energy `sum_e E_tau(grad u)` with the solver's quadrature.
    pub fn surface_energy(&self, u: &NodeField, params: &ModelParams) -> f64 {
        let st = self.height.stencil();
        let d = st.grid().dim();
        let s = st.slopes(u.values());
        st.edges()
            .iter()
            .enumerate()
            .map(|(n, es)| {
                let sq: f64 = s[n * d..(n + 1) * d].iter().map(|v| v * v).sum();
                es.weight * energy_of_squared_slope(sq, params) / d as f64
            })
            .sum()
    }

    pub fn residuals(&self, u: &NodeField, rho: &NodeField, data: &ProblemData) -> CoupledResiduals {
        let p = &data.params;
        let g = data.f.zip_map(u, |f, u| f - p.a * u);
        let r1 = rho_residual(rho, &g, p.tau);
        let mut src = rho.map(f64::ln);
        if let Some(s) = &data.u_source {
            src = src.zip_map(s, |a, b| a + b);
        }
        let r2 = self.height.apply(u, p).zip_map(&src, |a, b| a - b);
        CoupledResiduals {
            rho_equation: norm_lp(&r1, 2.0) / norm_lp(&data.f, 2.0).max(1.0),
            u_equation: norm_lp(&r2, 2.0) / norm_lp(&src, 2.0).max(1.0),
            mean_identity: ((p.a + p.tau * p.tau) * integrate(u)
                - integrate(&data.f)
                - data.u_source.as_ref().map_or(0.0, |s| p.tau * integrate(s)))
            .abs(),
        }
    }
}

/// `B(v)` and the intermediate density.
pub fn picard_map(
    v: &NodeField,
    data: &ProblemData,
    picard: &PicardConfig,
    newton: &NewtonConfig,
) -> Result<(NodeField, NodeField)> {
    CoupledSolver::new(data.grid()).picard_map(v, data, picard, newton, None)
}

/// Solves the coupled system by damped fixed-point iteration.
pub fn solve_coupled(
    data: &ProblemData,
    picard: &PicardConfig,
    newton: &NewtonConfig,
) -> Result<(WeakSolutionTriple, SolveReport)> {
    CoupledSolver::new(data.grid()).solve(data, picard, newton, None, None)
}

/// One stage of a `tau` continuation.
#[derive(Debug, Clone)]
pub struct TauStage {
    pub tau: f64,
    pub solution: WeakSolutionTriple,
    pub estimates: EstimateReport,
    pub report: SolveReport,
}

#[derive(Debug)]
pub struct Continuation {
    pub stages: Vec<TauStage>,
    /// Limit flux of the last completed stage.
    pub limit_flux: Option<EdgeField>,
    /// Failure that halted the sweep, with the `tau` at which it happened.
    pub failure: Option<(f64, Error)>,
}

impl Continuation {
    pub fn final_solution(&self) -> Option<&WeakSolutionTriple> {
        self.stages.last().map(|s| &s.solution)
    }
}

/// Solves for each `tau` of a strictly decreasing schedule, warm-starting every
/// stage from the previous one, and audits each stage.
pub fn continuation_tau(
    data: &ProblemData,
    tau_schedule: &[f64],
    picard: &PicardConfig,
    newton: &NewtonConfig,
) -> Result<Continuation> {
    if tau_schedule.is_empty()
        || tau_schedule.iter().any(|t| !(*t > 0.0))
        || tau_schedule.windows(2).any(|w| w[1] >= w[0])
    {
        return Err(Error::InvalidParameter(
            "tau schedule must be nonempty, positive and strictly decreasing".into(),
        ));
    }
    let solver = CoupledSolver::new(data.grid());
    let mut out = Continuation { stages: Vec::new(), limit_flux: None, failure: None };
    for &tau in tau_schedule {
        let mut stage_data = data.clone();
        stage_data.params.tau = tau;
        let prev = out.stages.last().map(|s| &s.solution);
        let result = solver.solve(
            &stage_data,
            picard,
            newton,
            prev.map(|s| &s.u),
            prev.map(|s| &s.rho),
        );
        match result {
            Ok((solution, report)) => {
                let estimates = apriori_audit(&solution.u, &solution.rho, &stage_data)?;
                out.stages.push(TauStage { tau, solution, estimates, report });
            }
            Err(e) => {
                out.failure = Some((tau, e));
                break;
            }
        }
    }
    if let Some(last) = out.stages.last() {
        let params = data.params.with_tau(last.tau);
        out.limit_flux = Some(solver.limit_flux(&last.solution.u, &params));
    }
    Ok(out)
}

/// State after one implicit time step.
#[derive(Debug, Clone)]
pub struct TrajectoryStep {
    pub step: usize,
    pub time: f64,
    pub u: NodeField,
    pub rho: NodeField,
    pub mass: f64,
    pub l2_norm: f64,
    pub surface_energy: f64,
    pub report: SolveReport,
}

#[derive(Debug)]
pub struct Trajectory {
    /// Step 0 is the initial state (with `rho` from the first solve's start).
    pub steps: Vec<TrajectoryStep>,
    pub failure: Option<(usize, Error)>,
}

impl Trajectory {
    /// Whether the surface energy never increased between recorded steps.
    pub fn energy_nonincreasing(&self) -> bool {
        self.steps
            .windows(2)
            .all(|w| w[1].surface_energy <= w[0].surface_energy * (1.0 + 1e-12))
    }
}

/// Backward Euler for `u_t = Lap rho`: each step solves the stationary system
/// with `a = 1/dt` and `f = u^n / dt`.
pub fn evolve(
    u0: &NodeField,
    dt: f64,
    nsteps: usize,
    params: &ModelParams,
    picard: &PicardConfig,
    newton: &NewtonConfig,
) -> Result<Trajectory> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    if !(params.tau > 0.0) {
        return Err(Error::InvalidParameter("evolution needs tau > 0".into()));
    }
    let step_params = ModelParams { a: 1.0 / dt, ..*params };
    step_params.validate()?;
    let solver = CoupledSolver::new(u0.grid());
    let grid = *u0.grid();
    let mut traj = Trajectory {
        steps: vec![TrajectoryStep {
            step: 0,
            time: 0.0,
            u: u0.clone(),
            rho: NodeField::constant(grid, 1.0),
            mass: integrate(u0),
            l2_norm: norm_lp(u0, 2.0),
            surface_energy: solver.surface_energy(u0, params),
            report: SolveReport::default(),
        }],
        failure: None,
    };
    let mut warm_rho: Option<NodeField> = None;
    for n in 1..=nsteps {
        let prev = &traj.steps[n - 1].u;
        let data = ProblemData { f: prev.map(|v| v / dt), params: step_params, u_source: None };
        match solver.solve(&data, picard, newton, Some(prev), warm_rho.as_ref()) {
            Ok((sol, report)) => {
                warm_rho = Some(sol.rho.clone());
                traj.steps.push(TrajectoryStep {
                    step: n,
                    time: n as f64 * dt,
                    mass: integrate(&sol.u),
                    l2_norm: norm_lp(&sol.u, 2.0),
                    surface_energy: solver.surface_energy(&sol.u, params),
                    u: sol.u,
                    rho: sol.rho,
                    report,
                });
            }
            Err(e) => {
                traj.failure = Some((n, e));
                break;
            }
        }
    }
    Ok(traj)
}
