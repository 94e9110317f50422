//! Newton solvers for the two decoupled scalar problems.
//!
//! Both problems are minimizations of strictly convex discrete functionals, so
//! they share one damped Newton driver ([`minimize`]) with Armijo backtracking:
//!
//! * density: `-Lap rho + delta rho + tau psi_delta(rho) = g` (barrier form) and
//!   its limit `-Lap rho + tau ln rho = g`;
//! * height: `-div(F_tau(|grad u|^2) grad u) - delta Lap u + tau u = rhs`.
//!
//! Residuals are measured in the node-weighted `L^2` norm of the strong form.

use serde::{Deserialize, Serialize};

use crate::energy::{
    energy_of_squared_slope, hessian_into, log_barrier, log_barrier_primitive, log_barrier_slope,
    ModelParams,
};
use crate::error::{Error, Result, Stage};
use crate::linalg::{pcg, Pattern, PreconditionerKind, SymCsr};
use crate::mesh::{integrate, Grid, NodeField, SlopeStencil};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NewtonConfig {
    /// Target for `|residual| / max(1, |data|)` in the weighted `L^2` norm.
    pub tol_residual: f64,
    pub max_iter: usize,
    /// Step reduction factor of the backtracking line search.
    pub armijo_factor: f64,
    pub sufficient_decrease: f64,
    pub max_halvings: usize,
    pub preconditioner: PreconditionerKind,
    pub cg_rel_tol: f64,
    pub cg_max_iter: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            tol_residual: 1e-10,
            max_iter: 100,
            armijo_factor: 0.5,
            sufficient_decrease: 1e-4,
            max_halvings: 40,
            preconditioner: PreconditionerKind::IncompleteCholesky,
            cg_rel_tol: 1e-12,
            cg_max_iter: 20_000,
        }
    }
}

impl NewtonConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_residual > 0.0) {
            return Err(Error::InvalidParameter("tol_residual must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidParameter("max_iter must be at least 1".into()));
        }
        if !(self.armijo_factor > 0.0 && self.armijo_factor < 1.0) {
            return Err(Error::InvalidParameter("armijo_factor must lie in (0,1)".into()));
        }
        Ok(())
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol_residual = tol;
        self
    }
}

/// One stage of a continuation (barrier parameter or regularization sweep).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuationStep {
    pub parameter: f64,
    pub iterations: usize,
    pub residual: f64,
    /// `L^2` change of the iterate relative to the previous stage.
    pub change: f64,
}

/// Iteration trace of a nonlinear solve.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    pub converged: bool,
    /// Converged at the floating-point floor above `tol_residual`.
    #[serde(default)]
    pub stagnated: bool,
    /// Inner conjugate gradient iterations, one entry per linear solve.
    pub linear_solver_stats: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub energy_history: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub continuation: Vec<ContinuationStep>,
}

impl SolveReport {
    pub fn final_residual(&self) -> f64 {
        self.residual_history.last().copied().unwrap_or(0.0)
    }

    fn absorb(&mut self, other: &SolveReport) {
        self.iterations += other.iterations;
        self.residual_history.extend_from_slice(&other.residual_history);
        self.linear_solver_stats.extend_from_slice(&other.linear_solver_stats);
        self.converged = other.converged;
        self.stagnated = other.stagnated;
    }
}

/// A smooth strictly convex functional on node values.
pub(crate) trait Objective {
    /// `+inf` outside the domain.
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], out: &mut [f64]);
    fn hessian<'p>(&self, x: &[f64], pattern: &'p Pattern) -> SymCsr<'p>;
    fn pattern(&self) -> &Pattern;
    fn weights(&self) -> &[f64];
}

/// `sqrt(sum_i grad_i^2 / w_i)`: the weighted `L^2` norm of the strong residual.
fn residual_norm(grad: &[f64], w: &[f64]) -> f64 {
    grad.iter().zip(w).map(|(g, w)| g * g / w).sum::<f64>().sqrt()
}

/// Damped Newton minimization of `obj` from `x0`.
///
/// A step is accepted when it satisfies the Armijo condition on the energy and
/// does not increase the residual, or when it decreases the residual
/// sufficiently without raising the energy beyond rounding; failing both, the
/// first Armijo step is taken. Converges when the residual drops below
/// `cfg.tol_residual * scale`, or when it stalls at the rounding floor within
/// `1e3 * tol_residual * scale`.
pub(crate) fn minimize(
    obj: &dyn Objective,
    x0: Vec<f64>,
    cfg: &NewtonConfig,
    scale: f64,
    stage: Stage,
) -> Result<(Vec<f64>, SolveReport)> {
    cfg.validate()?;
    let n = x0.len();
    let w = obj.weights();
    let target = cfg.tol_residual * scale;
    let floor = 1e3 * target;
    let mut report = SolveReport::default();
    let mut x = x0;
    let mut energy = obj.value(&x);
    if !energy.is_finite() {
        return Err(Error::Domain(format!("{stage} solve started outside the admissible set")));
    }
    let mut grad = vec![0.0; n];
    obj.gradient(&x, &mut grad);
    let mut res = residual_norm(&grad, w);
    report.residual_history.push(res);
    report.energy_history.push(energy);

    let mut trial = vec![0.0; n];
    let mut trial_grad = vec![0.0; n];
    loop {
        if res <= target {
            report.converged = true;
            return Ok((x, report));
        }
        let hist = &report.residual_history;
        if hist.len() >= 3 && res <= floor && res > 0.5 * hist[hist.len() - 2] {
            report.converged = true;
            report.stagnated = true;
            return Ok((x, report));
        }
        if report.iterations >= cfg.max_iter {
            return Err(Error::NonConvergence { stage, report: Box::new(report) });
        }
        report.iterations += 1;

        let hess = obj.hessian(&x, obj.pattern());
        let rhs: Vec<f64> = grad.iter().map(|g| -g).collect();
        let (dir, cg) = pcg(&hess, &rhs, cfg.preconditioner, cfg.cg_rel_tol, cfg.cg_max_iter)?;
        report.linear_solver_stats.push(cg.iterations);
        let slope: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        if !(slope < 0.0) {
            if res <= floor {
                report.converged = true;
                report.stagnated = true;
                return Ok((x, report));
            }
            return Err(Error::LineSearch { stage, report: Box::new(report) });
        }

        let mut alpha = 1.0;
        let mut fallback: Option<(f64, f64)> = None;
        let mut accepted: Option<(f64, f64)> = None;
        let slack = 1e-15 * energy.abs();
        let rounding = 1e-10 * (1.0 + energy.abs());
        for _ in 0..=cfg.max_halvings {
            for i in 0..n {
                trial[i] = x[i] + alpha * dir[i];
            }
            let e = obj.value(&trial);
            if e.is_finite() && e <= energy + rounding {
                obj.gradient(&trial, &mut trial_grad);
                let r = residual_norm(&trial_grad, w);
                let armijo = e <= energy + cfg.sufficient_decrease * alpha * slope + slack;
                // near the minimum energy differences drown in rounding; a
                // sufficient residual decrease is then the reliable signal
                let residual_drop = r <= (1.0 - cfg.sufficient_decrease * alpha) * res;
                if (armijo && r <= res) || residual_drop {
                    accepted = Some((alpha, e));
                    break;
                }
                if armijo && fallback.is_none() {
                    fallback = Some((alpha, e));
                }
            }
            alpha *= cfg.armijo_factor;
        }
        let Some((alpha, e)) = accepted.or(fallback) else {
            if res <= floor {
                report.converged = true;
                report.stagnated = true;
                return Ok((x, report));
            }
            return Err(Error::LineSearch { stage, report: Box::new(report) });
        };
        for i in 0..n {
            x[i] += alpha * dir[i];
        }
        energy = e;
        obj.gradient(&x, &mut grad);
        res = residual_norm(&grad, w);
        report.residual_history.push(res);
        report.energy_history.push(energy);
    }
}

/// Laplacian stiffness pattern: nodes joined by an edge.
fn edge_pattern(g: &Grid) -> Pattern {
    let pairs = (0..g.dim()).flat_map(|k| (0..g.edge_count(k)).map(move |e| g.edge_nodes(k, e)));
    Pattern::from_pairs(g.node_count(), pairs)
}

/// Adds the weighted Dirichlet stiffness `coef * sum_e omega_e (grad)^T grad`.
fn add_stiffness(g: &Grid, coef: f64, m: &mut SymCsr) {
    if coef == 0.0 {
        return;
    }
    for k in 0..g.dim() {
        let c = coef / (g.spacing()[k] * g.spacing()[k]);
        for e in 0..g.edge_count(k) {
            let (a, b) = g.edge_nodes(k, e);
            let v = c * g.edge_weight(k, e);
            m.add(a, a, v);
            m.add(b, b, v);
            m.add(a, b, -v);
            m.add(b, a, -v);
        }
    }
}

fn dirichlet_energy(g: &Grid, x: &[f64]) -> f64 {
    let mut acc = 0.0;
    for k in 0..g.dim() {
        let inv_h = 1.0 / g.spacing()[k];
        for e in 0..g.edge_count(k) {
            let (a, b) = g.edge_nodes(k, e);
            let d = (x[b] - x[a]) * inv_h;
            acc += g.edge_weight(k, e) * d * d;
        }
    }
    0.5 * acc
}

/// `out += coef * W (-Lap x)`, the gradient of `coef * dirichlet_energy`.
fn add_stiffness_gradient(g: &Grid, coef: f64, x: &[f64], out: &mut [f64]) {
    if coef == 0.0 {
        return;
    }
    for k in 0..g.dim() {
        let inv_h2 = 1.0 / (g.spacing()[k] * g.spacing()[k]);
        for e in 0..g.edge_count(k) {
            let (a, b) = g.edge_nodes(k, e);
            let f = coef * g.edge_weight(k, e) * (x[b] - x[a]) * inv_h2;
            out[a] -= f;
            out[b] += f;
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Potential {
    /// `delta rho + tau psi_delta(rho)`.
    Barrier { delta: f64 },
    /// `tau ln rho`, finite only for `rho > 0`.
    Log,
}

struct RhoObjective<'a> {
    grid: Grid,
    weights: Vec<f64>,
    pattern: Pattern,
    g: &'a [f64],
    tau: f64,
    potential: Potential,
}

impl RhoObjective<'_> {
    fn local(&self, s: f64) -> (f64, f64, f64) {
        match self.potential {
            Potential::Barrier { delta } => (
                0.5 * delta * s * s + self.tau * log_barrier_primitive(s, delta),
                delta * s + self.tau * log_barrier(s, delta),
                delta + self.tau * log_barrier_slope(s, delta),
            ),
            Potential::Log => {
                if s > 0.0 {
                    let l = s.ln();
                    (self.tau * (s * l - s), self.tau * l, self.tau / s)
                } else {
                    (f64::INFINITY, f64::NAN, f64::NAN)
                }
            }
        }
    }
}

impl Objective for RhoObjective<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        let mut acc = dirichlet_energy(&self.grid, x);
        for i in 0..x.len() {
            let (phi, _, _) = self.local(x[i]);
            acc += self.weights[i] * (phi - self.g[i] * x[i]);
        }
        acc
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..x.len() {
            let (_, d, _) = self.local(x[i]);
            out[i] = self.weights[i] * (d - self.g[i]);
        }
        add_stiffness_gradient(&self.grid, 1.0, x, out);
    }

    fn hessian<'p>(&self, x: &[f64], pattern: &'p Pattern) -> SymCsr<'p> {
        let mut m = SymCsr::zeros(pattern);
        add_stiffness(&self.grid, 1.0, &mut m);
        let diag: Vec<f64> = (0..x.len()).map(|i| self.weights[i] * self.local(x[i]).2).collect();
        m.add_diagonal(&diag);
        m
    }

    fn pattern(&self) -> &Pattern {
        &self.pattern
    }

    fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Residual scale `max(1, |data|_2)`: relative for large data, absolute near
/// zero data, where the rounding floor of the operators would otherwise
/// dominate a purely relative target.
fn data_scale(g: &NodeField) -> f64 {
    crate::mesh::norm_lp(g, 2.0).max(1.0)
}

fn mean(f: &NodeField) -> f64 {
    integrate(f) / f.grid().volume()
}

/// Root of a nondecreasing scalar function by bracketing and bisection.
fn monotone_root(f: impl Fn(f64) -> f64, start: f64) -> f64 {
    let (mut lo, mut hi) = (start, start);
    let mut step = 1.0f64.max(start.abs());
    while f(lo) > 0.0 {
        lo -= step;
        step *= 2.0;
    }
    step = 1.0f64.max(start.abs());
    while f(hi) < 0.0 {
        hi += step;
        step *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Solves `-Lap rho + delta rho + tau psi_delta(rho) = g` with homogeneous Neumann data.
///
/// Without an initial guess the iteration starts from the constant solving the
/// equation for the mean of `g`.
pub fn solve_rho_delta(
    g: &NodeField,
    tau: f64,
    delta: f64,
    cfg: &NewtonConfig,
    initial: Option<&NodeField>,
) -> Result<(NodeField, SolveReport)> {
    if tau == 0.0 && delta == 0.0 {
        return Err(Error::InvalidParameter(
            "density problem is ill-posed with tau = delta = 0".into(),
        ));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!("delta must lie in (0,1), got {delta}")));
    }
    if tau < 0.0 {
        return Err(Error::InvalidParameter(format!("tau must be nonnegative, got {tau}")));
    }
    let grid = *g.grid();
    let x0 = match initial {
        Some(init) => {
            check_grid(&grid, init)?;
            init.values().to_vec()
        }
        None => {
            let gm = mean(g);
            let c = monotone_root(|s| delta * s + tau * log_barrier(s, delta) - gm, 1.0 - delta);
            vec![c; grid.node_count()]
        }
    };
    let obj = RhoObjective {
        grid,
        weights: grid.node_weights(),
        pattern: edge_pattern(&grid),
        g: g.values(),
        tau,
        potential: Potential::Barrier { delta },
    };
    let (x, report) = minimize(&obj, x0, cfg, data_scale(g), Stage::Rho)?;
    Ok((NodeField::from_vec_unchecked(grid, x), report))
}

/// Solves the limit problem `-Lap rho + tau ln rho = g` by Newton's method from a
/// strictly positive starting field.
pub fn solve_rho_log(
    g: &NodeField,
    tau: f64,
    cfg: &NewtonConfig,
    initial: &NodeField,
) -> Result<(NodeField, SolveReport)> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("tau must be positive, got {tau}")));
    }
    let grid = *g.grid();
    check_grid(&grid, initial)?;
    if initial.min() <= 0.0 {
        return Err(Error::Positivity("logarithmic solve needs a positive start".into()));
    }
    let obj = RhoObjective {
        grid,
        weights: grid.node_weights(),
        pattern: edge_pattern(&grid),
        g: g.values(),
        tau,
        potential: Potential::Log,
    };
    let (x, report) = minimize(&obj, initial.values().to_vec(), cfg, data_scale(g), Stage::Rho)?;
    Ok((NodeField::from_vec_unchecked(grid, x), report))
}

/// Geometric barrier schedule `1e-1, 1e-2, ..., 1e-8`.
pub fn default_delta_schedule() -> Vec<f64> {
    (1..=8).map(|k| 10f64.powi(-k)).collect()
}

fn l2_diff(a: &NodeField, b: &NodeField) -> f64 {
    crate::mesh::norm_lp(&a.zip_map(b, |x, y| x - y), 2.0)
}

/// Solves `-Lap rho + tau ln rho = g` by continuation of the barrier problem
/// along `delta_schedule`, followed by Newton on the logarithmic equation itself.
///
/// With a positive `initial` field the continuation is skipped unless the direct
/// logarithmic solve fails.
pub fn solve_rho(
    g: &NodeField,
    tau: f64,
    cfg: &NewtonConfig,
    delta_schedule: &[f64],
    initial: Option<&NodeField>,
) -> Result<(NodeField, SolveReport)> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("tau must be positive, got {tau}")));
    }
    if let Some(init) = initial {
        check_grid(g.grid(), init)?;
        if init.min() > 0.0 {
            if let Ok(done) = solve_rho_log(g, tau, cfg, init) {
                return Ok(done);
            }
        }
    }
    if delta_schedule.is_empty() || delta_schedule.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidParameter("delta schedule must be nonempty and strictly decreasing".into()));
    }

    let mut report = SolveReport::default();
    let mut current: Option<NodeField> = initial.cloned();
    for &delta in delta_schedule {
        let (rho, stage) = solve_rho_delta(g, tau, delta, cfg, current.as_ref())?;
        let change = current.as_ref().map_or(0.0, |c| l2_diff(c, &rho));
        report.continuation.push(ContinuationStep {
            parameter: delta,
            iterations: stage.iterations,
            residual: stage.final_residual(),
            change,
        });
        report.absorb(&stage);
        current = Some(rho);
    }
    let rho = current.expect("schedule is nonempty");
    if rho.min() <= 0.0 {
        return Err(Error::Positivity(format!(
            "density has nonpositive values (min {:e}) after the final barrier stage",
            rho.min()
        )));
    }
    let (exact, stage) = solve_rho_log(g, tau, cfg, &rho)?;
    report.continuation.push(ContinuationStep {
        parameter: 0.0,
        iterations: stage.iterations,
        residual: stage.final_residual(),
        change: l2_diff(&rho, &exact),
    });
    report.absorb(&stage);
    Ok((exact, report))
}

struct UObjective<'a> {
    stencil: &'a SlopeStencil,
    weights: Vec<f64>,
    pattern: &'a Pattern,
    params: ModelParams,
    rhs: &'a [f64],
}

impl UObjective<'_> {
    fn edge_factor(&self) -> f64 {
        1.0 / self.stencil.grid().dim() as f64
    }
}

/// Sparsity of the height Hessian: all node pairs sharing an edge stencil.
pub(crate) fn slope_pattern(stencil: &SlopeStencil) -> Pattern {
    let g = stencil.grid();
    let mut pairs = Vec::new();
    for es in stencil.edges() {
        let nodes: Vec<usize> = es.components.iter().flatten().map(|&(k, _)| k).collect();
        for (i, &a) in nodes.iter().enumerate() {
            for &b in &nodes[i + 1..] {
                if a != b {
                    pairs.push((a, b));
                }
            }
        }
    }
    Pattern::from_pairs(g.node_count(), pairs)
}

impl Objective for UObjective<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        let d = self.stencil.grid().dim();
        let s = self.stencil.slopes(x);
        let f = self.edge_factor();
        let mut acc = 0.0;
        for (n, es) in self.stencil.edges().iter().enumerate() {
            let z = &s[n * d..(n + 1) * d];
            let sq: f64 = z.iter().map(|v| v * v).sum();
            acc += es.weight
                * (f * energy_of_squared_slope(sq, &self.params)
                    + 0.5 * self.params.delta * z[es.axis] * z[es.axis]);
        }
        for i in 0..x.len() {
            acc += self.weights[i] * (0.5 * self.params.tau * x[i] * x[i] - self.rhs[i] * x[i]);
        }
        acc
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let d = self.stencil.grid().dim();
        let s = self.stencil.slopes(x);
        let f = self.edge_factor();
        for i in 0..x.len() {
            out[i] = self.weights[i] * (self.params.tau * x[i] - self.rhs[i]);
        }
        for (n, es) in self.stencil.edges().iter().enumerate() {
            let z = &s[n * d..(n + 1) * d];
            let r = z.iter().map(|v| v * v).sum::<f64>() + self.params.tau;
            let fc = crate::energy::flux_coefficient_unchecked(r, &self.params);
            for (c, row) in es.components.iter().enumerate() {
                let mut flux = f * fc * z[c];
                if c == es.axis {
                    flux += self.params.delta * z[c];
                }
                let wf = es.weight * flux;
                for &(k, coef) in row {
                    out[k] += wf * coef;
                }
            }
        }
    }

    fn hessian<'p>(&self, x: &[f64], pattern: &'p Pattern) -> SymCsr<'p> {
        let d = self.stencil.grid().dim();
        let s = self.stencil.slopes(x);
        let f = self.edge_factor();
        let mut m = SymCsr::zeros(pattern);
        let mut local = [[0.0; 2]; 2];
        for (n, es) in self.stencil.edges().iter().enumerate() {
            let z = &s[n * d..(n + 1) * d];
            let r = z.iter().map(|v| v * v).sum::<f64>() + self.params.tau;
            hessian_into(z, r, &self.params, |i, j, v| local[i][j] = f * v);
            local[es.axis][es.axis] += self.params.delta;
            for (c1, row1) in es.components.iter().enumerate() {
                for (c2, row2) in es.components.iter().enumerate() {
                    let h = es.weight * local[c1][c2];
                    if h == 0.0 {
                        continue;
                    }
                    for &(k1, a1) in row1 {
                        for &(k2, a2) in row2 {
                            m.add(k1, k2, h * a1 * a2);
                        }
                    }
                }
            }
        }
        let diag: Vec<f64> = self.weights.iter().map(|w| w * self.params.tau).collect();
        m.add_diagonal(&diag);
        m
    }

    fn pattern(&self) -> &Pattern {
        self.pattern
    }

    fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Reusable height solver for one grid (caches the slope stencil and pattern).
pub struct HeightSolver {
    stencil: SlopeStencil,
    pattern: Pattern,
}

impl HeightSolver {
    pub fn new(grid: &Grid) -> Self {
        let stencil = SlopeStencil::new(grid);
        let pattern = slope_pattern(&stencil);
        Self { stencil, pattern }
    }

    pub fn stencil(&self) -> &SlopeStencil {
        &self.stencil
    }

    /// Minimizes
    /// `sum_e E_tau(grad u) + delta/2 |grad u|^2 + tau/2 u^2 - rhs u`, whose
    /// optimality condition is `-div(F_tau(|grad u|^2) grad u) - delta Lap u + tau u = rhs`.
    pub fn solve(
        &self,
        rhs: &NodeField,
        params: &ModelParams,
        cfg: &NewtonConfig,
        initial: Option<&NodeField>,
    ) -> Result<(NodeField, SolveReport)> {
        let grid = *self.stencil.grid();
        check_grid(&grid, rhs)?;
        if !(params.tau > 0.0) {
            let m = mean(rhs);
            if m.abs() > 1e-14 * (1.0 + crate::mesh::norm_lp(rhs, 1.0)) {
                return Err(Error::InvalidParameter(format!(
                    "tau = 0 is incompatible with a right-hand side of nonzero mean ({m:e})"
                )));
            }
            return Err(Error::Domain(
                "height solve needs tau > 0 (the energy is not differentiable at zero slope)".into(),
            ));
        }
        let x0 = match initial {
            Some(init) => {
                check_grid(&grid, init)?;
                init.values().to_vec()
            }
            None => vec![mean(rhs) / params.tau; grid.node_count()],
        };
        let obj = UObjective {
            stencil: &self.stencil,
            weights: grid.node_weights(),
            pattern: &self.pattern,
            params: *params,
            rhs: rhs.values(),
        };
        let (x, report) = minimize(&obj, x0, cfg, data_scale(rhs), Stage::U)?;
        Ok((NodeField::from_vec_unchecked(grid, x), report))
    }

    /// Strong-form operator `-div(F_tau(|grad u|^2) grad u) - delta Lap u + tau u`
    /// exactly as the solver discretizes it.
    pub fn apply(&self, u: &NodeField, params: &ModelParams) -> NodeField {
        let grid = *self.stencil.grid();
        let zero = vec![0.0; grid.node_count()];
        let w = grid.node_weights();
        let obj = UObjective {
            stencil: &self.stencil,
            weights: w.clone(),
            pattern: &self.pattern,
            params: *params,
            rhs: &zero,
        };
        let mut out = vec![0.0; grid.node_count()];
        obj.gradient(u.values(), &mut out);
        for (o, wi) in out.iter_mut().zip(&w) {
            *o /= wi;
        }
        NodeField::from_vec_unchecked(grid, out)
    }
}

/// Solves `-div(F_tau(|grad u|^2) grad u) - delta Lap u + tau u = rhs` with
/// homogeneous Neumann data, starting from `mean(rhs)/tau`.
pub fn solve_u(
    rhs: &NodeField,
    params: &ModelParams,
    cfg: &NewtonConfig,
) -> Result<(NodeField, SolveReport)> {
    HeightSolver::new(rhs.grid()).solve(rhs, params, cfg, None)
}

/// Strong-form residual of the density equation, `-Lap rho + tau ln rho - g`.
pub fn rho_residual(rho: &NodeField, g: &NodeField, tau: f64) -> NodeField {
    let lap = crate::mesh::laplacian(rho);
    let vals = (0..rho.values().len())
        .map(|i| -lap.values()[i] + tau * rho.values()[i].ln() - g.values()[i])
        .collect();
    NodeField::from_vec_unchecked(*rho.grid(), vals)
}

fn check_grid(grid: &Grid, f: &NodeField) -> Result<()> {
    if f.grid() != grid {
        return Err(Error::GridMismatch("field lives on a different grid".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::log_barrier_zero;
    use crate::mesh::{laplacian, norm_lp};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn cfg() -> NewtonConfig {
        NewtonConfig::default()
    }

    fn max_err(a: &NodeField, f: impl Fn(&[f64]) -> f64) -> f64 {
        let g = *a.grid();
        (0..g.node_count())
            .map(|k| (a.values()[k] - f(&g.coords(k)[..g.dim()])).abs())
            .fold(0.0, f64::max)
    }

    fn random_smooth(grid: Grid, rng: &mut impl Rng, amp: f64) -> NodeField {
        let c: Vec<f64> = (0..4).map(|_| rng.gen_range(-amp..amp)).collect();
        NodeField::from_fn(grid, |x| {
            let y = if x.len() > 1 { x[1] } else { 0.0 };
            c[0] + c[1] * (PI * x[0]).cos() + c[2] * (2.0 * PI * x[0]).cos() + c[3] * (PI * y).cos()
        })
    }

    #[test]
    fn barrier_problem_constant_cases() {
        let g = Grid::line(1.0, 17).unwrap();
        let (rho, rep) = solve_rho_delta(&NodeField::zeros(g), 1.0, 1e-8, &cfg(), None).unwrap();
        assert!(rep.converged);
        assert!(rep.final_residual() <= 1e-10);
        assert!(max_err(&rho, |_| 1.0) < 1e-7);
        let (rho, _) = solve_rho_delta(&NodeField::constant(g, 0.7), 1.0, 1e-8, &cfg(), None).unwrap();
        assert!(max_err(&rho, |_| 0.7f64.exp()) < 1e-6);
        assert!((log_barrier_zero(1e-8) - (1.0 - 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn barrier_problem_validation() {
        let g = Grid::line(1.0, 9).unwrap();
        let z = NodeField::zeros(g);
        assert!(matches!(solve_rho_delta(&z, 0.0, 0.0, &cfg(), None), Err(Error::InvalidParameter(_))));
        assert!(solve_rho_delta(&z, 1.0, 1.0, &cfg(), None).is_err());
        assert!(solve_rho(&z, 0.0, &cfg(), &default_delta_schedule(), None).is_err());
    }

    #[test]
    fn barrier_problem_recovers_manufactured_density() {
        let g = Grid::line(1.0, 65).unwrap();
        let (tau, delta) = (0.5, 1e-3);
        let star = NodeField::from_fn(g, |x| 2.0 + (PI * x[0]).cos());
        let lap = laplacian(&star);
        let data = NodeField::from_fn(g, |_| 0.0).zip_map(&lap, |_, l| -l);
        let data = data.zip_map(&star, |a, r| a + delta * r + tau * log_barrier(r, delta));
        let (rho, _) = solve_rho_delta(&data, tau, delta, &cfg(), None).unwrap();
        assert!(rho.max_abs_diff(&star) < 1e-9);
    }

    #[test]
    fn barrier_problem_satisfies_log_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Grid::line(1.0, 33).unwrap();
        let delta = 1e-2;
        for _ in 0..10 {
            let tau = rng.gen_range(0.1..1.0);
            let data = random_smooth(g, &mut rng, 2.0 * tau);
            let (rho, _) = solve_rho_delta(&data, tau, delta, &cfg(), None).unwrap();
            let psi = rho.map(|r| tau * log_barrier(r, delta));
            let shifted = data.map(|v| v - delta * log_barrier_zero(delta));
            for lambda in [1.0, 2.0] {
                assert!(norm_lp(&psi, lambda) <= 1.05 * norm_lp(&shifted, lambda));
            }
        }
    }

    #[test]
    fn log_problem_constant_cases() {
        let g = Grid::rect(1.0, 1.0, 9, 9).unwrap();
        let sched = default_delta_schedule();
        let (rho, rep) = solve_rho(&NodeField::zeros(g), 1.0, &cfg(), &sched, None).unwrap();
        assert!(max_err(&rho, |_| 1.0) < 1e-12);
        assert!(rep.converged);
        let (rho, rep) = solve_rho(&NodeField::constant(g, -2.0), 1.0, &cfg(), &sched, None).unwrap();
        assert!(max_err(&rho, |_| (-2.0f64).exp()) < 1e-12);
        assert_eq!(rep.continuation.len(), sched.len() + 1);
    }

    #[test]
    fn log_problem_integral_identity_and_estimate() {
        let g = Grid::line(1.0, 65).unwrap();
        let data = NodeField::from_fn(g, |x| 3.0 * (PI * x[0]).cos() - (3.0 * PI * x[0]).cos());
        assert!(integrate(&data).abs() < 1e-12);
        let tau = 0.5;
        let (rho, _) = solve_rho(&data, tau, &cfg(), &default_delta_schedule(), None).unwrap();
        assert!(rho.min() > 0.0);
        assert!(integrate(&rho.map(|r| tau * r.ln())).abs() < 1e-8);
        assert!(norm_lp(&rho_residual(&rho, &data, tau), 2.0) < 1e-9);
    }

    #[test]
    fn log_problem_estimate_on_random_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sched = default_delta_schedule();
        for k in 0..100 {
            let g = if k % 2 == 0 { Grid::line(1.0, 33).unwrap() } else { Grid::rect(1.0, 1.0, 9, 9).unwrap() };
            let tau = [0.1, 1.0][k % 2];
            let data = random_smooth(g, &mut rng, 5.0 * tau);
            let (rho, _) = solve_rho(&data, tau, &cfg(), &sched, None).unwrap();
            let tl = rho.map(|r| tau * r.ln());
            for lambda in [1.0, 2.0] {
                assert!(norm_lp(&tl, lambda) <= 1.05 * norm_lp(&data, lambda));
            }
        }
    }

    #[test]
    fn log_problem_comparison_principle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = Grid::line(1.0, 33).unwrap();
        let sched = default_delta_schedule();
        for _ in 0..10 {
            let g1 = random_smooth(g, &mut rng, 1.0);
            let bump = random_smooth(g, &mut rng, 1.0).map(|v| v.abs());
            let g2 = g1.zip_map(&bump, |a, b| a + b);
            let (r1, _) = solve_rho(&g1, 0.5, &cfg(), &sched, None).unwrap();
            let (r2, _) = solve_rho(&g2, 0.5, &cfg(), &sched, None).unwrap();
            for (a, b) in r1.values().iter().zip(r2.values()) {
                assert!(*a <= b + 1e-10);
            }
        }
    }

    #[test]
    fn warm_start_skips_continuation() {
        let g = Grid::line(1.0, 33).unwrap();
        let data = NodeField::from_fn(g, |x| (PI * x[0]).cos());
        let sched = default_delta_schedule();
        let (cold, _) = solve_rho(&data, 0.3, &cfg(), &sched, None).unwrap();
        let (warm, rep) = solve_rho(&data, 0.3, &cfg(), &sched, Some(&NodeField::constant(g, 1.0))).unwrap();
        assert!(rep.continuation.is_empty());
        assert!(cold.max_abs_diff(&warm) < 1e-10);
    }

    fn params(tau: f64, delta: f64) -> ModelParams {
        ModelParams::new(1.5, 1.0, 1.0, tau, delta).unwrap()
    }

    #[test]
    fn height_constant_cases() {
        let g = Grid::rect(1.0, 1.0, 9, 9).unwrap();
        let prm = params(0.2, 1e-6);
        let (u, _) = solve_u(&NodeField::constant(g, 0.2 * 1.7), &prm, &cfg()).unwrap();
        assert!(max_err(&u, |_| 1.7) < 1e-12);
        let (u, _) = solve_u(&NodeField::zeros(g), &prm, &cfg()).unwrap();
        assert!(max_err(&u, |_| 0.0) < 1e-14);
    }

    #[test]
    fn height_rejects_zero_tau() {
        let g = Grid::line(1.0, 9).unwrap();
        let prm = ModelParams::new(1.5, 1.0, 1.0, 0.0, 0.0).unwrap();
        let err = solve_u(&NodeField::constant(g, 1.0), &prm, &cfg()).unwrap_err();
        assert!(err.to_string().contains("nonzero mean"));
        assert!(solve_u(&NodeField::zeros(g), &prm, &cfg()).is_err());
    }

    #[test]
    fn height_recovers_manufactured_profile() {
        for g in [Grid::line(1.0, 65).unwrap(), Grid::rect(1.0, 1.0, 21, 17).unwrap()] {
            let solver = HeightSolver::new(&g);
            let prm = params(0.05, 1e-4);
            let star = NodeField::from_fn(g, |x| (PI * x[0]).cos() + if x.len() > 1 { 0.5 * (PI * x[1]).cos() } else { 0.0 });
            let rhs = solver.apply(&star, &prm);
            let (u, rep) = solver.solve(&rhs, &prm, &cfg(), None).unwrap();
            assert!(u.max_abs_diff(&star) < 1e-9, "error {}", u.max_abs_diff(&star));
            // energy decreases along accepted steps
            assert!(rep.energy_history.windows(2).all(|w| w[1] <= w[0] + 1e-10 * (1.0 + w[0].abs())));
        }
    }

    #[test]
    fn height_newton_converges_quadratically() {
        let g = Grid::line(1.0, 129).unwrap();
        let solver = HeightSolver::new(&g);
        let prm = params(0.1, 0.0);
        let star = NodeField::from_fn(g, |x| 0.5 * (PI * x[0]).cos());
        let rhs = solver.apply(&star, &prm);
        let (_, rep) = solver.solve(&rhs, &prm, &cfg(), None).unwrap();
        let h = &rep.residual_history;
        let ratios: Vec<f64> = h
            .windows(2)
            .filter(|w| w[0] < 1e-2 && w[1] > 1e-13)
            .map(|w| w[1] / (w[0] * w[0]))
            .collect();
        assert!(!ratios.is_empty());
        assert!(ratios.iter().all(|&r| r <= 10.0), "{ratios:?}");
    }

    #[test]
    fn height_solution_is_independent_of_start() {
        let g = Grid::line(1.0, 33).unwrap();
        let solver = HeightSolver::new(&g);
        let prm = params(0.05, 1e-6);
        let rhs = NodeField::from_fn(g, |x| (2.0 * PI * x[0]).cos() + 0.3);
        let (a, _) = solver.solve(&rhs, &prm, &cfg(), None).unwrap();
        let start = NodeField::from_fn(g, |x| 5.0 * x[0] - 2.0);
        let (b, _) = solver.solve(&rhs, &prm, &cfg(), Some(&start)).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-8);
    }

    #[test]
    fn newton_config_is_strict() {
        let c: NewtonConfig = serde_json::from_str(r#"{"max_iter": 7}"#).unwrap();
        assert_eq!(c.max_iter, 7);
        assert_eq!(c.tol_residual, 1e-10);
        assert!(serde_json::from_str::<NewtonConfig>(r#"{"max_iters": 7}"#).is_err());
        assert!(NewtonConfig { armijo_factor: 1.0, ..cfg() }.validate().is_err());
    }
}
