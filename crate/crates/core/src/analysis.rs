//! Diagnostics on computed solutions: a priori estimate audits, ball-mass
//! vanishing orders of the density, the De Giorgi recursion lemma, Poincaré
//! ratios, and manufactured solutions for verification.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::coupled::{CoupledSolver, PicardConfig, ProblemData};
use crate::energy::ModelParams;
use crate::error::{Error, Result};
use crate::mesh::{integrate, lp_of_values, nodal_gradient_magnitude, norm_lp, w1p_norm, Grid, NodeField};
use crate::solvers::{HeightSolver, NewtonConfig};

/// `(|tau ln rho|_lambda, |f - a u|_lambda)` for one exponent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogSourcePair {
    pub lambda: f64,
    pub tau_log_rho: f64,
    pub source: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    /// `int |grad sqrt(rho)|^2`.
    pub dirichlet_sqrt_rho: f64,
    /// `|u|_{W^{1,p}}`.
    pub w1p_u: f64,
    /// `int |ln rho|`.
    pub l1_log_rho: f64,
    pub tau_log_vs_f: Vec<LogSourcePair>,
    /// `|(a + tau^2) int u - int f|` (source term of the height equation included).
    pub mean_identity_residual: f64,
    /// `(sup u^+, sup u^-)`.
    pub sup_u_pm: [f64; 2],
    /// `sup u^± / (|u^±|_1 + |g^±|_s^(1/(p-1)) + sqrt(tau))` with `g = ln rho`
    /// (the height equation's source) and `s = N/p + 1`.
    pub sup_ratio_pm: [f64; 2],
}

impl EstimateReport {
    /// Whether `|tau ln rho|_lambda <= factor |f - a u|_lambda` for every probed `lambda`.
    pub fn log_bound_holds(&self, factor: f64) -> bool {
        self.tau_log_vs_f
            .iter()
            .all(|p| p.tau_log_rho <= factor * p.source + 1e-14)
    }
}

/// Audits the a priori estimates on a computed pair `(u, rho)`.
pub fn apriori_audit(u: &NodeField, rho: &NodeField, data: &ProblemData) -> Result<EstimateReport> {
    let g = *u.grid();
    if rho.grid() != &g || data.f.grid() != &g {
        return Err(Error::GridMismatch("audit fields live on different grids".into()));
    }
    if rho.min() <= 0.0 {
        return Err(Error::Positivity(format!("density minimum {:e} is not positive", rho.min())));
    }
    let p = &data.params;
    let sqrt_rho = rho.map(f64::sqrt);
    let mut dirichlet = 0.0;
    for k in 0..g.dim() {
        for e in 0..g.edge_count(k) {
            let (a, b) = g.edge_nodes(k, e);
            let d = (sqrt_rho.values()[b] - sqrt_rho.values()[a]) / g.spacing()[k];
            dirichlet += g.edge_weight(k, e) * d * d;
        }
    }
    let log_rho = rho.map(f64::ln);
    let tau_log = log_rho.map(|v| p.tau * v);
    let source = data.f.zip_map(u, |f, u| f - p.a * u);
    let tau_log_vs_f = [1.0, 2.0]
        .into_iter()
        .map(|lambda| LogSourcePair {
            lambda,
            tau_log_rho: norm_lp(&tau_log, lambda),
            source: norm_lp(&source, lambda),
        })
        .collect();

    let extra = data.u_source.as_ref().map_or(0.0, |s| p.tau * integrate(s));
    let mean_identity_residual =
        ((p.a + p.tau * p.tau) * integrate(u) - integrate(&data.f) - extra).abs();

    let s_exp = g.dim() as f64 / p.p + 1.0;
    let mut sup_u_pm = [0.0; 2];
    let mut sup_ratio_pm = [0.0; 2];
    for (i, sign) in [1.0, -1.0].into_iter().enumerate() {
        let part = u.map(|v| (sign * v).max(0.0));
        let g_part = log_rho.map(|v| (sign * v).max(0.0));
        let sup = part.max();
        let denom = norm_lp(&part, 1.0) + norm_lp(&g_part, s_exp).powf(1.0 / (p.p - 1.0)) + p.tau.sqrt();
        sup_u_pm[i] = sup;
        sup_ratio_pm[i] = if sup == 0.0 { 0.0 } else { sup / denom };
    }

    Ok(EstimateReport {
        dirichlet_sqrt_rho: dirichlet,
        w1p_u: w1p_norm(u, p.p),
        l1_log_rho: norm_lp(&log_rho, 1.0),
        tau_log_vs_f,
        mean_identity_residual,
        sup_u_pm,
        sup_ratio_pm,
    })
}

/// Classification of one probe point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointLabel {
    Regular,
    /// Ball masses decay at least at the critical rate for every probed `eps`.
    Suspect,
    /// Some ball carries exactly zero mass.
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub x0: Vec<f64>,
    /// `R_max 2^-j`, strictly decreasing.
    pub radii: Vec<f64>,
    /// `int_{B_R} rho` by node inclusion.
    pub masses: Vec<f64>,
    /// Nodes enclosed by each ball.
    pub node_counts: Vec<usize>,
    /// Number of leading radii used in the fit (balls with at least 10 nodes).
    pub fit_len: usize,
    /// Least-squares slope of `log M` against `log R`; `+inf` when degenerate.
    pub theta: f64,
    /// Per-`eps` verdict of the ratio test (true = bounded away from zero).
    pub regular_for_eps: Vec<bool>,
    pub label: PointLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularityReport {
    pub eps_list: Vec<f64>,
    pub levels: usize,
    pub points: Vec<ProbeResult>,
}

const MIN_FIT_NODES: usize = 10;
const RATIO_FLOOR: f64 = 1e-3;

fn ball_masses(rho: &NodeField, x0: &[f64], radii: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let g = rho.grid();
    let mut masses = vec![0.0; radii.len()];
    let mut counts = vec![0; radii.len()];
    for k in 0..g.node_count() {
        let c = g.coords(k);
        let d2: f64 = (0..g.dim()).map(|i| (c[i] - x0[i]).powi(2)).sum();
        let w = g.node_weight(k) * rho.values()[k];
        for (j, r) in radii.iter().enumerate() {
            if d2 <= r * r * (1.0 + 1e-12) {
                masses[j] += w;
                counts[j] += 1;
            }
        }
    }
    (masses, counts)
}

fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

fn probe(rho: &NodeField, x0: &[f64], r_max: f64, levels: usize, eps_list: &[f64]) -> Result<ProbeResult> {
    let g = rho.grid();
    if x0.len() != g.dim() {
        return Err(Error::InvalidParameter(format!(
            "probe point has {} coordinates on a {}-dimensional grid",
            x0.len(),
            g.dim()
        )));
    }
    if levels < 3 {
        return Err(Error::InvalidParameter(format!("need at least 3 levels, got {levels}")));
    }
    if !(r_max > 0.0) {
        return Err(Error::InvalidParameter("R_max must be positive".into()));
    }
    if rho.min() < 0.0 {
        return Err(Error::Domain("density must be nonnegative".into()));
    }
    let radii: Vec<f64> = (0..=levels).map(|j| r_max * 0.5f64.powi(j as i32)).collect();
    let (masses, node_counts) = ball_masses(rho, x0, &radii);
    let fit_len = node_counts.iter().take_while(|&&c| c >= MIN_FIT_NODES).count();
    let n = g.dim() as f64;

    let degenerate = masses.contains(&0.0);
    let theta = if degenerate {
        f64::INFINITY
    } else if fit_len >= 2 {
        let lx: Vec<f64> = radii[..fit_len].iter().map(|r| r.ln()).collect();
        let ly: Vec<f64> = masses[..fit_len].iter().map(|m| m.ln()).collect();
        ls_slope(&lx, &ly)
    } else {
        f64::NAN
    };
    let regular_for_eps: Vec<bool> = eps_list
        .iter()
        .map(|&eps| {
            if degenerate || fit_len == 0 {
                return false;
            }
            let ratios: Vec<f64> = (0..fit_len)
                .map(|j| masses[j] / radii[j].powf(n + 2.0 - eps))
                .collect();
            let max = ratios.iter().cloned().fold(0.0, f64::max);
            let min = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
            min >= RATIO_FLOOR * max
        })
        .collect();
    let label = if degenerate {
        PointLabel::Degenerate
    } else if regular_for_eps.iter().any(|&r| r) {
        PointLabel::Regular
    } else {
        PointLabel::Suspect
    };
    Ok(ProbeResult {
        x0: x0.to_vec(),
        radii,
        masses,
        node_counts,
        fit_len,
        theta,
        regular_for_eps,
        label,
    })
}

fn boundary_distance(g: &Grid, x0: &[f64]) -> f64 {
    (0..g.dim())
        .map(|i| x0[i].min(g.extents()[i] - x0[i]))
        .fold(f64::INFINITY, f64::min)
}

/// Fits the vanishing order of `rho` at `x0` from ball masses on the dyadic
/// radii `R_max 2^-j`, `j = 0..=levels`. Every ball must lie in the domain.
pub fn vanishing_order(
    rho: &NodeField,
    x0: &[f64],
    r_max: f64,
    levels: usize,
    eps_list: &[f64],
) -> Result<(f64, ProbeResult)> {
    let g = rho.grid();
    if x0.len() == g.dim() && boundary_distance(g, x0) < r_max * (1.0 - 1e-12) {
        return Err(Error::Domain(format!("ball of radius {r_max} around {x0:?} leaves the domain")));
    }
    let row = probe(rho, x0, r_max, levels, eps_list)?;
    Ok((row.theta, row))
}

/// Classifies each probe point; radii are clipped so every ball stays in the domain.
pub fn classify_points(
    rho: &NodeField,
    points: &[Vec<f64>],
    eps_list: &[f64],
    r_max: f64,
    levels: usize,
) -> Result<SingularityReport> {
    if eps_list.is_empty() || eps_list.iter().any(|e| !(*e > 0.0 && *e < 2.0)) {
        return Err(Error::InvalidParameter("eps values must lie in (0,2)".into()));
    }
    let g = rho.grid();
    let mut out = Vec::with_capacity(points.len());
    for x0 in points {
        if x0.len() != g.dim() {
            return Err(Error::InvalidParameter("probe point dimension mismatch".into()));
        }
        let r = r_max.min(boundary_distance(g, x0));
        if !(r > 0.0) {
            return Err(Error::Domain(format!("probe point {x0:?} is not interior")));
        }
        out.push(probe(rho, x0, r, levels, eps_list)?);
    }
    Ok(SingularityReport { eps_list: eps_list.to_vec(), levels, points: out })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeGiorgiTrace {
    pub hypothesis_holds: bool,
    pub converged: bool,
    pub diverged: bool,
    /// `y_0, y_1, ...` up to 200 steps or the first overflow.
    pub trace: Vec<f64>,
}

/// Iterates `y_{n+1} = c b^n y_n^(1+alpha)` for 200 steps.
pub fn degiorgi_sequence_check(y0: f64, c: f64, b: f64, alpha: f64) -> Result<DeGiorgiTrace> {
    if !(b > 1.0 && c > 0.0 && alpha > 0.0 && y0 > 0.0) {
        return Err(Error::InvalidParameter("need b > 1 and c, alpha, y0 > 0".into()));
    }
    let threshold = c.powf(-1.0 / alpha) * b.powf(-1.0 / (alpha * alpha));
    let mut trace = Vec::with_capacity(201);
    let mut y = y0;
    let mut bn = 1.0;
    trace.push(y);
    let mut diverged = false;
    for _ in 0..200 {
        y = c * bn * y.powf(1.0 + alpha);
        bn *= b;
        if !y.is_finite() || !bn.is_finite() {
            diverged = true;
            break;
        }
        trace.push(y);
    }
    let converged = !diverged && y < 1e-30;
    Ok(DeGiorgiTrace { hypothesis_holds: y0 <= threshold, converged, diverged, trace })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoincareRatio {
    pub ratio: f64,
    pub p_star: f64,
    /// `p* = 2p` was substituted because `N <= p`.
    pub low_dimension_exponent: bool,
}

/// `|u - u_S|_{p*} / (d^(N+1-p/N) |S|^(-1/p) |grad u|_p)` for a node subset `S`.
pub fn poincare_ratio(u: &NodeField, subset: &[usize], p: f64) -> Result<PoincareRatio> {
    let g = u.grid();
    if subset.is_empty() {
        return Err(Error::InvalidParameter("subset must not be empty".into()));
    }
    if !(p >= 1.0) {
        return Err(Error::InvalidParameter(format!("p must be at least 1, got {p}")));
    }
    if let Some(&k) = subset.iter().find(|&&k| k >= g.node_count()) {
        return Err(Error::InvalidParameter(format!("node {k} is outside the grid")));
    }
    let n = g.dim() as f64;
    let low = n <= p;
    let p_star = if low { 2.0 * p } else { n * p / (n - p) };
    let measure: f64 = subset.iter().map(|&k| g.node_weight(k)).sum();
    let mean = subset.iter().map(|&k| g.node_weight(k) * u.values()[k]).sum::<f64>() / measure;
    let shifted: Vec<f64> = u.values().iter().map(|v| v - mean).collect();
    let num = lp_of_values(g, &shifted, p_star);
    let grad = norm_lp(&nodal_gradient_magnitude(u), p);
    let ratio = if num == 0.0 || grad == 0.0 {
        0.0
    } else {
        let scale = g.diameter().powf(n + 1.0 - p / n) / measure.powf(1.0 / p);
        num / (scale * grad)
    };
    Ok(PoincareRatio { ratio, p_star, low_dimension_exponent: low })
}

/// Data reproducing `(u*, rho*)` exactly under the discrete operators:
/// `f = -Lap rho* + tau ln rho* + a u*` and
/// `rhs = -div(F_tau(|grad u*|^2) grad u*) - delta Lap u* + tau u*`.
pub fn manufactured_problem(
    u_star: &NodeField,
    rho_star: &NodeField,
    params: &ModelParams,
) -> Result<(NodeField, NodeField)> {
    if rho_star.min() <= 0.0 {
        return Err(Error::Positivity("manufactured density must be positive".into()));
    }
    if u_star.grid() != rho_star.grid() {
        return Err(Error::GridMismatch("manufactured fields live on different grids".into()));
    }
    let residual = crate::solvers::rho_residual(rho_star, &NodeField::zeros(*rho_star.grid()), params.tau);
    let f = residual.zip_map(u_star, |r, u| r + params.a * u);
    let rhs = HeightSolver::new(u_star.grid()).apply(u_star, params);
    Ok((f, rhs))
}

/// Coupled problem whose discrete solution is exactly `(u*, rho*)`.
pub fn manufactured_data(u_star: &NodeField, rho_star: &NodeField, params: &ModelParams) -> Result<ProblemData> {
    let (f, rhs) = manufactured_problem(u_star, rho_star, params)?;
    let s = rhs.zip_map(rho_star, |r, m| r - m.ln());
    Ok(ProblemData::new(f, *params)?.with_u_source(s))
}

/// Smooth Neumann-compatible pair `u* = A prod cos(pi x_i / L_i)`,
/// `rho* = exp(B prod cos(pi x_i / L_i))` with its continuous source terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosinePair {
    pub amp_u: f64,
    pub amp_log_rho: f64,
}

impl Default for CosinePair {
    fn default() -> Self {
        Self { amp_u: 0.5, amp_log_rho: 0.3 }
    }
}

/// Value, gradient and Hessian of `prod cos(pi x_i / L_i)`.
fn cos_product(x: &[f64], ext: &[f64]) -> (f64, [f64; 2], [[f64; 2]; 2]) {
    let d = x.len();
    let k: Vec<f64> = (0..d).map(|i| PI / ext[i]).collect();
    let c: Vec<f64> = (0..d).map(|i| (k[i] * x[i]).cos()).collect();
    let s: Vec<f64> = (0..d).map(|i| (k[i] * x[i]).sin()).collect();
    let others = |i: usize, j: usize| -> f64 { (0..d).filter(|&m| m != i && m != j).map(|m| c[m]).product() };
    let v: f64 = c.iter().product();
    let mut grad = [0.0; 2];
    let mut hess = [[0.0; 2]; 2];
    for i in 0..d {
        grad[i] = -k[i] * s[i] * others(i, i);
        for j in 0..d {
            hess[i][j] = if i == j {
                -k[i] * k[i] * v
            } else {
                k[i] * k[j] * s[i] * s[j] * others(i, j)
            };
        }
    }
    (v, grad, hess)
}

impl CosinePair {
    pub fn u(&self, x: &[f64], ext: &[f64]) -> f64 {
        self.amp_u * cos_product(x, ext).0
    }

    pub fn rho(&self, x: &[f64], ext: &[f64]) -> f64 {
        (self.amp_log_rho * cos_product(x, ext).0).exp()
    }

    /// `-Lap rho* + tau ln rho* + a u*`.
    pub fn f(&self, x: &[f64], ext: &[f64], params: &ModelParams) -> f64 {
        let (v, g, h) = cos_product(x, ext);
        let b = self.amp_log_rho;
        let rho = (b * v).exp();
        let d = x.len();
        let lap_v: f64 = (0..d).map(|i| h[i][i]).sum();
        let grad2: f64 = (0..d).map(|i| g[i] * g[i]).sum();
        let lap_rho = rho * (b * lap_v + b * b * grad2);
        -lap_rho + params.tau * b * v + params.a * self.amp_u * v
    }

    /// Height-equation source `s` so that `u*` solves it with `ln rho*`.
    pub fn u_source(&self, x: &[f64], ext: &[f64], params: &ModelParams) -> f64 {
        let (v, g, h) = cos_product(x, ext);
        let a = self.amp_u;
        let d = x.len();
        let grad: Vec<f64> = (0..d).map(|i| a * g[i]).collect();
        let sq: f64 = grad.iter().map(|z| z * z).sum();
        let lap: f64 = (0..d).map(|i| a * h[i][i]).sum();
        let r = sq + params.tau;
        let fc = r.powf(0.5 * (params.p - 2.0)) + params.beta0 / r.sqrt();
        let dfc = 0.5 * (params.p - 2.0) * r.powf(0.5 * (params.p - 4.0)) - 0.5 * params.beta0 * r.powf(-1.5);
        let mut quad = 0.0;
        for i in 0..d {
            for j in 0..d {
                quad += grad[i] * a * h[i][j] * grad[j];
            }
        }
        let div_flux = fc * lap + 2.0 * dfc * quad;
        -div_flux - params.delta * lap + params.tau * a * v - self.amp_log_rho * v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmsRow {
    pub nodes: usize,
    pub h: f64,
    pub error_u: f64,
    pub error_rho: f64,
    /// Observed orders against the previous row (`None` on the first).
    pub order_u: Option<f64>,
    pub order_rho: Option<f64>,
}

/// Grid-convergence study of the coupled solver against a [`CosinePair`] on
/// `[0,1]^dim` with `n` nodes per axis for each `n` in `nodes`.
pub fn mms_study(
    dim: usize,
    nodes: &[usize],
    pair: &CosinePair,
    params: &ModelParams,
    picard: &PicardConfig,
    newton: &NewtonConfig,
) -> Result<Vec<MmsRow>> {
    let mut rows: Vec<MmsRow> = Vec::with_capacity(nodes.len());
    for &n in nodes {
        let grid = Grid::new(&vec![1.0; dim], &vec![n; dim])?;
        let ext = grid.extents().to_vec();
        let f = NodeField::from_fn(grid, |x| pair.f(x, &ext, params));
        let s = NodeField::from_fn(grid, |x| pair.u_source(x, &ext, params));
        let data = ProblemData::new(f, *params)?.with_u_source(s);
        let (sol, _) = CoupledSolver::new(&grid).solve(&data, picard, newton, None, None)?;
        let u_star = NodeField::from_fn(grid, |x| pair.u(x, &ext));
        let rho_star = NodeField::from_fn(grid, |x| pair.rho(x, &ext));
        let error_u = norm_lp(&sol.u.zip_map(&u_star, |a, b| a - b), 2.0);
        let error_rho = norm_lp(&sol.rho.zip_map(&rho_star, |a, b| a - b), 2.0);
        let h = grid.spacing()[0];
        let (order_u, order_rho) = match rows.last() {
            Some(prev) => {
                let lh = (prev.h / h).ln();
                (Some((prev.error_u / error_u).ln() / lh), Some((prev.error_rho / error_rho).ln() / lh))
            }
            None => (None, None),
        };
        rows.push(MmsRow { nodes: n, h, error_u, error_rho, order_u, order_rho });
    }
    Ok(rows)
}
