//! Rectangular node grids in one or two dimensions with homogeneous-Neumann
//! mimetic difference operators.
//!
//! Scalars live on nodes, fluxes on the edges between adjacent nodes. Node
//! quadrature uses tensor trapezoid weights and each edge carries the weight
//! `h_k * w_other`, which makes [`divergence`] the exact negative adjoint of
//! [`gradient`]:
//!
//! ```text
//! sum_nodes w_i (div q)_i v_i = - sum_edges omega_e q_e (grad v)_e
//! ```
//!
//! Boundary-normal fluxes are not stored; they are identically zero.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform rectangular grid `[0, L_x] (x [0, L_y])` sampled at nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    dim: usize,
    extents: [f64; 2],
    nodes: [usize; 2],
    h: [f64; 2],
}

impl Grid {
    pub fn new(extents: &[f64], nodes: &[usize]) -> Result<Self> {
        let dim = extents.len();
        if dim == 0 || dim > 2 || nodes.len() != dim {
            return Err(Error::InvalidParameter(format!(
                "grid must be 1D or 2D with one node count per axis (got {} extents, {} counts)",
                extents.len(),
                nodes.len()
            )));
        }
        let mut ext = [1.0; 2];
        let mut cnt = [1usize; 2];
        let mut h = [1.0; 2];
        for k in 0..dim {
            if !(extents[k].is_finite() && extents[k] > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "grid extent along axis {k} must be positive"
                )));
            }
            if nodes[k] < 3 {
                return Err(Error::InvalidParameter(format!(
                    "grid needs at least 3 nodes along axis {k}"
                )));
            }
            ext[k] = extents[k];
            cnt[k] = nodes[k];
            h[k] = extents[k] / (nodes[k] - 1) as f64;
        }
        Ok(Self { dim, extents: ext, nodes: cnt, h })
    }

    pub fn line(length: f64, nodes: usize) -> Result<Self> {
        Self::new(&[length], &[nodes])
    }

    pub fn rect(lx: f64, ly: f64, nx: usize, ny: usize) -> Result<Self> {
        Self::new(&[lx, ly], &[nx, ny])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn extents(&self) -> &[f64] {
        &self.extents[..self.dim]
    }

    pub fn nodes_per_axis(&self) -> &[usize] {
        &self.nodes[..self.dim]
    }

    pub fn spacing(&self) -> &[f64] {
        &self.h[..self.dim]
    }

    pub fn node_count(&self) -> usize {
        self.nodes[0] * self.nodes[1]
    }

    /// Lebesgue measure of the domain.
    pub fn volume(&self) -> f64 {
        self.extents().iter().product()
    }

    pub fn diameter(&self) -> f64 {
        self.extents().iter().map(|l| l * l).sum::<f64>().sqrt()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nodes[0] + i
    }

    #[inline]
    pub fn ij(&self, k: usize) -> (usize, usize) {
        (k % self.nodes[0], k / self.nodes[0])
    }

    /// Physical coordinates of node `k` (second entry is 0 in 1D).
    pub fn coords(&self, k: usize) -> [f64; 2] {
        let (i, j) = self.ij(k);
        let y = if self.dim == 2 { j as f64 * self.h[1] } else { 0.0 };
        [i as f64 * self.h[0], y]
    }

    /// One-dimensional trapezoid weight of index `i` along `axis`.
    #[inline]
    pub fn axis_weight(&self, axis: usize, i: usize) -> f64 {
        if axis >= self.dim {
            return 1.0;
        }
        let n = self.nodes[axis];
        if i == 0 || i + 1 == n {
            0.5 * self.h[axis]
        } else {
            self.h[axis]
        }
    }

    pub fn node_weight(&self, k: usize) -> f64 {
        let (i, j) = self.ij(k);
        self.axis_weight(0, i) * self.axis_weight(1, j)
    }

    pub fn node_weights(&self) -> Vec<f64> {
        (0..self.node_count()).map(|k| self.node_weight(k)).collect()
    }

    pub fn edge_count(&self, axis: usize) -> usize {
        match axis {
            0 => (self.nodes[0] - 1) * self.nodes[1],
            1 if self.dim == 2 => self.nodes[0] * (self.nodes[1] - 1),
            _ => 0,
        }
    }

    /// Nodes joined by edge `e` along `axis`, in increasing coordinate order.
    #[inline]
    pub fn edge_nodes(&self, axis: usize, e: usize) -> (usize, usize) {
        if axis == 0 {
            let nx = self.nodes[0] - 1;
            let (i, j) = (e % nx, e / nx);
            let k = self.index(i, j);
            (k, k + 1)
        } else {
            (e, e + self.nodes[0])
        }
    }

    /// Quadrature weight attached to edge `e` along `axis`.
    pub fn edge_weight(&self, axis: usize, e: usize) -> f64 {
        if axis == 0 {
            let j = e / (self.nodes[0] - 1);
            self.h[0] * self.axis_weight(1, j)
        } else {
            let i = e % self.nodes[0];
            self.axis_weight(0, i) * self.h[1]
        }
    }

    /// Midpoint coordinates of edge `e` along `axis`.
    pub fn edge_midpoint(&self, axis: usize, e: usize) -> [f64; 2] {
        let (a, b) = self.edge_nodes(axis, e);
        let (pa, pb) = (self.coords(a), self.coords(b));
        [0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]
    }
}

/// One scalar per grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeField {
    grid: Grid,
    values: Vec<f64>,
}

impl NodeField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(Error::GridMismatch(format!(
                "expected {} node values, got {}",
                grid.node_count(),
                values.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("node value {k} is not finite")));
        }
        Ok(Self { grid, values })
    }

    pub(crate) fn from_vec_unchecked(grid: Grid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.node_count());
        Self { grid, values }
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        Self { grid, values: vec![value; grid.node_count()] }
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    /// Samples `f(x)` at every node; `x` has `grid.dim()` entries.
    pub fn from_fn(grid: Grid, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.node_count())
            .map(|k| f(&grid.coords(k)[..grid.dim()]))
            .collect();
        Self { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { grid: self.grid, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &NodeField, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.grid, other.grid);
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Self { grid: self.grid, values }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs_diff(&self, other: &NodeField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Writes `x[,y],value` rows (x fastest) with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let mut buf = String::new();
        buf.push_str(if self.grid.dim == 2 { "x,y,value\n" } else { "x,value\n" });
        for (k, v) in self.values.iter().enumerate() {
            let c = self.grid.coords(k);
            if self.grid.dim == 2 {
                let _ = writeln!(buf, "{:.16e},{:.16e},{:.16e}", c[0], c[1], v);
            } else {
                let _ = writeln!(buf, "{:.16e},{:.16e}", c[0], v);
            }
        }
        out.write_all(buf.as_bytes())?;
        Ok(())
    }

    /// Reads a field written by [`NodeField::write_csv`] onto `grid`.
    pub fn read_csv<R: Read>(grid: Grid, input: R) -> Result<Self> {
        let reader = BufReader::new(input);
        let mut lines = reader.lines();
        let header = lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::Config("empty node-field CSV".into()))?;
        let expected = if grid.dim == 2 { "x,y,value" } else { "x,value" };
        if header.trim() != expected {
            return Err(Error::Config(format!(
                "node-field CSV header must be `{expected}`, got `{}`",
                header.trim()
            )));
        }
        let tol = 1e-9 * grid.extents().iter().cloned().fold(0.0, f64::max);
        let mut values = Vec::with_capacity(grid.node_count());
        for (row, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("CSV row {}: {e}", row + 2)))?;
            if cols.len() != grid.dim + 1 {
                return Err(Error::Config(format!(
                    "CSV row {} has {} columns, expected {}",
                    row + 2,
                    cols.len(),
                    grid.dim + 1
                )));
            }
            let k = values.len();
            if k >= grid.node_count() {
                return Err(Error::GridMismatch("CSV has more rows than grid nodes".into()));
            }
            let c = grid.coords(k);
            if (0..grid.dim).any(|d| (cols[d] - c[d]).abs() > tol) {
                return Err(Error::GridMismatch(format!(
                    "CSV row {} coordinates do not match grid node {k}",
                    row + 2
                )));
            }
            values.push(cols[grid.dim]);
        }
        NodeField::new(grid, values)
    }
}

/// One scalar per interior edge per axis (staggered flux components).
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeField {
    grid: Grid,
    axes: Vec<Vec<f64>>,
}

impl EdgeField {
    pub fn new(grid: Grid, axes: Vec<Vec<f64>>) -> Result<Self> {
        if axes.len() != grid.dim || (0..grid.dim).any(|k| axes[k].len() != grid.edge_count(k)) {
            return Err(Error::GridMismatch("edge component counts do not match grid".into()));
        }
        Ok(Self { grid, axes })
    }

    pub fn zeros(grid: Grid) -> Self {
        let axes = (0..grid.dim).map(|k| vec![0.0; grid.edge_count(k)]).collect();
        Self { grid, axes }
    }

    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, &[f64]) -> f64) -> Self {
        let mut axes = Vec::with_capacity(grid.dim);
        for k in 0..grid.dim {
            let vals = (0..grid.edge_count(k))
                .map(|e| f(k, &grid.edge_midpoint(k, e)[..grid.dim]))
                .collect();
            axes.push(vals);
        }
        Self { grid, axes }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn axis(&self, k: usize) -> &[f64] {
        &self.axes[k]
    }

    pub fn axis_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.axes[k]
    }

    /// Weighted inner product `sum_e omega_e p_e q_e`.
    pub fn dot(&self, other: &EdgeField) -> f64 {
        let mut acc = 0.0;
        for k in 0..self.grid.dim {
            for (e, (a, b)) in self.axes[k].iter().zip(&other.axes[k]).enumerate() {
                acc += self.grid.edge_weight(k, e) * a * b;
            }
        }
        acc
    }

    /// Writes `axis,x[,y],value` rows at edge midpoints.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let mut buf = String::new();
        buf.push_str(if self.grid.dim == 2 { "axis,x,y,value\n" } else { "axis,x,value\n" });
        for k in 0..self.grid.dim {
            for (e, v) in self.axes[k].iter().enumerate() {
                let m = self.grid.edge_midpoint(k, e);
                if self.grid.dim == 2 {
                    let _ = writeln!(buf, "{k},{:.16e},{:.16e},{:.16e}", m[0], m[1], v);
                } else {
                    let _ = writeln!(buf, "{k},{:.16e},{:.16e}", m[0], v);
                }
            }
        }
        out.write_all(buf.as_bytes())?;
        Ok(())
    }
}

/// Difference quotients along each axis; boundary-normal components are zero.
pub fn gradient(u: &NodeField) -> EdgeField {
    let g = u.grid;
    let axes = (0..g.dim)
        .map(|k| {
            let inv_h = 1.0 / g.h[k];
            (0..g.edge_count(k))
                .map(|e| {
                    let (a, b) = g.edge_nodes(k, e);
                    (u.values[b] - u.values[a]) * inv_h
                })
                .collect()
        })
        .collect();
    EdgeField { grid: g, axes }
}

/// Negative adjoint of [`gradient`] under the node and edge quadratures.
pub fn divergence(q: &EdgeField) -> NodeField {
    let g = q.grid;
    let mut out = vec![0.0; g.node_count()];
    divergence_into(&g, |k, e| q.axes[k][e], &mut out);
    NodeField { grid: g, values: out }
}

/// Accumulates the divergence of an edge flux given by `flux(axis, edge)`.
pub(crate) fn divergence_into(g: &Grid, flux: impl Fn(usize, usize) -> f64, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for k in 0..g.dim {
        let inv_h = 1.0 / g.h[k];
        for e in 0..g.edge_count(k) {
            let (a, b) = g.edge_nodes(k, e);
            let w = g.edge_weight(k, e) * flux(k, e) * inv_h;
            out[a] += w;
            out[b] -= w;
        }
    }
    for (k, v) in out.iter_mut().enumerate() {
        *v /= g.node_weight(k);
    }
}

/// `divergence(gradient(u))`.
pub fn laplacian(u: &NodeField) -> NodeField {
    divergence(&gradient(u))
}

/// Trapezoid quadrature of a node field over the domain.
pub fn integrate(u: &NodeField) -> f64 {
    u.values
        .iter()
        .enumerate()
        .map(|(k, v)| u.grid.node_weight(k) * v)
        .sum()
}

/// Discrete `L^p` norm; `p = f64::INFINITY` gives the max norm.
pub fn norm_lp(u: &NodeField, p: f64) -> f64 {
    lp_of_values(&u.grid, &u.values, p)
}

pub(crate) fn lp_of_values(g: &Grid, values: &[f64], p: f64) -> f64 {
    if p.is_infinite() {
        return values.iter().map(|v| v.abs()).fold(0.0, f64::max);
    }
    let s: f64 = values
        .iter()
        .enumerate()
        .map(|(k, v)| g.node_weight(k) * v.abs().powf(p))
        .sum();
    s.powf(1.0 / p)
}

/// Gradient magnitude at nodes: each axis component is the mean of the adjacent
/// edge differences present on that axis.
pub fn nodal_gradient_magnitude(u: &NodeField) -> NodeField {
    let g = u.grid;
    let grad = gradient(u);
    let mut sq = vec![0.0; g.node_count()];
    for k in 0..g.dim {
        let mut sum = vec![0.0; g.node_count()];
        let mut cnt = vec![0u8; g.node_count()];
        for (e, v) in grad.axes[k].iter().enumerate() {
            let (a, b) = g.edge_nodes(k, e);
            sum[a] += v;
            sum[b] += v;
            cnt[a] += 1;
            cnt[b] += 1;
        }
        for n in 0..g.node_count() {
            let c = sum[n] / cnt[n] as f64;
            sq[n] += c * c;
        }
    }
    NodeField { grid: g, values: sq.into_iter().map(f64::sqrt).collect() }
}

/// Discrete `W^{1,p}` norm `(int |u|^p + int |grad u|^p)^(1/p)`.
pub fn w1p_norm(u: &NodeField, p: f64) -> f64 {
    let gm = nodal_gradient_magnitude(u);
    (norm_lp(u, p).powf(p) + norm_lp(&gm, p).powf(p)).powf(1.0 / p)
}

/// Full slope vector reconstruction at every edge.
///
/// The component along the edge is the plain difference quotient; the transverse
/// component is the mean of the four neighbouring transverse differences, and
/// vanishes on boundary rows (reflective ghost nodes).
#[derive(Debug, Clone)]
pub struct SlopeStencil {
    grid: Grid,
    edges: Vec<EdgeSlope>,
}

#[derive(Debug, Clone)]
pub(crate) struct EdgeSlope {
    pub axis: usize,
    pub index: usize,
    pub weight: f64,
    /// `components[c]` lists `(node, coefficient)` for slope component `c`.
    pub components: Vec<Vec<(usize, f64)>>,
}

impl SlopeStencil {
    pub fn new(grid: &Grid) -> Self {
        let g = *grid;
        let mut edges = Vec::new();
        for axis in 0..g.dim {
            for e in 0..g.edge_count(axis) {
                let (a, b) = g.edge_nodes(axis, e);
                let inv_h = 1.0 / g.h[axis];
                let mut components = vec![Vec::new(); g.dim];
                components[axis] = vec![(a, -inv_h), (b, inv_h)];
                if g.dim == 2 {
                    let other = 1 - axis;
                    let (ia, ja) = g.ij(a);
                    let pos = if other == 1 { ja } else { ia };
                    if pos > 0 && pos + 1 < g.nodes[other] {
                        let c = 0.25 / g.h[other];
                        let step = if other == 1 { g.nodes[0] } else { 1 };
                        components[other] = vec![
                            (a + step, c),
                            (a - step, -c),
                            (b + step, c),
                            (b - step, -c),
                        ];
                    }
                }
                edges.push(EdgeSlope { axis, index: e, weight: g.edge_weight(axis, e), components });
            }
        }
        Self { grid: g, edges }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub(crate) fn edges(&self) -> &[EdgeSlope] {
        &self.edges
    }

    /// Slope vector at every edge, flattened with stride `dim` (edges of axis 0 first).
    pub fn slopes(&self, u: &[f64]) -> Vec<f64> {
        let d = self.grid.dim;
        let mut out = vec![0.0; self.edges.len() * d];
        for (n, es) in self.edges.iter().enumerate() {
            for (c, row) in es.components.iter().enumerate() {
                out[n * d + c] = row.iter().map(|&(k, w)| w * u[k]).sum();
            }
        }
        out
    }

    /// `|grad u|^2` at every edge.
    pub fn squared_gradient(&self, u: &NodeField) -> EdgeField {
        let d = self.grid.dim;
        let s = self.slopes(&u.values);
        let mut out = EdgeField::zeros(self.grid);
        for (n, es) in self.edges.iter().enumerate() {
            out.axes[es.axis][es.index] = s[n * d..(n + 1) * d].iter().map(|v| v * v).sum();
        }
        out
    }

    /// Applies `f(slope)` edgewise and keeps the component along each edge.
    pub fn map_longitudinal(&self, u: &NodeField, f: impl Fn(&[f64]) -> Vec<f64>) -> EdgeField {
        let d = self.grid.dim;
        let s = self.slopes(&u.values);
        let mut out = EdgeField::zeros(self.grid);
        for (n, es) in self.edges.iter().enumerate() {
            out.axes[es.axis][es.index] = f(&s[n * d..(n + 1) * d])[es.axis];
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_node(g: Grid, rng: &mut impl Rng) -> NodeField {
        NodeField::from_vec_unchecked(g, (0..g.node_count()).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn random_edge(g: Grid, rng: &mut impl Rng) -> EdgeField {
        EdgeField::from_fn(g, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn grid_validation() {
        assert!(Grid::line(1.0, 2).is_err());
        assert!(Grid::line(0.0, 5).is_err());
        assert!(Grid::new(&[1.0, 1.0, 1.0], &[3, 3, 3]).is_err());
        let g = Grid::rect(2.0, 3.0, 5, 7).unwrap();
        assert_eq!(g.node_count(), 35);
        assert_eq!(g.edge_count(0), 28);
        assert_eq!(g.edge_count(1), 30);
        assert_relative_eq!(g.spacing()[1], 0.5);
    }

    #[test]
    fn gradient_examples() {
        let g = Grid::line(1.0, 11).unwrap();
        let c = NodeField::constant(g, 3.0);
        assert!(gradient(&c).axis(0).iter().all(|&v| v == 0.0));
        let lin = NodeField::from_fn(g, |x| x[0]);
        for v in gradient(&lin).axis(0) {
            assert_relative_eq!(*v, 1.0, epsilon = 1e-12);
        }
        let g2 = Grid::rect(1.0, 2.0, 9, 13).unwrap();
        let lin2 = NodeField::from_fn(g2, |x| x[0] + 2.0 * x[1]);
        let gr = gradient(&lin2);
        assert!(gr.axis(0).iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(gr.axis(1).iter().all(|v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn divergence_and_laplacian_examples() {
        let g = Grid::line(1.0, 17).unwrap();
        assert!(divergence(&EdgeField::zeros(g)).values().iter().all(|&v| v == 0.0));
        let sq = NodeField::from_fn(g, |x| x[0] * x[0]);
        let lap = laplacian(&sq);
        for k in 1..16 {
            assert_relative_eq!(lap.values()[k], 2.0, epsilon = 1e-10);
        }
        let c = NodeField::constant(g, -4.0);
        assert!(laplacian(&c).values().iter().all(|v| v.abs() < 1e-12));
        let g2 = Grid::rect(1.0, 1.0, 9, 9).unwrap();
        let q = NodeField::from_fn(g2, |x| x[0] * x[0] + 3.0 * x[1] * x[1]);
        let lap = laplacian(&q);
        for j in 1..8 {
            for i in 1..8 {
                assert_relative_eq!(lap.values()[g2.index(i, j)], 8.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn adjointness_and_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for g in [Grid::line(1.3, 33).unwrap(), Grid::rect(1.0, 0.7, 17, 11).unwrap()] {
            for _ in 0..10 {
                let q = random_edge(g, &mut rng);
                let v = random_node(g, &mut rng);
                let lhs = integrate(&divergence(&q).zip_map(&v, |a, b| a * b));
                let rhs = -q.dot(&gradient(&v));
                assert!((lhs - rhs).abs() <= 1e-13 * lhs.abs().max(1.0));
                assert!(integrate(&laplacian(&v)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn integrate_examples() {
        let g = Grid::rect(2.0, 3.0, 5, 9).unwrap();
        assert_relative_eq!(integrate(&NodeField::constant(g, 1.0)), 6.0, epsilon = 1e-14);
        assert_eq!(integrate(&NodeField::zeros(g)), 0.0);
        let g1 = Grid::line(1.0, 101).unwrap();
        assert_relative_eq!(integrate(&NodeField::from_fn(g1, |x| x[0])), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn norm_examples() {
        let g = Grid::rect(1.0, 1.0, 7, 7).unwrap();
        assert_eq!(norm_lp(&NodeField::zeros(g), 2.0), 0.0);
        assert_relative_eq!(norm_lp(&NodeField::constant(g, 2.0), 2.0), 2.0, epsilon = 1e-14);
        let g1 = Grid::line(1.0, 101).unwrap();
        let lin = NodeField::from_fn(g1, |x| x[0]);
        assert!((w1p_norm(&lin, 2.0).powi(2) - 4.0 / 3.0).abs() < 1e-3);
        assert_relative_eq!(norm_lp(&lin, f64::INFINITY), 1.0);
    }

    #[test]
    fn slope_reconstruction_exact_for_linear_interior() {
        let g = Grid::rect(1.0, 1.0, 9, 9).unwrap();
        let u = NodeField::from_fn(g, |x| 2.0 * x[0] - 3.0 * x[1]);
        let st = SlopeStencil::new(&g);
        let s = st.slopes(u.values());
        for (n, es) in st.edges().iter().enumerate() {
            let (a, _) = g.edge_nodes(es.axis, es.index);
            let (i, j) = g.ij(a);
            let along = if es.axis == 0 { 2.0 } else { -3.0 };
            assert_relative_eq!(s[2 * n + es.axis], along, epsilon = 1e-12);
            let interior = if es.axis == 0 { j > 0 && j < 8 } else { i > 0 && i < 8 };
            let across = if interior { if es.axis == 0 { -3.0 } else { 2.0 } } else { 0.0 };
            assert_relative_eq!(s[2 * n + 1 - es.axis], across, epsilon = 1e-12);
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Grid::rect(1.0, 2.0, 5, 4).unwrap();
        let u = NodeField::from_vec_unchecked(
            g,
            (0..g.node_count()).map(|_| rng.gen_range(-1e3..1e3) * rng.gen::<f64>()).collect(),
        );
        let mut buf = Vec::new();
        u.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x,y,value\n"));
        let back = NodeField::read_csv(g, &buf[..]).unwrap();
        assert_eq!(back, u);
        let other = Grid::rect(1.0, 2.0, 4, 5).unwrap();
        assert!(NodeField::read_csv(other, &buf[..]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn operators_are_linear(seed in 0u64..1000, alpha in -3.0..3.0f64, beta in -3.0..3.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = Grid::rect(1.0, 1.5, 6, 8).unwrap();
            let u = random_node(g, &mut rng);
            let v = random_node(g, &mut rng);
            let comb = u.zip_map(&v, |a, b| alpha * a + beta * b);
            let lhs = laplacian(&comb);
            let rhs = laplacian(&u).zip_map(&laplacian(&v), |a, b| alpha * a + beta * b);
            let scale = rhs.values().iter().map(|x| x.abs()).fold(1.0, f64::max);
            proptest::prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-13 * scale);
        }

        #[test]
        fn lp_norm_homogeneous_and_triangle(seed in 0u64..1000, c in -5.0..5.0f64, p in 1.0..4.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = Grid::line(2.0, 21).unwrap();
            let u = random_node(g, &mut rng);
            let v = random_node(g, &mut rng);
            let n = norm_lp(&u, p);
            proptest::prop_assert!((norm_lp(&u.map(|x| c * x), p) - c.abs() * n).abs() <= 1e-12 * (1.0 + n));
            let s = norm_lp(&u.zip_map(&v, |a, b| a + b), p);
            proptest::prop_assert!(s <= n + norm_lp(&v, p) + 1e-12);
            let w = w1p_norm(&u, p);
            proptest::prop_assert!((w1p_norm(&u.map(|x| c * x), p) - c.abs() * w).abs() <= 1e-11 * (1.0 + w));
        }
    }
}
