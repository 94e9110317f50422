//! Symmetric sparse matrices in CSR form and a preconditioned conjugate
//! gradient solver for the SPD systems arising in Newton steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed CSR sparsity pattern (both triangles, columns sorted per row).
#[derive(Debug, Clone)]
pub struct Pattern {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
}

impl Pattern {
    /// Builds a pattern from `(row, col)` pairs; the diagonal is always included.
    pub fn from_pairs(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut rows: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for (r, c) in pairs {
            rows[r].push(c);
            rows[c].push(r);
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        row_ptr.push(0);
        for mut r in rows {
            r.sort_unstable();
            r.dedup();
            cols.extend_from_slice(&r);
            row_ptr.push(cols.len());
        }
        Self { n, row_ptr, cols }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    #[inline]
    fn position(&self, r: usize, c: usize) -> usize {
        let lo = self.row_ptr[r];
        let hi = self.row_ptr[r + 1];
        match self.cols[lo..hi].binary_search(&c) {
            Ok(p) => lo + p,
            Err(_) => panic!("entry ({r}, {c}) is outside the sparsity pattern"),
        }
    }
}

/// Symmetric matrix stored as full CSR over a shared [`Pattern`].
#[derive(Debug, Clone)]
pub struct SymCsr<'p> {
    pattern: &'p Pattern,
    vals: Vec<f64>,
}

impl<'p> SymCsr<'p> {
    pub fn zeros(pattern: &'p Pattern) -> Self {
        Self { pattern, vals: vec![0.0; pattern.nnz()] }
    }

    pub fn size(&self) -> usize {
        self.pattern.n
    }

    /// Adds `v` to entry `(r, c)` only; callers add both triangles.
    #[inline]
    pub fn add(&mut self, r: usize, c: usize, v: f64) {
        let p = self.pattern.position(r, c);
        self.vals[p] += v;
    }

    pub fn add_diagonal(&mut self, diag: &[f64]) {
        for (i, d) in diag.iter().enumerate() {
            self.add(i, i, *d);
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.pattern.n).map(|i| self.vals[self.pattern.position(i, i)]).collect()
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        let pat = self.pattern;
        for r in 0..pat.n {
            let mut acc = 0.0;
            for p in pat.row_ptr[r]..pat.row_ptr[r + 1] {
                acc += self.vals[p] * x[pat.cols[p]];
            }
            y[r] = acc;
        }
    }

    /// Largest relative asymmetry `|a_rc - a_cr| / max|a|`.
    pub fn asymmetry(&self) -> f64 {
        let pat = self.pattern;
        let scale = self.vals.iter().map(|v| v.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let mut worst = 0.0f64;
        for r in 0..pat.n {
            for p in pat.row_ptr[r]..pat.row_ptr[r + 1] {
                let c = pat.cols[p];
                let q = pat.position(c, r);
                worst = worst.max((self.vals[p] - self.vals[q]).abs() / scale);
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PreconditionerKind {
    Jacobi,
    /// Zero-fill incomplete Cholesky; falls back to Jacobi on breakdown.
    #[default]
    IncompleteCholesky,
}

enum Preconditioner {
    Jacobi(Vec<f64>),
    Ic0 { lower: Vec<(usize, usize, f64)>, row_ptr: Vec<usize>, diag: Vec<f64> },
}

impl Preconditioner {
    fn build(a: &SymCsr, kind: PreconditionerKind) -> Result<Self> {
        let diag = a.diagonal();
        if let Some(i) = diag.iter().position(|d| !(*d > 0.0)) {
            return Err(Error::NotPositiveDefinite(diag[i]));
        }
        if kind == PreconditionerKind::IncompleteCholesky {
            if let Some(p) = Self::ic0(a) {
                return Ok(p);
            }
        }
        Ok(Preconditioner::Jacobi(diag.iter().map(|d| 1.0 / d).collect()))
    }

    /// IC(0): `A ~ L L^T` with `L` restricted to the lower pattern of `A`.
    fn ic0(a: &SymCsr) -> Option<Self> {
        let pat = a.pattern;
        let n = pat.n;
        // strictly-lower entries of each row, in column order
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut lower: Vec<(usize, usize, f64)> = Vec::new();
        row_ptr.push(0);
        for r in 0..n {
            for p in pat.row_ptr[r]..pat.row_ptr[r + 1] {
                let c = pat.cols[p];
                if c < r {
                    lower.push((r, c, a.vals[p]));
                }
            }
            row_ptr.push(lower.len());
        }
        let mut diag = a.diagonal();
        // dense scratch map from column to position in the current row
        let mut marker = vec![usize::MAX; n];
        for r in 0..n {
            let (lo, hi) = (row_ptr[r], row_ptr[r + 1]);
            for p in lo..hi {
                marker[lower[p].1] = p;
            }
            for p in lo..hi {
                let c = lower[p].1;
                // l_rc = (a_rc - sum_{k<c} l_rk l_ck) / l_cc
                let mut s = lower[p].2;
                for q in row_ptr[c]..row_ptr[c + 1] {
                    let k = lower[q].1;
                    let m = marker[k];
                    if m != usize::MAX && m < p {
                        s -= lower[m].2 * lower[q].2;
                    }
                }
                lower[p].2 = s / diag[c];
            }
            let mut d = diag[r];
            for l in &lower[lo..hi] {
                d -= l.2 * l.2;
            }
            for p in lo..hi {
                marker[lower[p].1] = usize::MAX;
            }
            if !(d > 1e-14 * diag[r].abs()) {
                return None;
            }
            diag[r] = d.sqrt();
        }
        Some(Preconditioner::Ic0 { lower, row_ptr, diag })
    }

    fn apply(&self, r: &[f64], z: &mut [f64]) {
        match self {
            Preconditioner::Jacobi(inv) => {
                for i in 0..r.len() {
                    z[i] = inv[i] * r[i];
                }
            }
            Preconditioner::Ic0 { lower, row_ptr, diag } => {
                let n = r.len();
                // forward: L y = r
                for i in 0..n {
                    let mut s = r[i];
                    for p in row_ptr[i]..row_ptr[i + 1] {
                        s -= lower[p].2 * z[lower[p].1];
                    }
                    z[i] = s / diag[i];
                }
                // backward: L^T x = y
                for i in (0..n).rev() {
                    z[i] /= diag[i];
                    let zi = z[i];
                    for p in row_ptr[i]..row_ptr[i + 1] {
                        z[lower[p].1] -= lower[p].2 * zi;
                    }
                }
            }
        }
    }
}

/// Outcome of a conjugate gradient solve.
#[derive(Debug, Clone, Copy)]
pub struct CgOutcome {
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Preconditioned CG for `A x = b` starting from `x = 0`.
///
/// Stops when `|b - A x| <= rel_tol |b|`. A nonpositive curvature `p^T A p`
/// means `A` is not SPD and is reported as an error.
pub fn pcg(
    a: &SymCsr,
    b: &[f64],
    kind: PreconditionerKind,
    rel_tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, CgOutcome)> {
    let n = a.size();
    let mut x = vec![0.0; n];
    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 {
        return Ok((x, CgOutcome { iterations: 0, relative_residual: 0.0, converged: true }));
    }
    let pre = Preconditioner::build(a, kind)?;
    let mut r = b.to_vec();
    let mut z = vec![0.0; n];
    pre.apply(&r, &mut z);
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut rel = 1.0;
    for it in 1..=max_iter {
        a.matvec(&p, &mut ap);
        let curv = dot(&p, &ap);
        if !(curv > 0.0) {
            return Err(Error::NotPositiveDefinite(curv));
        }
        let alpha = rz / curv;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        rel = dot(&r, &r).sqrt() / bnorm;
        if rel <= rel_tol {
            return Ok((x, CgOutcome { iterations: it, relative_residual: rel, converged: true }));
        }
        pre.apply(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Ok((x, CgOutcome { iterations: max_iter, relative_residual: rel, converged: false }))
}
