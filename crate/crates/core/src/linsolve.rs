//! Sparse storage and Krylov solvers for the nonsymmetric M-matrix systems.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Anything that can apply a square matrix to a vector.
pub trait LinearOperator: Sync {
    fn nrows(&self) -> usize;
    /// `y = A x`.
    fn apply(&self, x: &[f64], y: &mut [f64]);
    fn diagonal(&self) -> Vec<f64>;
    /// Maximum absolute row sum.
    fn norm_inf(&self) -> f64;
}

/// Compressed sparse row matrix with sorted, unique column indices per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    offsets: Vec<usize>,
    cols: Vec<u32>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Result<Self> {
        for &(r, c, _) in &triplets {
            if r >= nrows || c >= ncols {
                return Err(Error::Invalid(format!("entry ({r}, {c}) outside {nrows}x{ncols}")));
            }
        }
        triplets.sort_by_key(|a| (a.0, a.1));
        let mut offsets = vec![0usize; nrows + 1];
        let mut cols: Vec<u32> = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            cols.push(c as u32);
            values.push(v);
            offsets[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..nrows {
            offsets[r + 1] += offsets[r];
        }
        Ok(SparseMatrix {
            nrows,
            ncols,
            offsets,
            cols,
            values,
        })
    }

    /// Builds from per-row `(col, value)` lists that are already sorted by column.
    pub fn from_sorted_rows(ncols: usize, rows: Vec<Vec<(u32, f64)>>) -> Result<Self> {
        let nrows = rows.len();
        let mut offsets = Vec::with_capacity(nrows + 1);
        offsets.push(0);
        let nnz = rows.iter().map(Vec::len).sum();
        let mut cols = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        for (r, row) in rows.into_iter().enumerate() {
            for (k, &(c, v)) in row.iter().enumerate() {
                if c as usize >= ncols || (k > 0 && row[k - 1].0 >= c) {
                    return Err(Error::Invalid(format!("row {r}: columns must be sorted, unique, and < {ncols}")));
                }
                cols.push(c);
                values.push(v);
            }
            offsets.push(cols.len());
        }
        Ok(SparseMatrix {
            nrows,
            ncols,
            offsets,
            cols,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            nrows: n,
            ncols: n,
            offsets: (0..=n).collect(),
            cols: (0..n as u32).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        let ncols = rows.first().map_or(0, Vec::len);
        let trip = rows
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().enumerate().filter(|(_, v)| **v != 0.0).map(move |(j, v)| (i, j, *v)))
            .collect();
        Self::from_triplets(rows.len(), ncols, trip).expect("dense input is in range")
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> (&[u32], &[f64]) {
        let (a, b) = (self.offsets[r], self.offsets[r + 1]);
        (&self.cols[a..b], &self.values[a..b])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&(c as u32)) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.ncols]; self.nrows];
        for (r, row) in out.iter_mut().enumerate() {
            let (cols, vals) = self.row(r);
            for (c, v) in cols.iter().zip(vals) {
                row[*c as usize] = *v;
            }
        }
        out
    }

    /// Iterates `(row, col, value)` over stored entries.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |r| {
            let (cols, vals) = self.row(r);
            cols.iter().zip(vals).map(move |(c, v)| (r, *c as usize, *v))
        })
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.ncols {
            return Err(Error::DimensionMismatch {
                expected: self.ncols,
                got: v.len(),
            });
        }
        let mut y = vec![0.0; self.nrows];
        self.matvec_into(v, &mut y);
        Ok(y)
    }

    fn matvec_into(&self, v: &[f64], y: &mut [f64]) {
        y.par_iter_mut().with_min_len(256).enumerate().for_each(|(r, out)| {
            let (cols, vals) = self.row(r);
            *out = cols.iter().zip(vals).map(|(c, a)| a * v[*c as usize]).sum();
        });
    }
}

impl LinearOperator for SparseMatrix {
    fn nrows(&self) -> usize {
        self.nrows
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.matvec_into(x, y);
    }

    fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows).map(|r| self.get(r, r)).collect()
    }

    fn norm_inf(&self) -> f64 {
        (0..self.nrows)
            .map(|r| self.row(r).1.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

pub fn matvec(matrix: &SparseMatrix, v: &[f64]) -> Result<Vec<f64>> {
    matrix.matvec(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    BiCgStab,
    Gmres,
    ConjugateGradient,
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub restart: usize,
    /// True residual is recomputed every this many iterations.
    pub check_every: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-12,
            max_iter: 20_000,
            restart: 60,
            check_every: 50,
        }
    }
}

impl SolveOptions {
    pub fn with_tol(tol: f64) -> Self {
        SolveOptions {
            tol,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolveReport {
    pub method: Method,
    pub iterations: usize,
    /// `‖b - A x‖∞` of the returned solution.
    pub residual: f64,
    pub rhs_norm: f64,
    pub operator_norm: f64,
    pub solution_norm: f64,
}

impl SolveReport {
    /// `‖r‖∞ ≤ tol (‖b‖∞ + ‖A‖∞ ‖x‖∞)`.
    pub fn satisfies_contract(&self, tol: f64) -> bool {
        self.residual <= tol * (self.rhs_norm + self.operator_norm * self.solution_norm)
    }
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Tracks the true residual and decides when to stop.
struct Monitor {
    tol: f64,
    bnorm: f64,
    anorm: f64,
    last: f64,
}

enum Verdict {
    Converged(f64),
    Continue(f64),
}

impl Monitor {
    fn check<A: LinearOperator + ?Sized>(&mut self, op: &A, b: &[f64], x: &[f64], scratch: &mut [f64]) -> Verdict {
        op.apply(x, scratch);
        let r = b.iter().zip(scratch.iter()).fold(0.0f64, |m, (bi, ai)| m.max((bi - ai).abs()));
        let strict = r <= self.tol * self.bnorm;
        let contract = r <= self.tol * (self.bnorm + self.anorm * norm_inf(x));
        let stalled = r > 0.5 * self.last;
        self.last = self.last.min(r);
        if strict || (contract && stalled) {
            Verdict::Converged(r)
        } else {
            Verdict::Continue(r)
        }
    }
}

fn check_inputs<A: LinearOperator + ?Sized>(op: &A, b: &[f64], tol: f64) -> Result<Vec<f64>> {
    if b.len() != op.nrows() {
        return Err(Error::DimensionMismatch {
            expected: op.nrows(),
            got: b.len(),
        });
    }
    if !(tol > 0.0) {
        return Err(Error::Invalid(format!("tolerance must be positive, got {tol}")));
    }
    let diag = op.diagonal();
    if let Some(row) = diag.iter().position(|d| *d == 0.0 || !d.is_finite()) {
        return Err(Error::SingularRow { row });
    }
    Ok(diag.iter().map(|d| 1.0 / d).collect())
}

fn report(method: Method, iterations: usize, residual: f64, bnorm: f64, anorm: f64, x: &[f64]) -> SolveReport {
    SolveReport {
        method,
        iterations,
        residual,
        rhs_norm: bnorm,
        operator_norm: anorm,
        solution_norm: norm_inf(x),
    }
}

/// Solves `A x = b`: Jacobi-preconditioned BiCGStab, falling back to restarted
/// GMRES if BiCGStab breaks down or runs out of iterations.
pub fn solve<A: LinearOperator + ?Sized>(op: &A, b: &[f64], opts: &SolveOptions) -> Result<(Vec<f64>, SolveReport)> {
    let dinv = check_inputs(op, b, opts.tol)?;
    let n = b.len();
    let bnorm = norm_inf(b);
    let anorm = op.norm_inf();
    if bnorm == 0.0 {
        return Ok((vec![0.0; n], report(Method::BiCgStab, 0, 0.0, 0.0, anorm, &[])));
    }
    match bicgstab(op, b, &dinv, bnorm, anorm, opts) {
        Ok(out) => Ok(out),
        Err(Error::Breakdown { .. }) | Err(Error::NotConverged { .. }) => gmres(op, b, &dinv, bnorm, anorm, opts),
        Err(e) => Err(e),
    }
}

/// Right-preconditioned BiCGStab from a zero initial guess.
fn bicgstab<A: LinearOperator + ?Sized>(
    op: &A,
    b: &[f64],
    dinv: &[f64],
    bnorm: f64,
    anorm: f64,
    opts: &SolveOptions,
) -> Result<(Vec<f64>, SolveReport)> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let r0 = r.clone();
    let mut p = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut ph = vec![0.0; n];
    let mut sh = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    let (mut rho, mut alpha, mut omega) = (1.0f64, 1.0f64, 1.0f64);
    let mut monitor = Monitor {
        tol: opts.tol,
        bnorm,
        anorm,
        last: f64::INFINITY,
    };
    let r0norm = norm2(&r0);
    let mut residual = bnorm;
    for it in 1..=opts.max_iter {
        let rho_new = dot(&r0, &r);
        if rho_new.abs() < 1e-300 || rho_new.abs() < 1e-30 * r0norm * norm2(&r) {
            return Err(Error::Breakdown {
                iterations: it,
                reason: "rho vanished".into(),
            });
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
            ph[i] = dinv[i] * p[i];
        }
        op.apply(&ph, &mut v);
        let denom = dot(&r0, &v);
        if denom == 0.0 || !denom.is_finite() {
            return Err(Error::Breakdown {
                iterations: it,
                reason: "r0·v vanished".into(),
            });
        }
        alpha = rho / denom;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
            x[i] += alpha * ph[i];
        }
        for i in 0..n {
            sh[i] = dinv[i] * s[i];
        }
        op.apply(&sh, &mut t);
        let tt = dot(&t, &t);
        if tt == 0.0 {
            // s is already zero
            omega = 0.0;
        } else {
            omega = dot(&t, &s) / tt;
        }
        for i in 0..n {
            x[i] += omega * sh[i];
            r[i] = s[i] - omega * t[i];
        }
        let cheap = norm_inf(&r);
        if it % opts.check_every == 0 || cheap <= opts.tol * bnorm || omega == 0.0 {
            match monitor.check(op, b, &x, &mut scratch) {
                Verdict::Converged(res) => return Ok((x.clone(), report(Method::BiCgStab, it, res, bnorm, anorm, &x))),
                Verdict::Continue(res) => {
                    residual = res;
                    // resynchronize the recursive residual with the true one
                    for i in 0..n {
                        r[i] = b[i] - scratch[i];
                    }
                }
            }
            if omega == 0.0 {
                return Err(Error::Breakdown {
                    iterations: it,
                    reason: "omega vanished".into(),
                });
            }
        }
        if !omega.is_finite() || !alpha.is_finite() {
            return Err(Error::Breakdown {
                iterations: it,
                reason: "non-finite step".into(),
            });
        }
    }
    Err(Error::NotConverged {
        iterations: opts.max_iter,
        residual,
    })
}

/// Right-preconditioned restarted GMRES(m) from a zero initial guess.
fn gmres<A: LinearOperator + ?Sized>(
    op: &A,
    b: &[f64],
    dinv: &[f64],
    bnorm: f64,
    anorm: f64,
    opts: &SolveOptions,
) -> Result<(Vec<f64>, SolveReport)> {
    let n = b.len();
    let m = opts.restart.max(1);
    let mut x = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut monitor = Monitor {
        tol: opts.tol,
        bnorm,
        anorm,
        last: f64::INFINITY,
    };
    let mut iterations = 0;
    let mut residual = bnorm;
    let mut since_check = 0;
    while iterations < opts.max_iter {
        op.apply(&x, &mut scratch);
        let r: Vec<f64> = b.iter().zip(&scratch).map(|(bi, ai)| bi - ai).collect();
        let beta = norm2(&r);
        if beta == 0.0 {
            return Ok((x.clone(), report(Method::Gmres, iterations, 0.0, bnorm, anorm, &x)));
        }
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
        basis.push(r.iter().map(|v| v / beta).collect());
        let mut h = vec![vec![0.0f64; m]; m + 1];
        let (mut cs, mut sn) = (vec![0.0f64; m], vec![0.0f64; m]);
        let mut g = vec![0.0f64; m + 1];
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..m {
            for i in 0..n {
                z[i] = dinv[i] * basis[k][i];
            }
            op.apply(&z, &mut w);
            // modified Gram–Schmidt
            for (j, q) in basis.iter().enumerate() {
                let hj = dot(&w, q);
                h[j][k] = hj;
                for i in 0..n {
                    w[i] -= hj * q[i];
                }
            }
            let hn = norm2(&w);
            h[k + 1][k] = hn;
            for j in 0..k {
                let tmp = cs[j] * h[j][k] + sn[j] * h[j + 1][k];
                h[j + 1][k] = -sn[j] * h[j][k] + cs[j] * h[j + 1][k];
                h[j][k] = tmp;
            }
            let denom = h[k][k].hypot(h[k + 1][k]);
            if denom == 0.0 {
                return Err(Error::Breakdown {
                    iterations,
                    reason: "GMRES Hessenberg column vanished".into(),
                });
            }
            cs[k] = h[k][k] / denom;
            sn[k] = h[k + 1][k] / denom;
            h[k][k] = denom;
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            k_used = k + 1;
            iterations += 1;
            since_check += 1;
            if hn == 0.0 || g[k + 1].abs() <= 0.1 * opts.tol * bnorm || iterations >= opts.max_iter {
                break;
            }
            basis.push(w.iter().map(|v| v / hn).collect());
        }
        // back substitution for the least-squares coefficients
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let mut s = g[i];
            for j in i + 1..k_used {
                s -= h[i][j] * y[j];
            }
            y[i] = s / h[i][i];
        }
        for (j, yj) in y.iter().enumerate() {
            for i in 0..n {
                x[i] += dinv[i] * yj * basis[j][i];
            }
        }
        if since_check >= opts.check_every || iterations >= opts.max_iter || k_used < m {
            since_check = 0;
            match monitor.check(op, b, &x, &mut scratch) {
                Verdict::Converged(res) => return Ok((x.clone(), report(Method::Gmres, iterations, res, bnorm, anorm, &x))),
                Verdict::Continue(res) => residual = res,
            }
        }
    }
    Err(Error::NotConverged {
        iterations,
        residual,
    })
}

/// Jacobi-preconditioned conjugate gradients for symmetric positive definite systems.
pub fn conjugate_gradient<A: LinearOperator + ?Sized>(
    op: &A,
    b: &[f64],
    opts: &SolveOptions,
) -> Result<(Vec<f64>, SolveReport)> {
    let dinv = check_inputs(op, b, opts.tol)?;
    let n = b.len();
    let bnorm = norm_inf(b);
    let anorm = op.norm_inf();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok((x, report(Method::ConjugateGradient, 0, 0.0, 0.0, anorm, &[])));
    }
    let mut r = b.to_vec();
    let mut zv: Vec<f64> = r.iter().zip(&dinv).map(|(a, d)| a * d).collect();
    let mut p = zv.clone();
    let mut q = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    let mut rz = dot(&r, &zv);
    let mut monitor = Monitor {
        tol: opts.tol,
        bnorm,
        anorm,
        last: f64::INFINITY,
    };
    let mut residual = bnorm;
    for it in 1..=opts.max_iter {
        op.apply(&p, &mut q);
        let pq = dot(&p, &q);
        if !(pq > 0.0) {
            return Err(Error::Breakdown {
                iterations: it,
                reason: "operator is not positive definite along the search direction".into(),
            });
        }
        let alpha = rz / pq;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        if it % opts.check_every == 0 || norm_inf(&r) <= opts.tol * bnorm {
            match monitor.check(op, b, &x, &mut scratch) {
                Verdict::Converged(res) => {
                    return Ok((x.clone(), report(Method::ConjugateGradient, it, res, bnorm, anorm, &x)))
                }
                Verdict::Continue(res) => residual = res,
            }
        }
        for i in 0..n {
            zv[i] = dinv[i] * r[i];
        }
        let rz_new = dot(&r, &zv);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = zv[i] + beta * p[i];
        }
    }
    Err(Error::NotConverged {
        iterations: opts.max_iter,
        residual,
    })
}
