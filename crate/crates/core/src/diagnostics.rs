//! Error norms, convergence rates and structural checks on assembled systems.

use rayon::prelude::*;

use crate::assembly::CollocationSystem;
use crate::coeff::CoefficientField;
use crate::error::{Error, Result};
use crate::grid::TensorGrid;
use crate::kernel::{KernelParams, LocalKernel};
use crate::linsolve::SparseMatrix;

/// Slack used by the maximum-principle check.
pub const MAX_PRINCIPLE_SLACK: f64 = 1e-12;

/// Max absolute difference between two nodal vectors.
pub fn linf_error(u_h: &[f64], u_exact: &[f64]) -> Result<f64> {
    if u_h.len() != u_exact.len() {
        return Err(Error::DimensionMismatch {
            expected: u_exact.len(),
            got: u_h.len(),
        });
    }
    Ok(u_h
        .iter()
        .zip(u_exact)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// `rate_k = ln(e_{k−1}/e_k) / ln(N_k/N_{k−1})` for `k ≥ 1`.
pub fn convergence_rate(errors: &[f64], ns: &[f64]) -> Result<Vec<f64>> {
    if errors.len() != ns.len() {
        return Err(Error::DimensionMismatch {
            expected: ns.len(),
            got: errors.len(),
        });
    }
    if errors.len() < 2 {
        return Err(Error::Invalid("at least two levels are needed for a rate".into()));
    }
    for &v in errors.iter().chain(ns) {
        if !(v > 0.0) {
            return Err(Error::NonPositive(v));
        }
    }
    Ok((1..errors.len())
        .map(|k| (errors[k - 1] / errors[k]).ln() / (ns[k] / ns[k - 1]).ln())
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxPrincipleReport {
    pub ok: bool,
    pub min: f64,
    pub max: f64,
    pub bounds: [f64; 2],
}

/// Checks `lo − s ≤ u ≤ hi + s` with `s = 1e-12 max(1, hi − lo)`.
pub fn max_principle_report(solution: &[f64], bounds: [f64; 2]) -> MaxPrincipleReport {
    let min = solution.iter().copied().fold(f64::INFINITY, f64::min);
    let max = solution.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let slack = MAX_PRINCIPLE_SLACK * (bounds[1] - bounds[0]).max(1.0);
    let ok = solution.iter().all(|v| v.is_finite()) && min >= bounds[0] - slack && max <= bounds[1] + slack;
    MaxPrincipleReport { ok, min, max, bounds }
}

/// Bounds implied by the sign of `f`: `f ≤ 0` caps the solution by `max g`,
/// `f ≥ 0` keeps it above `min g`, and a mixed sign gives no bound on that side.
pub fn max_principle_bounds(f: &[f64], g: &[f64]) -> [f64; 2] {
    let gmin = g.iter().copied().fold(f64::INFINITY, f64::min);
    let gmax = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let fnonpos = f.iter().all(|v| *v <= 0.0);
    let fnonneg = f.iter().all(|v| *v >= 0.0);
    let lo = if fnonneg { gmin } else { f64::NEG_INFINITY };
    let hi = if fnonpos { gmax } else { f64::INFINITY };
    [lo, hi]
}

/// Nodal weights `∫ φ_i` of the interior nodes.
pub fn interior_weights(grid: &TensorGrid) -> Vec<f64> {
    grid.interior_nodes()
        .iter()
        .map(|&n| crate::grid::hat_support_integral(grid, grid.node_index(n)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MassBalance {
    /// `Σ_i w_i Σ_{collar j} (−b_ij)(u_i − g_j)`.
    pub flux: f64,
    /// `Σ_i w_i f_i`.
    pub source: f64,
    pub residual: f64,
}

/// Discrete mass balance: the interior-interior exchange cancels when
/// `w_i b_ij` is symmetric, so only the flux through the collar must match the
/// integrated source.
pub fn mass_conservation_check(
    system: &CollocationSystem,
    field: &CoefficientField,
    u_interior: &[f64],
    g_collar: &[f64],
    f_interior: &[f64],
) -> Result<MassBalance> {
    if !field.is_constant() {
        return Err(Error::NonConstantCoefficient);
    }
    let grid = system.grid();
    for (v, n) in [(u_interior.len(), grid.num_interior()), (f_interior.len(), grid.num_interior()), (g_collar.len(), grid.num_collar())] {
        if v != n {
            return Err(Error::DimensionMismatch { expected: n, got: v });
        }
    }
    let w = interior_weights(grid);
    let flux: f64 = (0..system.num_rows())
        .into_par_iter()
        .map(|r| {
            let ui = u_interior[r];
            let s: f64 = system
                .row_entries(r)
                .filter(|(j, _)| !grid.is_interior(*j))
                .map(|(j, b)| -b * (ui - g_collar[grid.slot(j)]))
                .sum();
            w[r] * s
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    let source: f64 = w.iter().zip(f_interior).map(|(a, b)| a * b).sum();
    Ok(MassBalance {
        flux,
        source,
        residual: (flux - source).abs(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsymmetryProbe {
    /// Interior node flat index and its estimate of `∫ (γ(x,y) − γ(y,x)) / 2 dy`.
    pub values: Vec<(usize, f64)>,
    /// Lattice points where `A` could not be evaluated and were left out.
    pub skipped: usize,
}

/// Nodal-quadrature estimate of the kernel asymmetry integral at each sampled
/// interior node, summing over the ball of radius `δ √(χ² Λ)` which holds both
/// `B(x)` and every `y` whose own region reaches `x`.
pub fn asymmetry_condition_probe(
    grid: &TensorGrid,
    field: &CoefficientField,
    params: &KernelParams,
    sample_nodes: &[usize],
) -> Result<AsymmetryProbe> {
    let dim = grid.dim();
    if field.is_constant() {
        for &n in sample_nodes {
            if !grid.is_interior(n) {
                return Err(Error::NotInterior { node: n });
            }
        }
        return Ok(AsymmetryProbe {
            values: sample_nodes.iter().map(|&n| (n, 0.0)).collect(),
            skipped: 0,
        });
    }
    let lam = field.lambda_max();
    let ball = crate::coeff::SpdMatrix::identity(dim).scaled(lam)?;
    let ball_inv = ball.inverse()?;
    let extents = vec![params.delta * (params.chi2 * lam).sqrt(); dim];
    let mut values = Vec::with_capacity(sample_nodes.len());
    let mut skipped = 0;
    for &n in sample_nodes {
        if !grid.is_interior(n) {
            return Err(Error::NotInterior { node: n });
        }
        let x = grid.coord(n);
        let here = LocalKernel::at(params, field, &x[..dim])?;
        let mut sum = 0.0;
        let mut failure: Option<Error> = None;
        grid.visit_ellipsoid(n, &ball_inv, &extents, params.radius2(), |j, z, _| {
            if j == n || failure.is_some() {
                return;
            }
            let y = grid.coord(j);
            let there = match LocalKernel::at(params, field, &y[..dim]) {
                Ok(k) => k,
                Err(e) if matches!(e.root(), Error::NotSpd(_)) => {
                    skipped += 1;
                    return;
                }
                Err(e) => {
                    failure = Some(e);
                    return;
                }
            };
            let forward = here.truncated(&z[..dim]);
            let back: Vec<f64> = z[..dim].iter().map(|v| -v).collect();
            let backward = there.truncated(&back);
            sum += 0.5 * (forward - backward) * crate::grid::hat_support_integral(grid, grid.node_index(j));
        });
        if let Some(e) = failure {
            return Err(e);
        }
        values.push((n, sum));
    }
    Ok(AsymmetryProbe { values, skipped })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MMatrixReport {
    pub ok: bool,
    pub rows: usize,
    pub min_diag: f64,
    pub max_offdiag: f64,
    /// Largest `|row sum| / Σ|b_ij|` over rows, collar columns included.
    pub max_row_sum_defect: f64,
    /// Rows whose interior-only sum is strictly positive.
    pub dominant_rows: usize,
    pub violation: Option<String>,
}

const ROW_SUM_RTOL: f64 = 1e-12;

fn finish_report(
    rows: usize,
    min_diag: f64,
    max_offdiag: f64,
    max_defect: f64,
    dominant_rows: usize,
) -> MMatrixReport {
    let violation = if !(min_diag > 0.0) {
        Some(format!("nonpositive diagonal {min_diag:e}"))
    } else if max_offdiag > 0.0 {
        Some(format!("positive off-diagonal {max_offdiag:e}"))
    } else if !(max_defect <= ROW_SUM_RTOL) {
        Some(format!("row sum defect {max_defect:e}"))
    } else if dominant_rows == 0 {
        Some("no row is strictly diagonally dominant on the interior block".into())
    } else {
        None
    };
    MMatrixReport {
        ok: violation.is_none(),
        rows,
        min_diag,
        max_offdiag,
        max_row_sum_defect: max_defect,
        dominant_rows,
        violation,
    }
}

/// Sign pattern, zero row sums and weak diagonal dominance of an assembled system.
pub fn m_matrix_report(system: &CollocationSystem) -> MMatrixReport {
    let (min_diag, max_off, max_defect) = (0..system.num_rows())
        .into_par_iter()
        .map(|r| {
            let st = system.stencil(r);
            let off_max = st.coeffs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = st.diag + st.coeffs.iter().sum::<f64>();
            let scale: f64 = st.diag.abs() + st.coeffs.iter().map(|c| c.abs()).sum::<f64>();
            (st.diag, off_max, if scale > 0.0 { sum.abs() / scale } else { f64::INFINITY })
        })
        .reduce(
            || (f64::INFINITY, f64::NEG_INFINITY, 0.0),
            |a, b| (a.0.min(b.0), a.1.max(b.1), a.2.max(b.2)),
        );
    let dominant = (0..system.num_rows())
        .into_par_iter()
        .filter(|&r| {
            let st = system.stencil(r);
            let scale: f64 = st.diag.abs() + st.coeffs.iter().map(|c| c.abs()).sum::<f64>();
            system.interior_row_sum(r) > ROW_SUM_RTOL * scale
        })
        .count();
    finish_report(system.num_rows(), min_diag, max_off, max_defect, dominant)
}

/// Same checks on an explicit interior block and optional collar block.
pub fn m_matrix_report_csr(interior: &SparseMatrix, boundary: Option<&SparseMatrix>) -> MMatrixReport {
    let mut min_diag = f64::INFINITY;
    let mut max_off = f64::NEG_INFINITY;
    let mut max_defect: f64 = 0.0;
    let mut dominant = 0;
    for r in 0..interior.nrows() {
        let (cols, vals) = interior.row(r);
        let mut diag = 0.0;
        let mut inner = 0.0;
        let mut scale = 0.0;
        for (c, v) in cols.iter().zip(vals) {
            if *c as usize == r {
                diag += v;
            } else {
                max_off = max_off.max(*v);
            }
            inner += v;
            scale += v.abs();
        }
        let mut total = inner;
        if let Some(b) = boundary {
            let (_, bv) = b.row(r);
            for v in bv {
                max_off = max_off.max(*v);
                total += v;
                scale += v.abs();
            }
        }
        min_diag = min_diag.min(diag);
        max_defect = max_defect.max(if scale > 0.0 { total.abs() / scale } else { f64::INFINITY });
        if inner > ROW_SUM_RTOL * scale {
            dominant += 1;
        }
    }
    finish_report(interior.nrows(), min_diag, max_off, max_defect, dominant)
}
