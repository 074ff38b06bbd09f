//! System assembly for the collocation scheme and the quadrature-based
//! finite-difference comparison scheme.
//!
//! Rows are stored as stencils: flat-lattice offsets with coefficients `b_ij`
//! plus the diagonal. For a constant coefficient field, rows whose surrounding
//! cell widths coincide share one stencil, so a uniform grid stores a single
//! stencil regardless of its size. Products scatter the interior vector into a
//! full-lattice vector with the collar entries set to zero (or to the Dirichlet
//! data when forming the right-hand side).

use std::collections::HashMap;
use std::io::Write;

use rayon::prelude::*;

use crate::coeff::{ellipsoid_axis_extents, CoefficientField, SpdMatrix};
use crate::error::{Error, Result};
use crate::grid::TensorGrid;
use crate::kernel::{KernelParams, LocalKernel, INCLUSION_RTOL};
use crate::linsolve::{LinearOperator, SparseMatrix};
use crate::quadrature::gauss_legendre;

/// Gauss–Legendre points per axis and cell in the comparison scheme.
pub const FD_QUADRATURE_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Collocation,
    FdQuadrature,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Collocation => "collocation",
            Scheme::FdQuadrature => "fd-quadrature",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "collocation" => Ok(Scheme::Collocation),
            "fd-quadrature" | "fd" => Ok(Scheme::FdQuadrature),
            other => Err(Error::Invalid(format!("unknown scheme '{other}'"))),
        }
    }
}

/// Off-diagonal entries of one row (or of every row sharing it).
#[derive(Debug, Clone, Default)]
pub struct Stencil {
    /// Flat-lattice offsets `j - i`, ascending.
    pub offsets: Vec<i32>,
    /// `b_ij` for the matching offset; all nonpositive.
    pub coeffs: Vec<f64>,
    /// `b_ii = -Σ_j b_ij`.
    pub diag: f64,
}

#[derive(Debug, Clone)]
pub struct CollocationSystem {
    scheme: Scheme,
    grid: TensorGrid,
    stencils: Vec<Stencil>,
    row_stencil: Vec<u32>,
    rhs: Vec<f64>,
}

impl CollocationSystem {
    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn grid(&self) -> &TensorGrid {
        &self.grid
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    pub fn num_rows(&self) -> usize {
        self.row_stencil.len()
    }

    /// Number of distinct stored stencils.
    pub fn num_stencils(&self) -> usize {
        self.stencils.len()
    }

    pub fn stencil(&self, row: usize) -> &Stencil {
        &self.stencils[self.row_stencil[row] as usize]
    }

    /// Off-diagonal entries `(flat_j, b_ij)` of `row`, collar columns included.
    pub fn row_entries(&self, row: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let node = self.grid.interior_nodes()[row] as i64;
        let st = self.stencil(row);
        st.offsets
            .iter()
            .zip(&st.coeffs)
            .map(move |(o, c)| ((node + *o as i64) as usize, *c))
    }

    /// Stored nonzeros if the rows were expanded (diagonal included).
    pub fn nnz(&self) -> usize {
        self.row_stencil
            .iter()
            .map(|s| self.stencils[*s as usize].offsets.len() + 1)
            .sum()
    }

    /// Full-lattice vector with interior and collar values in place.
    pub fn scatter(&self, interior: &[f64], collar: Option<&[f64]>) -> Vec<f64> {
        let mut full = vec![0.0; self.grid.num_nodes()];
        for (v, &n) in interior.iter().zip(self.grid.interior_nodes()) {
            full[n] = *v;
        }
        if let Some(c) = collar {
            for (v, &n) in c.iter().zip(self.grid.collar_nodes()) {
                full[n] = *v;
            }
        }
        full
    }

    /// `y_r = d_r x_r + Σ_j b_rj full_j` where `x_r` is the interior value at row `r`.
    fn apply_full(&self, full: &[f64], diag_scale: f64, y: &mut [f64]) {
        let nodes = self.grid.interior_nodes();
        y.par_iter_mut().with_min_len(64).enumerate().for_each(|(r, out)| {
            let node = nodes[r];
            let st = &self.stencils[self.row_stencil[r] as usize];
            let mut s = 0.0;
            for (o, c) in st.offsets.iter().zip(&st.coeffs) {
                s += c * full[(node as i64 + *o as i64) as usize];
            }
            *out = diag_scale * st.diag * full[node] + s;
        });
    }

    /// `−Σ_{collar j} b_ij g_j` for every row.
    fn boundary_lift(&self, g: &[f64]) -> Vec<f64> {
        let full = self.scatter(&vec![0.0; self.num_rows()], Some(g));
        let mut y = vec![0.0; self.num_rows()];
        self.apply_full(&full, 0.0, &mut y);
        y.iter().map(|v| -v).collect()
    }

    /// Interior block as a CSR matrix with columns numbered by interior slot.
    pub fn to_csr(&self) -> SparseMatrix {
        let rows: Vec<Vec<(u32, f64)>> = (0..self.num_rows())
            .into_par_iter()
            .map(|r| {
                let me = self.grid.interior_nodes()[r];
                let mut row = Vec::new();
                let mut placed = false;
                for (j, b) in self.row_entries(r) {
                    if !self.grid.is_interior(j) {
                        continue;
                    }
                    if !placed && j > me {
                        row.push((r as u32, self.stencil(r).diag));
                        placed = true;
                    }
                    row.push((self.grid.slot(j) as u32, b));
                }
                if !placed {
                    row.push((r as u32, self.stencil(r).diag));
                }
                row
            })
            .collect();
        SparseMatrix::from_sorted_rows(self.num_rows(), rows).expect("stencil columns are sorted")
    }

    /// Interior-to-collar coupling block, columns numbered by collar slot.
    pub fn boundary_csr(&self) -> SparseMatrix {
        let rows: Vec<Vec<(u32, f64)>> = (0..self.num_rows())
            .into_par_iter()
            .map(|r| {
                self.row_entries(r)
                    .filter(|(j, _)| !self.grid.is_interior(*j))
                    .map(|(j, b)| (self.grid.slot(j) as u32, b))
                    .collect()
            })
            .collect();
        SparseMatrix::from_sorted_rows(self.grid.num_collar(), rows).expect("stencil columns are sorted")
    }

    /// Sum of the interior-column entries of `row`, diagonal included.
    pub fn interior_row_sum(&self, row: usize) -> f64 {
        self.stencil(row).diag
            + self
                .row_entries(row)
                .filter(|(j, _)| self.grid.is_interior(*j))
                .map(|(_, b)| b)
                .sum::<f64>()
    }

    /// Writes the interior block as `row col value` lines (zero-based).
    pub fn write_triplets<W: Write>(&self, mut out: W) -> Result<()> {
        for r in 0..self.num_rows() {
            let me = self.grid.interior_nodes()[r];
            let mut wrote_diag = false;
            for (j, b) in self.row_entries(r) {
                if !self.grid.is_interior(j) {
                    continue;
                }
                if !wrote_diag && j > me {
                    writeln!(out, "{r} {r} {:.16e}", self.stencil(r).diag)?;
                    wrote_diag = true;
                }
                writeln!(out, "{r} {} {:.16e}", self.grid.slot(j), b)?;
            }
            if !wrote_diag {
                writeln!(out, "{r} {r} {:.16e}", self.stencil(r).diag)?;
            }
        }
        Ok(())
    }
}

impl LinearOperator for CollocationSystem {
    fn nrows(&self) -> usize {
        self.num_rows()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let full = self.scatter(x, None);
        self.apply_full(&full, 1.0, y);
    }

    fn diagonal(&self) -> Vec<f64> {
        self.row_stencil.iter().map(|s| self.stencils[*s as usize].diag).collect()
    }

    fn norm_inf(&self) -> f64 {
        (0..self.num_rows())
            .into_par_iter()
            .map(|r| {
                self.stencil(r).diag.abs()
                    + self
                        .row_entries(r)
                        .filter(|(j, _)| self.grid.is_interior(*j))
                        .map(|(_, b)| b.abs())
                        .sum::<f64>()
            })
            .reduce(|| 0.0, f64::max)
    }
}

/// `W(z) = |z|₂² / |z|₁`.
pub fn fd_weight(z: &[f64]) -> f64 {
    let l1: f64 = z.iter().map(|v| v.abs()).sum();
    if l1 == 0.0 {
        return 0.0;
    }
    z.iter().map(|v| v * v).sum::<f64>() / l1
}

pub fn assemble_collocation(
    grid: &TensorGrid,
    field: &CoefficientField,
    params: &KernelParams,
    f_at_nodes: &[f64],
    g_at_collar: &[f64],
) -> Result<CollocationSystem> {
    assemble(Scheme::Collocation, grid, field, params, f_at_nodes, g_at_collar)
}

pub fn assemble_fd_quadrature(
    grid: &TensorGrid,
    field: &CoefficientField,
    params: &KernelParams,
    f_at_nodes: &[f64],
    g_at_collar: &[f64],
) -> Result<CollocationSystem> {
    assemble(Scheme::FdQuadrature, grid, field, params, f_at_nodes, g_at_collar)
}

pub fn assemble(
    scheme: Scheme,
    grid: &TensorGrid,
    field: &CoefficientField,
    params: &KernelParams,
    f_at_nodes: &[f64],
    g_at_collar: &[f64],
) -> Result<CollocationSystem> {
    if f_at_nodes.len() != grid.num_interior() {
        return Err(Error::DimensionMismatch {
            expected: grid.num_interior(),
            got: f_at_nodes.len(),
        });
    }
    if g_at_collar.len() != grid.num_collar() {
        return Err(Error::DimensionMismatch {
            expected: grid.num_collar(),
            got: g_at_collar.len(),
        });
    }
    if field.dim() != grid.dim() {
        return Err(Error::DimensionMismatch {
            expected: grid.dim(),
            got: field.dim(),
        });
    }
    let (representatives, row_stencil) = stencil_classes(grid, field, params);
    let stencils: Vec<Stencil> = representatives
        .par_iter()
        .map(|&node| {
            let x = grid.coord(node);
            let a = field
                .eval(&x[..grid.dim()])
                .map_err(|e| e.context(format!("coefficient at node {node}")))?;
            let st = match scheme {
                Scheme::Collocation => collocation_stencil(grid, params, node, a)?,
                Scheme::FdQuadrature => fd_stencil(grid, params, node, a)?,
            };
            if st.offsets.is_empty() {
                return Err(Error::NoNeighbors { node });
            }
            if !(st.diag > 0.0) {
                return Err(Error::SingularRow { row: grid.slot(node) });
            }
            Ok(st)
        })
        .collect::<Result<_>>()?;
    let mut system = CollocationSystem {
        scheme,
        grid: grid.clone(),
        stencils,
        row_stencil,
        rhs: Vec::new(),
    };
    let lift = system.boundary_lift(g_at_collar);
    system.rhs = f_at_nodes.iter().zip(&lift).map(|(f, l)| f + l).collect();
    Ok(system)
}

/// Groups interior rows that provably share a stencil. Returns one representative
/// node per class and the class of every row.
fn stencil_classes(grid: &TensorGrid, field: &CoefficientField, params: &KernelParams) -> (Vec<usize>, Vec<u32>) {
    let nodes = grid.interior_nodes();
    let a = match field {
        CoefficientField::Constant(a) => *a,
        _ => return (nodes.to_vec(), (0..nodes.len() as u32).collect()),
    };
    let extents = ellipsoid_axis_extents(&a, params.delta, params.chi2);
    let dim = grid.dim();
    let mut sig_ids: Vec<Vec<u32>> = Vec::with_capacity(dim);
    for k in 0..dim {
        let axis = grid.axis(k);
        let widths: Vec<f64> = axis.windows(2).map(|w| w[1] - w[0]).collect();
        let hmin = widths.iter().cloned().fold(f64::INFINITY, f64::min);
        let reach = (extents[k] / hmin).ceil() as i64 + 1;
        let quantum = 1e-9 * hmin;
        let mut table: HashMap<Vec<i64>, u32> = HashMap::new();
        let ids = (0..axis.len() as i64)
            .map(|l| {
                let sig: Vec<i64> = (l - reach..l + reach)
                    .map(|c| {
                        if c < 0 || c >= widths.len() as i64 {
                            -1
                        } else {
                            (widths[c as usize] / quantum).round() as i64
                        }
                    })
                    .collect();
                let next = table.len() as u32;
                *table.entry(sig).or_insert(next)
            })
            .collect();
        sig_ids.push(ids);
    }
    let mut classes: HashMap<[u32; 3], u32> = HashMap::new();
    let mut reps = Vec::new();
    let row_class = nodes
        .iter()
        .map(|&n| {
            let l = grid.lattice(n);
            let mut key = [0u32; 3];
            for k in 0..dim {
                key[k] = sig_ids[k][l[k]];
            }
            *classes.entry(key).or_insert_with(|| {
                reps.push(n);
                (reps.len() - 1) as u32
            })
        })
        .collect();
    (reps, row_class)
}

fn hat_weight(grid: &TensorGrid, flat: usize) -> f64 {
    let l = grid.lattice(flat);
    (0..grid.dim()).map(|k| grid.hat_axis_weight(k, l[k])).product()
}

/// `b_ij = −γ_α(x_i, x_j) ∫φ_j` over the nodes of the influence ellipsoid.
fn collocation_stencil(grid: &TensorGrid, params: &KernelParams, node: usize, a: SpdMatrix) -> Result<Stencil> {
    let lk = LocalKernel::new(params, a)?;
    let extents = ellipsoid_axis_extents(&a, params.delta, params.chi2);
    let mut st = Stencil::default();
    let mut diag = 0.0;
    grid.visit_ellipsoid(node, &lk.a_inv, &extents, params.radius2(), |j, _, q| {
        if j == node {
            return;
        }
        let b = -lk.gamma_from_metric(q) * hat_weight(grid, j);
        st.offsets.push((j as i64 - node as i64) as i32);
        st.coeffs.push(b);
        diag -= b;
    });
    st.diag = diag;
    Ok(st)
}

/// Comparison scheme: `c_ij = ∫ φ_j(y) W(x_i, y) γ_α(x_i, y) dy / W(x_i, x_j)` with
/// per-cell tensor Gauss–Legendre, `b_ij = −c_ij`.
fn fd_stencil(grid: &TensorGrid, params: &KernelParams, node: usize, a: SpdMatrix) -> Result<Stencil> {
    let dim = grid.dim();
    let lk = LocalKernel::new(params, a)?;
    let extents = ellipsoid_axis_extents(&a, params.delta, params.chi2);
    let xc = grid.coord(node);
    let rule = gauss_legendre(FD_QUADRATURE_ORDER);
    let limit = params.radius2() * (1.0 + INCLUSION_RTOL);

    // cells [c_lo, c_hi) per axis overlapping the bounding box of the ellipsoid
    let mut c_lo = [0usize; 3];
    let mut c_hi = [1usize; 3];
    for k in 0..dim {
        let axis = grid.axis(k);
        let (lo, hi) = (xc[k] - extents[k], xc[k] + extents[k]);
        c_lo[k] = axis.partition_point(|&v| v <= lo).saturating_sub(1);
        c_hi[k] = axis.partition_point(|&v| v < hi).min(axis.len() - 1);
    }
    // node window is one wider than the cell window
    let mut span = [1usize; 3];
    for k in 0..dim {
        span[k] = c_hi[k] - c_lo[k] + 1;
    }
    let mut acc = vec![0.0f64; span[0] * span[1] * span[2]];

    // quadrature points and 1D hat values per axis and cell
    struct AxisPts {
        z: Vec<f64>,
        w: Vec<f64>,
        t: Vec<f64>,
    }
    let axis_points: Vec<Vec<AxisPts>> = (0..dim)
        .map(|k| {
            let axis = grid.axis(k);
            (c_lo[k]..c_hi[k])
                .map(|c| {
                    let (a0, a1) = (axis[c], axis[c + 1]);
                    let half = 0.5 * (a1 - a0);
                    let mut p = AxisPts {
                        z: Vec::new(),
                        w: Vec::new(),
                        t: Vec::new(),
                    };
                    for (n, w) in rule.nodes.iter().zip(&rule.weights) {
                        let y = a0 + half * (1.0 + n);
                        p.z.push(y - xc[k]);
                        p.w.push(half * w);
                        p.t.push((y - a0) / (a1 - a0));
                    }
                    p
                })
                .collect()
        })
        .collect();

    let q = FD_QUADRATURE_ORDER;
    let cells2 = if dim == 3 { c_hi[2] - c_lo[2] } else { 1 };
    let pts2 = if dim == 3 { q } else { 1 };
    let mut z = [0.0f64; 3];
    for c2 in 0..cells2 {
        for c1 in 0..(c_hi[1] - c_lo[1]) {
            for c0 in 0..(c_hi[0] - c_lo[0]) {
                for p2 in 0..pts2 {
                    let (w2, t2) = if dim == 3 {
                        let ap = &axis_points[2][c2];
                        z[2] = ap.z[p2];
                        (ap.w[p2], ap.t[p2])
                    } else {
                        (1.0, 0.0)
                    };
                    for p1 in 0..q {
                        let ap1 = &axis_points[1][c1];
                        z[1] = ap1.z[p1];
                        let (w1, t1) = (ap1.w[p1], ap1.t[p1]);
                        for p0 in 0..q {
                            let ap0 = &axis_points[0][c0];
                            z[0] = ap0.z[p0];
                            let qf = lk.metric(&z[..dim]);
                            if qf > limit {
                                continue;
                            }
                            let (w0, t0) = (ap0.w[p0], ap0.t[p0]);
                            let val = w0 * w1 * w2 * fd_weight(&z[..dim]) * lk.gamma_from_metric(qf);
                            if val == 0.0 {
                                continue;
                            }
                            let t = [t0, t1, t2];
                            let corners = 1usize << dim;
                            for corner in 0..corners {
                                let mut phi = 1.0;
                                let mut idx = 0;
                                let mut mul = 1;
                                let cell = [c0, c1, c2];
                                for k in 0..dim {
                                    let up = (corner >> k) & 1;
                                    phi *= if up == 1 { t[k] } else { 1.0 - t[k] };
                                    idx += (cell[k] + up) * mul;
                                    mul *= span[k];
                                }
                                acc[idx] += val * phi;
                            }
                        }
                    }
                }
            }
        }
    }

    let strides = grid.strides();
    let mut st = Stencil::default();
    let mut diag = 0.0;
    for i2 in 0..span[2] {
        for i1 in 0..span[1] {
            for i0 in 0..span[0] {
                let v = acc[i0 + span[0] * (i1 + span[1] * i2)];
                if v == 0.0 {
                    continue;
                }
                let lat = [c_lo[0] + i0, c_lo[1] + i1, c_lo[2] + i2];
                let mut flat = 0;
                let mut zj = [0.0; 3];
                for k in 0..dim {
                    flat += lat[k] * strides[k];
                    zj[k] = grid.axis(k)[lat[k]] - xc[k];
                }
                if flat == node {
                    continue;
                }
                let c = v / fd_weight(&zj[..dim]);
                st.offsets.push((flat as i64 - node as i64) as i32);
                st.coeffs.push(-c);
                diag += c;
            }
        }
    }
    st.diag = diag;
    Ok(st)
}

/// `B u_interior + B_c u_collar`.
pub fn apply_operator(system: &CollocationSystem, u_interior: &[f64], u_collar: &[f64]) -> Result<Vec<f64>> {
    if u_interior.len() != system.num_rows() {
        return Err(Error::DimensionMismatch {
            expected: system.num_rows(),
            got: u_interior.len(),
        });
    }
    if u_collar.len() != system.grid.num_collar() {
        return Err(Error::DimensionMismatch {
            expected: system.grid.num_collar(),
            got: u_collar.len(),
        });
    }
    let full = system.scatter(u_interior, Some(u_collar));
    let mut y = vec![0.0; system.num_rows()];
    system.apply_full(&full, 1.0, &mut y);
    Ok(y)
}
