//! Tensor-product grids covering the solution box plus an interaction collar.

use serde::{Deserialize, Serialize};

use crate::coeff::{CoefficientField, SpdMatrix};
use crate::error::{Error, Result};
use crate::kernel::{KernelParams, INCLUSION_RTOL};

/// Upper bound on collar cells per side unless the caller asks for more.
pub const DEFAULT_MAX_COLLAR: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRole {
    Interior,
    Collar,
}

/// Flat index together with per-axis lattice coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeIndex {
    pub flat: usize,
    pub lattice: [usize; 3],
}

#[derive(Debug, Clone)]
pub struct TensorGrid {
    dim: usize,
    axes: Vec<Vec<f64>>,
    solution_box: Vec<[f64; 2]>,
    /// Lattice index of the lower and upper face of the solution box, per axis.
    inner: Vec<[usize; 2]>,
    collar_cells: Vec<[usize; 2]>,
    dims: [usize; 3],
    strides: [usize; 3],
    hat_axis: Vec<Vec<f64>>,
    interior: Vec<usize>,
    collar: Vec<usize>,
    /// Position of each node in `interior` or `collar`, depending on its role.
    slot: Vec<u32>,
    is_interior: Vec<bool>,
}

impl TensorGrid {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Full coordinate list of axis `k`, collar included.
    pub fn axis(&self, k: usize) -> &[f64] {
        &self.axes[k]
    }

    pub fn solution_box(&self) -> &[[f64; 2]] {
        &self.solution_box
    }

    /// Lattice indices of the solution-box faces along axis `k`.
    pub fn inner_range(&self, k: usize) -> [usize; 2] {
        self.inner[k]
    }

    /// Collar cells added below and above the solution box along axis `k`.
    pub fn collar_cells(&self, k: usize) -> [usize; 2] {
        self.collar_cells[k]
    }

    /// Node counts per axis (unused axes report 1).
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn strides(&self) -> [usize; 3] {
        self.strides
    }

    pub fn num_nodes(&self) -> usize {
        self.slot.len()
    }

    pub fn num_interior(&self) -> usize {
        self.interior.len()
    }

    pub fn num_collar(&self) -> usize {
        self.collar.len()
    }

    /// Flat indices of interior nodes, in flat order.
    pub fn interior_nodes(&self) -> &[usize] {
        &self.interior
    }

    /// Flat indices of collar nodes, in flat order.
    pub fn collar_nodes(&self) -> &[usize] {
        &self.collar
    }

    pub fn role(&self, flat: usize) -> NodeRole {
        if self.is_interior[flat] {
            NodeRole::Interior
        } else {
            NodeRole::Collar
        }
    }

    #[inline]
    pub fn is_interior(&self, flat: usize) -> bool {
        self.is_interior[flat]
    }

    /// Position of the node inside the interior or collar list.
    #[inline]
    pub fn slot(&self, flat: usize) -> usize {
        self.slot[flat] as usize
    }

    #[inline]
    pub fn lattice(&self, flat: usize) -> [usize; 3] {
        let mut out = [0; 3];
        let mut rest = flat;
        for k in (0..self.dim).rev() {
            out[k] = rest / self.strides[k];
            rest %= self.strides[k];
        }
        out
    }

    #[inline]
    pub fn flat(&self, lattice: [usize; 3]) -> usize {
        (0..self.dim).map(|k| lattice[k] * self.strides[k]).sum()
    }

    pub fn node_index(&self, flat: usize) -> NodeIndex {
        NodeIndex {
            flat,
            lattice: self.lattice(flat),
        }
    }

    #[inline]
    pub fn coord(&self, flat: usize) -> [f64; 3] {
        let l = self.lattice(flat);
        let mut x = [0.0; 3];
        for k in 0..self.dim {
            x[k] = self.axes[k][l[k]];
        }
        x
    }

    /// One-dimensional hat integral of lattice index `i` along axis `k`.
    #[inline]
    pub fn hat_axis_weight(&self, k: usize, i: usize) -> f64 {
        self.hat_axis[k][i]
    }

    /// Total volume of the grid box.
    pub fn volume(&self) -> f64 {
        self.axes
            .iter()
            .map(|a| a[a.len() - 1] - a[0])
            .product()
    }

    /// Smallest cell width over all axes.
    pub fn min_width(&self) -> f64 {
        self.axes
            .iter()
            .flat_map(|a| a.windows(2).map(|w| w[1] - w[0]))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn description(&self) -> GridDescription {
        GridDescription {
            domain: self.solution_box.clone(),
            partitions: (0..self.dim)
                .map(|k| self.axes[k][self.inner[k][0]..=self.inner[k][1]].to_vec())
                .collect(),
        }
    }

    /// Visits every node `j` with `(x_j - x_c)ᵀ A⁻¹ (x_j - x_c) ≤ δ²χ²`, the center
    /// included, passing `(flat_j, z = x_j - x_c, q)`. `extents` bounds the
    /// ellipsoid along each axis.
    pub fn visit_ellipsoid<F>(&self, center: usize, a_inv: &SpdMatrix, extents: &[f64], radius2: f64, mut visit: F)
    where
        F: FnMut(usize, &[f64; 3], f64),
    {
        let xc = self.coord(center);
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for k in 0..self.dim {
            let axis = &self.axes[k];
            let pad = extents[k] * (1.0 + 1e-9);
            lo[k] = axis.partition_point(|&v| v < xc[k] - pad);
            hi[k] = axis.partition_point(|&v| v <= xc[k] + pad);
        }
        let limit = radius2 * (1.0 + INCLUSION_RTOL);
        let mut z = [0.0; 3];
        let (k2lo, k2hi) = if self.dim == 3 { (lo[2], hi[2]) } else { (0, 1) };
        for i2 in k2lo..k2hi {
            if self.dim == 3 {
                z[2] = self.axes[2][i2] - xc[2];
            }
            for i1 in lo[1]..hi[1] {
                z[1] = self.axes[1][i1] - xc[1];
                let base = i1 * self.strides[1] + if self.dim == 3 { i2 * self.strides[2] } else { 0 };
                for i0 in lo[0]..hi[0] {
                    z[0] = self.axes[0][i0] - xc[0];
                    let q = a_inv.quadratic_form(&z[..self.dim]);
                    if q <= limit {
                        visit(base + i0, &z, q);
                    }
                }
            }
        }
    }

    /// Locates `y` and returns, per axis, the left lattice index and the local
    /// coordinate in [0, 1] of the containing cell.
    fn locate(&self, y: &[f64]) -> Result<[(usize, f64); 3]> {
        if y.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: y.len(),
            });
        }
        let mut out = [(0usize, 0.0f64); 3];
        for k in 0..self.dim {
            let axis = &self.axes[k];
            let (a, b) = (axis[0], axis[axis.len() - 1]);
            let slack = 1e-12 * (b - a);
            if !(y[k] >= a - slack && y[k] <= b + slack) {
                return Err(Error::OutOfDomain { point: y.to_vec() });
            }
            let v = y[k].clamp(a, b);
            let cell = axis.partition_point(|&c| c <= v).saturating_sub(1).min(axis.len() - 2);
            let t = (v - axis[cell]) / (axis[cell + 1] - axis[cell]);
            out[k] = (cell, t.clamp(0.0, 1.0));
        }
        Ok(out)
    }
}

/// Serializable description: the solution box and the breakpoints inside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDescription {
    pub domain: Vec<[f64; 2]>,
    pub partitions: Vec<Vec<f64>>,
}

impl GridDescription {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Invalid(format!("grid description: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Invalid(format!("grid description: {e}")))
    }
}

/// `n` equal cells on `[lo, hi]`.
pub fn uniform_partition(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let h = (hi - lo) / n as f64;
    let mut v: Vec<f64> = (0..=n).map(|i| lo + i as f64 * h).collect();
    v[n] = hi;
    v
}

/// `n_left` equal cells on `[lo, mid]` followed by `n_right` on `[mid, hi]`.
pub fn split_partition(lo: f64, mid: f64, hi: f64, n_left: usize, n_right: usize) -> Vec<f64> {
    let mut v = uniform_partition(lo, mid, n_left);
    v.extend(uniform_partition(mid, hi, n_right).into_iter().skip(1));
    v
}

/// Collar reach along each axis: `δ√(χ² A_kk)` for constant fields, `δ√(χ² Λ)` otherwise.
pub fn collar_extents(params: &KernelParams, field: &CoefficientField) -> Vec<f64> {
    field
        .axis_bounds()
        .iter()
        .map(|b| params.delta * (params.chi2 * b).sqrt())
        .collect()
}

pub fn build_grid(
    domain: &[[f64; 2]],
    partitions: &[Vec<f64>],
    params: &KernelParams,
    field: &CoefficientField,
) -> Result<TensorGrid> {
    build_grid_with_limit(domain, partitions, params, field, DEFAULT_MAX_COLLAR)
}

pub fn build_grid_with_limit(
    domain: &[[f64; 2]],
    partitions: &[Vec<f64>],
    params: &KernelParams,
    field: &CoefficientField,
    max_collar: usize,
) -> Result<TensorGrid> {
    let dim = field.dim();
    if domain.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: domain.len(),
        });
    }
    if partitions.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: partitions.len(),
        });
    }
    if params.dim != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: params.dim,
        });
    }
    let extents = collar_extents(params, field);
    let mut axes = Vec::with_capacity(dim);
    let mut inner = Vec::with_capacity(dim);
    let mut collar_cells = Vec::with_capacity(dim);
    let mut hat_axis = Vec::with_capacity(dim);
    for k in 0..dim {
        let p = &partitions[k];
        if p.len() < 2 || p.windows(2).any(|w| !(w[1] > w[0])) || p.iter().any(|v| !v.is_finite()) {
            return Err(Error::EmptyPartition { axis: k });
        }
        let [lo, hi] = domain[k];
        let tol = 1e-12 * (hi - lo).abs().max(1.0);
        if (p[0] - lo).abs() > tol || (p[p.len() - 1] - hi).abs() > tol {
            return Err(Error::Invalid(format!(
                "axis {k} breakpoints [{}, {}] do not span the domain [{lo}, {hi}]",
                p[0],
                p[p.len() - 1]
            )));
        }
        let (h_first, h_last) = (p[1] - p[0], p[p.len() - 1] - p[p.len() - 2]);
        let cells = |h: f64| (extents[k] / h * (1.0 - 1e-12)).ceil().max(0.0) as usize;
        let (m_lo, m_hi) = (cells(h_first), cells(h_last));
        for needed in [m_lo, m_hi] {
            if needed > max_collar {
                return Err(Error::CollarOverflow {
                    axis: k,
                    needed,
                    limit: max_collar,
                });
            }
        }
        let mut coords = Vec::with_capacity(p.len() + m_lo + m_hi);
        coords.extend((1..=m_lo).rev().map(|m| p[0] - m as f64 * h_first));
        coords.extend_from_slice(p);
        let top = p[p.len() - 1];
        coords.extend((1..=m_hi).map(|m| top + m as f64 * h_last));
        let n = coords.len();
        let hats: Vec<f64> = (0..n)
            .map(|i| {
                let left = if i > 0 { coords[i] - coords[i - 1] } else { 0.0 };
                let right = if i + 1 < n { coords[i + 1] - coords[i] } else { 0.0 };
                0.5 * (left + right)
            })
            .collect();
        inner.push([m_lo, m_lo + p.len() - 1]);
        collar_cells.push([m_lo, m_hi]);
        axes.push(coords);
        hat_axis.push(hats);
    }

    let mut dims = [1usize; 3];
    let mut strides = [0usize; 3];
    let mut stride = 1;
    for k in 0..dim {
        dims[k] = axes[k].len();
        strides[k] = stride;
        stride *= dims[k];
    }
    let total = stride;
    let mut slot = vec![0u32; total];
    let mut is_interior = vec![false; total];
    let mut interior = Vec::new();
    let mut collar = Vec::new();
    for flat in 0..total {
        let mut rest = flat;
        let mut inside = true;
        for k in (0..dim).rev() {
            let l = rest / strides[k];
            rest %= strides[k];
            if l <= inner[k][0] || l >= inner[k][1] {
                inside = false;
            }
        }
        if inside {
            slot[flat] = interior.len() as u32;
            is_interior[flat] = true;
            interior.push(flat);
        } else {
            slot[flat] = collar.len() as u32;
            collar.push(flat);
        }
    }
    if interior.is_empty() {
        return Err(Error::Invalid("grid has no interior nodes".into()));
    }

    Ok(TensorGrid {
        dim,
        axes,
        solution_box: domain.to_vec(),
        inner,
        collar_cells,
        dims,
        strides,
        hat_axis,
        interior,
        collar,
        slot,
        is_interior,
    })
}

/// `∫ φ_j`, the full tensor hat integral `∏ (h_left + h_right) / 2`.
pub fn hat_support_integral(grid: &TensorGrid, j: NodeIndex) -> f64 {
    (0..grid.dim)
        .map(|k| grid.hat_axis[k][j.lattice[k]])
        .product()
}

/// All nodes other than `i` inside the influence ellipsoid of interior node `i`.
pub fn neighbors_in_ellipsoid(
    grid: &TensorGrid,
    i: NodeIndex,
    params: &KernelParams,
    field: &CoefficientField,
) -> Result<Vec<NodeIndex>> {
    if !grid.is_interior(i.flat) {
        return Err(Error::NotInterior { node: i.flat });
    }
    let x = grid.coord(i.flat);
    let a = field.eval(&x[..grid.dim])?;
    let a_inv = a.inverse()?;
    let extents = crate::coeff::ellipsoid_axis_extents(&a, params.delta, params.chi2);
    let mut out = Vec::new();
    grid.visit_ellipsoid(i.flat, &a_inv, &extents, params.radius2(), |j, _, _| {
        if j != i.flat {
            out.push(grid.node_index(j));
        }
    });
    if out.is_empty() {
        return Err(Error::NoNeighbors { node: i.flat });
    }
    Ok(out)
}

/// Tensor-product multilinear interpolation of `values` (one per grid node) at `y`.
pub fn multilinear_interpolate(grid: &TensorGrid, values: &[f64], y: &[f64]) -> Result<f64> {
    if values.len() != grid.num_nodes() {
        return Err(Error::DimensionMismatch {
            expected: grid.num_nodes(),
            got: values.len(),
        });
    }
    let loc = grid.locate(y)?;
    let corners = 1usize << grid.dim;
    let mut acc = 0.0;
    for c in 0..corners {
        let mut w = 1.0;
        let mut flat = 0;
        for k in 0..grid.dim {
            let (cell, t) = loc[k];
            let up = (c >> k) & 1;
            w *= if up == 1 { t } else { 1.0 - t };
            flat += (cell + up) * grid.strides[k];
        }
        if w != 0.0 {
            acc += w * values[flat];
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::DEFAULT_CHI2;

    fn unit_grid(n: usize, delta: f64, a: SpdMatrix) -> TensorGrid {
        let dim = a.dim();
        let field = CoefficientField::constant(a);
        let params = KernelParams::new(delta, DEFAULT_CHI2, dim).unwrap();
        let parts = vec![uniform_partition(0.0, 1.0, n); dim];
        build_grid(&vec![[0.0, 1.0]; dim], &parts, &params, &field).unwrap()
    }

    #[test]
    fn identity_collar_and_node_count() {
        let g = unit_grid(40, 1.0 / 40.0, SpdMatrix::identity(2));
        assert_eq!(g.collar_cells(0), [6, 6]);
        assert_eq!(g.collar_cells(1), [6, 6]);
        assert_eq!(g.num_nodes(), 53 * 53);
        // independent count: interior lattice points strictly inside the box
        let mut interior = 0;
        for i in 0..53 {
            for j in 0..53 {
                let (x, y) = ((i as f64 - 6.0) / 40.0, (j as f64 - 6.0) / 40.0);
                if x > 1e-9 && x < 1.0 - 1e-9 && y > 1e-9 && y < 1.0 - 1e-9 {
                    interior += 1;
                }
            }
        }
        assert_eq!(g.num_interior(), interior);
        assert_eq!(interior, 39 * 39);
        assert_eq!(g.num_collar(), 53 * 53 - 39 * 39);
    }

    #[test]
    fn anisotropic_collar() {
        let g = unit_grid(40, 1.0 / 40.0, SpdMatrix::diagonal(&[10.0, 1.0]).unwrap());
        assert_eq!(g.collar_cells(0), [19, 19]);
        assert_eq!(g.collar_cells(1), [6, 6]);
        assert_eq!((6.0 * 10f64.sqrt()).ceil() as usize, 19);
    }

    #[test]
    fn collar_covers_every_interior_ellipsoid() {
        let a = SpdMatrix::from_rows2([[7.75, -3.897114317029974], [-3.897114317029974, 3.25]]).unwrap();
        let g = unit_grid(20, 1.0 / 20.0, a);
        let ext = crate::coeff::ellipsoid_axis_extents(&a, 0.05, 36.0);
        for k in 0..2 {
            let axis = g.axis(k);
            assert!(axis[0] <= -ext[k] + 1e-12);
            assert!(axis[axis.len() - 1] >= 1.0 + ext[k] - 1e-12);
        }
    }

    #[test]
    fn nonuniform_partition_and_replicated_collar() {
        let field = CoefficientField::constant(SpdMatrix::identity(2));
        let params = KernelParams::new(0.05, DEFAULT_CHI2, 2).unwrap();
        let px = split_partition(0.0, 0.5, 1.0, 10, 15);
        assert_eq!(px.len(), 26);
        assert_eq!(px[10], 0.5);
        let py = uniform_partition(0.0, 1.0, 20);
        let g = build_grid(&[[0.0, 1.0], [0.0, 1.0]], &[px, py], &params, &field).unwrap();
        // left cells are 1/20, right cells 1/30
        assert_eq!(g.collar_cells(0), [6, 9]);
        let ax = g.axis(0);
        assert!((ax[1] - ax[0] - 0.05).abs() < 1e-14);
        assert!((ax[ax.len() - 1] - ax[ax.len() - 2] - 1.0 / 30.0).abs() < 1e-14);
        // node at the split: h_left = 1/20, h_right = 1/30
        let i = g.inner_range(0)[0] + 10;
        let j = g.inner_range(1)[0] + 5;
        let node = g.node_index(g.flat([i, j, 0]));
        let w = hat_support_integral(&g, node);
        assert!((w - (1.0 / 24.0) * (1.0 / 20.0)).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_partitions() {
        let field = CoefficientField::constant(SpdMatrix::identity(2));
        let params = KernelParams::new(0.05, DEFAULT_CHI2, 2).unwrap();
        let bad = build_grid(&[[0.0, 1.0]; 2], &[vec![0.0], uniform_partition(0.0, 1.0, 4)], &params, &field);
        assert!(matches!(bad, Err(Error::EmptyPartition { axis: 0 })));
        let bad = build_grid(&[[0.0, 1.0]; 2], &[vec![0.0, 0.5, 0.5, 1.0], uniform_partition(0.0, 1.0, 4)], &params, &field);
        assert!(matches!(bad, Err(Error::EmptyPartition { axis: 0 })));
        let p = uniform_partition(0.0, 1.0, 4);
        let huge = KernelParams::new(10.0, DEFAULT_CHI2, 2).unwrap();
        let bad = build_grid_with_limit(&[[0.0, 1.0]; 2], &[p.clone(), p], &huge, &field, 100);
        assert!(matches!(bad, Err(Error::CollarOverflow { .. })));
    }

    #[test]
    fn hat_integrals() {
        let g = unit_grid(10, 0.1, SpdMatrix::identity(2));
        let node = g.node_index(g.interior_nodes()[17]);
        assert!((hat_support_integral(&g, node) - 0.01).abs() < 1e-16);
        let g3 = unit_grid(4, 0.25, SpdMatrix::identity(3));
        let node = g3.node_index(g3.interior_nodes()[0]);
        assert!((hat_support_integral(&g3, node) - 0.25f64.powi(3)).abs() < 1e-16);
    }

    #[test]
    fn hat_integrals_sum_to_volume() {
        let g = unit_grid(12, 1.0 / 12.0, SpdMatrix::diagonal(&[3.0, 1.0]).unwrap());
        let total: f64 = (0..g.num_nodes()).map(|f| hat_support_integral(&g, g.node_index(f))).sum();
        assert!((total - g.volume()).abs() < 1e-12 * g.volume());

        let field = CoefficientField::constant(SpdMatrix::identity(3));
        let params = KernelParams::new(0.1, 9.0, 3).unwrap();
        let parts = vec![split_partition(0.0, 0.5, 1.0, 3, 5), uniform_partition(0.0, 1.0, 4), uniform_partition(0.0, 1.0, 6)];
        let g = build_grid(&[[0.0, 1.0]; 3], &parts, &params, &field).unwrap();
        let total: f64 = (0..g.num_nodes()).map(|f| hat_support_integral(&g, g.node_index(f))).sum();
        assert!((total - g.volume()).abs() < 1e-12 * g.volume());
    }

    #[test]
    fn flat_lattice_bijection() {
        let g = unit_grid(5, 0.2, SpdMatrix::identity(3));
        for f in 0..g.num_nodes() {
            assert_eq!(g.flat(g.lattice(f)), f);
        }
    }

    #[test]
    fn identity_stencil_has_112_neighbors() {
        let g = unit_grid(40, 1.0 / 40.0, SpdMatrix::identity(2));
        let field = CoefficientField::constant(SpdMatrix::identity(2));
        let params = KernelParams::new(1.0 / 40.0, DEFAULT_CHI2, 2).unwrap();
        let center = g.flat([26, 26, 0]);
        let nb = neighbors_in_ellipsoid(&g, g.node_index(center), &params, &field).unwrap();
        let mut oracle = 0;
        for i in -6i32..=6 {
            for j in -6i32..=6 {
                if i * i + j * j <= 36 && (i, j) != (0, 0) {
                    oracle += 1;
                }
            }
        }
        assert_eq!(oracle, 112);
        assert_eq!(nb.len(), 112);
        // boundary-inclusive: offset exactly (6δ, 0)
        assert!(nb.iter().any(|n| n.lattice == [32, 26, 0]));
    }

    #[test]
    fn too_small_delta_has_no_neighbors() {
        let field = CoefficientField::constant(SpdMatrix::identity(2));
        let params = KernelParams::new(0.01, DEFAULT_CHI2, 2).unwrap();
        let p = uniform_partition(0.0, 1.0, 5);
        let g = build_grid(&[[0.0, 1.0]; 2], &[p.clone(), p], &params, &field).unwrap();
        let i = g.node_index(g.interior_nodes()[0]);
        assert!(matches!(
            neighbors_in_ellipsoid(&g, i, &params, &field),
            Err(Error::NoNeighbors { .. })
        ));
        let c = g.node_index(g.collar_nodes()[0]);
        assert!(matches!(
            neighbors_in_ellipsoid(&g, c, &params, &field),
            Err(Error::NotInterior { .. })
        ));
    }

    #[test]
    fn neighbor_search_matches_brute_force() {
        let field = CoefficientField::analytic(2, 1.0, 4.0, |x: &[f64]| {
            let (k1, k2) = (2.0 + x[0].sin(), 1.5 + 0.5 * x[1].cos());
            let t = 0.3 + x[0];
            let (c, s) = (t.cos(), t.sin());
            [
                [c * c * k1 + s * s * k2, c * s * (k1 - k2), 0.0],
                [c * s * (k1 - k2), s * s * k1 + c * c * k2, 0.0],
                [0.0; 3],
            ]
        });
        let params = KernelParams::new(0.12, 9.0, 2).unwrap();
        let parts = vec![split_partition(0.0, 0.4, 1.0, 3, 5), uniform_partition(0.0, 1.0, 7)];
        let g = build_grid(&[[0.0, 1.0]; 2], &parts, &params, &field).unwrap();
        for &i in g.interior_nodes() {
            let x = g.coord(i);
            let a = field.eval(&x[..2]).unwrap();
            let mut brute: Vec<usize> = (0..g.num_nodes())
                .filter(|&j| {
                    j != i && crate::kernel::in_influence(&params, &a, &x[..2], &g.coord(j)[..2]).unwrap()
                })
                .collect();
            brute.sort();
            let mut found: Vec<usize> = neighbors_in_ellipsoid(&g, g.node_index(i), &params, &field)
                .unwrap()
                .into_iter()
                .map(|n| n.flat)
                .collect();
            found.sort();
            assert_eq!(found, brute, "node {i}");
        }
    }

    #[test]
    fn interpolation() {
        let field = CoefficientField::constant(SpdMatrix::identity(2));
        let params = KernelParams::new(0.1, 4.0, 2).unwrap();
        let parts = vec![split_partition(0.0, 0.3, 1.0, 3, 4), uniform_partition(0.0, 1.0, 5)];
        let g = build_grid(&[[0.0, 1.0]; 2], &parts, &params, &field).unwrap();
        let xy: Vec<f64> = (0..g.num_nodes()).map(|f| {
            let c = g.coord(f);
            c[0] * c[1] + 2.0 * c[0] - c[1]
        }).collect();
        let ones = vec![1.0; g.num_nodes()];
        for y in [[0.123, 0.777], [0.3, 0.4], [-0.1, 1.05], [0.999, 0.001]] {
            let v = multilinear_interpolate(&g, &xy, &y).unwrap();
            assert!((v - (y[0] * y[1] + 2.0 * y[0] - y[1])).abs() < 1e-14);
            assert!((multilinear_interpolate(&g, &ones, &y).unwrap() - 1.0).abs() < 1e-15);
        }
        let node = g.interior_nodes()[4];
        let c = g.coord(node);
        assert_eq!(multilinear_interpolate(&g, &xy, &c[..2]).unwrap(), xy[node]);
        assert!(matches!(
            multilinear_interpolate(&g, &xy, &[5.0, 0.5]),
            Err(Error::OutOfDomain { .. })
        ));
    }

    #[test]
    fn description_roundtrip() {
        let field = CoefficientField::constant(SpdMatrix::identity(2));
        let params = KernelParams::new(0.1, 4.0, 2).unwrap();
        let parts = vec![split_partition(0.0, 0.5, 1.0, 2, 3), uniform_partition(0.0, 1.0, 3)];
        let g = build_grid(&[[0.0, 1.0]; 2], &parts, &params, &field).unwrap();
        let desc = g.description();
        assert_eq!(desc.partitions, parts);
        let text = desc.to_toml().unwrap();
        assert_eq!(GridDescription::from_toml(&text).unwrap(), desc);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn partition_of_unity(x in 0.0f64..1.0, y in 0.0f64..1.0, z in 0.0f64..1.0, nl in 2usize..6, nr in 2usize..6) {
                let field = CoefficientField::constant(SpdMatrix::identity(3));
                let params = KernelParams::new(0.2, 1.0, 3).unwrap();
                let parts = vec![split_partition(0.0, 0.37, 1.0, nl, nr), uniform_partition(0.0, 1.0, 3), uniform_partition(0.0, 1.0, nr)];
                let g = build_grid(&[[0.0, 1.0]; 3], &parts, &params, &field).unwrap();
                let ones = vec![1.0; g.num_nodes()];
                let v = multilinear_interpolate(&g, &ones, &[x, y, z]).unwrap();
                prop_assert!((v - 1.0).abs() < 1e-14);
            }
        }
    }
}
