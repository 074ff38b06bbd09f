//! Small symmetric positive-definite matrices (d = 2 or 3) and coefficient fields.
//!
//! Everything here is closed-form: determinants and inverses by cofactors,
//! positive-definiteness by leading principal minors.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Relative tolerance for the symmetry and minor tests.
const SPD_TOL: f64 = 1e-12;

/// A dense, symmetric positive-definite `dim x dim` matrix with `dim` in {2, 3}.
#[derive(Clone, Copy, PartialEq)]
pub struct SpdMatrix {
    dim: usize,
    m: [[f64; 3]; 3],
}

impl fmt::Debug for SpdMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: Vec<&[f64]> = (0..self.dim).map(|i| &self.m[i][..self.dim]).collect();
        f.debug_tuple("SpdMatrix").field(&rows).finish()
    }
}

impl SpdMatrix {
    /// Validates and wraps a raw matrix. Only the leading `dim x dim` block is read.
    pub fn new(dim: usize, raw: [[f64; 3]; 3]) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::Invalid(format!("dimension must be 2 or 3, got {dim}")));
        }
        let mut m = [[0.0; 3]; 3];
        let mut scale = 0.0f64;
        for i in 0..dim {
            for j in 0..dim {
                let v = raw[i][j];
                if !v.is_finite() {
                    return Err(Error::NotSpd(format!("non-finite entry at ({i}, {j})")));
                }
                scale = scale.max(v.abs());
            }
        }
        if scale == 0.0 {
            return Err(Error::NotSpd("zero matrix".into()));
        }
        for i in 0..dim {
            for j in 0..dim {
                if (raw[i][j] - raw[j][i]).abs() > SPD_TOL * scale {
                    return Err(Error::NotSpd(format!(
                        "asymmetric entries ({i}, {j}) = {} and ({j}, {i}) = {}",
                        raw[i][j], raw[j][i]
                    )));
                }
                m[i][j] = 0.5 * (raw[i][j] + raw[j][i]);
            }
        }
        let mut unit = [[0.0; 3]; 3];
        for i in 0..dim {
            for j in 0..dim {
                unit[i][j] = m[i][j] / scale;
            }
        }
        let normalized = SpdMatrix { dim, m: unit };
        for k in 1..=dim {
            let minor = normalized.leading_minor(k);
            if !(minor > SPD_TOL) {
                return Err(Error::NotSpd(format!("leading minor {k} of the normalized matrix is {minor:e}")));
            }
        }
        Ok(SpdMatrix { dim, m })
    }

    pub fn from_rows2(rows: [[f64; 2]; 2]) -> Result<Self> {
        let mut raw = [[0.0; 3]; 3];
        for i in 0..2 {
            raw[i][..2].copy_from_slice(&rows[i]);
        }
        Self::new(2, raw)
    }

    pub fn from_rows3(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::new(3, rows)
    }

    pub fn identity(dim: usize) -> Self {
        let mut raw = [[0.0; 3]; 3];
        for (i, row) in raw.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self::new(dim, raw).expect("identity is SPD")
    }

    pub fn diagonal(entries: &[f64]) -> Result<Self> {
        let mut raw = [[0.0; 3]; 3];
        for (i, &v) in entries.iter().enumerate().take(3) {
            raw[i][i] = v;
        }
        Self::new(entries.len(), raw)
    }

    /// `R · D · Rᵀ` for a rotation (or any) matrix `R` and diagonal `D`.
    pub fn conjugated_diagonal(dim: usize, rotation: [[f64; 3]; 3], diag: &[f64]) -> Result<Self> {
        let mut raw = [[0.0; 3]; 3];
        for i in 0..dim {
            for j in 0..dim {
                raw[i][j] = (0..dim).map(|k| rotation[i][k] * diag[k] * rotation[j][k]).sum();
            }
        }
        Self::new(dim, raw)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[i][j]
    }

    pub fn raw(&self) -> [[f64; 3]; 3] {
        self.m
    }

    pub fn max_abs_entry(&self) -> f64 {
        let mut s = 0.0f64;
        for i in 0..self.dim {
            for j in 0..self.dim {
                s = s.max(self.m[i][j].abs());
            }
        }
        s
    }

    fn leading_minor(&self, k: usize) -> f64 {
        let m = &self.m;
        match k {
            1 => m[0][0],
            2 => m[0][0] * m[1][1] - m[0][1] * m[1][0],
            _ => {
                m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                    - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                    + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
            }
        }
    }

    pub fn det(&self) -> f64 {
        self.leading_minor(self.dim)
    }

    pub fn inverse(&self) -> Result<Self> {
        // exact power-of-two rescaling keeps the determinant away from under/overflow
        let s = 2f64.powi(self.max_abs_entry().log2().round() as i32);
        let mut m = self.m;
        for row in m.iter_mut() {
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let det = SpdMatrix { dim: self.dim, m }.det();
        let mut inv = [[0.0; 3]; 3];
        if self.dim == 2 {
            inv[0][0] = m[1][1] / det;
            inv[1][1] = m[0][0] / det;
            inv[0][1] = -m[0][1] / det;
            inv[1][0] = -m[1][0] / det;
        } else {
            // transpose of the cofactor matrix; symmetric input so the transpose is moot
            for i in 0..3 {
                for j in 0..3 {
                    let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
                    let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
                    inv[i][j] = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
                }
            }
        }
        for row in inv.iter_mut() {
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        Self::new(self.dim, inv)
    }

    /// `zᵀ M z`, clamped at zero against round-off.
    #[inline]
    pub fn quadratic_form(&self, z: &[f64]) -> f64 {
        let m = &self.m;
        let q = if self.dim == 2 {
            m[0][0] * z[0] * z[0] + 2.0 * m[0][1] * z[0] * z[1] + m[1][1] * z[1] * z[1]
        } else {
            m[0][0] * z[0] * z[0]
                + m[1][1] * z[1] * z[1]
                + m[2][2] * z[2] * z[2]
                + 2.0 * (m[0][1] * z[0] * z[1] + m[0][2] * z[0] * z[2] + m[1][2] * z[1] * z[2])
        };
        q.max(0.0)
    }

    pub fn mul_vec(&self, z: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| (0..self.dim).map(|j| self.m[i][j] * z[j]).sum())
            .collect()
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        let mut raw = self.m;
        for row in raw.iter_mut() {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        Self::new(self.dim, raw)
    }

    /// Lower-triangular `L` with `L Lᵀ = self`.
    pub fn cholesky(&self) -> [[f64; 3]; 3] {
        let d = self.dim;
        let mut l = [[0.0; 3]; 3];
        for i in 0..d {
            for j in 0..=i {
                let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
                if i == j {
                    l[i][i] = (self.m[i][i] - s).max(0.0).sqrt();
                } else {
                    l[i][j] = (self.m[i][j] - s) / l[j][j];
                }
            }
        }
        l
    }

    /// Smallest and largest eigenvalue, closed form.
    pub fn eigenvalue_bounds(&self) -> (f64, f64) {
        let m = &self.m;
        if self.dim == 2 {
            let mean = 0.5 * (m[0][0] + m[1][1]);
            let r = (0.25 * (m[0][0] - m[1][1]).powi(2) + m[0][1] * m[0][1]).sqrt();
            return (mean - r, mean + r);
        }
        // trigonometric solution of the symmetric 3x3 characteristic polynomial
        let p1 = m[0][1].powi(2) + m[0][2].powi(2) + m[1][2].powi(2);
        let q = (m[0][0] + m[1][1] + m[2][2]) / 3.0;
        if p1 == 0.0 {
            let d = [m[0][0], m[1][1], m[2][2]];
            let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            return (lo, hi);
        }
        let p2 = (m[0][0] - q).powi(2) + (m[1][1] - q).powi(2) + (m[2][2] - q).powi(2) + 2.0 * p1;
        let p = (p2 / 6.0).sqrt();
        let mut b = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                b[i][j] = (m[i][j] - if i == j { q } else { 0.0 }) / p;
            }
        }
        let det_b = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1])
            - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
            + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
        let phi = (det_b / 2.0).clamp(-1.0, 1.0).acos() / 3.0;
        let hi = q + 2.0 * p * phi.cos();
        let lo = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
        (lo, hi)
    }
}

pub fn spd_inverse(m: &SpdMatrix) -> Result<SpdMatrix> {
    m.inverse()
}

pub fn spd_det(m: &SpdMatrix) -> Result<f64> {
    let d = m.det();
    if d > 0.0 {
        Ok(d)
    } else {
        Err(Error::NotSpd(format!("determinant {d:e}")))
    }
}

pub fn quadratic_form(minv: &SpdMatrix, z: &[f64]) -> f64 {
    minv.quadratic_form(z)
}

/// Half-widths of the axis-aligned box enclosing `{z : zᵀA⁻¹z ≤ δ²χ²}`.
///
/// The maximum of `z_k` over that ellipsoid is `δ√(χ² A_kk)`.
pub fn ellipsoid_axis_extents(a: &SpdMatrix, delta: f64, chi2: f64) -> Vec<f64> {
    (0..a.dim()).map(|k| delta * (chi2 * a.get(k, k)).sqrt()).collect()
}

/// Evaluator for spatially varying coefficients. Returns the raw matrix; validation
/// happens in [`CoefficientField::eval`].
pub type FieldFn = dyn Fn(&[f64]) -> [[f64; 3]; 3] + Send + Sync;

/// `x ↦ A(x)` together with its ellipticity bounds.
#[derive(Clone)]
pub enum CoefficientField {
    Constant(SpdMatrix),
    Analytic {
        dim: usize,
        eval: Arc<FieldFn>,
        lambda_min: f64,
        lambda_max: f64,
    },
}

impl fmt::Debug for CoefficientField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoefficientField::Constant(m) => f.debug_tuple("Constant").field(m).finish(),
            CoefficientField::Analytic {
                dim,
                lambda_min,
                lambda_max,
                ..
            } => f
                .debug_struct("Analytic")
                .field("dim", dim)
                .field("lambda_min", lambda_min)
                .field("lambda_max", lambda_max)
                .finish_non_exhaustive(),
        }
    }
}

impl CoefficientField {
    pub fn constant(m: SpdMatrix) -> Self {
        CoefficientField::Constant(m)
    }

    /// `lambda_min` and `lambda_max` are trusted; see [`CoefficientField::check_ellipticity`].
    pub fn analytic<F>(dim: usize, lambda_min: f64, lambda_max: f64, eval: F) -> Self
    where
        F: Fn(&[f64]) -> [[f64; 3]; 3] + Send + Sync + 'static,
    {
        CoefficientField::Analytic {
            dim,
            eval: Arc::new(eval),
            lambda_min,
            lambda_max,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            CoefficientField::Constant(m) => m.dim(),
            CoefficientField::Analytic { dim, .. } => *dim,
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, CoefficientField::Constant(_))
    }

    pub fn eval(&self, x: &[f64]) -> Result<SpdMatrix> {
        match self {
            CoefficientField::Constant(m) => Ok(*m),
            CoefficientField::Analytic { dim, eval, .. } => SpdMatrix::new(*dim, eval(x))
                .map_err(|e| e.context(format!("coefficient at {x:?}"))),
        }
    }

    pub fn lambda_min(&self) -> f64 {
        match self {
            CoefficientField::Constant(m) => m.eigenvalue_bounds().0,
            CoefficientField::Analytic { lambda_min, .. } => *lambda_min,
        }
    }

    pub fn lambda_max(&self) -> f64 {
        match self {
            CoefficientField::Constant(m) => m.eigenvalue_bounds().1,
            CoefficientField::Analytic { lambda_max, .. } => *lambda_max,
        }
    }

    /// Upper bound on `A_kk(x)` over the domain, used to size collars.
    ///
    /// Exact for constant fields; `Λ` on every axis otherwise.
    pub fn axis_bounds(&self) -> Vec<f64> {
        match self {
            CoefficientField::Constant(m) => (0..m.dim()).map(|k| m.get(k, k)).collect(),
            CoefficientField::Analytic {
                dim, lambda_max, ..
            } => vec![*lambda_max; *dim],
        }
    }

    /// Spot-checks `λ|ξ|² ≤ ξᵀA(x)ξ ≤ Λ|ξ|²` at the given points.
    pub fn check_ellipticity(&self, points: &[Vec<f64>]) -> Result<()> {
        let (lo, hi) = (self.lambda_min(), self.lambda_max());
        for x in points {
            let a = self.eval(x)?;
            let (emin, emax) = a.eigenvalue_bounds();
            let slack = 1e-12 * hi.abs().max(1.0);
            if emin < lo - slack || emax > hi + slack {
                return Err(Error::Invalid(format!(
                    "eigenvalues [{emin}, {emax}] at {x:?} escape bounds [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }
}

pub fn eval_coeff(field: &CoefficientField, x: &[f64]) -> Result<SpdMatrix> {
    field.eval(x)
}
