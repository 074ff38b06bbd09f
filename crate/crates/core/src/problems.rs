//! Manufactured test cases and right-hand-side construction.

use std::f64::consts::PI;

use crate::coeff::{CoefficientField, SpdMatrix};
use crate::error::{Error, Result};
use crate::kernel::KernelParams;
use crate::quadrature::gauss_hermite;

/// Exact solutions with closed-form derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExactSolution {
    /// `x₁ x₂⁵`
    X1X2Pow5,
    /// `exp(x₁ x₂)`
    ExpX1X2,
    /// `sin(|x|²)` in any dimension.
    SinSquaredNorm,
}

impl ExactSolution {
    pub fn label(&self) -> &'static str {
        match self {
            ExactSolution::X1X2Pow5 => "x1*x2^5",
            ExactSolution::ExpX1X2 => "exp(x1*x2)",
            ExactSolution::SinSquaredNorm => "sin(|x|^2)",
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            ExactSolution::X1X2Pow5 => x[0] * x[1].powi(5),
            ExactSolution::ExpX1X2 => (x[0] * x[1]).exp(),
            ExactSolution::SinSquaredNorm => x.iter().map(|v| v * v).sum::<f64>().sin(),
        }
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        match self {
            ExactSolution::X1X2Pow5 => vec![x[1].powi(5), 5.0 * x[0] * x[1].powi(4)],
            ExactSolution::ExpX1X2 => {
                let e = (x[0] * x[1]).exp();
                vec![x[1] * e, x[0] * e]
            }
            ExactSolution::SinSquaredNorm => {
                let c = x.iter().map(|v| v * v).sum::<f64>().cos();
                x.iter().map(|v| 2.0 * v * c).collect()
            }
        }
    }

    pub fn hessian(&self, x: &[f64]) -> [[f64; 3]; 3] {
        let mut h = [[0.0; 3]; 3];
        match self {
            ExactSolution::X1X2Pow5 => {
                h[0][1] = 5.0 * x[1].powi(4);
                h[1][0] = h[0][1];
                h[1][1] = 20.0 * x[0] * x[1].powi(3);
            }
            ExactSolution::ExpX1X2 => {
                let e = (x[0] * x[1]).exp();
                h[0][0] = x[1] * x[1] * e;
                h[1][1] = x[0] * x[0] * e;
                h[0][1] = (1.0 + x[0] * x[1]) * e;
                h[1][0] = h[0][1];
            }
            ExactSolution::SinSquaredNorm => {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                let (s, c) = r2.sin_cos();
                for i in 0..x.len() {
                    for j in 0..x.len() {
                        h[i][j] = -4.0 * x[i] * x[j] * s + if i == j { 2.0 * c } else { 0.0 };
                    }
                }
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceMode {
    /// `f = −Σ a_ij ∂_ij u`, the local limit.
    LocalAnalytic,
    /// `f = −∫ (u(y) − u(x)) γ(x, y) dy` over all of space.
    NonlocalQuadrature,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryData {
    /// Trace of the exact solution.
    Exact,
    /// 1 where `x₁ ≤ 0` or `x₂ ≤ 0`, else 0.
    Step,
}

#[derive(Clone)]
pub struct ManufacturedCase {
    pub name: String,
    pub example: u32,
    pub description: String,
    pub dim: usize,
    pub solution: Option<ExactSolution>,
    pub field: CoefficientField,
    pub source: SourceMode,
    pub boundary: BoundaryData,
    pub domain: Vec<[f64; 2]>,
}

impl std::fmt::Debug for ManufacturedCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ManufacturedCase")
            .field("name", &self.name)
            .field("example", &self.example)
            .field("dim", &self.dim)
            .field("solution", &self.solution)
            .field("source", &self.source)
            .field("boundary", &self.boundary)
            .finish()
    }
}

impl ManufacturedCase {
    pub fn exact(&self, x: &[f64]) -> Option<f64> {
        self.solution.map(|s| s.value(x))
    }

    /// Dirichlet data at a collar node.
    pub fn boundary_value(&self, x: &[f64]) -> f64 {
        match self.boundary {
            BoundaryData::Exact => self.solution.map_or(0.0, |s| s.value(x)),
            BoundaryData::Step => {
                if x[0] <= 0.0 || x[1] <= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Source term at an interior node.
    pub fn source_value(&self, x: &[f64], params: &KernelParams) -> Result<f64> {
        match self.source {
            SourceMode::Zero => Ok(0.0),
            SourceMode::LocalAnalytic => local_rhs(self, x),
            SourceMode::NonlocalQuadrature => nonlocal_rhs(self, x, params),
        }
    }
}

fn rotation2(theta: f64) -> [[f64; 3]; 3] {
    let (s, c) = theta.sin_cos();
    [[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// `R diag(k1, k2) Rᵀ` with `R = [[c, s], [−s, c]]`.
fn rotated_field(theta: f64, k: impl Fn(&[f64]) -> (f64, f64) + Send + Sync + 'static) -> CoefficientField {
    let r = rotation2(theta);
    CoefficientField::analytic(2, 1.0, 4.0, move |x: &[f64]| {
        let (k1, k2) = k(x);
        let d = [k1, k2];
        let mut m = [[0.0; 3]; 3];
        for i in 0..2 {
            for j in 0..2 {
                m[i][j] = (0..2).map(|l| r[i][l] * d[l] * r[j][l]).sum();
            }
        }
        m
    })
}

fn variable_k(x: &[f64]) -> (f64, f64) {
    (4.0 - 2.0 * x[0] * x[0] - x[1] * x[1], 4.0 - x[0] * x[0] - 2.0 * x[1] * x[1])
}

pub fn example2_matrices() -> [SpdMatrix; 3] {
    [
        SpdMatrix::identity(2),
        SpdMatrix::diagonal(&[10.0, 1.0]).expect("diagonal is SPD"),
        SpdMatrix::conjugated_diagonal(2, rotation2(PI / 6.0), &[10.0, 1.0]).expect("rotation keeps SPD"),
    ]
}

pub fn example3_matrices() -> [SpdMatrix; 3] {
    let (s, c) = (PI / 4.0).sin_cos();
    let rot = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
    [
        SpdMatrix::identity(3),
        SpdMatrix::diagonal(&[4.0, 1.0, 1.0]).expect("diagonal is SPD"),
        SpdMatrix::conjugated_diagonal(3, rot, &[4.0, 1.0, 1.0]).expect("rotation keeps SPD"),
    ]
}

pub fn example4_fields() -> [CoefficientField; 2] {
    [
        rotated_field(0.0, variable_k),
        rotated_field(5.0 * PI / 12.0, variable_k),
    ]
}

/// All compiled-in cases, grouped by example.
pub fn catalog() -> Vec<ManufacturedCase> {
    let unit2 = vec![[0.0, 1.0]; 2];
    let unit3 = vec![[0.0, 1.0]; 3];
    let mut out = Vec::new();
    for (tag, sol) in [
        ("poly", ExactSolution::X1X2Pow5),
        ("exp", ExactSolution::ExpX1X2),
        ("sin", ExactSolution::SinSquaredNorm),
    ] {
        out.push(ManufacturedCase {
            name: format!("ex1-{tag}"),
            example: 1,
            description: format!("u = {}, A = I, fixed delta, nonlocal source", sol.label()),
            dim: 2,
            solution: Some(sol),
            field: CoefficientField::constant(SpdMatrix::identity(2)),
            source: SourceMode::NonlocalQuadrature,
            boundary: BoundaryData::Exact,
            domain: unit2.clone(),
        });
    }
    let m2 = example2_matrices();
    let labels2 = ["identity", "diag(10,1)", "diag(10,1) rotated by pi/6"];
    for (i, a) in m2.iter().enumerate() {
        out.push(ManufacturedCase {
            name: format!("ex2-a{}", i + 1),
            example: 2,
            description: format!("u = sin(x1^2+x2^2), A = {}, local source", labels2[i]),
            dim: 2,
            solution: Some(ExactSolution::SinSquaredNorm),
            field: CoefficientField::constant(*a),
            source: SourceMode::LocalAnalytic,
            boundary: BoundaryData::Exact,
            domain: unit2.clone(),
        });
    }
    let labels3 = ["identity", "diag(4,1,1)", "diag(4,1,1) rotated by pi/4 about x3"];
    for (i, a) in example3_matrices().iter().enumerate() {
        out.push(ManufacturedCase {
            name: format!("ex3-a{}", i + 1),
            example: 3,
            description: format!("u = sin(|x|^2) in 3D, A = {}, local source", labels3[i]),
            dim: 3,
            solution: Some(ExactSolution::SinSquaredNorm),
            field: CoefficientField::constant(*a),
            source: SourceMode::LocalAnalytic,
            boundary: BoundaryData::Exact,
            domain: unit3.clone(),
        });
    }
    let labels4 = ["diag(k1,k2)", "diag(k1,k2) rotated by 5pi/12"];
    for (i, field) in example4_fields().into_iter().enumerate() {
        out.push(ManufacturedCase {
            name: format!("ex4-a{}", i + 1),
            example: 4,
            description: format!("u = sin(x1^2+x2^2), variable A = {}, local source", labels4[i]),
            dim: 2,
            solution: Some(ExactSolution::SinSquaredNorm),
            field,
            source: SourceMode::LocalAnalytic,
            boundary: BoundaryData::Exact,
            domain: unit2.clone(),
        });
    }
    let fields5: [(CoefficientField, &str); 4] = {
        let [f3, f4] = example4_fields();
        [
            (CoefficientField::constant(m2[1]), "diag(10,1)"),
            (CoefficientField::constant(m2[2]), "diag(10,1) rotated by pi/6"),
            (f3, "diag(k1,k2)"),
            (f4, "diag(k1,k2) rotated by 5pi/12"),
        ]
    };
    for (i, (field, label)) in fields5.into_iter().enumerate() {
        out.push(ManufacturedCase {
            name: format!("ex5-a{}", i + 1),
            example: 5,
            description: format!("step boundary data, f = 0, A = {label}"),
            dim: 2,
            solution: None,
            field,
            source: SourceMode::Zero,
            boundary: BoundaryData::Step,
            domain: unit2.clone(),
        });
    }
    out
}

pub fn find_case(name: &str) -> Result<ManufacturedCase> {
    catalog()
        .into_iter()
        .find(|c| c.name == name)
        .ok_or_else(|| Error::Invalid(format!("unknown case '{name}'")))
}

/// `−Σ a_ij(x) ∂_ij u(x)`.
pub fn local_rhs(case: &ManufacturedCase, x: &[f64]) -> Result<f64> {
    let sol = case
        .solution
        .ok_or_else(|| Error::Invalid(format!("case '{}' has no exact solution", case.name)))?;
    let a = case.field.eval(x)?;
    let h = sol.hessian(x);
    let mut s = 0.0;
    for i in 0..case.dim {
        for j in 0..case.dim {
            s += a.get(i, j) * h[i][j];
        }
    }
    Ok(-s)
}

/// Gauss–Hermite evaluation of `(2/δ²) E[u(x) − u(x + δ L Z)]`, `Z ~ N(0, I)`,
/// `L Lᵀ = A(x)`, doubling the points per axis from 40 until two successive
/// values agree to `1e-12 max(1, |f|)`.
pub fn nonlocal_rhs(case: &ManufacturedCase, x: &[f64], params: &KernelParams) -> Result<f64> {
    let sol = case
        .solution
        .ok_or_else(|| Error::Invalid(format!("case '{}' has no exact solution", case.name)))?;
    let a = case.field.eval(x)?;
    let u = |y: &[f64]| sol.value(y);
    nonlocal_rhs_of(&u, &a, x, params)
}

/// As [`nonlocal_rhs`] for an arbitrary function and frozen matrix.
pub fn nonlocal_rhs_of(u: &dyn Fn(&[f64]) -> f64, a: &SpdMatrix, x: &[f64], params: &KernelParams) -> Result<f64> {
    const MAX_POINTS: usize = 640;
    let mut n = 40;
    let mut prev = gauss_hermite_rhs(u, a, x, params.delta, n);
    loop {
        let next_n = 2 * n;
        if next_n > MAX_POINTS {
            return Err(Error::QuadratureNotConverged {
                points: n,
                change: f64::NAN,
            });
        }
        let cur = gauss_hermite_rhs(u, a, x, params.delta, next_n);
        let change = (cur - prev).abs();
        if change < 1e-12 * cur.abs().max(1.0) {
            return Ok(cur);
        }
        if next_n * 2 > MAX_POINTS {
            return Err(Error::QuadratureNotConverged { points: next_n, change });
        }
        prev = cur;
        n = next_n;
    }
}

fn gauss_hermite_rhs(u: &dyn Fn(&[f64]) -> f64, a: &SpdMatrix, x: &[f64], delta: f64, n: usize) -> f64 {
    let d = a.dim();
    let rule = gauss_hermite(n);
    let l = a.cholesky();
    let ux = u(x);
    let scale = std::f64::consts::SQRT_2 * delta;
    let mut total = 0.0;
    let mut y = [0.0; 3];
    let mut idx = [0usize; 3];
    let count = n.pow(d as u32);
    for flat in 0..count {
        let mut rest = flat;
        let mut w = 1.0;
        for k in 0..d {
            idx[k] = rest % n;
            rest /= n;
            w *= rule.weights[idx[k]];
        }
        if w < 1e-300 {
            continue;
        }
        for i in 0..d {
            let mut s = 0.0;
            for k in 0..=i {
                s += l[i][k] * rule.nodes[idx[k]];
            }
            y[i] = x[i] + scale * s;
        }
        total += w * (ux - u(&y[..d]));
    }
    2.0 / (delta * delta) / PI.powf(0.5 * d as f64) * total
}
