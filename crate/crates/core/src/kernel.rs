//! The truncated multivariate-Gaussian kernel.
//!
//! `γ(x, y) = (2/δ²) p(y - x; 0, δ² A(x))`, cut to zero outside the ellipsoid
//! `(y - x)ᵀ A(x)⁻¹ (y - x) ≤ δ² χ²`.

use std::f64::consts::PI;

use libm::erfc;

use crate::coeff::{CoefficientField, SpdMatrix};
use crate::error::{Error, Result};
use crate::quadrature::gauss_legendre_on;

/// Truncation level used throughout unless overridden.
pub const DEFAULT_CHI2: f64 = 36.0;

/// Relative slack on the ellipsoid membership test. Lattice points that sit on the
/// boundary in exact arithmetic land within a few ulps of it after round-off; they
/// must be classified consistently on both sides of a node.
pub const INCLUSION_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    pub delta: f64,
    pub chi2: f64,
    pub dim: usize,
    /// Discarded Gaussian tail mass, derived from `chi2` and `dim`.
    pub alpha: f64,
}

impl KernelParams {
    pub fn new(delta: f64, chi2: f64, dim: usize) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::Invalid(format!("delta must be positive, got {delta}")));
        }
        if !(chi2 > 0.0 && chi2.is_finite()) {
            return Err(Error::Invalid(format!("chi2 must be positive, got {chi2}")));
        }
        if dim != 2 && dim != 3 {
            return Err(Error::Invalid(format!("dimension must be 2 or 3, got {dim}")));
        }
        Ok(KernelParams {
            delta,
            chi2,
            dim,
            alpha: alpha_of_chi2(chi2, dim),
        })
    }

    /// `δ² χ²`, the squared radius of the influence region in `A⁻¹` metric.
    pub fn radius2(&self) -> f64 {
        self.delta * self.delta * self.chi2
    }
}

/// Upper-tail probability of the chi-square distribution with `dim` degrees of freedom.
pub fn alpha_of_chi2(chi2: f64, dim: usize) -> f64 {
    let x = 0.5 * chi2;
    match dim {
        2 => (-x).exp(),
        3 => erfc(x.sqrt()) + (2.0 * chi2 / PI).sqrt() * (-x).exp(),
        _ => panic!("alpha_of_chi2: unsupported dimension {dim}"),
    }
}

/// Multivariate normal density with zero mean and covariance `sigma`.
pub fn gaussian_density(z: &[f64], sigma: &SpdMatrix) -> Result<f64> {
    let d = sigma.dim();
    if z.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: z.len(),
        });
    }
    let inv = sigma.inverse()?;
    let q = inv.quadratic_form(z);
    let det = sigma.det();
    if det > f64::MIN_POSITIVE * 1e6 {
        let norm = ((2.0 * PI).powi(d as i32) * det).sqrt();
        return Ok((-0.5 * q).exp() / norm);
    }
    // |Σ| near underflow: factor out the entry scale
    let s = sigma.max_abs_entry();
    let log_det = d as f64 * s.ln() + sigma.scaled(1.0 / s)?.det().ln();
    Ok((-0.5 * (d as f64 * (2.0 * PI).ln() + log_det + q)).exp())
}

/// Kernel frozen at a source point `x`: `γ(x, x + z)` as a function of `z`.
#[derive(Debug, Clone, Copy)]
pub struct LocalKernel {
    pub a: SpdMatrix,
    pub a_inv: SpdMatrix,
    scale: f64,
    inv_two_delta2: f64,
    radius2: f64,
}

impl LocalKernel {
    pub fn new(params: &KernelParams, a: SpdMatrix) -> Result<Self> {
        let d = a.dim();
        let a_inv = a.inverse()?;
        let delta = params.delta;
        // (2/δ²) (2π)^{-d/2} |δ²A|^{-1/2}
        let scale = 2.0 / (delta * delta)
            / ((2.0 * PI).powf(0.5 * d as f64) * delta.powi(d as i32) * a.det().sqrt());
        Ok(LocalKernel {
            a,
            a_inv,
            scale,
            inv_two_delta2: 0.5 / (delta * delta),
            radius2: params.radius2(),
        })
    }

    pub fn at(params: &KernelParams, field: &CoefficientField, x: &[f64]) -> Result<Self> {
        Self::new(params, field.eval(x)?)
    }

    /// `(y - x)ᵀ A⁻¹ (y - x)` for offset `z = y - x`.
    #[inline]
    pub fn metric(&self, z: &[f64]) -> f64 {
        self.a_inv.quadratic_form(z)
    }

    #[inline]
    pub fn contains_metric(&self, q: f64) -> bool {
        q <= self.radius2 * (1.0 + INCLUSION_RTOL)
    }

    /// Untruncated `γ` from a precomputed metric value.
    #[inline]
    pub fn gamma_from_metric(&self, q: f64) -> f64 {
        self.scale * (-q * self.inv_two_delta2).exp()
    }

    #[inline]
    pub fn truncated(&self, z: &[f64]) -> f64 {
        let q = self.metric(z);
        if self.contains_metric(q) {
            self.gamma_from_metric(q)
        } else {
            0.0
        }
    }

    pub fn untruncated(&self, z: &[f64]) -> f64 {
        self.gamma_from_metric(self.metric(z))
    }
}

fn offset(x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    Ok(y.iter().zip(x).map(|(a, b)| a - b).collect())
}

/// Truncated kernel `γ_α(x, y)`.
pub fn kernel_eval(params: &KernelParams, field: &CoefficientField, x: &[f64], y: &[f64]) -> Result<f64> {
    let z = offset(x, y)?;
    Ok(LocalKernel::at(params, field, x)?.truncated(&z))
}

/// Whether `y` lies in the influence region of `x` (boundary included).
pub fn in_influence(params: &KernelParams, a_at_x: &SpdMatrix, x: &[f64], y: &[f64]) -> Result<bool> {
    let z = offset(x, y)?;
    let q = a_at_x.inverse()?.quadratic_form(&z);
    Ok(q <= params.radius2() * (1.0 + INCLUSION_RTOL))
}

/// Kernel moments over the truncated region at a frozen matrix `A`.
#[derive(Debug, Clone)]
pub struct MomentReport {
    /// `∫ γ_α dy`
    pub zeroth: f64,
    /// `∫ γ_α (y - x) dy`
    pub first: Vec<f64>,
    /// `½ ∫ γ_α (y - x)(y - x)ᵀ dy`, which approximates `A`.
    pub second: [[f64; 3]; 3],
}

/// Computes the moments in whitened coordinates `y - x = δ L w` (`L Lᵀ = A`), where
/// the region is the ball `|w|² ≤ χ²`. Radial Gauss–Legendre times a periodic
/// trapezoid rule in angle resolves the ball boundary exactly.
pub fn moment_diagnostics(params: &KernelParams, a: &SpdMatrix) -> MomentReport {
    let d = a.dim();
    let radius = params.chi2.sqrt();
    let radial = gauss_legendre_on(64, 0.0, radius);
    let norm = (2.0 * PI).powf(-0.5 * d as f64);

    let mut m0 = 0.0;
    let mut m1 = [0.0f64; 3];
    let mut m2 = [[0.0f64; 3]; 3];
    let mut accumulate = |w: [f64; 3], weight: f64| {
        let r2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
        let g = weight * norm * (-0.5 * r2).exp();
        m0 += g;
        for i in 0..3 {
            m1[i] += g * w[i];
            for j in 0..3 {
                m2[i][j] += g * w[i] * w[j];
            }
        }
    };
    let n_phi = 64;
    let dphi = 2.0 * PI / n_phi as f64;
    if d == 2 {
        for (&r, &wr) in radial.nodes.iter().zip(&radial.weights) {
            for k in 0..n_phi {
                let t = k as f64 * dphi;
                accumulate([r * t.cos(), r * t.sin(), 0.0], wr * r * dphi);
            }
        }
    } else {
        let polar = gauss_legendre_on(32, -1.0, 1.0);
        for (&r, &wr) in radial.nodes.iter().zip(&radial.weights) {
            for (&c, &wc) in polar.nodes.iter().zip(&polar.weights) {
                let s = (1.0 - c * c).sqrt();
                for k in 0..n_phi {
                    let t = k as f64 * dphi;
                    accumulate([r * s * t.cos(), r * s * t.sin(), r * c], wr * wc * r * r * dphi);
                }
            }
        }
    }

    let l = a.cholesky();
    let delta = params.delta;
    let zeroth = 2.0 / (delta * delta) * m0;
    let first = (0..d)
        .map(|i| 2.0 / delta * (0..d).map(|k| l[i][k] * m1[k]).sum::<f64>())
        .collect();
    let mut second = [[0.0; 3]; 3];
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for p in 0..d {
                for q in 0..d {
                    s += l[i][p] * m2[p][q] * l[j][q];
                }
            }
            second[i][j] = s;
        }
    }
    MomentReport {
        zeroth,
        first,
        second,
    }
}
