//! The weak-disorder constant Λ and the second-moment bounds built on it.
//!
//! With kernels in operator form the integrand of Λ is the matrix
//! `P_t |R| P_tᵀ`, and `Λ = sup_{x,x′} ∫₀^∞ (P_t |R| P_tᵀ)(x,x′) dt`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::VertexId;
use crate::heat::{Generator, GreenMatrix, HeatKernelCache};
use crate::noise::CovarianceKernel;
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisorderReport {
    pub lambda: f64,
    /// Bound on the neglected integral over `(T, ∞)`; zero for exact methods.
    pub tail_bound: f64,
    pub arg_sup: (VertexId, VertexId),
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub margin: Option<f64>,
}

impl DisorderReport {
    pub fn with_margin(mut self, beta: f64, lipschitz: f64) -> Self {
        self.margin = Some(weak_disorder_margin(beta, lipschitz, self.lambda));
        self
    }
}

/// `Λ = ½ sup_{x,x′} G(x,x′)/μ(x′)` for white noise.
pub fn lambda_exact_white<T: Real>(green: &GreenMatrix<T>, gen: &Generator<T>) -> DisorderReport {
    let g = green.matrix();
    let mu = gen.measure();
    let mut best = (f64::NEG_INFINITY, 0, 0);
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let v = (g[(i, j)] / mu[j]).to_f64_lossy() * 0.5;
            if v > best.0 {
                best = (v, i, j);
            }
        }
    }
    DisorderReport {
        lambda: best.0,
        tail_bound: 0.0,
        arg_sup: (gen.interior()[best.1], gen.interior()[best.2]),
        margin: None,
    }
}

/// `∫₀^T P_t A P_tᵀ dt` with a bound on the remainder over `(T, ∞)`.
#[derive(Clone, Debug)]
pub struct SandwichIntegral<T: Real> {
    pub matrix: DMatrix<T>,
    pub tail_bound: f64,
}

/// Trapezoid rule on the cache grid with the Euler–Maclaurin end
/// correction `−dt²/12·(F′(T) − F′(0))`, where `F′ = L·F + F·Lᵀ`.
///
/// The tail uses `‖P_t‖ ≤ √(μmax/μmin)·e^{−gap·t}`.
pub fn sandwich_integral<T: Real>(
    gen: &Generator<T>,
    cache: &HeatKernelCache<T>,
    a: &DMatrix<T>,
    horizon: T,
) -> Result<SandwichIntegral<T>> {
    let k = gen.dim();
    if a.shape() != (k, k) {
        return Err(Error::Dimension { expected: k, got: a.nrows() });
    }
    let dt = cache.dt();
    let steps_f = (horizon / dt).to_f64_lossy();
    let steps = steps_f.round();
    if !(horizon > T::zero()) || (steps_f - steps).abs() > 1e-6 || steps < 1.0 {
        return Err(Error::InvalidArgument(format!("horizon {horizon} must be a positive multiple of dt = {dt}")));
    }
    if a.iter().all(|v| *v == T::zero()) {
        return Ok(SandwichIntegral { matrix: DMatrix::zeros(k, k), tail_bound: 0.0 });
    }
    let gap = cache.gap().to_f64_lossy();
    if gap <= 1e-12 {
        return Err(Error::Diverges);
    }
    let p = cache.step_matrix();
    let l = gen.matrix();
    let deriv = |f: &DMatrix<T>| l * f + f * l.transpose();

    let mut f = a.clone();
    let mut sum = &f * T::lit(0.5);
    let d0 = deriv(&f);
    let n = steps as usize;
    for j in 1..=n {
        f = p * &f * p.transpose();
        if j < n {
            sum += &f;
        }
    }
    sum += &f * T::lit(0.5);
    let d_end = deriv(&f);
    let correction = (d_end - d0) * (dt * dt / T::lit(12.0));
    let matrix = sum * dt - correction;

    let mu = gen.measure();
    let mu_max = mu.iter().copied().fold(T::zero(), |x, y| x.max(y)).to_f64_lossy();
    let mu_min = mu.iter().copied().fold(T::max_value().unwrap(), |x, y| x.min(y)).to_f64_lossy();
    let a_norm = a
        .clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|v| v.abs().to_f64_lossy())
        .fold(0.0, f64::max);
    let t = horizon.to_f64_lossy();
    let tail_bound = (mu_max / mu_min) * a_norm * (-2.0 * gap * t).exp() / (2.0 * gap);
    Ok(SandwichIntegral { matrix, tail_bound })
}

/// Λ by direct time quadrature of `P_t |R| P_tᵀ` up to `horizon`.
pub fn lambda_quadrature<T: Real>(
    gen: &Generator<T>,
    cache: &HeatKernelCache<T>,
    kernel: &CovarianceKernel<T>,
    horizon: T,
) -> Result<DisorderReport> {
    let abs_r = kernel.matrix().map(|v| v.abs());
    let integral = sandwich_integral(gen, cache, &abs_r, horizon)?;
    let m = &integral.matrix;
    let mut best = (0.0f64, 0, 0);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let v = m[(i, j)].to_f64_lossy();
            if v > best.0 {
                best = (v, i, j);
            }
        }
    }
    Ok(DisorderReport {
        lambda: best.0,
        tail_bound: integral.tail_bound,
        arg_sup: (gen.interior()[best.1], gen.interior()[best.2]),
        margin: None,
    })
}

/// `1 − (βL_f)²Λ`; nonpositive values mean strong disorder.
pub fn weak_disorder_margin(beta: f64, lipschitz: f64, lambda: f64) -> f64 {
    1.0 - (beta * lipschitz).powi(2) * lambda
}

/// Errors unless the margin is positive.
pub fn require_weak_disorder(beta: f64, lipschitz: f64, lambda: f64) -> Result<f64> {
    let margin = weak_disorder_margin(beta, lipschitz, lambda);
    if margin > 0.0 {
        Ok(margin)
    } else {
        Err(Error::StrongDisorder(1.0 - margin))
    }
}

/// Geometric-series bound on `sup_{t,x} E[u(t,x)²]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeumannBound {
    /// `ρ = (βL_f)²Λ`.
    pub rho: f64,
    /// `‖u₀‖_∞ / (1−ρ)`.
    pub linear: f64,
    /// `‖u₀‖²_∞ / (1−ρ)`.
    pub squared: f64,
    pub formula: String,
}

impl NeumannBound {
    /// The bound used in checks: the larger of the two forms.
    pub fn value(&self) -> f64 {
        self.linear.max(self.squared)
    }
}

pub fn neumann_second_moment_bound(u0_sup: f64, beta: f64, lipschitz: f64, lambda: f64) -> Result<NeumannBound> {
    let margin = require_weak_disorder(beta, lipschitz, lambda)?;
    Ok(NeumannBound {
        rho: 1.0 - margin,
        linear: u0_sup / margin,
        squared: u0_sup * u0_sup / margin,
        formula: "E[u(t,x)^2] <= ||u0||_inf * sum_{k>=0} ((beta L_f)^2 Lambda)^k".into(),
    })
}
