//! Information geometry of the weight space.
//!
//! A layer's weights `ξ` are a point on a manifold whose metric comes from the
//! Bregman divergence of the log-cosh potential:
//!
//! ```text
//! g₀(ξ) = δ − u uᵀ,   u = tanh(τ ξ)
//! ```
//!
//! The metric is never materialized. [`FactoredLneMetric`] stores `u` and every
//! operation (steepest-descent direction, weak preconditioner, dominance test)
//! runs in `O(n)` through rank-one identities. Dense forms exist for checks
//! on small `n` only.

mod divergence;
mod strong;

pub use divergence::{
    bregman_divergence, convex_potential, divergence_axioms_check, lne_divergence, log_cosh,
    AxiomReport, ConvexPotential, DivergenceValue, TaylorCheck,
};
pub use strong::{strong_approx_train, StrongApproxOptions, StrongApproximation};

use ndarray::Array2;

use crate::error::{Error, Result};

/// Flattened weight coordinates of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layer_id: usize,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layer_id: usize) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Shape("parameter vector must be non-empty".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "parameter vector entry {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self { values, layer_id })
    }

    /// Convenience constructor for layer 0.
    pub fn from_slice(values: &[f64]) -> Result<Self> {
        Self::new(values.to_vec(), 0)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn layer_id(&self) -> usize {
        self.layer_id
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// The metric `g₀ = δ − u uᵀ` stored through its rank-one factor.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredLneMetric {
    u: Vec<f64>,
    tau: f64,
}

impl FactoredLneMetric {
    /// Wraps an existing factor. Every entry must lie strictly inside (−1, 1).
    pub fn from_factor(u: Vec<f64>, tau: f64) -> Result<Self> {
        if u.is_empty() {
            return Err(Error::Shape("metric factor must be non-empty".into()));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Domain(format!("tau must be positive, got {tau}")));
        }
        if let Some(i) = u.iter().position(|x| !(x.abs() < 1.0)) {
            return Err(Error::Domain(format!(
                "factor entry {i} = {} is outside (-1, 1)",
                u[i]
            )));
        }
        Ok(Self { u, tau })
    }

    pub fn factor(&self) -> &[f64] {
        &self.u
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn dim(&self) -> usize {
        self.u.len()
    }

    /// `‖u‖²`
    pub fn factor_norm_sq(&self) -> f64 {
        dot(&self.u, &self.u)
    }

    /// Smallest eigenvalue of the dense form, `1 − ‖u‖²`.
    pub fn smallest_eigenvalue(&self) -> f64 {
        1.0 - self.factor_norm_sq()
    }

    pub fn is_positive_definite(&self) -> bool {
        self.smallest_eigenvalue() > 0.0
    }

    /// Dense `δ − u uᵀ`. Quadratic in memory; meant for small checks.
    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.dim();
        Array2::from_shape_fn((n, n), |(i, j)| {
            let delta = if i == j { 1.0 } else { 0.0 };
            delta - self.u[i] * self.u[j]
        })
    }
}

/// Builds the metric at `ξ`: `u_i = tanh(τ ξ_i)`.
pub fn lne_metric(xi: &ParamVector, tau: f64) -> Result<FactoredLneMetric> {
    check_tau(tau)?;
    let u = xi.values().iter().map(|&x| (tau * x).tanh()).collect();
    // tanh saturates to exactly ±1 in floating point for |τξ| ≳ 19.
    FactoredLneMetric::from_factor(u, tau).map_err(|e| match e {
        Error::Domain(msg) => Error::Domain(format!("{msg}; tau * xi saturates tanh")),
        other => other,
    })
}

/// Strict diagonal dominance of `δ − u uᵀ`, in `O(n)`.
///
/// Row `i` is dominant when `1 − u_i² > |u_i| (S − |u_i|)` with `S = Σ_j |u_j|`.
pub fn dominance_check(metric: &FactoredLneMetric) -> bool {
    let s: f64 = metric.u.iter().map(|x| x.abs()).sum();
    metric.u.iter().all(|&ui| {
        let a = ui.abs();
        1.0 - ui * ui > a * (s - a)
    })
}

/// Exact steepest-descent direction `g₀⁻¹ grad`.
///
/// Uses the rank-one inverse `(δ − u uᵀ)⁻¹ = δ + u uᵀ / (1 − ‖u‖²)`.
pub fn exact_gradient_flow(metric: &FactoredLneMetric, grad: &[f64]) -> Result<Vec<f64>> {
    check_len(metric.dim(), grad.len())?;
    let mut out = grad.to_vec();
    exact_gradient_flow_in_place(metric.factor(), &mut out)?;
    Ok(out)
}

/// In-place form of [`exact_gradient_flow`] over a raw factor.
pub fn exact_gradient_flow_in_place(u: &[f64], grad: &mut [f64]) -> Result<()> {
    check_len(u.len(), grad.len())?;
    let denom = 1.0 - dot(u, u);
    if !(denom > 0.0) {
        return Err(Error::SingularMetric(format!(
            "1 - |u|^2 = {denom} is not positive"
        )));
    }
    let coef = dot(u, grad) / denom;
    for (g, &ui) in grad.iter_mut().zip(u) {
        *g += coef * ui;
    }
    Ok(())
}

/// Weak preconditioner `(δ + u uᵀ) grad`.
///
/// This is a first-order stand-in for the inverse and is only justified when
/// the metric is strictly diagonally dominant. A non-dominant metric is
/// reported through `log::warn!` and the product is still returned.
pub fn weak_gradient_flow(metric: &FactoredLneMetric, grad: &[f64]) -> Result<Vec<f64>> {
    check_len(metric.dim(), grad.len())?;
    if !dominance_check(metric) {
        log::warn!(
            "weak gradient flow on a metric that is not strictly diagonally dominant (|u|^2 = {:.4})",
            metric.factor_norm_sq()
        );
    }
    let mut out = grad.to_vec();
    weak_gradient_flow_in_place(metric.factor(), &mut out);
    Ok(out)
}

/// In-place `(δ + u uᵀ) grad` with no dominance diagnostics. Lengths must match.
pub fn weak_gradient_flow_in_place(u: &[f64], grad: &mut [f64]) {
    debug_assert_eq!(u.len(), grad.len());
    let coef = dot(u, grad);
    for (g, &ui) in grad.iter_mut().zip(u) {
        *g += coef * ui;
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("tau must be positive, got {tau}")))
    }
}

fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "expected a vector of length {expected}, got {found}"
        )))
    }
}
