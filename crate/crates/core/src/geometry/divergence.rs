use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ParamVector;
use crate::error::{Error, Result};

/// Separable convex potentials `φ(ξ) = Σ_i φ₁(ξ_i)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ConvexPotential {
    /// `(1/τ²) log cosh(τ x)`; its Bregman divergence is the LNE divergence.
    LogCosh { tau: f64 },
    /// `x² / 2`; its Bregman divergence is the Euclidean one.
    HalfSquare,
    /// `x log x` on `x > 0`.
    NegativeEntropy,
}

impl ConvexPotential {
    pub fn name(&self) -> &'static str {
        match self {
            ConvexPotential::LogCosh { .. } => "log-cosh",
            ConvexPotential::HalfSquare => "half-square",
            ConvexPotential::NegativeEntropy => "negative-entropy",
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            ConvexPotential::LogCosh { tau } if !(tau > 0.0 && tau.is_finite()) => {
                Err(Error::Domain(format!("tau must be positive, got {tau}")))
            }
            _ => Ok(()),
        }
    }

    pub fn in_domain(&self, x: f64) -> bool {
        match self {
            ConvexPotential::NegativeEntropy => x > 0.0 && x.is_finite(),
            _ => x.is_finite(),
        }
    }

    /// One-coordinate value `φ₁(x)`.
    pub fn value1(&self, x: f64) -> f64 {
        match *self {
            ConvexPotential::LogCosh { tau } => log_cosh(tau * x) / (tau * tau),
            ConvexPotential::HalfSquare => 0.5 * x * x,
            ConvexPotential::NegativeEntropy => x * x.ln(),
        }
    }

    /// One-coordinate derivative `φ₁′(x)`.
    pub fn grad1(&self, x: f64) -> f64 {
        match *self {
            ConvexPotential::LogCosh { tau } => (tau * x).tanh() / tau,
            ConvexPotential::HalfSquare => x,
            ConvexPotential::NegativeEntropy => x.ln() + 1.0,
        }
    }

    /// One-coordinate second derivative `φ₁″(x)`, the diagonal of the Hessian.
    pub fn hessian1(&self, x: f64) -> f64 {
        match *self {
            ConvexPotential::LogCosh { tau } => {
                let t = (tau * x).tanh();
                1.0 - t * t
            }
            ConvexPotential::HalfSquare => 1.0,
            ConvexPotential::NegativeEntropy => 1.0 / x,
        }
    }

    /// Per-coordinate Bregman term, unclamped.
    fn bregman1(&self, xp: f64, x: f64) -> f64 {
        self.value1(xp) - self.value1(x) - (xp - x) * self.grad1(x)
    }

    /// Range used when sampling test points.
    fn sample_range(&self) -> (f64, f64) {
        match self {
            ConvexPotential::NegativeEntropy => (0.05, 2.0),
            _ => (-2.0, 2.0),
        }
    }
}

impl fmt::Display for ConvexPotential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConvexPotential::LogCosh { tau } => write!(f, "log-cosh(tau={tau})"),
            other => f.write_str(other.name()),
        }
    }
}

/// A divergence value, always `≥ 0`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct DivergenceValue(f64);

impl DivergenceValue {
    /// Rounding can push a mathematically nonnegative sum a few ulps below
    /// zero; those are reported as zero.
    fn from_raw(raw: f64) -> Self {
        DivergenceValue(raw.max(0.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// `log cosh(x)` without overflow: `|x| + log((1 + e^{−2|x|}) / 2)`.
///
/// Below `|x| = 1` it uses `log1p(2 sinh²(x/2))`, which keeps full relative
/// precision as `x → 0`.
pub fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        let s = (0.5 * a).sinh();
        (2.0 * s * s).ln_1p()
    } else {
        a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
    }
}

/// The log-cosh potential `Σ_i (1/τ²) log cosh(τ ξ_i)`.
pub fn convex_potential(xi: &ParamVector, tau: f64) -> Result<f64> {
    let phi = ConvexPotential::LogCosh { tau };
    phi.validate()?;
    Ok(xi.values().iter().map(|&x| phi.value1(x)).sum())
}

/// `φ(ξ′) − φ(ξ) − (ξ′ − ξ)·∇φ(ξ)`.
pub fn bregman_divergence(
    phi: ConvexPotential,
    xi_p: &ParamVector,
    xi: &ParamVector,
) -> Result<DivergenceValue> {
    Ok(DivergenceValue::from_raw(bregman_raw(phi, xi_p.values(), xi.values())?))
}

fn bregman_raw(phi: ConvexPotential, xp: &[f64], x: &[f64]) -> Result<f64> {
    phi.validate()?;
    if xp.len() != x.len() {
        return Err(Error::Shape(format!(
            "divergence arguments have lengths {} and {}",
            xp.len(),
            x.len()
        )));
    }
    if let Some(bad) = xp.iter().chain(x).find(|&&v| !phi.in_domain(v)) {
        return Err(Error::Domain(format!("{bad} is outside the domain of {phi}")));
    }
    Ok(xp.iter().zip(x).map(|(&a, &b)| phi.bregman1(a, b)).sum())
}

/// The LNE divergence
/// `Σ_i [(1/τ²) log(cosh(τξ′_i)/cosh(τξ_i)) − (1/τ)(ξ′_i − ξ_i) tanh(τξ_i)]`.
pub fn lne_divergence(xi_p: &ParamVector, xi: &ParamVector, tau: f64) -> Result<DivergenceValue> {
    Ok(DivergenceValue::from_raw(lne_raw(
        xi_p.values(),
        xi.values(),
        tau,
    )?))
}

fn lne_raw(xp: &[f64], x: &[f64], tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Domain(format!("tau must be positive, got {tau}")));
    }
    if xp.len() != x.len() {
        return Err(Error::Shape(format!(
            "divergence arguments have lengths {} and {}",
            xp.len(),
            x.len()
        )));
    }
    let inv_tau2 = 1.0 / (tau * tau);
    Ok(xp
        .iter()
        .zip(x)
        .map(|(&a, &b)| {
            inv_tau2 * (log_cosh(tau * a) - log_cosh(tau * b)) - (a - b) * (tau * b).tanh() / tau
        })
        .sum())
}

/// Second-order Taylor behaviour of a divergence in one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct TaylorCheck {
    pub xi: f64,
    /// `φ″(ξ)`, the 1-D metric.
    pub metric: f64,
    pub steps: Vec<f64>,
    /// `|2·D[ξ : ξ+h] − g(ξ) h²|` per step.
    pub errors: Vec<f64>,
    /// Log-log slope between the two smallest steps; `None` when the
    /// expansion is exact to rounding.
    pub slope: Option<f64>,
}

impl TaylorCheck {
    /// Third-order remainder means a slope near 3; anything below 2.5 fails.
    pub fn passes(&self) -> bool {
        self.slope.is_none_or(|s| s >= 2.5)
    }
}

/// Outcome of [`divergence_axioms_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct AxiomReport {
    pub potential: ConvexPotential,
    pub dim: usize,
    pub trials: usize,
    pub nonnegativity_violations: usize,
    pub identity_violations: usize,
    pub min_value: f64,
    pub taylor: TaylorCheck,
    /// Human-readable descriptions, capped at 10 entries.
    pub violations: Vec<String>,
}

impl AxiomReport {
    pub fn total_violations(&self) -> usize {
        self.nonnegativity_violations + self.identity_violations + usize::from(!self.taylor.passes())
    }
}

impl fmt::Display for AxiomReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "divergence axioms: {} n={} trials={}",
            self.potential, self.dim, self.trials
        )?;
        writeln!(
            f,
            "  nonnegativity violations: {} (min value {:.3e})",
            self.nonnegativity_violations, self.min_value
        )?;
        writeln!(f, "  identity violations: {}", self.identity_violations)?;
        let slope = match self.taylor.slope {
            Some(s) => format!("{s:.3}"),
            None => "exact".to_string(),
        };
        writeln!(
            f,
            "  taylor at xi={}: g={:.6} slope={} ({})",
            self.taylor.xi,
            self.taylor.metric,
            slope,
            if self.taylor.passes() { "ok" } else { "FAIL" }
        )?;
        for v in &self.violations {
            writeln!(f, "  violation: {v}")?;
        }
        write!(f, "  total violations: {}", self.total_violations())
    }
}

/// Tolerance for the sign and coincidence criteria.
const AXIOM_TOL: f64 = 1e-12;
const TAYLOR_STEPS: [f64; 3] = [1e-1, 1e-2, 1e-3];

/// Samples `trials` point pairs in `n` dimensions and checks nonnegativity,
/// identity of indiscernibles, and the 1-D second-order expansion.
pub fn divergence_axioms_check(
    potential: ConvexPotential,
    n: usize,
    trials: usize,
    seed: u64,
) -> Result<AxiomReport> {
    potential.validate()?;
    if n == 0 {
        return Err(Error::Argument("dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = potential.sample_range();
    let mut report_nonneg = 0;
    let mut report_ident = 0;
    let mut min_value = f64::INFINITY;
    let mut violations = Vec::new();
    let note = |msg: String, list: &mut Vec<String>| {
        if list.len() < 10 {
            list.push(msg);
        }
    };

    for trial in 0..trials {
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        let d_ab = bregman_raw(potential, &a, &b)?;
        let d_ba = bregman_raw(potential, &b, &a)?;
        for d in [d_ab, d_ba] {
            min_value = min_value.min(d);
            if d < -AXIOM_TOL {
                report_nonneg += 1;
                note(format!("trial {trial}: negative divergence {d:e}"), &mut violations);
            }
        }
        if a != b && (d_ab <= 0.0 || d_ba <= 0.0) {
            report_ident += 1;
            note(
                format!("trial {trial}: distinct points with zero divergence"),
                &mut violations,
            );
        }
        let d_aa = bregman_raw(potential, &a, &a)?;
        if d_aa.abs() > AXIOM_TOL {
            report_ident += 1;
            note(format!("trial {trial}: D[x:x] = {d_aa:e}"), &mut violations);
        }
    }

    let taylor = taylor_check(potential)?;
    if !taylor.passes() {
        note(
            format!("second-order expansion slope {:?} below 2.5", taylor.slope),
            &mut violations,
        );
    }

    Ok(AxiomReport {
        potential,
        dim: n,
        trials,
        nonnegativity_violations: report_nonneg,
        identity_violations: report_ident,
        min_value: if trials == 0 { 0.0 } else { min_value },
        taylor,
        violations,
    })
}

fn taylor_check(potential: ConvexPotential) -> Result<TaylorCheck> {
    let xi = match potential {
        ConvexPotential::NegativeEntropy => 0.7,
        _ => 0.3,
    };
    let g = potential.hessian1(xi);
    let mut errors = Vec::with_capacity(TAYLOR_STEPS.len());
    let mut floors = Vec::with_capacity(TAYLOR_STEPS.len());
    for &h in &TAYLOR_STEPS {
        let d = bregman_raw(potential, &[xi], &[xi + h])?;
        errors.push((2.0 * d - g * h * h).abs());
        // Cancellation floor of the three terms that make up D.
        let magnitude = potential.value1(xi).abs()
            + potential.value1(xi + h).abs()
            + (h * potential.grad1(xi + h)).abs();
        floors.push(100.0 * f64::EPSILON * magnitude);
    }
    let (h1, h2) = (TAYLOR_STEPS[1], TAYLOR_STEPS[2]);
    let (e1, e2) = (errors[1], errors[2]);
    let exact = e1 <= floors[1] && e2 <= floors[2];
    let slope = (!exact).then(|| (e1.ln() - e2.ln()) / (h1.ln() - h2.ln()));
    Ok(TaylorCheck {
        xi,
        metric: g,
        steps: TAYLOR_STEPS.to_vec(),
        errors,
        slope,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(x: &[f64]) -> ParamVector {
        ParamVector::from_slice(x).unwrap()
    }

    const LOG_COSH_TENTH: f64 = 0.004_991_688_821_646_530_3;

    #[test]
    fn potential_examples() {
        assert_eq!(convex_potential(&pv(&[0.0, 0.0]), 1.0).unwrap(), 0.0);
        assert_rel!(convex_potential(&pv(&[0.1]), 1.0).unwrap(), LOG_COSH_TENTH, 1e-14);
        assert_rel!(
            convex_potential(&pv(&[50.0]), 1.0).unwrap(),
            50.0 - std::f64::consts::LN_2,
            1e-15
        );
    }

    #[test]
    fn log_cosh_does_not_overflow() {
        assert_rel!(log_cosh(1000.0), 1000.0 - std::f64::consts::LN_2, 1e-15);
        assert_rel!(log_cosh(-1000.0), 1000.0 - std::f64::consts::LN_2, 1e-15);
        assert!(log_cosh(0.0).abs() < 1e-17);
    }

    #[test]
    fn potential_rejects_bad_tau() {
        assert!(matches!(
            convex_potential(&pv(&[1.0]), 0.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn bregman_examples() {
        let d = bregman_divergence(ConvexPotential::HalfSquare, &pv(&[3.0]), &pv(&[1.0])).unwrap();
        assert_eq!(d.value(), 2.0);

        for phi in [
            ConvexPotential::HalfSquare,
            ConvexPotential::LogCosh { tau: 0.4 },
            ConvexPotential::NegativeEntropy,
        ] {
            let x = pv(&[0.3, 1.7, 0.9]);
            assert_eq!(bregman_divergence(phi, &x, &x).unwrap().value(), 0.0);
        }

        let d = bregman_divergence(ConvexPotential::LogCosh { tau: 1.0 }, &pv(&[0.1]), &pv(&[0.0]))
            .unwrap();
        assert_rel!(d.value(), LOG_COSH_TENTH, 1e-14);
    }

    #[test]
    fn negative_entropy_domain_error() {
        let err = bregman_divergence(ConvexPotential::NegativeEntropy, &pv(&[-0.5]), &pv(&[1.0]));
        assert!(matches!(err, Err(Error::Domain(_))));
    }

    #[test]
    fn lne_examples() {
        let x = pv(&[0.2, -1.3]);
        assert_eq!(lne_divergence(&x, &x, 0.5).unwrap().value(), 0.0);
        assert_rel!(
            lne_divergence(&pv(&[0.1]), &pv(&[0.0]), 1.0).unwrap().value(),
            LOG_COSH_TENTH,
            1e-14
        );
    }

    #[test]
    fn lne_shape_error() {
        assert!(matches!(
            lne_divergence(&pv(&[0.1, 0.2]), &pv(&[0.0]), 1.0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn half_square_taylor_is_exact() {
        let report = divergence_axioms_check(ConvexPotential::HalfSquare, 4, 50, 3).unwrap();
        assert_eq!(report.taylor.slope, None);
        for (&h, &e) in report.taylor.steps.iter().zip(&report.taylor.errors) {
            assert!(e <= 1e-14, "h={h} err={e}");
        }
    }

    #[test]
    fn log_cosh_one_dimensional_metric() {
        let report =
            divergence_axioms_check(ConvexPotential::LogCosh { tau: 1.0 }, 1, 10, 0).unwrap();
        assert_rel!(report.taylor.metric, 0.915_136_961_826_629_2, 1e-14);
        let slope = report.taylor.slope.unwrap();
        assert!((slope - 3.0).abs() < 0.1, "slope {slope}");

        // Same value from a central second difference of the potential.
        let phi = ConvexPotential::LogCosh { tau: 1.0 };
        let h = 1e-4;
        let fd = (phi.value1(0.3 + h) - 2.0 * phi.value1(0.3) + phi.value1(0.3 - h)) / (h * h);
        assert_rel!(fd, report.taylor.metric, 1e-6);
    }

    #[test]
    fn axioms_hold_for_log_cosh() {
        let report =
            divergence_axioms_check(ConvexPotential::LogCosh { tau: 0.5 }, 8, 1000, 11).unwrap();
        assert_eq!(report.total_violations(), 0, "{report}");
    }

    #[test]
    fn axioms_hold_for_negative_entropy() {
        let report = divergence_axioms_check(ConvexPotential::NegativeEntropy, 5, 300, 5).unwrap();
        assert_eq!(report.total_violations(), 0, "{report}");
    }
}
