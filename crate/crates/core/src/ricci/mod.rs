//! Discrete Ricci curvature over input translations.
//!
//! Each layer carries four metric factors `u|m`, one per translated copy of
//! the input batch (`m ∈ {k1, k2, j1, j2}`), with `γ|m = −u|m u|mᵀ`. The
//! curvature is the difference-quotient combination
//!
//! ```text
//! C = (γ|k1 − γ|k2)/(k1 − k2) − (γ|j1 − γ|j2)/(j1 − j2)
//! ```
//!
//! held as `Σ_m c_m u|m u|mᵀ`. Its squared Frobenius norm follows from the
//! 4×4 Gram matrix `G_{mm′} = u|m · u|m′` as `Σ c_m c_m′ G_{mm′}²`, so no
//! `n × n` matrix is ever built.

mod flow;
mod oracle;

pub use flow::{flow_increment, flow_sandbox, flow_step, BranchMetrics, FlowSandbox, RING_LEN};
pub use oracle::{ricci_oracle, MetricField, RicciField};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geometry::dot;

/// Largest translation offset accepted, in pixels.
pub const MAX_OFFSET: i32 = 4;

/// One of the four translated copies of the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    K1,
    K2,
    J1,
    J2,
}

impl Branch {
    pub const ALL: [Branch; 4] = [Branch::K1, Branch::K2, Branch::J1, Branch::J2];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Branch::K1 => "k1",
            Branch::K2 => "k2",
            Branch::J1 => "j1",
            Branch::J2 => "j2",
        }
    }
}

/// Row offsets `k1, k2` and column offsets `j1, j2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TranslationSpec {
    k1: i32,
    k2: i32,
    j1: i32,
    j2: i32,
}

impl Default for TranslationSpec {
    fn default() -> Self {
        Self {
            k1: 1,
            k2: 2,
            j1: 1,
            j2: 2,
        }
    }
}

impl TranslationSpec {
    pub fn new(k1: i32, k2: i32, j1: i32, j2: i32) -> Result<Self> {
        if k1 == k2 || j1 == j2 {
            return Err(Error::Argument(format!(
                "translation offsets must differ (k1={k1}, k2={k2}, j1={j1}, j2={j2})"
            )));
        }
        if [k1, k2, j1, j2].iter().any(|o| o.abs() > MAX_OFFSET) {
            return Err(Error::Argument(format!(
                "translation offsets are limited to {MAX_OFFSET} pixels"
            )));
        }
        Ok(Self { k1, k2, j1, j2 })
    }

    pub fn k1(&self) -> i32 {
        self.k1
    }
    pub fn k2(&self) -> i32 {
        self.k2
    }
    pub fn j1(&self) -> i32 {
        self.j1
    }
    pub fn j2(&self) -> i32 {
        self.j2
    }

    /// `k1 − k2`
    pub fn row_delta(&self) -> f64 {
        f64::from(self.k1 - self.k2)
    }

    /// `j1 − j2`
    pub fn col_delta(&self) -> f64 {
        f64::from(self.j1 - self.j2)
    }

    /// Pixel shift `(dy, dx)` of a branch; `k` offsets move rows, `j` offsets columns.
    pub fn shift(&self, branch: Branch) -> (i32, i32) {
        match branch {
            Branch::K1 => (self.k1, 0),
            Branch::K2 => (self.k2, 0),
            Branch::J1 => (0, self.j1),
            Branch::J2 => (0, self.j2),
        }
    }

    /// Coefficients `c_m` with `C = Σ_m c_m u|m u|mᵀ`, in [`Branch::ALL`] order.
    /// The sign accounts for `γ = −u uᵀ`.
    pub fn curvature_coefficients(&self) -> [f64; 4] {
        let dk = self.row_delta();
        let dj = self.col_delta();
        [-1.0 / dk, 1.0 / dk, 1.0 / dj, -1.0 / dj]
    }
}

impl std::fmt::Display for TranslationSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{},{}", self.k1, self.k2, self.j1, self.j2)
    }
}

impl std::str::FromStr for TranslationSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<i32> = s
            .split(',')
            .map(|p| p.trim().parse::<i32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Argument(format!("translations '{s}': {e}")))?;
        match parts[..] {
            [k1, k2, j1, j2] => TranslationSpec::new(k1, k2, j1, j2),
            _ => Err(Error::Argument(format!(
                "translations '{s}' must list k1,k2,j1,j2"
            ))),
        }
    }
}

/// The four factors of one layer, indexed by [`Branch::index`].
pub type LayerFactors = [Vec<f64>; 4];

/// Per-layer factors `u|m` at one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSnapshot {
    layers: Vec<LayerFactors>,
    time_index: u64,
}

impl MetricSnapshot {
    pub fn new(layers: Vec<LayerFactors>, time_index: u64) -> Result<Self> {
        for (l, factors) in layers.iter().enumerate() {
            let n = factors[0].len();
            if factors.iter().any(|f| f.len() != n) {
                return Err(Error::Shape(format!(
                    "layer {l}: translation factors have unequal lengths"
                )));
            }
            if factors.iter().flatten().any(|x| !(x.abs() < 1.0)) {
                return Err(Error::Domain(format!(
                    "layer {l}: factor entries must lie in (-1, 1)"
                )));
            }
        }
        Ok(Self { layers, time_index })
    }

    /// Builds a snapshot from optional factors, failing on any gap.
    pub fn from_partial(layers: Vec<[Option<Vec<f64>>; 4]>, time_index: u64) -> Result<Self> {
        let mut full = Vec::with_capacity(layers.len());
        for (l, parts) in layers.into_iter().enumerate() {
            let [a, b, c, d] = parts;
            match (a, b, c, d) {
                (Some(a), Some(b), Some(c), Some(d)) => full.push([a, b, c, d]),
                (a, b, c, d) => {
                    let missing: Vec<&str> = [a.is_none(), b.is_none(), c.is_none(), d.is_none()]
                        .iter()
                        .zip(Branch::ALL)
                        .filter(|(m, _)| **m)
                        .map(|(_, br)| br.name())
                        .collect();
                    return Err(Error::IncompleteSnapshot(format!(
                        "layer {l} is missing translation(s) {}",
                        missing.join(", ")
                    )));
                }
            }
        }
        Self::new(full, time_index)
    }

    /// Every branch of every layer set to the same factor.
    pub fn uniform(layers: Vec<Vec<f64>>, time_index: u64) -> Result<Self> {
        Self::new(
            layers
                .into_iter()
                .map(|u| [u.clone(), u.clone(), u.clone(), u])
                .collect(),
            time_index,
        )
    }

    pub fn layers(&self) -> &[LayerFactors] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &LayerFactors {
        &self.layers[l]
    }

    pub fn factor(&self, layer: usize, branch: Branch) -> &[f64] {
        &self.layers[layer][branch.index()]
    }

    pub fn time_index(&self) -> u64 {
        self.time_index
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

/// `Σ_m c_m u|m u|mᵀ` for one layer, borrowed from a snapshot.
#[derive(Debug, Clone, Copy)]
pub struct FactoredCombination<'a> {
    pub coefficients: [f64; 4],
    pub factors: [&'a [f64]; 4],
}

impl FactoredCombination<'_> {
    pub fn dim(&self) -> usize {
        self.factors[0].len()
    }

    pub fn gram(&self) -> [[f64; 4]; 4] {
        gram(&self.factors)
    }

    /// `‖Σ_m c_m u|m u|mᵀ‖²_F` from the Gram matrix, `O(n)`.
    pub fn frobenius_norm_sq(&self) -> f64 {
        shifted_frobenius_sq(&self.coefficients, &self.gram(), 0.0, self.dim())
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|i| {
                (0..4)
                    .map(|m| self.coefficients[m] * self.factors[m][i] * self.factors[m][i])
                    .sum()
            })
            .collect()
    }

    /// Dense form; quadratic memory.
    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.dim();
        Array2::from_shape_fn((n, n), |(i, j)| {
            (0..4)
                .map(|m| self.coefficients[m] * self.factors[m][i] * self.factors[m][j])
                .sum()
        })
    }
}

fn gram(factors: &[&[f64]; 4]) -> [[f64; 4]; 4] {
    let mut g = [[0.0; 4]; 4];
    for a in 0..4 {
        for b in a..4 {
            let v = dot(factors[a], factors[b]);
            g[a][b] = v;
            g[b][a] = v;
        }
    }
    g
}

/// `‖Σ_m a_m u|m u|mᵀ + b·δ‖²_F` given the Gram matrix and dimension `n`.
fn shifted_frobenius_sq(a: &[f64; 4], g: &[[f64; 4]; 4], b: f64, n: usize) -> f64 {
    let mut total = 0.0;
    for m in 0..4 {
        for p in 0..4 {
            total += a[m] * a[p] * g[m][p] * g[m][p];
        }
    }
    let trace: f64 = (0..4).map(|m| a[m] * g[m][m]).sum();
    total + 2.0 * b * trace + b * b * n as f64
}

fn borrow_layer(factors: &LayerFactors) -> [&[f64]; 4] {
    [&factors[0], &factors[1], &factors[2], &factors[3]]
}

/// The curvature combination for every layer of the snapshot.
pub fn discrete_ricci<'a>(
    snapshot: &'a MetricSnapshot,
    spec: &TranslationSpec,
) -> Vec<FactoredCombination<'a>> {
    let coefficients = spec.curvature_coefficients();
    snapshot
        .layers
        .iter()
        .map(|f| FactoredCombination {
            coefficients,
            factors: borrow_layer(f),
        })
        .collect()
}

/// `N = Σ_layers ‖C‖²_F`.
pub fn regularization_n(snapshot: &MetricSnapshot, spec: &TranslationSpec) -> f64 {
    discrete_ricci(snapshot, spec)
        .iter()
        .map(FactoredCombination::frobenius_norm_sq)
        .sum()
}

/// Upper and lower estimates of `N` for metrics ε-close to the snapshot's.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizationBounds {
    pub lower: f64,
    pub upper: f64,
}

/// Evaluates the ε-ball upper and lower expressions layer by layer:
///
/// ```text
/// upper = 1/(1+ε) ‖((1+ε)²γ|k1 − γ|k2)/(k1−k2) − (γ|j1 − (1+ε)²γ|j2)/(j1−j2)
///                   + (ε²+2ε)/(k1−k2) δ + (ε²+2ε)/(j1−j2) δ‖²
/// lower = 1/(1+ε) ‖(γ|k1 − (1+ε)²γ|k2)/(k1−k2) − ((1+ε)²γ|j1 − γ|j2)/(j1−j2)
///                   − (ε²+2ε)/(k1−k2) δ − (ε²+2ε)/(j1−j2) δ‖²
/// ```
///
/// Both collapse to `N` at `ε = 0`. They are estimates, not guaranteed
/// bounds: at `ε > 0` a metric at the centre of the ball can fall outside
/// them.
pub fn regularization_bounds(
    snapshot: &MetricSnapshot,
    spec: &TranslationSpec,
    eps: f64,
) -> Result<RegularizationBounds> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::Argument(format!("eps must be >= 0, got {eps}")));
    }
    let dk = spec.row_delta();
    let dj = spec.col_delta();
    let s = (1.0 + eps) * (1.0 + eps);
    let c = eps * eps + 2.0 * eps;
    let delta_coef = c / dk + c / dj;
    // γ = −u uᵀ flips the sign of every factor term.
    let upper_a = [-s / dk, 1.0 / dk, 1.0 / dj, -s / dj];
    let lower_a = [-1.0 / dk, s / dk, s / dj, -1.0 / dj];
    let mut bounds = RegularizationBounds {
        lower: 0.0,
        upper: 0.0,
    };
    for factors in snapshot.layers() {
        let g = gram(&borrow_layer(factors));
        let n = factors[0].len();
        bounds.upper += shifted_frobenius_sq(&upper_a, &g, delta_coef, n) / (1.0 + eps);
        bounds.lower += shifted_frobenius_sq(&lower_a, &g, -delta_coef, n) / (1.0 + eps);
    }
    Ok(bounds)
}

/// Per-weight flow residual on the diagonal `Ξ_jj = u_j²`:
///
/// ```text
/// Ξ(t+1)|k1 − Ξ(t)|k1 + (Ξ(t)|k2 − Ξ(t)|k1)/(k1−k2) − (Ξ(t)|j2 − Ξ(t)|j1)/(j1−j2)
/// ```
pub fn rf_condition_layer(
    current: &LayerFactors,
    next_k1: &[f64],
    spec: &TranslationSpec,
    out: &mut [f64],
) {
    let dk = spec.row_delta();
    let dj = spec.col_delta();
    let [k1, k2, j1, j2] = current;
    for (i, o) in out.iter_mut().enumerate() {
        let sq = |v: &[f64]| v[i] * v[i];
        *o = sq(next_k1) - sq(k1) + (sq(k2) - sq(k1)) / dk - (sq(j2) - sq(j1)) / dj;
    }
}

/// Gradient mask: `true` where `|residual_j| ≤ β`.
pub fn rf_mask(
    current: &MetricSnapshot,
    next: &MetricSnapshot,
    spec: &TranslationSpec,
    beta: f64,
) -> Result<Vec<Vec<bool>>> {
    if !(beta > 0.0) {
        return Err(Error::Argument(format!("beta must be positive, got {beta}")));
    }
    if next.time_index() != current.time_index() + 1 {
        return Err(Error::Argument(format!(
            "snapshots must be consecutive, got times {} and {}",
            current.time_index(),
            next.time_index()
        )));
    }
    if current.num_layers() != next.num_layers() {
        return Err(Error::Shape(format!(
            "snapshots have {} and {} layers",
            current.num_layers(),
            next.num_layers()
        )));
    }
    let mut masks = Vec::with_capacity(current.num_layers());
    for (l, (cur, nxt)) in current.layers().iter().zip(next.layers()).enumerate() {
        let n = cur[0].len();
        if nxt[0].len() != n {
            return Err(Error::Shape(format!(
                "layer {l}: factor lengths {} and {} differ",
                n,
                nxt[0].len()
            )));
        }
        let mut residual = vec![0.0; n];
        rf_condition_layer(cur, &nxt[0], spec, &mut residual);
        masks.push(residual.iter().map(|r| r.abs() <= beta).collect());
    }
    Ok(masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_snapshot(rng: &mut ChaCha8Rng, layers: &[usize], t: u64) -> MetricSnapshot {
        let layers = layers
            .iter()
            .map(|&n| {
                std::array::from_fn(|_| (0..n).map(|_| rng.random_range(-0.6..0.6)).collect())
            })
            .collect();
        MetricSnapshot::new(layers, t).unwrap()
    }

    fn dense_curvature(f: &LayerFactors, spec: &TranslationSpec) -> Array2<f64> {
        let n = f[0].len();
        let gamma = |u: &Vec<f64>| Array2::from_shape_fn((n, n), |(i, j)| -u[i] * u[j]);
        (gamma(&f[0]) - gamma(&f[1])) / spec.row_delta()
            - (gamma(&f[2]) - gamma(&f[3])) / spec.col_delta()
    }

    #[test]
    fn spec_validation() {
        assert!(TranslationSpec::new(1, 1, 1, 2).is_err());
        assert!(TranslationSpec::new(1, 2, 3, 3).is_err());
        assert!(TranslationSpec::new(1, 5, 1, 2).is_err());
        assert!(TranslationSpec::new(-4, 4, 0, 1).is_ok());
        let spec: TranslationSpec = "1, 2, 1, 2".parse().unwrap();
        assert_eq!(spec, TranslationSpec::default());
        assert!("1,2,3".parse::<TranslationSpec>().is_err());
    }

    #[test]
    fn equal_branches_give_zero_curvature() {
        let snap = MetricSnapshot::uniform(vec![vec![0.3, -0.2, 0.5]], 0).unwrap();
        let spec = TranslationSpec::default();
        let c = discrete_ricci(&snap, &spec);
        assert!(c[0].to_dense().iter().all(|&v| v.abs() < 1e-15));
        assert_eq!(regularization_n(&snap, &spec), 0.0);
    }

    #[test]
    fn single_surviving_term() {
        let spec = TranslationSpec::new(2, 1, 1, 2).unwrap();
        let snap = MetricSnapshot::new(
            vec![[vec![0.5, 0.0], vec![0.0, 0.0], vec![0.3, 0.1], vec![0.3, 0.1]]],
            0,
        )
        .unwrap();
        let c = discrete_ricci(&snap, &spec);
        let dense = c[0].to_dense();
        assert_close!(dense[[0, 0]], -0.25, 1e-15);
        assert_close!(dense[[0, 1]], 0.0, 1e-15);
        assert_close!(c[0].frobenius_norm_sq().sqrt(), 0.25, 1e-15);
        // N = ‖u‖⁴ for a single surviving term.
        assert_close!(regularization_n(&snap, &spec), 0.0625, 1e-15);
    }

    #[test]
    fn incomplete_snapshot_is_rejected() {
        let err = MetricSnapshot::from_partial(
            vec![[Some(vec![0.1]), None, Some(vec![0.1]), Some(vec![0.2])]],
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::IncompleteSnapshot(ref m) if m.contains("k2")));
    }

    #[test]
    fn gram_form_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for spec in [
            TranslationSpec::default(),
            TranslationSpec::new(-3, 1, 4, -2).unwrap(),
        ] {
            for _ in 0..20 {
                let snap = random_snapshot(&mut rng, &[16, 32, 5], 0);
                let mut dense_total = 0.0;
                for (layer, comb) in snap.layers().iter().zip(discrete_ricci(&snap, &spec)) {
                    let d = dense_curvature(layer, &spec);
                    let dense = d.iter().map(|v| v * v).sum::<f64>();
                    assert_rel!(comb.frobenius_norm_sq(), dense, 1e-10);
                    let diag = comb.diagonal();
                    for i in 0..diag.len() {
                        assert_close!(diag[i], d[[i, i]], 1e-14);
                    }
                    dense_total += dense;
                }
                assert_rel!(regularization_n(&snap, &spec), dense_total, 1e-10);
            }
        }
    }

    #[test]
    fn bounds_collapse_at_zero_eps() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let snap = random_snapshot(&mut rng, &[12, 7], 0);
        let spec = TranslationSpec::default();
        let b = regularization_bounds(&snap, &spec, 0.0).unwrap();
        let n = regularization_n(&snap, &spec);
        assert_rel!(b.lower, n, 1e-12);
        assert_rel!(b.upper, n, 1e-12);
    }

    #[test]
    fn bounds_on_identical_translations_are_delta_only() {
        // With equal branches, every γ difference cancels except the
        // (1+ε)² reweighting, which combines with the δ terms into a
        // multiple of g₀ = δ + γ.
        let u = vec![0.2, -0.4, 0.1];
        let snap = MetricSnapshot::uniform(vec![u.clone()], 0).unwrap();
        let spec = TranslationSpec::default();
        let eps = 0.1;
        let b = regularization_bounds(&snap, &spec, eps).unwrap();
        let c = eps * eps + 2.0 * eps;
        let n = u.len();
        let g0 = Array2::from_shape_fn((n, n), |(i, j)| {
            f64::from(u8::from(i == j)) - u[i] * u[j]
        });
        let g0_sq: f64 = g0.iter().map(|v| v * v).sum();
        // (1/(k1−k2) + 1/(j1−j2)) = −2 for the default offsets.
        let expected = 4.0 * c * c * g0_sq / (1.0 + eps);
        assert_rel!(b.upper, expected, 1e-12);
        assert_rel!(b.lower, expected, 1e-12);
    }

    #[test]
    fn bounds_are_not_a_sandwich_at_the_ball_centre() {
        // g(t) = g₀ lies in every ε-ball around g₀, and for identical
        // translations its N is zero, yet the lower expression is positive.
        let snap = MetricSnapshot::uniform(vec![vec![0.2, -0.4, 0.1]], 0).unwrap();
        let spec = TranslationSpec::default();
        let b = regularization_bounds(&snap, &spec, 0.05).unwrap();
        assert_eq!(regularization_n(&snap, &spec), 0.0);
        assert!(b.lower > 0.0);
    }

    #[test]
    fn bounds_reject_negative_eps() {
        let snap = MetricSnapshot::uniform(vec![vec![0.1]], 0).unwrap();
        assert!(regularization_bounds(&snap, &TranslationSpec::default(), -0.1).is_err());
    }

    #[test]
    fn rf_mask_examples() {
        let spec = TranslationSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cur = random_snapshot(&mut rng, &[6], 3);
        let next = random_snapshot(&mut rng, &[6], 4);
        let all = rf_mask(&cur, &next, &spec, 1e300).unwrap();
        assert!(all[0].iter().all(|&m| m));

        let still = MetricSnapshot::uniform(vec![vec![0.3, -0.1]], 0).unwrap();
        let still_next = MetricSnapshot::uniform(vec![vec![0.3, -0.1]], 1).unwrap();
        assert_eq!(
            rf_mask(&still, &still_next, &spec, 1e-12).unwrap(),
            vec![vec![true, true]]
        );
    }

    #[test]
    fn rf_mask_hand_built_violation() {
        // Weight 0 is stationary. Weight 1 grows from 0.2 to 0.5 in the k1
        // branch while all translations agree: residual 0.25 − 0.04 = 0.21.
        let spec = TranslationSpec::default();
        let cur = MetricSnapshot::uniform(vec![vec![0.1, 0.2]], 0).unwrap();
        let next = MetricSnapshot::uniform(vec![vec![0.1, 0.5]], 1).unwrap();
        let mut residual = vec![0.0; 2];
        rf_condition_layer(cur.layer(0), next.factor(0, Branch::K1), &spec, &mut residual);
        assert_close!(residual[0], 0.0, 1e-16);
        assert_close!(residual[1], 0.21, 1e-15);
        assert_eq!(rf_mask(&cur, &next, &spec, 0.1).unwrap(), vec![vec![true, false]]);
    }

    #[test]
    fn rf_mask_requires_consecutive_snapshots() {
        let spec = TranslationSpec::default();
        let a = MetricSnapshot::uniform(vec![vec![0.1]], 0).unwrap();
        let b = MetricSnapshot::uniform(vec![vec![0.1]], 2).unwrap();
        assert!(matches!(rf_mask(&a, &b, &spec, 1.0), Err(Error::Argument(_))));
        let c = MetricSnapshot::uniform(vec![vec![0.1, 0.2]], 1).unwrap();
        assert!(matches!(rf_mask(&a, &c, &spec, 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn rf_mask_is_monotone_in_beta() {
        let spec = TranslationSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let cur = random_snapshot(&mut rng, &[40], 0);
        let next = random_snapshot(&mut rng, &[40], 1);
        let mut prev = rf_mask(&cur, &next, &spec, 1e-3).unwrap();
        for beta in [1e-2, 0.05, 0.1, 0.3, 1.0] {
            let m = rf_mask(&cur, &next, &spec, beta).unwrap();
            for (a, b) in prev[0].iter().zip(&m[0]) {
                assert!(!a || *b);
            }
            prev = m;
        }
    }
}
