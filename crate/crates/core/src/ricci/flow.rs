//! Explicit Ricci-flow steps on dense metrics.
//!
//! The sandbox places a symmetric perturbation `d(x)` of the identity on a
//! ring of positions. Each branch metric at position `x` is read from the
//! ring at an offset derived from the translation spec, so the flow increment
//! becomes a discrete second difference along the ring. Branches are read
//! through a `[1, 2, 1] / 4` filter; without it the unit-step second
//! difference amplifies the highest ring frequency threefold per step.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Branch, TranslationSpec};
use crate::error::{Error, Result};

/// Number of ring positions in the sandbox.
pub const RING_LEN: usize = 32;

/// Highest ring frequency used to seed the perturbation.
const MAX_FREQUENCY: usize = RING_LEN / 8;

/// Dense metrics of the four translated branches at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchMetrics {
    pub k1: Array2<f64>,
    pub k2: Array2<f64>,
    pub j1: Array2<f64>,
    pub j2: Array2<f64>,
}

impl BranchMetrics {
    /// All four branches equal to `g`.
    pub fn uniform(g: Array2<f64>) -> Self {
        Self {
            k1: g.clone(),
            k2: g.clone(),
            j1: g.clone(),
            j2: g,
        }
    }

    pub fn get(&self, branch: Branch) -> &Array2<f64> {
        match branch {
            Branch::K1 => &self.k1,
            Branch::K2 => &self.k2,
            Branch::J1 => &self.j1,
            Branch::J2 => &self.j2,
        }
    }

    fn check(&self) -> Result<()> {
        let shape = self.k1.dim();
        if shape.0 != shape.1 {
            return Err(Error::Shape(format!("metric must be square, got {shape:?}")));
        }
        if [&self.k2, &self.j1, &self.j2].iter().any(|g| g.dim() != shape) {
            return Err(Error::Shape("branch metrics have different shapes".into()));
        }
        Ok(())
    }
}

/// The increment `(g|k1 − g|k2)/(k1−k2) − (g|j1 − g|j2)/(j1−j2)`.
pub fn flow_increment(branches: &BranchMetrics, spec: &TranslationSpec) -> Result<Array2<f64>> {
    branches.check()?;
    Ok((&branches.k1 - &branches.k2) / spec.row_delta()
        - (&branches.j1 - &branches.j2) / spec.col_delta())
}

/// `g(t+1)|k1 = g|k1 + (g|k1 − g|k2)/(k1−k2) − (g|j1 − g|j2)/(j1−j2)`.
pub fn flow_step(branches: &BranchMetrics, spec: &TranslationSpec) -> Result<Array2<f64>> {
    Ok(&branches.k1 + &flow_increment(branches, spec)?)
}

/// Ring of perturbations `d(x)`; the metric at `x` is `δ + d(x)`.
#[derive(Debug, Clone)]
pub struct FlowSandbox {
    ring: Vec<Array2<f64>>,
    spec: TranslationSpec,
    /// Ring offset of each branch relative to the k1 position, in
    /// [`Branch::ALL`] order.
    offsets: [isize; 4],
}

impl FlowSandbox {
    /// Seeds a zero-mean, band-limited perturbation with total Frobenius
    /// norm `amplitude`.
    pub fn new(n: usize, amplitude: f64, seed: u64, spec: TranslationSpec) -> Result<Self> {
        if n == 0 {
            return Err(Error::Argument("sandbox dimension must be positive".into()));
        }
        if !(amplitude >= 0.0 && amplitude.is_finite()) {
            return Err(Error::Argument(format!(
                "amplitude must be >= 0, got {amplitude}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut random_symmetric = || {
            let a = Array2::from_shape_fn((n, n), |_| StandardNormal.sample(&mut rng));
            (&a + &a.t()) * 0.5
        };
        let mut ring = vec![Array2::<f64>::zeros((n, n)); RING_LEN];
        for f in 1..=MAX_FREQUENCY {
            let a: Array2<f64> = random_symmetric();
            let b: Array2<f64> = random_symmetric();
            for (x, d) in ring.iter_mut().enumerate() {
                let w = std::f64::consts::TAU * (f * x) as f64 / RING_LEN as f64;
                d.scaled_add(w.cos(), &a);
                d.scaled_add(w.sin(), &b);
            }
        }
        let mut sandbox = Self {
            ring,
            spec,
            offsets: branch_offsets(&spec),
        };
        let norm = sandbox.perturbation_norm();
        let scale = if norm > 0.0 { amplitude / norm } else { 0.0 };
        sandbox.ring.iter_mut().for_each(|d| *d *= scale);
        Ok(sandbox)
    }

    pub fn dim(&self) -> usize {
        self.ring[0].nrows()
    }

    /// `sqrt(Σ_x ‖d(x)‖²_F)` over the k1 branch field.
    pub fn perturbation_norm(&self) -> f64 {
        self.ring
            .iter()
            .flat_map(|d| d.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Smoothed branch metrics seen from ring position `x`.
    pub fn branches_at(&self, x: usize) -> BranchMetrics {
        let eye = Array2::<f64>::eye(self.dim());
        let read = |pos: isize| &self.ring[pos.rem_euclid(RING_LEN as isize) as usize];
        let at = |b: Branch| {
            let pos = x as isize + self.offsets[b.index()];
            let mut g = read(pos) * 0.5;
            g.scaled_add(0.25, read(pos - 1));
            g.scaled_add(0.25, read(pos + 1));
            g + &eye
        };
        BranchMetrics {
            k1: at(Branch::K1),
            k2: at(Branch::K2),
            j1: at(Branch::J1),
            j2: at(Branch::J2),
        }
    }

    /// Applies [`flow_step`] at every position, then re-reads the other
    /// branches from the updated field.
    pub fn step(&mut self) -> Result<()> {
        let eye = Array2::<f64>::eye(self.dim());
        let next = (0..RING_LEN)
            .map(|x| Ok(flow_step(&self.branches_at(x), &self.spec)? - &eye))
            .collect::<Result<Vec<_>>>()?;
        self.ring = next;
        Ok(())
    }
}

/// Places `k2` at `k2 − k1` from `k1`, and the column pair so that its
/// difference quotient is taken on the opposite side of `x`. The increment is
/// then a forward minus a backward difference.
fn branch_offsets(spec: &TranslationSpec) -> [isize; 4] {
    let a = (spec.k2() - spec.k1()) as isize;
    let b = -a.signum() * (spec.j1() - spec.j2()).abs() as isize;
    let dj = (spec.j1() - spec.j2()) as isize;
    let (p_j1, p_j2) = if dj.signum() == b.signum() { (b, 0) } else { (0, b) };
    [0, a, p_j1, p_j2]
}

/// Runs the sandbox and returns `‖g(t)|k1 − δ‖` normalized by the initial
/// amplitude for `t = 0..=steps`. A zero amplitude yields all zeros.
pub fn flow_sandbox(
    n: usize,
    amplitude: f64,
    steps: usize,
    seed: u64,
    spec: &TranslationSpec,
) -> Result<Vec<f64>> {
    let mut sandbox = FlowSandbox::new(n, amplitude, seed, *spec)?;
    let norm0 = sandbox.perturbation_norm();
    let scale = if norm0 > 0.0 { 1.0 / norm0 } else { 0.0 };
    let mut trace = Vec::with_capacity(steps + 1);
    trace.push(norm0 * scale);
    for _ in 0..steps {
        sandbox.step()?;
        trace.push(sandbox.perturbation_norm() * scale);
    }
    Ok(trace)
}
