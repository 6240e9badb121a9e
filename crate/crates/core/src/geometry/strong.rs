//! Learned inverse of a small metric.
//!
//! A single-hidden-layer perceptron reads the distinct entries of `g₀`
//! (diagonal `A` followed by the strict lower triangle `P`) and emits the
//! entries of a symmetric `g̃₀`. Training minimizes `‖I − g₀ g̃₀‖²_F`, so at
//! the optimum `g̃₀ = g₀⁻¹`.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::FactoredLneMetric;
use crate::error::{Error, Result};

/// Largest metric dimension accepted; the model is dense.
pub const MAX_STRONG_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct StrongApproxOptions {
    pub hidden_width: usize,
    pub steps: usize,
    pub seed: u64,
    /// Initial Adam step size; decays to 1% of this value on a cosine schedule.
    pub learning_rate: f64,
}

impl Default for StrongApproxOptions {
    fn default() -> Self {
        Self {
            hidden_width: 32,
            steps: 3000,
            seed: 0,
            learning_rate: 1e-2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StrongApproximation {
    /// The learned `g̃₀`, symmetric by construction.
    pub approx_inverse: Array2<f64>,
    /// `‖I − g₀ g̃₀‖²_F` at the final parameters.
    pub final_loss: f64,
    /// `(step, best loss so far)` at regular checkpoints.
    pub trace: Vec<(usize, f64)>,
}

struct Mlp {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step<'a>(&mut self, lr: f64, params: impl Iterator<Item = (&'a mut f64, f64)>) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-12;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for (k, (p, g)) in params.enumerate() {
            self.m[k] = B1 * self.m[k] + (1.0 - B1) * g;
            self.v[k] = B2 * self.v[k] + (1.0 - B2) * g * g;
            let mhat = self.m[k] / c1;
            let vhat = self.v[k] / c2;
            *p -= lr * mhat / (vhat.sqrt() + EPS);
        }
    }
}

/// Packs `(A, P)`: diagonal first, then the strict lower triangle row by row.
fn pack(g: &Array2<f64>) -> Array1<f64> {
    let n = g.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    out.extend((0..n).map(|i| g[[i, i]]));
    for i in 0..n {
        for j in 0..i {
            out.push(g[[i, j]]);
        }
    }
    Array1::from(out)
}

fn unpack(y: &Array1<f64>, n: usize) -> Array2<f64> {
    let mut g = Array2::zeros((n, n));
    for i in 0..n {
        g[[i, i]] = y[i];
    }
    let mut k = n;
    for i in 0..n {
        for j in 0..i {
            g[[i, j]] = y[k];
            g[[j, i]] = y[k];
            k += 1;
        }
    }
    g
}

/// Gradient of the loss w.r.t. the packed outputs, given `dL/dG̃`.
fn pack_grad(dg: &Array2<f64>) -> Array1<f64> {
    let n = dg.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    out.extend((0..n).map(|i| dg[[i, i]]));
    for i in 0..n {
        for j in 0..i {
            out.push(dg[[i, j]] + dg[[j, i]]);
        }
    }
    Array1::from(out)
}

fn residual(g0: &Array2<f64>, approx: &Array2<f64>) -> Array2<f64> {
    Array2::eye(g0.nrows()) - g0.dot(approx)
}

/// Trains the perceptron for `options.steps` full-batch Adam steps.
pub fn strong_approx_train(
    metric: &FactoredLneMetric,
    options: &StrongApproxOptions,
) -> Result<StrongApproximation> {
    let n = metric.dim();
    if n > MAX_STRONG_DIM {
        return Err(Error::Argument(format!(
            "strong approximation is dense and limited to n <= {MAX_STRONG_DIM}, got {n}"
        )));
    }
    if !metric.is_positive_definite() {
        return Err(Error::SingularMetric(format!(
            "smallest eigenvalue {} is not positive",
            metric.smallest_eigenvalue()
        )));
    }
    if options.hidden_width == 0 {
        return Err(Error::Argument("hidden width must be positive".into()));
    }

    let g0 = metric.to_dense();
    let x = pack(&g0);
    let m = x.len();
    let h = options.hidden_width;

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let s1 = 1.0 / (m as f64).sqrt();
    let s2 = 1.0 / (h as f64).sqrt();
    let mut net = Mlp {
        w1: Array2::from_shape_fn((h, m), |_| rng.random_range(-s1..s1)),
        b1: Array1::zeros(h),
        w2: Array2::from_shape_fn((m, h), |_| rng.random_range(-s2..s2)),
        b2: Array1::zeros(m),
    };
    let mut adam = Adam::new(h * m + h + m * h + m);

    let every = (options.steps / 100).max(1);
    let mut trace = Vec::new();
    let mut best = f64::INFINITY;

    for step in 0..options.steps {
        // Forward.
        let pre = net.w1.dot(&x) + &net.b1;
        let hidden = pre.mapv(f64::tanh);
        let y = net.w2.dot(&hidden) + &net.b2;
        let approx = unpack(&y, n);
        let r = residual(&g0, &approx);
        let loss = r.iter().map(|v| v * v).sum::<f64>();
        best = best.min(loss);
        if step % every == 0 {
            trace.push((step, best));
        }

        // Backward: dL/dG̃ = −2 g₀ᵀ R.
        let dg = g0.t().dot(&r) * -2.0;
        let dy = pack_grad(&dg);
        let dw2 = outer(&dy, &hidden);
        let dhidden = net.w2.t().dot(&dy);
        let dpre = &dhidden * &hidden.mapv(|t| 1.0 - t * t);
        let dw1 = outer(&dpre, &x);

        let progress = step as f64 / options.steps.max(1) as f64;
        let lr = options.learning_rate
            * (0.01 + 0.99 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let params = net
            .w1
            .iter_mut()
            .zip(dw1.iter().copied())
            .chain(net.b1.iter_mut().zip(dpre.iter().copied()))
            .chain(net.w2.iter_mut().zip(dw2.iter().copied()))
            .chain(net.b2.iter_mut().zip(dy.iter().copied()));
        adam.step(lr, params);
    }

    let hidden = (net.w1.dot(&x) + &net.b1).mapv(f64::tanh);
    let approx = unpack(&(net.w2.dot(&hidden) + &net.b2), n);
    let final_loss = residual(&g0, &approx).iter().map(|v| v * v).sum::<f64>();
    best = best.min(final_loss);
    trace.push((options.steps, best));

    Ok(StrongApproximation {
        approx_inverse: approx,
        final_loss,
        trace,
    })
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{lne_metric, ParamVector};

    fn frob(a: &Array2<f64>) -> f64 {
        a.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn pack_unpack_roundtrip() {
        let g = Array2::from_shape_fn((4, 4), |(i, j)| (i.min(j) * 10 + i.max(j)) as f64);
        assert_eq!(unpack(&pack(&g), 4), g);
    }

    #[test]
    fn identity_is_a_fixed_point() {
        let metric = FactoredLneMetric::from_factor(vec![0.0; 4], 1.0).unwrap();
        let out = strong_approx_train(&metric, &StrongApproxOptions::default()).unwrap();
        assert!(out.final_loss < 1e-3, "loss {}", out.final_loss);
        assert!(frob(&(&out.approx_inverse - &Array2::<f64>::eye(4))) < 0.05);
    }

    #[test]
    fn approximates_the_rank_one_inverse() {
        let metric = lne_metric(&ParamVector::from_slice(&[0.5, -0.5]).unwrap(), 1.0).unwrap();
        let out = strong_approx_train(&metric, &StrongApproxOptions::default()).unwrap();
        let u = metric.factor();
        let s = 1.0 - (u[0] * u[0] + u[1] * u[1]);
        let exact = Array2::from_shape_fn((2, 2), |(i, j)| {
            f64::from(u8::from(i == j)) + u[i] * u[j] / s
        });
        let rel = frob(&(&out.approx_inverse - &exact)) / frob(&exact);
        assert!(rel < 0.05, "relative error {rel}");
    }

    #[test]
    fn best_so_far_trace_is_monotone() {
        let metric = FactoredLneMetric::from_factor(vec![0.2, -0.1, 0.3], 1.0).unwrap();
        let out = strong_approx_train(&metric, &StrongApproxOptions::default()).unwrap();
        assert!(out.trace.windows(2).all(|w| w[1].1 <= w[0].1));
    }

    #[test]
    fn rejects_singular_and_oversized_metrics() {
        let singular = FactoredLneMetric::from_factor(vec![0.8, 0.8], 1.0).unwrap();
        assert!(matches!(
            strong_approx_train(&singular, &StrongApproxOptions::default()),
            Err(Error::SingularMetric(_))
        ));
        let big = FactoredLneMetric::from_factor(vec![0.0; 65], 1.0).unwrap();
        assert!(matches!(
            strong_approx_train(&big, &StrongApproxOptions::default()),
            Err(Error::Argument(_))
        ));
    }
}
