//! Finite-difference Ricci tensor of a sampled 2-D metric.
//!
//! Christoffel symbols come from central differences of `g`, the Riemann
//! tensor from central differences of the Christoffel symbols, and
//! `Ric_jk = R^i_{ijk}`. The result is second-order accurate in the spacing
//! and defined two samples in from every edge.

use crate::error::{Error, Result};

pub type Mat2 = [[f64; 2]; 2];

/// Metric samples on a regular grid. Row index runs along coordinate 0,
/// column index along coordinate 1.
#[derive(Debug, Clone)]
pub struct MetricField {
    rows: usize,
    cols: usize,
    spacing: f64,
    samples: Vec<Mat2>,
}

impl MetricField {
    pub fn new(rows: usize, cols: usize, spacing: f64, samples: Vec<Mat2>) -> Result<Self> {
        if rows < 5 || cols < 5 {
            return Err(Error::Shape(format!(
                "metric field needs at least 5x5 samples, got {rows}x{cols}"
            )));
        }
        if samples.len() != rows * cols {
            return Err(Error::Shape(format!(
                "expected {} samples, got {}",
                rows * cols,
                samples.len()
            )));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::Argument(format!("spacing must be positive, got {spacing}")));
        }
        for (k, g) in samples.iter().enumerate() {
            let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
            if !(g[0][0] > 0.0 && det > 0.0) || (g[0][1] - g[1][0]).abs() > 1e-12 {
                return Err(Error::Domain(format!(
                    "sample ({}, {}) is not symmetric positive definite",
                    k / cols,
                    k % cols
                )));
            }
        }
        Ok(Self {
            rows,
            cols,
            spacing,
            samples,
        })
    }

    /// Samples `f(x0 + i·h, x1 + j·h)`.
    pub fn from_fn(
        rows: usize,
        cols: usize,
        origin: [f64; 2],
        spacing: f64,
        f: impl Fn(f64, f64) -> Mat2,
    ) -> Result<Self> {
        let samples = (0..rows * cols)
            .map(|k| {
                let x0 = origin[0] + (k / cols) as f64 * spacing;
                let x1 = origin[1] + (k % cols) as f64 * spacing;
                f(x0, x1)
            })
            .collect();
        Self::new(rows, cols, spacing, samples)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn spacing(&self) -> f64 {
        self.spacing
    }
    pub fn at(&self, i: usize, j: usize) -> &Mat2 {
        &self.samples[i * self.cols + j]
    }
}

/// Ricci tensor on the interior `[2, rows−2) × [2, cols−2)`.
#[derive(Debug, Clone)]
pub struct RicciField {
    rows: usize,
    cols: usize,
    values: Vec<Mat2>,
}

impl RicciField {
    /// Value at grid sample `(i, j)`; `None` within two samples of an edge.
    pub fn at(&self, i: usize, j: usize) -> Option<&Mat2> {
        let inside = (2..self.rows - 2).contains(&i) && (2..self.cols - 2).contains(&j);
        inside.then(|| &self.values[(i - 2) * (self.cols - 4) + (j - 2)])
    }
}

type Christoffel = [[[f64; 2]; 2]; 2];

fn inverse(g: &Mat2) -> Mat2 {
    let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
    [[g[1][1] / det, -g[0][1] / det], [-g[1][0] / det, g[0][0] / det]]
}

/// Central difference of a per-sample quantity along both axes.
fn central<T: Copy>(
    get: impl Fn(usize, usize) -> T,
    i: usize,
    j: usize,
    h: f64,
    sub: impl Fn(T, T, f64) -> T,
) -> [T; 2] {
    [
        sub(get(i + 1, j), get(i - 1, j), 2.0 * h),
        sub(get(i, j + 1), get(i, j - 1), 2.0 * h),
    ]
}

fn mat_diff(a: Mat2, b: Mat2, d: f64) -> Mat2 {
    std::array::from_fn(|r| std::array::from_fn(|c| (a[r][c] - b[r][c]) / d))
}

fn christoffel_diff(a: Christoffel, b: Christoffel, d: f64) -> Christoffel {
    std::array::from_fn(|k| std::array::from_fn(|i| std::array::from_fn(|j| (a[k][i][j] - b[k][i][j]) / d)))
}

/// `Γ^k_ij = ½ g^{kl} (∂_i g_lj + ∂_j g_li − ∂_l g_ij)`.
fn christoffel(g: &Mat2, dg: &[Mat2; 2]) -> Christoffel {
    let gi = inverse(g);
    std::array::from_fn(|k| {
        std::array::from_fn(|i| {
            std::array::from_fn(|j| {
                (0..2)
                    .map(|l| 0.5 * gi[k][l] * (dg[i][l][j] + dg[j][l][i] - dg[l][i][j]))
                    .sum()
            })
        })
    })
}

/// Finite-difference Ricci tensor of `field`.
#[allow(clippy::needless_range_loop)]
pub fn ricci_oracle(field: &MetricField) -> Result<RicciField> {
    let (rows, cols, h) = (field.rows, field.cols, field.spacing);
    // Christoffel symbols one sample in from the edge.
    let mut gamma = vec![[[[0.0; 2]; 2]; 2]; rows * cols];
    for i in 1..rows - 1 {
        for j in 1..cols - 1 {
            let dg = central(|a, b| *field.at(a, b), i, j, h, mat_diff);
            gamma[i * cols + j] = christoffel(field.at(i, j), &dg);
        }
    }
    let mut values = Vec::with_capacity((rows - 4) * (cols - 4));
    for i in 2..rows - 2 {
        for j in 2..cols - 2 {
            let g = gamma[i * cols + j];
            // dgamma[p][k][a][b] = ∂_p Γ^k_ab
            let dgamma = central(|a, b| gamma[a * cols + b], i, j, h, christoffel_diff);
            let ric: Mat2 = std::array::from_fn(|a| {
                std::array::from_fn(|b| {
                    let mut r = 0.0;
                    for p in 0..2 {
                        r += dgamma[p][p][a][b] - dgamma[a][p][p][b];
                        for q in 0..2 {
                            r += g[q][a][b] * g[p][p][q] - g[q][p][b] * g[p][a][q];
                        }
                    }
                    r
                })
            });
            if ric.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    layer: 0,
                    detail: format!("non-finite curvature at sample ({i}, {j})"),
                });
            }
            values.push(ric);
        }
    }
    Ok(RicciField { rows, cols, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere(r: f64) -> impl Fn(f64, f64) -> Mat2 {
        move |theta, _phi| [[r * r, 0.0], [0.0, r * r * theta.sin().powi(2)]]
    }

    /// Max relative error of `Ric = g / r²` at `θ = 1`, the grid centre.
    fn sphere_error(h: f64, r: f64) -> f64 {
        let field = MetricField::from_fn(9, 9, [1.0 - 4.0 * h, 0.0], h, sphere(r)).unwrap();
        let ric = ricci_oracle(&field).unwrap();
        let got = ric.at(4, 4).unwrap();
        let s = 1.0f64.sin().powi(2);
        let exact = [[1.0, 0.0], [0.0, s]];
        let mut err = 0.0f64;
        for a in 0..2 {
            for b in 0..2 {
                err = err.max((got[a][b] - exact[a][b]).abs() / exact[1][1]);
            }
        }
        err
    }

    #[test]
    fn flat_metric_has_zero_curvature() {
        let field = MetricField::from_fn(7, 7, [0.0, 0.0], 0.1, |_, _| [[2.0, 0.3], [0.3, 1.0]]).unwrap();
        let ric = ricci_oracle(&field).unwrap();
        assert!(ric.at(3, 3).unwrap().iter().flatten().all(|v| v.abs() < 1e-12));
        assert!(ric.at(1, 3).is_none());
    }

    #[test]
    fn polar_coordinates_are_flat() {
        let field = MetricField::from_fn(9, 9, [1.0, 0.0], 1e-2, |r, _| [[1.0, 0.0], [0.0, r * r]]).unwrap();
        let ric = ricci_oracle(&field).unwrap();
        assert!(ric.at(4, 4).unwrap().iter().flatten().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn sphere_is_second_order() {
        let coarse = sphere_error(1e-2, 1.0);
        let fine = sphere_error(5e-3, 1.0);
        assert!(coarse < 0.02, "coarse error {coarse}");
        let ratio = coarse / fine;
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn sphere_radius_scaling() {
        // Ric of a round sphere does not depend on the radius.
        let field = MetricField::from_fn(9, 9, [0.96, 0.0], 1e-2, sphere(3.0)).unwrap();
        let ric = ricci_oracle(&field).unwrap();
        assert_rel!(ric.at(4, 4).unwrap()[0][0], 1.0, 2e-2);
    }

    #[test]
    fn invalid_fields_are_rejected() {
        assert!(matches!(
            MetricField::from_fn(4, 9, [0.0, 0.0], 0.1, |_, _| [[1.0, 0.0], [0.0, 1.0]]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            MetricField::from_fn(5, 5, [0.0, 0.0], 0.1, |_, _| [[1.0, 2.0], [2.0, 1.0]]),
            Err(Error::Domain(_))
        ));
    }
}
