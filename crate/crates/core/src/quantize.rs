//! Discretizers and the straight-through masks that go with them.
//!
//! `Q¹(x) = E[|x|]·sign(x)` with `sign(0) = +1` and the mean taken over the
//! whole tensor. For `k ≥ 2`, `Qᵏ(x) = clip(round(L·x)/L, −1, 1)` with
//! `L = 2^{k−1} − 1` and rounding half away from zero, so every output is an
//! exact grid point `m/L`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    BinaryMeanScale,
    FixedPointGrid,
}

/// Bit width plus the rule it implies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantScheme {
    bits: u32,
}

impl QuantScheme {
    pub fn new(bits: u32) -> Result<Self> {
        if bits == 0 || bits > 31 {
            return Err(Error::Argument(format!(
                "bit width must be in 1..=31, got {bits}"
            )));
        }
        Ok(Self { bits })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn mode(&self) -> QuantMode {
        if self.bits == 1 {
            QuantMode::BinaryMeanScale
        } else {
            QuantMode::FixedPointGrid
        }
    }

    /// `2^{k−1} − 1`, the grid denominator for k-bit schemes.
    pub fn grid_denominator(&self) -> Option<i64> {
        (self.bits >= 2).then(|| (1i64 << (self.bits - 1)) - 1)
    }

    /// All fixed-point grid values in increasing order; empty for 1-bit.
    pub fn grid_points(&self) -> Vec<f64> {
        match self.grid_denominator() {
            Some(l) => (-l..=l).map(|m| m as f64 / l as f64).collect(),
            None => Vec::new(),
        }
    }

    /// Quantizes a whole tensor in place. Empty input is left unchanged.
    pub fn apply_in_place(&self, x: &mut [f64]) {
        match self.grid_denominator() {
            None => binary_in_place(x),
            Some(l) => x.iter_mut().for_each(|v| *v = grid_round(*v, l)),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        self.apply_in_place(&mut out);
        out
    }

    pub fn describe(&self) -> String {
        match self.mode() {
            QuantMode::BinaryMeanScale => "1-bit mean-scale".to_string(),
            QuantMode::FixedPointGrid => format!("{}-bit fixed-point grid", self.bits),
        }
    }
}

/// `E[|x|]·sign(x)` over the whole tensor, `sign(0) = +1`.
pub fn quantize_1bit(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Shape("cannot quantize an empty tensor".into()));
    }
    check_finite(x)?;
    let mut out = x.to_vec();
    binary_in_place(&mut out);
    Ok(out)
}

/// `clip(round((2^{k−1}−1)·x) / (2^{k−1}−1), −1, 1)`.
pub fn quantize_kbit(x: &[f64], k: u32) -> Result<Vec<f64>> {
    if k < 2 {
        return Err(Error::Argument(format!(
            "k-bit grid needs k >= 2 (use quantize_1bit for k = 1), got {k}"
        )));
    }
    let scheme = QuantScheme::new(k)?;
    check_finite(x)?;
    Ok(scheme.apply(x))
}

fn check_finite(x: &[f64]) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Domain(format!("entry {i} is not finite ({})", x[i]))),
        None => Ok(()),
    }
}

fn binary_in_place(x: &mut [f64]) {
    if x.is_empty() {
        return;
    }
    let scale = x.iter().map(|v| v.abs()).sum::<f64>() / x.len() as f64;
    for v in x.iter_mut() {
        *v = if *v >= 0.0 { scale } else { -scale };
    }
}

#[inline]
fn grid_round(v: f64, l: i64) -> f64 {
    let lf = l as f64;
    // f64::round rounds half away from zero.
    let m = (lf * v).round().clamp(-lf, lf);
    m / lf
}

/// Indicator `|x_i| ≤ 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SteMask {
    mask: Vec<bool>,
}

impl SteMask {
    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// The mask as 0/1 values.
    pub fn to_f64(&self) -> Vec<f64> {
        self.mask.iter().map(|&m| f64::from(u8::from(m))).collect()
    }

    /// Zeroes gradient entries outside the clip region.
    pub fn apply(&self, grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.mask.len());
        for (g, &keep) in grad.iter_mut().zip(&self.mask) {
            if !keep {
                *g = 0.0;
            }
        }
    }
}

pub fn ste_mask(x: &[f64]) -> SteMask {
    SteMask {
        mask: x.iter().map(|v| v.abs() <= 1.0).collect(),
    }
}

/// `w̃ = tanh(w) / max|tanh(w)|` and its diagonal Jacobian
/// `(1 − tanh²(w)) / max|tanh(w)|`.
pub fn dorefa_transform(w: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_finite(w)?;
    let t: Vec<f64> = w.iter().map(|v| v.tanh()).collect();
    let max = t.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return Err(Error::DegenerateInput(
            "tanh reweighting of an all-zero tensor".into(),
        ));
    }
    let w_tilde = t.iter().map(|v| v / max).collect();
    let jac = t.iter().map(|v| (1.0 - v * v) / max).collect();
    Ok((w_tilde, jac))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_bit_examples() {
        let out = quantize_1bit(&[0.5, -0.2, 0.3]).unwrap();
        for (o, e) in out.iter().zip([1.0 / 3.0, -1.0 / 3.0, 1.0 / 3.0]) {
            assert_close!(*o, e, 1e-15);
        }
        assert_eq!(quantize_1bit(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(quantize_1bit(&[-1.0, 1.0]).unwrap(), vec![-1.0, 1.0]);
    }

    #[test]
    fn one_bit_sign_of_zero_is_positive() {
        let out = quantize_1bit(&[0.0, -2.0]).unwrap();
        assert_eq!(out, vec![1.0, -1.0]);
    }

    #[test]
    fn one_bit_rejects_empty() {
        assert!(matches!(quantize_1bit(&[]), Err(Error::Shape(_))));
    }

    #[test]
    fn k_bit_examples() {
        assert_eq!(quantize_kbit(&[0.4], 2).unwrap(), vec![0.0]);
        assert_eq!(quantize_kbit(&[0.7], 2).unwrap(), vec![1.0]);
        assert_eq!(quantize_kbit(&[1.8], 3).unwrap(), vec![1.0]);
    }

    #[test]
    fn k_bit_ties_round_away_from_zero() {
        assert_eq!(quantize_kbit(&[0.5, -0.5], 2).unwrap(), vec![1.0, -1.0]);
        // 3 * (1/6) = 0.5 exactly rounds to 1/3.
        assert_eq!(quantize_kbit(&[0.5 / 3.0], 3).unwrap()[0], 1.0 / 3.0);
    }

    #[test]
    fn k_bit_rejects_k_below_two() {
        assert!(matches!(quantize_kbit(&[0.1], 1), Err(Error::Argument(_))));
    }

    #[test]
    fn grid_sizes() {
        for k in 2..=8u32 {
            let scheme = QuantScheme::new(k).unwrap();
            let expected = 2 * ((1usize << (k - 1)) - 1) + 1;
            assert_eq!(scheme.grid_points().len(), expected);
            assert_eq!(scheme.grid_points()[0], -1.0);
            assert_eq!(*scheme.grid_points().last().unwrap(), 1.0);
        }
        assert_eq!(QuantScheme::new(1).unwrap().mode(), QuantMode::BinaryMeanScale);
        assert!(QuantScheme::new(1).unwrap().grid_points().is_empty());
    }

    #[test]
    fn ste_mask_examples() {
        assert_eq!(ste_mask(&[0.5, -1.0, 1.5]).to_f64(), vec![1.0, 1.0, 0.0]);
        assert!(ste_mask(&[0.0; 4]).as_slice().iter().all(|&m| m));
        assert_eq!(ste_mask(&[-2.0, 2.0]).to_f64(), vec![0.0, 0.0]);
    }

    #[test]
    fn ste_mask_is_idempotent() {
        let x = [0.3, -4.0, 1.0, 1.0001];
        let once = ste_mask(&x).to_f64();
        assert_eq!(ste_mask(&once).to_f64(), vec![1.0; 4]);
        let mut g = vec![2.0; 4];
        ste_mask(&x).apply(&mut g);
        assert_eq!(g, vec![2.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn dorefa_examples() {
        let (wt, jac) = dorefa_transform(&[0.5, -0.5]).unwrap();
        assert_eq!(wt, vec![1.0, -1.0]);
        assert_close!(jac[0], 1.701_836_256_478_643, 1e-12);
        assert_close!(jac[1], jac[0], 0.0);

        let (wt, jac) = dorefa_transform(&[10.0]).unwrap();
        assert_eq!(wt, vec![1.0]);
        assert_close!(jac[0], 8.244_614_455_767_397e-9, 1e-15);

        let (wt, _) = dorefa_transform(&[0.1, -2.0, 0.7]).unwrap();
        assert_eq!(wt[1], -1.0);
    }

    #[test]
    fn dorefa_rejects_all_zero() {
        assert!(matches!(
            dorefa_transform(&[0.0, 0.0]),
            Err(Error::DegenerateInput(_))
        ));
    }

    proptest! {
        #[test]
        fn k_bit_idempotent_and_on_grid(x in -3.0f64..3.0, k in 2u32..=8) {
            let q = quantize_kbit(&[x], k).unwrap()[0];
            prop_assert_eq!(quantize_kbit(&[q], k).unwrap()[0], q);
            let l = ((1i64 << (k - 1)) - 1) as f64;
            let m = q * l;
            prop_assert!((m - m.round()).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&q));
        }

        #[test]
        fn k_bit_monotone(a in -3.0f64..3.0, b in -3.0f64..3.0, k in 2u32..=8) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let q = quantize_kbit(&[lo, hi], k).unwrap();
            prop_assert!(q[0] <= q[1]);
        }

        #[test]
        fn one_bit_scale_equivariant(
            x in proptest::collection::vec(-5.0f64..5.0, 1..20),
            c in 0.01f64..100.0,
        ) {
            let scaled: Vec<f64> = x.iter().map(|v| c * v).collect();
            let lhs = quantize_1bit(&scaled).unwrap();
            let rhs: Vec<f64> = quantize_1bit(&x).unwrap().iter().map(|v| c * v).collect();
            for (a, b) in lhs.iter().zip(&rhs) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-300));
            }
        }

        #[test]
        fn one_bit_output_values(x in proptest::collection::vec(-5.0f64..5.0, 1..20)) {
            let e = x.iter().map(|v| v.abs()).sum::<f64>() / x.len() as f64;
            for v in quantize_1bit(&x).unwrap() {
                prop_assert!(v == e || v == -e);
            }
        }
    }
}
