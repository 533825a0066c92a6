//! Rotary realizations of a PRF.
//!
//! `R(a)` is the block-diagonal matrix of 2x2 rotations by `a * theta_k`.
//! The general form scores `<R(s) W_Q x_q, W_K x_k>`, which equals the
//! decomposed form `<R(phi1(i)) W_Q x_q, R(phi2(j)) W_K x_k>` whenever
//! `s = phi1(i) - phi2(j)`.

use serde::{Deserialize, Serialize};

use super::linalg::{dot, Matrix};
use super::PeError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotaryAngles {
    pub thetas: Vec<f64>,
}

impl RotaryAngles {
    /// `theta_k = base^(-2k/d)` for `k = 0..d/2`.
    pub fn standard(dim: usize, base: f64) -> Result<Self, PeError> {
        if dim % 2 != 0 {
            return Err(PeError::OddDimension(dim));
        }
        let thetas = (0..dim / 2)
            .map(|k| base.powf(-2.0 * k as f64 / dim as f64))
            .collect();
        Ok(Self { thetas })
    }

    pub fn dim(&self) -> usize {
        2 * self.thetas.len()
    }
}

/// Rotates consecutive coordinate pairs of `v` by `mult * theta_k`.
pub fn rotate_pairs(v: &[f64], mult: f64, angles: &RotaryAngles) -> Result<Vec<f64>, PeError> {
    if v.len() % 2 != 0 {
        return Err(PeError::OddDimension(v.len()));
    }
    if v.len() != angles.dim() {
        return Err(PeError::DimensionMismatch { expected: angles.dim(), got: v.len() });
    }
    let mut out = vec![0.0; v.len()];
    for (k, theta) in angles.thetas.iter().enumerate() {
        let (s, c) = (mult * theta).sin_cos();
        let (a, b) = (v[2 * k], v[2 * k + 1]);
        out[2 * k] = c * a - s * b;
        out[2 * k + 1] = s * a + c * b;
    }
    Ok(out)
}

fn project(x_q: &[f64], x_k: &[f64], wq: &Matrix, wk: &Matrix) -> Result<(Vec<f64>, Vec<f64>), PeError> {
    let q = wq.matvec(x_q)?;
    let k = wk.matvec(x_k)?;
    if q.len() != k.len() {
        return Err(PeError::DimensionMismatch { expected: q.len(), got: k.len() });
    }
    if q.len() % 2 != 0 {
        return Err(PeError::OddDimension(q.len()));
    }
    Ok((q, k))
}

/// Score for a non-decomposable PRF value `s`.
pub fn rotary_general(
    x_q: &[f64],
    x_k: &[f64],
    s: f64,
    angles: &RotaryAngles,
    wq: &Matrix,
    wk: &Matrix,
) -> Result<f64, PeError> {
    let (q, k) = project(x_q, x_k, wq, wk)?;
    Ok(dot(&rotate_pairs(&q, s, angles)?, &k))
}

/// Score for a PRF that splits as `phi1(i) - phi2(j)`: query and key are
/// rotated independently.
#[allow(clippy::too_many_arguments)]
pub fn rotary_decomposed(
    x_q: &[f64],
    x_k: &[f64],
    i: usize,
    j: usize,
    phi1: impl Fn(usize) -> i64,
    phi2: impl Fn(usize) -> i64,
    angles: &RotaryAngles,
    wq: &Matrix,
    wk: &Matrix,
) -> Result<f64, PeError> {
    let (q, k) = project(x_q, x_k, wq, wk)?;
    let rq = rotate_pairs(&q, phi1(i) as f64, angles)?;
    let rk = rotate_pairs(&k, phi2(j) as f64, angles)?;
    Ok(dot(&rq, &rk))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn id2() -> Matrix {
        Matrix::identity(2)
    }

    #[test]
    fn zero_angle_is_plain_dot() {
        let a = RotaryAngles::standard(4, 10000.0).unwrap();
        let wq = Matrix::identity(4);
        let x = [0.3, -1.0, 2.0, 0.5];
        let y = [1.0, 0.1, -0.2, 0.7];
        let got = rotary_general(&x, &y, 0.0, &a, &wq, &wq).unwrap();
        assert!((got - dot(&x, &y)).abs() < 1e-12);
    }

    #[test]
    fn quarter_turn() {
        let a = RotaryAngles { thetas: vec![FRAC_PI_2] };
        let got = rotary_general(&[1.0, 0.0], &[1.0, 0.0], 1.0, &a, &id2(), &id2()).unwrap();
        assert!(got.abs() < 1e-12);
        let four = rotary_general(&[0.4, 0.9], &[1.3, -0.2], 4.0, &a, &id2(), &id2()).unwrap();
        let zero = rotary_general(&[0.4, 0.9], &[1.3, -0.2], 0.0, &a, &id2(), &id2()).unwrap();
        assert!((four - zero).abs() < 1e-12);
    }

    #[test]
    fn decomposed_identity_at_equal_positions() {
        let a = RotaryAngles::standard(4, 100.0).unwrap();
        let w = Matrix::identity(4);
        let x = [0.3, -1.0, 2.0, 0.5];
        let y = [1.0, 0.1, -0.2, 0.7];
        let got = rotary_decomposed(&x, &y, 3, 3, |i| i as i64, |j| j as i64, &a, &w, &w).unwrap();
        assert!((got - dot(&x, &y)).abs() < 1e-12);
    }

    #[test]
    fn odd_dimension_rejected() {
        assert_eq!(RotaryAngles::standard(3, 10.0), Err(PeError::OddDimension(3)));
        let a = RotaryAngles { thetas: vec![1.0] };
        let w = Matrix::identity(3);
        assert!(matches!(
            rotary_general(&[1.0; 3], &[1.0; 3], 1.0, &a, &w, &w),
            Err(PeError::OddDimension(3))
        ));
    }
}
