//! Seeded synthetic Q/K/V generators.
//!
//! The stream is ChaCha8 (`rand_chacha`), seeded with `seed_from_u64`.
//! Gaussian deviates come from the Box–Muller transform, consuming two
//! uniforms per pair of deviates: `u1 ∈ (0, 1]`, `u2 ∈ [0, 1)`,
//! `z0 = √(−2 ln u1)·cos(2π u2)`, `z1 = √(−2 ln u1)·sin(2π u2)`.
//! Q, K and V are filled in that order, row-major, from one stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Matrix;
use crate::error::{invalid, Result, StemError};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Qkv<T> {
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutlierQkv<T> {
    pub qkv: Qkv<T>,
    /// Sorted indices of the value rows that were amplified.
    pub outlier_rows: Vec<usize>,
}

struct BoxMuller {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl BoxMuller {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.rng.random::<f64>();
        let u2 = self.rng.random::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    fn fill<T: Scalar>(&mut self, rows: usize, cols: usize, scale: f64) -> Matrix<T> {
        Matrix::from_fn(rows, cols, |_, _| T::narrow(scale * self.next()))
    }
}

fn check_dims(n: usize, d: usize) -> Result<()> {
    if n == 0 || d == 0 {
        return Err(StemError::InvalidDimension(format!(
            "sequence length and head dim must be positive, got n={n}, d={d}"
        )));
    }
    Ok(())
}

fn check_scale(scale: f64) -> Result<()> {
    if !scale.is_finite() || scale < 0.0 {
        return Err(invalid("scale", format!("must be finite and >= 0, got {scale}")));
    }
    Ok(())
}

pub fn gen_gaussian_matrix<T: Scalar>(
    rows: usize,
    cols: usize,
    seed: u64,
    scale: f64,
) -> Result<Matrix<T>> {
    check_dims(rows, cols)?;
    check_scale(scale)?;
    Ok(BoxMuller::new(seed).fill(rows, cols, scale))
}

/// Three `n × d` matrices of i.i.d. `N(0, scale²)` entries.
pub fn gen_gaussian_qkv<T: Scalar>(n: usize, d: usize, seed: u64, scale: f64) -> Result<Qkv<T>> {
    check_dims(n, d)?;
    check_scale(scale)?;
    let mut bm = BoxMuller::new(seed);
    Ok(draw_qkv(&mut bm, n, d, scale))
}

fn draw_qkv<T: Scalar>(bm: &mut BoxMuller, n: usize, d: usize, scale: f64) -> Qkv<T> {
    let q = bm.fill(n, d, scale);
    let k = bm.fill(n, d, scale);
    let v = bm.fill(n, d, scale);
    Qkv { q, k, v }
}

/// Unit-scale Gaussian Q/K/V where `⌈outlier_frac·n⌉` value rows are
/// multiplied by `outlier_gain`.
///
/// The Q/K/V draws are identical to `gen_gaussian_qkv(n, d, seed, 1.0)`;
/// outlier rows are sampled afterwards from the same stream.
pub fn gen_outlier_qkv<T: Scalar>(
    n: usize,
    d: usize,
    seed: u64,
    outlier_frac: f64,
    outlier_gain: f64,
) -> Result<OutlierQkv<T>> {
    check_dims(n, d)?;
    if !(0.0..=1.0).contains(&outlier_frac) {
        return Err(invalid(
            "outlier_frac",
            format!("must lie in [0, 1], got {outlier_frac}"),
        ));
    }
    if !outlier_gain.is_finite() || outlier_gain < 1.0 {
        return Err(invalid(
            "outlier_gain",
            format!("must be finite and >= 1, got {outlier_gain}"),
        ));
    }
    let mut bm = BoxMuller::new(seed);
    let mut qkv: Qkv<T> = draw_qkv(&mut bm, n, d, 1.0);

    // 0.2 * 10 must give 2, not 3
    let count = ((outlier_frac * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let count = count.min(n);
    let mut outlier_rows = if count == 0 {
        Vec::new()
    } else {
        rand::seq::index::sample(&mut bm.rng, n, count).into_vec()
    };
    outlier_rows.sort_unstable();

    let gain = T::narrow(outlier_gain);
    for &r in &outlier_rows {
        for x in qkv.v.row_mut(r) {
            *x = *x * gain;
        }
    }
    Ok(OutlierQkv { qkv, outlier_rows })
}
