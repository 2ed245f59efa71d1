//! Block-pooled routing scores, pooled value magnitudes, and the
//! score-aware (SAM) / output-aware (OAM) selection metrics.
//!
//! Sequences whose length is not a multiple of the block size are treated
//! as zero-padded: padded query rows contribute a score of 0, padded keys
//! never count, and padded value rows are excluded from the max-pool.

use serde::{Deserialize, Serialize};

use crate::dense::dot;
use crate::error::{invalid, Result, StemError};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Value norms are clamped to this before taking the log.
pub const VALUE_NORM_EPS: f64 = 1e-12;
pub const DEFAULT_BETA: f64 = 0.2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Mean over the block's main anti-diagonal `(t, B−1−t)`.
    #[default]
    Antidiagonal,
    /// Mean over every admissible pair in the block.
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub beta: f64,
    pub block_size: usize,
    pub pooling: Pooling,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            beta: DEFAULT_BETA,
            block_size: crate::schedule::DEFAULT_BLOCK_SIZE,
            pooling: Pooling::Antidiagonal,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(invalid("beta", format!("must be finite and >= 0, got {}", self.beta)));
        }
        if self.block_size == 0 {
            return Err(invalid("block_size", "must be >= 1"));
        }
        Ok(())
    }
}

/// Pooled scores (`N_blk × N_blk`, masked above the block diagonal) and
/// pooled log value magnitudes (`N_blk`).
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSummary<T> {
    pub s_bar: Matrix<T>,
    pub m_v: Vec<T>,
}

impl<T: Scalar> BlockSummary<T> {
    pub fn n_blk(&self) -> usize {
        self.m_v.len()
    }
}

fn check_qk<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, block_size: usize) -> Result<()> {
    if q.rows() == 0 || k.rows() == 0 {
        return Err(StemError::InvalidDimension("Q and K must be non-empty".into()));
    }
    if q.shape() != k.shape() {
        return Err(StemError::DimensionMismatch(format!(
            "Q is {:?}, K is {:?}",
            q.shape(),
            k.shape()
        )));
    }
    if block_size == 0 {
        return Err(invalid("block_size", "must be >= 1"));
    }
    Ok(())
}

fn pooled<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    block_size: usize,
    scale: f64,
    pairs: impl Fn(usize) -> Vec<(usize, usize)>,
) -> Matrix<T> {
    let n = q.rows();
    let nb = n.div_ceil(block_size);
    let mut out = Matrix::from_fn(nb, nb, |_, _| T::masked());
    for qb in 0..nb {
        for kb in 0..=qb {
            let mut sum = 0.0;
            let mut count = 0usize;
            for (t, u) in pairs(block_size) {
                let gq = qb * block_size + t;
                let gk = kb * block_size + u;
                if gk >= n || gk > gq {
                    continue;
                }
                if gq < n {
                    sum += scale * dot(q.row(gq), k.row(gk));
                }
                count += 1;
            }
            if count > 0 {
                out.set(qb, kb, T::narrow(sum / count as f64));
            }
        }
    }
    out
}

/// `S̄[I][J]` is the mean of `scale·⟨Q_{I·B+t}, K_{J·B+B−1−t}⟩` over the
/// anti-diagonal pairs that exist and are causally admissible.
pub fn pool_antidiagonal_scores<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    block_size: usize,
    scale: f64,
) -> Result<Matrix<T>> {
    check_qk(q, k, block_size)?;
    Ok(pooled(q, k, block_size, scale, |b| {
        (0..b).map(|t| (t, b - 1 - t)).collect()
    }))
}

/// Mean over all admissible query/key pairs of each block.
pub fn pool_mean_scores<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    block_size: usize,
    scale: f64,
) -> Result<Matrix<T>> {
    check_qk(q, k, block_size)?;
    Ok(pooled(q, k, block_size, scale, |b| {
        (0..b).flat_map(|t| (0..b).map(move |u| (t, u))).collect()
    }))
}

pub fn pool_scores<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    block_size: usize,
    scale: f64,
    pooling: Pooling,
) -> Result<Matrix<T>> {
    match pooling {
        Pooling::Antidiagonal => pool_antidiagonal_scores(q, k, block_size, scale),
        Pooling::Mean => pool_mean_scores(q, k, block_size, scale),
    }
}

/// `M̄_V[J] = max_{j ∈ block J} log(max(‖V_j‖₂, ε))`.
pub fn pool_value_magnitude<T: Scalar>(v: &Matrix<T>, block_size: usize) -> Result<Vec<T>> {
    if v.rows() == 0 {
        return Err(StemError::InvalidDimension("V must be non-empty".into()));
    }
    if block_size == 0 {
        return Err(invalid("block_size", "must be >= 1"));
    }
    let n = v.rows();
    Ok((0..n.div_ceil(block_size))
        .map(|b| {
            let hi = ((b + 1) * block_size).min(n);
            let m = (b * block_size..hi)
                .map(|j| v.row_norm(j).max(VALUE_NORM_EPS).ln())
                .fold(f64::NEG_INFINITY, f64::max);
            T::narrow(m)
        })
        .collect())
}

pub fn block_summary<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    cfg: &MetricConfig,
    scale: f64,
) -> Result<BlockSummary<T>> {
    cfg.validate()?;
    if v.rows() != k.rows() {
        return Err(StemError::DimensionMismatch(format!(
            "V has {} rows, K has {}",
            v.rows(),
            k.rows()
        )));
    }
    Ok(BlockSummary {
        s_bar: pool_scores(q, k, cfg.block_size, scale, cfg.pooling)?,
        m_v: pool_value_magnitude(v, cfg.block_size)?,
    })
}

/// `M̄[I][J] = S̄[I][J] + β·max(0, M̄_V[J])` on admissible blocks `J <= I`.
pub fn oam_block<T: Scalar>(s_bar: &Matrix<T>, m_v: &[T], beta: f64) -> Result<Matrix<T>> {
    let nb = s_bar.rows();
    if s_bar.cols() != nb || m_v.len() != nb {
        return Err(StemError::DimensionMismatch(format!(
            "S̄ is {}x{}, M̄_V has {} entries",
            nb,
            s_bar.cols(),
            m_v.len()
        )));
    }
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(invalid("beta", format!("must be finite and >= 0, got {beta}")));
    }
    let mut out = s_bar.clone();
    for qb in 0..nb {
        for kb in 0..=qb {
            let s = s_bar.get(qb, kb);
            if s.is_masked() {
                continue;
            }
            out.set(qb, kb, T::narrow(s.widen() + beta * m_v[kb].widen().max(0.0)));
        }
    }
    Ok(out)
}

/// Score-aware baseline: the pooled routing scores unchanged.
pub fn sam_block<T: Scalar>(s_bar: &Matrix<T>) -> Matrix<T> {
    s_bar.clone()
}

fn check_token_row<T: Scalar>(i: usize, q_row: &[T], k: &Matrix<T>, v: &Matrix<T>) -> Result<()> {
    if i >= k.rows() || v.rows() != k.rows() || q_row.len() != k.cols() {
        return Err(StemError::DimensionMismatch(format!(
            "query position {i}, q_row len {}, K {:?}, V {:?}",
            q_row.len(),
            k.shape(),
            v.shape()
        )));
    }
    Ok(())
}

/// Untruncated token metric `scale·⟨Q_i, K_j⟩ + log‖V_j‖₂` for `j <= i`.
pub fn oam_token_exact<T: Scalar>(
    i: usize,
    q_row: &[T],
    k: &Matrix<T>,
    v: &Matrix<T>,
    scale: f64,
) -> Result<Vec<f64>> {
    check_token_row(i, q_row, k, v)?;
    Ok((0..=i)
        .map(|j| scale * dot(q_row, k.row(j)) + v.row_norm(j).max(VALUE_NORM_EPS).ln())
        .collect())
}

/// Token-level OAM `scale·⟨Q_i, K_j⟩ + β·max(0, log‖V_j‖₂)` for `j <= i`.
pub fn oam_token<T: Scalar>(
    i: usize,
    q_row: &[T],
    k: &Matrix<T>,
    v: &Matrix<T>,
    scale: f64,
    beta: f64,
) -> Result<Vec<f64>> {
    check_token_row(i, q_row, k, v)?;
    Ok((0..=i)
        .map(|j| {
            let mag = v.row_norm(j).max(VALUE_NORM_EPS).ln().max(0.0);
            scale * dot(q_row, k.row(j)) + beta * mag
        })
        .collect())
}
