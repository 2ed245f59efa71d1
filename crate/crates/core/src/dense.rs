//! Exact causal attention and the unrenormalized truncation surrogate.
//!
//! Everything here is the reference that sparse paths are measured against.
//! Dot products and softmax sums accumulate in f64; within a row, sums run
//! over ascending key index.

use crate::error::{invalid, Result, StemError};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Row-stochastic causal attention matrix: `p[i][j] == 0` for `j > i`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionProbs<T> {
    p: Matrix<T>,
}

impl<T: Scalar> AttentionProbs<T> {
    pub fn n(&self) -> usize {
        self.p.rows()
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.p
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.p.get(i, j)
    }

    /// Admissible prefix `p[i][0..=i]`.
    pub fn row_prefix(&self, i: usize) -> &[T] {
        &self.p.row(i)[..=i]
    }
}

/// Per-row retained key indices. Each set is sorted, unique and causally
/// admissible (`j <= i`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeepSets {
    sets: Vec<Vec<usize>>,
}

impl KeepSets {
    pub fn new(sets: Vec<Vec<usize>>) -> Result<Self> {
        for (i, s) in sets.iter().enumerate() {
            if let Some(&j) = s.iter().find(|&&j| j > i) {
                return Err(StemError::InadmissibleIndex { row: i, index: j });
            }
            if s.windows(2).any(|w| w[0] >= w[1]) {
                return Err(StemError::UnsortedKeepSet { row: i });
            }
        }
        Ok(Self { sets })
    }

    /// Sorts and deduplicates each row before validating admissibility.
    pub fn from_unsorted(mut sets: Vec<Vec<usize>>) -> Result<Self> {
        for s in &mut sets {
            s.sort_unstable();
            s.dedup();
        }
        Self::new(sets)
    }

    pub fn full(n: usize) -> Self {
        Self {
            sets: (0..n).map(|i| (0..=i).collect()).collect(),
        }
    }

    pub fn empty(n: usize) -> Self {
        Self {
            sets: vec![Vec::new(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.sets[i]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[usize]> {
        self.sets.iter().map(Vec::as_slice)
    }

    pub fn total_kept(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }

    /// True when `self[i] ⊆ other[i]` for every row.
    pub fn is_subset_of(&self, other: &KeepSets) -> bool {
        self.len() == other.len()
            && self
                .sets
                .iter()
                .zip(&other.sets)
                .all(|(a, b)| a.iter().all(|j| b.binary_search(j).is_ok()))
    }
}

pub(crate) fn dot(a: &[impl Scalar], b: &[impl Scalar]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.widen() * y.widen()).sum()
}

fn check_qk<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>) -> Result<()> {
    if q.cols() != k.cols() || q.rows() != k.rows() {
        return Err(StemError::DimensionMismatch(format!(
            "Q is {}x{} but K is {}x{}",
            q.rows(),
            q.cols(),
            k.rows(),
            k.cols()
        )));
    }
    Ok(())
}

fn check_scale(scale: f64) -> Result<()> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(invalid("scale", format!("must be finite and > 0, got {scale}")));
    }
    Ok(())
}

/// `s[i][j] = scale·⟨Q_i, K_j⟩` for `j <= i`; masked sentinel above the diagonal.
pub fn causal_scores<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, scale: f64) -> Result<Matrix<T>> {
    check_qk(q, k)?;
    check_scale(scale)?;
    let n = q.rows();
    let mut s = Matrix::from_fn(n, n, |_, _| T::masked());
    for i in 0..n {
        let qi = q.row(i);
        for j in 0..=i {
            s.set(i, j, T::narrow(scale * dot(qi, k.row(j))));
        }
    }
    Ok(s)
}

/// Stable softmax over each row's admissible prefix `0..=i`.
///
/// Entries equal to the masked sentinel inside the prefix underflow to an
/// exact zero after the max shift; a prefix that is entirely masked is an
/// error.
pub fn row_softmax_causal<T: Scalar>(scores: &Matrix<T>) -> Result<AttentionProbs<T>> {
    let n = scores.rows();
    if scores.cols() != n {
        return Err(StemError::DimensionMismatch(format!(
            "score matrix must be square, got {}x{}",
            n,
            scores.cols()
        )));
    }
    let mut p = Matrix::zeros(n, n);
    let mut exps = Vec::with_capacity(n);
    for i in 0..n {
        let prefix = &scores.row(i)[..=i];
        if prefix.iter().all(|s| s.is_masked()) {
            return Err(StemError::DegenerateRow { row: i });
        }
        let max = prefix
            .iter()
            .map(|s| s.widen())
            .fold(f64::NEG_INFINITY, f64::max);
        exps.clear();
        exps.extend(prefix.iter().map(|s| (s.widen() - max).exp()));
        let z: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            p.set(i, j, T::narrow(e / z));
        }
    }
    Ok(AttentionProbs { p })
}

/// Exact causal attention with scale `1/√d`. Returns the output and the
/// probability matrix it was computed from.
pub fn dense_attention<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
) -> Result<(Matrix<T>, AttentionProbs<T>)> {
    check_qk(q, k)?;
    if v.rows() != k.rows() {
        return Err(StemError::DimensionMismatch(format!(
            "V has {} rows, K has {}",
            v.rows(),
            k.rows()
        )));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let p = row_softmax_causal(&causal_scores(q, k, scale)?)?;
    let o = truncated_output(&p, v, &KeepSets::full(q.rows()))?;
    Ok((o, p))
}

fn check_pvk<T: Scalar>(p: &AttentionProbs<T>, v: &Matrix<T>, keep: &KeepSets) -> Result<()> {
    if v.rows() != p.n() || keep.len() != p.n() {
        return Err(StemError::DimensionMismatch(format!(
            "P is {n}x{n}, V has {} rows, keep has {} rows",
            v.rows(),
            keep.len(),
            n = p.n()
        )));
    }
    Ok(())
}

/// `Ô_i = Σ_{j∈S_i} P_ij V_j` without renormalization.
pub fn truncated_output<T: Scalar>(
    p: &AttentionProbs<T>,
    v: &Matrix<T>,
    keep: &KeepSets,
) -> Result<Matrix<T>> {
    check_pvk(p, v, keep)?;
    let d = v.cols();
    let mut out = Matrix::zeros(p.n(), d);
    let mut acc = vec![0f64; d];
    for (i, set) in keep.rows().enumerate() {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for &j in set {
            let w = p.get(i, j).widen();
            for (a, &x) in acc.iter_mut().zip(v.row(j)) {
                *a += w * x.widen();
            }
        }
        for (dst, &a) in out.row_mut(i).iter_mut().zip(&acc) {
            *dst = T::narrow(a);
        }
    }
    Ok(out)
}

/// Separable bound `Σ_i Σ_{j≤i, j∉S_i} P_ij ‖V_j‖₂` on `‖O − Ô‖_F`.
pub fn truncation_bound<T: Scalar>(
    p: &AttentionProbs<T>,
    v: &Matrix<T>,
    keep: &KeepSets,
) -> Result<f64> {
    check_pvk(p, v, keep)?;
    let norms: Vec<f64> = (0..v.rows()).map(|j| v.row_norm(j)).collect();
    let mut total = 0.0;
    for (i, set) in keep.rows().enumerate() {
        let mut kept = set.iter().peekable();
        for j in 0..=i {
            if kept.peek() == Some(&&j) {
                kept.next();
                continue;
            }
            total += p.get(i, j).widen() * norms[j];
        }
    }
    Ok(total)
}
