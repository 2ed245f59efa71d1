//! Block selection under the position-decay budget and exact sparse
//! aggregation over the gathered key/value blocks.
//!
//! Query blocks are independent; they run on the rayon pool, and every
//! row reduces over keys in ascending order, so results do not depend on
//! the number of threads.

use rayon::prelude::*;
use serde::Serialize;

use crate::dense::{dot, KeepSets};
use crate::error::{invalid, Result, StemError};
use crate::metric::{block_summary, oam_block, MetricConfig};
use crate::scalar::Scalar;
use crate::schedule::{stem_complexity, BudgetSchedule, GuardWindows};
use crate::tensor::{Matrix, Qkv};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RowSelection {
    pub query_block: usize,
    /// Selected key blocks, ascending.
    pub blocks: Vec<usize>,
    /// `forced[i]` is true when `blocks[i]` is a guard block.
    pub forced: Vec<bool>,
    /// Budget requested by the schedule.
    pub budget: usize,
    /// Guard blocks kept beyond `budget`.
    pub guard_overage: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct BlockSelection {
    pub rows: Vec<RowSelection>,
}

impl BlockSelection {
    pub fn total_blocks(&self) -> usize {
        self.rows.iter().map(|r| r.blocks.len()).sum()
    }

    /// Token-level keep sets: every admissible key of every selected block.
    pub fn keep_sets(&self, n: usize, block_size: usize) -> Result<KeepSets> {
        let mut sets = Vec::with_capacity(n);
        for i in 0..n {
            let row = self.rows.get(i / block_size).ok_or_else(|| {
                StemError::DimensionMismatch(format!("no selection for query block {}", i / block_size))
            })?;
            sets.push(gather_keys(&row.blocks, block_size, n, i));
        }
        KeepSets::new(sets)
    }
}

/// Forced guard blocks first, then the highest-metric admissible blocks
/// (ties to the lower index) until `budget` is filled.
pub fn select_blocks<T: Scalar>(
    metric_row: &[T],
    budget: usize,
    query_block: usize,
    guards: &GuardWindows,
) -> Result<RowSelection> {
    if budget == 0 {
        return Err(invalid("budget", "must be >= 1"));
    }
    if metric_row.len() <= query_block {
        return Err(StemError::DimensionMismatch(format!(
            "metric row has {} entries, query block is {query_block}",
            metric_row.len()
        )));
    }
    let forced = guards.forced_blocks(query_block);
    let guard_overage = forced.len().saturating_sub(budget);
    let slots = budget.saturating_sub(forced.len());

    let mut candidates: Vec<usize> = (0..=query_block)
        .filter(|b| forced.binary_search(b).is_err())
        .collect();
    candidates.sort_by(|&a, &b| {
        metric_row[b]
            .widen()
            .total_cmp(&metric_row[a].widen())
            .then(a.cmp(&b))
    });
    candidates.truncate(slots);

    let mut blocks: Vec<(usize, bool)> = forced
        .iter()
        .map(|&b| (b, true))
        .chain(candidates.into_iter().map(|b| (b, false)))
        .collect();
    blocks.sort_unstable();
    Ok(RowSelection {
        query_block,
        blocks: blocks.iter().map(|&(b, _)| b).collect(),
        forced: blocks.iter().map(|&(_, f)| f).collect(),
        budget,
        guard_overage,
    })
}

fn gather_keys(blocks: &[usize], block_size: usize, n: usize, query: usize) -> Vec<usize> {
    blocks
        .iter()
        .flat_map(|&b| b * block_size..((b + 1) * block_size).min(n))
        .filter(|&j| j <= query)
        .collect()
}

/// Softmax over `keys` (renormalized) and the weighted value sum, written
/// into `out`. Returns false and leaves zeros when `keys` is empty.
fn attend_row<T: Scalar>(
    q_row: &[T],
    keys: &[usize],
    k: &Matrix<T>,
    v: &Matrix<T>,
    scale: f64,
    out: &mut [T],
) -> bool {
    out.iter_mut().for_each(|x| *x = T::zero());
    if keys.is_empty() {
        return false;
    }
    let scores: Vec<f64> = keys.iter().map(|&j| scale * dot(q_row, k.row(j))).collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut acc = vec![0f64; v.cols()];
    for (&j, e) in keys.iter().zip(&exps) {
        let p = e / z;
        for (a, &x) in acc.iter_mut().zip(v.row(j)) {
            *a += p * x.widen();
        }
    }
    for (dst, a) in out.iter_mut().zip(acc) {
        *dst = T::narrow(a);
    }
    true
}

/// Exact attention for one query block over the gathered key blocks.
///
/// `q_block` holds the block's query rows (the last block may be short);
/// keys inside the diagonal block are causally masked per token.
pub fn sparse_block_attention<T: Scalar>(
    q_block: &Matrix<T>,
    query_block: usize,
    k: &Matrix<T>,
    v: &Matrix<T>,
    blocks: &[usize],
    block_size: usize,
    scale: f64,
) -> Result<Matrix<T>> {
    if blocks.is_empty() {
        return Err(StemError::EmptySelection { query_block });
    }
    if let Some(&b) = blocks.iter().find(|&&b| b > query_block) {
        return Err(StemError::InadmissibleIndex {
            row: query_block,
            index: b,
        });
    }
    let n = k.rows();
    let start = query_block * block_size;
    if q_block.rows() > block_size || start + q_block.rows() > n || q_block.cols() != k.cols() {
        return Err(StemError::DimensionMismatch(format!(
            "query block {query_block} with {} rows does not fit n={n}, B={block_size}",
            q_block.rows()
        )));
    }
    let mut out = Matrix::zeros(q_block.rows(), v.cols());
    for r in 0..q_block.rows() {
        let keys = gather_keys(blocks, block_size, n, start + r);
        if !attend_row(q_block.row(r), &keys, k, v, scale, out.row_mut(r)) {
            return Err(StemError::EmptySelection { query_block });
        }
    }
    Ok(out)
}

/// Renormalized attention restricted to per-row keep sets. Rows with an
/// empty keep set produce zeros.
pub fn keep_set_attention<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    keep: &KeepSets,
    scale: f64,
) -> Result<Matrix<T>> {
    if keep.len() != q.rows() || k.rows() != v.rows() || q.cols() != k.cols() {
        return Err(StemError::DimensionMismatch(format!(
            "Q {:?}, K {:?}, V {:?}, keep rows {}",
            q.shape(),
            k.shape(),
            v.shape(),
            keep.len()
        )));
    }
    let mut out = Matrix::zeros(q.rows(), v.cols());
    for (i, set) in keep.rows().enumerate() {
        attend_row(q.row(i), set, k, v, scale, out.row_mut(i));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StemStats {
    pub n: usize,
    pub d: usize,
    pub block_size: usize,
    /// Selected (query block, key block) pairs.
    pub realized_budget_blocks: usize,
    /// Causally admissible block pairs, `Σ_qb (qb + 1)`.
    pub admissible_blocks: usize,
    pub realized_budget_fraction: f64,
    /// Mean number of key tokens gathered per query row.
    pub k_avg: f64,
    pub estimated_flops: f64,
    pub guard_overage: usize,
    pub selection: BlockSelection,
}

fn check_inputs<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    sched: &BudgetSchedule,
    cfg: &MetricConfig,
) -> Result<()> {
    sched.validate()?;
    cfg.validate()?;
    if q.shape() != k.shape() || v.rows() != k.rows() || q.rows() == 0 || q.cols() == 0 {
        return Err(StemError::DimensionMismatch(format!(
            "Q {:?}, K {:?}, V {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if sched.n != q.rows() {
        return Err(invalid(
            "n",
            format!("schedule is for n={}, inputs have {} rows", sched.n, q.rows()),
        ));
    }
    if sched.block_size != cfg.block_size {
        return Err(invalid(
            "block_size",
            format!(
                "schedule uses B={}, metric uses B={}",
                sched.block_size, cfg.block_size
            ),
        ));
    }
    Ok(())
}

/// Pooled metric, per-block budget and block selection for every query block.
pub fn plan_blocks<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    sched: &BudgetSchedule,
    cfg: &MetricConfig,
) -> Result<BlockSelection> {
    check_inputs(q, k, v, sched, cfg)?;
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let summary = block_summary(q, k, v, cfg, scale)?;
    let metric = oam_block(&summary.s_bar, &summary.m_v, cfg.beta)?;
    let budgets = sched.block_budgets()?;
    let rows = budgets
        .par_iter()
        .enumerate()
        .map(|(qb, &budget)| select_blocks(metric.row(qb), budget, qb, &sched.guards))
        .collect::<Result<Vec<_>>>()?;
    Ok(BlockSelection { rows })
}

/// Runs a precomputed selection and assembles the `n × d` output.
pub fn execute_selection<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    selection: &BlockSelection,
    block_size: usize,
) -> Result<Matrix<T>> {
    let n = q.rows();
    let scale = 1.0 / (q.cols() as f64).sqrt();
    if selection.rows.len() != n.div_ceil(block_size) {
        return Err(StemError::DimensionMismatch(format!(
            "selection covers {} query blocks, expected {}",
            selection.rows.len(),
            n.div_ceil(block_size)
        )));
    }
    let parts = selection
        .rows
        .par_iter()
        .map(|row| {
            let start = row.query_block * block_size;
            let end = (start + block_size).min(n);
            let q_block = q.slice_rows(start, end);
            sparse_block_attention(&q_block, row.query_block, k, v, &row.blocks, block_size, scale)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(n * v.cols());
    for part in parts {
        data.extend(part.into_vec());
    }
    Matrix::from_vec(n, v.cols(), data)
}

fn stats_for(n: usize, d: usize, block_size: usize, selection: BlockSelection) -> Result<StemStats> {
    let nb = n.div_ceil(block_size);
    let block_len = |b: usize| ((b + 1) * block_size).min(n) - b * block_size;
    let gathered: usize = selection
        .rows
        .iter()
        .map(|r| block_len(r.query_block) * r.blocks.iter().map(|&b| block_len(b)).sum::<usize>())
        .sum();
    let k_avg = gathered as f64 / n as f64;
    let realized = selection.total_blocks();
    let admissible = nb * (nb + 1) / 2;
    Ok(StemStats {
        n,
        d,
        block_size,
        realized_budget_blocks: realized,
        admissible_blocks: admissible,
        realized_budget_fraction: realized as f64 / admissible as f64,
        k_avg,
        estimated_flops: stem_complexity(n, d, block_size, k_avg)?,
        guard_overage: selection.rows.iter().map(|r| r.guard_overage).sum(),
        selection,
    })
}

/// Full pipeline for one head: metric, budgets, selection, sparse aggregation.
pub fn stem_forward<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    sched: &BudgetSchedule,
    cfg: &MetricConfig,
) -> Result<(Matrix<T>, StemStats)> {
    let selection = plan_blocks(q, k, v, sched, cfg)?;
    let out = execute_selection(q, k, v, &selection, cfg.block_size)?;
    let stats = stats_for(q.rows(), q.cols(), cfg.block_size, selection)?;
    Ok((out, stats))
}

/// Heads are independent and share one schedule.
pub fn stem_forward_heads<T: Scalar>(
    heads: &[Qkv<T>],
    sched: &BudgetSchedule,
    cfg: &MetricConfig,
) -> Result<Vec<(Matrix<T>, StemStats)>> {
    heads
        .par_iter()
        .map(|h| stem_forward(&h.q, &h.k, &h.v, sched, cfg))
        .collect()
}
