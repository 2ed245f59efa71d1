//! Token position-decay budgets and the closed-form cost model.
//!
//! The per-position budget decays linearly from `k_start` at the first
//! query to `μ·k_start` at position `n`:
//!
//! ```text
//! k(i) = ⌊k_start − (k_start·(1 − μ)/n)·i⌋,   i = 1..=n, clamped to [1, i]
//! ```
//!
//! Block-mode budgets evaluate the same line at a block's last token,
//! divide by the block size, and then apply guard windows, the minimum
//! budget rule, and the causal clamp `≤ query_block + 1`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetUnit {
    Tokens,
    Blocks,
}

/// How `min_total_blocks` is enforced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MinBudgetMode {
    /// Raise a uniform per-row floor just far enough that the sum of all
    /// query-block budgets reaches the minimum.
    #[default]
    SequenceTotal,
    /// Every query block gets at least `min(min_total_blocks, query_block + 1)`.
    PerRow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuardWindows {
    pub init_blocks: usize,
    pub local_blocks: usize,
}

impl GuardWindows {
    pub const NONE: GuardWindows = GuardWindows {
        init_blocks: 0,
        local_blocks: 0,
    };

    pub fn total(&self) -> usize {
        self.init_blocks + self.local_blocks
    }

    /// Sorted, unique guard blocks admissible for `query_block`.
    pub fn forced_blocks(&self, query_block: usize) -> Vec<usize> {
        let init_end = self.init_blocks.min(query_block + 1);
        let local_start = (query_block + 1).saturating_sub(self.local_blocks);
        let mut out: Vec<usize> = (0..init_end).collect();
        out.extend((local_start.max(init_end))..=query_block);
        out
    }
}

impl Default for GuardWindows {
    fn default() -> Self {
        Self {
            init_blocks: 4,
            local_blocks: 4,
        }
    }
}

pub const DEFAULT_BLOCK_SIZE: usize = 128;
pub const DEFAULT_MU: f64 = 0.7;
pub const DEFAULT_MIN_TOTAL_BLOCKS: usize = 54;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetSchedule {
    pub n: usize,
    /// Initial budget, in `unit`s. May be fractional (e.g. `0.2·N_blk`).
    pub k_start: f64,
    pub unit: BudgetUnit,
    pub mu: f64,
    pub block_size: usize,
    pub guards: GuardWindows,
    pub min_total_blocks: usize,
    pub min_mode: MinBudgetMode,
}

impl BudgetSchedule {
    /// Schedule with block size 128, 4/4 guard blocks and a 54-block minimum.
    pub fn new(n: usize, k_start: f64, unit: BudgetUnit, mu: f64) -> Result<Self> {
        let s = Self {
            n,
            k_start,
            unit,
            mu,
            block_size: DEFAULT_BLOCK_SIZE,
            guards: GuardWindows::default(),
            min_total_blocks: DEFAULT_MIN_TOTAL_BLOCKS,
            min_mode: MinBudgetMode::default(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_block_size(mut self, block_size: usize) -> Result<Self> {
        self.block_size = block_size;
        self.validate()?;
        Ok(self)
    }

    pub fn with_guards(mut self, guards: GuardWindows) -> Self {
        self.guards = guards;
        self
    }

    pub fn with_min_total_blocks(mut self, blocks: usize, mode: MinBudgetMode) -> Self {
        self.min_total_blocks = blocks;
        self.min_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(invalid("n", "sequence length must be positive"));
        }
        if self.block_size == 0 {
            return Err(invalid("block_size", "must be >= 1"));
        }
        if !(self.mu > 0.0 && self.mu <= 1.0) {
            return Err(invalid("mu", format!("must lie in (0, 1], got {}", self.mu)));
        }
        if !(self.k_start.is_finite() && self.k_start > 0.0) {
            return Err(invalid(
                "k_start",
                format!("must be finite and > 0, got {}", self.k_start),
            ));
        }
        if self.unit == BudgetUnit::Tokens && self.k_start < 1.0 {
            return Err(invalid("k_start", "token budget must be >= 1"));
        }
        Ok(())
    }

    pub fn n_blocks(&self) -> usize {
        self.n.div_ceil(self.block_size)
    }

    pub fn k_start_tokens(&self) -> f64 {
        match self.unit {
            BudgetUnit::Tokens => self.k_start,
            BudgetUnit::Blocks => self.k_start * self.block_size as f64,
        }
    }

    /// Un-floored linear interpolation at 1-based token position `pos`.
    pub fn interp_tokens(&self, pos: usize) -> f64 {
        let k = self.k_start_tokens();
        k - (k * (1.0 - self.mu) / self.n as f64) * pos as f64
    }

    /// Budgets for every query block, `0..n_blocks()`.
    pub fn block_budgets(&self) -> Result<Vec<usize>> {
        self.validate()?;
        let nb = self.n_blocks();
        let base: Vec<usize> = (0..nb).map(|qb| self.base_block_budget(qb)).collect();
        let floor = self.min_floor(&base);
        Ok(base
            .iter()
            .enumerate()
            .map(|(qb, &b)| b.max(floor).min(qb + 1))
            .collect())
    }

    fn base_block_budget(&self, qb: usize) -> usize {
        let pos = ((qb + 1) * self.block_size).min(self.n);
        let blocks = floor_nudged(self.interp_tokens(pos) / self.block_size as f64).max(0.0) as usize;
        blocks.max(self.guards.total())
    }

    fn min_floor(&self, base: &[usize]) -> usize {
        match self.min_mode {
            MinBudgetMode::PerRow => self.min_total_blocks,
            MinBudgetMode::SequenceTotal => {
                let total = |f: usize| -> usize {
                    base.iter()
                        .enumerate()
                        .map(|(qb, &b)| b.max(f).min(qb + 1))
                        .sum()
                };
                (0..=base.len())
                    .find(|&f| total(f) >= self.min_total_blocks)
                    .unwrap_or(base.len())
            }
        }
    }
}

/// Floor that tolerates representation error just below an integer
/// (`200 − 0.06·500` evaluates to `169.99999999999997`).
fn floor_nudged(x: f64) -> f64 {
    (x + 1e-9 * x.abs().max(1.0)).floor()
}

/// Token budget for 1-based position `i`.
pub fn tpd_budget(i: usize, sched: &BudgetSchedule) -> Result<usize> {
    sched.validate()?;
    if i == 0 || i > sched.n {
        return Err(invalid(
            "i",
            format!("position must lie in 1..={}, got {i}", sched.n),
        ));
    }
    let k = floor_nudged(sched.interp_tokens(i)).max(1.0) as usize;
    Ok(k.min(i))
}

/// Number of key blocks granted to `query_block`.
pub fn block_budget(query_block: usize, sched: &BudgetSchedule) -> Result<usize> {
    let nb = sched.n_blocks();
    if query_block >= nb {
        return Err(invalid(
            "query_block",
            format!("must be < {nb}, got {query_block}"),
        ));
    }
    Ok(sched.block_budgets()?[query_block])
}

fn check_n_k(n: usize, k: f64, name: &'static str) -> Result<()> {
    if n == 0 {
        return Err(invalid("n", "must be positive"));
    }
    if !(k >= 1.0 && k <= n as f64) {
        return Err(invalid(name, format!("must lie in [1, {n}], got {k}")));
    }
    Ok(())
}

fn check_mu(mu: f64) -> Result<()> {
    if !(mu > 0.0 && mu <= 1.0) {
        return Err(invalid("mu", format!("must lie in (0, 1], got {mu}")));
    }
    Ok(())
}

/// Uniform top-k cost `n·k − ½k²` in token pairs.
pub fn cost_uniform(n: usize, k_uni: f64) -> Result<f64> {
    check_n_k(n, k_uni, "k_uni")?;
    Ok(n as f64 * k_uni - 0.5 * k_uni * k_uni)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DecayCost {
    pub cost: f64,
    pub savings: f64,
}

/// Closed-form decay cost: the uniform cost at `k_start` minus
/// `½·k_start·(1 − μ)·(n − k_start)`.
pub fn cost_decay(n: usize, k_start: f64, mu: f64) -> Result<DecayCost> {
    check_n_k(n, k_start, "k_start")?;
    check_mu(mu)?;
    let n = n as f64;
    let savings = 0.5 * k_start * (1.0 - mu) * (n - k_start);
    let uniform = n * k_start - 0.5 * k_start * k_start;
    Ok(DecayCost {
        cost: uniform - savings,
        savings,
    })
}

/// `Σ_{i=1}^{n} min(k(i), i)` by direct enumeration of the token schedule.
pub fn enumerated_decay_cost(n: usize, k_start: f64, mu: f64) -> Result<u64> {
    check_n_k(n, k_start, "k_start")?;
    let sched = BudgetSchedule::new(n, k_start, BudgetUnit::Tokens, mu)?;
    (1..=n).try_fold(0u64, |acc, i| Ok(acc + tpd_budget(i, &sched)? as u64))
}

/// Constant budget with the same total as the decaying one,
/// `round(k_start·(1 + μ)/2)`.
pub fn uniform_equivalent(k_start: usize, mu: f64) -> Result<usize> {
    check_mu(mu)?;
    Ok((k_start as f64 * (1.0 + mu) / 2.0).round() as usize)
}

/// Estimated operation count of one head:
/// `2n²d/B² + nd/B` for the pooled metric plus `4·n·k_avg·d + 3·n·k_avg`
/// for sparse execution.
pub fn stem_complexity(n: usize, d: usize, block_size: usize, k_avg: f64) -> Result<f64> {
    if n == 0 || d == 0 || block_size == 0 {
        return Err(invalid("n/d/block_size", "must all be positive"));
    }
    if !(k_avg >= 0.0 && k_avg <= n as f64) {
        return Err(invalid("k_avg", format!("must lie in [0, {n}], got {k_avg}")));
    }
    let (n, d, b) = (n as f64, d as f64, block_size as f64);
    let metric = 2.0 * n * n * d / (b * b) + n * d / b;
    let sparse = 4.0 * n * k_avg * d + 3.0 * n * k_avg;
    Ok(metric + sparse)
}

/// Dense causal attention reference count `4n²d + 3n²`.
pub fn dense_complexity(n: usize, d: usize) -> f64 {
    let (n, d) = (n as f64, d as f64);
    4.0 * n * n * d + 3.0 * n * n
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub uniform_cost: f64,
    pub decay_cost: f64,
    pub decay_savings: f64,
    pub enumerated_cost: f64,
    pub stem_flops: f64,
}

impl CostReport {
    /// `|closed form − enumeration|`.
    pub fn drift(&self) -> f64 {
        (self.decay_cost - self.enumerated_cost).abs()
    }
}

/// Cost report for a token schedule; `stem_flops` uses the enumerated
/// average budget as `k_avg`.
pub fn cost_report(n: usize, d: usize, block_size: usize, k_start: f64, mu: f64) -> Result<CostReport> {
    let decay = cost_decay(n, k_start, mu)?;
    let enumerated = enumerated_decay_cost(n, k_start, mu)? as f64;
    Ok(CostReport {
        uniform_cost: cost_uniform(n, k_start)?,
        decay_cost: decay.cost,
        decay_savings: decay.savings,
        enumerated_cost: enumerated,
        stem_flops: stem_complexity(n, d, block_size, enumerated / n as f64)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tokens(n: usize, k: f64, mu: f64) -> BudgetSchedule {
        BudgetSchedule::new(n, k, BudgetUnit::Tokens, mu).unwrap()
    }

    fn blocks(n: usize, b: usize, k: f64, mu: f64) -> BudgetSchedule {
        BudgetSchedule::new(n, k, BudgetUnit::Blocks, mu)
            .unwrap()
            .with_block_size(b)
            .unwrap()
            .with_min_total_blocks(0, MinBudgetMode::SequenceTotal)
    }

    #[test]
    fn tpd_hand_values() {
        let s = tokens(1000, 200.0, 0.7);
        assert_eq!(tpd_budget(500, &s).unwrap(), 170);
        assert_eq!(tpd_budget(1000, &s).unwrap(), 140);
        assert_eq!(tpd_budget(1, &s).unwrap(), 1);
        assert_eq!(tpd_budget(150, &s).unwrap(), 150);
        assert!(tpd_budget(0, &s).is_err());
        assert!(tpd_budget(1001, &s).is_err());
    }

    #[test]
    fn tpd_without_decay_is_causal_min() {
        let s = tokens(300, 64.0, 1.0);
        for i in 1..=300 {
            assert_eq!(tpd_budget(i, &s).unwrap(), i.min(64));
        }
    }

    #[test]
    fn schedule_rejects_bad_mu() {
        assert!(BudgetSchedule::new(10, 5.0, BudgetUnit::Tokens, 0.0).is_err());
        assert!(BudgetSchedule::new(10, 5.0, BudgetUnit::Tokens, 1.1).is_err());
        assert!(BudgetSchedule::new(10, 0.0, BudgetUnit::Tokens, 0.7).is_err());
        assert!(BudgetSchedule::new(0, 5.0, BudgetUnit::Tokens, 0.7).is_err());
    }

    #[test]
    fn block_budget_examples() {
        let s = blocks(20 * 16, 16, 8.0, 1.0);
        assert_eq!(block_budget(0, &s).unwrap(), 1);
        assert_eq!(block_budget(19, &s).unwrap(), 8);
        assert!(block_budget(20, &s).is_err());

        let s = blocks(100 * 16, 16, 0.2 * 100.0, 0.7);
        assert_eq!(block_budget(99, &s).unwrap(), 14);
    }

    #[test]
    fn token_unit_block_budget_divides_by_block_size() {
        // 320 tokens at B=16 is 20 blocks; no guards so the raw value shows
        let s = BudgetSchedule::new(1600, 320.0, BudgetUnit::Tokens, 0.7)
            .unwrap()
            .with_block_size(16)
            .unwrap()
            .with_guards(GuardWindows::NONE)
            .with_min_total_blocks(0, MinBudgetMode::SequenceTotal);
        assert_eq!(block_budget(99, &s).unwrap(), 14);
        assert_eq!(block_budget(3, &s).unwrap(), 4);
    }

    #[test]
    fn guards_raise_budget() {
        let s = BudgetSchedule::new(64 * 32, 2.0, BudgetUnit::Blocks, 0.7)
            .unwrap()
            .with_block_size(32)
            .unwrap()
            .with_min_total_blocks(0, MinBudgetMode::SequenceTotal);
        let b = s.block_budgets().unwrap();
        assert_eq!(b[0], 1);
        assert_eq!(b[5], 6);
        assert!(b[10..].iter().all(|&x| x == 8));
    }

    #[test]
    fn per_row_minimum() {
        let s = BudgetSchedule::new(64 * 32, 2.0, BudgetUnit::Blocks, 0.7)
            .unwrap()
            .with_block_size(32)
            .unwrap()
            .with_min_total_blocks(20, MinBudgetMode::PerRow);
        let b = s.block_budgets().unwrap();
        assert_eq!(b[10], 11);
        assert_eq!(b[40], 20);
    }

    #[test]
    fn sequence_total_minimum_raises_just_enough() {
        let s = BudgetSchedule::new(8 * 16, 1.0, BudgetUnit::Blocks, 1.0)
            .unwrap()
            .with_block_size(16)
            .unwrap()
            .with_guards(GuardWindows::NONE)
            .with_min_total_blocks(20, MinBudgetMode::SequenceTotal);
        let b = s.block_budgets().unwrap();
        // floor 3 gives 1+2+3*6 = 21 >= 20; floor 2 gives 1+2*7 = 15
        assert_eq!(b, vec![1, 2, 3, 3, 3, 3, 3, 3]);

        let all = s.clone().with_min_total_blocks(1000, MinBudgetMode::SequenceTotal);
        assert_eq!(all.block_budgets().unwrap(), (1..=8).collect::<Vec<_>>());
    }

    #[test]
    fn partial_last_block_uses_sequence_end() {
        let s = blocks(100, 16, 4.0, 0.5);
        assert_eq!(s.n_blocks(), 7);
        let b = s.block_budgets().unwrap();
        // guards 4/4 dominate the interpolated value
        assert_eq!(b[6], 7);
    }

    #[test]
    fn forced_blocks_layout() {
        let g = GuardWindows::default();
        assert_eq!(g.forced_blocks(0), vec![0]);
        assert_eq!(g.forced_blocks(5), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(g.forced_blocks(10), vec![0, 1, 2, 3, 7, 8, 9, 10]);
        assert!(GuardWindows::NONE.forced_blocks(4).is_empty());
        let only_local = GuardWindows {
            init_blocks: 0,
            local_blocks: 2,
        };
        assert_eq!(only_local.forced_blocks(4), vec![3, 4]);
        let only_init = GuardWindows {
            init_blocks: 2,
            local_blocks: 0,
        };
        assert_eq!(only_init.forced_blocks(4), vec![0, 1]);
    }

    #[test]
    fn uniform_cost_values() {
        assert_eq!(cost_uniform(1000, 200.0).unwrap(), 180_000.0);
        assert_eq!(cost_uniform(64, 64.0).unwrap(), 0.5 * 64.0 * 64.0);
        assert!(cost_uniform(10, 11.0).is_err());
        assert!(cost_uniform(10, 0.0).is_err());
    }

    #[test]
    fn uniform_cost_tracks_summation() {
        for (n, k) in [(1000usize, 200usize), (50, 7), (300, 300), (17, 1)] {
            let direct: usize = (1..=n).map(|i| i.min(k)).sum();
            let closed = cost_uniform(n, k as f64).unwrap();
            assert!((closed - direct as f64).abs() <= k as f64);
        }
    }

    #[test]
    fn decay_cost_values() {
        let c = cost_decay(1000, 200.0, 0.7).unwrap();
        assert!((c.savings - 24_000.0).abs() < 1e-9);
        assert!((c.cost - 156_000.0).abs() < 1e-9);
        let flat = cost_decay(1000, 200.0, 1.0).unwrap();
        assert_eq!(flat.savings, 0.0);
        assert_eq!(flat.cost, cost_uniform(1000, 200.0).unwrap());
    }

    #[test]
    fn uniform_equivalent_values() {
        assert_eq!(uniform_equivalent(100, 0.7).unwrap(), 85);
        assert_eq!(uniform_equivalent(200, 0.5).unwrap(), 150);
        assert_eq!(uniform_equivalent(123, 1.0).unwrap(), 123);
        assert!(uniform_equivalent(10, 0.0).is_err());
    }

    #[test]
    fn complexity_terms() {
        let c = stem_complexity(1024, 64, 128, 256.0).unwrap();
        assert_eq!(c, 8_192.0 + 512.0 + 67_108_864.0 + 786_432.0);
        let metric_only = stem_complexity(1024, 64, 128, 0.0).unwrap();
        assert_eq!(metric_only, 8_192.0 + 512.0);
        // single block with full budget: dense work plus the small metric term
        let n = 256;
        let single = stem_complexity(n, 32, n, n as f64).unwrap();
        assert_eq!(single - dense_complexity(n, 32), 2.0 * 32.0 + 32.0);
        assert!(stem_complexity(10, 4, 2, 11.0).is_err());
    }

    #[test]
    fn report_drift_at_flat_schedule() {
        let r = cost_report(1000, 64, 128, 200.0, 1.0).unwrap();
        assert_eq!(r.enumerated_cost, 180_100.0);
        assert_eq!(r.drift(), 100.0);
        assert_eq!(r.decay_cost, r.uniform_cost);
    }
}
