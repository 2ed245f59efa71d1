//! Self-contained invariant suite. Every check draws its cases from a
//! seeded stream and compares the library against a brute-force oracle
//! written here, so the report is identical from run to run.

use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dense::{causal_scores, dense_attention, truncation_bound, KeepSets};
use crate::error::Result;
use crate::metric::{pool_antidiagonal_scores, MetricConfig};
use crate::propagation::{token_keep_sets, verify_rank_equivalence, verify_separable_bound, TokenMetric};
use crate::scalar::Scalar;
use crate::schedule::{
    cost_decay, cost_uniform, enumerated_decay_cost, uniform_equivalent, BudgetSchedule, BudgetUnit,
    GuardWindows,
};
use crate::sparse::{plan_blocks, stem_forward};
use crate::tensor::{gen_gaussian_qkv, Matrix};

pub const CSV_HEADER: &str = "check,cases,violations,max_error,status";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub check: &'static str,
    pub cases: usize,
    pub violations: usize,
    /// Worst value of the check's error measure (a difference, an excess
    /// over the tolerance, or a violation count, depending on the check).
    pub max_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed())
    }

    /// Header plus one row per check.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{},{},{},{:.6e},{}",
                c.check,
                c.cases,
                c.violations,
                c.max_error,
                if c.passed() { "pass" } else { "fail" }
            );
        }
        s
    }
}

struct Tally {
    check: &'static str,
    cases: usize,
    violations: usize,
    max_error: f64,
}

impl Tally {
    fn new(check: &'static str) -> Self {
        Self {
            check,
            cases: 0,
            violations: 0,
            max_error: f64::NEG_INFINITY,
        }
    }

    fn record(&mut self, ok: bool, err: f64) {
        self.cases += 1;
        if !ok {
            self.violations += 1;
        }
        self.max_error = self.max_error.max(err);
    }

    fn finish(self) -> CheckResult {
        CheckResult {
            check: self.check,
            cases: self.cases,
            violations: self.violations,
            max_error: if self.cases == 0 { 0.0 } else { self.max_error },
        }
    }
}

pub fn run_validation(seed: u64) -> Result<ValidationReport> {
    let checks = vec![
        full_budget_equivalence(seed)?,
        row_stochastic(seed)?,
        selection_contract(seed)?,
        pooling_oracle(seed)?,
        separable_bound(seed)?,
        rank_equivalence(seed)?,
        bound_optimality(seed)?,
        cost_floor_drift(seed)?,
        cost_flat_schedule(seed)?,
        uniform_equivalent_ratio()?,
        thread_determinism(seed)?,
    ];
    Ok(ValidationReport { seed, checks })
}

fn rng_for(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn full_budget_equivalence(seed: u64) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 1);
    let mut t = Tally::new("full_budget_equivalence");
    for case in 0..12 {
        let n = rng.random_range(1..=256);
        let d = rng.random_range(1..=32);
        let b = rng.random_range(1..=64);
        let qkv = gen_gaussian_qkv::<f32>(n, d, seed.wrapping_add(case), 1.0)?;
        let sched = BudgetSchedule::new(n, n as f64, BudgetUnit::Blocks, 1.0)?.with_block_size(b)?;
        let cfg = MetricConfig {
            block_size: b,
            ..Default::default()
        };
        let (o, stats) = stem_forward(&qkv.q, &qkv.k, &qkv.v, &sched, &cfg)?;
        let (dense, _) = dense_attention(&qkv.q, &qkv.k, &qkv.v)?;
        let err = o.max_abs_diff(&dense)?;
        t.record(err < 1e-5 && stats.realized_budget_fraction == 1.0, err);
    }
    Ok(t.finish())
}

fn row_stochastic(seed: u64) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 2);
    let mut t = Tally::new("row_stochastic");
    for case in 0..20 {
        let n = rng.random_range(1..=64);
        let d = rng.random_range(1..=16);
        let qkv = gen_gaussian_qkv::<f32>(n, d, seed.wrapping_add(100 + case), 2.0)?;
        let (_, p) = dense_attention(&qkv.q, &qkv.k, &qkv.v)?;
        let mut err = 0f64;
        for i in 0..n {
            let sum: f64 = (0..n).map(|j| p.get(i, j) as f64).sum();
            err = err.max((sum - 1.0).abs());
            for j in i + 1..n {
                err = err.max((p.get(i, j) as f64).abs());
            }
        }
        t.record(err < 1e-5, err);
    }
    Ok(t.finish())
}

fn selection_contract(seed: u64) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 3);
    let mut t = Tally::new("selection_contract");
    for case in 0..12 {
        let b = [4, 8, 16][rng.random_range(0..3)];
        let n = rng.random_range(b..=40 * b);
        let guards = GuardWindows {
            init_blocks: rng.random_range(0..3),
            local_blocks: rng.random_range(0..3),
        };
        let k_start = rng.random_range(0.5..8.0);
        let mu = [0.5, 0.7, 1.0][rng.random_range(0..3)];
        let qkv = gen_gaussian_qkv::<f32>(n, 8, seed.wrapping_add(200 + case), 1.0)?;
        let sched = BudgetSchedule::new(n, k_start, BudgetUnit::Blocks, mu)?
            .with_block_size(b)?
            .with_guards(guards)
            .with_min_total_blocks(rng.random_range(0..60), Default::default());
        let cfg = MetricConfig {
            block_size: b,
            ..Default::default()
        };
        let plan = plan_blocks(&qkv.q, &qkv.k, &qkv.v, &sched, &cfg)?;
        let budgets = sched.block_budgets()?;
        let mut bad = 0usize;
        for (qb, (row, &budget)) in plan.rows.iter().zip(&budgets).enumerate() {
            let forced = guards.forced_blocks(qb);
            let sorted = row.blocks.windows(2).all(|w| w[0] < w[1]);
            let causal = row.blocks.iter().all(|&kb| kb <= qb);
            let has_forced = forced.iter().all(|f| row.blocks.contains(f));
            let size = row.blocks.len() == budget.max(forced.len()).min(qb + 1);
            if !(sorted && causal && has_forced && size && budget >= 1) {
                bad += 1;
            }
        }
        t.record(bad == 0, bad as f64);
    }
    Ok(t.finish())
}

/// Brute-force mean of the admissible, in-range main anti-diagonal entries
/// of the exact score matrix; empty blocks give the masked sentinel.
fn pooled_oracle(s: &Matrix<f64>, n: usize, b: usize) -> Matrix<f64> {
    let nb = n.div_ceil(b);
    Matrix::from_fn(nb, nb, |qb, kb| {
        let mut sum = 0.0;
        let mut count = 0usize;
        for t in 0..b {
            let (gq, gk) = (qb * b + t, kb * b + (b - 1 - t));
            if gk > gq || gk >= n {
                continue;
            }
            sum += if gq < n { s.get(gq, gk) } else { 0.0 };
            count += 1;
        }
        if count == 0 {
            f64::masked()
        } else {
            sum / count as f64
        }
    })
}

fn pooling_oracle(seed: u64) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 4);
    let mut t = Tally::new("antidiagonal_pooling");
    for case in 0..20 {
        let n = rng.random_range(1..=128);
        let b = [2, 4, 8, 16][rng.random_range(0..4)];
        let d = rng.random_range(1..=16);
        let qkv = gen_gaussian_qkv::<f64>(n, d, seed.wrapping_add(300 + case), 1.0)?;
        let scale = 1.0 / (d as f64).sqrt();
        let exact = causal_scores(&qkv.q, &qkv.k, scale)?;
        let want = pooled_oracle(&exact, n, b);
        let got = pool_antidiagonal_scores(&qkv.q, &qkv.k, b, scale)?;
        let err = got.max_abs_diff(&want)?;
        t.record(err < 1e-6, err);
    }
    Ok(t.finish())
}

fn random_keep(rng: &mut ChaCha8Rng, n: usize) -> Result<KeepSets> {
    let p = rng.random_range(0.0..1.0);
    KeepSets::new(
        (0..n)
            .map(|i| (0..=i).filter(|_| rng.random_bool(p)).collect())
            .collect(),
    )
}

fn separable_bound(seed: u64) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 5);
    let mut t = Tally::new("separable_bound");
    for case in 0..100 {
        let n = rng.random_range(1..=32);
        let d = rng.random_range(1..=16);
        let qkv = gen_gaussian_qkv::<f32>(n, d, seed.wrapping_add(400 + case), 1.5)?;
        let (_, p) = dense_attention(&qkv.q, &qkv.k, &qkv.v)?;
        let keep = random_keep(&mut rng, n)?;
        let r = verify_separable_bound(&p, &qkv.v, &keep)?;
        t.record(r.passed, r.lhs - r.bound);
    }
    Ok(t.finish())
}

fn rank_equivalence(seed: u64) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 6);
    let mut t = Tally::new("rank_equivalence");
    for case in 0..200 {
        let n = rng.random_range(2..=32);
        let d = rng.random_range(1..=16);
        let qkv = gen_gaussian_qkv::<f64>(n, d, seed.wrapping_add(500 + case), 1.0)?;
        let r = verify_rank_equivalence(qkv.q.row(n - 1), &qkv.k, &qkv.v, 1.0 / (d as f64).sqrt())?;
        t.record(r.passed, r.violations as f64);
    }
    Ok(t.finish())
}

fn subsets(items: &[usize], k: usize, start: usize, cur: &mut Vec<usize>, visit: &mut impl FnMut(&[usize])) {
    if cur.len() == k {
        visit(cur);
        return;
    }
    for idx in start..items.len() {
        cur.push(items[idx]);
        subsets(items, k, idx + 1, cur, visit);
        cur.pop();
    }
}

/// Exhaustive per-row minimum of the separable bound over all k-subsets.
fn min_bound_brute(p: &Matrix<f64>, norms: &[f64], k: usize) -> f64 {
    let n = p.rows();
    let mut total = 0.0;
    for i in 0..n {
        let keys: Vec<usize> = (0..=i).collect();
        let all: f64 = keys.iter().map(|&j| p.get(i, j) * norms[j]).sum();
        let mut best = f64::INFINITY;
        subsets(&keys, k.min(i + 1), 0, &mut Vec::new(), &mut |s| {
            let kept: f64 = s.iter().map(|&j| p.get(i, j) * norms[j]).sum();
            best = best.min(all - kept);
        });
        total += best;
    }
    total
}

fn bound_optimality(seed: u64) -> Result<CheckResult> {
    let mut rng = rng_for(seed, 7);
    let mut t = Tally::new("bound_optimality");
    for case in 0..50 {
        let n = rng.random_range(1..=10);
        let k = rng.random_range(1..=4.min(n));
        let d = rng.random_range(1..=8);
        let mut qkv = gen_gaussian_qkv::<f64>(n, d, seed.wrapping_add(600 + case), 1.0)?;
        let gains: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..5.0)).collect();
        qkv.v = Matrix::from_fn(n, d, |r, c| qkv.v.get(r, c) * gains[r]);
        let (_, p) = dense_attention(&qkv.q, &qkv.k, &qkv.v)?;
        let keep = token_keep_sets(&qkv.q, &qkv.k, &qkv.v, k, TokenMetric::Oam, 1.0)?;
        let got = truncation_bound(&p, &qkv.v, &keep)?;
        let norms: Vec<f64> = (0..n).map(|j| qkv.v.row_norm(j)).collect();
        let best = min_bound_brute(p.matrix(), &norms, k);
        t.record(got <= best + 1e-12 * (1.0 + best), got - best);
    }
    Ok(t.finish())
}

fn cost_grid(seed: u64, points: usize) -> Vec<(usize, usize, f64)> {
    let mut rng = rng_for(seed, 8);
    let mus = [0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
    (0..points)
        .map(|_| {
            let n = rng.random_range(1..=4096);
            let k = rng.random_range(1..=n);
            (n, k, *mus.choose(&mut rng).expect("non-empty"))
        })
        .collect()
}

/// Closed-form decay cost against direct enumeration, tolerance `n`.
fn cost_floor_drift(seed: u64) -> Result<CheckResult> {
    let mut t = Tally::new("cost_floor_drift");
    for (n, k, mu) in cost_grid(seed, 200) {
        let closed = cost_decay(n, k as f64, mu)?.cost;
        let enumerated = enumerated_decay_cost(n, k as f64, mu)? as f64;
        let drift = (closed - enumerated).abs();
        t.record(drift <= n as f64, drift - n as f64);
    }
    Ok(t.finish())
}

/// At `μ = 1` the decay cost is the uniform cost, bit for bit.
fn cost_flat_schedule(seed: u64) -> Result<CheckResult> {
    let mut t = Tally::new("cost_flat_schedule");
    for (n, k, _) in cost_grid(seed, 200) {
        let decay = cost_decay(n, k as f64, 1.0)?;
        let uniform = cost_uniform(n, k as f64)?;
        t.record(decay.cost == uniform && decay.savings == 0.0, (decay.cost - uniform).abs());
    }
    Ok(t.finish())
}

fn uniform_equivalent_ratio() -> Result<CheckResult> {
    let mut t = Tally::new("uniform_equivalent_ratio");
    for k in (20..=4000).step_by(20) {
        let got = uniform_equivalent(k, 0.7)?;
        let want = 17 * k / 20;
        t.record(got == want, got.abs_diff(want) as f64);
    }
    Ok(t.finish())
}

fn thread_determinism(seed: u64) -> Result<CheckResult> {
    let mut t = Tally::new("thread_determinism");
    let (n, b) = (512, 32);
    let qkv = gen_gaussian_qkv::<f32>(n, 16, seed.wrapping_add(700), 1.0)?;
    let sched = BudgetSchedule::new(n, 4.0, BudgetUnit::Blocks, 0.7)?.with_block_size(b)?;
    let cfg = MetricConfig {
        block_size: b,
        ..Default::default()
    };
    let run = |threads: usize| -> Result<Matrix<f32>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool");
        pool.install(|| stem_forward(&qkv.q, &qkv.k, &qkv.v, &sched, &cfg)).map(|r| r.0)
    };
    let single = run(1)?;
    for threads in [2, 4, 8] {
        let multi = run(threads)?;
        t.record(single == multi, single.max_abs_diff(&multi)?);
    }
    Ok(t.finish())
}
