//! A small random causal transformer for measuring how attention
//! truncation at one layer propagates to the final output, plus the
//! token-level SAM/OAM comparison and the runtime bound and rank checks.
//!
//! Each layer computes `Q, K, V = H·W_q, H·W_k, H·W_v`, attends causally,
//! then applies `h = O + O·W_o` and `H' = h + tanh(h·W_1)·W_2`. The value
//! stream of layer `l+1` is therefore `W_v·(h + FFN(h))` applied to the
//! attention output of layer `l`. There are no biases, so zero input stays
//! zero.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dense::{dense_attention, dot, truncated_output, truncation_bound, AttentionProbs, KeepSets};
use crate::error::{invalid, Result, StemError};
use crate::metric::VALUE_NORM_EPS;
use crate::scalar::Scalar;
use crate::sparse::keep_set_attention;
use crate::tensor::{gen_gaussian_matrix, Matrix};

/// Absolute slack allowed when checking the separable bound.
pub const BOUND_TOLERANCE: f64 = 1e-5;

const INPUT_SALT: u64 = 0x5eed_1a9e_0000_0001;

fn weight_seed(seed: u64, layer: usize, slot: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((layer as u64) << 8 | slot)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyLayer<T> {
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
    pub w_o: Matrix<T>,
    /// `d × d_ff`
    pub w_1: Matrix<T>,
    /// `d_ff × d`
    pub w_2: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTransformer<T> {
    pub d: usize,
    pub d_ff: usize,
    pub seed: u64,
    pub layers: Vec<ToyLayer<T>>,
}

/// Output of one layer: the attention output and the hidden state handed
/// to the next layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace<T> {
    pub attention: Matrix<T>,
    pub hidden: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardPass<T> {
    pub output: Matrix<T>,
    pub layers: Vec<LayerTrace<T>>,
}

impl<T: Scalar> ToyTransformer<T> {
    /// Weights are `N(0, 1/fan_in)`, drawn deterministically from `seed`.
    pub fn build(n_layers: usize, d: usize, d_ff: usize, seed: u64) -> Result<Self> {
        if n_layers < 2 {
            return Err(StemError::InvalidDimension(format!(
                "toy model needs at least 2 layers, got {n_layers}"
            )));
        }
        if d < 4 || d_ff == 0 {
            return Err(StemError::InvalidDimension(format!(
                "toy model needs d >= 4 and d_ff >= 1, got d={d}, d_ff={d_ff}"
            )));
        }
        let w = |rows: usize, cols: usize, l: usize, slot: u64| {
            gen_gaussian_matrix::<T>(rows, cols, weight_seed(seed, l, slot), 1.0 / (rows as f64).sqrt())
        };
        let layers = (0..n_layers)
            .map(|l| {
                Ok(ToyLayer {
                    w_q: w(d, d, l, 0)?,
                    w_k: w(d, d, l, 1)?,
                    w_v: w(d, d, l, 2)?,
                    w_o: w(d, d, l, 3)?,
                    w_1: w(d, d_ff, l, 4)?,
                    w_2: w(d_ff, d, l, 5)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            d,
            d_ff,
            seed,
            layers,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    fn check_input(&self, x: &Matrix<T>) -> Result<()> {
        if x.rows() == 0 || x.cols() != self.d {
            return Err(StemError::DimensionMismatch(format!(
                "input is {}x{}, model width is {}",
                x.rows(),
                x.cols(),
                self.d
            )));
        }
        Ok(())
    }
}

fn add<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    Matrix::from_fn(a.rows(), a.cols(), |r, c| a.get(r, c) + b.get(r, c))
}

impl<T: Scalar> ToyLayer<T> {
    /// One layer with a pluggable attention kernel `(Q, K, V) -> O`.
    pub fn forward(
        &self,
        h_in: &Matrix<T>,
        attend: impl FnOnce(&Matrix<T>, &Matrix<T>, &Matrix<T>) -> Result<Matrix<T>>,
    ) -> Result<LayerTrace<T>> {
        let q = h_in.matmul(&self.w_q)?;
        let k = h_in.matmul(&self.w_k)?;
        let v = h_in.matmul(&self.w_v)?;
        let attention = attend(&q, &k, &v)?;
        self.transition(attention)
    }

    /// `h = O + O·W_o`, `H' = h + tanh(h·W_1)·W_2`.
    pub fn transition(&self, attention: Matrix<T>) -> Result<LayerTrace<T>> {
        let h = add(&attention, &attention.matmul(&self.w_o)?);
        let ffn = h.matmul(&self.w_1)?.map(|x| x.tanh()).matmul(&self.w_2)?;
        Ok(LayerTrace {
            hidden: add(&h, &ffn),
            attention,
        })
    }
}

fn dense_kernel<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>) -> Result<Matrix<T>> {
    Ok(dense_attention(q, k, v)?.0)
}

pub fn forward_dense<T: Scalar>(model: &ToyTransformer<T>, x: &Matrix<T>) -> Result<ForwardPass<T>> {
    forward_inner(model, x, None)
}

fn forward_inner<T: Scalar>(
    model: &ToyTransformer<T>,
    x: &Matrix<T>,
    prune: Option<&SegmentSpec>,
) -> Result<ForwardPass<T>> {
    model.check_input(x)?;
    let mut h = x.clone();
    let mut layers = Vec::with_capacity(model.n_layers());
    for (l, layer) in model.layers.iter().enumerate() {
        let trace = match prune {
            Some(seg) if seg.layer == l => {
                layer.forward(&h, |q, k, v| pruned_attention(q, k, v, seg))?
            }
            _ => layer.forward(&h, dense_kernel)?,
        };
        h = trace.hidden.clone();
        layers.push(trace);
    }
    Ok(ForwardPass { output: h, layers })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegmentBudget {
    /// At most this many segment keys per row.
    Fixed(usize),
    /// `⌈ratio · visible segment keys⌉` per row.
    Ratio(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum PruneMode {
    /// No pruning; runs through the same path as the dense model.
    Control,
    /// Segment keys are removed from every row. Without renormalization
    /// the remaining probabilities keep their dense values.
    DropColumns { renormalize: bool },
    /// Segment keys compete by exact score for the row's budget; keys
    /// outside the segment are always kept. Renormalized.
    SparseSam { budget: SegmentBudget },
    /// As `SparseSam`, ranked by `score + β·max(0, log‖V_j‖)`.
    SparseOam { budget: SegmentBudget, beta: f64 },
}

impl PruneMode {
    pub fn label(&self) -> &'static str {
        match self {
            PruneMode::Control => "control",
            PruneMode::DropColumns { renormalize: false } => "drop_columns",
            PruneMode::DropColumns { renormalize: true } => "drop_columns_renorm",
            PruneMode::SparseSam { .. } => "sparse_sam",
            PruneMode::SparseOam { .. } => "sparse_oam",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub layer: usize,
    pub start: usize,
    pub end: usize,
    pub mode: PruneMode,
}

impl SegmentSpec {
    pub fn validate(&self, n: usize, n_layers: usize) -> Result<()> {
        if self.layer >= n_layers {
            return Err(invalid(
                "layer",
                format!("must be < {n_layers}, got {}", self.layer),
            ));
        }
        if !(self.start < self.end && self.end <= n) {
            return Err(invalid(
                "segment",
                format!("need 0 <= a < b <= {n}, got [{}, {})", self.start, self.end),
            ));
        }
        match self.mode {
            PruneMode::SparseSam { budget } | PruneMode::SparseOam { budget, .. } => {
                if let SegmentBudget::Ratio(r) = budget {
                    if !(0.0..=1.0).contains(&r) {
                        return Err(invalid("ratio", format!("must lie in [0, 1], got {r}")));
                    }
                }
            }
            _ => {}
        }
        if let PruneMode::SparseOam { beta, .. } = self.mode {
            if !(beta.is_finite() && beta >= 0.0) {
                return Err(invalid("beta", format!("must be finite and >= 0, got {beta}")));
            }
        }
        Ok(())
    }
}

/// Indices of the `k` largest scores, ties to the lower index, ascending.
fn top_k(scores: &[(usize, f64)], k: usize) -> Vec<usize> {
    let mut ranked = scores.to_vec();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut idx: Vec<usize> = ranked.into_iter().take(k).map(|(j, _)| j).collect();
    idx.sort_unstable();
    idx
}

fn pruned_attention<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    seg: &SegmentSpec,
) -> Result<Matrix<T>> {
    let n = q.rows();
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let outside = |i: usize| (0..=i).filter(move |&j| j < seg.start || j >= seg.end);
    match seg.mode {
        PruneMode::Control => dense_kernel(q, k, v),
        PruneMode::DropColumns { renormalize } => {
            let keep = KeepSets::new((0..n).map(|i| outside(i).collect()).collect())?;
            if renormalize {
                keep_set_attention(q, k, v, &keep, scale)
            } else {
                let (_, p) = dense_attention(q, k, v)?;
                truncated_output(&p, v, &keep)
            }
        }
        PruneMode::SparseSam { budget } | PruneMode::SparseOam { budget, .. } => {
            let beta = match seg.mode {
                PruneMode::SparseOam { beta, .. } => beta,
                _ => 0.0,
            };
            let log_norm: Vec<f64> = (0..n)
                .map(|j| v.row_norm(j).max(VALUE_NORM_EPS).ln().max(0.0))
                .collect();
            let mut sets = Vec::with_capacity(n);
            for i in 0..n {
                let visible: Vec<(usize, f64)> = (seg.start..seg.end.min(i + 1))
                    .map(|j| (j, scale * dot(q.row(i), k.row(j)) + beta * log_norm[j]))
                    .collect();
                let quota = match budget {
                    SegmentBudget::Fixed(c) => c,
                    SegmentBudget::Ratio(r) => (r * visible.len() as f64).ceil() as usize,
                }
                .min(visible.len());
                let mut set: Vec<usize> = outside(i).collect();
                set.extend(top_k(&visible, quota));
                sets.push(set);
            }
            keep_set_attention(q, k, v, &KeepSets::from_unsorted(sets)?, scale)
        }
    }
}

/// Forward pass with one layer's attention replaced by the pruned kernel.
pub fn forward_with_segment_prune<T: Scalar>(
    model: &ToyTransformer<T>,
    x: &Matrix<T>,
    seg: &SegmentSpec,
) -> Result<ForwardPass<T>> {
    seg.validate(x.rows(), model.n_layers())?;
    forward_inner(model, x, Some(seg))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub mode: PruneMode,
}

/// `parts` equal-width segments covering `[0, n)`.
pub fn equal_segments(n: usize, parts: usize, mode: PruneMode) -> Result<Vec<Segment>> {
    if parts == 0 || parts > n {
        return Err(invalid("segments", format!("need 1..={n} parts, got {parts}")));
    }
    Ok((0..parts)
        .map(|s| Segment {
            start: s * n / parts,
            end: (s + 1) * n / parts,
            mode,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SegmentError {
    pub start: usize,
    pub end: usize,
    pub mode: PruneMode,
    /// Final-output MSE against the dense model, averaged over the batch.
    pub final_mse: f64,
    /// Hidden-state MSE after each layer.
    pub layer_mse: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ErrorReport {
    pub layer: usize,
    pub n_layers: usize,
    pub d: usize,
    pub d_ff: usize,
    pub model_seed: u64,
    pub batch: usize,
    pub segments: Vec<SegmentError>,
}

/// Final and per-layer MSE of each pruned segment against the dense run.
pub fn segment_sensitivity<T: Scalar>(
    model: &ToyTransformer<T>,
    inputs: &[Matrix<T>],
    layer: usize,
    segments: &[Segment],
) -> Result<ErrorReport> {
    if inputs.is_empty() {
        return Err(invalid("inputs", "batch is empty"));
    }
    let dense = inputs
        .iter()
        .map(|x| forward_dense(model, x))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(segments.len());
    for s in segments {
        let seg = SegmentSpec {
            layer,
            start: s.start,
            end: s.end,
            mode: s.mode,
        };
        let mut final_mse = 0.0;
        let mut layer_mse = vec![0.0; model.n_layers()];
        for (x, base) in inputs.iter().zip(&dense) {
            let pruned = forward_with_segment_prune(model, x, &seg)?;
            final_mse += pruned.output.mse(&base.output)?;
            for (acc, (a, b)) in layer_mse.iter_mut().zip(pruned.layers.iter().zip(&base.layers)) {
                *acc += a.hidden.mse(&b.hidden)?;
            }
        }
        let b = inputs.len() as f64;
        out.push(SegmentError {
            start: seg.start,
            end: seg.end,
            mode: seg.mode,
            final_mse: final_mse / b,
            layer_mse: layer_mse.into_iter().map(|m| m / b).collect(),
        });
    }
    Ok(ErrorReport {
        layer,
        n_layers: model.n_layers(),
        d: model.d,
        d_ff: model.d_ff,
        model_seed: model.seed,
        batch: inputs.len(),
        segments: out,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsymmetryConfig {
    pub n_layers: usize,
    pub d: usize,
    pub d_ff: usize,
    pub n: usize,
    pub layer: usize,
    pub segments: usize,
    pub mode: PruneMode,
}

impl Default for AsymmetryConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d: 32,
            d_ff: 64,
            n: 128,
            layer: 0,
            segments: 4,
            mode: PruneMode::DropColumns { renormalize: false },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedReport {
    pub seed: u64,
    pub report: ErrorReport,
    /// First segment hurts strictly more than the last one.
    pub initial_exceeds_final: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AsymmetryReport {
    pub config: AsymmetryConfig,
    pub seeds: Vec<SeedReport>,
    pub pass_rate: f64,
}

/// Deterministic `n × d` input for a seed.
pub fn toy_input<T: Scalar>(n: usize, d: usize, seed: u64) -> Result<Matrix<T>> {
    gen_gaussian_matrix(n, d, seed ^ INPUT_SALT, 1.0)
}

/// One model and one input per seed; a control row plus equal-width
/// segments at `config.layer`. Seeds run in parallel.
pub fn asymmetry_experiment<T: Scalar>(config: &AsymmetryConfig, seeds: &[u64]) -> Result<AsymmetryReport> {
    if seeds.is_empty() {
        return Err(invalid("seeds", "need at least one seed"));
    }
    let mut segments = vec![Segment {
        start: 0,
        end: config.n,
        mode: PruneMode::Control,
    }];
    segments.extend(equal_segments(config.n, config.segments, config.mode)?);
    let per_seed = seeds
        .par_iter()
        .map(|&seed| {
            let model = ToyTransformer::<T>::build(config.n_layers, config.d, config.d_ff, seed)?;
            let x = toy_input::<T>(config.n, config.d, seed)?;
            let report = segment_sensitivity(&model, &[x], config.layer, &segments)?;
            let first = report.segments[1].final_mse;
            let last = report.segments[report.segments.len() - 1].final_mse;
            Ok(SeedReport {
                seed,
                report,
                initial_exceeds_final: first > last,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let wins = per_seed.iter().filter(|s| s.initial_exceeds_final).count();
    Ok(AsymmetryReport {
        config: config.clone(),
        pass_rate: wins as f64 / per_seed.len() as f64,
        seeds: per_seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenMetric {
    Sam,
    Oam,
}

/// Per-row top-`min(budget, i+1)` keys. SAM ranks by `scale·⟨Q_i,K_j⟩`;
/// OAM adds `β·log‖V_j‖` without truncation, so at `β = 1` it ranks by
/// `P_ij‖V_j‖`.
pub fn token_keep_sets<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    budget: usize,
    metric: TokenMetric,
    beta: f64,
) -> Result<KeepSets> {
    if q.shape() != k.shape() || v.rows() != k.rows() {
        return Err(StemError::DimensionMismatch(format!(
            "Q {:?}, K {:?}, V {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let n = q.rows();
    if budget == 0 || budget > n {
        return Err(invalid("budget", format!("must lie in 1..={n}, got {budget}")));
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let log_norm: Vec<f64> = (0..n).map(|j| v.row_norm(j).max(VALUE_NORM_EPS).ln()).collect();
    let weight = match metric {
        TokenMetric::Sam => 0.0,
        TokenMetric::Oam => beta,
    };
    let sets = (0..n)
        .map(|i| {
            let scores: Vec<(usize, f64)> = (0..=i)
                .map(|j| (j, scale * dot(q.row(i), k.row(j)) + weight * log_norm[j]))
                .collect();
            top_k(&scores, budget.min(i + 1))
        })
        .collect();
    KeepSets::new(sets)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SamOamComparison {
    pub mse_sam: f64,
    pub mse_oam: f64,
    pub bound_sam: f64,
    pub bound_oam: f64,
}

/// Renormalized sparse output MSE against dense, and the separable bound
/// on dense `P`, for SAM and OAM token selection. Computed in f64.
pub fn compare_sam_oam<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    budget: usize,
    beta: f64,
) -> Result<SamOamComparison> {
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(invalid("beta", format!("must be finite and >= 0, got {beta}")));
    }
    let (q, k, v) = (q.cast::<f64>(), k.cast::<f64>(), v.cast::<f64>());
    let (dense, p) = dense_attention(&q, &k, &v)?;
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let eval = |metric| -> Result<(f64, f64)> {
        let keep = token_keep_sets(&q, &k, &v, budget, metric, beta)?;
        let out = keep_set_attention(&q, &k, &v, &keep, scale)?;
        Ok((out.mse(&dense)?, truncation_bound(&p, &v, &keep)?))
    };
    let (mse_sam, bound_sam) = eval(TokenMetric::Sam)?;
    let (mse_oam, bound_oam) = eval(TokenMetric::Oam)?;
    Ok(SamOamComparison {
        mse_sam,
        mse_oam,
        bound_sam,
        bound_oam,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BoundCheck {
    pub passed: bool,
    /// `‖O − Ô‖_F`
    pub lhs: f64,
    pub bound: f64,
    /// `bound − lhs`
    pub slack: f64,
}

pub fn verify_separable_bound<T: Scalar>(
    p: &AttentionProbs<T>,
    v: &Matrix<T>,
    keep: &KeepSets,
) -> Result<BoundCheck> {
    let full = truncated_output(p, v, &KeepSets::full(p.n()))?;
    let kept = truncated_output(p, v, keep)?;
    let lhs = full.frobenius_diff(&kept)?;
    let bound = truncation_bound(p, v, keep)?;
    Ok(BoundCheck {
        passed: lhs <= bound + BOUND_TOLERANCE,
        lhs,
        bound,
        slack: bound - lhs,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct RankCheck {
    pub passed: bool,
    pub pairs: usize,
    pub ties_skipped: usize,
    pub violations: usize,
}

/// Pairwise order agreement of `exp(s_j)·‖V_j‖` and `s_j + log‖V_j‖` over
/// every key of `k`. Pairs tied under either form are skipped.
pub fn verify_rank_equivalence<T: Scalar>(
    q_row: &[T],
    k: &Matrix<T>,
    v: &Matrix<T>,
    scale: f64,
) -> Result<RankCheck> {
    if q_row.len() != k.cols() || v.rows() != k.rows() {
        return Err(StemError::DimensionMismatch(format!(
            "query has {} dims, K {:?}, V {:?}",
            q_row.len(),
            k.shape(),
            v.shape()
        )));
    }
    let forms: Vec<(f64, f64)> = (0..k.rows())
        .map(|j| {
            let s = scale * dot(q_row, k.row(j));
            let norm = v.row_norm(j).max(VALUE_NORM_EPS);
            (s.exp() * norm, s + norm.ln())
        })
        .collect();
    let (mut pairs, mut ties, mut violations) = (0, 0, 0);
    for a in 0..forms.len() {
        for b in a + 1..forms.len() {
            let ord_exp = forms[a].0.partial_cmp(&forms[b].0);
            let ord_log = forms[a].1.partial_cmp(&forms[b].1);
            match (ord_exp, ord_log) {
                (Some(x), Some(y)) if x.is_ne() && y.is_ne() => {
                    pairs += 1;
                    if x != y {
                        violations += 1;
                    }
                }
                _ => ties += 1,
            }
        }
    }
    Ok(RankCheck {
        passed: violations == 0,
        pairs,
        ties_skipped: ties,
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gen_gaussian_qkv;

    fn drop_spec(layer: usize, start: usize, end: usize) -> SegmentSpec {
        SegmentSpec {
            layer,
            start,
            end,
            mode: PruneMode::DropColumns { renormalize: false },
        }
    }

    #[test]
    fn construction_is_deterministic() {
        let a = ToyTransformer::<f32>::build(3, 8, 16, 4).unwrap();
        let b = ToyTransformer::<f32>::build(3, 8, 16, 4).unwrap();
        let c = ToyTransformer::<f32>::build(3, 8, 16, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a.layers[0].w_q, a.layers[1].w_q);
    }

    #[test]
    fn degenerate_models_rejected() {
        assert!(ToyTransformer::<f32>::build(1, 8, 8, 0).is_err());
        assert!(ToyTransformer::<f32>::build(2, 3, 8, 0).is_err());
        assert!(ToyTransformer::<f32>::build(2, 8, 0, 0).is_err());
    }

    #[test]
    fn zero_input_stays_zero() {
        let m = ToyTransformer::<f32>::build(3, 8, 16, 2).unwrap();
        let f = forward_dense(&m, &Matrix::zeros(5, 8)).unwrap();
        for t in &f.layers {
            assert!(t.attention.as_slice().iter().all(|&x| x == 0.0));
            assert!(t.hidden.as_slice().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn activations_stay_bounded() {
        let m = ToyTransformer::<f32>::build(4, 16, 32, 1).unwrap();
        let x = toy_input::<f32>(64, 16, 1).unwrap();
        let f = forward_dense(&m, &x).unwrap();
        for t in &f.layers {
            assert!(t.hidden.all_finite());
            let max = t.hidden.as_slice().iter().fold(0f32, |a, &b| a.max(b.abs()));
            assert!(max < 1e3, "max activation {max}");
        }
    }

    #[test]
    fn single_token_attention_is_value_row() {
        let m = ToyTransformer::<f64>::build(3, 8, 8, 9).unwrap();
        let x = toy_input::<f64>(1, 8, 9).unwrap();
        let f = forward_dense(&m, &x).unwrap();
        let mut h = x;
        for (layer, t) in m.layers.iter().zip(&f.layers) {
            assert_eq!(t.attention, h.matmul(&layer.w_v).unwrap());
            h = t.hidden.clone();
        }
    }

    #[test]
    fn wrong_width_rejected() {
        let m = ToyTransformer::<f32>::build(2, 8, 8, 0).unwrap();
        assert!(forward_dense(&m, &Matrix::zeros(4, 7)).is_err());
    }

    type Mat = Vec<Vec<f64>>;

    fn mm(a: &Mat, b: &Matrix<f64>) -> Mat {
        a.iter()
            .map(|row| {
                (0..b.cols())
                    .map(|c| (0..row.len()).map(|t| row[t] * b.get(t, c)).sum())
                    .collect()
            })
            .collect()
    }

    // Written out as O_i = Σ_j P_ij V_j with V^{l+1} = W_v·T(O^l), using
    // plain nested loops.
    #[test]
    fn matches_expanded_recursion() {
        let (n, d) = (4, 6);
        let m = ToyTransformer::<f64>::build(2, d, 10, 21).unwrap();
        let x = toy_input::<f64>(n, d, 21).unwrap();
        let mut h: Mat = (0..n).map(|i| x.row(i).to_vec()).collect();
        for layer in &m.layers {
            let (q, k, v) = (mm(&h, &layer.w_q), mm(&h, &layer.w_k), mm(&h, &layer.w_v));
            let mut o = vec![vec![0.0; d]; n];
            for i in 0..n {
                let s: Vec<f64> = (0..=i)
                    .map(|j| (0..d).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let z: f64 = s.iter().map(|x| x.exp()).sum();
                for j in 0..=i {
                    for c in 0..d {
                        o[i][c] += s[j].exp() / z * v[j][c];
                    }
                }
            }
            let ow = mm(&o, &layer.w_o);
            let hh: Mat = (0..n).map(|i| (0..d).map(|c| o[i][c] + ow[i][c]).collect()).collect();
            let a: Mat = mm(&hh, &layer.w_1)
                .into_iter()
                .map(|r| r.into_iter().map(f64::tanh).collect())
                .collect();
            let f = mm(&a, &layer.w_2);
            h = (0..n).map(|i| (0..d).map(|c| hh[i][c] + f[i][c]).collect()).collect();
        }
        let got = forward_dense(&m, &x).unwrap().output;
        for i in 0..n {
            for c in 0..d {
                assert!((got.get(i, c) - h[i][c]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn control_is_bitwise_dense() {
        let m = ToyTransformer::<f32>::build(3, 8, 16, 3).unwrap();
        let x = toy_input::<f32>(16, 8, 3).unwrap();
        let dense = forward_dense(&m, &x).unwrap();
        let seg = SegmentSpec {
            layer: 1,
            start: 0,
            end: 16,
            mode: PruneMode::Control,
        };
        assert_eq!(forward_with_segment_prune(&m, &x, &seg).unwrap(), dense);
    }

    #[test]
    fn pruning_everything_zeroes_that_layer() {
        let m = ToyTransformer::<f32>::build(3, 8, 16, 3).unwrap();
        let x = toy_input::<f32>(16, 8, 3).unwrap();
        let dense = forward_dense(&m, &x).unwrap();
        for renormalize in [false, true] {
            let seg = SegmentSpec {
                layer: 1,
                start: 0,
                end: 16,
                mode: PruneMode::DropColumns { renormalize },
            };
            let f = forward_with_segment_prune(&m, &x, &seg).unwrap();
            assert_eq!(f.layers[0], dense.layers[0]);
            assert!(f.layers[1].attention.as_slice().iter().all(|&v| v == 0.0));
            assert!(f.layers[1].hidden.as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let m = ToyTransformer::<f32>::build(2, 8, 8, 0).unwrap();
        let x = toy_input::<f32>(8, 8, 0).unwrap();
        for seg in [drop_spec(2, 0, 4), drop_spec(0, 4, 4), drop_spec(0, 0, 9)] {
            assert!(forward_with_segment_prune(&m, &x, &seg).is_err());
        }
        let bad = SegmentSpec {
            mode: PruneMode::SparseSam {
                budget: SegmentBudget::Ratio(1.5),
            },
            ..drop_spec(0, 0, 4)
        };
        assert!(forward_with_segment_prune(&m, &x, &bad).is_err());
    }

    #[test]
    fn full_sparse_budget_is_dense() {
        let m = ToyTransformer::<f64>::build(2, 8, 8, 6).unwrap();
        let x = toy_input::<f64>(12, 8, 6).unwrap();
        let dense = forward_dense(&m, &x).unwrap();
        for mode in [
            PruneMode::SparseSam {
                budget: SegmentBudget::Ratio(1.0),
            },
            PruneMode::SparseOam {
                budget: SegmentBudget::Fixed(12),
                beta: 0.5,
            },
        ] {
            let seg = SegmentSpec {
                layer: 0,
                start: 2,
                end: 9,
                mode,
            };
            let f = forward_with_segment_prune(&m, &x, &seg).unwrap();
            assert!(f.output.max_abs_diff(&dense.output).unwrap() < 1e-10);
        }
    }

    #[test]
    fn initial_segment_hurts_more() {
        let cfg = AsymmetryConfig {
            n_layers: 3,
            n: 64,
            ..Default::default()
        };
        let seeds: Vec<u64> = (0..20).collect();
        let r = asymmetry_experiment::<f32>(&cfg, &seeds).unwrap();
        assert!(r.pass_rate > 0.5, "pass rate {}", r.pass_rate);
        for s in &r.seeds {
            let control = &s.report.segments[0];
            assert_eq!(control.final_mse, 0.0);
            assert!(control.layer_mse.iter().all(|&m| m == 0.0));
            assert!(s.report.segments.iter().all(|e| e.final_mse >= 0.0));
        }
    }

    #[test]
    fn equal_segments_partition() {
        let segs = equal_segments(10, 4, PruneMode::Control).unwrap();
        let bounds: Vec<(usize, usize)> = segs.iter().map(|s| (s.start, s.end)).collect();
        assert_eq!(bounds, vec![(0, 2), (2, 5), (5, 7), (7, 10)]);
        assert!(equal_segments(3, 4, PruneMode::Control).is_err());
    }

    #[test]
    fn zero_beta_selects_like_sam() {
        let qkv = gen_gaussian_qkv::<f32>(40, 8, 3, 1.0).unwrap();
        let r = compare_sam_oam(&qkv.q, &qkv.k, &qkv.v, 6, 0.0).unwrap();
        assert_eq!(r.mse_sam, r.mse_oam);
        assert_eq!(r.bound_sam, r.bound_oam);
    }

    #[test]
    fn equal_value_norms_select_like_sam() {
        let qkv = gen_gaussian_qkv::<f64>(30, 8, 8, 1.0).unwrap();
        let v = Matrix::from_fn(30, 8, |r, c| if c == r % 8 { 2.0 } else { 0.0 });
        let a = token_keep_sets(&qkv.q, &qkv.k, &v, 5, TokenMetric::Sam, 1.0).unwrap();
        let b = token_keep_sets(&qkv.q, &qkv.k, &v, 5, TokenMetric::Oam, 1.0).unwrap();
        assert_eq!(a, b);
        let r = compare_sam_oam(&qkv.q, &qkv.k, &v, 5, 1.0).unwrap();
        assert_eq!(r.mse_sam, r.mse_oam);
    }

    #[test]
    fn budget_out_of_range_rejected() {
        let qkv = gen_gaussian_qkv::<f32>(8, 4, 3, 1.0).unwrap();
        assert!(compare_sam_oam(&qkv.q, &qkv.k, &qkv.v, 0, 1.0).is_err());
        assert!(compare_sam_oam(&qkv.q, &qkv.k, &qkv.v, 9, 1.0).is_err());
    }

    #[test]
    fn bound_check_edge_cases() {
        let qkv = gen_gaussian_qkv::<f64>(10, 4, 5, 1.0).unwrap();
        let (o, p) = dense_attention(&qkv.q, &qkv.k, &qkv.v).unwrap();
        let full = verify_separable_bound(&p, &qkv.v, &KeepSets::full(10)).unwrap();
        assert!(full.passed);
        assert_eq!((full.lhs, full.bound, full.slack), (0.0, 0.0, 0.0));
        let empty = verify_separable_bound(&p, &qkv.v, &KeepSets::empty(10)).unwrap();
        assert!(empty.passed);
        assert!((empty.slack - (empty.bound - o.frobenius())).abs() < 1e-12);
        assert!(empty.slack >= 0.0);
    }

    #[test]
    fn rank_hand_instance() {
        // s = [0, 1] with unit query scale; ‖V‖ = [e², 1].
        let k = Matrix::from_vec(2, 1, vec![0.0, 1.0]).unwrap();
        let e2 = 2f64.exp();
        let v = Matrix::from_vec(2, 1, vec![e2, 1.0]).unwrap();
        let r = verify_rank_equivalence(&[1.0], &k, &v, 1.0).unwrap();
        assert!(r.passed);
        assert_eq!((r.pairs, r.violations, r.ties_skipped), (1, 0, 0));
    }

    #[test]
    fn rank_ties_skipped() {
        let k = Matrix::<f64>::zeros(3, 2);
        let v = Matrix::from_fn(3, 2, |_, _| 1.0);
        let r = verify_rank_equivalence(&[1.0, 1.0], &k, &v, 1.0).unwrap();
        assert!(r.passed);
        assert_eq!((r.pairs, r.ties_skipped), (0, 3));
    }
}
