//! Per-head Q/K/V from tensor files or from a generator.

use std::path::Path;

use stem_core::{gen_gaussian_qkv, gen_outlier_qkv, load_tensor, Matrix, Qkv};

use crate::config::{Generator, RunConfig};
use crate::error::CliError;

pub fn file_names(head: usize) -> [String; 3] {
    ["q", "k", "v"].map(|t| format!("{t}_h{head}.stt"))
}

pub fn generate(cfg: &RunConfig, seed: u64) -> Result<Qkv<f32>, CliError> {
    let qkv = match cfg.generator {
        Generator::Gaussian => gen_gaussian_qkv(cfg.n, cfg.d, seed, 1.0)?,
        Generator::Outlier => gen_outlier_qkv(cfg.n, cfg.d, seed, cfg.outlier_frac, cfg.outlier_gain)?.qkv,
        Generator::Unit => {
            let mut qkv = gen_gaussian_qkv::<f32>(cfg.n, cfg.d, seed, 1.0)?;
            let norms: Vec<f64> = (0..cfg.n).map(|r| qkv.v.row_norm(r)).collect();
            qkv.v = Matrix::from_fn(cfg.n, cfg.d, |r, c| {
                (qkv.v.get(r, c) as f64 / norms[r].max(f64::MIN_POSITIVE)) as f32
            });
            qkv
        }
    };
    Ok(qkv)
}

fn load_head(dir: &Path, head: usize) -> Result<Qkv<f32>, CliError> {
    let [q, k, v] = file_names(head).map(|f| load_tensor::<f32>(&dir.join(f)));
    let qkv = Qkv { q: q?, k: k?, v: v? };
    if qkv.q.shape() != qkv.k.shape() || qkv.v.rows() != qkv.k.rows() {
        return Err(CliError::Usage(format!(
            "head {head} in {}: Q {:?}, K {:?}, V {:?} do not line up",
            dir.display(),
            qkv.q.shape(),
            qkv.k.shape(),
            qkv.v.shape()
        )));
    }
    Ok(qkv)
}

/// Heads for `cfg`. With an input directory, `n` and `d` are taken from
/// the tensors and the returned config reflects that.
pub fn heads(cfg: &RunConfig) -> Result<(RunConfig, Vec<Qkv<f32>>), CliError> {
    match &cfg.input {
        Some(dir) => {
            let heads = (0..cfg.heads)
                .map(|h| load_head(dir, h))
                .collect::<Result<Vec<_>, _>>()?;
            let (n, d) = heads[0].q.shape();
            if heads.iter().any(|h| h.q.shape() != (n, d) || h.v.cols() != d) {
                return Err(CliError::Usage(format!(
                    "heads in {} have different shapes",
                    dir.display()
                )));
            }
            let mut cfg = cfg.clone();
            cfg.n = n;
            cfg.d = d;
            cfg.schedule()?;
            Ok((cfg, heads))
        }
        None => {
            let heads = (0..cfg.heads)
                .map(|h| generate(cfg, cfg.seed.wrapping_add(h as u64)))
                .collect::<Result<Vec<_>, _>>()?;
            Ok((cfg.clone(), heads))
        }
    }
}
