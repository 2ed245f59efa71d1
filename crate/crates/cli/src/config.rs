//! Flat JSON config files and flag/file/default resolution.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};
use stem_core::{
    BudgetSchedule, BudgetUnit, GuardWindows, MetricConfig, MinBudgetMode, Pooling,
};

use crate::error::CliError;

pub const DEFAULT_N: usize = 1024;
pub const DEFAULT_D: usize = 64;
pub const DEFAULT_OUTLIER_FRAC: f64 = 0.1;
pub const DEFAULT_OUTLIER_GAIN: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum KUnit {
    Tokens,
    Blocks,
    /// Fraction of the number of key blocks.
    Frac,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    Gaussian,
    Outlier,
    /// Gaussian Q/K with every value row scaled to unit norm.
    Unit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PoolingArg {
    Antidiagonal,
    Mean,
}

impl From<PoolingArg> for Pooling {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Antidiagonal => Pooling::Antidiagonal,
            PoolingArg::Mean => Pooling::Mean,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum MinModeArg {
    SequenceTotal,
    PerRow,
}

impl From<MinModeArg> for MinBudgetMode {
    fn from(m: MinModeArg) -> Self {
        match m {
            MinModeArg::SequenceTotal => MinBudgetMode::SequenceTotal,
            MinModeArg::PerRow => MinBudgetMode::PerRow,
        }
    }
}

/// Half-open seed range, written `a..b`, `a..=b` or a single seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedRange {
    pub start: u64,
    pub end: u64,
}

impl SeedRange {
    pub fn seeds(&self) -> Vec<u64> {
        (self.start..self.end).collect()
    }
}

impl FromStr for SeedRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parse = |x: &str| {
            x.trim()
                .parse::<u64>()
                .map_err(|e| format!("bad seed `{x}`: {e}"))
        };
        let (start, end) = if let Some((a, b)) = s.split_once("..=") {
            (parse(a)?, parse(b)?.checked_add(1).ok_or("seed range overflows")?)
        } else if let Some((a, b)) = s.split_once("..") {
            (parse(a)?, parse(b)?)
        } else {
            let a = parse(s)?;
            (a, a + 1)
        };
        if start >= end {
            return Err(format!("seed range `{s}` is empty"));
        }
        Ok(Self { start, end })
    }
}

impl fmt::Display for SeedRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}

/// Every key a config file may set. Unknown keys are rejected.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub n: Option<usize>,
    pub d: Option<usize>,
    pub heads: Option<usize>,
    pub block_size: Option<usize>,
    pub k_start: Option<f64>,
    pub k_unit: Option<KUnit>,
    pub mu: Option<f64>,
    pub beta: Option<f64>,
    pub pooling: Option<PoolingArg>,
    pub init_blocks: Option<usize>,
    pub local_blocks: Option<usize>,
    pub min_total_blocks: Option<usize>,
    pub min_mode: Option<MinModeArg>,
    pub seed: Option<u64>,
    pub generator: Option<Generator>,
    pub outlier_frac: Option<f64>,
    pub outlier_gain: Option<f64>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub layers: Option<usize>,
    pub d_ff: Option<usize>,
    pub layer: Option<usize>,
    pub segments: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
    }
}

/// Run settings shared by `gen`, `run`, `compare` and `sweep`.
#[derive(Args, Clone, Debug, Default)]
pub struct RunArgs {
    /// Flat JSON file with any of the settings below; flags override it
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Sequence length [default: 1024]
    #[arg(long)]
    pub n: Option<usize>,
    /// Head dimension [default: 64]
    #[arg(long)]
    pub d: Option<usize>,
    /// Number of independent heads [default: 1]
    #[arg(long)]
    pub heads: Option<usize>,
    /// Block size B [default: 128]
    #[arg(long)]
    pub block_size: Option<usize>,
    /// Initial budget in `--k-unit`s [default: 0.2 frac, 0.1 when n > 16384]
    #[arg(long)]
    pub k_start: Option<f64>,
    /// Unit of --k-start [default: frac]
    #[arg(long, value_enum)]
    pub k_unit: Option<KUnit>,
    /// Budget decay ratio μ in (0, 1] [default: 0.7]
    #[arg(long)]
    pub mu: Option<f64>,
    /// Weight of the value-magnitude term [default: 0.2]
    #[arg(long)]
    pub beta: Option<f64>,
    /// Block score pooling [default: antidiagonal]
    #[arg(long, value_enum)]
    pub pooling: Option<PoolingArg>,
    /// Leading guard blocks always kept [default: 4]
    #[arg(long)]
    pub init_blocks: Option<usize>,
    /// Trailing guard blocks always kept [default: 4]
    #[arg(long)]
    pub local_blocks: Option<usize>,
    /// Minimum total budget in blocks [default: 54]
    #[arg(long)]
    pub min_total_blocks: Option<usize>,
    /// How the minimum budget is applied [default: sequence-total]
    #[arg(long, value_enum)]
    pub min_mode: Option<MinModeArg>,
    /// Base seed; head h uses seed + h [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Synthetic input generator [default: gaussian]
    #[arg(long, value_enum)]
    pub generator: Option<Generator>,
    /// Fraction of outlier value rows [default: 0.1]
    #[arg(long)]
    pub outlier_frac: Option<f64>,
    /// Gain applied to outlier value rows [default: 8]
    #[arg(long)]
    pub outlier_gain: Option<f64>,
    /// Directory of q_h*/k_h*/v_h* tensors to use instead of a generator
    #[arg(long, value_name = "DIR")]
    pub input: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub n: usize,
    pub d: usize,
    pub heads: usize,
    pub block_size: usize,
    pub k_start: f64,
    pub k_unit: KUnit,
    pub mu: f64,
    pub beta: f64,
    pub pooling: PoolingArg,
    pub init_blocks: usize,
    pub local_blocks: usize,
    pub min_total_blocks: usize,
    pub min_mode: MinModeArg,
    pub seed: u64,
    pub generator: Generator,
    pub outlier_frac: f64,
    pub outlier_gain: f64,
    pub input: Option<PathBuf>,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<(RunConfig, FileConfig), CliError> {
        let file = FileConfig::load(self.config.as_deref())?;
        let n = self.n.or(file.n).unwrap_or(DEFAULT_N);
        let k_unit = self.k_unit.or(file.k_unit).unwrap_or(KUnit::Frac);
        let k_start = match self.k_start.or(file.k_start) {
            Some(k) => k,
            None => match k_unit {
                KUnit::Frac if n > 16384 => 0.1,
                KUnit::Frac => 0.2,
                _ => {
                    return Err(CliError::Usage(
                        "--k-start is required when --k-unit is tokens or blocks".into(),
                    ))
                }
            },
        };
        let cfg = RunConfig {
            n,
            d: self.d.or(file.d).unwrap_or(DEFAULT_D),
            heads: self.heads.or(file.heads).unwrap_or(1),
            block_size: self
                .block_size
                .or(file.block_size)
                .unwrap_or(stem_core::schedule::DEFAULT_BLOCK_SIZE),
            k_start,
            k_unit,
            mu: self.mu.or(file.mu).unwrap_or(stem_core::schedule::DEFAULT_MU),
            beta: self.beta.or(file.beta).unwrap_or(stem_core::metric::DEFAULT_BETA),
            pooling: self.pooling.or(file.pooling).unwrap_or(PoolingArg::Antidiagonal),
            init_blocks: self.init_blocks.or(file.init_blocks).unwrap_or(4),
            local_blocks: self.local_blocks.or(file.local_blocks).unwrap_or(4),
            min_total_blocks: self
                .min_total_blocks
                .or(file.min_total_blocks)
                .unwrap_or(stem_core::schedule::DEFAULT_MIN_TOTAL_BLOCKS),
            min_mode: self.min_mode.or(file.min_mode).unwrap_or(MinModeArg::SequenceTotal),
            seed: self.seed.or(file.seed).unwrap_or(0),
            generator: self.generator.or(file.generator).unwrap_or(Generator::Gaussian),
            outlier_frac: self
                .outlier_frac
                .or(file.outlier_frac)
                .unwrap_or(DEFAULT_OUTLIER_FRAC),
            outlier_gain: self
                .outlier_gain
                .or(file.outlier_gain)
                .unwrap_or(DEFAULT_OUTLIER_GAIN),
            input: self.input.clone().or(file.input.clone()),
        };
        cfg.check()?;
        Ok((cfg, file))
    }
}

impl RunConfig {
    fn check(&self) -> Result<(), CliError> {
        if self.n == 0 {
            return Err(CliError::field("n", "must be positive"));
        }
        if self.d == 0 {
            return Err(CliError::field("d", "must be positive"));
        }
        if self.heads == 0 {
            return Err(CliError::field("heads", "must be positive"));
        }
        if self.k_unit == KUnit::Frac && !(self.k_start > 0.0 && self.k_start <= 1.0) {
            return Err(CliError::field("k_start", "a frac budget must lie in (0, 1]"));
        }
        self.metric()?;
        self.schedule()?;
        Ok(())
    }

    pub fn metric(&self) -> Result<MetricConfig, CliError> {
        let m = MetricConfig {
            beta: self.beta,
            block_size: self.block_size,
            pooling: self.pooling.into(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn guards(&self) -> GuardWindows {
        GuardWindows {
            init_blocks: self.init_blocks,
            local_blocks: self.local_blocks,
        }
    }

    pub fn schedule(&self) -> Result<BudgetSchedule, CliError> {
        self.schedule_with_mu(self.mu)
    }

    pub fn schedule_with_mu(&self, mu: f64) -> Result<BudgetSchedule, CliError> {
        let (k, unit) = match self.k_unit {
            KUnit::Tokens => (self.k_start, BudgetUnit::Tokens),
            KUnit::Blocks => (self.k_start, BudgetUnit::Blocks),
            KUnit::Frac => (
                self.k_start * self.n.div_ceil(self.block_size) as f64,
                BudgetUnit::Blocks,
            ),
        };
        Ok(BudgetSchedule::new(self.n, k, unit, mu)?
            .with_block_size(self.block_size)?
            .with_guards(self.guards())
            .with_min_total_blocks(self.min_total_blocks, self.min_mode.into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_ranges() {
        assert_eq!("0..3".parse::<SeedRange>().unwrap().seeds(), vec![0, 1, 2]);
        assert_eq!("2..=3".parse::<SeedRange>().unwrap().seeds(), vec![2, 3]);
        assert_eq!("7".parse::<SeedRange>().unwrap().seeds(), vec![7]);
        assert!("3..3".parse::<SeedRange>().is_err());
        assert!("a..3".parse::<SeedRange>().is_err());
    }

    #[test]
    fn defaults_follow_library() {
        let (c, _) = RunArgs::default().resolve().unwrap();
        assert_eq!((c.block_size, c.mu, c.beta), (128, 0.7, 0.2));
        assert_eq!((c.init_blocks, c.local_blocks, c.min_total_blocks), (4, 4, 54));
        assert_eq!((c.k_unit, c.k_start), (KUnit::Frac, 0.2));
        let long = RunArgs {
            n: Some(32768),
            ..Default::default()
        };
        assert_eq!(long.resolve().unwrap().0.k_start, 0.1);
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"n": 256, "mu": 0.5, "beta": 0.4}"#).unwrap();
        let args = RunArgs {
            config: Some(path),
            mu: Some(0.9),
            ..Default::default()
        };
        let (c, _) = args.resolve().unwrap();
        assert_eq!((c.n, c.mu, c.beta, c.d), (256, 0.9, 0.4, DEFAULT_D));
    }

    #[test]
    fn unknown_file_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"nn": 256}"#).unwrap();
        let args = RunArgs {
            config: Some(path),
            ..Default::default()
        };
        assert!(matches!(args.resolve(), Err(CliError::Usage(_))));
    }

    #[test]
    fn bad_fields_named() {
        let args = RunArgs {
            mu: Some(1.5),
            ..Default::default()
        };
        let msg = args.resolve().unwrap_err().to_string();
        assert!(msg.contains("mu"), "{msg}");
        let args = RunArgs {
            k_unit: Some(KUnit::Tokens),
            ..Default::default()
        };
        assert!(args.resolve().is_err());
    }

    #[test]
    fn frac_unit_scales_by_block_count() {
        let args = RunArgs {
            n: Some(8192),
            ..Default::default()
        };
        let s = args.resolve().unwrap().0.schedule().unwrap();
        assert_eq!(s.unit, BudgetUnit::Blocks);
        assert!((s.k_start - 12.8).abs() < 1e-12);
    }
}
