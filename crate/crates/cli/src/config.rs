//! Run configuration: an optional JSON file, overridden field by field by
//! command-line flags.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use signflow_core::dynamics::{Algorithm, IntegratorOptions};
use signflow_core::problem::{random_dataset, Dataset, RawBlock, ValueRanges};

use crate::error::CliError;
use crate::format::DatasetFile;

/// Where the dataset comes from. An object with both `blocks` and
/// `block_sizes` matches neither variant and is rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetSource {
    Inline(InlineBlocks),
    Random(RandomSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineBlocks {
    pub blocks: Vec<RawBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomSpec {
    /// Defaults to the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub block_sizes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_range: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_range: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorPatch {
    pub rel_tol: Option<f64>,
    pub abs_tol: Option<f64>,
    pub t_max: Option<f64>,
    pub event_tol: Option<f64>,
    pub residual_tol: Option<f64>,
    pub sample_grid: Option<usize>,
}

/// Contents of a `--config` file; every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub dataset: Option<DatasetSource>,
    pub seed: Option<u64>,
    pub eps: Option<f64>,
    pub eps_grid: Option<Vec<f64>>,
    pub alpha: Option<f64>,
    pub algo: Option<Algorithm>,
    pub integrator: Option<IntegratorPatch>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub instances: Option<u64>,
    pub max_blocks: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AlgoArg {
    Ssd,
    Gd,
}

impl From<AlgoArg> for Algorithm {
    fn from(a: AlgoArg) -> Self {
        match a {
            AlgoArg::Ssd => Algorithm::Ssd,
            AlgoArg::Gd => Algorithm::Gd,
        }
    }
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON configuration file; flags override its values
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory (created if missing)
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "U64")]
    pub seed: Option<u64>,
    /// Stability constant ε
    #[arg(long, value_name = "F")]
    pub eps: Option<f64>,
    /// Comma-separated, strictly increasing ε values
    #[arg(long, value_name = "F,F,...")]
    pub eps_grid: Option<String>,
    /// Initialization scale α
    #[arg(long, value_name = "F")]
    pub alpha: Option<f64>,
    #[arg(long, value_enum)]
    pub algo: Option<AlgoArg>,
    /// Worker threads (default: logical cores)
    #[arg(long, value_name = "N")]
    pub jobs: Option<usize>,
    #[arg(long, value_name = "F")]
    pub rel_tol: Option<f64>,
    #[arg(long, value_name = "F")]
    pub abs_tol: Option<f64>,
    #[arg(long, value_name = "F")]
    pub t_max: Option<f64>,
    /// Random dataset with these block sizes (replaces the configured dataset)
    #[arg(long, value_name = "N,N,...", value_delimiter = ',')]
    pub blocks: Option<Vec<usize>>,
}

/// Fully resolved settings of one invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: Option<DatasetSource>,
    pub seed: u64,
    pub eps: Option<f64>,
    pub eps_grid: Option<Vec<f64>>,
    pub alpha: Option<f64>,
    pub algo: Algorithm,
    pub integrator: IntegratorOptions,
    pub out: PathBuf,
    pub jobs: Option<usize>,
    pub instances: Option<u64>,
    pub max_blocks: Option<usize>,
}

pub const DEFAULT_SEED: u64 = 1;

impl RunConfig {
    pub fn resolve(args: &CommonArgs) -> Result<Self, CliError> {
        let file = match &args.config {
            Some(p) => load_config(p)?,
            None => ConfigFile::default(),
        };
        let mut integrator = IntegratorOptions::default();
        if let Some(p) = &file.integrator {
            integrator.rel_tol = p.rel_tol.unwrap_or(integrator.rel_tol);
            integrator.abs_tol = p.abs_tol.unwrap_or(integrator.abs_tol);
            integrator.t_max = p.t_max.unwrap_or(integrator.t_max);
            integrator.event_tol = p.event_tol.unwrap_or(integrator.event_tol);
            integrator.residual_tol = p.residual_tol.unwrap_or(integrator.residual_tol);
            integrator.sample_grid = p.sample_grid.unwrap_or(integrator.sample_grid);
        }
        integrator.rel_tol = args.rel_tol.unwrap_or(integrator.rel_tol);
        integrator.abs_tol = args.abs_tol.unwrap_or(integrator.abs_tol);
        integrator.t_max = args.t_max.unwrap_or(integrator.t_max);
        integrator.validate().map_err(|e| CliError::Config(format!("integrator options: {e}")))?;

        let dataset = match &args.blocks {
            Some(sizes) => Some(DatasetSource::Random(RandomSpec {
                seed: None,
                block_sizes: sizes.clone(),
                x_range: None,
                y_range: None,
            })),
            None => file.dataset,
        };
        let out = args.out.clone().or(file.out).ok_or_else(|| CliError::Config("no output directory (--out)".into()))?;
        let cfg = Self {
            dataset,
            seed: args.seed.or(file.seed).unwrap_or(DEFAULT_SEED),
            eps: args.eps.or(file.eps),
            eps_grid: match &args.eps_grid {
                Some(text) => Some(parse_grid(text)?),
                None => file.eps_grid,
            },
            alpha: args.alpha.or(file.alpha),
            algo: args.algo.map(Algorithm::from).or(file.algo).unwrap_or(Algorithm::Ssd),
            integrator,
            out,
            jobs: args.jobs.or(file.jobs),
            instances: file.instances,
            max_blocks: file.max_blocks,
        };
        if cfg.jobs == Some(0) {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        Ok(cfg)
    }

    /// Builds the dataset, falling back to a random one with `default_sizes`.
    pub fn build_dataset(&self, default_sizes: &[usize]) -> Result<Dataset, CliError> {
        let source = self.dataset.clone().unwrap_or_else(|| {
            DatasetSource::Random(RandomSpec { seed: None, block_sizes: default_sizes.to_vec(), x_range: None, y_range: None })
        });
        let built = match source {
            DatasetSource::Inline(b) => DatasetFile { blocks: b.blocks }.build(),
            DatasetSource::Random(spec) => {
                if spec.block_sizes.is_empty() || spec.block_sizes.contains(&0) {
                    return Err(CliError::Config("block sizes must be positive and nonempty".into()));
                }
                let mut ranges = ValueRanges::default();
                if let Some(x) = spec.x_range {
                    ranges.x = x;
                }
                if let Some(y) = spec.y_range {
                    ranges.y = y;
                }
                if !(0.0 < ranges.x.0 && ranges.x.0 < ranges.x.1) || !(0.0 < ranges.y.0 && ranges.y.0 < ranges.y.1) {
                    return Err(CliError::Config("value ranges must satisfy 0 < lo < hi".into()));
                }
                random_dataset(spec.seed.unwrap_or(self.seed), &spec.block_sizes, &ranges)
            }
        };
        built.map_err(|e| CliError::Config(format!("dataset: {e}")))
    }

    pub fn thread_pool(&self) -> Result<rayon::ThreadPool, CliError> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = self.jobs {
            b = b.num_threads(n);
        }
        b.build().map_err(|e| CliError::Config(format!("thread pool: {e}")))
    }
}

/// Parses `a,b,c`; an empty string is an empty grid, rejected later.
pub fn parse_grid(text: &str) -> Result<Vec<f64>, CliError> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|f| f.trim().parse::<f64>().map_err(|e| CliError::Config(format!("--eps-grid value {f:?}: {e}"))))
        .collect()
}

fn load_config(path: &Path) -> Result<ConfigFile, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}
