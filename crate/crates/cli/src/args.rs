//! Command-line flags, the JSON config file, and their merge. Flags win over
//! config values; relative paths in a config file resolve against the
//! config file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use proxyseg_core::evalkit::DEFAULT_IGNORE_INDEX;
use proxyseg_core::pam::{DEFAULT_BETA, DEFAULT_GAMMA};
use proxyseg_core::{AttnSource, MaskMode, PamConfig};
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "proxyseg",
    version,
    about = "Proxy-attention segmentation over pre-extracted features"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Segment every bundle and write one label map per image.
    Segment(SegmentArgs),
    /// Score predicted label maps against ground truth (per-class IoU, mIoU).
    Eval(EvalArgs),
    /// Precision/recall of pairwise patch scores as a same-label classifier.
    Coherence(CoherenceArgs),
    /// mIoU over a grid of beta, gamma or alpha values.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskArg {
    Adaptive,
    Hard,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Beta,
    Gamma,
    Alpha,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            Self::Beta => "beta",
            Self::Gamma => "gamma",
            Self::Alpha => "alpha",
        }
    }

    /// Default grids, built from integers so the printed values are exact.
    pub fn default_values(self) -> Vec<f64> {
        match self {
            Self::Beta => (10..=16).map(|i| i as f64 / 10.0).collect(),
            Self::Gamma => (4..=10).map(|i| i as f64 / 2.0).collect(),
            Self::Alpha => (0..=4).map(|i| i as f64 / 5.0).collect(),
        }
    }
}

fn parse_source(s: &str) -> Result<AttnSource, String> {
    s.parse().map_err(|e: proxyseg_core::PamError| e.to_string())
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Bundle manifest, bundle directory, or a directory of bundles.
    #[arg(long)]
    pub bundles: Option<PathBuf>,
    /// Weights manifest; overrides each bundle's `weights_path`.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Text-embedding manifest.
    #[arg(long)]
    pub text: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, value_enum)]
    pub mask_mode: Option<MaskArg>,
    /// Cosine threshold for `--mask-mode hard`.
    #[arg(long, allow_negative_numbers = true)]
    pub alpha: Option<f64>,
    #[arg(long, value_parser = parse_source)]
    pub attn_source: Option<AttnSource>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON list of `[r, g, b]` colours; enables PNG output.
    #[arg(long)]
    pub palette: Option<PathBuf>,
    /// Worker threads (default: one per core).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// JSON file with defaults for any of these flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Label 0 wherever the best mean logit is below this value.
    #[arg(long, allow_negative_numbers = true)]
    pub background_threshold: Option<f32>,
    /// Ground-truth label value that is not scored.
    #[arg(long)]
    pub ignore_index: Option<u32>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Predicted label map, or a directory of `<image_id>.pgm`.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Ground-truth label map, or a directory of `<image_id>.{npy,pgm}`.
    #[arg(long)]
    pub gt: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CoherenceArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Comma-separated attention sources to score.
    #[arg(long, value_delimiter = ',', value_parser = parse_source)]
    pub sources: Option<Vec<AttnSource>>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub param: Option<SweepParam>,
    /// Comma-separated values (default: the built-in grid for the parameter).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub values: Option<Vec<f64>>,
}

/// Keys accepted in a `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    bundles: Option<PathBuf>,
    weights: Option<PathBuf>,
    text: Option<PathBuf>,
    beta: Option<f64>,
    gamma: Option<f64>,
    mask_mode: Option<MaskArg>,
    alpha: Option<f64>,
    attn_source: Option<AttnSource>,
    scale_qk: Option<bool>,
    out: Option<PathBuf>,
    palette: Option<PathBuf>,
    jobs: Option<usize>,
    background_threshold: Option<f32>,
    ignore_index: Option<u32>,
    pred: Option<PathBuf>,
    gt: Option<PathBuf>,
    sources: Option<Vec<AttnSource>>,
    param: Option<SweepParam>,
    values: Option<Vec<f64>>,
}

impl FileConfig {
    fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| {
            let msg = format!("cannot read config {}: {e}", path.display());
            if e.kind() == std::io::ErrorKind::NotFound {
                CliError::Invalid(msg)
            } else {
                CliError::Io(msg)
            }
        })?;
        let mut cfg: Self =
            serde_json::from_str(&text).map_err(|e| CliError::invalid(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.bundles,
            &mut cfg.weights,
            &mut cfg.text,
            &mut cfg.out,
            &mut cfg.palette,
            &mut cfg.pred,
            &mut cfg.gt,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct Settings {
    pub bundles: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub text: Option<PathBuf>,
    pub pam: PamConfig,
    pub out: Option<PathBuf>,
    pub palette: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub background_threshold: Option<f32>,
    pub ignore_index: u32,
    pub pred: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub sources: Vec<AttnSource>,
    pub param: Option<SweepParam>,
    pub values: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Extra {
    pub pred: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub sources: Option<Vec<AttnSource>>,
    pub param: Option<SweepParam>,
    pub values: Option<Vec<f64>>,
}

pub fn resolve(flags: &Common, extra: Extra) -> Result<Settings, CliError> {
    let file = match &flags.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let mode = flags.mask_mode.or(file.mask_mode);
    let alpha = flags.alpha.or(file.alpha);
    let mask_mode = match (mode, alpha) {
        (Some(MaskArg::Hard), Some(alpha)) | (None, Some(alpha)) => MaskMode::Hard { alpha },
        (Some(MaskArg::Hard), None) => return Err(CliError::invalid("`alpha`: required with --mask-mode hard")),
        (Some(MaskArg::None), a) => {
            if a.is_some() {
                log::warn!("alpha is ignored with mask mode none");
            }
            MaskMode::None
        }
        (Some(MaskArg::Adaptive), a) => {
            if a.is_some() {
                log::warn!("alpha is ignored with mask mode adaptive");
            }
            MaskMode::Adaptive
        }
        (None, None) => MaskMode::Adaptive,
    };
    let pam = PamConfig {
        beta: flags.beta.or(file.beta).unwrap_or(DEFAULT_BETA),
        gamma: flags.gamma.or(file.gamma).unwrap_or(DEFAULT_GAMMA),
        mask_mode,
        attn_source: flags.attn_source.or(file.attn_source).unwrap_or(AttnSource::Proxy),
        scale_qk: file.scale_qk.unwrap_or(true),
    };
    pam.validate()?;
    let jobs = flags.jobs.or(file.jobs);
    if jobs == Some(0) {
        return Err(CliError::invalid("`jobs`: must be at least 1"));
    }
    Ok(Settings {
        bundles: flags.bundles.clone().or(file.bundles),
        weights: flags.weights.clone().or(file.weights),
        text: flags.text.clone().or(file.text),
        pam,
        out: flags.out.clone().or(file.out),
        palette: flags.palette.clone().or(file.palette),
        jobs,
        background_threshold: flags.background_threshold.or(file.background_threshold),
        ignore_index: flags.ignore_index.or(file.ignore_index).unwrap_or(DEFAULT_IGNORE_INDEX),
        pred: extra.pred.or(file.pred),
        gt: extra.gt.or(file.gt),
        sources: extra
            .sources
            .or(file.sources)
            .unwrap_or_else(|| vec![AttnSource::Proxy]),
        param: extra.param.or(file.param),
        values: extra.values.or(file.values),
    })
}

impl Settings {
    pub fn require<'a>(value: &'a Option<PathBuf>, field: &str) -> Result<&'a Path, CliError> {
        value.as_deref().ok_or_else(|| {
            CliError::invalid(format!(
                "`{field}`: required (flag --{} or config)",
                field.replace('_', "-")
            ))
        })
    }

    pub fn pool(&self) -> Result<rayon::ThreadPool, CliError> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = self.jobs {
            b = b.num_threads(n);
        }
        b.build().map_err(|e| CliError::Io(format!("thread pool: {e}")))
    }
}
