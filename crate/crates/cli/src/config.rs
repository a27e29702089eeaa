//! Run configuration: a TOML file whose every field can be overridden by a
//! command-line flag, resolved against per-command defaults.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use vra_core::metrics::TuneGrid;
use vra_core::rectify::ThresholdMode;
use vra_core::scoring::{LogitSource, ScoreMethod, VraPlusPlusParams};
use vra_core::variational::{DEFAULT_BINS, DEFAULT_EPS, DEFAULT_LAMBDA};

use crate::error::CliError;
use crate::synth::SyntheticSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum MethodName {
    Msp,
    Energy,
    OdinT,
    VraPp,
    FeatureSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum RectifierName {
    Identity,
    React,
    Vra,
    #[serde(rename = "vra+")]
    #[value(name = "vra+")]
    VraPlus,
    GstarTrue,
    GstarSubsample,
}

impl RectifierName {
    pub fn is_gstar(self) -> bool {
        matches!(self, RectifierName::GstarTrue | RectifierName::GstarSubsample)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    PerFeature,
    Pooled,
}

impl From<ModeArg> for ThresholdMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::PerFeature => ThresholdMode::PerFeature,
            ModeArg::Pooled => ThresholdMode::Pooled,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LogitArg {
    Raw,
    Rectified,
}

impl From<LogitArg> for LogitSource {
    fn from(l: LogitArg) -> Self {
        match l {
            LogitArg::Raw => LogitSource::Raw,
            LogitArg::Rectified => LogitSource::Rectified,
        }
    }
}

/// Grid overrides for `tune`; unset axes keep their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub eta_alpha: Option<Vec<f64>>,
    pub eta_beta: Option<Vec<f64>>,
    pub gamma: Option<Vec<f64>>,
    pub lambda_v: Option<Vec<f64>>,
    pub alpha_v: Option<Vec<f64>>,
}

/// The configuration document as written by a user. Relative paths are
/// resolved against the document's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub method: Option<MethodName>,
    pub rectifier: Option<RectifierName>,
    /// Saved spec document to apply instead of building a rectifier.
    pub spec: Option<PathBuf>,
    pub eta_alpha: Option<f64>,
    pub eta_beta: Option<f64>,
    pub gamma: Option<f64>,
    pub lambda: Option<f64>,
    pub lambda_v: Option<f64>,
    pub alpha_v: Option<f64>,
    pub temperature: Option<f64>,
    pub bins: Option<usize>,
    pub eps: Option<f64>,
    pub subsample_fraction: Option<f64>,
    pub seed: Option<u64>,
    pub threshold_mode: Option<ThresholdMode>,
    pub gstar_mode: Option<ThresholdMode>,
    pub logits: Option<LogitSource>,
    /// OOD datasets to restrict `gstar` to; all when unset.
    pub datasets: Option<Vec<String>>,
    #[serde(default)]
    pub grid: GridConfig,
    pub synth: Option<SyntheticSpec>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        for p in [&mut cfg.manifest, &mut cfg.output, &mut cfg.spec].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

/// Flags shared by every subcommand; each overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// Configuration document (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<MethodName>,
    #[arg(long, value_enum)]
    pub rectifier: Option<RectifierName>,
    /// Saved spec document to apply (eval).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub eta_alpha: Option<f64>,
    #[arg(long)]
    pub eta_beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Trade-off weight of the variational objective.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lambda_v: Option<f64>,
    #[arg(long)]
    pub alpha_v: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub subsample_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub threshold_mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub gstar_mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub logits: Option<LogitArg>,
    /// Restrict to these OOD datasets (repeatable).
    #[arg(long = "dataset")]
    pub datasets: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub grid_eta_alpha: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub grid_eta_beta: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub grid_gamma: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub grid_lambda_v: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub grid_alpha_v: Option<Vec<f64>>,
}

impl Flags {
    /// Config file (if any) with every given flag applied on top.
    pub fn merged(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! over {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field.clone() {
                    cfg.$field = Some(v.into());
                }
            )*};
        }
        over!(
            manifest, output, method, rectifier, spec, eta_alpha, eta_beta, gamma, lambda,
            lambda_v, alpha_v, temperature, bins, eps, subsample_fraction, seed,
            threshold_mode, gstar_mode, logits
        );
        if !self.datasets.is_empty() {
            cfg.datasets = Some(self.datasets.clone());
        }
        let grid = &mut cfg.grid;
        for (flag, slot) in [
            (&self.grid_eta_alpha, &mut grid.eta_alpha),
            (&self.grid_eta_beta, &mut grid.eta_beta),
            (&self.grid_gamma, &mut grid.gamma),
            (&self.grid_lambda_v, &mut grid.lambda_v),
            (&self.grid_alpha_v, &mut grid.alpha_v),
        ] {
            if let Some(v) = flag {
                *slot = Some(v.clone());
            }
        }
        Ok(cfg)
    }
}

/// Serializable copy of the search grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSettings {
    pub eta_alpha: Vec<f64>,
    pub eta_beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub lambda_v: Vec<f64>,
    pub alpha_v: Vec<f64>,
}

impl From<&GridSettings> for TuneGrid {
    fn from(g: &GridSettings) -> Self {
        TuneGrid {
            eta_alpha: g.eta_alpha.clone(),
            eta_beta: g.eta_beta.clone(),
            gamma: g.gamma.clone(),
            lambda_v: g.lambda_v.clone(),
            alpha_v: g.alpha_v.clone(),
        }
    }
}

/// Subcommand whose defaults apply during resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    Eval,
    Tune,
    Gstar,
    Oracle,
}

/// Fully resolved settings of one command. This is what gets echoed into
/// the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub manifest: PathBuf,
    pub output: PathBuf,
    pub method: MethodName,
    pub rectifier: RectifierName,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spec: Option<PathBuf>,
    pub eta_alpha: f64,
    pub eta_beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub lambda_v: f64,
    pub alpha_v: f64,
    pub temperature: f64,
    pub bins: usize,
    pub eps: f64,
    pub subsample_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub threshold_mode: ThresholdMode,
    pub gstar_mode: ThresholdMode,
    pub logits: LogitSource,
    pub datasets: Vec<String>,
    pub grid: GridSettings,
    /// Whether the method was chosen by the user rather than defaulted.
    #[serde(skip)]
    pub method_explicit: bool,
}

impl Settings {
    pub fn resolve(cfg: &RunConfig, kind: CommandKind) -> Result<Self, CliError> {
        let manifest = cfg
            .manifest
            .clone()
            .ok_or_else(|| CliError::Usage("no manifest given (--manifest or config)".into()))?;
        let output = cfg
            .output
            .clone()
            .ok_or_else(|| CliError::Usage("no output directory given (--output or config)".into()))?;
        let method = cfg.method.unwrap_or(MethodName::Energy);
        let rectifier = cfg.rectifier.unwrap_or(match kind {
            CommandKind::Tune => RectifierName::VraPlus,
            CommandKind::Oracle => RectifierName::GstarTrue,
            CommandKind::Eval | CommandKind::Gstar => RectifierName::Identity,
        });
        let default_grid = TuneGrid::default();
        let g = &cfg.grid;

        let s = Settings {
            manifest,
            output,
            method,
            rectifier,
            spec: cfg.spec.clone(),
            eta_alpha: cfg.eta_alpha.unwrap_or(0.6),
            eta_beta: cfg.eta_beta.unwrap_or(match rectifier {
                RectifierName::React => 0.9,
                _ => 0.95,
            }),
            gamma: cfg.gamma.unwrap_or(0.5),
            lambda: cfg.lambda.unwrap_or(DEFAULT_LAMBDA),
            lambda_v: cfg.lambda_v.unwrap_or(1.0),
            alpha_v: cfg.alpha_v.unwrap_or(1.0),
            temperature: cfg.temperature.unwrap_or(match method {
                MethodName::OdinT => 1000.0,
                _ => 1.0,
            }),
            bins: cfg.bins.unwrap_or(DEFAULT_BINS),
            eps: cfg.eps.unwrap_or(DEFAULT_EPS),
            subsample_fraction: cfg.subsample_fraction.unwrap_or(match rectifier {
                RectifierName::GstarSubsample => 0.01,
                _ => 1.0,
            }),
            seed: cfg.seed,
            threshold_mode: cfg.threshold_mode.unwrap_or(match rectifier {
                RectifierName::React => ThresholdMode::Pooled,
                _ => ThresholdMode::PerFeature,
            }),
            gstar_mode: cfg.gstar_mode.unwrap_or(ThresholdMode::PerFeature),
            logits: cfg.logits.unwrap_or_default(),
            datasets: cfg.datasets.clone().unwrap_or_default(),
            grid: GridSettings {
                eta_alpha: g.eta_alpha.clone().unwrap_or(default_grid.eta_alpha),
                eta_beta: g.eta_beta.clone().unwrap_or(default_grid.eta_beta),
                gamma: g.gamma.clone().unwrap_or(default_grid.gamma),
                lambda_v: g.lambda_v.clone().unwrap_or(default_grid.lambda_v),
                alpha_v: g.alpha_v.clone().unwrap_or(default_grid.alpha_v),
            },
            method_explicit: cfg.method.is_some(),
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<(), CliError> {
        let f = self.subsample_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(CliError::Usage(format!("subsample_fraction {f} not in (0, 1]")));
        }
        if f < 1.0 && self.seed.is_none() {
            return Err(CliError::Usage("subsampling requires an explicit seed".into()));
        }
        if self.bins == 0 {
            return Err(CliError::Usage("bins must be positive".into()));
        }
        Ok(())
    }

    pub fn score_method(&self) -> Result<ScoreMethod, CliError> {
        Ok(match self.method {
            MethodName::Msp => ScoreMethod::Msp,
            MethodName::Energy => ScoreMethod::Energy {
                temperature: self.temperature,
            },
            MethodName::OdinT => ScoreMethod::OdinT {
                temperature: self.temperature,
            },
            MethodName::VraPp => ScoreMethod::VraPlusPlus {
                params: VraPlusPlusParams::new(self.lambda_v, self.alpha_v)?,
                logits: self.logits,
            },
            MethodName::FeatureSum => ScoreMethod::FeatureSum,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("settings serialize")
    }
}
