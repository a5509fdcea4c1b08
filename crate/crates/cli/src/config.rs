use std::path::PathBuf;

use clap::{Args, ValueEnum};
use dynbench::benchmark::BucketWeighting;
use dynbench::ingest::{Severity, Underreporting, UnderreportingFormula};
use dynbench::stats::BootstrapConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DimensionKind {
    #[default]
    Spatial,
    Temporal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormulaArg {
    Divide,
    Multiply,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BucketModeArg {
    HumanVmt,
    SliceCount,
}

/// Settings shared by every analysis. Echoed into every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub cell_level: u8,
    pub step_m: f64,
    pub dimension: DimensionKind,
    pub severities: Vec<Severity>,
    pub underreporting: Underreporting,
    pub bucket_mode: BucketWeighting,
    pub ci: bool,
    pub bootstrap: BootstrapConfig,
    pub warn_threshold: f64,
    pub calibration_target: Option<f64>,
    pub fleet_tag: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            cell_level: 13,
            step_m: dynbench::geoindex::DEFAULT_STEP_M,
            dimension: DimensionKind::Spatial,
            severities: vec![Severity::PoliceReported],
            underreporting: Underreporting::default(),
            bucket_mode: BucketWeighting::default(),
            ci: true,
            bootstrap: BootstrapConfig::default(),
            warn_threshold: 0.01,
            calibration_target: None,
            fleet_tag: None,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Cell level for spatial slices (default 13)
    #[arg(long)]
    pub level: Option<u8>,
    /// Densification step in meters for segment allocation (default 10)
    #[arg(long = "step-m")]
    pub step_m: Option<f64>,
    /// Severity levels, comma separated (default police_reported)
    #[arg(long, value_delimiter = ',')]
    pub severity: Vec<Severity>,
    /// Bootstrap replicates (default 1000)
    #[arg(long)]
    pub n: Option<usize>,
    /// Two-sided interval level is 1 - alpha (default 0.10)
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; outputs do not depend on this
    #[arg(long)]
    pub threads: Option<usize>,
    /// Treat the ADS exclusion warning as an error (exit 3)
    #[arg(long)]
    pub strict: bool,
    /// JSON run config; explicit flags take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub dimension: Option<DimensionKind>,
    #[arg(long)]
    pub underreporting_factor: Option<f64>,
    #[arg(long, value_enum)]
    pub underreporting_formula: Option<FormulaArg>,
    #[arg(long, value_enum)]
    pub bucket_mode: Option<BucketModeArg>,
    /// Excluded ADS mileage fraction that triggers a warning (default 0.01)
    #[arg(long)]
    pub warn_threshold: Option<f64>,
    /// Scale human VMT to this total
    #[arg(long)]
    pub calibration_target: Option<f64>,
    /// Keep only ADS records with this fleet tag
    #[arg(long)]
    pub fleet_tag: Option<String>,
    /// Skip bootstrap intervals
    #[arg(long)]
    pub no_ci: bool,
}

impl RunConfig {
    pub fn resolve(common: &Common) -> Result<RunConfig, CliError> {
        let mut cfg = match &common.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(v) = common.level {
            cfg.cell_level = v;
        }
        if let Some(v) = common.step_m {
            cfg.step_m = v;
        }
        if !common.severity.is_empty() {
            cfg.severities = common.severity.clone();
        }
        if let Some(v) = common.n {
            cfg.bootstrap.n_replicates = v;
        }
        if let Some(v) = common.alpha {
            cfg.bootstrap.alpha = v;
        }
        if let Some(v) = common.seed {
            cfg.bootstrap.seed = v;
        }
        if let Some(v) = common.dimension {
            cfg.dimension = v;
        }
        if let Some(v) = common.underreporting_factor {
            cfg.underreporting.factor = v;
        }
        if let Some(v) = common.underreporting_formula {
            cfg.underreporting.formula = match v {
                FormulaArg::Divide => UnderreportingFormula::Divide,
                FormulaArg::Multiply => UnderreportingFormula::Multiply,
            };
        }
        if let Some(v) = common.bucket_mode {
            cfg.bucket_mode = match v {
                BucketModeArg::HumanVmt => BucketWeighting::HumanVmt,
                BucketModeArg::SliceCount => BucketWeighting::SliceCount,
            };
        }
        if let Some(v) = common.warn_threshold {
            cfg.warn_threshold = v;
        }
        if common.calibration_target.is_some() {
            cfg.calibration_target = common.calibration_target;
        }
        if common.fleet_tag.is_some() {
            cfg.fleet_tag = common.fleet_tag.clone();
        }
        if common.no_ci {
            cfg.ci = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Input(m));
        if self.cell_level > dynbench::geoindex::MAX_LEVEL {
            return bad(format!("cell level {} exceeds 30", self.cell_level));
        }
        if !(self.step_m.is_finite() && self.step_m > 0.0) {
            return bad(format!("step_m must be positive, got {}", self.step_m));
        }
        if self.severities.is_empty() {
            return bad("no severity levels selected".into());
        }
        if !(0.0..1.0).contains(&self.underreporting.factor) {
            return bad(format!(
                "underreporting factor must be in [0, 1), got {}",
                self.underreporting.factor
            ));
        }
        if !(0.0..=1.0).contains(&self.warn_threshold) {
            return bad(format!(
                "warn threshold must be in [0, 1], got {}",
                self.warn_threshold
            ));
        }
        if let Some(t) = self.calibration_target {
            if !(t.is_finite() && t > 0.0) {
                return bad(format!("calibration target must be positive, got {t}"));
            }
        }
        self.bootstrap
            .validate()
            .map_err(|e| CliError::Input(e.to_string()))
    }

    pub fn bootstrap(&self) -> Option<BootstrapConfig> {
        self.ci.then_some(self.bootstrap)
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
