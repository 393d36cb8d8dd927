//! Pipeline configuration, read from TOML. Relative paths resolve against
//! the directory of the configuration file.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::engine::{Family, FitOptions};
use crate::error::{Error, Result};
use crate::imputation::DelayModelOptions;
use crate::panel::FrameTerms;
use crate::pooling::CPooling;
use crate::simulator::SimulationConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct InputPaths {
    pub registry: Option<PathBuf>,
    pub population: Option<PathBuf>,
    pub line_list: Option<PathBuf>,
    pub colocation: Option<PathBuf>,
    pub staying_put: Option<PathBuf>,
    pub connectedness: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalendarConfig {
    pub anchor: NaiveDate,
    pub weeks: usize,
}

impl Default for CalendarConfig {
    fn default() -> Self {
        CalendarConfig {
            anchor: NaiveDate::from_ymd_opt(2020, 3, 3).unwrap(),
            weeks: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImputationConfig {
    pub k: usize,
    pub seed: u64,
    pub delay: DelayModelOptions,
}

impl Default for ImputationConfig {
    fn default() -> Self {
        ImputationConfig {
            k: 20,
            seed: 1,
            delay: DelayModelOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub coord_k: usize,
    pub social_k: usize,
    pub terms: FrameTerms,
    pub fit: FitOptions,
    pub c_pooling: CPooling,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            family: Family::NegativeBinomial,
            coord_k: 30,
            social_k: 30,
            terms: FrameTerms::default(),
            fit: FitOptions::default(),
            c_pooling: CPooling::Pooled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub seed: u64,
    pub draws: u64,
    pub max_count: u64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            seed: 1,
            draws: 1,
            max_count: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub model: SimulationConfig,
    pub missing_fraction: f64,
    /// Logistic weight of the covariates in the blanking probability.
    pub mar_strength: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            model: SimulationConfig::default(),
            missing_fraction: 0.3,
            mar_strength: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub output_dir: Option<PathBuf>,
    /// Concurrent imputation fits; 0 uses all cores.
    pub workers: usize,
    pub inputs: InputPaths,
    pub calendar: CalendarConfig,
    pub imputation: ImputationConfig,
    pub model: ModelConfig,
    pub diagnostics: DiagnosticsConfig,
    pub simulate: SimulateConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl PipelineConfig {
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.base_dir = base_dir.into();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, base)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.imputation.k < 2 {
            return Err(Error::Config("imputation.k must be at least 2".into()));
        }
        if self.calendar.weeks < 3 {
            return Err(Error::Config("calendar.weeks must be at least 3".into()));
        }
        if !(0.0..1.0).contains(&self.simulate.missing_fraction) {
            return Err(Error::Config("simulate.missing_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Absolute location of a configured input; errors when unset.
    pub fn input(&self, name: &str) -> Result<PathBuf> {
        let p = match name {
            "registry" => &self.inputs.registry,
            "population" => &self.inputs.population,
            "line_list" => &self.inputs.line_list,
            "colocation" => &self.inputs.colocation,
            "staying_put" => &self.inputs.staying_put,
            "connectedness" => &self.inputs.connectedness,
            _ => return Err(Error::Config(format!("unknown input '{name}'"))),
        };
        let p = p
            .as_ref()
            .ok_or_else(|| Error::Config(format!("inputs.{name} is not set")))?;
        Ok(self.resolve(p))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Output directory: explicit override, then `EPISPREAD_OUT`, then the
    /// configured directory, then `out` next to the config.
    pub fn output_dir(&self, cli: Option<&Path>) -> PathBuf {
        if let Some(p) = cli {
            return p.to_path_buf();
        }
        if let Some(p) = std::env::var_os("EPISPREAD_OUT") {
            return PathBuf::from(p);
        }
        match &self.output_dir {
            Some(p) => self.resolve(p),
            None => self.base_dir.join("out"),
        }
    }

    /// Applies a global seed override to every seeded stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.imputation.seed = seed;
        self.diagnostics.seed = seed;
        self.simulate.model.seed = seed;
        self
    }
}
