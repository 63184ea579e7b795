//! TOML run configuration.
//!
//! ```toml
//! [data]
//! path = "soil.csv"
//! parts = ["sand", "silt", "clay"]
//!
//! [model]
//! formula = "factor(Lit, ref=1) + re(Year) + s(Elev) + s(Slope) + te(Lon, Lat)"
//!
//! [priors]          # optional, see PriorSpec
//! fixed_sd = 10.0
//!
//! [sampler]         # optional, see SamplerConfig
//! chains = 4
//! seed = 1
//!
//! [output]
//! dir = "fit-out"
//! ```
//!
//! Relative paths are resolved against the configuration file's directory.
//! Unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::hmc::SamplerConfig;
use crate::model::{ModelSpec, PriorSpec, Table};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub path: PathBuf,
    pub parts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub formula: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    #[serde(default)]
    pub priors: PriorSpec,
    #[serde(default)]
    pub sampler: SamplerConfig,
    pub output: OutputSection,
}

impl RunConfig {
    /// Parse TOML text; relative paths are joined onto `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, PipelineError> {
        let mut config: RunConfig =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        if config.data.path.is_relative() {
            config.data.path = base.join(&config.data.path);
        }
        if config.output.dir.is_relative() {
            config.output.dir = base.join(&config.output.dir);
        }
        Ok(config)
    }

    /// Read, resolve and validate a configuration file.
    pub fn from_path(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let config = Self::from_toml(&text, base)?;
        config.validate()?;
        Ok(config)
    }

    pub fn spec(&self) -> Result<ModelSpec, PipelineError> {
        Ok(ModelSpec::parse(
            self.data.parts.len(),
            &self.model.formula,
            self.priors.clone(),
        )?)
    }

    /// Check the data file exists and the formula resolves against its header.
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !self.data.path.is_file() {
            return Err(PipelineError::Config(format!(
                "data file {} does not exist",
                self.data.path.display()
            )));
        }
        self.sampler.validate()?;
        let spec = self.spec()?;
        let header = read_header(&self.data.path)?;
        for part in &self.data.parts {
            if !header.contains(part) {
                return Err(PipelineError::Config(format!(
                    "composition column {part} is not in the data header"
                )));
            }
        }
        let covariates: Vec<String> = header
            .into_iter()
            .filter(|h| !self.data.parts.contains(h))
            .collect();
        spec.check_columns(&covariates)?;
        Ok(())
    }

    pub fn load_table(&self) -> Result<Table, PipelineError> {
        Ok(Table::from_csv_path(&self.data.path)?)
    }
}

fn read_header(path: &Path) -> Result<Vec<String>, PipelineError> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
    let header = reader
        .headers()
        .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
    Ok(header.iter().map(|h| h.trim().to_string()).collect())
}
