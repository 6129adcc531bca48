//! Run configuration, read from a TOML document.

use std::path::{Path, PathBuf};

use ontex::gateway::GatewayConfig;
use ontex::refine::RefinementConfig;
use ontex::AlignmentConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Input locations. Relative paths in a config file resolve against the file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub inventory: Option<PathBuf>,
    pub gold: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub representations: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    /// TOML file holding prompt templates; overrides `refinement.prompts`.
    pub prompts: Option<PathBuf>,
    /// Training gold used for rare-label frequencies.
    pub train_gold: Option<PathBuf>,
}

impl Paths {
    fn rebase(&mut self, base: &Path) {
        for p in [
            &mut self.inventory,
            &mut self.gold,
            &mut self.predictions,
            &mut self.representations,
            &mut self.embeddings,
            &mut self.prompts,
            &mut self.train_gold,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub paths: Paths,
    pub alignment: AlignmentConfig,
    pub refinement: RefinementConfig,
    pub gateway: GatewayConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("ontex-out"),
            paths: Paths::default(),
            alignment: AlignmentConfig::default(),
            refinement: RefinementConfig::default(),
            gateway: GatewayConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    /// Reads a config file and resolves its relative paths against the file's directory.
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.paths.rebase(base);
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        for p in [&mut cfg.gateway.mock_script, &mut cfg.gateway.transcript].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Loads `paths.prompts` into the refinement templates.
    pub fn load_prompts(&mut self) -> Result<(), CliError> {
        if let Some(path) = &self.paths.prompts {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::data(path.display(), e))?;
            self.refinement.prompts =
                toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }

    /// Validates thresholds and counts of every section.
    pub fn validate(&self) -> Result<(), CliError> {
        self.alignment.validate()?;
        self.refinement.validate()?;
        self.gateway.retry_policy().map_err(|e| CliError::Usage(e.to_string()))?;
        if self.gateway.concurrency_limit == 0 {
            return Err(CliError::Usage("gateway.concurrency_limit must be positive".into()));
        }
        Ok(())
    }
}

/// Returns `path` when it names an existing file.
pub fn require(path: Option<&PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    let p = path.ok_or_else(|| CliError::Usage(format!("no {what} path given (flag or config)")))?;
    if !p.is_file() {
        return Err(CliError::Data(format!("{what} file {} does not exist", p.display())));
    }
    Ok(p.clone())
}
