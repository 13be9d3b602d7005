//! Run configuration: a TOML file with `[data]`, `[model]`, `[em]` and
//! `[grid]` sections, overridden by command-line flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use hmmdrop::io::IngestConfig;
use hmmdrop::selection::GridRanges;
use hmmdrop::EmControls;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    #[serde(rename = "G")]
    pub g: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "H")]
    pub h: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { g: 2, k: 2, h: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSection {
    #[serde(rename = "G")]
    pub g: String,
    #[serde(rename = "K")]
    pub k: String,
    #[serde(rename = "H")]
    pub h: String,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { g: "2-5".into(), k: "2-5".into(), h: "1-3".into() }
    }
}

impl GridSection {
    pub fn ranges(&self) -> Result<GridRanges> {
        Ok(GridRanges { g: parse_range(&self.g)?, k: parse_range(&self.k)?, h: parse_range(&self.h)? })
    }
}

/// `"3"` or `"2-5"`, inclusive, each bound at least 1.
pub fn parse_range(s: &str) -> Result<(usize, usize)> {
    let (a, b) = match s.split_once('-') {
        Some((a, b)) => (a.trim(), b.trim()),
        None => (s.trim(), s.trim()),
    };
    let lo: usize = a.parse().with_context(|| format!("bad range '{s}'"))?;
    let hi: usize = b.parse().with_context(|| format!("bad range '{s}'"))?;
    if lo == 0 || hi < lo {
        bail!("range '{s}' must be nonempty with bounds of at least 1");
    }
    Ok((lo, hi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub data: IngestConfig,
    pub model: ModelSection,
    pub em: EmControls,
    pub grid: GridSection,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, toml::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.g == 0 || self.model.k == 0 || self.model.h == 0 {
            bail!("G, K and H must all be at least 1");
        }
        Ok(())
    }
}
