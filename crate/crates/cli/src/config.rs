//! Optional TOML run configuration. Command-line flags take precedence.

use std::path::Path;

use serde::Deserialize;
use uninas::search::EvoConfig;
use uninas::{Budget, Skeleton};

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum SkeletonChoice {
    Named(String),
    Custom(Skeleton),
}

impl SkeletonChoice {
    pub fn resolve(&self) -> Result<Skeleton, CliError> {
        match self {
            SkeletonChoice::Custom(s) => Ok(s.clone()),
            SkeletonChoice::Named(n) => named_skeleton(n),
        }
    }
}

pub fn named_skeleton(name: &str) -> Result<Skeleton, CliError> {
    match name.to_ascii_lowercase().as_str() {
        "desk" => Ok(Skeleton::desk()),
        "imagenet" => Ok(Skeleton::imagenet()),
        _ => Err(CliError::Usage(format!("unknown skeleton `{name}` (expected desk or imagenet)"))),
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WalkSection {
    pub steps: Option<usize>,
    pub record_every: Option<usize>,
    pub p_eliminate: Option<f64>,
    pub n_try: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    pub total_steps: Option<usize>,
    pub population_size: Option<usize>,
    pub steps_per_candidate: Option<usize>,
    pub generation_size: Option<usize>,
    pub proxy: Option<String>,
    pub batch_size: Option<usize>,
    pub max_params: Option<usize>,
    pub p_eliminate: Option<f64>,
    pub n_try: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    /// `[params_min, params_max, flops_min, flops_max]`.
    pub budget: Option<[u64; 4]>,
    pub skeleton: Option<SkeletonChoice>,
    #[serde(default)]
    pub walk: WalkSection,
    #[serde(default)]
    pub search: SearchSection,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
    }

    pub fn budget(&self) -> Result<Option<Budget>, CliError> {
        self.budget
            .map(|[a, b, c, d]| Budget::new(a, b, c, d).map_err(CliError::Usage))
            .transpose()
    }

    pub fn apply_search(&self, cfg: &mut EvoConfig) -> Result<(), CliError> {
        let s = &self.search;
        if let Some(v) = s.total_steps {
            cfg.total_steps = v;
        }
        if let Some(v) = s.population_size {
            cfg.population_size = v;
        }
        if let Some(v) = s.steps_per_candidate {
            cfg.steps_per_candidate = v;
        }
        if let Some(v) = s.generation_size {
            cfg.generation_size = v;
        }
        if let Some(p) = &s.proxy {
            cfg.proxy = p.parse().map_err(CliError::Usage)?;
        }
        if let Some(v) = s.batch_size {
            cfg.proxy_config.batch_size = v;
        }
        if let Some(v) = s.max_params {
            cfg.proxy_config.max_params = v;
        }
        if let Some(v) = s.p_eliminate {
            cfg.step.p_eliminate = v;
        }
        if let Some(v) = s.n_try {
            cfg.step.n_try = v;
        }
        Ok(())
    }
}
