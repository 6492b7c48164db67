// SPDX-License-Identifier: MIT OR Apache-2.0

//! Operator configuration: a TOML file merged with command-line overrides.
//!
//! A single top-level `seed` drives every random choice. [`CliConfig::resolve`]
//! copies it into the run and simulation sections, so the values written
//! there in a file are ignored.
//!
//! ```toml
//! seed = 7
//! provider = "sim"
//! neurons = "sim:0-99"
//!
//! [run]
//! iterations = 20
//!
//! [sim]
//! noise_sigma = 0.05
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bridge::ModelEndpoint;
use crate::engine::RunConfig;
use crate::error::{LineError, Result};
use crate::io::atomic_write;
use crate::proposer::ChatOptions;
use crate::simworld::SimConfig;

/// Environment variable holding the bridge bearer token.
pub const API_KEY_ENV: &str = "LINE_API_KEY";

/// Name of the effective-config echo in the output directory.
pub const EFFECTIVE_CONFIG: &str = "effective_config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Sim,
    Bridge,
    Replay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimProposerKind {
    Greedy,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BridgeConfig {
    pub endpoint: ModelEndpoint,
    /// Separate image-generation service, e.g. to swap the T2I backend.
    pub images: Option<ModelEndpoint>,
    /// Identifies the vision model in cache paths.
    pub model_id: String,
    pub layer_widths: BTreeMap<String, usize>,
    /// Images per activation request.
    pub chunk: usize,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            endpoint: ModelEndpoint::default(),
            images: None,
            model_id: "model".into(),
            layer_widths: BTreeMap::new(),
            chunk: 64,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Concept images and initialization matrices. In-memory when unset.
    pub cache_dir: Option<PathBuf>,
    /// Natural images as `<dir>/<class>/<file>`, for the bridge provider.
    pub dataset_dir: Option<PathBuf>,
    pub replay_fixture: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub control_size: usize,
    /// Image seed salt for evaluation. Defaults to `run.run_salt + 1` so
    /// reports never score the images that selected the label.
    pub eval_salt: Option<u64>,
    /// Images per evaluated concept; defaults to `run.batch_size`.
    pub batch_size: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            control_size: 500,
            eval_salt: None,
            batch_size: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub seed: u64,
    pub workers: usize,
    pub provider: ProviderKind,
    /// Neuron selector such as `avgpool:0-99`.
    pub neurons: Option<String>,
    pub out: PathBuf,
    pub sim_proposer: SimProposerKind,
    pub run: RunConfig,
    pub sim: SimConfig,
    pub chat: ChatOptions,
    pub bridge: BridgeConfig,
    pub paths: PathsConfig,
    pub eval: EvalConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 1,
            provider: ProviderKind::Sim,
            neurons: None,
            out: PathBuf::from("line-out"),
            sim_proposer: SimProposerKind::Greedy,
            run: RunConfig::default(),
            sim: SimConfig::default(),
            chat: ChatOptions::default(),
            bridge: BridgeConfig::default(),
            paths: PathsConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Values given on the command line; `None` keeps the file value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub neurons: Option<String>,
    pub provider: Option<ProviderKind>,
    pub out: Option<PathBuf>,
    pub iterations: Option<u32>,
    pub batch_size: Option<usize>,
}

impl CliConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| LineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LineError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Applies overrides and the environment, propagates the top-level seed
    /// and worker count, and validates the result.
    pub fn resolve(mut self, o: &Overrides) -> Result<Self> {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.neurons {
            self.neurons = Some(v.clone());
        }
        if let Some(v) = o.provider {
            self.provider = v;
        }
        if let Some(v) = &o.out {
            self.out = v.clone();
        }
        if let Some(v) = o.iterations {
            self.run.iterations = v;
        }
        if let Some(v) = o.batch_size {
            self.run.batch_size = v;
        }
        self.run.seed = self.seed;
        self.sim.seed = self.seed;
        self.run.workers = self.workers;
        if let Ok(key) = std::env::var(API_KEY_ENV) {
            if !key.is_empty() {
                self.bridge.endpoint.api_key = Some(key.clone());
                if let Some(images) = &mut self.bridge.images {
                    images.api_key = Some(key);
                }
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        if self.eval.control_size == 0 {
            return Err(LineError::Config(
                "eval.control_size must be at least 1".into(),
            ));
        }
        if self.eval.batch_size == Some(0) {
            return Err(LineError::Config(
                "eval.batch_size must be at least 1".into(),
            ));
        }
        if self.provider == ProviderKind::Bridge {
            self.bridge.endpoint.validate()?;
            if let Some(images) = &self.bridge.images {
                images.validate()?;
            }
            if self.bridge.chunk == 0 {
                return Err(LineError::Config("bridge.chunk must be at least 1".into()));
            }
        }
        Ok(())
    }

    pub fn eval_salt(&self) -> u64 {
        self.eval
            .eval_salt
            .unwrap_or(self.run.run_salt.wrapping_add(1))
    }

    pub fn eval_batch_size(&self) -> usize {
        self.eval.batch_size.unwrap_or(self.run.batch_size)
    }

    /// Seed for the evaluation control sample, derived from the top-level seed.
    pub fn control_seed(&self) -> u64 {
        self.seed ^ 0x636f_6e74_726f_6c00
    }

    /// Pretty JSON of the effective configuration. The bearer token is
    /// never included.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// Writes [`EFFECTIVE_CONFIG`] into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(EFFECTIVE_CONFIG);
        atomic_write(&path, self.to_json().as_bytes())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_defaults() {
        assert_eq!(CliConfig::from_toml("").unwrap(), CliConfig::default());
    }

    #[test]
    fn sections_parse() {
        let c = CliConfig::from_toml(
            r#"
            seed = 9
            provider = "bridge"
            neurons = "fc:0-3"
            sim_proposer = "oracle"
            [run]
            iterations = 4
            concept_list_cap = 10
            [sim]
            noise_sigma = 0.0
            [bridge]
            model_id = "resnet50"
            layer_widths = { fc = 4 }
            [bridge.endpoint]
            base_url = "http://localhost:9000"
            retry = { attempts = 5, backoff_ms = 10 }
            [bridge.images]
            base_url = "http://localhost:9001"
            [eval]
            control_size = 100
            "#,
        )
        .unwrap();
        assert_eq!(c.provider, ProviderKind::Bridge);
        assert_eq!(c.run.iterations, 4);
        assert_eq!(c.run.concept_list_cap, Some(10));
        assert_eq!(c.bridge.endpoint.retry.attempts, 5);
        assert_eq!(
            c.bridge.images.as_ref().unwrap().base_url,
            "http://localhost:9001"
        );
        assert_eq!(c.bridge.layer_widths["fc"], 4);
        assert_eq!(c.eval.control_size, 100);
        assert_eq!(c.sim_proposer, SimProposerKind::Oracle);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(CliConfig::from_toml("sed = 1").is_err());
        assert!(CliConfig::from_toml("[run]\niteration = 3").is_err());
    }

    #[test]
    fn overrides_and_seed_propagation() {
        let c = CliConfig::from_toml("seed = 3\n[run]\nseed = 99\niterations = 2")
            .unwrap()
            .resolve(&Overrides {
                seed: Some(11),
                iterations: Some(20),
                batch_size: Some(2),
                ..Overrides::default()
            })
            .unwrap();
        assert_eq!((c.seed, c.run.seed, c.sim.seed), (11, 11, 11));
        assert_eq!((c.run.iterations, c.run.batch_size), (20, 2));
    }

    #[test]
    fn invalid_values_rejected() {
        let bad = |o: Overrides| CliConfig::default().resolve(&o).is_err();
        assert!(bad(Overrides {
            iterations: Some(0),
            ..Overrides::default()
        }));
        let mut c = CliConfig {
            provider: ProviderKind::Bridge,
            ..CliConfig::default()
        };
        c.bridge.endpoint.base_url = "https://x".into();
        assert!(c.validate().is_err());
    }

    #[test]
    fn eval_defaults_use_fresh_salt() {
        let c = CliConfig::default();
        assert_eq!(c.eval_salt(), c.run.run_salt + 1);
        assert_eq!(c.eval_batch_size(), c.run.batch_size);
    }

    #[test]
    fn echo_omits_api_key() {
        let mut c = CliConfig::default();
        c.bridge.endpoint.api_key = Some("secret-token".into());
        let dir = tempfile::tempdir().unwrap();
        let path = c.echo(dir.path()).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert!(!text.contains("secret-token"));
        let back: CliConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.bridge.endpoint.api_key, None);
        assert_eq!(back.run, c.run);
    }
}
