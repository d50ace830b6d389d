//! Run configuration and the textual (TOML) config document.
//!
//! The document is a flat table of federation fields plus `[generation]`,
//! `[endpoints]` and `[inputs]` tables. Every key is optional; unset keys
//! take the defaults below, and the CLI overlays flags of the same name.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::SelectionPolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub rounds: usize,
    pub clients_per_round: usize,
    pub seed: u64,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub local_steps: usize,
    #[serde(rename = "k")]
    pub k_examples: usize,
    #[serde(rename = "policy")]
    pub selection_policy: SelectionPolicy,
    pub checkpoint_interval: usize,
    pub parallelism: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            num_clients: 5,
            rounds: 200,
            clients_per_round: 2,
            seed: 0,
            learning_rate: 2e-5,
            batch_size: 16,
            local_steps: 10,
            k_examples: 3,
            selection_policy: SelectionPolicy::Retrieval,
            checkpoint_interval: 10,
            parallelism: 4,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_clients == 0 {
            return bad("num_clients must be positive");
        }
        if self.rounds == 0 {
            return bad("rounds must be positive");
        }
        if self.clients_per_round == 0 || self.clients_per_round > self.num_clients {
            return Err(Error::Config(format!(
                "clients_per_round must be in 1..={}, got {}",
                self.num_clients, self.clients_per_round
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.local_steps == 0 {
            return bad("local_steps must be positive");
        }
        if self.k_examples == 0 {
            return bad("k must be at least 1");
        }
        if let SelectionPolicy::RandomMixed {
            in_count,
            out_count,
        } = self.selection_policy
        {
            if in_count + out_count != self.k_examples {
                return Err(Error::Config(format!(
                    "policy {} draws {} examples but k = {}",
                    self.selection_policy,
                    in_count + out_count,
                    self.k_examples
                )));
            }
        }
        if self.checkpoint_interval == 0 {
            return bad("checkpoint_interval must be positive");
        }
        if self.parallelism == 0 {
            return bad("parallelism must be positive");
        }
        Ok(())
    }
}

/// Decoding parameters for the generation backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub model: String,
    pub temperature: f32,
    pub max_tokens: u32,
    /// Retries on transport errors and 5xx/429 responses.
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            model: "vicuna-7b".into(),
            temperature: 0.7,
            max_tokens: 512,
            max_retries: 3,
            backoff_ms: 250,
            timeout_secs: 120,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Endpoints {
    pub generation: Option<String>,
    pub reward: Option<String>,
    pub trainer: Option<String>,
    pub embedding: Option<String>,
}

/// File inputs for the end-to-end pipeline.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    pub corpora: Vec<PathBuf>,
    pub pool: Option<PathBuf>,
    pub init_checkpoint: Option<PathBuf>,
    /// e.g. `"lora_a=8x32,lora_b=32x8"`, used when no init checkpoint is given.
    pub init_zeros: Option<String>,
    pub references: Option<PathBuf>,
    pub responses: Option<PathBuf>,
    pub bert_baseline: Option<f64>,
}

/// The config document as written on disk: everything optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub num_clients: Option<usize>,
    pub rounds: Option<usize>,
    pub clients_per_round: Option<usize>,
    pub seed: Option<u64>,
    pub learning_rate: Option<f32>,
    pub batch_size: Option<usize>,
    pub local_steps: Option<usize>,
    pub k: Option<usize>,
    pub policy: Option<SelectionPolicy>,
    pub checkpoint_interval: Option<usize>,
    pub parallelism: Option<usize>,
    pub generation: GenerationConfig,
    pub endpoints: Endpoints,
    pub inputs: Inputs,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Fills unset fields with defaults. Validation is left to the caller
    /// because `num_clients` often comes from the inputs.
    pub fn federation(&self) -> FederationConfig {
        let d = FederationConfig::default();
        FederationConfig {
            num_clients: self.num_clients.unwrap_or(d.num_clients),
            rounds: self.rounds.unwrap_or(d.rounds),
            clients_per_round: self.clients_per_round.unwrap_or(d.clients_per_round),
            seed: self.seed.unwrap_or(d.seed),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            local_steps: self.local_steps.unwrap_or(d.local_steps),
            k_examples: self.k.unwrap_or(d.k_examples),
            selection_policy: self.policy.unwrap_or(d.selection_policy),
            checkpoint_interval: self.checkpoint_interval.unwrap_or(d.checkpoint_interval),
            parallelism: self.parallelism.unwrap_or(d.parallelism),
        }
    }
}
