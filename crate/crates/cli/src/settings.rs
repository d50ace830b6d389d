//! Merges the config document, command-line flags and environment into one
//! resolved view, and builds the backends it names.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use fedinstruct_core::config::{ConfigFile, Endpoints, FederationConfig, GenerationConfig, Inputs};
use fedinstruct_core::filtering::{MockRewardScorer, RewardBackend};
use fedinstruct_core::federation::{SimulatedTrainer, TrainerBackend};
use fedinstruct_core::generation::{GenerationBackend, MockGenerator};
use fedinstruct_core::http::{ChatCompletionsClient, HttpEmbedder, HttpRewardScorer, HttpTrainer, RetryPolicy};
use fedinstruct_core::retrieval::{EmbeddingProvider, HashEmbedder};
use fedinstruct_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::args::CommonArgs;

pub const GEN_API_KEY: &str = "GEN_API_KEY";
pub const REWARD_API_KEY: &str = "REWARD_API_KEY";
pub const TRAINER_URL: &str = "TRAINER_URL";
pub const EMBED_URL: &str = "EMBED_URL";

#[derive(Debug, Clone)]
pub struct Settings {
    pub fed: FederationConfig,
    /// Whether `num_clients` was set by a flag or the config file.
    pub num_clients_explicit: bool,
    pub generation: GenerationConfig,
    pub inputs: Inputs,
    pub mock: bool,
    pub out: Option<PathBuf>,
    flag_urls: Endpoints,
    file_urls: Endpoints,
}

/// Which implementation each backend resolved to, recorded in manifests.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BackendChoice {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<String>,
}

fn resolve_relative(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl Settings {
    pub fn resolve(args: &CommonArgs) -> Result<Self> {
        let mut file = match &args.config {
            Some(p) => {
                let mut f = ConfigFile::load(p)?;
                let base = p.parent().unwrap_or(Path::new("."));
                let inp = &mut f.inputs;
                inp.corpora.iter_mut().for_each(|c| resolve_relative(base, c));
                for p in [
                    &mut inp.pool,
                    &mut inp.init_checkpoint,
                    &mut inp.references,
                    &mut inp.responses,
                ]
                .into_iter()
                .flatten()
                {
                    resolve_relative(base, p);
                }
                f
            }
            None => ConfigFile::default(),
        };
        let num_clients_explicit = args.num_clients.is_some() || file.num_clients.is_some();
        macro_rules! overlay {
            ($($field:ident),*) => { $( if args.$field.is_some() { file.$field = args.$field.clone(); } )* };
        }
        overlay!(
            seed,
            policy,
            k,
            rounds,
            num_clients,
            clients_per_round,
            learning_rate,
            batch_size,
            local_steps,
            parallelism,
            checkpoint_interval
        );
        if let Some(m) = &args.model {
            file.generation.model = m.clone();
        }
        if let Some(t) = args.temperature {
            file.generation.temperature = t;
        }
        if let Some(t) = args.max_tokens {
            file.generation.max_tokens = t;
        }
        let flag_urls = Endpoints {
            generation: args.generation_url.clone(),
            reward: args.reward_url.clone(),
            trainer: args.trainer_url.clone(),
            embedding: args.embed_url.clone(),
        };
        let mut file_urls = file.endpoints.clone();
        file_urls.trainer = file_urls.trainer.or_else(|| env_nonempty(TRAINER_URL));
        file_urls.embedding = file_urls.embedding.or_else(|| env_nonempty(EMBED_URL));
        Ok(Self {
            fed: file.federation(),
            num_clients_explicit,
            generation: file.generation.clone(),
            inputs: file.inputs.clone(),
            mock: args.mock,
            out: args.out.clone(),
            flag_urls,
            file_urls,
        })
    }

    pub fn out_dir(&self) -> Result<PathBuf> {
        let out = self
            .out
            .clone()
            .ok_or_else(|| Error::Config("--out is required".into()))?;
        std::fs::create_dir_all(&out).map_err(|e| {
            Error::Io {
                context: format!("creating {}", out.display()),
                source: e,
            }
        })?;
        Ok(out)
    }

    /// A flag URL always wins; `--mock` shadows config and environment URLs.
    fn url(&self, flag: &Option<String>, file: &Option<String>) -> Option<String> {
        flag.clone().or_else(|| if self.mock { None } else { file.clone() })
    }

    fn retry(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.generation.max_retries,
            backoff: Duration::from_millis(self.generation.backoff_ms),
        }
    }

    fn timeout(&self) -> Duration {
        Duration::from_secs(self.generation.timeout_secs)
    }

    fn missing(&self, what: &str, flag: &str) -> Error {
        Error::Config(format!("no {what} endpoint configured; pass {flag} or --mock"))
    }

    pub fn generation_backend(&self) -> Result<(Box<dyn GenerationBackend>, String)> {
        match self.url(&self.flag_urls.generation, &self.file_urls.generation) {
            Some(url) => Ok((
                Box::new(ChatCompletionsClient::new(
                    &url,
                    &self.generation.model,
                    env_nonempty(GEN_API_KEY),
                    self.timeout(),
                )),
                url,
            )),
            None if self.mock => Ok((Box::new(MockGenerator), "mock".into())),
            None => Err(self.missing("generation", "--generation-url")),
        }
    }

    pub fn embedding_provider(&self) -> Result<(Box<dyn EmbeddingProvider>, String)> {
        match self.url(&self.flag_urls.embedding, &self.file_urls.embedding) {
            Some(url) => Ok((Box::new(HttpEmbedder::new(&url, self.retry(), self.timeout())), url)),
            None if self.mock => Ok((Box::new(HashEmbedder), "hash".into())),
            None => Err(self.missing("embedding", "--embed-url")),
        }
    }

    /// `documents` maps document id to text for the mock scorer.
    pub fn reward_backend<'a>(
        &self,
        documents: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<(Box<dyn RewardBackend>, String)> {
        match self.url(&self.flag_urls.reward, &self.file_urls.reward) {
            Some(url) => Ok((
                Box::new(HttpRewardScorer::new(
                    &url,
                    env_nonempty(REWARD_API_KEY),
                    self.retry(),
                    self.timeout(),
                )),
                url,
            )),
            None if self.mock => Ok((Box::new(MockRewardScorer::new(documents)), "mock".into())),
            None => Err(self.missing("reward", "--reward-url")),
        }
    }

    /// An explicit `--sim-trainer` wins, then endpoint URLs, then `--mock`.
    pub fn trainer_backend(
        &self,
        sim_spec: Option<&str>,
        client_ids: &[String],
        dim: usize,
    ) -> Result<(Box<dyn TrainerBackend>, String)> {
        let simulated = |spec: &str| -> Result<(Box<dyn TrainerBackend>, String)> {
            let rows = parse_sim_spec(spec, dim)?;
            let t = SimulatedTrainer::seeded(self.fed.seed, client_ids.iter().map(String::as_str), dim, rows);
            Ok((Box::new(t), format!("simulated:{spec}")))
        };
        if let Some(spec) = sim_spec {
            return simulated(spec);
        }
        match self.url(&self.flag_urls.trainer, &self.file_urls.trainer) {
            Some(url) => {
                let t = HttpTrainer::new(&url, self.retry(), self.timeout());
                t.health().map_err(|e| e.context(format!("trainer health check at {url}")))?;
                Ok((Box::new(t), url))
            }
            None if self.mock => simulated("quadratic"),
            None => Err(self.missing("trainer", "--trainer-url (or --sim-trainer)")),
        }
    }
}

/// `quadratic` or `quadratic:rows=N`; rows default to the parameter count.
pub fn parse_sim_spec(spec: &str, dim: usize) -> Result<usize> {
    let bad = || Error::Config(format!("unknown simulated trainer {spec:?}"));
    match spec.split_once(':') {
        None if spec == "quadratic" => Ok(dim),
        Some(("quadratic", opts)) => {
            let mut rows = dim;
            for kv in opts.split(',') {
                match kv.split_once('=') {
                    Some(("rows", v)) => rows = v.parse().map_err(|_| bad())?,
                    _ => return Err(bad()),
                }
            }
            if rows == 0 {
                return Err(bad());
            }
            Ok(rows)
        }
        _ => Err(bad()),
    }
}

fn env_nonempty(key: &str) -> Option<String> {
    std::env::var(key).ok().filter(|v| !v.is_empty())
}

/// Hex FNV-1a digest of each file, keyed by the path as given.
pub fn digests(paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| {
            let bytes = std::fs::read(p).map_err(|e| Error::Io {
                context: format!("reading {}", p.display()),
                source: e,
            })?;
            Ok((
                p.display().to_string(),
                format!("{:016x}", fedinstruct_core::text::fnv1a64(&bytes)),
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sim_specs() {
        assert_eq!(parse_sim_spec("quadratic", 12).unwrap(), 12);
        assert_eq!(parse_sim_spec("quadratic:rows=5", 12).unwrap(), 5);
        assert!(parse_sim_spec("linear", 12).is_err());
        assert!(parse_sim_spec("quadratic:cols=5", 12).is_err());
        assert!(parse_sim_spec("quadratic:rows=0", 12).is_err());
    }

    #[test]
    fn flags_override_config() {
        let dir = std::env::temp_dir().join(format!("fedinstruct-settings-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let cfg = dir.join("c.toml");
        std::fs::write(&cfg, "seed = 3\nrounds = 9\n[inputs]\npool = \"pool.jsonl\"\n").unwrap();
        let s = Settings::resolve(&CommonArgs {
            config: Some(cfg),
            rounds: Some(4),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(s.fed.seed, 3);
        assert_eq!(s.fed.rounds, 4);
        assert_eq!(s.inputs.pool.as_deref(), Some(dir.join("pool.jsonl").as_path()));
        assert!(!s.num_clients_explicit);
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn mock_and_url_precedence() {
        let s = Settings::resolve(&CommonArgs {
            mock: true,
            reward_url: Some("http://127.0.0.1:9".into()),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(s.generation_backend().unwrap().1, "mock");
        assert_eq!(s.reward_backend([]).unwrap().1, "http://127.0.0.1:9");
        let s = Settings::resolve(&CommonArgs::default()).unwrap();
        assert!(matches!(s.generation_backend(), Err(Error::Config(_))));
    }
}
