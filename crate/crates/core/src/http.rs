//! HTTP/JSON clients for the four model-dependent services.
//!
//! | service    | request                                  |
//! |------------|------------------------------------------|
//! | generation | `POST {base}/v1/chat/completions`        |
//! | embedding  | `POST {base}/v1/embed`                   |
//! | reward     | `POST {base}/v1/score`                   |
//! | trainer    | `POST {base}/v1/train`, `GET {base}/v1/health` |

use std::sync::OnceLock;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{self, CheckpointMeta};
use crate::error::{Error, Result};
use crate::federation::{TrainRequest, TrainResult, TrainerBackend};
use crate::filtering::RewardBackend;
use crate::generation::{with_retries, GenerationBackend};
use crate::retrieval::{normalize, EmbeddingProvider};
use crate::types::InstructionPair;

const MAX_BODY: u64 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            backoff: Duration::from_millis(250),
        }
    }
}

/// A JSON endpoint family under one base URL.
#[derive(Debug, Clone)]
pub struct JsonService {
    agent: ureq::Agent,
    base_url: String,
    bearer: Option<String>,
}

impl JsonService {
    pub fn new(base_url: &str, bearer: Option<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            agent,
            base_url: base_url.trim_end_matches('/').to_string(),
            bearer: bearer.filter(|b| !b.is_empty()),
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base_url)
    }

    /// One POST; no retries.
    pub fn post<Req: Serialize, Resp: DeserializeOwned>(&self, path: &str, body: &Req) -> Result<Resp> {
        let url = self.url(path);
        let mut req = self.agent.post(&url);
        if let Some(token) = &self.bearer {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| Error::BackendUnreachable(format!("{url}: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .with_config()
            .limit(MAX_BODY)
            .read_to_string()
            .map_err(|e| Error::BackendUnreachable(format!("{url}: reading body: {e}")))?;
        if !(200..300).contains(&status) {
            return Err(Error::BackendError { status, body: text });
        }
        serde_json::from_str(&text)
            .map_err(|e| Error::BackendProtocol(format!("{url}: unexpected response: {e}")))
    }

    pub fn get_status(&self, path: &str) -> Result<u16> {
        let url = self.url(path);
        let resp = self
            .agent
            .get(&url)
            .call()
            .map_err(|e| Error::BackendUnreachable(format!("{url}: {e}")))?;
        Ok(resp.status().as_u16())
    }
}

/// OpenAI-compatible chat-completions client. Retries are left to
/// [`crate::generation::generate_pair`].
#[derive(Debug, Clone)]
pub struct ChatCompletionsClient {
    service: JsonService,
    model: String,
}

impl ChatCompletionsClient {
    pub fn new(base_url: &str, model: &str, api_key: Option<String>, timeout: Duration) -> Self {
        Self {
            service: JsonService::new(base_url, api_key, timeout),
            model: model.to_string(),
        }
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

impl GenerationBackend for ChatCompletionsClient {
    fn complete(
        &self,
        prompt: &str,
        temperature: f32,
        max_tokens: u32,
        seed: Option<u64>,
    ) -> Result<String> {
        let mut body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": temperature,
            "max_tokens": max_tokens,
        });
        if let Some(s) = seed {
            body["seed"] = json!(s);
        }
        let resp: ChatResponse = self.service.post("/v1/chat/completions", &body)?;
        resp.choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Error::BackendProtocol("completion has no choices[0].message.content".into()))
    }
}

/// Embedding service client. Vectors are re-normalized on receipt.
#[derive(Debug)]
pub struct HttpEmbedder {
    service: JsonService,
    retry: RetryPolicy,
    dim: OnceLock<usize>,
}

impl HttpEmbedder {
    pub fn new(base_url: &str, retry: RetryPolicy, timeout: Duration) -> Self {
        Self {
            service: JsonService::new(base_url, None, timeout),
            retry,
            dim: OnceLock::new(),
        }
    }
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
    dim: usize,
}

impl EmbeddingProvider for HttpEmbedder {
    /// Known after the first successful call; 0 before.
    fn dim(&self) -> usize {
        self.dim.get().copied().unwrap_or(0)
    }

    fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f32>>> {
        if tokens.is_empty() {
            return Err(Error::EmptyTokenList);
        }
        let resp: EmbedResponse = with_retries(self.retry.max_retries, self.retry.backoff, || {
            self.service.post("/v1/embed", &json!({ "tokens": tokens }))
        })?;
        if resp.vectors.len() != tokens.len() {
            return Err(Error::BackendProtocol(format!(
                "embedding service returned {} vectors for {} tokens",
                resp.vectors.len(),
                tokens.len()
            )));
        }
        let dim = *self.dim.get_or_init(|| resp.dim);
        if resp.dim != dim || resp.vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::BackendProtocol(format!(
                "embedding dimension changed from {dim}"
            )));
        }
        Ok(resp.vectors.iter().map(|v| normalize(v)).collect())
    }
}

/// Reward service client.
#[derive(Debug, Clone)]
pub struct HttpRewardScorer {
    service: JsonService,
    retry: RetryPolicy,
}

impl HttpRewardScorer {
    pub fn new(base_url: &str, api_key: Option<String>, retry: RetryPolicy, timeout: Duration) -> Self {
        Self {
            service: JsonService::new(base_url, api_key, timeout),
            retry,
        }
    }
}

#[derive(Deserialize)]
struct ScoreResponse {
    scores: Vec<f32>,
}

impl RewardBackend for HttpRewardScorer {
    fn score(&self, pairs: &[InstructionPair]) -> Result<Vec<f32>> {
        let body = json!({
            "pairs": pairs
                .iter()
                .map(|p| json!({"instruction": p.instruction, "response": p.response}))
                .collect::<Vec<_>>()
        });
        let resp: ScoreResponse = with_retries(self.retry.max_retries, self.retry.backoff, || {
            self.service.post("/v1/score", &body)
        })?;
        Ok(resp.scores)
    }
}

/// Trainer service client; parameters travel as base64 FTP1.
#[derive(Debug, Clone)]
pub struct HttpTrainer {
    service: JsonService,
    retry: RetryPolicy,
}

impl HttpTrainer {
    pub fn new(base_url: &str, retry: RetryPolicy, timeout: Duration) -> Self {
        Self {
            service: JsonService::new(base_url, None, timeout),
            retry,
        }
    }

    pub fn health(&self) -> Result<()> {
        match self.service.get_status("/v1/health")? {
            200 => Ok(()),
            status => Err(Error::BackendError {
                status,
                body: "health check failed".into(),
            }),
        }
    }
}

#[derive(Serialize)]
struct TrainBody<'a> {
    round: usize,
    client_id: &'a str,
    params_ftp1_b64: String,
    dataset: Vec<serde_json::Value>,
    hyperparams: crate::federation::TrainHyperparams,
}

#[derive(Deserialize)]
struct TrainReply {
    params_ftp1_b64: String,
    num_examples: usize,
    train_loss: f32,
}

impl TrainerBackend for HttpTrainer {
    fn train(&self, req: &TrainRequest<'_>) -> Result<TrainResult> {
        let meta = CheckpointMeta {
            round: Some(req.round as u64),
            seed: Some(req.hyper.seed),
        };
        let body = TrainBody {
            round: req.round,
            client_id: req.client_id,
            params_ftp1_b64: B64.encode(checkpoint::encode(req.params, &meta)),
            dataset: req
                .dataset
                .iter()
                .map(|p| json!({"instruction": p.instruction, "response": p.response}))
                .collect(),
            hyperparams: req.hyper,
        };
        let reply: TrainReply = with_retries(self.retry.max_retries, self.retry.backoff, || {
            self.service.post("/v1/train", &body)
        })?;
        let bytes = B64
            .decode(reply.params_ftp1_b64.as_bytes())
            .map_err(|e| Error::BackendProtocol(format!("params_ftp1_b64: {e}")))?;
        let (params, _) = checkpoint::decode(&bytes)?;
        Ok(TrainResult {
            params,
            num_examples: reply.num_examples,
            train_loss: reply.train_loss,
        })
    }
}
