use std::collections::BTreeMap;
use std::path::Path;

use fedinstruct_core::config::{FederationConfig, GenerationConfig};
use fedinstruct_core::evaluation::EvalReport;
use fedinstruct_core::federation::FederationOutcome;
use fedinstruct_core::pipeline::ClientStats;
use fedinstruct_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::settings::BackendChoice;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub federation: FederationConfig,
    pub generation: GenerationConfig,
    pub backends: BackendChoice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationSummary {
    pub rounds_completed: usize,
    pub final_checksum: f64,
    pub final_checkpoint: String,
    pub checkpoints: Vec<String>,
    /// Mean reported training loss in the last round.
    pub final_train_loss: Option<f32>,
}

impl FederationSummary {
    pub fn new(outcome: &FederationOutcome, final_checkpoint: &Path) -> Self {
        let last = outcome.records.last();
        Self {
            rounds_completed: outcome.records.len(),
            final_checksum: outcome.params.checksum(),
            final_checkpoint: file_name(final_checkpoint),
            checkpoints: outcome.checkpoints.iter().map(|p| file_name(p)).collect(),
            final_train_loss: last
                .filter(|r| !r.train_losses.is_empty())
                .map(|r| r.train_losses.iter().sum::<f32>() / r.train_losses.len() as f32),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub count: usize,
    pub mean_rouge_l: f64,
    pub mean_bert_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bert_baseline: Option<f64>,
}

impl From<&EvalReport> for EvaluationSummary {
    fn from(r: &EvalReport) -> Self {
        Self {
            count: r.count,
            mean_rouge_l: r.mean_rouge_l,
            mean_bert_f1: r.mean_bert_f1,
            bert_baseline: r.bert_baseline,
        }
    }
}

/// What a command consumed, produced and counted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: ConfigSnapshot,
    /// Input path → FNV-1a digest of its bytes, as 16 hex digits.
    pub inputs: BTreeMap<String, String>,
    #[serde(default)]
    pub clients: BTreeMap<String, ClientStats>,
    #[serde(default)]
    pub totals: ClientStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub federation: Option<FederationSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluation: Option<EvaluationSummary>,
    #[serde(default)]
    pub timings_ms: BTreeMap<String, u64>,
}

impl RunManifest {
    pub fn new(command: &str, config: ConfigSnapshot) -> Self {
        Self {
            command: command.into(),
            config,
            inputs: BTreeMap::new(),
            clients: BTreeMap::new(),
            totals: ClientStats::default(),
            federation: None,
            evaluation: None,
            timings_ms: BTreeMap::new(),
        }
    }

    pub fn set_clients(&mut self, clients: BTreeMap<String, ClientStats>) {
        let mut totals = ClientStats::default();
        for s in clients.values() {
            totals.generated += s.generated;
            totals.parse_failed += s.parse_failed;
            totals.retried += s.retried;
            totals.rule_rejected += s.rule_rejected;
            totals.reward_dropped += s.reward_dropped;
            totals.kept += s.kept;
            for (k, v) in &s.rule_rejects_by_reason {
                *totals.rule_rejects_by_reason.entry(k.clone()).or_default() += v;
            }
        }
        self.clients = clients;
        self.totals = totals;
    }

    /// Every client, and the totals, satisfy
    /// `generated = rule_rejected + reward_dropped + kept`.
    pub fn balanced(&self) -> bool {
        self.totals.balanced() && self.clients.values().all(ClientStats::balanced)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::Io {
            context: format!("writing {}", path.display()),
            source: e,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            context: format!("reading {}", path.display()),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Json(e).context(format!("manifest {}", path.display())))
    }
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn totals_sum_clients() {
        let mut m = RunManifest::new(
            "generate",
            ConfigSnapshot {
                federation: FederationConfig::default(),
                generation: GenerationConfig::default(),
                backends: BackendChoice::default(),
            },
        );
        let a = ClientStats {
            generated: 4,
            rule_rejected: 1,
            rule_rejects_by_reason: [("missing_answer".to_string(), 1)].into(),
            reward_dropped: 1,
            kept: 2,
            ..Default::default()
        };
        let b = ClientStats {
            generated: 3,
            kept: 3,
            ..Default::default()
        };
        m.set_clients([("a".to_string(), a), ("b".to_string(), b)].into());
        assert_eq!(m.totals.generated, 7);
        assert_eq!(m.totals.kept, 5);
        assert!(m.balanced());
        m.clients.get_mut("b").unwrap().kept = 2;
        assert!(!m.balanced());
    }
}
