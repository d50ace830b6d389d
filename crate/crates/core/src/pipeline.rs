//! Per-client data generation: example selection, few-shot generation,
//! parsing with one retry, then the two filters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::{FederationConfig, GenerationConfig};
use crate::corpus_io::{ClientCorpus, GeneratedDataset};
use crate::error::Result;
use crate::filtering::{reward_filter, rule_filter, RewardBackend};
use crate::generation::{generate_pair, parse_completion, GenerationBackend, ParseFailure, PromptTemplate};
use crate::retrieval::{selection_rng, ExamplePoolIndex, SelectedExamples};
use crate::rng::seeded_rng;
use crate::types::{Document, InstructionPair};

/// Accounting for one client. `generated` always equals
/// `rule_rejected + reward_dropped + kept`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientStats {
    /// Documents sent for generation (one pair per document).
    pub generated: usize,
    /// Completions that failed to parse, counting first attempts and retries.
    pub parse_failed: usize,
    /// Documents that were given a second completion.
    pub retried: usize,
    /// Documents whose final completion still failed to parse.
    pub rule_rejected: usize,
    pub rule_rejects_by_reason: BTreeMap<String, usize>,
    pub reward_dropped: usize,
    pub kept: usize,
}

impl ClientStats {
    pub fn balanced(&self) -> bool {
        self.generated == self.rule_rejected + self.reward_dropped + self.kept
            && self.rule_rejected == self.rule_rejects_by_reason.values().sum::<usize>()
    }
}

#[derive(Debug, Clone)]
pub struct ClientGeneration {
    /// Parsed pairs, all `kept`, in document order.
    pub dataset: GeneratedDataset,
    pub stats: ClientStats,
}

struct Attempt {
    parsed: Result<InstructionPair, ParseFailure>,
    failures: usize,
}

fn generation_seed(seed: u64, client_id: &str, doc_id: &str) -> u64 {
    seeded_rng(seed, &format!("generate/{client_id}/{doc_id}")).next_u64()
}

/// One pair per document. A completion that fails to parse is re-requested
/// once with a fresh seed and then dropped. Up to `parallelism` documents
/// are in flight at a time; selection is sequential so its random draws do
/// not depend on scheduling.
pub fn generate_client_dataset(
    corpus: &ClientCorpus,
    index: &ExamplePoolIndex<'_>,
    fed: &FederationConfig,
    gen: &GenerationConfig,
    template: &PromptTemplate,
    backend: &dyn GenerationBackend,
) -> Result<ClientGeneration> {
    let client = corpus.client_id.as_str();
    let mut rng = selection_rng(fed.seed, client);
    let selections: Vec<SelectedExamples> = corpus
        .documents
        .iter()
        .map(|doc| {
            index
                .select(doc, fed.selection_policy, fed.k_examples, &mut rng)
                .map_err(|e| e.context(format!("client {client:?}, document {:?}", doc.id)))
        })
        .collect::<Result<_>>()?;

    let attempt = |doc: &Document, selected: &SelectedExamples| -> Result<Attempt> {
        let ctx = |e: crate::Error| e.context(format!("client {client:?}, document {:?}", doc.id));
        let seed = generation_seed(fed.seed, client, &doc.id);
        let raw = generate_pair(template, doc, selected, backend, gen, Some(seed)).map_err(ctx)?;
        match parse_completion(&raw, &doc.id) {
            Ok(pair) => Ok(Attempt {
                parsed: Ok(pair),
                failures: 0,
            }),
            Err(first) => {
                log::debug!("document {:?}: unparseable completion ({first}), retrying", doc.id);
                let raw = generate_pair(template, doc, selected, backend, gen, Some(seed.wrapping_add(1)))
                    .map_err(ctx)?;
                let parsed = parse_completion(&raw, &doc.id);
                Ok(Attempt {
                    failures: 1 + usize::from(parsed.is_err()),
                    parsed,
                })
            }
        }
    };

    let jobs: Vec<(&Document, &SelectedExamples)> = corpus.documents.iter().zip(&selections).collect();
    let mut attempts = Vec::with_capacity(jobs.len());
    let width = fed.parallelism.max(1);
    for chunk in jobs.chunks(width) {
        if width == 1 {
            attempts.push(attempt(chunk[0].0, chunk[0].1)?);
            continue;
        }
        let results: Vec<Result<Attempt>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&(doc, sel)| s.spawn(move || attempt(doc, sel)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("generation thread panicked"))
                .collect()
        });
        for r in results {
            attempts.push(r?);
        }
    }

    let mut stats = ClientStats {
        generated: attempts.len(),
        ..Default::default()
    };
    for a in &attempts {
        stats.parse_failed += a.failures;
        stats.retried += usize::from(a.failures > 0);
    }
    let (pairs, rejects) = rule_filter(attempts.into_iter().map(|a| a.parsed));
    stats.rule_rejected = rejects.values().sum();
    stats.rule_rejects_by_reason = rejects
        .into_iter()
        .map(|(k, v)| (k.as_str().to_string(), v))
        .collect();
    stats.kept = pairs.len();
    if pairs.is_empty() {
        log::warn!("client {client:?}: every generation was rejected by the format filter");
    }
    Ok(ClientGeneration {
        dataset: GeneratedDataset {
            client_id: client.to_string(),
            pairs,
        },
        stats,
    })
}

/// Applies reward filtering to the currently kept pairs of one client.
/// Pairs already marked dropped are carried through untouched. Returns the
/// filtered dataset and the number of pairs newly dropped.
pub fn reward_filter_dataset(
    dataset: &GeneratedDataset,
    backend: &dyn RewardBackend,
) -> Result<(GeneratedDataset, usize)> {
    let candidates: Vec<InstructionPair> = dataset.kept().cloned().collect();
    if candidates.is_empty() {
        log::warn!("client {:?}: no pairs to score", dataset.client_id);
        return Ok((dataset.clone(), 0));
    }
    let n = candidates.len();
    let mut scored = reward_filter(candidates, backend)
        .map_err(|e| e.context(format!("client {:?}", dataset.client_id)))?
        .into_iter();
    let pairs: Vec<InstructionPair> = dataset
        .pairs
        .iter()
        .map(|p| if p.kept { scored.next().unwrap() } else { p.clone() })
        .collect();
    let out = GeneratedDataset {
        client_id: dataset.client_id.clone(),
        pairs,
    };
    let dropped = n - out.kept_count();
    Ok((out, dropped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filtering::MockRewardScorer;
    use crate::generation::MockGenerator;
    use crate::retrieval::HashEmbedder;
    use crate::types::Example;

    fn pool() -> Vec<Example> {
        (0..6)
            .map(|i| Example {
                document: Document::new(format!("p{i}"), format!("pool document number {i} about cells")).unwrap(),
                instruction: format!("What about {i}?"),
                response: format!("It is {i}."),
                domain: None,
            })
            .collect()
    }

    fn corpus() -> ClientCorpus {
        let texts = [
            "Cells divide by mitosis. Daughter cells are identical.",
            "Broken [question]: marker inside. Still text.",
            "Enzymes speed up reactions! They are proteins.",
        ];
        ClientCorpus {
            client_id: "c1".into(),
            documents: texts
                .iter()
                .enumerate()
                .map(|(i, t)| Document::new(format!("d{i}"), *t).unwrap())
                .collect(),
        }
    }

    #[test]
    fn generation_accounting() {
        let pool = pool();
        let index = ExamplePoolIndex::new(&pool, &HashEmbedder).unwrap();
        for parallelism in [1, 4] {
            let fed = FederationConfig {
                parallelism,
                ..Default::default()
            };
            let out = generate_client_dataset(
                &corpus(),
                &index,
                &fed,
                &GenerationConfig::default(),
                &PromptTemplate::default(),
                &MockGenerator,
            )
            .unwrap();
            let s = &out.stats;
            assert_eq!(s.generated, 3);
            assert_eq!(s.kept, 2);
            assert_eq!(s.rule_rejected, 1);
            assert_eq!(s.retried, 1);
            assert_eq!(s.parse_failed, 2);
            assert_eq!(s.rule_rejects_by_reason["duplicate_marker"], 1);
            assert!(s.balanced());
            let ids: Vec<_> = out.dataset.pairs.iter().map(|p| p.source_doc_id.as_str()).collect();
            assert_eq!(ids, ["d0", "d2"]);
            assert_eq!(out.dataset.pairs[1].response, "Enzymes speed up reactions!");
        }
    }

    #[test]
    fn reward_stage_keeps_two_thirds() {
        let c = corpus();
        let scorer = MockRewardScorer::new(c.documents.iter().map(|d| (d.id.as_str(), d.text.as_str())));
        let mut pairs: Vec<InstructionPair> = (0..3)
            .map(|i| InstructionPair::new("q", format!("cells {i} unrelated words"), "d0"))
            .collect();
        pairs.push(InstructionPair::new("q", "Cells divide by mitosis.", "d0"));
        let mut dropped_already = InstructionPair::new("q", "x", "d0");
        dropped_already.kept = false;
        pairs.insert(0, dropped_already.clone());
        let ds = GeneratedDataset {
            client_id: "c1".into(),
            pairs,
        };
        let (out, dropped) = reward_filter_dataset(&ds, &scorer).unwrap();
        assert_eq!(dropped, 1);
        assert_eq!(out.kept_count(), 3);
        assert_eq!(out.pairs[0], dropped_already);
        assert!(out.pairs[4].kept);
        assert!(out.pairs[1..].iter().all(|p| p.reward_score.is_some()));
    }
}
