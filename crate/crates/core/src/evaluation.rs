//! ROUGE-L and greedy-matching BERTScore of model responses against gold
//! references, plus the embedding export used for dataset comparison plots.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus_io::{write_jsonl, Reference, Response};
use crate::error::{Error, Result};
use crate::retrieval::{greedy_match_f1, mean_embedding, EmbeddingProvider};
use crate::text::tokenize;
use crate::types::InstructionPair;

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 (β = 1) over already tokenized text.
pub fn rouge_l_tokens(candidate: &[String], reference: &[String]) -> f32 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(candidate, reference) as f64;
    let recall = l / reference.len() as f64;
    let precision = l / candidate.len() as f64;
    if precision + recall == 0.0 {
        return 0.0;
    }
    (2.0 * precision * recall / (precision + recall)) as f32
}

pub fn rouge_l(candidate: &str, reference: &str) -> f32 {
    rouge_l_tokens(&tokenize(candidate), &tokenize(reference))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub rouge_l: f32,
    pub bert_f1: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub mean_rouge_l: f64,
    pub mean_bert_f1: f64,
    /// Set when BERTScores were rescaled as (s − b) / (1 − b).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bert_baseline: Option<f64>,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>, bert_baseline: Option<f64>) -> Self {
        let n = rows.len();
        let mean = |f: fn(&EvalRow) -> f32| {
            if n == 0 {
                0.0
            } else {
                rows.iter().map(|r| f64::from(f(r))).sum::<f64>() / n as f64
            }
        };
        Self {
            count: n,
            mean_rouge_l: mean(|r| r.rouge_l),
            mean_bert_f1: mean(|r| r.bert_f1),
            bert_baseline,
            rows,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Flat `id,rouge_l,bert_f1` table.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let ctx = || format!("writing {}", path.display());
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(|e| Error::io(ctx(), std::io::Error::other(e)))?;
        w.write_record(["id", "rouge_l", "bert_f1"])
            .map_err(|e| Error::io(ctx(), std::io::Error::other(e)))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::io(ctx(), std::io::Error::other(e)))?;
        }
        w.flush().map_err(|e| Error::io(ctx(), e))
    }
}

/// Scores each response against the reference with the same id. Rows follow
/// reference order. A response or reference with no tokens scores 0 on both
/// metrics.
pub fn evaluate(
    responses: &[Response],
    references: &[Reference],
    provider: &dyn EmbeddingProvider,
    bert_baseline: Option<f64>,
) -> Result<EvalReport> {
    let by_id: HashMap<&str, &str> = responses
        .iter()
        .map(|r| (r.id.as_str(), r.response.as_str()))
        .collect();
    let missing: Vec<&str> = references
        .iter()
        .map(|r| r.id.as_str())
        .filter(|id| !by_id.contains_key(id))
        .collect();
    let ref_ids: std::collections::HashSet<&str> =
        references.iter().map(|r| r.id.as_str()).collect();
    let extra: Vec<&str> = responses
        .iter()
        .map(|r| r.id.as_str())
        .filter(|id| !ref_ids.contains(id))
        .collect();
    if !missing.is_empty() || !extra.is_empty() || by_id.len() != responses.len() {
        return Err(Error::IdMismatch(format!(
            "no response for {missing:?}; no reference for {extra:?}"
        )));
    }
    if let Some(b) = bert_baseline {
        if b.is_nan() || b >= 1.0 {
            return Err(Error::Config(format!("BERTScore baseline must be < 1, got {b}")));
        }
    }

    let rows = references
        .iter()
        .map(|r| {
            let cand = tokenize(by_id[r.id.as_str()]);
            let refs = tokenize(&r.reference);
            let mut bert = if cand.is_empty() || refs.is_empty() {
                0.0
            } else {
                greedy_match_f1(&provider.embed(&cand)?, &provider.embed(&refs)?)?
            };
            if let Some(b) = bert_baseline {
                bert = ((f64::from(bert) - b) / (1.0 - b)) as f32;
            }
            Ok(EvalRow {
                id: r.id.clone(),
                rouge_l: rouge_l_tokens(&cand, &refs),
                bert_f1: bert,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_rows(rows, bert_baseline))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub source: String,
    pub embedding: Vec<f32>,
}

/// Sentence vector of `instruction + " " + response`: the re-normalized
/// mean of its token embeddings.
pub fn pair_embedding(pair: &InstructionPair, provider: &dyn EmbeddingProvider) -> Result<Vec<f32>> {
    let tokens = tokenize(&format!("{} {}", pair.instruction, pair.response));
    Ok(mean_embedding(&provider.embed(&tokens)?))
}

/// Writes one JSONL row per pair, generated pairs first, tagged
/// `"generated"` or `"human"`.
pub fn export_pair_embeddings(
    generated: &[InstructionPair],
    annotated: &[InstructionPair],
    provider: &dyn EmbeddingProvider,
    path: &Path,
) -> Result<usize> {
    let rows = generated
        .iter()
        .map(|p| ("generated", p))
        .chain(annotated.iter().map(|p| ("human", p)))
        .map(|(source, p)| {
            Ok(EmbeddingRow {
                source: source.to_string(),
                embedding: pair_embedding(p, provider)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(path, &rows)?;
    Ok(rows.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::HashEmbedder;

    fn resp(id: &str, text: &str) -> Response {
        Response {
            id: id.into(),
            response: text.into(),
        }
    }

    fn reference(id: &str, text: &str) -> Reference {
        Reference {
            id: id.into(),
            instruction: "q".into(),
            reference: text.into(),
        }
    }

    #[test]
    fn rouge_identity_and_disjoint() {
        assert_eq!(rouge_l("the cat sat", "The cat, sat."), 1.0);
        assert_eq!(rouge_l("alpha beta", "gamma delta"), 0.0);
        assert_eq!(rouge_l("", "x"), 0.0);
    }

    #[test]
    fn rouge_hand_example() {
        // L = 3, R = 3/4, P = 1
        let f = rouge_l("a c d", "a b c d");
        assert!((f64::from(f) - 6.0 / 7.0).abs() < 1e-6, "{f}");
    }

    #[test]
    fn lcs_small_cases() {
        assert_eq!(lcs_len(b"ABCBDAB", b"BDCABA"), 4);
        assert_eq!(lcs_len::<u8>(b"", b"abc"), 0);
        assert_eq!(lcs_len(b"abc", b"abc"), 3);
    }

    #[test]
    fn evaluate_identity() {
        let refs = vec![reference("1", "insulin lowers glucose"), reference("2", "the answer is 42")];
        let resps = vec![resp("2", "the answer is 42"), resp("1", "insulin lowers glucose")];
        let rep = evaluate(&resps, &refs, &HashEmbedder, None).unwrap();
        assert_eq!(rep.count, 2);
        assert_eq!(rep.rows[0].id, "1");
        assert!((rep.mean_rouge_l - 1.0).abs() < 1e-9);
        assert!((rep.mean_bert_f1 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn evaluate_id_mismatch() {
        let refs = vec![reference("1", "x")];
        assert!(matches!(
            evaluate(&[resp("2", "x")], &refs, &HashEmbedder, None),
            Err(Error::IdMismatch(_))
        ));
        assert!(matches!(
            evaluate(&[resp("1", "x"), resp("1", "y")], &refs, &HashEmbedder, None),
            Err(Error::IdMismatch(_))
        ));
    }

    #[test]
    fn empty_response_scores_zero() {
        let rep = evaluate(&[resp("1", "...")], &[reference("1", "x y")], &HashEmbedder, None).unwrap();
        assert_eq!(rep.rows[0].rouge_l, 0.0);
        assert_eq!(rep.rows[0].bert_f1, 0.0);
    }

    #[test]
    fn baseline_rescaling() {
        let refs = vec![reference("1", "a b c")];
        let rep = evaluate(&[resp("1", "a b c")], &refs, &HashEmbedder, Some(0.5)).unwrap();
        assert!((rep.rows[0].bert_f1 - 1.0).abs() < 1e-5);
        let rep = evaluate(&[resp("1", "zzz")], &refs, &HashEmbedder, Some(0.5)).unwrap();
        assert!(rep.rows[0].bert_f1 < 1.0);
        assert!(evaluate(&[resp("1", "a")], &refs, &HashEmbedder, Some(1.0)).is_err());
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let rep = EvalReport::from_rows(
            vec![EvalRow {
                id: "a,b".into(),
                rouge_l: 0.5,
                bert_f1: 0.25,
            }],
            None,
        );
        rep.write_json(&dir.path().join("r.json")).unwrap();
        rep.write_csv(&dir.path().join("r.csv")).unwrap();
        let back: EvalReport =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
        assert_eq!(back, rep);
        let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert_eq!(csv, "id,rouge_l,bert_f1\n\"a,b\",0.5,0.25\n");
    }

    #[test]
    fn embedding_export() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.jsonl");
        let pair = InstructionPair::new("What is it?", "A test.", "d");
        let n = export_pair_embeddings(std::slice::from_ref(&pair), std::slice::from_ref(&pair), &HashEmbedder, &p).unwrap();
        assert_eq!(n, 2);
        let rows: Vec<EmbeddingRow> = std::fs::read_to_string(&p)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(rows[0].source, "generated");
        assert_eq!(rows[1].source, "human");
        assert_eq!(rows[0].embedding, rows[1].embedding);
        let norm: f32 = rows[0].embedding.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);

        export_pair_embeddings(&[], &[pair], &HashEmbedder, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.contains("\"human\""));
    }
}
