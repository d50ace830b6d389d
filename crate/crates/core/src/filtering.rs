//! Rule-based format filtering followed by reward-based selection of the
//! top two-thirds. Both run per client.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::error::{Error, Result};
use crate::generation::ParseFailure;
use crate::text::tokenize;
use crate::types::InstructionPair;

/// Scores (instruction, response) pairs; higher is better.
pub trait RewardBackend: Send + Sync {
    fn score(&self, pairs: &[InstructionPair]) -> Result<Vec<f32>>;
}

/// Offline scorer: the fraction of distinct response tokens that also occur
/// in the source document.
#[derive(Debug, Clone, Default)]
pub struct MockRewardScorer {
    documents: HashMap<String, HashSet<String>>,
}

impl MockRewardScorer {
    pub fn new<'a>(documents: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        Self {
            documents: documents
                .into_iter()
                .map(|(id, text)| (id.to_string(), tokenize(text).into_iter().collect()))
                .collect(),
        }
    }

    pub fn grounding(&self, pair: &InstructionPair) -> f32 {
        let response: HashSet<String> = tokenize(&pair.response).into_iter().collect();
        if response.is_empty() {
            return 0.0;
        }
        let hits = match self.documents.get(&pair.source_doc_id) {
            Some(doc) => response.intersection(doc).count(),
            None => 0,
        };
        (hits as f64 / response.len() as f64) as f32
    }
}

impl RewardBackend for MockRewardScorer {
    fn score(&self, pairs: &[InstructionPair]) -> Result<Vec<f32>> {
        Ok(pairs.iter().map(|p| self.grounding(p)).collect())
    }
}

/// Keeps the successful parses and counts rejections by reason.
pub fn rule_filter<I>(parsed: I) -> (Vec<InstructionPair>, BTreeMap<ParseFailure, usize>)
where
    I: IntoIterator<Item = Result<InstructionPair, ParseFailure>>,
{
    let mut kept = Vec::new();
    let mut rejects = BTreeMap::new();
    for p in parsed {
        match p {
            Ok(pair) => kept.push(pair),
            Err(reason) => *rejects.entry(reason).or_insert(0) += 1,
        }
    }
    (kept, rejects)
}

/// ⌈2n/3⌉: never drops a client's last pair.
pub fn reward_keep_count(n: usize) -> usize {
    (2 * n).div_ceil(3)
}

/// Marks the top ⌈2N/3⌉ pairs (ties by input position) as kept and the
/// rest as dropped. Every pair gets its reward score and the list keeps its
/// input order.
pub fn reward_filter(
    mut pairs: Vec<InstructionPair>,
    backend: &dyn RewardBackend,
) -> Result<Vec<InstructionPair>> {
    if pairs.is_empty() {
        return Ok(pairs);
    }
    let scores = backend.score(&pairs)?;
    if scores.len() != pairs.len() {
        return Err(Error::BackendProtocol(format!(
            "reward backend returned {} scores for {} pairs",
            scores.len(),
            pairs.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::BackendProtocol(format!("reward score {i} is NaN")));
    }
    let keep = select_top(&scores, reward_keep_count(pairs.len()));
    for (i, (pair, score)) in pairs.iter_mut().zip(scores).enumerate() {
        pair.reward_score = Some(score);
        pair.kept = keep[i];
    }
    Ok(pairs)
}

/// Membership mask of the `n` best scores, earlier index winning ties.
fn select_top(scores: &[f32], n: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut mask = vec![false; scores.len()];
    for &i in &order[..n] {
        mask[i] = true;
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<f32>);

    impl RewardBackend for Fixed {
        fn score(&self, _: &[InstructionPair]) -> Result<Vec<f32>> {
            Ok(self.0.clone())
        }
    }

    fn pairs(n: usize) -> Vec<InstructionPair> {
        (0..n)
            .map(|i| InstructionPair::new(format!("q{i}"), format!("a{i}"), format!("d{i}")))
            .collect()
    }

    fn kept_indices(v: &[InstructionPair]) -> Vec<usize> {
        v.iter().enumerate().filter(|(_, p)| p.kept).map(|(i, _)| i).collect()
    }

    #[test]
    fn rule_filter_accounting() {
        let mut input: Vec<Result<InstructionPair, ParseFailure>> =
            pairs(7).into_iter().map(Ok).collect();
        input.insert(2, Err(ParseFailure::WrongOrder));
        input.insert(5, Err(ParseFailure::EmptyField));
        input.push(Err(ParseFailure::EmptyField));
        let (kept, stats) = rule_filter(input);
        assert_eq!(kept.len(), 7);
        assert_eq!(stats.values().sum::<usize>(), 3);
        assert_eq!(stats[&ParseFailure::EmptyField], 2);
        assert_eq!(kept[2].instruction, "q2");
    }

    #[test]
    fn rule_filter_degenerate() {
        let (kept, stats) = rule_filter(vec![Err(ParseFailure::MissingAnswer); 4]);
        assert!(kept.is_empty());
        assert_eq!(stats[&ParseFailure::MissingAnswer], 4);
        let (kept, stats) = rule_filter(Vec::new());
        assert!(kept.is_empty() && stats.is_empty());
    }

    #[test]
    fn keep_counts() {
        assert_eq!(reward_keep_count(1), 1);
        assert_eq!(reward_keep_count(2), 2);
        assert_eq!(reward_keep_count(3), 2);
        assert_eq!(reward_keep_count(6), 4);
        assert_eq!(reward_keep_count(100), 67);
    }

    #[test]
    fn three_pairs() {
        let out = reward_filter(pairs(3), &Fixed(vec![0.1, 0.9, 0.5])).unwrap();
        assert_eq!(kept_indices(&out), [1, 2]);
        assert_eq!(out[0].reward_score, Some(0.1));
        assert!(!out[0].kept);
    }

    #[test]
    fn equal_scores_keep_earliest() {
        let out = reward_filter(pairs(6), &Fixed(vec![0.5; 6])).unwrap();
        assert_eq!(kept_indices(&out), [0, 1, 2, 3]);
    }

    #[test]
    fn backend_length_mismatch() {
        assert!(matches!(
            reward_filter(pairs(3), &Fixed(vec![1.0])),
            Err(Error::BackendProtocol(_))
        ));
        assert!(reward_filter(pairs(2), &Fixed(vec![1.0, f32::NAN])).is_err());
    }

    #[test]
    fn mock_grounding_fraction() {
        let scorer = MockRewardScorer::new([("d", "Aspirin reduces fever in adults.")]);
        let mut p = InstructionPair::new("q", "Aspirin reduces pain", "d");
        assert!((scorer.grounding(&p) - 2.0 / 3.0).abs() < 1e-6);
        p.response = "aspirin, FEVER.".into();
        assert_eq!(scorer.grounding(&p), 1.0);
        p.source_doc_id = "missing".into();
        assert_eq!(scorer.grounding(&p), 0.0);
        p.response = "...".into();
        assert_eq!(scorer.grounding(&p), 0.0);
    }
}
