//! Token embeddings, greedy-matching BERTScore and few-shot example
//! selection.

use crate::error::{Error, Result};
use crate::rng::{seeded_rng, SplitMix64};
use crate::text::{fnv1a64, tokenize};
use crate::types::{Document, Example, SelectionPolicy};

/// Maps tokens to unit-norm vectors of a fixed dimension.
///
/// Implementations must be deterministic for identical input and callable
/// from several threads at once.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f32>>>;
}

pub const HASH_EMBED_DIM: usize = 64;

/// Deterministic stand-in for a contextual encoder: each token gets a
/// pseudo-random unit vector drawn from a stream seeded by the FNV-1a hash
/// of its bytes.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashEmbedder;

impl HashEmbedder {
    pub fn embed_token(token: &str) -> Vec<f32> {
        let mut rng = SplitMix64::new(fnv1a64(token.as_bytes()));
        let raw: Vec<f64> = (0..HASH_EMBED_DIM).map(|_| rng.uniform(-1.0, 1.0)).collect();
        normalize_f64(&raw)
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn dim(&self) -> usize {
        HASH_EMBED_DIM
    }

    fn embed(&self, tokens: &[String]) -> Result<Vec<Vec<f32>>> {
        if tokens.is_empty() {
            return Err(Error::EmptyTokenList);
        }
        Ok(tokens.iter().map(|t| Self::embed_token(t)).collect())
    }
}

fn normalize_f64(v: &[f64]) -> Vec<f32> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return v.iter().map(|&x| x as f32).collect();
    }
    v.iter().map(|x| (x / norm) as f32).collect()
}

/// Rescales to unit L2 norm; zero vectors are returned unchanged.
pub fn normalize(v: &[f32]) -> Vec<f32> {
    let wide: Vec<f64> = v.iter().map(|&x| f64::from(x)).collect();
    normalize_f64(&wide)
}

/// Mean of the token vectors, re-normalized.
pub fn mean_embedding(vectors: &[Vec<f32>]) -> Vec<f32> {
    let dim = vectors.first().map_or(0, Vec::len);
    let mut acc = vec![0f64; dim];
    for v in vectors {
        for (a, &x) in acc.iter_mut().zip(v) {
            *a += f64::from(x);
        }
    }
    let n = vectors.len().max(1) as f64;
    let mean: Vec<f64> = acc.into_iter().map(|a| a / n).collect();
    normalize_f64(&mean)
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// Greedy-matching F1 over pre-computed unit vectors.
///
/// Precision averages, over candidate tokens, the best cosine against any
/// reference token; recall does the same from the reference side. Cosines
/// are clipped to [-1, 1] and negative maxima count as 0, so the score lies
/// in [0, 1].
pub fn greedy_match_f1(candidate: &[Vec<f32>], reference: &[Vec<f32>]) -> Result<f32> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(Error::EmptyTokenList);
    }
    let mut row_max = vec![f64::NEG_INFINITY; candidate.len()];
    let mut col_max = vec![f64::NEG_INFINITY; reference.len()];
    for (i, c) in candidate.iter().enumerate() {
        for (j, r) in reference.iter().enumerate() {
            let s = dot(c, r).clamp(-1.0, 1.0);
            row_max[i] = row_max[i].max(s);
            col_max[j] = col_max[j].max(s);
        }
    }
    let precision = row_max.iter().map(|&s| s.max(0.0)).sum::<f64>() / candidate.len() as f64;
    let recall = col_max.iter().map(|&s| s.max(0.0)).sum::<f64>() / reference.len() as f64;
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok((2.0 * precision * recall / (precision + recall)) as f32)
}

pub fn bertscore_f1(
    candidate: &[String],
    reference: &[String],
    provider: &dyn EmbeddingProvider,
) -> Result<f32> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(Error::EmptyTokenList);
    }
    greedy_match_f1(&provider.embed(candidate)?, &provider.embed(reference)?)
}

/// The k examples chosen for one target document.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedExamples {
    pub examples: Vec<Example>,
    /// Positions in the pool, parallel to `examples`.
    pub indices: Vec<usize>,
    /// Similarity to the target; only set by [`SelectionPolicy::Retrieval`].
    pub scores: Option<Vec<f32>>,
}

impl SelectedExamples {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// An example pool with its document token embeddings computed once.
pub struct ExamplePoolIndex<'a> {
    pool: &'a [Example],
    embeddings: Vec<Vec<Vec<f32>>>,
    provider: &'a dyn EmbeddingProvider,
}

impl<'a> ExamplePoolIndex<'a> {
    pub fn new(pool: &'a [Example], provider: &'a dyn EmbeddingProvider) -> Result<Self> {
        let embeddings = pool
            .iter()
            .map(|e| provider.embed(&tokenize(&e.document.text)))
            .collect::<Result<_>>()?;
        Ok(Self {
            pool,
            embeddings,
            provider,
        })
    }

    pub fn pool(&self) -> &[Example] {
        self.pool
    }

    /// Similarity of `target` to every pool document, in pool order.
    pub fn scores(&self, target: &Document) -> Result<Vec<f32>> {
        let target_vecs = self.provider.embed(&tokenize(&target.text))?;
        self.embeddings
            .iter()
            .map(|doc| greedy_match_f1(&target_vecs, doc))
            .collect()
    }

    pub fn select(
        &self,
        target: &Document,
        policy: SelectionPolicy,
        k: usize,
        rng: &mut SplitMix64,
    ) -> Result<SelectedExamples> {
        if k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.pool.len() < k {
            return Err(Error::PoolTooSmall {
                needed: k,
                available: self.pool.len(),
            });
        }
        if policy == SelectionPolicy::Retrieval {
            let scores = self.scores(target)?;
            let top = top_k_by_score(&scores, k);
            return Ok(SelectedExamples {
                examples: top.iter().map(|&i| self.pool[i].clone()).collect(),
                scores: Some(top.iter().map(|&i| scores[i]).collect()),
                indices: top,
            });
        }

        let (inside, outside) = self.split_by_domain(target)?;
        let draw = |from: &[usize], n: usize, rng: &mut SplitMix64| -> Result<Vec<usize>> {
            if from.len() < n {
                return Err(Error::PoolTooSmall {
                    needed: n,
                    available: from.len(),
                });
            }
            Ok(rng
                .sample_indices(from.len(), n)
                .into_iter()
                .map(|i| from[i])
                .collect())
        };
        let indices = match policy {
            SelectionPolicy::Retrieval => unreachable!(),
            SelectionPolicy::FixedInDomain => {
                if inside.len() < k {
                    return Err(Error::PoolTooSmall {
                        needed: k,
                        available: inside.len(),
                    });
                }
                inside[..k].to_vec()
            }
            SelectionPolicy::RandomInDomain => draw(&inside, k, rng)?,
            SelectionPolicy::RandomOutDomain => draw(&outside, k, rng)?,
            SelectionPolicy::RandomMixed {
                in_count,
                out_count,
            } => {
                if in_count + out_count != k {
                    return Err(Error::Config(format!(
                        "policy {policy} draws {} examples but k = {k}",
                        in_count + out_count
                    )));
                }
                let mut v = draw(&inside, in_count, rng)?;
                v.extend(draw(&outside, out_count, rng)?);
                v
            }
        };
        Ok(SelectedExamples {
            examples: indices.iter().map(|&i| self.pool[i].clone()).collect(),
            indices,
            scores: None,
        })
    }

    fn split_by_domain(&self, target: &Document) -> Result<(Vec<usize>, Vec<usize>)> {
        let domain = target.domain().ok_or_else(|| {
            Error::MissingDomainTag(format!("target document {:?} has no domain", target.id))
        })?;
        let mut inside = Vec::new();
        let mut outside = Vec::new();
        for (i, e) in self.pool.iter().enumerate() {
            match e.domain.as_deref() {
                None => {
                    return Err(Error::MissingDomainTag(format!(
                        "pool entry {i} has no domain"
                    )))
                }
                Some(d) if d == domain => inside.push(i),
                Some(_) => outside.push(i),
            }
        }
        Ok((inside, outside))
    }
}

/// Indices of the k highest scores, descending; equal scores keep pool
/// order.
pub fn top_k_by_score(scores: &[f32], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// One-shot selection; builds a throwaway pool index. Use
/// [`ExamplePoolIndex`] when selecting for many targets.
pub fn select_examples(
    target: &Document,
    pool: &[Example],
    policy: SelectionPolicy,
    k: usize,
    rng: &mut SplitMix64,
    provider: &dyn EmbeddingProvider,
) -> Result<SelectedExamples> {
    if policy != SelectionPolicy::Retrieval {
        // no embeddings needed
        let index = ExamplePoolIndex {
            pool,
            embeddings: Vec::new(),
            provider,
        };
        return index.select(target, policy, k, rng);
    }
    ExamplePoolIndex::new(pool, provider)?.select(target, policy, k, rng)
}

/// The rng stream selection draws from for one client.
pub fn selection_rng(seed: u64, client_id: &str) -> SplitMix64 {
    seeded_rng(seed, &format!("selection/{client_id}"))
}
