//! A small synthetic workspace: per-client corpora over three domains, a
//! tagged example pool, an evaluation set with canned responses, and a
//! config that ties them together.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fedinstruct_core::corpus_io::{save_corpus, save_example_pool, save_references, save_responses, ClientCorpus, Reference, Response};
use fedinstruct_core::rng::{seeded_rng, SplitMix64};
use fedinstruct_core::{Document, Error, Example, Result};

pub const DOMAINS: [&str; 3] = ["medicine", "knowledge", "math"];

const SUBJECTS: [&[&str]; 3] = [
    &[
        "insulin",
        "the liver",
        "an antibiotic",
        "a fever",
        "the immune system",
        "blood pressure",
        "a vaccine",
        "the kidney",
    ],
    &[
        "the Nile",
        "the printing press",
        "Mount Everest",
        "the Roman Empire",
        "photosynthesis",
        "the Great Wall",
        "the Moon",
        "a volcano",
    ],
    &[
        "a prime number",
        "the Pythagorean theorem",
        "a derivative",
        "an integral",
        "a matrix",
        "the golden ratio",
        "a logarithm",
        "a probability",
    ],
];

const PREDICATES: [&[&str]; 3] = [
    &[
        "regulates how the body stores sugar",
        "is monitored closely in patients after surgery",
        "can be affected by long courses of treatment",
        "is often discussed by doctors during routine checkups",
        "responds to infection within a few hours",
        "filters waste from the blood every day",
        "changes with age, diet and sleep",
        "is measured with simple clinical instruments",
    ],
    &[
        "shaped trade routes for many centuries",
        "is described in most school history books",
        "attracted travelers from distant regions",
        "changed the way people shared information",
        "depends on sunlight and water to work",
        "can be seen from very far away",
        "influenced the culture of nearby cities",
        "was studied by early scientists and writers",
    ],
    &[
        "appears in many proofs about whole numbers",
        "relates the sides of a right triangle",
        "measures how quickly a quantity changes",
        "adds up infinitely many small pieces",
        "organizes numbers into rows and columns",
        "shows up in art, plants and architecture",
        "turns multiplication into addition",
        "assigns a number between zero and one to an event",
    ],
];

#[derive(Debug, Clone)]
pub struct ToySpec {
    pub clients: usize,
    pub docs: usize,
    pub pool_size: usize,
    pub eval_size: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            clients: 5,
            docs: 20,
            pool_size: 50,
            eval_size: 50,
            seed: 7,
        }
    }
}

/// Paths of a written toy workspace.
#[derive(Debug, Clone)]
pub struct ToyLayout {
    pub config: PathBuf,
    pub corpora: Vec<PathBuf>,
    pub pool: PathBuf,
    pub references: PathBuf,
    pub responses: PathBuf,
}

fn pick<'a>(rng: &mut SplitMix64, items: &[&'a str]) -> &'a str {
    items[rng.below(items.len() as u64) as usize]
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn sentence(rng: &mut SplitMix64, domain: usize) -> (String, &'static str) {
    let subject = pick(rng, SUBJECTS[domain]);
    let predicate = pick(rng, PREDICATES[domain]);
    (format!("{} {predicate}.", capitalize(subject)), subject)
}

fn paragraph(rng: &mut SplitMix64, domain: usize, sentences: usize) -> (String, &'static str) {
    let (first, subject) = sentence(rng, domain);
    let mut text = first;
    for _ in 1..sentences {
        text.push(' ');
        text.push_str(&sentence(rng, domain).0);
    }
    (text, subject)
}

pub fn client_corpus(spec: &ToySpec, client: usize) -> Result<ClientCorpus> {
    let client_id = format!("client_{client}");
    let mut rng = seeded_rng(spec.seed, &format!("toy/corpus/{client_id}"));
    let home = client % DOMAINS.len();
    let documents = (0..spec.docs)
        .map(|j| {
            let domain = if rng.next_f64() < 0.8 {
                home
            } else {
                rng.below(DOMAINS.len() as u64) as usize
            };
            let n = 2 + rng.below(3) as usize;
            let (mut text, _) = paragraph(&mut rng, domain, n);
            // a few documents quote the prompt format verbatim
            if j % 23 == 11 {
                text = format!("Reader note [question]: {text}");
            }
            Ok(Document::new(format!("{client_id}-{j:03}"), text)?.with_domain(DOMAINS[domain]))
        })
        .collect::<Result<_>>()?;
    Ok(ClientCorpus {
        client_id,
        documents,
    })
}

pub fn example_pool(spec: &ToySpec) -> Result<Vec<Example>> {
    let mut rng = seeded_rng(spec.seed, "toy/pool");
    (0..spec.pool_size)
        .map(|i| {
            let domain = i % DOMAINS.len();
            let (text, subject) = paragraph(&mut rng, domain, 2);
            let answer = text.split_inclusive(". ").next().unwrap_or(&text).trim().to_string();
            Ok(Example {
                document: Document::new(format!("pool-{}", i + 1), text)?.with_domain(DOMAINS[domain]),
                instruction: format!("What does the passage say about {subject}?"),
                response: answer,
                domain: Some(DOMAINS[domain].to_string()),
            })
        })
        .collect()
}

/// References and responses share ids; each response keeps a random subset
/// of the reference words, so scores spread over (0, 1].
pub fn evaluation_set(spec: &ToySpec) -> (Vec<Reference>, Vec<Response>) {
    let mut rng = seeded_rng(spec.seed, "toy/eval");
    let mut refs = Vec::with_capacity(spec.eval_size);
    let mut responses = Vec::with_capacity(spec.eval_size);
    for i in 0..spec.eval_size {
        let domain = i % DOMAINS.len();
        let (reference, subject) = paragraph(&mut rng, domain, 2);
        let id = format!("eval-{i:03}");
        let kept: Vec<&str> = reference
            .split_whitespace()
            .filter(|_| rng.next_f64() < 0.7)
            .collect();
        let response = if kept.is_empty() {
            subject.to_string()
        } else {
            kept.join(" ")
        };
        refs.push(Reference {
            id: id.clone(),
            instruction: format!("Tell me about {subject}."),
            reference,
        });
        responses.push(Response { id, response });
    }
    (refs, responses)
}

fn config_text(spec: &ToySpec, corpora: &[String]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "num_clients = {}", spec.clients);
    let _ = writeln!(s, "rounds = 10");
    let _ = writeln!(s, "clients_per_round = {}", spec.clients.min(2));
    let _ = writeln!(s, "seed = {}", spec.seed);
    let _ = writeln!(s, "learning_rate = 0.05");
    let _ = writeln!(s, "local_steps = 10");
    let _ = writeln!(s, "k = 3");
    let _ = writeln!(s, "policy = \"retrieval\"");
    let _ = writeln!(s, "checkpoint_interval = 5");
    let _ = writeln!(s, "parallelism = 4");
    let _ = writeln!(s, "\n[inputs]");
    let list: Vec<String> = corpora.iter().map(|c| format!("\"{c}\"")).collect();
    let _ = writeln!(s, "corpora = [{}]", list.join(", "));
    let _ = writeln!(s, "pool = \"pool.jsonl\"");
    let _ = writeln!(s, "init_zeros = \"lora_a=4x16,lora_b=16x4\"");
    let _ = writeln!(s, "references = \"eval/references.jsonl\"");
    let _ = writeln!(s, "responses = \"eval/responses.jsonl\"");
    s
}

pub fn write_toy(out: &Path, spec: &ToySpec) -> Result<ToyLayout> {
    if spec.clients == 0 || spec.docs == 0 || spec.pool_size == 0 {
        return Err(Error::Config("toy workspace needs clients, documents and a pool".into()));
    }
    for sub in ["corpora", "eval"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::Io {
            context: format!("creating {}", d.display()),
            source: e,
        })?;
    }
    let mut corpora = Vec::new();
    let mut rel = Vec::new();
    for c in 0..spec.clients {
        let corpus = client_corpus(spec, c)?;
        let name = format!("corpora/{}.jsonl", corpus.client_id);
        let path = out.join(&name);
        save_corpus(&corpus, &path)?;
        corpora.push(path);
        rel.push(name);
    }
    let pool = out.join("pool.jsonl");
    save_example_pool(&example_pool(spec)?, &pool)?;
    let (refs, responses) = evaluation_set(spec);
    let references = out.join("eval/references.jsonl");
    let responses_path = out.join("eval/responses.jsonl");
    save_references(&refs, &references)?;
    save_responses(&responses, &responses_path)?;
    let config = out.join("config.toml");
    std::fs::write(&config, config_text(spec, &rel)).map_err(|e| Error::Io {
        context: format!("writing {}", config.display()),
        source: e,
    })?;
    Ok(ToyLayout {
        config,
        corpora,
        pool,
        references,
        responses: responses_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic_and_tagged() {
        let spec = ToySpec::default();
        let a = client_corpus(&spec, 1).unwrap();
        assert_eq!(a, client_corpus(&spec, 1).unwrap());
        assert_ne!(a, client_corpus(&spec, 2).unwrap());
        assert_eq!(a.documents.len(), 20);
        assert!(a.documents.iter().all(|d| d.domain().is_some()));
        assert!(a.documents[11].text.contains("[question]:"));
        assert!(!a.documents[10].text.contains("[question]:"));
    }

    #[test]
    fn pool_covers_all_domains() {
        let pool = example_pool(&ToySpec::default()).unwrap();
        assert_eq!(pool.len(), 50);
        for d in DOMAINS {
            assert!(pool.iter().filter(|e| e.domain.as_deref() == Some(d)).count() >= 16);
        }
    }

    #[test]
    fn eval_ids_line_up() {
        let (r, s) = evaluation_set(&ToySpec::default());
        assert_eq!(r.len(), 50);
        assert!(r.iter().zip(&s).all(|(a, b)| a.id == b.id && !b.response.is_empty()));
    }
}
