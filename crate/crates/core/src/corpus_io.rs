//! JSONL ingestion and persistence.
//!
//! | file            | one line                                                        |
//! |-----------------|-----------------------------------------------------------------|
//! | corpus          | `{"id", "text", "meta"?}`                                       |
//! | example pool    | `{"document", "instruction", "response", "domain"?}`            |
//! | dataset         | `{"instruction", "response", "source_doc_id", "reward_score"?, "kept"}` |
//! | evaluation set  | `{"id"?, "instruction", "reference"}`                           |
//! | responses       | `{"id"?, "response"}`                                           |
//!
//! Client ids are file stems. Line numbers in errors are 1-based, and rows
//! without an explicit id are identified by their line number.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Document, Example, InstructionPair};

const MARKERS: [&str; 4] = ["[document]:", "[question]:", "[answer]:", "### Response:"];

#[derive(Debug, Clone, PartialEq)]
pub struct ClientCorpus {
    pub client_id: String,
    pub documents: Vec<Document>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedDataset {
    pub client_id: String,
    pub pairs: Vec<InstructionPair>,
}

impl GeneratedDataset {
    pub fn kept(&self) -> impl Iterator<Item = &InstructionPair> {
        self.pairs.iter().filter(|p| p.kept)
    }

    /// The dataset size used for federation weighting.
    pub fn kept_count(&self) -> usize {
        self.kept().count()
    }
}

/// One row of an evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub id: String,
    pub instruction: String,
    pub reference: String,
}

/// A model response to one evaluation instruction.
#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub id: String,
    pub response: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusRow {
    id: String,
    text: String,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

#[derive(Deserialize)]
struct PoolRow {
    document: String,
    instruction: String,
    response: String,
    #[serde(default)]
    domain: Option<String>,
}

#[derive(Deserialize)]
struct ReferenceRow {
    #[serde(default)]
    id: Option<String>,
    instruction: String,
    reference: String,
}

#[derive(Deserialize)]
struct ResponseRow {
    #[serde(default)]
    id: Option<String>,
    response: String,
}

fn read_utf8(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidUtf8 {
        path: path.to_path_buf(),
        offset: e.utf8_error().valid_up_to(),
    })
}

/// Parses every line as `T`, returning `(line_no, row)`. A single trailing
/// newline is allowed; any other blank line is malformed.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let text = read_utf8(path)?;
    let body = text.strip_suffix('\n').unwrap_or(&text);
    if body.is_empty() {
        return Ok(Vec::new());
    }
    body.split('\n')
        .enumerate()
        .map(|(i, line)| {
            let line = line.strip_suffix('\r').unwrap_or(line);
            serde_json::from_str(line)
                .map(|row| (i + 1, row))
                .map_err(|e| Error::MalformedLine {
                    path: path.to_path_buf(),
                    line: i + 1,
                    reason: e.to_string(),
                })
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let file = std::fs::File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n").map_err(|e| Error::io(ctx(), e))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))
}

pub fn client_id_of(path: &Path) -> Result<String> {
    path.file_stem()
        .and_then(|s| s.to_str())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .ok_or_else(|| Error::Config(format!("cannot derive a client id from {}", path.display())))
}

/// Loads one client's corpus; the client id is the file stem.
pub fn load_corpus(path: &Path) -> Result<ClientCorpus> {
    let rows: Vec<(usize, CorpusRow)> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    let mut documents = Vec::with_capacity(rows.len());
    for (line, row) in rows {
        let doc = Document {
            id: row.id,
            text: row.text,
            meta: row.meta,
        };
        doc.validate().map_err(|e| Error::MalformedLine {
            path: path.to_path_buf(),
            line,
            reason: e.to_string(),
        })?;
        if !seen.insert(doc.id.clone()) {
            return Err(Error::DuplicateId(doc.id));
        }
        lint_markers(&doc);
        documents.push(doc);
    }
    if documents.is_empty() {
        return Err(Error::InvalidDocument(format!(
            "corpus {} has no documents",
            path.display()
        )));
    }
    Ok(ClientCorpus {
        client_id: client_id_of(path)?,
        documents,
    })
}

/// Prompt markers inside a document are passed through unescaped; warn so
/// operators can spot generations that will fail to parse.
fn lint_markers(doc: &Document) {
    for m in MARKERS {
        if doc.text.contains(m) {
            log::warn!("document {:?} contains prompt marker {m:?}", doc.id);
        }
    }
}

pub fn save_corpus(corpus: &ClientCorpus, path: &Path) -> Result<()> {
    write_jsonl(path, &corpus.documents)
}

pub fn load_example_pool(path: &Path) -> Result<Vec<Example>> {
    let rows: Vec<(usize, PoolRow)> = read_jsonl(path)?;
    rows.into_iter()
        .map(|(line, row)| {
            let malformed = |reason: &str| Error::MalformedLine {
                path: path.to_path_buf(),
                line,
                reason: reason.to_string(),
            };
            if row.instruction.trim().is_empty() || row.response.trim().is_empty() {
                return Err(malformed("empty instruction or response"));
            }
            if row.document.trim().is_empty() {
                return Err(malformed("empty document"));
            }
            let mut document = Document {
                id: format!("pool-{line}"),
                text: row.document,
                meta: BTreeMap::new(),
            };
            if let Some(d) = &row.domain {
                document.meta.insert("domain".into(), d.clone());
            }
            Ok(Example {
                document,
                instruction: row.instruction,
                response: row.response,
                domain: row.domain,
            })
        })
        .collect()
}

pub fn save_example_pool(pool: &[Example], path: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        document: &'a str,
        instruction: &'a str,
        response: &'a str,
        #[serde(skip_serializing_if = "Option::is_none")]
        domain: Option<&'a str>,
    }
    write_jsonl(
        path,
        pool.iter().map(|e| Row {
            document: &e.document.text,
            instruction: &e.instruction,
            response: &e.response,
            domain: e.domain.as_deref(),
        }),
    )
}

pub fn save_dataset(dataset: &GeneratedDataset, path: &Path) -> Result<()> {
    write_jsonl(path, &dataset.pairs)
}

/// Loads a dataset; the client id is the file stem.
pub fn load_dataset(path: &Path) -> Result<GeneratedDataset> {
    let rows: Vec<(usize, InstructionPair)> = read_jsonl(path)?;
    let mut pairs = Vec::with_capacity(rows.len());
    for (line, pair) in rows {
        if pair.kept && (pair.instruction.trim().is_empty() || pair.response.trim().is_empty()) {
            return Err(Error::MalformedLine {
                path: path.to_path_buf(),
                line,
                reason: "kept pair with empty instruction or response".into(),
            });
        }
        pairs.push(pair);
    }
    Ok(GeneratedDataset {
        client_id: client_id_of(path)?,
        pairs,
    })
}

pub fn load_references(path: &Path) -> Result<Vec<Reference>> {
    let rows: Vec<(usize, ReferenceRow)> = read_jsonl(path)?;
    unique_ids(
        rows.into_iter()
            .map(|(line, r)| Reference {
                id: r.id.unwrap_or_else(|| line.to_string()),
                instruction: r.instruction,
                reference: r.reference,
            })
            .collect(),
        |r| &r.id,
    )
}

pub fn save_references(refs: &[Reference], path: &Path) -> Result<()> {
    write_jsonl(
        path,
        refs.iter().map(|r| {
            serde_json::json!({"id": r.id, "instruction": r.instruction, "reference": r.reference})
        }),
    )
}

pub fn load_responses(path: &Path) -> Result<Vec<Response>> {
    let rows: Vec<(usize, ResponseRow)> = read_jsonl(path)?;
    unique_ids(
        rows.into_iter()
            .map(|(line, r)| Response {
                id: r.id.unwrap_or_else(|| line.to_string()),
                response: r.response,
            })
            .collect(),
        |r| &r.id,
    )
}

pub fn save_responses(responses: &[Response], path: &Path) -> Result<()> {
    write_jsonl(
        path,
        responses
            .iter()
            .map(|r| serde_json::json!({"id": r.id, "response": r.response})),
    )
}

fn unique_ids<T>(rows: Vec<T>, id: impl Fn(&T) -> &String) -> Result<Vec<T>> {
    let mut seen = HashSet::new();
    for r in &rows {
        if !seen.insert(id(r).clone()) {
            return Err(Error::DuplicateId(id(r).clone()));
        }
    }
    Ok(rows)
}
