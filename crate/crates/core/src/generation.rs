//! Few-shot prompt rendering, completion parsing and the generation backend
//! contract.

use std::fmt;
use std::time::Duration;

use crate::config::GenerationConfig;
use crate::error::{Error, Result};
use crate::retrieval::SelectedExamples;
use crate::types::{Document, InstructionPair};

/// The instruction paragraph that opens every prompt. Line breaks and the
/// trailing spaces before them are part of the template.
pub const DEFAULT_HEADER: &str = "Given the next [document], create a [question] and [answer] pair that \n\
are grounded in the main point of the document, don't add any \n\
additional information that is not in the document. The [question] is \n\
by an information-seeking user and the [answer] is provided by a \n\
helping AI Agent.";

pub const DOCUMENT_MARKER: &str = "[document]:";
pub const QUESTION_MARKER: &str = "[question]:";
pub const ANSWER_MARKER: &str = "[answer]:";
pub const RESPONSE_MARKER: &str = "### Response:";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub header: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            header: DEFAULT_HEADER.to_string(),
        }
    }
}

impl PromptTemplate {
    /// Header, then one block per example, then the open target block.
    /// Marker strings inside documents are not escaped.
    pub fn render(&self, selected: &SelectedExamples, target: &Document) -> String {
        let mut out = String::with_capacity(self.header.len() + 256 * (selected.len() + 1));
        out.push_str(&self.header);
        out.push_str("\n\n");
        for ex in &selected.examples {
            push_example(&mut out, &ex.document.text, &ex.instruction, &ex.response);
        }
        out.push_str(DOCUMENT_MARKER);
        out.push(' ');
        out.push_str(&target.text);
        out.push_str("\n\n");
        out.push_str(RESPONSE_MARKER);
        out.push('\n');
        out
    }
}

fn push_example(out: &mut String, document: &str, instruction: &str, response: &str) {
    for piece in [
        DOCUMENT_MARKER,
        " ",
        document,
        "\n\n",
        RESPONSE_MARKER,
        "\n",
        QUESTION_MARKER,
        " ",
        instruction,
        "\n",
        ANSWER_MARKER,
        " ",
        response,
        "\n\n",
    ] {
        out.push_str(piece);
    }
}

pub fn render_prompt(header: &str, selected: &SelectedExamples, target: &Document) -> String {
    PromptTemplate {
        header: header.to_string(),
    }
    .render(selected, target)
}

/// `"[question]: x\n[answer]: y"`, the shape [`parse_completion`] accepts.
pub fn format_pair(instruction: &str, response: &str) -> String {
    format!("{QUESTION_MARKER} {instruction}\n{ANSWER_MARKER} {response}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParseFailure {
    MissingQuestion,
    MissingAnswer,
    DuplicateMarker,
    EmptyField,
    WrongOrder,
}

impl ParseFailure {
    pub fn as_str(&self) -> &'static str {
        match self {
            ParseFailure::MissingQuestion => "missing_question",
            ParseFailure::MissingAnswer => "missing_answer",
            ParseFailure::DuplicateMarker => "duplicate_marker",
            ParseFailure::EmptyField => "empty_field",
            ParseFailure::WrongOrder => "wrong_order",
        }
    }
}

impl fmt::Display for ParseFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Extracts the pair from a raw completion. Text before the question marker
/// is discarded; both fields are trimmed.
pub fn parse_completion(raw: &str, source_doc_id: &str) -> Result<InstructionPair, ParseFailure> {
    let questions: Vec<usize> = raw.match_indices(QUESTION_MARKER).map(|(i, _)| i).collect();
    let answers: Vec<usize> = raw.match_indices(ANSWER_MARKER).map(|(i, _)| i).collect();
    let (q, a) = match (questions.as_slice(), answers.as_slice()) {
        ([], _) => return Err(ParseFailure::MissingQuestion),
        (_, []) => return Err(ParseFailure::MissingAnswer),
        ([q], [a]) => (*q, *a),
        _ => return Err(ParseFailure::DuplicateMarker),
    };
    if a < q {
        return Err(ParseFailure::WrongOrder);
    }
    let instruction = raw[q + QUESTION_MARKER.len()..a].trim();
    let response = raw[a + ANSWER_MARKER.len()..].trim();
    if instruction.is_empty() || response.is_empty() {
        return Err(ParseFailure::EmptyField);
    }
    Ok(InstructionPair::new(instruction, response, source_doc_id))
}

/// A text-completion model.
pub trait GenerationBackend: Send + Sync {
    fn complete(
        &self,
        prompt: &str,
        temperature: f32,
        max_tokens: u32,
        seed: Option<u64>,
    ) -> Result<String>;
}

/// Deterministic offline generator.
///
/// It reads the target document back out of the prompt and answers
/// `"[question]: What is the main point of {first 8 words}?\n[answer]:
/// {first sentence}"`. Temperature and seed are ignored.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockGenerator;

impl MockGenerator {
    pub fn respond_to(target: &str) -> String {
        let head: Vec<&str> = target.split_whitespace().take(8).collect();
        format!(
            "{QUESTION_MARKER} What is the main point of {}?\n{ANSWER_MARKER} {}",
            head.join(" "),
            first_sentence(target)
        )
    }
}

/// Text up to and including the first '.', '!' or '?', trimmed; the whole
/// text when there is no terminator.
pub fn first_sentence(text: &str) -> &str {
    match text.find(['.', '!', '?']) {
        Some(end) => text[..=end].trim(),
        None => text.trim(),
    }
}

/// The target document of a rendered prompt.
pub fn target_of_prompt(prompt: &str) -> &str {
    let open = format!("{DOCUMENT_MARKER} ");
    let tail = format!("\n\n{RESPONSE_MARKER}\n");
    let body = prompt.strip_suffix(tail.as_str()).unwrap_or(prompt);
    match body.rfind(open.as_str()) {
        Some(i) => &body[i + open.len()..],
        None => body,
    }
}

impl GenerationBackend for MockGenerator {
    fn complete(&self, prompt: &str, _: f32, _: u32, _: Option<u64>) -> Result<String> {
        Ok(Self::respond_to(target_of_prompt(prompt)))
    }
}

fn retryable(e: &Error) -> bool {
    match e {
        Error::BackendUnreachable(_) => true,
        Error::BackendError { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

/// Runs `call` up to `1 + max_retries` times, sleeping `base`, `2·base`, ...
/// between attempts. Only transport failures, 429 and 5xx are retried.
pub fn with_retries<T>(
    max_retries: u32,
    base: Duration,
    mut call: impl FnMut() -> Result<T>,
) -> Result<T> {
    let mut attempt = 0;
    loop {
        match call() {
            Err(e) if retryable(&e) && attempt < max_retries => {
                let wait = base.saturating_mul(1u32 << attempt.min(16));
                log::debug!("attempt {} failed ({e}); retrying in {wait:?}", attempt + 1);
                std::thread::sleep(wait);
                attempt += 1;
            }
            other => return other,
        }
    }
}

/// Renders the prompt for `target` and returns the backend's raw,
/// untrimmed completion.
pub fn generate_pair(
    template: &PromptTemplate,
    target: &Document,
    selected: &SelectedExamples,
    backend: &dyn GenerationBackend,
    config: &GenerationConfig,
    seed: Option<u64>,
) -> Result<String> {
    let prompt = template.render(selected, target);
    with_retries(
        config.max_retries,
        Duration::from_millis(config.backoff_ms),
        || backend.complete(&prompt, config.temperature, config.max_tokens, seed),
    )
}
