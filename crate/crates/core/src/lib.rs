//! Federated instruction tuning from unstructured client corpora.
//!
//! Clients turn raw documents into instruction-response pairs with
//! retrieval-grounded few-shot prompting, filter them by format and by a
//! reward model, and then jointly fine-tune adapter parameters with
//! federated averaging. Every model-dependent step sits behind a trait with
//! a deterministic in-process implementation and an HTTP client.

pub mod checkpoint;
pub mod config;
pub mod corpus_io;
pub mod error;
pub mod evaluation;
pub mod federation;
pub mod filtering;
pub mod generation;
pub mod http;
pub mod pipeline;
pub mod retrieval;
pub mod rng;
pub mod tensor;
pub mod text;
pub mod types;

pub use error::{Error, Result};
pub use tensor::{ParameterSet, Tensor};
pub use types::{Document, Example, InstructionPair, SelectionPolicy};
