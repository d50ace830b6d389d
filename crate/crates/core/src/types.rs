use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One piece of a client's unstructured text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self> {
        let doc = Self {
            id: id.into(),
            text: text.into(),
            meta: BTreeMap::new(),
        };
        doc.validate()?;
        Ok(doc)
    }

    pub fn with_domain(mut self, domain: impl Into<String>) -> Self {
        self.meta.insert("domain".into(), domain.into());
        self
    }

    pub fn domain(&self) -> Option<&str> {
        self.meta.get("domain").map(String::as_str)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::InvalidDocument("empty id".into()));
        }
        if self.text.trim().is_empty() {
            return Err(Error::InvalidDocument(format!(
                "document {:?} has blank text",
                self.id
            )));
        }
        Ok(())
    }
}

/// A worked example from the server-distributed pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub document: Document,
    pub instruction: String,
    pub response: String,
    pub domain: Option<String>,
}

/// A generated (or annotated) instruction-response pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionPair {
    pub instruction: String,
    pub response: String,
    pub source_doc_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_score: Option<f32>,
    pub kept: bool,
}

impl InstructionPair {
    pub fn new(
        instruction: impl Into<String>,
        response: impl Into<String>,
        source_doc_id: impl Into<String>,
    ) -> Self {
        Self {
            instruction: instruction.into(),
            response: response.into(),
            source_doc_id: source_doc_id.into(),
            reward_score: None,
            kept: true,
        }
    }
}

/// How the k few-shot examples are chosen for a target document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SelectionPolicy {
    /// Top-k pool entries by document similarity.
    #[default]
    Retrieval,
    RandomInDomain,
    /// The first k in-domain pool entries, identical for every target.
    FixedInDomain,
    RandomOutDomain,
    /// `in_count` in-domain draws followed by `out_count` out-of-domain draws.
    RandomMixed { in_count: usize, out_count: usize },
}

impl SelectionPolicy {
    pub fn is_domain_aware(&self) -> bool {
        !matches!(self, SelectionPolicy::Retrieval)
    }
}

impl fmt::Display for SelectionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SelectionPolicy::Retrieval => f.write_str("retrieval"),
            SelectionPolicy::RandomInDomain => f.write_str("random-in-domain"),
            SelectionPolicy::FixedInDomain => f.write_str("fixed-in-domain"),
            SelectionPolicy::RandomOutDomain => f.write_str("random-out-domain"),
            SelectionPolicy::RandomMixed {
                in_count,
                out_count,
            } => write!(f, "mixed:{in_count}:{out_count}"),
        }
    }
}

impl FromStr for SelectionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retrieval" => Ok(SelectionPolicy::Retrieval),
            "random-in-domain" => Ok(SelectionPolicy::RandomInDomain),
            "fixed-in-domain" => Ok(SelectionPolicy::FixedInDomain),
            "random-out-domain" => Ok(SelectionPolicy::RandomOutDomain),
            other => {
                let bad = || Error::Config(format!("unknown selection policy {other:?}"));
                let rest = other.strip_prefix("mixed:").ok_or_else(bad)?;
                let (a, b) = rest.split_once(':').ok_or_else(bad)?;
                Ok(SelectionPolicy::RandomMixed {
                    in_count: a.parse().map_err(|_| bad())?,
                    out_count: b.parse().map_err(|_| bad())?,
                })
            }
        }
    }
}

impl Serialize for SelectionPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SelectionPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn document_invariants() {
        assert!(Document::new("", "text").is_err());
        assert!(Document::new("a", "  \n").is_err());
        assert!(Document::new("a", "x").is_ok());
    }

    #[test]
    fn policy_strings() {
        for p in [
            SelectionPolicy::Retrieval,
            SelectionPolicy::RandomInDomain,
            SelectionPolicy::FixedInDomain,
            SelectionPolicy::RandomOutDomain,
            SelectionPolicy::RandomMixed {
                in_count: 1,
                out_count: 2,
            },
        ] {
            assert_eq!(p.to_string().parse::<SelectionPolicy>().unwrap(), p);
        }
        assert!("mixed:1".parse::<SelectionPolicy>().is_err());
        assert!("nearest".parse::<SelectionPolicy>().is_err());
    }
}
