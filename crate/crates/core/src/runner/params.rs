//! Flat parameter files: `key: scalar` or `key: [a, b, c]` per line.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::workflow::raw_value;
use super::RunnerError;
use crate::syntax::parse_document;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Provenance {
    Scenario,
    Machine,
}

/// An untyped value; types are checked against the skeleton when the
/// parameters are applied.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RawValue {
    Scalar { text: String, quoted: bool },
    /// (text, quoted) per element
    List(Vec<(String, bool)>),
}

impl RawValue {
    pub fn scalar(text: impl Into<String>) -> Self {
        RawValue::Scalar {
            text: text.into(),
            quoted: false,
        }
    }

    pub fn list<I, S>(items: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        RawValue::List(items.into_iter().map(|s| (s.into(), false)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterSet {
    pub provenance: Provenance,
    pub bindings: BTreeMap<String, RawValue>,
}

impl ParameterSet {
    pub fn new(provenance: Provenance) -> Self {
        Self {
            provenance,
            bindings: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: RawValue) -> &mut Self {
        self.bindings.insert(key.to_string(), value);
        self
    }

    pub fn get(&self, key: &str) -> Option<&RawValue> {
        self.bindings.get(key)
    }
}

pub fn parse_parameters(text: &str, provenance: Provenance) -> Result<ParameterSet, RunnerError> {
    let doc = parse_document(text)?;
    let map = doc.expect_map("parameter file")?;
    let mut set = ParameterSet::new(provenance);
    for (key, _, node) in &map.entries {
        set.bindings.insert(key.clone(), raw_value(node, key)?);
    }
    Ok(set)
}
