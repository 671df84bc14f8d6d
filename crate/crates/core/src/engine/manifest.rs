//! Declarative workflow kinds.
//!
//! ```text
//! kind: flood
//! entry_queue: ingest
//! stages:
//!   fetch: [ingest, fetch_forecast]
//!   simulate: [run, launch_model]
//! ```
//!
//! Each stage maps to `[queue, handler]`, where `handler` is a symbol looked
//! up in a [`HandlerRegistry`]. Several kinds may share one file, separated
//! by `---`.

use std::collections::BTreeMap;

use super::{EngineError, HandlerResult, StageContext, StageHandler, WorkflowKind, WorkflowStage};
use crate::syntax::{parse_documents, Node, Pos, SyntaxError};

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error(transparent)]
    Syntax(#[from] SyntaxError),
    #[error("unknown handler `{symbol}` for stage `{stage}` at {pos}")]
    UnknownHandler { stage: String, symbol: String, pos: Pos },
    #[error(transparent)]
    Engine(EngineError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageDecl {
    pub stage_name: String,
    pub queue_name: String,
    pub handler: String,
    pub pos: Pos,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KindManifest {
    pub kind: String,
    pub entry_queue: String,
    pub stages: Vec<StageDecl>,
}

/// Named stage handlers available to manifests.
#[derive(Default, Clone)]
pub struct HandlerRegistry {
    handlers: BTreeMap<String, StageHandler>,
}

impl HandlerRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, symbol: &str, handler: F) -> &mut Self
    where
        F: Fn(&StageContext<'_>) -> HandlerResult + Send + Sync + 'static,
    {
        self.handlers.insert(symbol.to_string(), std::sync::Arc::new(handler));
        self
    }

    pub fn get(&self, symbol: &str) -> Option<StageHandler> {
        self.handlers.get(symbol).cloned()
    }

    pub fn symbols(&self) -> impl Iterator<Item = &str> {
        self.handlers.keys().map(String::as_str)
    }
}

impl KindManifest {
    /// Resolve handler symbols and validate the resulting kind.
    pub fn instantiate(&self, handlers: &HandlerRegistry) -> Result<WorkflowKind, ManifestError> {
        let stages = self
            .stages
            .iter()
            .map(|s| {
                let handler = handlers.get(&s.handler).ok_or_else(|| ManifestError::UnknownHandler {
                    stage: s.stage_name.clone(),
                    symbol: s.handler.clone(),
                    pos: s.pos,
                })?;
                Ok(WorkflowStage {
                    stage_name: s.stage_name.clone(),
                    queue_name: s.queue_name.clone(),
                    handler,
                })
            })
            .collect::<Result<Vec<_>, ManifestError>>()?;
        let kind = WorkflowKind::new(self.kind.clone(), stages, self.entry_queue.clone());
        kind.validate().map_err(ManifestError::Engine)?;
        Ok(kind)
    }
}

pub fn parse_manifest(text: &str) -> Result<Vec<KindManifest>, ManifestError> {
    parse_documents(text)?
        .iter()
        .filter(|doc| !doc.is_null() && !doc.as_map().is_some_and(|m| m.entries.is_empty()))
        .map(parse_kind)
        .collect()
}

fn parse_kind(doc: &Node) -> Result<KindManifest, ManifestError> {
    let map = doc.expect_map("workflow kind")?;
    for (key, pos, _) in &map.entries {
        if !matches!(key.as_str(), "kind" | "entry_queue" | "stages") {
            return Err(SyntaxError::new(*pos, format!("unknown field `{key}`")).into());
        }
    }
    let required = |key: &str| {
        map.get(key)
            .ok_or_else(|| SyntaxError::new(map.pos, format!("missing field `{key}`")))
    };
    let kind = non_empty(required("kind")?, "kind")?;
    let entry_queue = non_empty(required("entry_queue")?, "entry_queue")?;
    let stages_node = required("stages")?.expect_map("stages")?;
    let mut stages = Vec::new();
    for (stage_name, pos, node) in &stages_node.entries {
        let pair = node
            .as_seq()
            .filter(|s| s.len() == 2)
            .ok_or_else(|| SyntaxError::new(*pos, format!("stage `{stage_name}`: expected [queue, handler]")))?;
        stages.push(StageDecl {
            stage_name: stage_name.clone(),
            queue_name: non_empty(&pair[0], "queue")?,
            handler: non_empty(&pair[1], "handler")?,
            pos: *pos,
        });
    }
    Ok(KindManifest {
        kind,
        entry_queue,
        stages,
    })
}

fn non_empty(node: &Node, what: &str) -> Result<String, SyntaxError> {
    let s = node.expect_scalar(what)?;
    if s.text.is_empty() || s.is_null() {
        return Err(SyntaxError::new(s.pos, format!("{what} must not be empty")));
    }
    Ok(s.text.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO: &str = "kind: a\nentry_queue: q1\nstages:\n  s1: [q1, h]\n  s2: [q2, h]\n---\nkind: b\nentry_queue: x\nstages:\n  only: [x, h]\n";

    #[test]
    fn parses_multiple_kinds() {
        let kinds = parse_manifest(TWO).unwrap();
        assert_eq!(kinds.len(), 2);
        assert_eq!(kinds[0].stages[1].queue_name, "q2");
        assert_eq!(kinds[1].entry_queue, "x");
    }

    #[test]
    fn unknown_handler_is_reported() {
        let kinds = parse_manifest(TWO).unwrap();
        let err = kinds[0].instantiate(&HandlerRegistry::new()).unwrap_err();
        assert!(matches!(err, ManifestError::UnknownHandler { .. }));
    }

    #[test]
    fn entry_queue_must_be_bound() {
        let mut reg = HandlerRegistry::new();
        reg.register("h", |_| Ok(()));
        let kinds = parse_manifest("kind: a\nentry_queue: nope\nstages:\n  s: [q, h]\n").unwrap();
        assert!(matches!(
            kinds[0].instantiate(&reg),
            Err(ManifestError::Engine(EngineError::UnknownEntryQueue(_)))
        ));
    }

    #[test]
    fn rejects_malformed_stage() {
        assert!(parse_manifest("kind: a\nentry_queue: q\nstages:\n  s: [q]\n").is_err());
        assert!(parse_manifest("kind: a\nentry_queue: q\nstages:\n  s: q\n").is_err());
        assert!(parse_manifest("kind: a\nentry_queue: q\nstagez: {}\n").is_err());
    }
}
