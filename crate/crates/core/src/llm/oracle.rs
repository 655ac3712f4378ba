//! Scripted backend that answers each call from a JSONL table.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{estimate_tokens, BackendError, CallKind, ChatBackend, CompletionRequest, CompletionResult};

/// One line of an oracle script. A record without `attempt` answers every
/// attempt that has no record of its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub episode: String,
    pub step: u32,
    pub kind: CallKind,
    #[serde(default)]
    pub replan_ordinal: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempt: Option<u32>,
    pub response: String,
}

#[derive(Debug, Error)]
pub enum OracleScriptError {
    #[error("cannot read oracle script {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("oracle script line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("oracle script line {line} duplicates an earlier record")]
    Duplicate { line: usize },
}

type Slot = (String, u32, CallKind, u32);

#[derive(Debug, Clone, Default)]
pub struct OracleBackend {
    table: BTreeMap<Slot, BTreeMap<Option<u32>, String>>,
}

impl OracleBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: impl IntoIterator<Item = OracleRecord>) -> Result<Self, OracleScriptError> {
        let mut oracle = Self::new();
        for (i, record) in records.into_iter().enumerate() {
            if !oracle.insert(record) {
                return Err(OracleScriptError::Duplicate { line: i + 1 });
            }
        }
        Ok(oracle)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, OracleScriptError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| OracleScriptError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse_jsonl(&text)
    }

    pub fn parse_jsonl(text: &str) -> Result<Self, OracleScriptError> {
        let mut oracle = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: OracleRecord =
                serde_json::from_str(line).map_err(|source| OracleScriptError::Parse { line: i + 1, source })?;
            if !oracle.insert(record) {
                return Err(OracleScriptError::Duplicate { line: i + 1 });
            }
        }
        Ok(oracle)
    }

    /// Adds a record; returns false if its slot is already taken.
    pub fn insert(&mut self, record: OracleRecord) -> bool {
        let slot = (record.episode, record.step, record.kind, record.replan_ordinal);
        let entries = self.table.entry(slot).or_default();
        if entries.contains_key(&record.attempt) {
            return false;
        }
        entries.insert(record.attempt, record.response);
        true
    }

    pub fn len(&self) -> usize {
        self.table.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn records(&self) -> Vec<OracleRecord> {
        self.table
            .iter()
            .flat_map(|((episode, step, kind, ordinal), entries)| {
                entries.iter().map(move |(attempt, response)| OracleRecord {
                    episode: episode.clone(),
                    step: *step,
                    kind: *kind,
                    replan_ordinal: *ordinal,
                    attempt: *attempt,
                    response: response.clone(),
                })
            })
            .collect()
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for record in self.records() {
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

impl ChatBackend for OracleBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        request.validate()?;
        let key = &request.key;
        let slot = (key.episode.clone(), key.step, key.kind, key.replan_ordinal);
        let text = self
            .table
            .get(&slot)
            .and_then(|entries| entries.get(&Some(key.attempt)).or_else(|| entries.get(&None)))
            .ok_or_else(|| BackendError::OracleMiss(key.clone()))?;
        Ok(CompletionResult {
            text: text.clone(),
            prompt_tokens: estimate_tokens(&request.serialized_text()),
            completion_tokens: estimate_tokens(text),
            latency: 0.0,
            estimated: true,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{CallKey, ChatMessage};

    fn request(episode: &str, step: u32, kind: CallKind, attempt: u32) -> CompletionRequest {
        let mut r = CompletionRequest::new(kind, vec![ChatMessage::user("where now?")]);
        r.key = CallKey {
            episode: episode.into(),
            step,
            kind,
            replan_ordinal: 0,
            attempt,
        };
        r
    }

    const SCRIPT: &str = r#"
{"episode":"e1","step":0,"kind":"action","replan_ordinal":0,"response":"Thought: go.\nAction: A"}
{"episode":"e1","step":1,"kind":"action","replan_ordinal":0,"response":"garbled"}
{"episode":"e1","step":1,"kind":"action","replan_ordinal":0,"attempt":1,"response":"Action: stop"}
"#;

    #[test]
    fn lookup_returns_stored_text_verbatim() {
        let oracle = OracleBackend::parse_jsonl(SCRIPT).unwrap();
        let r = oracle.complete(&request("e1", 0, CallKind::Action, 0)).unwrap();
        assert_eq!(r.text, "Thought: go.\nAction: A");
        assert_eq!(r.latency, 0.0);
        assert_eq!(r, oracle.complete(&request("e1", 0, CallKind::Action, 0)).unwrap());
    }

    #[test]
    fn attempt_specific_records_win() {
        let oracle = OracleBackend::parse_jsonl(SCRIPT).unwrap();
        assert_eq!(
            oracle.complete(&request("e1", 1, CallKind::Action, 0)).unwrap().text,
            "garbled"
        );
        assert_eq!(
            oracle.complete(&request("e1", 1, CallKind::Action, 1)).unwrap().text,
            "Action: stop"
        );
        assert_eq!(
            oracle.complete(&request("e1", 1, CallKind::Action, 2)).unwrap().text,
            "garbled"
        );
    }

    #[test]
    fn miss_is_distinguishable() {
        let oracle = OracleBackend::parse_jsonl(SCRIPT).unwrap();
        let err = oracle.complete(&request("e1", 5, CallKind::Planning, 0)).unwrap_err();
        assert!(matches!(err, BackendError::OracleMiss(k) if k.step == 5));
    }

    #[test]
    fn duplicates_and_bad_lines_are_reported() {
        let dup = format!("{}\n{}", SCRIPT.trim(), SCRIPT.trim().lines().next().unwrap());
        assert!(matches!(
            OracleBackend::parse_jsonl(&dup),
            Err(OracleScriptError::Duplicate { line: 4 })
        ));
        assert!(matches!(
            OracleBackend::parse_jsonl("{nope"),
            Err(OracleScriptError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn script_round_trips() {
        let oracle = OracleBackend::parse_jsonl(SCRIPT).unwrap();
        let mut buf = Vec::new();
        oracle.write_jsonl(&mut buf).unwrap();
        let again = OracleBackend::parse_jsonl(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(oracle.records(), again.records());
        assert_eq!(again.len(), 3);
    }
}
