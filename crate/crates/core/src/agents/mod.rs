//! The two cooperating agents.
//!
//! [`GlobalAgent`] sees the marked top-down maps and writes plans;
//! [`LocalAgent`] sees the panorama and picks actions. Both are stateless:
//! all episode state, including the call counters that make every model call
//! addressable, lives in a [`CallScope`] owned by the caller.

mod global;
mod local;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::llm::{
    BackendError, CallKey, CallKind, ChatBackend, CompletionRequest, CompletionResult, UsageLedger, DEFAULT_MAX_TOKENS,
    DEFAULT_TEMPERATURE,
};

pub use global::{
    parse_plan_response, split_subgoals, GlobalAgent, GlobalPlan, ParsedPlan, PlanOrigin, PlanParseError, ReplanContext,
};
pub use local::{
    normalize_description, parse_action_response, ActionInput, ActionParseError, DecisionKind, LocalAgent,
    LocalDecision, LocationDescription,
};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("unusable plan after retry: {0}")]
    PlanParse(#[from] PlanParseError),
    #[error("unusable action after retry: {0}")]
    ActionParse(#[from] ActionParseError),
    #[error("empty location description")]
    EmptyDescription,
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("{kind} request would carry excluded text")]
    Leak { kind: CallKind },
    #[error("cannot render maps: {0}")]
    Render(#[from] crate::annotate::AnnotateError),
    #[error(transparent)]
    Scene(#[from] crate::scene::SceneError),
}

impl AgentError {
    /// Failures of the model's output, as opposed to failures reaching it.
    pub fn is_model_output(&self) -> bool {
        matches!(
            self,
            AgentError::PlanParse(_) | AgentError::ActionParse(_) | AgentError::EmptyDescription
        )
    }
}

/// Model-call context for one episode: addressing, generation settings,
/// exclusion guards and usage accounting.
pub struct CallScope<'a> {
    backend: &'a dyn ChatBackend,
    episode: String,
    step: u32,
    replan_ordinal: u32,
    temperature: f64,
    max_tokens: u32,
    attempts: BTreeMap<(u32, CallKind, u32), u32>,
    exclusions: Vec<(CallKind, String)>,
    ledger: UsageLedger,
}

impl<'a> CallScope<'a> {
    pub fn new(backend: &'a dyn ChatBackend, episode: impl Into<String>) -> Self {
        Self {
            backend,
            episode: episode.into(),
            step: 0,
            replan_ordinal: 0,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            attempts: BTreeMap::new(),
            exclusions: Vec::new(),
            ledger: UsageLedger::default(),
        }
    }

    pub fn with_generation(mut self, temperature: f64, max_tokens: u32) -> Self {
        self.temperature = temperature;
        self.max_tokens = max_tokens;
        self
    }

    pub fn set_step(&mut self, step: u32) {
        self.step = step;
    }

    pub fn set_replan_ordinal(&mut self, ordinal: u32) {
        self.replan_ordinal = ordinal;
    }

    pub fn step(&self) -> u32 {
        self.step
    }

    /// Rejects any later request of `kind` whose text contains `text`.
    pub fn exclude(&mut self, kind: CallKind, text: impl Into<String>) {
        let text = text.into();
        if !text.trim().is_empty() {
            self.exclusions.push((kind, text));
        }
    }

    pub fn clear_exclusions(&mut self, kind: CallKind) {
        self.exclusions.retain(|(k, _)| *k != kind);
    }

    pub fn ledger(&self) -> &UsageLedger {
        &self.ledger
    }

    pub fn into_ledger(self) -> UsageLedger {
        self.ledger
    }

    fn next_key(&mut self, kind: CallKind) -> CallKey {
        let counter = self.attempts.entry((self.step, kind, self.replan_ordinal)).or_insert(0);
        let attempt = *counter;
        *counter += 1;
        CallKey {
            episode: self.episode.clone(),
            step: self.step,
            kind,
            replan_ordinal: self.replan_ordinal,
            attempt,
        }
    }

    /// Addresses, checks, sends and accounts one request.
    pub fn complete(&mut self, mut request: CompletionRequest) -> Result<CompletionResult, AgentError> {
        let kind = request.kind();
        if !self.exclusions.is_empty() {
            let text = request.serialized_text();
            if self
                .exclusions
                .iter()
                .any(|(k, s)| *k == kind && text.contains(s.as_str()))
            {
                return Err(AgentError::Leak { kind });
            }
        }
        request.key = self.next_key(kind);
        request.temperature = self.temperature;
        request.max_tokens = self.max_tokens;
        let result = self.backend.complete(&request)?;
        self.ledger.record(&request.key, &result);
        Ok(result)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ChatMessage, OracleBackend, OracleRecord};

    #[test]
    fn repeated_calls_get_increasing_attempts() {
        let oracle = OracleBackend::from_records((0..3).map(|a| OracleRecord {
            episode: "e".into(),
            step: 2,
            kind: CallKind::Action,
            replan_ordinal: 0,
            attempt: Some(a),
            response: format!("answer {a}"),
        }))
        .unwrap();
        let mut scope = CallScope::new(&oracle, "e");
        scope.set_step(2);
        for a in 0..3 {
            let r = scope
                .complete(CompletionRequest::new(CallKind::Action, vec![ChatMessage::user("q")]))
                .unwrap();
            assert_eq!(r.text, format!("answer {a}"));
        }
        assert_eq!(scope.ledger().calls.len(), 3);
        assert!(scope.ledger().is_consistent());
    }

    #[test]
    fn exclusion_guard_blocks_matching_requests() {
        let oracle = OracleBackend::new();
        let mut scope = CallScope::new(&oracle, "e");
        scope.exclude(CallKind::Replan, "1. old plan");
        let err = scope
            .complete(CompletionRequest::new(
                CallKind::Replan,
                vec![ChatMessage::user("here is 1. old plan")],
            ))
            .unwrap_err();
        assert!(matches!(err, AgentError::Leak { kind: CallKind::Replan }));
        assert!(scope.ledger().calls.is_empty());
    }
}
