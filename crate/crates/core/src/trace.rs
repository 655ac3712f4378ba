//! Episode traces and their JSONL form.
//!
//! A trace file holds one JSON object per line: a header, one record per
//! step, and a closing summary. Each line carries a `record` tag.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{GlobalPlan, LocalDecision};
use crate::episode::Episode;
use crate::llm::UsageLedger;
use crate::orchestrator::EpisodeConfig;
use crate::scene::AgentPose;

pub const TRACE_FORMAT: u32 = 1;
/// What the step budget counts.
pub const STEP_COUNTING: &str = "move-actions";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MessageKind {
    PlanningRequest,
    PlanningResponse,
    ReplanRequest,
    ReplanResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MessagePayload {
    Observation {
        text: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<String>,
    },
    Plan {
        plan: GlobalPlan,
    },
}

/// A message between the two agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentMessage {
    pub kind: MessageKind,
    pub step: u32,
    pub payload: MessagePayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum StepEvent {
    Message(AgentMessage),
    Decision {
        decision: LocalDecision,
        /// Viewpoint moved to, for move decisions.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<String>,
    },
    /// Replan requested with no budget left; single-agent operation from here on.
    FallbackEngaged,
    Failure {
        message: String,
    },
}

impl StepEvent {
    pub fn message_kind(&self) -> Option<MessageKind> {
        match self {
            StepEvent::Message(m) => Some(m.kind),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u32,
    pub pose: AgentPose,
    /// Step index of the marked maps the planner saw during this step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map_step_index: Option<usize>,
    /// Plan shown with the step's final decision.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<GlobalPlan>,
    pub events: Vec<StepEvent>,
    /// Replans used so far in the episode, at the end of the step.
    pub replans_consumed: u32,
    pub fallback: bool,
}

impl StepRecord {
    pub fn messages(&self) -> impl Iterator<Item = &AgentMessage> {
        self.events.iter().filter_map(|e| match e {
            StepEvent::Message(m) => Some(m),
            _ => None,
        })
    }

    pub fn decisions(&self) -> impl Iterator<Item = &LocalDecision> {
        self.events.iter().filter_map(|e| match e {
            StepEvent::Decision { decision, .. } => Some(decision),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Stopped,
    StepCap,
    ParseFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format: u32,
    pub run_label: String,
    pub episode: Episode,
    pub config: EpisodeConfig,
    pub step_counting: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub termination: Termination,
    pub final_pose: AgentPose,
    /// Viewpoints in visiting order, starting point first.
    pub trajectory: Vec<String>,
    pub moves: u32,
    pub replans_used: u32,
    pub fallback_engaged: bool,
    pub nonconforming_replans: u32,
    pub usage: UsageLedger,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// The episode ended because a backend could not be reached, not because
    /// of what the model said.
    #[serde(default)]
    pub infrastructure_error: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum TraceRecord {
    Header(TraceHeader),
    Step(StepRecord),
    Summary(TraceSummary),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub header: TraceHeader,
    pub steps: Vec<StepRecord>,
    pub summary: TraceSummary,
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("cannot access trace {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("trace line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error("malformed trace: {0}")]
    Structure(String),
}

impl EpisodeTrace {
    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        let mut line = |record: &TraceRecord| -> std::io::Result<()> {
            serde_json::to_writer(&mut out, record)?;
            out.write_all(b"\n")
        };
        line(&TraceRecord::Header(self.header.clone()))?;
        for step in &self.steps {
            line(&TraceRecord::Step(step.clone()))?;
        }
        line(&TraceRecord::Summary(self.summary.clone()))
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TraceError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()).map_err(|source| TraceError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read_jsonl(reader: impl BufRead) -> Result<Self, TraceError> {
        let mut header = None;
        let mut steps = Vec::new();
        let mut summary = None;
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|source| TraceError::Io {
                path: PathBuf::new(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let record: TraceRecord =
                serde_json::from_str(&line).map_err(|source| TraceError::Parse { line: i + 1, source })?;
            match record {
                TraceRecord::Header(h) if header.is_none() && steps.is_empty() => header = Some(h),
                TraceRecord::Step(s) if header.is_some() && summary.is_none() => steps.push(s),
                TraceRecord::Summary(s) if header.is_some() && summary.is_none() => summary = Some(s),
                _ => return Err(TraceError::Structure(format!("unexpected record on line {}", i + 1))),
            }
        }
        let header = header.ok_or_else(|| TraceError::Structure("missing header".into()))?;
        let summary = summary.ok_or_else(|| TraceError::Structure("missing summary".into()))?;
        Ok(Self { header, steps, summary })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TraceError> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|source| TraceError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::read_jsonl(std::io::BufReader::new(file)).map_err(|e| match e {
            TraceError::Io { source, .. } => TraceError::Io {
                path: path.to_path_buf(),
                source,
            },
            other => other,
        })
    }

    /// Every step's events flattened in order.
    pub fn events(&self) -> impl Iterator<Item = (u32, &StepEvent)> {
        self.steps
            .iter()
            .flat_map(|s| s.events.iter().map(move |e| (s.step, e)))
    }

    pub fn messages(&self) -> impl Iterator<Item = &AgentMessage> {
        self.steps.iter().flat_map(StepRecord::messages)
    }

    pub fn move_count(&self) -> usize {
        self.steps
            .iter()
            .flat_map(StepRecord::decisions)
            .filter(|d| d.kind == crate::agents::DecisionKind::Move)
            .count()
    }
}
