//! The collaboration loop.
//!
//! Each step the local agent may first describe its surroundings and ask the
//! global agent for a plan (depending on [`PlanStyle`]), then picks an action.
//! A replan request, while budget remains, triggers a from-scratch plan and a
//! fresh decision at the same step; with the budget spent it switches the
//! episode to single-agent operation instead. Only moves advance the step
//! counter.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{
    ActionInput, AgentError, CallScope, DecisionKind, GlobalAgent, GlobalPlan, LocalAgent, ReplanContext,
};
use crate::annotate::{annotate_trajectory, check_coverage, AnnotateError, FloorImage, MarkedMapSet};
use crate::episode::{Budget, Episode, EpisodeError};
use crate::llm::{CallKind, ChatBackend, DEFAULT_MAX_TOKENS, DEFAULT_TEMPERATURE};
use crate::prompts::PromptTemplates;
use crate::scene::{
    apply_move, candidate_actions, frontal_slice, panoramic_observation, AgentPose, SceneGraph, ViewDescriptor,
};
use crate::trace::{
    AgentMessage, EpisodeTrace, MessageKind, MessagePayload, StepEvent, StepRecord, Termination, TraceHeader,
    TraceSummary, STEP_COUNTING, TRACE_FORMAT,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanStyle {
    /// No global agent.
    None,
    /// One plan before the first move.
    Static,
    /// A fresh plan at every step.
    #[default]
    Dynamic,
}

impl std::str::FromStr for PlanStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(PlanStyle::None),
            "static" => Ok(PlanStyle::Static),
            "dynamic" => Ok(PlanStyle::Dynamic),
            other => Err(format!(
                "unknown plan style {other:?} (expected none, static or dynamic)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub plan_style: PlanStyle,
    pub replan_enabled: bool,
    pub budget: Budget,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            plan_style: PlanStyle::Dynamic,
            replan_enabled: true,
            budget: Budget::default(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), RunError> {
        if self.plan_style == PlanStyle::None && self.replan_enabled {
            return Err(RunError::Config("replan requires a planner (plan style none)".into()));
        }
        if self.budget.max_steps == 0 {
            return Err(RunError::Config("max_steps must be positive".into()));
        }
        if self.max_tokens == 0 {
            return Err(RunError::Config("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error("top-down maps: {0}")]
    Maps(#[from] AnnotateError),
}

/// Source of episode wall time in seconds.
pub trait Clock: Send + Sync {
    fn now(&self) -> f64;
}

#[derive(Debug)]
pub struct SystemClock(Instant);

impl Default for SystemClock {
    fn default() -> Self {
        Self(Instant::now())
    }
}

impl Clock for SystemClock {
    fn now(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// A clock that never advances; for replayed runs whose traces must not
/// depend on machine speed.
#[derive(Debug, Default, Clone, Copy)]
pub struct FrozenClock;

impl Clock for FrozenClock {
    fn now(&self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapPurpose {
    Planning,
    Replan,
}

/// Receives every marked map set handed to the global agent.
pub trait MapSink: Sync {
    fn maps(&self, episode: &str, step: u32, purpose: MapPurpose, maps: &MarkedMapSet);
}

/// `step (1): {a_1}, step (2): {a_2}, ...`, or `None` before the first move.
pub fn format_history<S: AsRef<str>>(history: &[(S, S)]) -> String {
    if history.is_empty() {
        return "None".to_string();
    }
    history
        .iter()
        .enumerate()
        .map(|(i, (_, action))| format!("step ({}): {{{}}}", i + 1, action.as_ref()))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Visited places, in first-visit order, with the places each connects to.
pub fn format_map<S: AsRef<str>>(graph: &SceneGraph, trajectory: &[S]) -> String {
    let mut seen: Vec<&str> = Vec::new();
    for id in trajectory {
        if !seen.contains(&id.as_ref()) {
            seen.push(id.as_ref());
        }
    }
    let lines: Vec<String> = seen
        .iter()
        .filter_map(|id| {
            let neighbors = graph.neighbors(id).ok()?;
            let names: Vec<&str> = neighbors.iter().map(|(n, _)| *n).collect();
            Some(format!(
                "Place {id} connects to {}",
                if names.is_empty() {
                    "nothing".to_string()
                } else {
                    names.join(", ")
                }
            ))
        })
        .collect();
    if lines.is_empty() {
        "None".to_string()
    } else {
        lines.join("\n")
    }
}

/// Everything shared by the episodes of one scene.
pub struct Navigator<'a> {
    pub graph: &'a SceneGraph,
    /// Per-floor top-down maps; may be empty when no planner is used.
    pub floors: &'a [FloorImage],
    pub templates: &'a PromptTemplates,
    pub backend: &'a dyn ChatBackend,
    pub clock: &'a dyn Clock,
    pub map_sink: Option<&'a dyn MapSink>,
}

enum StepOutcome {
    Moved,
    Stopped,
}

struct EpisodeState<'s> {
    scope: CallScope<'s>,
    pose: AgentPose,
    trajectory: Vec<String>,
    history: Vec<(String, String)>,
    plan: Option<GlobalPlan>,
    plans_seen: Vec<String>,
    replans_used: u32,
    fallback: bool,
    nonconforming: u32,
}

impl<'a> Navigator<'a> {
    pub fn new(
        graph: &'a SceneGraph,
        floors: &'a [FloorImage],
        templates: &'a PromptTemplates,
        backend: &'a dyn ChatBackend,
        clock: &'a dyn Clock,
    ) -> Self {
        Self {
            graph,
            floors,
            templates,
            backend,
            clock,
            map_sink: None,
        }
    }

    pub fn with_map_sink(mut self, sink: &'a dyn MapSink) -> Self {
        self.map_sink = Some(sink);
        self
    }

    /// Runs one episode to termination. Errors are reserved for invalid
    /// inputs; failures during the episode end it and are recorded in the
    /// trace.
    pub fn run_episode(
        &self,
        episode: &Episode,
        config: &EpisodeConfig,
        run_label: &str,
    ) -> Result<EpisodeTrace, RunError> {
        config.validate()?;
        episode.validate(self.graph)?;
        if config.plan_style != PlanStyle::None {
            if self.floors.is_empty() {
                return Err(RunError::Config(format!("scan {} has no top-down maps", episode.scan)));
            }
            check_coverage(self.floors, self.graph.viewpoints().iter().map(|v| v.id.as_str()))?;
        }

        let global = GlobalAgent::new(self.templates, episode.mode);
        let local = LocalAgent::new(self.templates);
        let started = self.clock.now();
        let mut state = EpisodeState {
            scope: CallScope::new(self.backend, episode.id.clone())
                .with_generation(config.temperature, config.max_tokens),
            pose: AgentPose::new(episode.start(), episode.heading),
            trajectory: vec![episode.start().to_string()],
            history: Vec::new(),
            plan: None,
            plans_seen: Vec::new(),
            replans_used: 0,
            fallback: false,
            nonconforming: 0,
        };
        let mut steps = Vec::new();
        let mut error = None;
        let mut infrastructure_error = false;
        let mut t = 0u32;
        let termination = loop {
            if t >= config.budget.max_steps {
                break Termination::StepCap;
            }
            state.scope.set_step(t);
            let mut record = StepRecord {
                step: t,
                pose: state.pose.clone(),
                map_step_index: None,
                plan: None,
                events: Vec::new(),
                replans_consumed: state.replans_used,
                fallback: state.fallback,
            };
            let outcome = self.step(&global, &local, episode, config, &mut state, &mut record, t);
            record.replans_consumed = state.replans_used;
            record.fallback = state.fallback;
            match outcome {
                Ok(StepOutcome::Moved) => {
                    steps.push(record);
                    t += 1;
                }
                Ok(StepOutcome::Stopped) => {
                    steps.push(record);
                    break Termination::Stopped;
                }
                Err(e) => {
                    log::warn!("episode {} ended at step {t}: {e}", episode.id);
                    infrastructure_error = !e.is_model_output();
                    record.events.push(StepEvent::Failure { message: e.to_string() });
                    error = Some(e.to_string());
                    steps.push(record);
                    break Termination::ParseFailure;
                }
            }
        };

        let mut usage = state.scope.into_ledger();
        usage.wall_time = (self.clock.now() - started).max(0.0);
        Ok(EpisodeTrace {
            header: TraceHeader {
                format: TRACE_FORMAT,
                run_label: run_label.to_string(),
                episode: episode.clone(),
                config: *config,
                step_counting: STEP_COUNTING.to_string(),
            },
            steps,
            summary: TraceSummary {
                termination,
                final_pose: state.pose,
                trajectory: state.trajectory,
                moves: t,
                replans_used: state.replans_used,
                fallback_engaged: state.fallback,
                nonconforming_replans: state.nonconforming,
                usage,
                error,
                infrastructure_error,
            },
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn step(
        &self,
        global: &GlobalAgent<'_>,
        local: &LocalAgent<'_>,
        episode: &Episode,
        config: &EpisodeConfig,
        state: &mut EpisodeState<'_>,
        record: &mut StepRecord,
        t: u32,
    ) -> Result<StepOutcome, AgentError> {
        let pano = panoramic_observation(self.graph, &state.pose)?;
        let space = candidate_actions(self.graph, &state.pose)?;
        let plan_now = !state.fallback
            && match config.plan_style {
                PlanStyle::None => false,
                PlanStyle::Static => t == 0,
                PlanStyle::Dynamic => true,
            };
        if plan_now {
            let obs = local.describe_location(&mut state.scope, &frontal_slice(&pano)?)?;
            record.events.push(message(
                MessageKind::PlanningRequest,
                t,
                MessagePayload::Observation {
                    text: obs.text.clone(),
                    target: None,
                },
            ));
            let maps = self.render(episode, state, t, MapPurpose::Planning)?;
            record.map_step_index = Some(maps.step_index);
            let plan = global.develop_plan(
                &mut state.scope,
                &episode.instruction,
                &maps,
                state.plan.as_ref(),
                &obs.text,
            )?;
            record.events.push(message(
                MessageKind::PlanningResponse,
                t,
                MessagePayload::Plan { plan: plan.clone() },
            ));
            state.plans_seen.push(plan.render());
            state.plan = Some(plan);
        }

        loop {
            let presented = if state.fallback { None } else { state.plan.clone() };
            let history = format_history(&state.history);
            let map = format_map(self.graph, &state.trajectory);
            let input = ActionInput {
                instruction: &episode.instruction,
                plan: presented.as_ref(),
                replan_enabled: config.replan_enabled,
                history: &history,
                map: &map,
                space: &space,
                pano: &pano,
            };
            let decision = local.decide_action(&mut state.scope, &input)?;
            match decision.kind {
                DecisionKind::Move => {
                    let label = decision.option_label.expect("move decisions carry a label");
                    let option = space.get(label).expect("parser checked the label").clone();
                    record.events.push(StepEvent::Decision {
                        decision,
                        target: Some(option.target.clone()),
                    });
                    record.plan = presented;
                    state.history.push((option.target.clone(), option.describe()));
                    state.pose = apply_move(self.graph, &state.pose, &option)?;
                    state.trajectory.push(option.target);
                    return Ok(StepOutcome::Moved);
                }
                DecisionKind::Stop => {
                    record.events.push(StepEvent::Decision { decision, target: None });
                    record.plan = presented;
                    return Ok(StepOutcome::Stopped);
                }
                DecisionKind::Replan => {
                    record.events.push(StepEvent::Decision { decision, target: None });
                    if state.replans_used < config.budget.max_replans {
                        state.replans_used += 1;
                        state.scope.set_replan_ordinal(state.replans_used);
                        let plan = self.replan_cycle(global, local, episode, state, record, &pano, t)?;
                        state.plans_seen.push(plan.render());
                        state.plan = Some(plan);
                    } else {
                        state.fallback = true;
                        record.events.push(StepEvent::FallbackEngaged);
                        for text in &state.plans_seen {
                            state.scope.exclude(CallKind::Action, text.clone());
                        }
                    }
                }
            }
        }
    }

    /// Describe, extract the target, re-mark the maps at the current
    /// position, and plan from scratch.
    #[allow(clippy::too_many_arguments)]
    fn replan_cycle(
        &self,
        global: &GlobalAgent<'_>,
        local: &LocalAgent<'_>,
        episode: &Episode,
        state: &mut EpisodeState<'_>,
        record: &mut StepRecord,
        pano: &[ViewDescriptor],
        t: u32,
    ) -> Result<GlobalPlan, AgentError> {
        let obs = local.describe_location(&mut state.scope, &frontal_slice(pano)?)?;
        let target = global.extract_target(&mut state.scope, &episode.instruction);
        record.events.push(message(
            MessageKind::ReplanRequest,
            t,
            MessagePayload::Observation {
                text: obs.text.clone(),
                target: Some(target.clone()),
            },
        ));
        let maps = self.render(episode, state, t, MapPurpose::Replan)?;
        record.map_step_index = Some(maps.step_index);
        for text in &state.plans_seen {
            state.scope.exclude(CallKind::Replan, text.clone());
        }
        let ctx = ReplanContext {
            target,
            marked_maps: maps,
            local_obs: obs.text,
        };
        let plan = global.replan(&mut state.scope, &ctx)?;
        if plan.nonconforming_stop {
            state.nonconforming += 1;
        }
        record.events.push(message(
            MessageKind::ReplanResponse,
            t,
            MessagePayload::Plan { plan: plan.clone() },
        ));
        Ok(plan)
    }

    fn render(
        &self,
        episode: &Episode,
        state: &EpisodeState<'_>,
        t: u32,
        purpose: MapPurpose,
    ) -> Result<MarkedMapSet, AgentError> {
        let maps = annotate_trajectory(self.floors, &state.trajectory, &state.pose.viewpoint)?;
        if let Some(sink) = self.map_sink {
            sink.maps(&episode.id, t, purpose, &maps);
        }
        Ok(maps)
    }
}

fn message(kind: MessageKind, step: u32, payload: MessagePayload) -> StepEvent {
    StepEvent::Message(AgentMessage { kind, step, payload })
}
