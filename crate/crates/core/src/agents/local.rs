use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AgentError, CallScope, GlobalPlan};
use crate::llm::{CallKind, ChatMessage, CompletionRequest, ImageRef, Part, Role};
use crate::prompts::{PromptTemplates, Vars};
use crate::scene::{frontal_slice, ActionSpace, ViewDescriptor, AZIMUTH_SLOTS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    Move,
    Stop,
    Replan,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalDecision {
    pub kind: DecisionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub option_label: Option<char>,
    pub thought: String,
}

impl LocalDecision {
    pub fn stop(thought: impl Into<String>) -> Self {
        Self {
            kind: DecisionKind::Stop,
            option_label: None,
            thought: thought.into(),
        }
    }

    pub fn replan(thought: impl Into<String>) -> Self {
        Self {
            kind: DecisionKind::Replan,
            option_label: None,
            thought: thought.into(),
        }
    }

    pub fn movement(label: char, thought: impl Into<String>) -> Self {
        Self {
            kind: DecisionKind::Move,
            option_label: Some(label),
            thought: thought.into(),
        }
    }
}

/// One plain-text paragraph describing the agent's surroundings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocationDescription {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ActionParseError {
    #[error("no \"Action:\" line")]
    NoActionLine,
    #[error("option {0} is not among the presented options")]
    LabelOutOfSpace(char),
    #[error("replan is not available")]
    ReplanNotAllowed,
    #[error("unrecognised action {0:?}")]
    Unrecognized(String),
}

/// Everything the local agent sees when choosing an action.
#[derive(Debug, Clone, Copy)]
pub struct ActionInput<'a> {
    pub instruction: &'a str,
    /// Absent in single-agent operation.
    pub plan: Option<&'a GlobalPlan>,
    /// Whether the replan tip is shown; ignored when there is no plan.
    pub replan_enabled: bool,
    pub history: &'a str,
    pub map: &'a str,
    pub space: &'a ActionSpace,
    pub pano: &'a [ViewDescriptor],
}

impl ActionInput<'_> {
    pub fn replan_allowed(&self) -> bool {
        self.plan.is_some() && self.replan_enabled
    }
}

pub struct LocalAgent<'t> {
    templates: &'t PromptTemplates,
}

impl<'t> LocalAgent<'t> {
    pub fn new(templates: &'t PromptTemplates) -> Self {
        Self { templates }
    }

    pub fn build_describe_prompt(&self, slice: &[ViewDescriptor]) -> Result<CompletionRequest, AgentError> {
        if slice.len() != AZIMUTH_SLOTS || slice.iter().any(|v| v.caption.is_none()) {
            return Err(AgentError::Precondition(format!(
                "location description needs {AZIMUTH_SLOTS} captioned views, got {}",
                slice.len()
            )));
        }
        let vars = Vars::new().parts("VIEWS", view_parts(slice));
        Ok(CompletionRequest::new(
            CallKind::Describe,
            vec![
                ChatMessage::system(self.templates.describe_system.render_text(&Vars::new())),
                user(self.templates.describe_user.render(&vars)),
            ],
        ))
    }

    pub fn describe_location(
        &self,
        scope: &mut CallScope<'_>,
        slice: &[ViewDescriptor],
    ) -> Result<LocationDescription, AgentError> {
        let request = self.build_describe_prompt(slice)?;
        let result = scope.complete(request)?;
        let text = normalize_description(&result.text);
        if text.is_empty() {
            return Err(AgentError::EmptyDescription);
        }
        Ok(LocationDescription { text })
    }

    pub fn build_action_prompt(&self, input: &ActionInput<'_>) -> Result<CompletionRequest, AgentError> {
        let slice = frontal_slice(input.pano).map_err(|e| AgentError::Precondition(e.to_string()))?;
        let flags = Vars::new().flag("REPLAN", input.replan_allowed());
        let system = match input.plan {
            Some(_) => self.templates.action_system.render_text(&flags),
            None => self.templates.action_fallback_system.render_text(&flags),
        };
        let mut options = Vec::new();
        for option in &input.space.options {
            options.push(Part::Text {
                text: format!("\n{}. {}\n", option.label, option.describe()),
            });
            let view = &slice[option.view_slot()];
            options.push(Part::Image {
                image: ImageRef::file(&view.image_ref),
            });
        }
        options.push(Part::Text {
            text: "\nStop. stop here if you have arrived at the destination".to_string(),
        });
        let mut vars = flags
            .flag("PLAN", input.plan.is_some())
            .text("INSTRUCTION", input.instruction.trim())
            .text("HISTORY", input.history)
            .text("MAP", input.map)
            .parts("ACTION_OPTIONS", options)
            .parts("VIEWS", view_parts(&slice));
        if let Some(plan) = input.plan {
            vars = vars.text("GLOBAL_PLAN", plan.render());
        }
        Ok(CompletionRequest::new(
            CallKind::Action,
            vec![
                ChatMessage::system(system),
                user(self.templates.action_user.render(&vars)),
            ],
        ))
    }

    /// Asks for the next action, re-asking once if the answer is unusable.
    pub fn decide_action(
        &self,
        scope: &mut CallScope<'_>,
        input: &ActionInput<'_>,
    ) -> Result<LocalDecision, AgentError> {
        let request = self.build_action_prompt(input)?;
        let allowed = input.replan_allowed();
        let first = scope.complete(request.clone())?;
        match parse_action_response(&first.text, input.space, allowed) {
            Ok(decision) => Ok(decision),
            Err(e) => {
                log::debug!("action parse failed ({e}), asking again");
                let mut retry = request;
                retry.messages.push(ChatMessage::new(Role::Assistant).text(first.text));
                retry.messages.push(ChatMessage::user(
                    self.templates
                        .action_format_reminder
                        .render_text(&Vars::new().flag("REPLAN", allowed)),
                ));
                let second = scope.complete(retry)?;
                Ok(parse_action_response(&second.text, input.space, allowed)?)
            }
        }
    }
}

fn user(parts: Vec<Part>) -> ChatMessage {
    ChatMessage {
        role: Role::User,
        parts,
    }
}

fn view_parts(slice: &[ViewDescriptor]) -> Vec<Part> {
    let mut parts = Vec::with_capacity(slice.len() * 2);
    for view in slice {
        parts.push(Part::Text {
            text: format!("\n{}\n", view.caption.as_deref().unwrap_or_default()),
        });
        parts.push(Part::Image {
            image: ImageRef::file(&view.image_ref),
        });
    }
    parts
}

static FENCE_LINE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*```").unwrap());
static HEADING: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*(?:#{1,6}\s+|[-*+]\s+|>\s*)").unwrap());
static ACTION_LINE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\baction\s*[:：]\s*([^\n]*)").unwrap());
static THOUGHT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?is)\bthought\s*[:：]\s*(.*)").unwrap());

/// Strips fences and markdown markers and folds the text into one paragraph.
pub fn normalize_description(text: &str) -> String {
    text.lines()
        .filter(|l| !FENCE_LINE.is_match(l))
        .map(|l| HEADING.replace(l, "").replace("**", "").replace("__", ""))
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Reads the last `Action:` line of an answer.
pub fn parse_action_response(
    text: &str,
    space: &ActionSpace,
    replan_allowed: bool,
) -> Result<LocalDecision, ActionParseError> {
    let clean: String = text.chars().filter(|c| !matches!(c, '*' | '`' | '#')).collect();
    let last = ACTION_LINE
        .captures_iter(&clean)
        .last()
        .ok_or(ActionParseError::NoActionLine)?;
    let action_start = last.get(0).unwrap().start();
    let before = &clean[..action_start];
    let thought = THOUGHT
        .captures(before)
        .map(|c| c[1].trim().to_string())
        .unwrap_or_else(|| before.trim().to_string());

    let mut value = last[1]
        .trim()
        .trim_matches(|c: char| {
            matches!(
                c,
                '"' | '\'' | '[' | ']' | '(' | ')' | '<' | '>' | '{' | '}' | '“' | '”' | '‘' | '’'
            )
        })
        .trim();
    if value.get(..7).is_some_and(|p| p.eq_ignore_ascii_case("option ")) {
        value = value[7..].trim_start_matches(['"', '\'', ' ']);
    }
    let lower = value.to_lowercase();
    if lower.starts_with("stop") {
        return Ok(LocalDecision::stop(thought));
    }
    if lower.starts_with("replan") || lower.starts_with("re-plan") {
        return if replan_allowed {
            Ok(LocalDecision::replan(thought))
        } else {
            Err(ActionParseError::ReplanNotAllowed)
        };
    }
    let mut chars = value.chars();
    match (chars.next(), chars.next()) {
        (Some(c), next) if c.is_ascii_alphabetic() && next.is_none_or(|n| !n.is_alphanumeric()) => {
            let label = c.to_ascii_uppercase();
            if space.get(label).is_some() {
                Ok(LocalDecision::movement(label, thought))
            } else {
                Err(ActionParseError::LabelOutOfSpace(label))
            }
        }
        _ => Err(ActionParseError::Unrecognized(value.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::PlanOrigin;
    use crate::llm::{OracleBackend, OracleRecord, Recorder};
    use crate::scene::{candidate_actions, panoramic_observation, AgentPose, SceneGraph};

    const T5: &str = r#"{"scan":"t5","viewpoints":[
        {"id":"A","x":0,"y":0,"z":0},{"id":"B","x":4,"y":0,"z":0},{"id":"C","x":8,"y":0,"z":0},
        {"id":"D","x":8,"y":4,"z":0},{"id":"E","x":4,"y":4,"z":0}],
        "edges":[["A","B"],["B","C"],["C","D"],["D","E"],["E","B"]],"image_root":"img"}"#;

    fn world() -> (SceneGraph, ActionSpace, Vec<ViewDescriptor>) {
        let g = SceneGraph::from_json_str(T5).unwrap();
        let pose = AgentPose::new("B", 0.0);
        let space = candidate_actions(&g, &pose).unwrap();
        let pano = panoramic_observation(&g, &pose).unwrap();
        (g, space, pano)
    }

    fn plan() -> GlobalPlan {
        GlobalPlan {
            subgoals: vec!["walk past the sofa".into(), "stop at the shelf".into()],
            thought: "t".into(),
            origin: PlanOrigin::Initial,
            nonconforming_stop: false,
        }
    }

    fn oracle(kind: CallKind, responses: &[&str]) -> OracleBackend {
        OracleBackend::from_records(responses.iter().enumerate().map(|(i, r)| OracleRecord {
            episode: "e".into(),
            step: 0,
            kind,
            replan_ordinal: 0,
            attempt: Some(i as u32),
            response: r.to_string(),
        }))
        .unwrap()
    }

    #[test]
    fn fallback_prompt_omits_plan_and_replan() {
        let (_, space, pano) = world();
        let t = PromptTemplates::default();
        let input = ActionInput {
            instruction: "find the shelf",
            plan: None,
            replan_enabled: true,
            history: "None",
            map: "",
            space: &space,
            pano: &pano,
        };
        let text = LocalAgent::new(&t)
            .build_action_prompt(&input)
            .unwrap()
            .serialized_text();
        assert!(!text.contains("Global Plan"));
        assert!(!text.to_lowercase().contains("replan"));
        let p = plan();
        let with_plan = ActionInput {
            plan: Some(&p),
            ..input
        };
        let text = LocalAgent::new(&t)
            .build_action_prompt(&with_plan)
            .unwrap()
            .serialized_text();
        assert!(text.contains("Global Plan:\n1. walk past the sofa\n2. stop at the shelf"));
        assert!(text.contains("feel free to trigger a 'replan'"));
    }

    #[test]
    fn options_are_listed_with_stop_and_images() {
        let (_, space, pano) = world();
        let t = PromptTemplates::default();
        let input = ActionInput {
            instruction: "go",
            plan: None,
            replan_enabled: false,
            history: "step (1): {x}",
            map: "",
            space: &space,
            pano: &pano,
        };
        let req = LocalAgent::new(&t).build_action_prompt(&input).unwrap();
        let text = req.serialized_text();
        assert!(text.contains("A. go forward to E"));
        assert!(text.contains("B. turn right 90 degrees to C"));
        assert!(text.contains("C. turn left 90 degrees to A"));
        assert!(text.contains("Stop. stop here"));
        assert!(text.contains("History: step (1): {x}"));
        // 12 surroundings + one facing image per option
        assert_eq!(req.image_count(), 12 + 3);
        let sections: Vec<usize> = ["Instruction:", "History:", "Map:", "Action options:"]
            .iter()
            .map(|h| text.rfind(h).unwrap())
            .collect();
        assert!(sections.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn decisions_from_oracle() {
        let (_, space, pano) = world();
        let t = PromptTemplates::default();
        let p = plan();
        let input = ActionInput {
            instruction: "go",
            plan: Some(&p),
            replan_enabled: true,
            history: "None",
            map: "",
            space: &space,
            pano: &pano,
        };
        let agent = LocalAgent::new(&t);
        let cases = [
            (
                "Thought: the shelf is left.\nAction: B",
                LocalDecision::movement('B', "the shelf is left."),
            ),
            ("Action: STOP", LocalDecision::stop("")),
            (
                "Thought: plan is wrong\nAction: replan",
                LocalDecision::replan("plan is wrong"),
            ),
        ];
        for (reply, expected) in cases {
            let backend = oracle(CallKind::Action, &[reply]);
            let got = agent.decide_action(&mut CallScope::new(&backend, "e"), &input).unwrap();
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn out_of_space_label_fails_after_retry() {
        let (_, space, pano) = world();
        let t = PromptTemplates::default();
        let input = ActionInput {
            instruction: "go",
            plan: None,
            replan_enabled: false,
            history: "None",
            map: "",
            space: &space,
            pano: &pano,
        };
        let backend = Recorder::new(oracle(CallKind::Action, &["Action: Z", "Action: Q"]));
        let err = LocalAgent::new(&t)
            .decide_action(&mut CallScope::new(&backend, "e"), &input)
            .unwrap_err();
        assert!(matches!(
            err,
            AgentError::ActionParse(ActionParseError::LabelOutOfSpace('Q'))
        ));
        assert_eq!(backend.requests().len(), 2);
    }

    #[test]
    fn describe_strips_fences() {
        let (_, _, pano) = world();
        let slice = frontal_slice(&pano).unwrap();
        let t = PromptTemplates::default();
        let backend = oracle(
            CallKind::Describe,
            &["```\nYou are in a hallway with a door ahead.\n```"],
        );
        let d = LocalAgent::new(&t)
            .describe_location(&mut CallScope::new(&backend, "e"), &slice)
            .unwrap();
        assert_eq!(d.text, "You are in a hallway with a door ahead.");
        let req = LocalAgent::new(&t).build_describe_prompt(&slice).unwrap();
        assert_eq!(req.image_count(), 12);
        assert!(req.serialized_text().contains("Image 4 (on your right)"));
    }

    #[test]
    fn describe_preconditions() {
        let (_, _, pano) = world();
        let slice = frontal_slice(&pano).unwrap();
        let t = PromptTemplates::default();
        let backend = oracle(CallKind::Describe, &["   "]);
        assert!(matches!(
            LocalAgent::new(&t).describe_location(&mut CallScope::new(&backend, "e"), &slice[..11]),
            Err(AgentError::Precondition(_))
        ));
        assert!(matches!(
            LocalAgent::new(&t).describe_location(&mut CallScope::new(&backend, "e"), &slice),
            Err(AgentError::EmptyDescription)
        ));
    }

    #[test]
    fn action_parser_cases() {
        let (_, space, _) = world();
        assert_eq!(
            parse_action_response("Action: 'C'", &space, false)
                .unwrap()
                .option_label,
            Some('C')
        );
        assert_eq!(
            parse_action_response("Action: Option B", &space, false)
                .unwrap()
                .option_label,
            Some('B')
        );
        assert_eq!(
            parse_action_response("**Action:** a", &space, false)
                .unwrap()
                .option_label,
            Some('A')
        );
        assert_eq!(
            parse_action_response("Action: Z", &space, false),
            Err(ActionParseError::LabelOutOfSpace('Z'))
        );
        assert_eq!(
            parse_action_response("I think we should stop", &space, true),
            Err(ActionParseError::NoActionLine)
        );
        assert_eq!(
            parse_action_response("Action: replan", &space, false),
            Err(ActionParseError::ReplanNotAllowed)
        );
        // the last action line wins
        let d = parse_action_response("Action: A\nOn reflection...\nAction: B", &space, false).unwrap();
        assert_eq!(d.option_label, Some('B'));
    }

    #[test]
    fn normalization() {
        assert_eq!(
            normalize_description("## Kitchen\n**Left**: a fridge\n\n- right: a sink"),
            "Kitchen Left: a fridge right: a sink"
        );
    }
}
