use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use super::{AgentError, CallScope};
use crate::annotate::MarkedMapSet;
use crate::episode::DatasetMode;
use crate::llm::{CallKind, ChatMessage, CompletionRequest, ImageRef, Part, Role};
use crate::prompts::{PromptTemplates, Vars};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlanOrigin {
    Initial,
    DynamicUpdate,
    Replan,
}

/// Ordered subgoals from the global agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalPlan {
    pub subgoals: Vec<String>,
    pub thought: String,
    pub origin: PlanOrigin,
    /// A replan whose last subgoal is not a stop directive.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub nonconforming_stop: bool,
}

impl GlobalPlan {
    /// Numbered list, one subgoal per line.
    pub fn render(&self) -> String {
        render_subgoals(&self.subgoals)
    }

    pub fn ends_with_stop(&self) -> bool {
        self.subgoals.last().is_some_and(|g| STOP_WORD.is_match(g))
    }
}

pub(crate) fn render_subgoals(subgoals: &[String]) -> String {
    subgoals
        .iter()
        .enumerate()
        .map(|(i, g)| format!("{}. {}", i + 1, g))
        .collect::<Vec<_>>()
        .join("\n")
}

static STOP_WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\bstop").unwrap());

/// Inputs to a from-scratch replan. Deliberately has no previous plan.
#[derive(Debug, Clone)]
pub struct ReplanContext {
    pub target: String,
    pub marked_maps: MarkedMapSet,
    pub local_obs: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPlan {
    pub thought: String,
    pub subgoals: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanParseError {
    #[error("neither \"Thought\" nor \"New Plan\" found")]
    NoFields,
    #[error("no \"New Plan\" field")]
    MissingPlan,
    #[error("\"New Plan\" is empty")]
    EmptyPlan,
}

pub struct GlobalAgent<'t> {
    templates: &'t PromptTemplates,
    mode: DatasetMode,
}

impl<'t> GlobalAgent<'t> {
    pub fn new(templates: &'t PromptTemplates, mode: DatasetMode) -> Self {
        Self { templates, mode }
    }

    fn instruction_text(&self, instruction: &str) -> String {
        if self.mode == DatasetMode::Reverie {
            let note = self.templates.reverie_note.render_text(&Vars::new());
            format!("{} {}", instruction.trim(), note.trim())
        } else {
            instruction.trim().to_string()
        }
    }

    pub fn build_planning_prompt(
        &self,
        instruction: &str,
        marked_maps: &MarkedMapSet,
        prev_plan: Option<&GlobalPlan>,
        local_obs: &str,
    ) -> Result<CompletionRequest, AgentError> {
        if marked_maps.floors.is_empty() {
            return Err(AgentError::Precondition("no top-down maps".into()));
        }
        let vars = Vars::new()
            .text("INSTRUCTION", self.instruction_text(instruction))
            .text("LOCAL_OBS", local_obs.trim())
            .text(
                "PREV_PLAN",
                prev_plan.map_or_else(|| "None".to_string(), GlobalPlan::render),
            )
            .parts("MAPS", map_parts(marked_maps)?);
        Ok(CompletionRequest::new(
            CallKind::Planning,
            vec![
                system(self.templates.planning_system.render_text(&Vars::new())),
                user(self.templates.planning_user.render(&vars)),
            ],
        ))
    }

    /// One planning round; `prev_plan` absent means this is the first plan.
    pub fn develop_plan(
        &self,
        scope: &mut CallScope<'_>,
        instruction: &str,
        marked_maps: &MarkedMapSet,
        prev_plan: Option<&GlobalPlan>,
        local_obs: &str,
    ) -> Result<GlobalPlan, AgentError> {
        let request = self.build_planning_prompt(instruction, marked_maps, prev_plan, local_obs)?;
        let parsed = self.ask_for_plan(scope, request)?;
        Ok(GlobalPlan {
            subgoals: parsed.subgoals,
            thought: parsed.thought,
            origin: if prev_plan.is_some() {
                PlanOrigin::DynamicUpdate
            } else {
                PlanOrigin::Initial
            },
            nonconforming_stop: false,
        })
    }

    pub fn build_replan_prompt(&self, ctx: &ReplanContext) -> Result<CompletionRequest, AgentError> {
        if ctx.target.trim().is_empty() {
            return Err(AgentError::Precondition("empty replan target".into()));
        }
        if ctx.marked_maps.floors.is_empty() {
            return Err(AgentError::Precondition("no top-down maps".into()));
        }
        let vars = Vars::new()
            .text("TARGET", ctx.target.trim())
            .text("LOCAL_OBS", ctx.local_obs.trim())
            .parts("MAPS", map_parts(&ctx.marked_maps)?);
        Ok(CompletionRequest::new(
            CallKind::Replan,
            vec![
                system(self.templates.replan_system.render_text(&Vars::new())),
                user(self.templates.replan_user.render(&vars)),
            ],
        ))
    }

    /// A fresh plan from the current position to the target, built without
    /// any earlier plan.
    pub fn replan(&self, scope: &mut CallScope<'_>, ctx: &ReplanContext) -> Result<GlobalPlan, AgentError> {
        let request = self.build_replan_prompt(ctx)?;
        let parsed = self.ask_for_plan(scope, request)?;
        let mut plan = GlobalPlan {
            subgoals: parsed.subgoals,
            thought: parsed.thought,
            origin: PlanOrigin::Replan,
            nonconforming_stop: false,
        };
        plan.nonconforming_stop = !plan.ends_with_stop();
        Ok(plan)
    }

    /// The destination named by the instruction. Any failure yields the whole
    /// instruction.
    pub fn extract_target(&self, scope: &mut CallScope<'_>, instruction: &str) -> String {
        let vars = Vars::new().text("INSTRUCTION", instruction.trim());
        let request = CompletionRequest::new(
            CallKind::Target,
            vec![
                system(self.templates.target_system.render_text(&vars)),
                user(self.templates.target_user.render(&vars)),
            ],
        );
        match scope.complete(request) {
            Ok(result) => clean_target(&result.text).unwrap_or_else(|| instruction.trim().to_string()),
            Err(e) => {
                log::debug!("target extraction failed, using the instruction: {e}");
                instruction.trim().to_string()
            }
        }
    }

    fn ask_for_plan(&self, scope: &mut CallScope<'_>, request: CompletionRequest) -> Result<ParsedPlan, AgentError> {
        let first = scope.complete(request.clone())?;
        match parse_plan_response(&first.text) {
            Ok(parsed) => Ok(parsed),
            Err(e) => {
                log::debug!("plan parse failed ({e}), asking again");
                let mut retry = request;
                retry.messages.push(ChatMessage::new(Role::Assistant).text(first.text));
                retry.messages.push(ChatMessage::user(
                    self.templates.plan_format_reminder.render_text(&Vars::new()),
                ));
                let second = scope.complete(retry)?;
                Ok(parse_plan_response(&second.text)?)
            }
        }
    }
}

fn system(text: String) -> ChatMessage {
    ChatMessage::system(text)
}

fn user(parts: Vec<Part>) -> ChatMessage {
    ChatMessage {
        role: Role::User,
        parts,
    }
}

fn map_parts(maps: &MarkedMapSet) -> Result<Vec<Part>, AgentError> {
    let mut parts = Vec::with_capacity(maps.floors.len() * 2);
    for floor in &maps.floors {
        parts.push(Part::Text {
            text: format!("\nFloor {}:\n", floor.floor),
        });
        parts.push(Part::Image {
            image: ImageRef::png(
                format!("floor{}_step{}.png", floor.floor, maps.step_index),
                floor.to_png()?,
            ),
        });
    }
    Ok(parts)
}

fn clean_target(text: &str) -> Option<String> {
    let line = strip_fences(text)
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())?
        .to_string();
    let lower = line.to_ascii_lowercase();
    let mut body = line.as_str();
    for prefix in ["target location:", "target:", "location:"] {
        if lower.starts_with(prefix) {
            body = &line[prefix.len()..];
            break;
        }
    }
    let cleaned = body
        .trim()
        .trim_matches(|c: char| c == '"' || c == '\'' || c == '*' || c == '`')
        .trim_end_matches('.')
        .trim();
    (!cleaned.is_empty()).then(|| cleaned.to_string())
}

static FENCE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?s)```[A-Za-z]*[ \t]*\n?(.*?)```").unwrap());
static LABEL_THOUGHT: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"(?is)["']?\bthought["']?\s*[:：]\s*(.*?)(?:["']?\bnew[ _]?plan["']?\s*[:：]|\z)"#).unwrap()
});
static LABEL_PLAN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"(?is)["']?\bnew[ _]?plan["']?\s*[:：]\s*(.*)\z"#).unwrap());
static NUMBER_MARK: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?:^|\s)(\d{1,3})[.)](?:\s+|\z)").unwrap());
static BULLET: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*(?:[-*•]\s+)").unwrap());

fn strip_fences(text: &str) -> String {
    match FENCE.captures(text) {
        Some(cap) => cap[1].to_string(),
        None => text.to_string(),
    }
}

fn normalize_key(key: &str) -> String {
    key.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

fn value_text(value: &Value) -> Option<Vec<String>> {
    match value {
        Value::String(s) => Some(vec![s.clone()]),
        Value::Array(items) => Some(
            items
                .iter()
                .filter_map(|v| match v {
                    Value::String(s) => Some(s.clone()),
                    Value::Null => None,
                    other => Some(other.to_string()),
                })
                .collect(),
        ),
        Value::Null => None,
        other => Some(vec![other.to_string()]),
    }
}

fn from_json(text: &str) -> Option<(Option<String>, Option<Vec<String>>)> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    if end <= start {
        return None;
    }
    let Value::Object(map) = serde_json::from_str::<Value>(&text[start..=end]).ok()? else {
        return None;
    };
    let mut thought = None;
    let mut plan = None;
    for (key, value) in &map {
        match normalize_key(key).as_str() {
            "thought" => thought = value_text(value).map(|v| v.join("\n")),
            "newplan" | "plan" => {
                plan = value_text(value).map(|items| {
                    if items.len() == 1 {
                        split_subgoals(&items[0])
                    } else {
                        items.iter().flat_map(|s| split_subgoals(s)).collect()
                    }
                })
            }
            _ => {}
        }
    }
    Some((thought, plan))
}

fn unquote(text: &str) -> &str {
    text.trim()
        .trim_end_matches('}')
        .trim()
        .trim_end_matches(',')
        .trim()
        .trim_matches(|c: char| c == '"' || c == '\'' || c == '*')
        .trim()
}

/// Reads a plan answer: bare JSON, JSON inside a code fence, or labelled
/// plain text (`Thought:` / `New Plan:`).
pub fn parse_plan_response(text: &str) -> Result<ParsedPlan, PlanParseError> {
    let body = strip_fences(text);
    let (thought, plan) = match from_json(&body) {
        Some(fields) => fields,
        None => {
            let thought = LABEL_THOUGHT.captures(&body).map(|c| unquote(&c[1]).to_string());
            let plan = LABEL_PLAN
                .captures(&body)
                .map(|c| split_subgoals(&unquote(&c[1]).replace("\\n", "\n")));
            (thought, plan)
        }
    };
    match (thought, plan) {
        (None, None) => Err(PlanParseError::NoFields),
        (_, None) => Err(PlanParseError::MissingPlan),
        (_, Some(subgoals)) if subgoals.is_empty() => Err(PlanParseError::EmptyPlan),
        (thought, Some(subgoals)) => Ok(ParsedPlan {
            thought: thought.unwrap_or_default(),
            subgoals,
        }),
    }
}

fn clean_subgoal(s: &str) -> String {
    s.trim().trim_end_matches([',', ';']).trim().to_string()
}

/// Splits plan text into subgoals: on `1.` / `2)` markers numbered from one,
/// else on lines, else the whole text is one subgoal.
pub fn split_subgoals(text: &str) -> Vec<String> {
    let text = text.trim();
    if text.is_empty() {
        return Vec::new();
    }
    let mut marks = Vec::new();
    let mut expected = 1u32;
    for cap in NUMBER_MARK.captures_iter(text) {
        if cap[1].parse::<u32>() == Ok(expected) {
            let whole = cap.get(0).unwrap();
            marks.push((whole.start(), whole.end()));
            expected += 1;
        }
    }
    if !marks.is_empty() {
        let mut goals = Vec::new();
        let preamble = text[..marks[0].0].trim();
        if !preamble.is_empty() && !preamble.ends_with(':') {
            goals.push(clean_subgoal(preamble));
        }
        for (i, &(_, body_start)) in marks.iter().enumerate() {
            let end = marks.get(i + 1).map_or(text.len(), |m| m.0);
            let goal = clean_subgoal(&text[body_start..end]);
            if !goal.is_empty() {
                goals.push(goal);
            }
        }
        return goals;
    }
    let lines: Vec<String> = text
        .lines()
        .map(|l| clean_subgoal(&BULLET.replace(l, "")))
        .filter(|l| !l.is_empty())
        .collect();
    if lines.len() > 1 {
        return lines;
    }
    vec![clean_subgoal(text)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotate::{annotate_trajectory, FloorImage, FloorMap};
    use crate::llm::{CallKind, OracleBackend, OracleRecord, Recorder};
    use image::{Rgb, RgbImage};
    use proptest::prelude::*;

    fn maps(floors: &[i64]) -> MarkedMapSet {
        let images: Vec<FloorImage> = floors
            .iter()
            .map(|&f| FloorImage {
                map: FloorMap {
                    floor: f,
                    image_ref: format!("f{f}.png").into(),
                    pixel_coords: [(format!("v{f}"), (10, 10))].into_iter().collect(),
                },
                pixels: RgbImage::from_pixel(32, 32, Rgb([255, 255, 255])),
            })
            .collect();
        annotate_trajectory(&images, &["v0"], "v0").unwrap()
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
    fn first_prompt_has_no_previous_plan() {
        let t = PromptTemplates::default();
        let agent = GlobalAgent::new(&t, DatasetMode::R2r);
        let req = agent.build_planning_prompt("go", &maps(&[0]), None, "hall").unwrap();
        let text = req.serialized_text();
        assert!(text.contains("Previous Plan: None"));
        let order: Vec<usize> = [
            "Instruction:",
            "Current Observation:",
            "Previous Plan:",
            "Top-down View Images:",
        ]
        .iter()
        .map(|h| text.rfind(h).unwrap())
        .collect();
        assert!(order.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn one_image_per_floor() {
        let t = PromptTemplates::default();
        let agent = GlobalAgent::new(&t, DatasetMode::R2r);
        let req = agent.build_planning_prompt("go", &maps(&[0, 1]), None, "hall").unwrap();
        assert_eq!(req.image_count(), 2);
    }

    #[test]
    fn reverie_mode_appends_clarification() {
        let t = PromptTemplates::default();
        let text = |mode| {
            GlobalAgent::new(&t, mode)
                .build_planning_prompt("Clean the sink", &maps(&[0]), None, "hall")
                .unwrap()
                .serialized_text()
        };
        assert!(text(DatasetMode::Reverie)
            .contains("Clean the sink (Instruction is a high-level command that directs an agent"));
        assert!(!text(DatasetMode::R2r).contains("high-level command"));
    }

    #[test]
    fn develop_plan_parses_fixture() {
        let t = PromptTemplates::default();
        let backend = oracle(
            CallKind::Planning,
            &[r#"{"Thought":"on floor 2","New Plan":"1. descend stairs 2. stop at sofa"}"#],
        );
        let mut scope = CallScope::new(&backend, "e");
        let plan = GlobalAgent::new(&t, DatasetMode::R2r)
            .develop_plan(&mut scope, "go", &maps(&[0]), None, "hall")
            .unwrap();
        assert_eq!(plan.subgoals, ["descend stairs", "stop at sofa"]);
        assert_eq!(plan.thought, "on floor 2");
        assert_eq!(plan.origin, PlanOrigin::Initial);
    }

    #[test]
    fn missing_plan_field_fails_after_one_retry() {
        let t = PromptTemplates::default();
        let backend = Recorder::new(oracle(
            CallKind::Planning,
            &[r#"{"Thought":"hmm"}"#, r#"{"Thought":"hmm"}"#],
        ));
        let mut scope = CallScope::new(&backend, "e");
        let err = GlobalAgent::new(&t, DatasetMode::R2r)
            .develop_plan(&mut scope, "go", &maps(&[0]), None, "hall")
            .unwrap_err();
        assert!(matches!(err, AgentError::PlanParse(PlanParseError::MissingPlan)));
        let requests = backend.requests();
        assert_eq!(requests.len(), 2);
        assert_eq!(requests[1].key.attempt, 1);
        assert!(requests[1].serialized_text().contains("could not be read"));
    }

    #[test]
    fn retry_can_recover() {
        let t = PromptTemplates::default();
        let backend = oracle(
            CallKind::Planning,
            &["no idea", r#"{"Thought":"ok","New Plan":"walk ahead then stop"}"#],
        );
        let mut scope = CallScope::new(&backend, "e");
        let prev = GlobalPlan {
            subgoals: vec!["x".into()],
            thought: String::new(),
            origin: PlanOrigin::Initial,
            nonconforming_stop: false,
        };
        let plan = GlobalAgent::new(&t, DatasetMode::R2r)
            .develop_plan(&mut scope, "go", &maps(&[0]), Some(&prev), "hall")
            .unwrap();
        assert_eq!(plan.subgoals, ["walk ahead then stop"]);
        assert_eq!(plan.origin, PlanOrigin::DynamicUpdate);
    }

    #[test]
    fn replan_request_has_no_prior_plan_and_flags_missing_stop() {
        let t = PromptTemplates::default();
        let backend = Recorder::new(oracle(
            CallKind::Replan,
            &[r#"{"Thought":"t","New Plan":"1. go up the stairs 2. enter the bedroom"}"#],
        ));
        let mut scope = CallScope::new(&backend, "e");
        let ctx = ReplanContext {
            target: "the bedroom".into(),
            marked_maps: maps(&[0]),
            local_obs: "hall".into(),
        };
        let plan = GlobalAgent::new(&t, DatasetMode::R2r).replan(&mut scope, &ctx).unwrap();
        assert_eq!(plan.origin, PlanOrigin::Replan);
        assert!(plan.nonconforming_stop);
        let text = backend.requests()[0].serialized_text();
        assert!(text.contains("replan a valid and step-by-step navigation path"));
        assert!(text.contains("Goal Location: the bedroom"));
        assert!(!text.contains("Previous Plan"));
    }

    #[test]
    fn replan_ending_in_stop_conforms() {
        let t = PromptTemplates::default();
        let backend = oracle(
            CallKind::Replan,
            &[r#"{"Thought":"t","New Plan":"1. go up 2. stop at the bed"}"#],
        );
        let mut scope = CallScope::new(&backend, "e");
        let ctx = ReplanContext {
            target: "bed".into(),
            marked_maps: maps(&[0]),
            local_obs: "hall".into(),
        };
        let plan = GlobalAgent::new(&t, DatasetMode::R2r).replan(&mut scope, &ctx).unwrap();
        assert!(!plan.nonconforming_stop);
    }

    #[test]
    fn target_extraction_and_fallbacks() {
        let t = PromptTemplates::default();
        let agent = GlobalAgent::new(&t, DatasetMode::Reverie);
        let instruction = "Go to third level bathroom and turn off the light";

        let backend = oracle(CallKind::Target, &["the shelf"]);
        assert_eq!(
            agent.extract_target(&mut CallScope::new(&backend, "e"), "x"),
            "the shelf"
        );

        let backend = oracle(CallKind::Target, &["Target: \"third level bathroom\"."]);
        assert!(agent
            .extract_target(&mut CallScope::new(&backend, "e"), instruction)
            .contains("bathroom"));

        let backend = oracle(CallKind::Target, &[""]);
        assert_eq!(
            agent.extract_target(&mut CallScope::new(&backend, "e"), instruction),
            instruction
        );

        let empty = OracleBackend::new();
        assert_eq!(
            agent.extract_target(&mut CallScope::new(&empty, "e"), instruction),
            instruction
        );
    }

    #[test]
    fn parser_formats() {
        let bare = r#"{"Thought":"a","New Plan":"1. go left\n2. stop"}"#;
        let fenced = format!("```json\n{bare}\n```");
        assert_eq!(parse_plan_response(bare), parse_plan_response(&fenced));
        assert_eq!(parse_plan_response(bare).unwrap().subgoals, ["go left", "stop"]);
        let labeled = "Thought: the stairs are ahead\nNew Plan: 1) climb the stairs 2) stop at the top";
        let p = parse_plan_response(labeled).unwrap();
        assert_eq!(p.thought, "the stairs are ahead");
        assert_eq!(p.subgoals, ["climb the stairs", "stop at the top"]);
        assert_eq!(
            parse_plan_response("I will walk around."),
            Err(PlanParseError::NoFields)
        );
        assert_eq!(
            parse_plan_response(r#"{"Thought":"x","New Plan":""}"#),
            Err(PlanParseError::EmptyPlan)
        );
    }

    #[test]
    fn splitting_rules() {
        assert_eq!(split_subgoals("walk ahead then stop"), ["walk ahead then stop"]);
        assert_eq!(split_subgoals("- exit the room\n- stop"), ["exit the room", "stop"]);
        assert_eq!(split_subgoals("Plan: 1. a 2. b"), ["a", "b"]);
        // numbers out of sequence are part of the text
        assert_eq!(
            split_subgoals("1. pass room 3. then 2. stop"),
            ["pass room 3. then", "stop"]
        );
    }

    fn words() -> impl Strategy<Value = String> {
        proptest::collection::vec("[a-z]{1,8}", 1..6).prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn reparsing_a_serialized_plan_is_stable(
            thought in words(),
            goals in proptest::collection::vec(words(), 1..6),
        ) {
            let first = serde_json::json!({"Thought": thought, "New Plan": render_subgoals(&goals)}).to_string();
            let parsed = parse_plan_response(&first).unwrap();
            prop_assert_eq!(&parsed.subgoals, &goals);
            let again = serde_json::json!({"Thought": parsed.thought, "New Plan": render_subgoals(&parsed.subgoals)}).to_string();
            prop_assert_eq!(parse_plan_response(&again).unwrap(), parsed);
        }

        #[test]
        fn parser_never_panics(text in "\\PC{0,200}") {
            let _ = parse_plan_response(&text);
        }
    }
}
