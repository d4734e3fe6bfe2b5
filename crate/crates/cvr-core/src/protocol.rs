//! The structured action protocol spoken by the decision policy.
//!
//! Raw model output is leniently scanned for the first JSON object, then
//! strictly validated. All failures are data, never panics: the episode
//! engine turns them into retry prompts and the formatting reward reads
//! [`is_format_valid`].

use serde_json::Value;
use thiserror::Error;

use crate::script::{GoldAnswer, TaskType};

/// Maximum summed `num_frames` across the targets of one observe call.
pub const FRAME_BUDGET: u32 = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct ObserveTarget {
    pub video_index: u32,
    pub start_time: f64,
    pub end_time: f64,
    pub num_frames: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActionKind {
    Observe {
        targets: Vec<ObserveTarget>,
        focus_prompt: String,
    },
    GetCaption {
        video_index: u32,
        start_time: Option<f64>,
        end_time: Option<f64>,
    },
    Answer {
        final_answer: GoldAnswer,
    },
}

/// A parsed Master Agent decision. `thought` rides along on every variant.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentAction {
    pub thought: String,
    pub kind: ActionKind,
}

impl AgentAction {
    pub fn is_answer(&self) -> bool {
        matches!(self.kind, ActionKind::Answer { .. })
    }

    pub fn is_tool_call(&self) -> bool {
        !self.is_answer()
    }

    /// Short tag used in state keys and logs.
    pub fn kind_tag(&self) -> &'static str {
        match self.kind {
            ActionKind::Observe { .. } => "observe",
            ActionKind::GetCaption { .. } => "get_caption",
            ActionKind::Answer { .. } => "answer",
        }
    }
}

/// Serializes an action into the wire format: top-level `action`, `thought`,
/// and `params` (tool calls) or `final_answer` (answers).
pub fn serialize_action(action: &AgentAction) -> String {
    serde_json::to_string(&action_to_wire(action)).expect("wire value is plain JSON")
}

fn action_to_wire(action: &AgentAction) -> Value {
    match &action.kind {
        ActionKind::Observe {
            targets,
            focus_prompt,
        } => {
            let targets: Vec<Value> = targets
                .iter()
                .map(|t| {
                    serde_json::json!({
                        "video_index": t.video_index,
                        "start_time": t.start_time,
                        "end_time": t.end_time,
                        "num_frames": t.num_frames,
                    })
                })
                .collect();
            serde_json::json!({
                "action": "observe",
                "thought": action.thought,
                "params": {"observation_targets": targets, "focus_prompt": focus_prompt},
            })
        }
        ActionKind::GetCaption {
            video_index,
            start_time,
            end_time,
        } => {
            let mut params = serde_json::Map::new();
            params.insert("video_index".into(), (*video_index).into());
            if let Some(s) = start_time {
                params.insert("start_time".into(), serde_json::json!(s));
            }
            if let Some(e) = end_time {
                params.insert("end_time".into(), serde_json::json!(e));
            }
            serde_json::json!({
                "action": "get_caption",
                "thought": action.thought,
                "params": params,
            })
        }
        ActionKind::Answer { final_answer } => serde_json::json!({
            "action": "answer",
            "thought": action.thought,
            "final_answer": final_answer.to_wire_value(),
        }),
    }
}

/// Constraint names recorded during parsing.
///
/// Hard violations reject the action (the engine retries). Soft violations
/// repair and accept the action but still cost the formatting reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Violation {
    NotJson,
    MissingAction,
    UnknownAction,
    MultipleActions,
    MissingParams,
    BadParams,
    EmptyTargets,
    InvalidTimeRange,
    NonPositiveFrames,
    FrameBudgetExceeded,
    MissingFinalAnswer,
    AnswerShape,
    AnswerNotCanonical,
}

impl Violation {
    pub fn name(&self) -> &'static str {
        match self {
            Violation::NotJson => "not_json",
            Violation::MissingAction => "missing_action",
            Violation::UnknownAction => "unknown_action",
            Violation::MultipleActions => "multiple_actions",
            Violation::MissingParams => "missing_params",
            Violation::BadParams => "bad_params",
            Violation::EmptyTargets => "empty_targets",
            Violation::InvalidTimeRange => "invalid_time_range",
            Violation::NonPositiveFrames => "non_positive_frames",
            Violation::FrameBudgetExceeded => "frame_budget_exceeded",
            Violation::MissingFinalAnswer => "missing_final_answer",
            Violation::AnswerShape => "answer_shape",
            Violation::AnswerNotCanonical => "answer_not_canonical",
        }
    }

    /// Soft violations are repaired in place instead of rejected; they still
    /// void the formatting reward.
    pub fn is_soft(&self) -> bool {
        matches!(
            self,
            Violation::MultipleActions | Violation::AnswerNotCanonical
        )
    }

    fn summary(&self) -> &'static str {
        match self {
            Violation::NotJson => "the previous output was not a single valid JSON object",
            Violation::MissingAction => "the JSON object is missing the \"action\" key",
            Violation::UnknownAction => {
                "\"action\" must be one of \"observe\", \"get_caption\", \"answer\""
            }
            Violation::MultipleActions => "only one JSON action may be emitted per turn",
            Violation::MissingParams => "tool calls need a \"params\" object",
            Violation::BadParams => "params fields are missing or have the wrong types",
            Violation::EmptyTargets => "\"observation_targets\" must list at least one target",
            Violation::InvalidTimeRange => "each target needs start_time <= end_time",
            Violation::NonPositiveFrames => "num_frames must be a positive integer",
            Violation::FrameBudgetExceeded => {
                "the summed num_frames of a single observe call must not exceed 128"
            }
            Violation::MissingFinalAnswer => "the answer action needs a \"final_answer\" field",
            Violation::AnswerShape => "final_answer does not match the required shape",
            Violation::AnswerNotCanonical => {
                "final_answer letters must be uppercase and in alphabetical order"
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{reason}")]
pub struct ParseFailure {
    pub reason: String,
}

/// Result of parsing one raw model message.
#[derive(Debug, Clone, PartialEq)]
pub struct ParseOutcome {
    pub result: Result<AgentAction, ParseFailure>,
    /// 1-based attempt number within the turn.
    pub attempt: u32,
    pub violations: Vec<Violation>,
}

impl ParseOutcome {
    pub fn action(&self) -> Option<&AgentAction> {
        self.result.as_ref().ok()
    }

    pub fn violation_names(&self) -> Vec<&'static str> {
        self.violations.iter().map(Violation::name).collect()
    }
}

/// True iff the outcome carries a valid action with zero violations.
/// This boolean is the sole input to the formatting reward.
pub fn is_format_valid(outcome: &ParseOutcome) -> bool {
    outcome.result.is_ok() && outcome.violations.is_empty()
}

/// Parses raw model output (attempt 1). See [`parse_action_attempt`].
pub fn parse_action(raw: &str, task_type: TaskType) -> ParseOutcome {
    parse_action_attempt(raw, task_type, 1)
}

/// Extracts the first well-formed JSON object from `raw` (tolerating prose
/// and code fences around it), maps it onto an [`AgentAction`], and records
/// every violated constraint.
pub fn parse_action_attempt(raw: &str, task_type: TaskType, attempt: u32) -> ParseOutcome {
    let mut violations = Vec::new();
    let objects = extract_objects(raw);
    let Some((first, rest_offset)) = objects.first().cloned() else {
        return ParseOutcome {
            result: Err(ParseFailure {
                reason: Violation::NotJson.summary().to_string(),
            }),
            attempt,
            violations: vec![Violation::NotJson],
        };
    };
    if has_second_action(raw, rest_offset) {
        violations.push(Violation::MultipleActions);
    }

    let action = map_object(&first, task_type, &mut violations);
    let hard = violations.iter().find(|v| !v.is_soft()).copied();
    let result = match (action, hard) {
        (Some(a), None) => Ok(a),
        (_, Some(v)) => Err(ParseFailure {
            reason: v.summary().to_string(),
        }),
        (None, None) => Err(ParseFailure {
            reason: Violation::BadParams.summary().to_string(),
        }),
    };
    ParseOutcome {
        result,
        attempt,
        violations,
    }
}

/// Scans for top-level JSON objects; returns the first parsed object and the
/// byte offset just past it.
fn extract_objects(raw: &str) -> Vec<(Value, usize)> {
    let mut found = Vec::new();
    let mut pos = 0;
    while let Some(rel) = raw[pos..].find('{') {
        let start = pos + rel;
        let mut stream = serde_json::Deserializer::from_str(&raw[start..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(v)) if v.is_object() => {
                let end = start + stream.byte_offset();
                found.push((v, end));
                return found;
            }
            _ => pos = start + 1,
        }
    }
    found
}

fn has_second_action(raw: &str, from: usize) -> bool {
    let mut pos = from;
    while let Some(rel) = raw[pos..].find('{') {
        let start = pos + rel;
        let mut stream = serde_json::Deserializer::from_str(&raw[start..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(v)) if v.is_object() => {
                if v.get("action").is_some() {
                    return true;
                }
                pos = start + stream.byte_offset();
            }
            _ => pos = start + 1,
        }
    }
    false
}

fn map_object(
    obj: &Value,
    task_type: TaskType,
    violations: &mut Vec<Violation>,
) -> Option<AgentAction> {
    let thought = obj
        .get("thought")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let Some(action_name) = obj.get("action").and_then(Value::as_str) else {
        violations.push(Violation::MissingAction);
        return None;
    };
    match action_name {
        "observe" => map_observe(obj, thought, violations),
        "get_caption" => map_get_caption(obj, thought, violations),
        "answer" => map_answer(obj, task_type, thought, violations),
        _ => {
            violations.push(Violation::UnknownAction);
            None
        }
    }
}

fn map_observe(
    obj: &Value,
    thought: String,
    violations: &mut Vec<Violation>,
) -> Option<AgentAction> {
    let Some(params) = obj.get("params").filter(|p| p.is_object()) else {
        violations.push(Violation::MissingParams);
        return None;
    };
    let Some(raw_targets) = params.get("observation_targets").and_then(Value::as_array) else {
        violations.push(Violation::BadParams);
        return None;
    };
    if raw_targets.is_empty() {
        violations.push(Violation::EmptyTargets);
        return None;
    }
    let mut targets = Vec::with_capacity(raw_targets.len());
    for t in raw_targets {
        let video_index = t.get("video_index").and_then(Value::as_u64);
        let start_time = t.get("start_time").and_then(Value::as_f64);
        let end_time = t.get("end_time").and_then(Value::as_f64);
        let num_frames = t.get("num_frames").and_then(Value::as_u64);
        let (Some(video_index), Some(start_time), Some(end_time), Some(num_frames)) =
            (video_index, start_time, end_time, num_frames)
        else {
            violations.push(Violation::BadParams);
            return None;
        };
        if video_index == 0 || video_index > u32::MAX as u64 {
            violations.push(Violation::BadParams);
            return None;
        }
        if num_frames == 0 {
            violations.push(Violation::NonPositiveFrames);
            return None;
        }
        if start_time > end_time {
            violations.push(Violation::InvalidTimeRange);
            return None;
        }
        targets.push(ObserveTarget {
            video_index: video_index as u32,
            start_time,
            end_time,
            num_frames: num_frames.min(u32::MAX as u64) as u32,
        });
    }
    let total: u64 = targets.iter().map(|t| t.num_frames as u64).sum();
    if total > FRAME_BUDGET as u64 {
        violations.push(Violation::FrameBudgetExceeded);
        return None;
    }
    let focus_prompt = params
        .get("focus_prompt")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    Some(AgentAction {
        thought,
        kind: ActionKind::Observe {
            targets,
            focus_prompt,
        },
    })
}

fn map_get_caption(
    obj: &Value,
    thought: String,
    violations: &mut Vec<Violation>,
) -> Option<AgentAction> {
    let Some(params) = obj.get("params").filter(|p| p.is_object()) else {
        violations.push(Violation::MissingParams);
        return None;
    };
    let Some(video_index) = params
        .get("video_index")
        .and_then(Value::as_u64)
        .filter(|&v| v >= 1 && v <= u32::MAX as u64)
    else {
        violations.push(Violation::BadParams);
        return None;
    };
    let start_time = params.get("start_time").and_then(Value::as_f64);
    let end_time = params.get("end_time").and_then(Value::as_f64);
    if let (Some(s), Some(e)) = (start_time, end_time) {
        if s > e {
            violations.push(Violation::InvalidTimeRange);
            return None;
        }
    }
    Some(AgentAction {
        thought,
        kind: ActionKind::GetCaption {
            video_index: video_index as u32,
            start_time,
            end_time,
        },
    })
}

fn map_answer(
    obj: &Value,
    task_type: TaskType,
    thought: String,
    violations: &mut Vec<Violation>,
) -> Option<AgentAction> {
    // The wire format puts final_answer at the top level; a copy nested in
    // params is tolerated.
    let value = obj
        .get("final_answer")
        .or_else(|| obj.get("params").and_then(|p| p.get("final_answer")));
    let Some(value) = value else {
        violations.push(Violation::MissingFinalAnswer);
        return None;
    };
    match canonicalize_answer(value, task_type) {
        Ok(canonical) => {
            if !wire_equivalent(&canonical.to_wire_value(), value) {
                violations.push(Violation::AnswerNotCanonical);
            }
            Some(AgentAction {
                thought,
                kind: ActionKind::Answer {
                    final_answer: canonical,
                },
            })
        }
        Err(_) => {
            violations.push(Violation::AnswerShape);
            None
        }
    }
}

/// Numeric-tolerant JSON equality (86 == 86.0), used to decide whether a
/// final_answer already arrived in canonical form.
fn wire_equivalent(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => x.as_f64() == y.as_f64(),
        (Value::Array(x), Value::Array(y)) => {
            x.len() == y.len() && x.iter().zip(y).all(|(a, b)| wire_equivalent(a, b))
        }
        _ => a == b,
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("final_answer shape error: expected {expected}")]
pub struct ShapeError {
    pub expected: String,
}

/// Repairs and validates a raw `final_answer` value against the episode's
/// task type. Trims whitespace, uppercases letters, sorts multi-select
/// letters, validates the sequence pattern, and coerces 2-element numeric
/// lists to intervals. Idempotent.
pub fn canonicalize_answer(value: &Value, task_type: TaskType) -> Result<GoldAnswer, ShapeError> {
    let expect = |expected: &str| ShapeError {
        expected: expected.to_string(),
    };
    match task_type {
        TaskType::SingleChoice => {
            let s = value
                .as_str()
                .ok_or_else(|| expect("a single option letter like \"D\""))?
                .trim()
                .to_ascii_uppercase();
            let mut chars = s.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) if c.is_ascii_uppercase() => Ok(GoldAnswer::Letter(c.to_string())),
                _ => Err(expect("a single option letter like \"D\"")),
            }
        }
        TaskType::MultiSelect => {
            let letters: Vec<char> = match value {
                Value::String(s) => s.trim().chars().collect(),
                Value::Array(items) => {
                    let mut letters = Vec::new();
                    for item in items {
                        let s = item
                            .as_str()
                            .ok_or_else(|| expect("option letters like \"AC\""))?
                            .trim();
                        letters.extend(s.chars());
                    }
                    letters
                }
                _ => return Err(expect("option letters like \"AC\"")),
            };
            let mut letters: Vec<char> = letters
                .into_iter()
                .map(|c| c.to_ascii_uppercase())
                .collect();
            if letters.is_empty() || !letters.iter().all(char::is_ascii_uppercase) {
                return Err(expect("option letters like \"AC\""));
            }
            letters.sort_unstable();
            letters.dedup();
            Ok(GoldAnswer::LetterSet(letters.into_iter().collect()))
        }
        TaskType::Sequence => {
            let s: String = value
                .as_str()
                .ok_or_else(|| expect("an order like \"3->5->4->2->1\""))?
                .chars()
                .filter(|c| !c.is_whitespace())
                .collect();
            if crate::script::sequence_pattern().is_match(&s) {
                Ok(GoldAnswer::Sequence(s))
            } else {
                Err(expect("an order like \"3->5->4->2->1\""))
            }
        }
        TaskType::Interval => {
            let arr = value
                .as_array()
                .filter(|a| a.len() == 2)
                .ok_or_else(|| expect("[start_seconds, end_seconds] with start < end"))?;
            let (Some(start_s), Some(end_s)) = (arr[0].as_f64(), arr[1].as_f64()) else {
                return Err(expect("[start_seconds, end_seconds] with start < end"));
            };
            if start_s < end_s {
                Ok(GoldAnswer::Interval { start_s, end_s })
            } else {
                Err(expect("[start_seconds, end_seconds] with start < end"))
            }
        }
        TaskType::FreeForm => {
            let s = value
                .as_str()
                .ok_or_else(|| expect("a non-empty answer paragraph"))?
                .trim();
            if s.is_empty() {
                Err(expect("a non-empty answer paragraph"))
            } else {
                Ok(GoldAnswer::FreeText(s.to_string()))
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("retry message requested for a format-valid outcome")]
    RetryOnValid,
}

/// Builds the corrective system message injected between parse attempts.
/// Attempt 1 is terse; later attempts restate a minimal valid example.
pub fn build_retry_message(attempt: u32, failure: &ParseOutcome) -> Result<String, ProtocolError> {
    if is_format_valid(failure) {
        return Err(ProtocolError::RetryOnValid);
    }
    let primary = failure
        .violations
        .first()
        .copied()
        .unwrap_or(Violation::NotJson);
    let mut msg = format!(
        "Format issue on attempt {attempt}. Retrying cleanly. Problem: {}. \
         Respond with exactly one strict JSON object using the keys \"action\", \"thought\", \
         and \"params\" (tool calls) or \"final_answer\" (answers).",
        primary.summary()
    );
    if attempt >= 2 {
        msg.push_str("\nMinimal valid example:\n");
        msg.push_str(minimal_example(primary));
    }
    Ok(msg)
}

fn minimal_example(violation: Violation) -> &'static str {
    match violation {
        Violation::MissingFinalAnswer | Violation::AnswerShape | Violation::AnswerNotCanonical => {
            r#"{"action":"answer","thought":"evidence collected","final_answer":"A"}"#
        }
        Violation::FrameBudgetExceeded
        | Violation::EmptyTargets
        | Violation::InvalidTimeRange
        | Violation::NonPositiveFrames => {
            r#"{"action":"observe","thought":"inspect video 1","params":{"observation_targets":[{"video_index":1,"start_time":0,"end_time":10,"num_frames":16}],"focus_prompt":"describe the main action"}}"#
        }
        _ => r#"{"action":"get_caption","thought":"retrieve dialogue","params":{"video_index":1}}"#,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn caption_call_without_window_means_full_range() {
        let raw = r#"{"action":"get_caption","thought":"get Video 1 dialogue","params":{"video_index":1}}"#;
        let outcome = parse_action(raw, TaskType::SingleChoice);
        let action = outcome.result.expect("valid");
        assert!(outcome.violations.is_empty());
        assert_eq!(
            action.kind,
            ActionKind::GetCaption {
                video_index: 1,
                start_time: None,
                end_time: None
            }
        );
    }

    fn observe_raw(frames: &[u32]) -> String {
        let targets: Vec<String> = frames
            .iter()
            .enumerate()
            .map(|(i, f)| {
                format!(
                    r#"{{"video_index":{},"start_time":0,"end_time":10,"num_frames":{}}}"#,
                    i + 1,
                    f
                )
            })
            .collect();
        format!(
            r#"{{"action":"observe","thought":"t","params":{{"observation_targets":[{}],"focus_prompt":"f"}}}}"#,
            targets.join(",")
        )
    }

    #[test]
    fn frame_budget_boundary_sweep() {
        for (frames, ok) in [
            (vec![64u32, 63], true), // 127
            (vec![64, 64], true),    // 128 exactly passes
            (vec![64, 65], false),   // 129 exceeds
        ] {
            let outcome = parse_action(&observe_raw(&frames), TaskType::SingleChoice);
            assert_eq!(is_format_valid(&outcome), ok, "frames {frames:?}");
            if !ok {
                assert!(outcome.violations.contains(&Violation::FrameBudgetExceeded));
            }
        }
    }

    #[test]
    fn plain_prose_is_a_not_json_failure() {
        let outcome = parse_action(
            "I think we should look at video 2 first.",
            TaskType::Interval,
        );
        assert!(outcome.result.is_err());
        assert_eq!(outcome.violations, vec![Violation::NotJson]);
        assert_eq!(outcome.attempt, 1);
    }

    #[test]
    fn answer_letter_parses_for_single_choice() {
        let raw = r#"{"action":"answer","thought":"done","final_answer":"D"}"#;
        let outcome = parse_action(raw, TaskType::SingleChoice);
        let action = outcome.result.expect("valid");
        assert!(is_format_valid(&ParseOutcome {
            result: Ok(action.clone()),
            attempt: 1,
            violations: vec![]
        }));
        assert_eq!(
            action.kind,
            ActionKind::Answer {
                final_answer: GoldAnswer::Letter("D".into())
            }
        );
    }

    #[test]
    fn object_embedded_in_prose_and_fences_is_extracted() {
        let raw = "Sure — here is my action:\n```json\n{\"action\":\"answer\",\"thought\":\"x\",\"final_answer\":\"B\"}\n```\nThanks!";
        let outcome = parse_action(raw, TaskType::SingleChoice);
        assert!(outcome.result.is_ok());
        assert!(outcome.violations.is_empty());
    }

    #[test]
    fn two_action_objects_take_the_first_and_flag_it() {
        let raw = r#"{"action":"get_caption","thought":"a","params":{"video_index":1}}
                     {"action":"get_caption","thought":"b","params":{"video_index":2}}"#;
        let outcome = parse_action(raw, TaskType::SingleChoice);
        let action = outcome.result.clone().expect("first action accepted");
        assert_eq!(
            action.kind,
            ActionKind::GetCaption {
                video_index: 1,
                start_time: None,
                end_time: None
            }
        );
        assert_eq!(outcome.violations, vec![Violation::MultipleActions]);
        assert!(!is_format_valid(&outcome));
    }

    #[test]
    fn lowercase_unsorted_multi_select_is_repaired_but_not_format_valid() {
        let raw = r#"{"action":"answer","thought":"t","final_answer":"ca"}"#;
        let outcome = parse_action(raw, TaskType::MultiSelect);
        let action = outcome.result.clone().expect("repaired");
        assert_eq!(
            action.kind,
            ActionKind::Answer {
                final_answer: GoldAnswer::LetterSet("AC".into())
            }
        );
        assert_eq!(outcome.violations, vec![Violation::AnswerNotCanonical]);
        assert!(!is_format_valid(&outcome));
    }

    #[test]
    fn canonical_multi_select_string_passes_clean() {
        let raw = r#"{"action":"answer","thought":"t","final_answer":"AC"}"#;
        let outcome = parse_action(raw, TaskType::MultiSelect);
        assert!(is_format_valid(&outcome));
    }

    #[test]
    fn canonicalize_cases() {
        let canon = |v: Value, t| canonicalize_answer(&v, t);
        assert_eq!(
            canon("d".into(), TaskType::SingleChoice).unwrap(),
            GoldAnswer::Letter("D".into())
        );
        assert_eq!(
            canon("CA".into(), TaskType::MultiSelect).unwrap(),
            GoldAnswer::LetterSet("AC".into())
        );
        assert_eq!(
            canon(serde_json::json!(["A", "C"]), TaskType::MultiSelect).unwrap(),
            GoldAnswer::LetterSet("AC".into())
        );
        assert_eq!(
            canon(serde_json::json!([53.2, 57.8]), TaskType::Interval).unwrap(),
            GoldAnswer::Interval {
                start_s: 53.2,
                end_s: 57.8
            }
        );
        assert_eq!(
            canon(" 3 -> 5 ->4->2->1 ".into(), TaskType::Sequence).unwrap(),
            GoldAnswer::Sequence("3->5->4->2->1".into())
        );
        assert!(canon("DD".into(), TaskType::SingleChoice).is_err());
        assert!(canon(serde_json::json!([5.0, 5.0]), TaskType::Interval).is_err());
        assert!(canon("1".into(), TaskType::Sequence).is_err());
    }

    #[test]
    fn canonicalize_is_idempotent() {
        let inputs: Vec<(Value, TaskType)> = vec![
            ("d".into(), TaskType::SingleChoice),
            ("cba".into(), TaskType::MultiSelect),
            (serde_json::json!(["B", "a"]), TaskType::MultiSelect),
            ("2->1".into(), TaskType::Sequence),
            (serde_json::json!([1, 2]), TaskType::Interval),
            ("  some text  ".into(), TaskType::FreeForm),
        ];
        for (value, task_type) in inputs {
            let once = canonicalize_answer(&value, task_type).unwrap();
            let twice = canonicalize_answer(&once.to_wire_value(), task_type).unwrap();
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn retry_message_wording() {
        let failure = parse_action("no json here", TaskType::SingleChoice);
        let msg = build_retry_message(1, &failure).unwrap();
        assert!(msg.contains("Format issue on attempt 1"));
        assert!(!msg.contains("Minimal valid example"));

        let over = parse_action(&observe_raw(&[64, 65]), TaskType::SingleChoice);
        let msg2 = build_retry_message(2, &over).unwrap();
        assert!(msg2.contains("128"));
        assert!(msg2.contains("Minimal valid example"));
    }

    #[test]
    fn retry_message_on_valid_outcome_is_a_misuse_error() {
        let ok = parse_action(
            r#"{"action":"answer","thought":"t","final_answer":"A"}"#,
            TaskType::SingleChoice,
        );
        assert!(matches!(
            build_retry_message(1, &ok),
            Err(ProtocolError::RetryOnValid)
        ));
    }

    // Strategy for generating arbitrary valid actions.
    fn arb_action(task_type: TaskType) -> impl Strategy<Value = AgentAction> {
        let target = (1u32..5, 0.0f64..50.0, 0.0f64..50.0, 1u32..32).prop_map(
            |(video_index, a, b, num_frames)| ObserveTarget {
                video_index,
                start_time: a.min(b),
                end_time: a.max(b),
                num_frames,
            },
        );
        let observe = (proptest::collection::vec(target, 1..4), ".{0,20}").prop_map(
            |(targets, focus_prompt)| ActionKind::Observe {
                targets,
                focus_prompt,
            },
        );
        let caption = (1u32..5, proptest::option::of(0.0f64..100.0)).prop_map(|(v, s)| {
            ActionKind::GetCaption {
                video_index: v,
                start_time: s,
                end_time: s.map(|x| x + 10.0),
            }
        });
        let answer = arb_gold(task_type).prop_map(|g| ActionKind::Answer { final_answer: g });
        (proptest::prop_oneof![observe, caption, answer], ".{0,30}")
            .prop_map(|(kind, thought)| AgentAction { thought, kind })
    }

    fn arb_gold(task_type: TaskType) -> BoxedStrategy<GoldAnswer> {
        match task_type {
            TaskType::SingleChoice => (0u8..4)
                .prop_map(|i| GoldAnswer::Letter(((b'A' + i) as char).to_string()))
                .boxed(),
            TaskType::MultiSelect => proptest::sample::subsequence(vec!['A', 'B', 'C', 'D'], 1..=3)
                .prop_map(|ls| GoldAnswer::LetterSet(ls.into_iter().collect()))
                .boxed(),
            TaskType::Sequence => proptest::sample::select(vec![
                "1->2->3".to_string(),
                "3->5->4->2->1".to_string(),
                "2->1".to_string(),
            ])
            .prop_map(GoldAnswer::Sequence)
            .boxed(),
            TaskType::Interval => (0.0f64..100.0, 0.1f64..50.0)
                .prop_map(|(s, len)| GoldAnswer::Interval {
                    start_s: s,
                    end_s: s + len,
                })
                .boxed(),
            TaskType::FreeForm => "[a-z ]{1,30}"
                .prop_map(|s| GoldAnswer::FreeText(s.trim().to_string() + "x"))
                .boxed(),
        }
    }

    fn arb_task_and_action() -> impl Strategy<Value = (TaskType, AgentAction)> {
        (0usize..5).prop_flat_map(|i| {
            let task_type = TaskType::ALL[i];
            arb_action(task_type).prop_map(move |a| (task_type, a))
        })
    }

    proptest! {
        // Serialize-then-parse is the identity, with zero violations.
        #[test]
        fn round_trip_identity((task_type, action) in arb_task_and_action()) {
            let raw = serialize_action(&action);
            let outcome = parse_action(&raw, task_type);
            let parsed = outcome.result.clone().expect("round trip parses");
            prop_assert!(outcome.violations.is_empty(), "violations: {:?}", outcome.violations);
            prop_assert_eq!(parsed, action);
        }
    }
}
