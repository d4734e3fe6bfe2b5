//! The interaction loop: state, transition, termination.
//!
//! The same loop serves simulated training rollouts and tool-backed
//! inference; only the [`Environment`] binding differs. One episode is
//! strictly sequential; distinct episodes share no mutable state.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};
use std::time::Instant;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::policy::{Policy, PolicyError, TurnContext};
use crate::protocol::{
    build_retry_message, canonicalize_answer, is_format_valid, parse_action_attempt,
    serialize_action, ActionKind, AgentAction,
};
use crate::script::{GoldAnswer, SemanticScript, TaskType};
use crate::sim::{simulate, Observation, ObservationSource, SimError};

/// Default task prompt for policies that want one.
pub const DEFAULT_MASTER_PROMPT: &str = include_str!("../prompts/master_default.txt");

/// Marker observation recorded when a turn's retries are exhausted.
pub const INVALID_TURN_NOTE: &str = "INVALID ACTION — skipped";
/// Refusal shown to tool calls once only answers are accepted.
pub const TOLERANCE_REFUSAL: &str =
    "Tool calls are no longer accepted. Respond with the answer action now.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MinToolCallsMode {
    /// Record a violation flag but accept the early answer.
    FlagOnly,
    /// Refuse the answer with a corrective observation and keep looping.
    RejectAnswer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    /// Hard turn limit of the active phase.
    pub t_max: u32,
    /// Answer-only grace window after `t_max`, guarding against infinite
    /// looping.
    pub t_tol: u32,
    pub min_tool_calls: u32,
    /// Parse attempts allowed per turn.
    pub retry_budget: u32,
    pub min_tool_calls_mode: MinToolCallsMode,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            t_max: 20,
            t_tol: 10,
            min_tool_calls: 4,
            retry_budget: 3,
            min_tool_calls_mode: MinToolCallsMode::FlagOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Active,
    Tolerance,
    Terminated,
}

/// One completed (action, observation) pair. `action: None` marks a turn
/// whose retries were exhausted.
#[derive(Debug, Clone)]
pub struct HistoryStep {
    pub action: Option<AgentAction>,
    pub observation: Observation,
}

/// The POMDP state: the query plus the full interaction history.
#[derive(Debug, Clone)]
pub struct EpisodeState {
    /// Question text plus rendered options.
    pub query: String,
    pub history: Vec<HistoryStep>,
    pub turn: u32,
    pub phase: Phase,
}

impl EpisodeState {
    pub fn new(query: String) -> Self {
        Self {
            query,
            history: Vec::new(),
            turn: 0,
            phase: Phase::Active,
        }
    }
}

/// Deterministic rendering of the state for the policy: system prompt,
/// query, every (action, observation) pair in order, and a forced-answer
/// notice in the tolerance phase.
pub fn render_state(state: &EpisodeState, system_prompt: &str) -> String {
    let mut out = String::new();
    if !system_prompt.is_empty() {
        out.push_str(system_prompt.trim_end());
        out.push_str("\n\n");
    }
    out.push_str(&state.query);
    for (i, step) in state.history.iter().enumerate() {
        let action_text = match &step.action {
            Some(a) => serialize_action(a),
            None => INVALID_TURN_NOTE.to_string(),
        };
        out.push_str(&format!(
            "\n[Turn {n}] Action: {action_text}\n[Turn {n}] Observation: {obs}\n",
            n = i + 1,
            obs = step.observation.text
        ));
    }
    if state.phase == Phase::Tolerance {
        out.push_str(
            "\nNOTE: the turn budget is exhausted. Only the answer action is accepted now.\n",
        );
    }
    out
}

/// Everything the engine needs to know about the episode besides the
/// environment itself.
#[derive(Debug, Clone)]
pub struct EpisodeInputs<'a> {
    pub script_id: &'a str,
    pub task_type: TaskType,
    pub question: &'a str,
    pub options: Option<&'a BTreeMap<String, String>>,
    pub system_prompt: &'a str,
}

impl<'a> EpisodeInputs<'a> {
    pub fn from_script(script: &'a SemanticScript, system_prompt: &'a str) -> Self {
        Self {
            script_id: &script.script_id,
            task_type: script.task_type,
            question: &script.question,
            options: script.options.as_ref(),
            system_prompt,
        }
    }

    fn query_block(&self) -> String {
        let mut q = format!("Question: {}\n", self.question);
        if let Some(options) = self.options {
            q.push_str("Options:\n");
            for (letter, text) in options {
                q.push_str(&format!("{letter}. {text}\n"));
            }
        }
        q
    }

    /// Task tag for reports, e.g. `BU` from a script id like `bu-000017`.
    pub fn task_tag(&self) -> String {
        derive_task_tag(self.script_id, self.task_type)
    }
}

pub fn derive_task_tag(script_id: &str, task_type: TaskType) -> String {
    let prefix: &str = script_id
        .split(['-', '_'])
        .next()
        .unwrap_or_default();
    if !prefix.is_empty() && prefix.chars().all(|c| c.is_ascii_alphabetic()) {
        prefix.to_ascii_uppercase()
    } else {
        task_type.as_str().to_ascii_uppercase()
    }
}

#[derive(Debug, Error)]
#[error("environment failure: {0}")]
pub struct EnvError(pub String);

/// Observation source for tool actions. Implementations answer tool calls;
/// they never see answer actions.
pub trait Environment {
    fn execute(&self, action: &AgentAction) -> Result<Observation, EnvError>;
    fn source(&self) -> ObservationSource;
}

/// The script-backed deterministic environment.
pub struct SimEnvironment<'a> {
    pub script: &'a SemanticScript,
}

impl Environment for SimEnvironment<'_> {
    fn execute(&self, action: &AgentAction) -> Result<Observation, EnvError> {
        simulate(self.script, action).map_err(|e| match e {
            SimError::AnswerPassedIn => EnvError("answer action reached the simulator".into()),
            SimError::Script(err) => EnvError(err.to_string()),
        })
    }

    fn source(&self) -> ObservationSource {
        ObservationSource::SimDeterministic
    }
}

/// Per-turn record kept in the trajectory.
#[derive(Debug, Clone)]
pub struct TurnRecord {
    pub turn: u32,
    /// Raw policy output of the final attempt.
    pub raw: String,
    pub action: Option<AgentAction>,
    pub violations: Vec<&'static str>,
    pub retries_used: u32,
    /// Whether the final parse of this turn had zero violations.
    pub format_valid: bool,
    pub observation: Option<Observation>,
    pub policy_elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EpisodeOutcome {
    Answered(GoldAnswer),
    /// Terminated without a valid answer; scores zero correctness.
    Abstained,
    /// Environment or policy transport failure; distinct from ABSTAIN.
    Errored(String),
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub script_id: String,
    pub task_type: TaskType,
    pub task_tag: String,
    pub turns: Vec<TurnRecord>,
    pub outcome: EpisodeOutcome,
    pub tool_calls: u32,
    /// Conjunction over turns of "final parse had zero violations".
    pub format_valid_all: bool,
    /// Set when an answer arrived before `min_tool_calls` tool actions.
    pub min_calls_flag: bool,
}

impl Trajectory {
    pub fn final_answer(&self) -> Option<&GoldAnswer> {
        match &self.outcome {
            EpisodeOutcome::Answered(a) => Some(a),
            _ => None,
        }
    }

    pub fn abstained(&self) -> bool {
        matches!(self.outcome, EpisodeOutcome::Abstained)
    }

    pub fn errored(&self) -> bool {
        matches!(self.outcome, EpisodeOutcome::Errored(_))
    }

    pub fn any_retries(&self) -> bool {
        self.turns.iter().any(|t| t.retries_used > 0)
    }

    /// Per-turn environment latencies, for the latency reports.
    pub fn env_timings(&self) -> Vec<f64> {
        self.turns
            .iter()
            .filter_map(|t| t.observation.as_ref().map(|o| o.elapsed_s))
            .collect()
    }
}

/// Runs one episode to termination.
///
/// Per turn: render the state, query the policy, parse with retries
/// (injecting corrective messages between attempts), execute valid tool
/// actions, and append the (action, observation) pair. An accepted answer
/// terminates. After `t_max` turns only answers are accepted; after
/// `t_max + t_tol` the episode abstains.
pub fn run_episode(
    inputs: &EpisodeInputs,
    policy: &mut dyn Policy,
    env: &dyn Environment,
    config: &EpisodeConfig,
    rng: &mut dyn RngCore,
) -> Trajectory {
    let mut state = EpisodeState::new(inputs.query_block());
    let mut turns: Vec<TurnRecord> = Vec::new();
    let mut tool_calls = 0u32;
    let mut format_valid_all = true;
    let mut min_calls_flag = false;
    let total_budget = config.t_max + config.t_tol;

    let finish = |outcome: EpisodeOutcome,
                  turns: Vec<TurnRecord>,
                  format_valid_all: bool,
                  tool_calls: u32,
                  min_calls_flag: bool| Trajectory {
        script_id: inputs.script_id.to_string(),
        task_type: inputs.task_type,
        task_tag: inputs.task_tag(),
        turns,
        outcome,
        tool_calls,
        format_valid_all,
        min_calls_flag,
    };

    for turn in 1..=total_budget {
        state.turn = turn;
        state.phase = if turn <= config.t_max {
            Phase::Active
        } else {
            Phase::Tolerance
        };
        let base_rendering = render_state(&state, inputs.system_prompt);

        // Parse-with-retries loop for this turn.
        let mut rendering = base_rendering.clone();
        let mut attempt = 1u32;
        let mut policy_elapsed = 0.0f64;
        let (outcome, raw) = loop {
            let ctx = TurnContext {
                rendered_state: &rendering,
                question: inputs.question,
                turn_index: state.history.len(),
                history: &state.history,
                tolerance: state.phase == Phase::Tolerance,
            };
            let started = Instant::now();
            let raw = match policy.decide(&ctx, rng) {
                Ok(raw) => raw,
                Err(e) => {
                    return finish(
                        EpisodeOutcome::Errored(policy_error_text(&e)),
                        turns,
                        format_valid_all,
                        tool_calls,
                        min_calls_flag,
                    )
                }
            };
            policy_elapsed += started.elapsed().as_secs_f64();
            let outcome = parse_action_attempt(&raw, inputs.task_type, attempt);
            if outcome.result.is_ok() || attempt >= config.retry_budget {
                break (outcome, raw);
            }
            let retry_message =
                build_retry_message(attempt, &outcome).expect("outcome is a failure");
            rendering = format!("{base_rendering}\n{retry_message}\n");
            attempt += 1;
        };

        let retries_used = attempt - 1;
        let turn_format_valid = is_format_valid(&outcome);
        format_valid_all &= turn_format_valid;
        let mut record = TurnRecord {
            turn,
            raw,
            action: outcome.action().cloned(),
            violations: outcome.violation_names(),
            retries_used,
            format_valid: turn_format_valid,
            observation: None,
            policy_elapsed_s: policy_elapsed,
        };

        let Ok(action) = outcome.result else {
            // Retries exhausted: the turn is consumed and marked failed so
            // history length stays consistent.
            let note = engine_note(INVALID_TURN_NOTE, env.source());
            record.observation = Some(note.clone());
            turns.push(record);
            state.history.push(HistoryStep {
                action: None,
                observation: note,
            });
            continue;
        };

        if action.is_answer() {
            let ActionKind::Answer { final_answer } = &action.kind else {
                unreachable!()
            };
            if tool_calls < config.min_tool_calls {
                min_calls_flag = true;
                if config.min_tool_calls_mode == MinToolCallsMode::RejectAnswer {
                    let note = engine_note(
                        &format!(
                            "Answer refused: perform at least {} tool interactions before answering.",
                            config.min_tool_calls
                        ),
                        env.source(),
                    );
                    record.observation = Some(note.clone());
                    turns.push(record);
                    state.history.push(HistoryStep {
                        action: Some(action),
                        observation: note,
                    });
                    continue;
                }
            }
            let answer = final_answer.clone();
            turns.push(record);
            return finish(
                EpisodeOutcome::Answered(answer),
                turns,
                format_valid_all,
                tool_calls,
                min_calls_flag,
            );
        }

        // Tool action.
        if state.phase == Phase::Tolerance {
            let note = engine_note(TOLERANCE_REFUSAL, env.source());
            record.observation = Some(note.clone());
            turns.push(record);
            state.history.push(HistoryStep {
                action: Some(action),
                observation: note,
            });
            continue;
        }
        match env.execute(&action) {
            Ok(observation) => {
                tool_calls += 1;
                record.observation = Some(observation.clone());
                turns.push(record);
                state.history.push(HistoryStep {
                    action: Some(action),
                    observation,
                });
            }
            Err(EnvError(message)) => {
                turns.push(record);
                return finish(
                    EpisodeOutcome::Errored(message),
                    turns,
                    format_valid_all,
                    tool_calls,
                    min_calls_flag,
                );
            }
        }
    }

    finish(
        EpisodeOutcome::Abstained,
        turns,
        format_valid_all,
        tool_calls,
        min_calls_flag,
    )
}

fn engine_note(text: &str, source: ObservationSource) -> Observation {
    Observation {
        text: text.to_string(),
        source,
        elapsed_s: 0.0,
    }
}

fn policy_error_text(e: &PolicyError) -> String {
    format!("policy failure: {e}")
}

// ---------------------------------------------------------------------------
// Trajectory log (JSONL)
// ---------------------------------------------------------------------------

/// Writes the per-turn records followed by the terminal record, one JSON
/// object per line.
pub fn write_trajectory_jsonl<W: Write>(
    trajectory: &Trajectory,
    gold: Option<&GoldAnswer>,
    w: &mut W,
) -> io::Result<()> {
    for t in &trajectory.turns {
        let record = serde_json::json!({
            "turn": t.turn,
            "action": t.action.as_ref().map(|a| serde_json::from_str::<Value>(&serialize_action(a)).expect("wire json")),
            "observation": t.observation.as_ref().map(|o| o.text.clone()),
            "retries": t.retries_used,
            "format_valid": t.format_valid,
            "violations": t.violations,
            "policy_elapsed_s": t.policy_elapsed_s,
            "elapsed_s": t.observation.as_ref().map(|o| o.elapsed_s).unwrap_or(0.0),
        });
        writeln!(w, "{record}")?;
    }
    let terminal = serde_json::json!({
        "script_id": trajectory.script_id,
        "task_tag": trajectory.task_tag,
        "task_type": trajectory.task_type,
        "gold": gold.map(|g| serde_json::to_value(g).expect("gold json")),
        "final_answer": trajectory.final_answer().map(GoldAnswer::to_wire_value),
        "tool_calls": trajectory.tool_calls,
        "turns": trajectory.turns.len(),
        "abstained": trajectory.abstained(),
        "error": match &trajectory.outcome {
            EpisodeOutcome::Errored(m) => Some(m.clone()),
            _ => None,
        },
    });
    writeln!(w, "{terminal}")
}

/// Summary of one logged episode, as read back from a JSONL log.
#[derive(Debug, Clone)]
pub struct TrajectorySummary {
    pub script_id: String,
    pub task_tag: String,
    pub task_type: TaskType,
    pub gold: Option<GoldAnswer>,
    pub final_answer: Option<GoldAnswer>,
    pub abstained: bool,
    pub errored: bool,
    pub tool_calls: u64,
    pub turns: u64,
    /// Environment latency of each tool call, in order.
    pub env_timings: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum LogReadError {
    #[error("line {0}: {1}")]
    BadLine(usize, String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Reads every episode from a JSONL trajectory log. Turn records accumulate
/// into the following terminal record; several episodes may share a file.
pub fn read_trajectory_log<R: BufRead>(reader: R) -> Result<Vec<TrajectorySummary>, LogReadError> {
    let mut out = Vec::new();
    let mut timings: Vec<f64> = Vec::new();
    for (ln, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line)
            .map_err(|e| LogReadError::BadLine(ln + 1, e.to_string()))?;
        if value.get("abstained").is_none() {
            // Turn record.
            if let Some(elapsed) = value.get("elapsed_s").and_then(Value::as_f64) {
                if value
                    .get("observation")
                    .map(|o| !o.is_null())
                    .unwrap_or(false)
                {
                    timings.push(elapsed);
                }
            }
            continue;
        }
        let task_type: TaskType = serde_json::from_value(
            value
                .get("task_type")
                .cloned()
                .unwrap_or_else(|| Value::String("single_choice".into())),
        )
        .map_err(|e| LogReadError::BadLine(ln + 1, e.to_string()))?;
        let gold = match value.get("gold") {
            Some(Value::Null) | None => None,
            Some(g) => Some(
                serde_json::from_value::<GoldAnswer>(g.clone())
                    .map_err(|e| LogReadError::BadLine(ln + 1, e.to_string()))?,
            ),
        };
        let final_answer = match value.get("final_answer") {
            Some(Value::Null) | None => None,
            Some(v) => canonicalize_answer(v, task_type).ok(),
        };
        out.push(TrajectorySummary {
            script_id: value
                .get("script_id")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string(),
            task_tag: value
                .get("task_tag")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string(),
            task_type,
            gold,
            final_answer,
            abstained: value
                .get("abstained")
                .and_then(Value::as_bool)
                .unwrap_or(false),
            errored: value.get("error").map(|e| !e.is_null()).unwrap_or(false),
            tool_calls: value.get("tool_calls").and_then(Value::as_u64).unwrap_or(0),
            turns: value.get("turns").and_then(Value::as_u64).unwrap_or(0),
            env_timings: std::mem::take(&mut timings),
        });
    }
    Ok(out)
}
