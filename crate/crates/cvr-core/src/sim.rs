//! The deterministic text-based environment.
//!
//! Tool actions are answered by slicing the script and rendering the hits as
//! natural language. Nothing is ever invented: every content substring in an
//! observation comes from an entry overlapping the queried window, and a
//! query with no evidence returns exactly [`NO_EVIDENCE_SENTINEL`].
//!
//! The LLM-backed variant used for higher-fidelity simulation is kept as a
//! prompt-assembly contract ([`compose_sim_prompt`]); it never performs a
//! network call here.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{ActionKind, AgentAction};
use crate::script::{slice, Channel, ScriptError, SemanticScript};
use crate::text::fmt_seconds;

/// Verbatim reply for windows with no scripted evidence.
pub const NO_EVIDENCE_SENTINEL: &str = "No significant action observed.";

/// System prompt for the LLM-backed simulator, shipped as an asset.
pub const SIMULATOR_SYSTEM_PROMPT: &str = include_str!("../prompts/simulator_system.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationSource {
    SimDeterministic,
    SimLlm,
    RealTool,
}

/// What the environment returned for one tool action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub text: String,
    pub source: ObservationSource,
    /// Wall-clock seconds spent answering the call.
    pub elapsed_s: f64,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("answer actions are terminal and never reach the simulator")]
    AnswerPassedIn,
    #[error(transparent)]
    Script(#[from] ScriptError),
}

/// Answers one tool action from the script. Pure in its inputs; only
/// `elapsed_s` varies between calls.
pub fn simulate(script: &SemanticScript, action: &AgentAction) -> Result<Observation, SimError> {
    let started = Instant::now();
    let text = match &action.kind {
        ActionKind::Answer { .. } => return Err(SimError::AnswerPassedIn),
        ActionKind::Observe {
            targets,
            focus_prompt,
        } => {
            let mut lines = Vec::new();
            let mut any_hit = false;
            if !focus_prompt.is_empty() {
                lines.push(format!("FOCUS: {focus_prompt}"));
            }
            for target in targets {
                let hits = slice(
                    script,
                    target.video_index,
                    (target.start_time, target.end_time),
                    Channel::Events,
                )?;
                if hits.is_empty() {
                    continue;
                }
                any_hit = true;
                let video = script
                    .video(target.video_index)
                    .expect("slice validated the index");
                let t0 = target.start_time.clamp(0.0, video.duration_s);
                let t1 = target.end_time.clamp(0.0, video.duration_s);
                let visuals: Vec<&str> = hits.iter().map(|h| h.text).collect();
                lines.push(format!(
                    "Video {} [{}s-{}s]: {}",
                    target.video_index,
                    fmt_seconds(t0),
                    fmt_seconds(t1),
                    visuals.join(" | ")
                ));
            }
            if !any_hit {
                NO_EVIDENCE_SENTINEL.to_string()
            } else {
                lines.join("\n")
            }
        }
        ActionKind::GetCaption {
            video_index,
            start_time,
            end_time,
        } => {
            let video = script
                .video(*video_index)
                .ok_or(ScriptError::UnknownVideo(*video_index))?;
            let window = (
                start_time.unwrap_or(0.0),
                end_time.unwrap_or(video.duration_s),
            );
            let hits = slice(script, *video_index, window, Channel::Captions)?;
            if hits.is_empty() {
                NO_EVIDENCE_SENTINEL.to_string()
            } else {
                hits.iter()
                    .map(|h| {
                        format!(
                            "[{}s - {}s]: {}",
                            fmt_seconds(h.start_s),
                            fmt_seconds(h.end_s),
                            h.text
                        )
                    })
                    .collect::<Vec<_>>()
                    .join("\n")
            }
        }
    };
    Ok(Observation {
        text,
        source: ObservationSource::SimDeterministic,
        elapsed_s: started.elapsed().as_secs_f64(),
    })
}

/// Assembles the prompt for an LLM-backed simulator call: the verbatim
/// system prompt, the script slice as ground truth, then the action's query.
/// Never touches the network.
pub fn compose_sim_prompt(script_slice: &str, action: &AgentAction) -> String {
    let query = match &action.kind {
        ActionKind::Observe { focus_prompt, .. } if !focus_prompt.is_empty() => {
            focus_prompt.clone()
        }
        ActionKind::Observe { .. } => "Describe what happens in the queried window.".to_string(),
        ActionKind::GetCaption { .. } => {
            "Return the caption lines for the queried window.".to_string()
        }
        ActionKind::Answer { .. } => String::new(),
    };
    format!("{SIMULATOR_SYSTEM_PROMPT}\nGround Truth:\n{script_slice}\n\nQuery:\n{query}\n")
}
