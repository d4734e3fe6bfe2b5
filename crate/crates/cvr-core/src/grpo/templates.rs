//! Parameterized action templates the tabular policy chooses between.
//!
//! Templates carry slots ("full range of video i", "the window named in the
//! question") that are instantiated against the current script and the
//! interaction history at decision time. The evidence-driven answer
//! templates implement the tool-then-answer patterns the policy is meant to
//! learn: they only answer well when the right evidence was gathered first.

use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

use crate::episode::HistoryStep;
use crate::policy::TurnContext;
use crate::protocol::{ActionKind, AgentAction, ObserveTarget, FRAME_BUDGET};
use crate::script::{GoldAnswer, SemanticScript, TaskType};

/// The slot-bearing template variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemplateKind {
    /// Caption probe. Interval tasks alternate between the reference window
    /// of video 1 and the full range of video 2; other tasks cycle videos.
    ProbeCaptions,
    /// Full-range visual probe of the videos in turn order.
    ProbeVisual,
    /// One observe call covering the full range of every video.
    SurveyAll,
    /// Answer derived from evidence gathered so far.
    AnswerEvidence,
    /// Fixed fallback answer of the right shape.
    AnswerDefault,
}

impl TemplateKind {
    pub fn name(&self) -> &'static str {
        match self {
            TemplateKind::ProbeCaptions => "probe_captions",
            TemplateKind::ProbeVisual => "probe_visual",
            TemplateKind::SurveyAll => "survey_all",
            TemplateKind::AnswerEvidence => "answer_evidence",
            TemplateKind::AnswerDefault => "answer_default",
        }
    }
}

/// Ordered template set shared by the policy and the optimizer.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    kinds: Vec<TemplateKind>,
}

impl TemplateSet {
    pub fn standard() -> Self {
        Self {
            kinds: vec![
                TemplateKind::ProbeCaptions,
                TemplateKind::ProbeVisual,
                TemplateKind::SurveyAll,
                TemplateKind::AnswerEvidence,
                TemplateKind::AnswerDefault,
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn kinds(&self) -> &[TemplateKind] {
        &self.kinds
    }

    pub fn names(&self) -> Vec<String> {
        self.kinds.iter().map(|k| k.name().to_string()).collect()
    }
}

/// The slice of script facts templates may use. Owning a copy keeps the
/// policy free of script lifetimes.
#[derive(Debug, Clone)]
pub struct ScriptView {
    pub task_type: TaskType,
    pub question: String,
    pub durations: Vec<f64>,
    pub option_letters: Vec<char>,
}

impl ScriptView {
    pub fn from_script(script: &SemanticScript) -> Self {
        Self {
            task_type: script.task_type,
            question: script.question.clone(),
            durations: script.videos.iter().map(|v| v.duration_s).collect(),
            option_letters: script
                .options
                .as_ref()
                .map(|o| o.keys().filter_map(|k| k.chars().next()).collect())
                .unwrap_or_default(),
        }
    }

    pub fn video_count(&self) -> usize {
        self.durations.len()
    }
}

#[derive(Debug, Error)]
#[error("template instantiation failed: {0}")]
pub struct InstantiationError(pub String);

/// Instantiates one template against the script and history.
pub fn instantiate(
    kind: TemplateKind,
    view: &ScriptView,
    ctx: &TurnContext,
) -> Result<AgentAction, InstantiationError> {
    let n = view.video_count();
    if n == 0 {
        return Err(InstantiationError("script has no videos".into()));
    }
    match kind {
        TemplateKind::ProbeCaptions => Ok(probe_captions(view, ctx, n)),
        TemplateKind::ProbeVisual => {
            let video = (ctx.turn_index % n) as u32 + 1;
            Ok(observe_action(
                vec![full_target(view, video, 16)],
                "Describe the main actions in this video.",
                format!("Scan video {video} visuals."),
            ))
        }
        TemplateKind::SurveyAll => {
            let frames = (FRAME_BUDGET / n as u32).clamp(1, 16);
            let targets = (1..=n as u32)
                .map(|v| full_target(view, v, frames))
                .collect();
            Ok(observe_action(
                targets,
                "Summarize what happens in each video.",
                "Survey every video end to end.".to_string(),
            ))
        }
        TemplateKind::AnswerEvidence => answer_evidence(view, ctx),
        TemplateKind::AnswerDefault => Ok(answer_action(
            default_answer(view),
            "Commit to the default answer.",
        )),
    }
}

/// The safe action used when a template cannot be instantiated.
pub fn fallback_action() -> AgentAction {
    AgentAction {
        thought: "Fall back to retrieving video 1 captions.".into(),
        kind: ActionKind::GetCaption {
            video_index: 1,
            start_time: None,
            end_time: None,
        },
    }
}

fn full_target(view: &ScriptView, video_index: u32, num_frames: u32) -> ObserveTarget {
    let duration = view.durations[(video_index - 1) as usize];
    ObserveTarget {
        video_index,
        start_time: 0.0,
        end_time: duration,
        num_frames,
    }
}

fn observe_action(targets: Vec<ObserveTarget>, focus: &str, thought: String) -> AgentAction {
    AgentAction {
        thought,
        kind: ActionKind::Observe {
            targets,
            focus_prompt: focus.to_string(),
        },
    }
}

fn answer_action(final_answer: GoldAnswer, thought: &str) -> AgentAction {
    AgentAction {
        thought: thought.to_string(),
        kind: ActionKind::Answer { final_answer },
    }
}

fn probe_captions(view: &ScriptView, ctx: &TurnContext, n: usize) -> AgentAction {
    if view.task_type == TaskType::Interval {
        // Alternate: reference window of video 1, then video 2 in full.
        if ctx.turn_index.is_multiple_of(2) {
            if let Some((a, b)) = reference_window(&view.question) {
                return AgentAction {
                    thought: "Read the captions of the reference window in video 1.".into(),
                    kind: ActionKind::GetCaption {
                        video_index: 1,
                        start_time: Some(a),
                        end_time: Some(b),
                    },
                };
            }
        }
        let target = n.min(2) as u32;
        return AgentAction {
            thought: format!("Read all captions of video {target}."),
            kind: ActionKind::GetCaption {
                video_index: target,
                start_time: None,
                end_time: None,
            },
        };
    }
    let video = (ctx.turn_index % n) as u32 + 1;
    AgentAction {
        thought: format!("Read all captions of video {video}."),
        kind: ActionKind::GetCaption {
            video_index: video,
            start_time: None,
            end_time: None,
        },
    }
}

fn default_answer(view: &ScriptView) -> GoldAnswer {
    match view.task_type {
        TaskType::SingleChoice => GoldAnswer::Letter(
            view.option_letters
                .first()
                .copied()
                .unwrap_or('A')
                .to_string(),
        ),
        TaskType::MultiSelect => GoldAnswer::LetterSet(
            view.option_letters
                .first()
                .copied()
                .unwrap_or('A')
                .to_string(),
        ),
        TaskType::Sequence => GoldAnswer::Sequence(identity_sequence(view.video_count())),
        TaskType::Interval => GoldAnswer::Interval {
            start_s: 0.0,
            end_s: 1.0,
        },
        TaskType::FreeForm => GoldAnswer::FreeText("No notable differences observed.".into()),
    }
}

fn identity_sequence(n: usize) -> String {
    (1..=n.max(2))
        .map(|i| i.to_string())
        .collect::<Vec<_>>()
        .join("->")
}

fn answer_evidence(
    view: &ScriptView,
    ctx: &TurnContext,
) -> Result<AgentAction, InstantiationError> {
    match view.task_type {
        TaskType::MultiSelect | TaskType::SingleChoice => {
            let phrase = quoted_phrase(&view.question)
                .ok_or_else(|| InstantiationError("question quotes no target phrase".into()))?;
            let mut letters: Vec<char> = matching_videos(ctx.history, &phrase)
                .into_iter()
                .filter_map(|v| {
                    let idx = (v - 1) as usize;
                    view.option_letters.get(idx).copied()
                })
                .collect();
            letters.sort_unstable();
            letters.dedup();
            let answer = match view.task_type {
                TaskType::SingleChoice => GoldAnswer::Letter(
                    letters
                        .first()
                        .copied()
                        .unwrap_or_else(|| view.option_letters.first().copied().unwrap_or('A'))
                        .to_string(),
                ),
                _ => {
                    if letters.is_empty() {
                        return Err(InstantiationError("no video matched the phrase".into()));
                    }
                    GoldAnswer::LetterSet(letters.into_iter().collect())
                }
            };
            Ok(answer_action(answer, "Answer from the matched evidence."))
        }
        TaskType::Interval => {
            let (a, b) = reference_window(&view.question)
                .ok_or_else(|| InstantiationError("question names no reference window".into()))?;
            let reference = caption_lines(ctx.history, 1)
                .into_iter()
                .filter(|l| l.start <= b && l.end >= a)
                .map(|l| l.text)
                .collect::<Vec<_>>()
                .join(" ");
            if reference.is_empty() {
                return Err(InstantiationError(
                    "reference window captions not gathered yet".into(),
                ));
            }
            let candidates = caption_lines(ctx.history, 2);
            let best = candidates
                .into_iter()
                .map(|l| (word_overlap(&reference, &l.text), l))
                .filter(|(score, _)| *score > 0)
                .max_by_key(|(score, l)| (*score, std::cmp::Reverse((l.start * 1000.0) as i64)));
            let Some((_, line)) = best else {
                return Err(InstantiationError(
                    "no matching caption line in video 2".into(),
                ));
            };
            let spanned = line.start < line.end;
            if !spanned {
                return Err(InstantiationError("matched line has no span".into()));
            }
            Ok(answer_action(
                GoldAnswer::Interval {
                    start_s: line.start,
                    end_s: line.end,
                },
                "Answer with the aligned caption span.",
            ))
        }
        TaskType::Sequence => Ok(answer_action(
            GoldAnswer::Sequence(identity_sequence(view.video_count())),
            "Answer with the reconstructed order.",
        )),
        TaskType::FreeForm => Ok(answer_action(
            GoldAnswer::FreeText(
                "The two procedures differ in tools and preparation order.".into(),
            ),
            "Answer with the comparative summary.",
        )),
    }
}

fn quoted_phrase(question: &str) -> Option<String> {
    let first = question.find('"')?;
    let last = question.rfind('"')?;
    if last <= first + 1 {
        return None;
    }
    Some(question[first + 1..last].to_string())
}

fn reference_window(question: &str) -> Option<(f64, f64)> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(r"between ([0-9]+(?:\.[0-9]+)?)s and ([0-9]+(?:\.[0-9]+)?)s in Video 1")
            .expect("static regex")
    });
    let caps = re.captures(question)?;
    let a: f64 = caps[1].parse().ok()?;
    let b: f64 = caps[2].parse().ok()?;
    (a < b).then_some((a, b))
}

/// Video indices whose observe evidence mentions the phrase. Observation
/// lines carry a `Video {i} [a-b]: ...` header.
fn matching_videos(history: &[HistoryStep], phrase: &str) -> Vec<u32> {
    let mut videos = Vec::new();
    for step in history {
        for line in step.observation.text.lines() {
            let Some(rest) = line.strip_prefix("Video ") else {
                continue;
            };
            let Some((index_text, body)) = rest.split_once(' ') else {
                continue;
            };
            let Ok(video) = index_text.parse::<u32>() else {
                continue;
            };
            if body.contains(phrase) && !videos.contains(&video) {
                videos.push(video);
            }
        }
    }
    videos.sort_unstable();
    videos
}

struct CaptionLine {
    start: f64,
    end: f64,
    text: String,
}

/// Caption lines previously retrieved for `video_index`, parsed back from
/// the `[a s - b s]: text` rendering.
fn caption_lines(history: &[HistoryStep], video_index: u32) -> Vec<CaptionLine> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| {
        Regex::new(r"^\[([0-9]+(?:\.[0-9]+)?)s - ([0-9]+(?:\.[0-9]+)?)s\]: (.*)$")
            .expect("static regex")
    });
    let mut lines = Vec::new();
    for step in history {
        let from_target_video = matches!(
            step.action.as_ref().map(|a| &a.kind),
            Some(ActionKind::GetCaption { video_index: v, .. }) if *v == video_index
        );
        if !from_target_video {
            continue;
        }
        for line in step.observation.text.lines() {
            if let Some(caps) = re.captures(line) {
                lines.push(CaptionLine {
                    start: caps[1].parse().unwrap_or(0.0),
                    end: caps[2].parse().unwrap_or(0.0),
                    text: caps[3].to_string(),
                });
            }
        }
    }
    lines
}

fn word_overlap(a: &str, b: &str) -> usize {
    let words = |s: &str| {
        s.split(|c: char| !c.is_ascii_alphanumeric())
            .filter(|w| w.len() >= 4)
            .map(str::to_ascii_lowercase)
            .collect::<std::collections::BTreeSet<String>>()
    };
    words(a).intersection(&words(b)).count()
}
