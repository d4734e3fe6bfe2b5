//! Semantic-script environments: the text stand-ins for sets of videos.
//!
//! A [`SemanticScript`] bundles a question, its gold answer, and per-video
//! timed events and captions. Scripts are validated once and immutable
//! afterwards; [`slice`] is the lookup primitive the simulator is built on.

pub mod generate;

use std::collections::BTreeMap;
use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Answer shape of a script's question.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    SingleChoice,
    MultiSelect,
    Sequence,
    Interval,
    FreeForm,
}

impl TaskType {
    pub const ALL: [TaskType; 5] = [
        TaskType::SingleChoice,
        TaskType::MultiSelect,
        TaskType::Sequence,
        TaskType::Interval,
        TaskType::FreeForm,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskType::SingleChoice => "single_choice",
            TaskType::MultiSelect => "multi_select",
            TaskType::Sequence => "sequence",
            TaskType::Interval => "interval",
            TaskType::FreeForm => "free_form",
        }
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Gold answer, tagged by shape. Wire form is `{"kind": ..., "value": ...}`.
#[derive(Debug, Clone, PartialEq)]
pub enum GoldAnswer {
    /// One uppercase option letter, e.g. `"D"`.
    Letter(String),
    /// Uppercase letters in strictly ascending order, e.g. `"AC"`.
    LetterSet(String),
    /// Arrow-joined ordering like `"3->5->4->2->1"`.
    Sequence(String),
    /// Temporal interval in seconds, `start_s < end_s`.
    Interval { start_s: f64, end_s: f64 },
    /// Free text; stored but never auto-scored.
    FreeText(String),
}

impl GoldAnswer {
    pub fn kind_str(&self) -> &'static str {
        match self {
            GoldAnswer::Letter(_) => "letter",
            GoldAnswer::LetterSet(_) => "letter_set",
            GoldAnswer::Sequence(_) => "sequence",
            GoldAnswer::Interval { .. } => "interval",
            GoldAnswer::FreeText(_) => "free_text",
        }
    }

    /// The task type this answer shape belongs to.
    pub fn task_type(&self) -> TaskType {
        match self {
            GoldAnswer::Letter(_) => TaskType::SingleChoice,
            GoldAnswer::LetterSet(_) => TaskType::MultiSelect,
            GoldAnswer::Sequence(_) => TaskType::Sequence,
            GoldAnswer::Interval { .. } => TaskType::Interval,
            GoldAnswer::FreeText(_) => TaskType::FreeForm,
        }
    }

    /// JSON value in the answer wire form used by the action protocol:
    /// strings for discrete kinds, `[start, end]` for intervals.
    pub fn to_wire_value(&self) -> serde_json::Value {
        match self {
            GoldAnswer::Letter(s) | GoldAnswer::LetterSet(s) | GoldAnswer::Sequence(s) => {
                serde_json::Value::String(s.clone())
            }
            GoldAnswer::Interval { start_s, end_s } => serde_json::json!([start_s, end_s]),
            GoldAnswer::FreeText(s) => serde_json::Value::String(s.clone()),
        }
    }
}

impl Serialize for GoldAnswer {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut m = serde_json::Map::new();
        m.insert("kind".into(), self.kind_str().into());
        let value = match self {
            GoldAnswer::Letter(s) | GoldAnswer::LetterSet(s) | GoldAnswer::Sequence(s) => {
                serde_json::Value::String(s.clone())
            }
            GoldAnswer::Interval { start_s, end_s } => serde_json::json!([start_s, end_s]),
            GoldAnswer::FreeText(s) => serde_json::Value::String(s.clone()),
        };
        m.insert("value".into(), value);
        serde_json::Value::Object(m).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for GoldAnswer {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Tagged {
            kind: String,
            value: serde_json::Value,
        }
        let t = Tagged::deserialize(deserializer)?;
        let text = |v: &serde_json::Value| -> Result<String, D::Error> {
            v.as_str()
                .map(str::to_owned)
                .ok_or_else(|| D::Error::custom("gold value must be a string"))
        };
        match t.kind.as_str() {
            "letter" => Ok(GoldAnswer::Letter(text(&t.value)?)),
            "letter_set" => Ok(GoldAnswer::LetterSet(text(&t.value)?)),
            "sequence" => Ok(GoldAnswer::Sequence(text(&t.value)?)),
            "free_text" => Ok(GoldAnswer::FreeText(text(&t.value)?)),
            "interval" => {
                let arr = t
                    .value
                    .as_array()
                    .filter(|a| a.len() == 2)
                    .ok_or_else(|| D::Error::custom("interval value must be [start, end]"))?;
                let num = |v: &serde_json::Value| {
                    v.as_f64()
                        .ok_or_else(|| D::Error::custom("interval bounds must be numbers"))
                };
                Ok(GoldAnswer::Interval {
                    start_s: num(&arr[0])?,
                    end_s: num(&arr[1])?,
                })
            }
            other => Err(D::Error::custom(format!("unknown gold kind `{other}`"))),
        }
    }
}

/// A temporally grounded visual fact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedEvent {
    pub start_s: f64,
    pub end_s: f64,
    pub visual: String,
}

/// A caption/narration line. Empty text marks a silent interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedCaption {
    pub start_s: f64,
    pub end_s: f64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoScript {
    /// 1-based position of the video in the script.
    pub video_index: u32,
    pub duration_s: f64,
    pub events: Vec<TimedEvent>,
    pub captions: Vec<TimedCaption>,
}

/// One validated environment instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticScript {
    pub script_id: String,
    pub task_type: TaskType,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<BTreeMap<String, String>>,
    pub gold: GoldAnswer,
    pub videos: Vec<VideoScript>,
}

impl SemanticScript {
    pub fn video(&self, video_index: u32) -> Option<&VideoScript> {
        self.videos.iter().find(|v| v.video_index == video_index)
    }

    pub fn video_count(&self) -> usize {
        self.videos.len()
    }

    /// Compact canonical JSON, one line, stable field order.
    pub fn to_canonical_string(&self) -> String {
        serde_json::to_string(self).expect("script serialization cannot fail")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationError {
    /// Dotted path into the document, e.g. `videos[1].events[3].end_s`.
    pub path: String,
    pub message: String,
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Every violation found in a document, not just the first.
#[derive(Debug, Clone, Error)]
pub struct ValidationErrors(pub Vec<ValidationError>);

impl fmt::Display for ValidationErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("unknown video_index {0}")]
    UnknownVideo(u32),
    #[error("invalid window: start {0} exceeds end {1}")]
    InvalidWindow(f64, f64),
}

/// Checks a parsed script document and returns the typed script, or every
/// violation found.
pub fn validate_script(raw: &serde_json::Value) -> Result<SemanticScript, ValidationErrors> {
    let deserializer = raw.clone();
    let script: SemanticScript = match serde_path_to_error::deserialize(
        &mut serde_json::Deserializer::from_str(&deserializer.to_string()),
    ) {
        Ok(s) => s,
        Err(e) => {
            return Err(ValidationErrors(vec![ValidationError {
                path: e.path().to_string(),
                message: e.inner().to_string(),
            }]))
        }
    };
    check_script(&script).map(|()| script)
}

fn push_err(errors: &mut Vec<ValidationError>, path: String, message: &str) {
    errors.push(ValidationError {
        path,
        message: message.to_string(),
    });
}

/// Semantic checks over an already-typed script.
pub fn check_script(script: &SemanticScript) -> Result<(), ValidationErrors> {
    let mut errors = Vec::new();
    let err = push_err;

    if script.script_id.is_empty() {
        err(&mut errors, "script_id".into(), "must be non-empty");
    }
    if script.videos.len() < 2 {
        err(&mut errors, "videos".into(), "at least 2 videos required");
    }

    let wants_options = matches!(
        script.task_type,
        TaskType::SingleChoice | TaskType::MultiSelect
    );
    match (&script.options, wants_options) {
        (None, true) => err(
            &mut errors,
            "options".into(),
            "options required for choice task types",
        ),
        (Some(_), false) => err(
            &mut errors,
            "options".into(),
            "options only allowed for choice task types",
        ),
        (Some(options), true) => {
            if options.is_empty() {
                err(
                    &mut errors,
                    "options".into(),
                    "must contain at least one option",
                );
            }
            for key in options.keys() {
                if !(key.len() == 1 && key.chars().all(|c| c.is_ascii_uppercase())) {
                    err(
                        &mut errors,
                        format!("options.{key}"),
                        "option key must be a single uppercase letter",
                    );
                }
            }
        }
        (None, false) => {}
    }

    if script.gold.task_type() != script.task_type {
        err(&mut errors, "gold".into(), "gold/task_type mismatch");
    }
    check_gold_shape(&script.gold, &mut errors);

    for (vi, video) in script.videos.iter().enumerate() {
        let vp = format!("videos[{vi}]");
        if video.video_index != vi as u32 + 1 {
            err(
                &mut errors,
                format!("{vp}.video_index"),
                "must equal 1-based position in the videos list",
            );
        }
        let positive_duration = video.duration_s > 0.0;
        if !positive_duration {
            err(&mut errors, format!("{vp}.duration_s"), "must be > 0");
        }
        for (ei, event) in video.events.iter().enumerate() {
            let ep = format!("{vp}.events[{ei}]");
            check_span(
                event.start_s,
                event.end_s,
                video.duration_s,
                &ep,
                &mut errors,
            );
            if event.visual.is_empty() {
                errors.push(ValidationError {
                    path: format!("{ep}.visual"),
                    message: "must be non-empty".into(),
                });
            }
        }
        let sorted = video
            .events
            .windows(2)
            .all(|w| (w[0].start_s, w[0].end_s) <= (w[1].start_s, w[1].end_s));
        if !sorted {
            err(
                &mut errors,
                format!("{vp}.events"),
                "must be sorted by start_s ascending (ties by end_s)",
            );
        }
        for (ci, caption) in video.captions.iter().enumerate() {
            let cp = format!("{vp}.captions[{ci}]");
            check_span(
                caption.start_s,
                caption.end_s,
                video.duration_s,
                &cp,
                &mut errors,
            );
        }
    }

    if errors.is_empty() {
        Ok(())
    } else {
        Err(ValidationErrors(errors))
    }
}

fn check_gold_shape(gold: &GoldAnswer, errors: &mut Vec<ValidationError>) {
    let mut err = |message: String| {
        errors.push(ValidationError {
            path: "gold.value".into(),
            message,
        })
    };
    match gold {
        GoldAnswer::Letter(s) => {
            if !(s.len() == 1 && s.chars().all(|c| c.is_ascii_uppercase())) {
                err("must be one uppercase letter".into());
            }
        }
        GoldAnswer::LetterSet(s) => {
            let chars: Vec<char> = s.chars().collect();
            let ok = !chars.is_empty()
                && chars.iter().all(|c| c.is_ascii_uppercase())
                && chars.windows(2).all(|w| w[0] < w[1]);
            if !ok {
                err("must be uppercase letters in strictly ascending order".into());
            }
        }
        GoldAnswer::Sequence(s) => {
            if !sequence_pattern().is_match(s) {
                err("must match \\d+(->\\d+)+".into());
            }
        }
        GoldAnswer::Interval { start_s, end_s } => {
            let ordered = start_s < end_s;
            if !ordered {
                err(format!("interval start {start_s} must be < end {end_s}"));
            }
        }
        GoldAnswer::FreeText(_) => {}
    }
}

fn check_span(start: f64, end: f64, duration: f64, path: &str, errors: &mut Vec<ValidationError>) {
    if start < 0.0 {
        errors.push(ValidationError {
            path: format!("{path}.start_s"),
            message: "must be >= 0".into(),
        });
    }
    if end < start {
        errors.push(ValidationError {
            path: format!("{path}.end_s"),
            message: format!("end {end} precedes start {start}"),
        });
    }
    if end > duration {
        errors.push(ValidationError {
            path: format!("{path}.end_s"),
            message: format!("end {end} exceeds duration {duration}"),
        });
    }
}

pub(crate) fn sequence_pattern() -> &'static regex::Regex {
    static PATTERN: std::sync::OnceLock<regex::Regex> = std::sync::OnceLock::new();
    PATTERN.get_or_init(|| regex::Regex::new(r"^\d+(->\d+)+$").expect("static regex"))
}

/// Which timed channel [`slice`] reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Events,
    Captions,
}

/// A borrowed view of one timed entry, unified across channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceEntry<'a> {
    pub start_s: f64,
    pub end_s: f64,
    pub text: &'a str,
}

/// Returns every entry of the chosen channel whose span intersects the
/// window, boundary touches included, ordered by start time.
///
/// The window is clamped to `[0, duration_s]` before matching.
pub fn slice<'a>(
    script: &'a SemanticScript,
    video_index: u32,
    window: (f64, f64),
    channel: Channel,
) -> Result<Vec<SliceEntry<'a>>, ScriptError> {
    let (t0, t1) = window;
    if t0 > t1 {
        return Err(ScriptError::InvalidWindow(t0, t1));
    }
    let video = script
        .video(video_index)
        .ok_or(ScriptError::UnknownVideo(video_index))?;
    let t0 = t0.clamp(0.0, video.duration_s);
    let t1 = t1.clamp(0.0, video.duration_s);

    let mut out: Vec<SliceEntry<'a>> = match channel {
        Channel::Events => video
            .events
            .iter()
            .filter(|e| e.start_s <= t1 && e.end_s >= t0)
            .map(|e| SliceEntry {
                start_s: e.start_s,
                end_s: e.end_s,
                text: &e.visual,
            })
            .collect(),
        Channel::Captions => video
            .captions
            .iter()
            .filter(|c| c.start_s <= t1 && c.end_s >= t0)
            .map(|c| SliceEntry {
                start_s: c.start_s,
                end_s: c.end_s,
                text: &c.text,
            })
            .collect(),
    };
    out.sort_by(|a, b| {
        (a.start_s, a.end_s)
            .partial_cmp(&(b.start_s, b.end_s))
            .expect("validated timestamps are finite")
    });
    Ok(out)
}

#[cfg(test)]
mod tests;
