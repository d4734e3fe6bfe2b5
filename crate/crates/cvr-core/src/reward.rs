//! Episodic trajectory rewards: sparse answer correctness plus a small
//! formatting term, and the interval-IoU primitive both sides share.

use thiserror::Error;

use crate::episode::{EpisodeOutcome, Trajectory};
use crate::script::GoldAnswer;

/// Answer-correctness reward when the prediction matches the gold.
pub const R_ANS_CORRECT: f64 = 1.0;
/// Formatting reward when every invocation in the trajectory was valid.
pub const R_FMT_VALID: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct RewardConfig {
    /// Minimum IoU for an interval prediction to count as correct.
    pub iou_threshold: f64,
    /// When set, any retry in the trajectory also voids the formatting
    /// reward. Default counts a turn as valid if its final attempt was.
    pub strict_format: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            strict_format: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardBreakdown {
    pub r_ans: f64,
    pub r_fmt: f64,
    pub r_total: f64,
    /// Extra correctness signal, e.g. the raw IoU for interval tasks.
    pub correctness_detail: Option<f64>,
}

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("degenerate interval [{0}, {1}]")]
    DegenerateInterval(f64, f64),
    #[error("free-form answers are not auto-scorable; route to a judge")]
    FreeFormNotScorable,
    #[error("prediction shape {predicted} does not match gold shape {gold}")]
    ShapeMismatch {
        gold: &'static str,
        predicted: &'static str,
    },
    #[error("trajectory ended in an environment error: {0}")]
    ErroredTrajectory(String),
}

/// Intersection over union of two temporal intervals.
pub fn interval_iou(a: (f64, f64), b: (f64, f64)) -> Result<f64, RewardError> {
    for &(s, e) in [&a, &b] {
        // NaN bounds are degenerate too, hence not `s >= e`.
        let well_formed = s < e;
        if !well_formed {
            return Err(RewardError::DegenerateInterval(s, e));
        }
    }
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    Ok(inter / union)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correctness {
    pub score: f64,
    pub detail: Option<f64>,
}

/// Binary correctness of a canonical prediction against the gold answer.
/// `None` is the ABSTAIN outcome and always scores zero.
pub fn correctness(
    gold: &GoldAnswer,
    predicted: Option<&GoldAnswer>,
    iou_threshold: f64,
) -> Result<Correctness, RewardError> {
    if matches!(gold, GoldAnswer::FreeText(_)) {
        return Err(RewardError::FreeFormNotScorable);
    }
    let Some(predicted) = predicted else {
        return Ok(Correctness {
            score: 0.0,
            detail: None,
        });
    };
    match (gold, predicted) {
        (GoldAnswer::Letter(g), GoldAnswer::Letter(p))
        | (GoldAnswer::LetterSet(g), GoldAnswer::LetterSet(p))
        | (GoldAnswer::Sequence(g), GoldAnswer::Sequence(p)) => Ok(Correctness {
            score: if g == p { 1.0 } else { 0.0 },
            detail: None,
        }),
        (
            GoldAnswer::Interval { start_s, end_s },
            GoldAnswer::Interval {
                start_s: ps,
                end_s: pe,
            },
        ) => {
            let iou = interval_iou((*start_s, *end_s), (*ps, *pe))?;
            Ok(Correctness {
                score: if iou >= iou_threshold { 1.0 } else { 0.0 },
                detail: Some(iou),
            })
        }
        _ => Err(RewardError::ShapeMismatch {
            gold: gold.kind_str(),
            predicted: predicted.kind_str(),
        }),
    }
}

/// The episodic reward of a terminated trajectory.
///
/// The formatting term is trajectory-level: 0.1 only when every turn's final
/// parse was format-valid (and, in strict mode, no retries happened at all).
pub fn total_reward(
    trajectory: &Trajectory,
    gold: &GoldAnswer,
    config: &RewardConfig,
) -> Result<RewardBreakdown, RewardError> {
    let predicted = match &trajectory.outcome {
        EpisodeOutcome::Errored(msg) => return Err(RewardError::ErroredTrajectory(msg.clone())),
        EpisodeOutcome::Answered(answer) => Some(answer),
        EpisodeOutcome::Abstained => None,
    };
    let correctness = correctness(gold, predicted, config.iou_threshold)?;
    let fmt_ok = trajectory.format_valid_all && !(config.strict_format && trajectory.any_retries());
    let r_ans = correctness.score * R_ANS_CORRECT;
    let r_fmt = if fmt_ok { R_FMT_VALID } else { 0.0 };
    Ok(RewardBreakdown {
        r_ans,
        r_fmt,
        r_total: r_ans + r_fmt,
        correctness_detail: correctness.detail,
    })
}

/// Pluggable scorer for free-form answers. No implementation ships here.
pub trait AnswerJudge {
    /// Returns a score in [0, 1] for `predicted` against `gold`.
    fn score(&self, gold: &str, predicted: &str) -> f64;
}
