//! Metric aggregation: per-task accuracies, dimension and overall averages,
//! decision overlap, sim-vs-real interval alignment, and latency statistics.
//!
//! Internal values stay full precision; rounding happens only at
//! presentation (2 decimals, half-up).

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::reward::{correctness, interval_iou, AnswerJudge, RewardError};
use crate::script::GoldAnswer;

#[derive(Debug, Clone, Serialize)]
pub struct TaskResult {
    pub task_tag: String,
    pub n: usize,
    /// Percent in [0, 100], full precision.
    pub accuracy: f64,
    /// Mean correctness detail (e.g. IoU) when the task reports one.
    pub mean_detail: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub tasks: Vec<TaskResult>,
    /// Dimension name -> unweighted (or instance-weighted) mean accuracy.
    pub dimension_avgs: Vec<(String, f64)>,
    pub overall_avg: f64,
    /// Present only for paired sim/real runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alignment: Option<AlignmentBlock>,
}

/// Sim-vs-real comparison over trajectory logs paired by `script_id`.
/// Fields are `None` when the paired runs hold no data of that kind.
#[derive(Debug, Clone, Serialize)]
pub struct AlignmentBlock {
    pub decision_overlap_pct: Option<f64>,
    pub mean_sim_real_iou_pct: Option<f64>,
    pub sim_latency_s: Option<f64>,
    pub real_latency_s: Option<f64>,
    pub speedup: Option<f64>,
    pub discrete_pairs: usize,
    pub interval_pairs: usize,
    /// Script ids present in only one of the two runs; reported, never
    /// silently dropped.
    pub unpaired: Vec<String>,
}

/// Pairs two log sets by `script_id` and computes the alignment metrics.
/// Interval answers feed the IoU pool; everything else (including abstains)
/// feeds the overlap pool.
pub fn build_alignment(
    sim: &[crate::episode::TrajectorySummary],
    real: &[crate::episode::TrajectorySummary],
) -> Result<AlignmentBlock, EvalError> {
    if sim.is_empty() && real.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut real_by_id: BTreeMap<&str, &crate::episode::TrajectorySummary> =
        real.iter().map(|s| (s.script_id.as_str(), s)).collect();
    let mut discrete_pairs: Vec<(String, String)> = Vec::new();
    let mut interval_pairs: Vec<IntervalPair> = Vec::new();
    let mut sim_timings: Vec<f64> = Vec::new();
    let mut real_timings: Vec<f64> = Vec::new();
    let mut unpaired: Vec<String> = Vec::new();

    let discrete_text = |answer: &Option<GoldAnswer>| match answer {
        Some(GoldAnswer::Letter(s))
        | Some(GoldAnswer::LetterSet(s))
        | Some(GoldAnswer::Sequence(s)) => s.clone(),
        Some(GoldAnswer::FreeText(s)) => s.clone(),
        Some(GoldAnswer::Interval { .. }) | None => "ABSTAIN".to_string(),
    };

    for s in sim {
        sim_timings.extend(&s.env_timings);
        let Some(r) = real_by_id.remove(s.script_id.as_str()) else {
            unpaired.push(format!("sim-only: {}", s.script_id));
            continue;
        };
        real_timings.extend(&r.env_timings);
        match (&s.final_answer, &r.final_answer) {
            (
                Some(GoldAnswer::Interval {
                    start_s: a0,
                    end_s: a1,
                }),
                Some(GoldAnswer::Interval {
                    start_s: b0,
                    end_s: b1,
                }),
            ) => interval_pairs.push(((*a0, *a1), (*b0, *b1))),
            (sim_answer, real_answer) => {
                discrete_pairs.push((discrete_text(sim_answer), discrete_text(real_answer)));
            }
        }
    }
    unpaired.extend(real_by_id.keys().map(|id| format!("real-only: {id}")));

    let decision_overlap_pct = if discrete_pairs.is_empty() {
        None
    } else {
        Some(decision_overlap_rate(&discrete_pairs)?)
    };
    let mean_sim_real_iou_pct = if interval_pairs.is_empty() {
        None
    } else {
        Some(sim_real_interval_alignment(&interval_pairs)?)
    };
    let latency = if sim_timings.is_empty() || real_timings.is_empty() {
        None
    } else {
        Some(latency_report(&sim_timings, &real_timings)?)
    };
    Ok(AlignmentBlock {
        decision_overlap_pct,
        mean_sim_real_iou_pct,
        sim_latency_s: latency.as_ref().map(|l| l.mean_sim_s),
        real_latency_s: latency.as_ref().map(|l| l.mean_real_s),
        speedup: latency.as_ref().map(|l| l.speedup),
        discrete_pairs: discrete_pairs.len(),
        interval_pairs: interval_pairs.len(),
        unpaired,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightingMode {
    /// Dimension and overall averages are plain means of task accuracies.
    Unweighted,
    /// Averages weight each task by its instance count.
    InstanceWeighted,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no instances to aggregate")]
    Empty,
    #[error("task `{0}` is missing from the dimension map")]
    UnmappedTask(String),
    #[error("free-form instances need a judge")]
    JudgeRequired,
    #[error(transparent)]
    Reward(#[from] RewardError),
}

/// One scored instance: task tag, gold, the canonical prediction (None for
/// ABSTAIN), and an optional precomputed detail value.
#[derive(Debug, Clone)]
pub struct EvalInstance {
    pub task_tag: String,
    pub gold: GoldAnswer,
    pub predicted: Option<GoldAnswer>,
    pub detail: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AggregateOptions<'a> {
    pub weighting: WeightingMode,
    pub iou_threshold: f64,
    pub judge: Option<&'a dyn AnswerJudge>,
    /// Judge score at or above which a free-form answer counts correct.
    pub judge_threshold: f64,
}

impl Default for AggregateOptions<'_> {
    fn default() -> Self {
        Self {
            weighting: WeightingMode::Unweighted,
            iou_threshold: 0.5,
            judge: None,
            judge_threshold: 0.5,
        }
    }
}

impl std::fmt::Debug for dyn AnswerJudge + '_ {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("AnswerJudge")
    }
}

/// Scores instances and folds them into per-task accuracies, dimension
/// averages, and the overall average.
pub fn aggregate(
    instances: &[EvalInstance],
    dimension_map: &BTreeMap<String, String>,
    options: &AggregateOptions,
) -> Result<EvalReport, EvalError> {
    if instances.is_empty() {
        return Err(EvalError::Empty);
    }
    struct Tally {
        n: usize,
        correct: usize,
        detail_sum: f64,
        detail_n: usize,
    }
    let mut tallies: BTreeMap<String, Tally> = BTreeMap::new();
    for instance in instances {
        if !dimension_map.contains_key(&instance.task_tag) {
            return Err(EvalError::UnmappedTask(instance.task_tag.clone()));
        }
        let (score, detail) = match &instance.gold {
            GoldAnswer::FreeText(gold_text) => {
                let judge = options.judge.ok_or(EvalError::JudgeRequired)?;
                let score = match &instance.predicted {
                    Some(GoldAnswer::FreeText(predicted)) => {
                        let s = judge.score(gold_text, predicted);
                        if s >= options.judge_threshold {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    _ => 0.0,
                };
                (score, None)
            }
            gold => {
                let c = correctness(gold, instance.predicted.as_ref(), options.iou_threshold)?;
                (c.score, c.detail.or(instance.detail))
            }
        };
        let tally = tallies.entry(instance.task_tag.clone()).or_insert(Tally {
            n: 0,
            correct: 0,
            detail_sum: 0.0,
            detail_n: 0,
        });
        tally.n += 1;
        tally.correct += (score >= 1.0) as usize;
        if let Some(d) = detail {
            tally.detail_sum += d;
            tally.detail_n += 1;
        }
    }
    let stats: Vec<TaskStat> = tallies
        .into_iter()
        .map(|(task_tag, t)| TaskStat {
            task_tag,
            n: t.n,
            accuracy: 100.0 * t.correct as f64 / t.n as f64,
            mean_detail: (t.detail_n > 0).then(|| t.detail_sum / t.detail_n as f64),
        })
        .collect();
    report_from_task_stats(&stats, dimension_map, options.weighting)
}

/// Per-task accuracy already computed elsewhere.
#[derive(Debug, Clone)]
pub struct TaskStat {
    pub task_tag: String,
    pub n: usize,
    /// Percent in [0, 100].
    pub accuracy: f64,
    pub mean_detail: Option<f64>,
}

/// Builds the report from per-task accuracies: each dimension average is the
/// mean of its tasks' accuracies, and the overall average is the mean over
/// all tasks (unweighted by default, matching the benchmark's human-row
/// arithmetic).
pub fn report_from_task_stats(
    stats: &[TaskStat],
    dimension_map: &BTreeMap<String, String>,
    weighting: WeightingMode,
) -> Result<EvalReport, EvalError> {
    if stats.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut tasks: Vec<TaskResult> = Vec::with_capacity(stats.len());
    let mut dims: BTreeMap<String, (f64, f64)> = BTreeMap::new(); // dim -> (weighted sum, weight)
    let mut overall = (0.0, 0.0);
    for stat in stats {
        let dim = dimension_map
            .get(&stat.task_tag)
            .ok_or_else(|| EvalError::UnmappedTask(stat.task_tag.clone()))?;
        let weight = match weighting {
            WeightingMode::Unweighted => 1.0,
            WeightingMode::InstanceWeighted => stat.n as f64,
        };
        let entry = dims.entry(dim.clone()).or_insert((0.0, 0.0));
        entry.0 += stat.accuracy * weight;
        entry.1 += weight;
        overall.0 += stat.accuracy * weight;
        overall.1 += weight;
        tasks.push(TaskResult {
            task_tag: stat.task_tag.clone(),
            n: stat.n,
            accuracy: stat.accuracy,
            mean_detail: stat.mean_detail,
        });
    }
    let mut dimension_avgs: Vec<(String, f64)> = dims
        .into_iter()
        .map(|(dim, (sum, weight))| (dim, sum / weight))
        .collect();
    dimension_avgs.sort_by_key(|(dim, _)| dimension_order(dim));
    Ok(EvalReport {
        tasks,
        dimension_avgs,
        overall_avg: overall.0 / overall.1,
        alignment: None,
    })
}

fn dimension_order(dim: &str) -> (usize, String) {
    const CANONICAL: [&str; 4] = ["C", "T", "M", "F"];
    match CANONICAL.iter().position(|d| *d == dim) {
        Some(i) => (i, String::new()),
        None => (CANONICAL.len(), dim.to_string()),
    }
}

/// The benchmark's task-to-dimension assignment.
pub fn default_dimension_map() -> BTreeMap<String, String> {
    let pairs = [
        ("BU", "C"),
        ("NC", "C"),
        ("CC", "C"),
        ("PEA", "C"),
        ("PI", "T"),
        ("FSA", "T"),
        ("PSS", "T"),
        ("MSR", "M"),
        ("MOC", "M"),
        ("CCQA", "F"),
    ];
    pairs
        .iter()
        .map(|(t, d)| (t.to_string(), d.to_string()))
        .collect()
}

/// Percent of paired runs choosing the identical discrete answer.
pub fn decision_overlap_rate(paired: &[(String, String)]) -> Result<f64, EvalError> {
    if paired.is_empty() {
        return Err(EvalError::Empty);
    }
    let same = paired.iter().filter(|(a, b)| a == b).count();
    Ok(100.0 * same as f64 / paired.len() as f64)
}

/// A (sim, real) pair of predicted intervals.
pub type IntervalPair = ((f64, f64), (f64, f64));

/// Mean interval IoU over paired runs, as a percent.
pub fn sim_real_interval_alignment(paired: &[IntervalPair]) -> Result<f64, EvalError> {
    if paired.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut sum = 0.0;
    for &(a, b) in paired {
        sum += interval_iou(a, b)?;
    }
    Ok(100.0 * sum / paired.len() as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct LatencyReport {
    pub mean_sim_s: f64,
    pub mean_real_s: f64,
    /// real / sim.
    pub speedup: f64,
}

/// Mean per-call latencies and their ratio.
pub fn latency_report(
    sim_timings: &[f64],
    real_timings: &[f64],
) -> Result<LatencyReport, EvalError> {
    if sim_timings.is_empty() || real_timings.is_empty() {
        return Err(EvalError::Empty);
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let mean_sim_s = mean(sim_timings);
    let mean_real_s = mean(real_timings);
    Ok(LatencyReport {
        mean_sim_s,
        mean_real_s,
        speedup: mean_real_s / mean_sim_s,
    })
}

/// Half-up decimal rounding for presentation. A tiny guard absorbs binary
/// representation error so decimal halves round up as intended.
pub fn round_half_up(x: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    let y = x * scale;
    let guard = 1e-9 * y.abs().max(1.0);
    (y + 0.5 + guard).floor() / scale
}

/// Formats a percentage at 2 decimals, half-up.
pub fn fmt_pct2(x: f64) -> String {
    let scaled = scaled_half_up(x, 100.0);
    format!("{}.{:02}", scaled / 100, (scaled % 100).abs())
}

/// Formats a percentage at 1 decimal, half-up.
pub fn fmt_pct1(x: f64) -> String {
    let scaled = scaled_half_up(x, 10.0);
    format!("{}.{}", scaled / 10, (scaled % 10).abs())
}

fn scaled_half_up(x: f64, scale: f64) -> i64 {
    let y = x * scale;
    let guard = 1e-9 * y.abs().max(1.0);
    (y + 0.5 + guard).floor() as i64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn human_row() -> Vec<TaskStat> {
        let accuracies = [
            ("BU", 85.60),
            ("NC", 92.30),
            ("CC", 90.70),
            ("PEA", 83.90),
            ("PI", 91.60),
            ("FSA", 85.20),
            ("PSS", 89.90),
            ("MSR", 93.20),
            ("MOC", 94.20),
            ("CCQA", 85.20),
        ];
        accuracies
            .iter()
            .map(|(tag, acc)| TaskStat {
                task_tag: tag.to_string(),
                n: 100,
                accuracy: *acc,
                mean_detail: None,
            })
            .collect()
    }

    #[test]
    fn human_row_dimension_and_overall_averages() {
        let report = report_from_task_stats(
            &human_row(),
            &default_dimension_map(),
            WeightingMode::Unweighted,
        )
        .unwrap();
        let by_dim: BTreeMap<&str, f64> = report
            .dimension_avgs
            .iter()
            .map(|(d, v)| (d.as_str(), *v))
            .collect();
        assert_eq!(fmt_pct2(by_dim["C"]), "88.13");
        assert_eq!(fmt_pct2(by_dim["T"]), "88.90");
        assert_eq!(fmt_pct2(by_dim["M"]), "93.70");
        assert_eq!(fmt_pct2(report.overall_avg), "89.18");
    }

    #[test]
    fn single_task_dimension_average_is_the_task_accuracy() {
        let stats = vec![TaskStat {
            task_tag: "BU".into(),
            n: 10,
            accuracy: 100.0,
            mean_detail: None,
        }];
        let report =
            report_from_task_stats(&stats, &default_dimension_map(), WeightingMode::Unweighted)
                .unwrap();
        assert_eq!(report.dimension_avgs[0].1, 100.0);
        assert_eq!(fmt_pct2(report.overall_avg), "100.00");
    }

    #[test]
    fn two_tasks_at_zero_and_hundred_average_to_fifty() {
        let stats = vec![
            TaskStat {
                task_tag: "BU".into(),
                n: 3,
                accuracy: 0.0,
                mean_detail: None,
            },
            TaskStat {
                task_tag: "NC".into(),
                n: 7,
                accuracy: 100.0,
                mean_detail: None,
            },
        ];
        let report =
            report_from_task_stats(&stats, &default_dimension_map(), WeightingMode::Unweighted)
                .unwrap();
        assert_eq!(report.dimension_avgs[0].1, 50.0);
        // Instance weighting shifts it toward the bigger task.
        let weighted = report_from_task_stats(
            &stats,
            &default_dimension_map(),
            WeightingMode::InstanceWeighted,
        )
        .unwrap();
        assert_eq!(weighted.dimension_avgs[0].1, 70.0);
    }

    #[test]
    fn unmapped_task_is_an_error() {
        let stats = vec![TaskStat {
            task_tag: "XX".into(),
            n: 1,
            accuracy: 0.0,
            mean_detail: None,
        }];
        assert!(matches!(
            report_from_task_stats(&stats, &default_dimension_map(), WeightingMode::Unweighted),
            Err(EvalError::UnmappedTask(_))
        ));
    }

    #[test]
    fn aggregate_scores_instances_through_correctness() {
        let instances = vec![
            EvalInstance {
                task_tag: "BU".into(),
                gold: GoldAnswer::LetterSet("AC".into()),
                predicted: Some(GoldAnswer::LetterSet("AC".into())),
                detail: None,
            },
            EvalInstance {
                task_tag: "BU".into(),
                gold: GoldAnswer::LetterSet("AC".into()),
                predicted: None,
                detail: None,
            },
        ];
        let report = aggregate(
            &instances,
            &default_dimension_map(),
            &AggregateOptions::default(),
        )
        .unwrap();
        assert_eq!(report.tasks[0].accuracy, 50.0);
    }

    #[test]
    fn aggregate_is_permutation_invariant() {
        let mut instances = vec![
            EvalInstance {
                task_tag: "FSA".into(),
                gold: GoldAnswer::Interval {
                    start_s: 86.0,
                    end_s: 104.0,
                },
                predicted: Some(GoldAnswer::Interval {
                    start_s: 85.88,
                    end_s: 105.24,
                }),
                detail: None,
            },
            EvalInstance {
                task_tag: "BU".into(),
                gold: GoldAnswer::LetterSet("B".into()),
                predicted: Some(GoldAnswer::LetterSet("AB".into())),
                detail: None,
            },
            EvalInstance {
                task_tag: "BU".into(),
                gold: GoldAnswer::LetterSet("A".into()),
                predicted: Some(GoldAnswer::LetterSet("A".into())),
                detail: None,
            },
        ];
        let forward = aggregate(
            &instances,
            &default_dimension_map(),
            &AggregateOptions::default(),
        )
        .unwrap();
        instances.reverse();
        let backward = aggregate(
            &instances,
            &default_dimension_map(),
            &AggregateOptions::default(),
        )
        .unwrap();
        assert_eq!(forward.overall_avg, backward.overall_avg);
        assert_eq!(
            forward.tasks.iter().map(|t| t.accuracy).collect::<Vec<_>>(),
            backward
                .tasks
                .iter()
                .map(|t| t.accuracy)
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn free_form_without_judge_errors() {
        let instances = vec![EvalInstance {
            task_tag: "CCQA".into(),
            gold: GoldAnswer::FreeText("differences".into()),
            predicted: Some(GoldAnswer::FreeText("differences".into())),
            detail: None,
        }];
        assert!(matches!(
            aggregate(
                &instances,
                &default_dimension_map(),
                &AggregateOptions::default()
            ),
            Err(EvalError::JudgeRequired)
        ));
    }

    #[test]
    fn overlap_rate_cases() {
        let same: Vec<(String, String)> =
            (0..10).map(|i| (format!("{i}"), format!("{i}"))).collect();
        assert_eq!(decision_overlap_rate(&same).unwrap(), 100.0);
        let disjoint: Vec<(String, String)> =
            (0..10).map(|i| (format!("{i}"), format!("x{i}"))).collect();
        assert_eq!(decision_overlap_rate(&disjoint).unwrap(), 0.0);
        let mixed: Vec<(String, String)> = (0..1000)
            .map(|i| {
                if i < 839 {
                    ("A".to_string(), "A".to_string())
                } else {
                    ("A".to_string(), "B".to_string())
                }
            })
            .collect();
        assert_eq!(fmt_pct1(decision_overlap_rate(&mixed).unwrap()), "83.9");
    }

    #[test]
    fn interval_alignment_cases() {
        let identical = vec![((0.0, 5.0), (0.0, 5.0)); 4];
        assert_eq!(sim_real_interval_alignment(&identical).unwrap(), 100.0);
        let single = vec![((85.88, 105.24), (86.0, 104.0))];
        let pct = sim_real_interval_alignment(&single).unwrap();
        assert!((pct - 93.0).abs() <= 0.5, "{pct}");
    }

    #[test]
    fn latency_cases() {
        let fsa = latency_report(&[1.7], &[8.6]).unwrap();
        assert!((5.0..=5.1).contains(&fsa.speedup), "{}", fsa.speedup);
        let bu = latency_report(&[1.6], &[7.3]).unwrap();
        assert!((bu.speedup - 4.5625).abs() < 1e-12);
        let equal = latency_report(&[2.0, 2.0], &[2.0, 2.0]).unwrap();
        assert_eq!(equal.speedup, 1.0);
        assert!(latency_report(&[], &[1.0]).is_err());
    }

    #[test]
    fn presentation_rounding_is_half_up() {
        assert_eq!(fmt_pct2(88.125), "88.13");
        assert_eq!(fmt_pct2(88.124), "88.12");
        assert_eq!(fmt_pct2(88.9), "88.90");
        assert_eq!(fmt_pct1(83.85), "83.9");
        assert_eq!(round_half_up(2.345, 2), 2.35);
    }

    proptest! {
        #[test]
        fn overall_average_lies_between_task_extremes(accs in proptest::collection::vec(0.0f64..100.0, 2..10)) {
            let tags = ["BU", "NC", "CC", "PEA", "PI", "FSA", "PSS", "MSR", "MOC", "CCQA"];
            let stats: Vec<TaskStat> = accs.iter().enumerate().map(|(i, &a)| TaskStat {
                task_tag: tags[i].to_string(), n: 5, accuracy: a, mean_detail: None,
            }).collect();
            let report = report_from_task_stats(&stats, &default_dimension_map(), WeightingMode::Unweighted).unwrap();
            let min = accs.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(report.overall_avg >= min - 1e-9 && report.overall_avg <= max + 1e-9);
        }
    }
}
