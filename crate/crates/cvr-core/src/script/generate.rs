//! Deterministic template-script generators.
//!
//! Each family is a strategy behind [`ScriptGenerator`], registered by name
//! in [`GeneratorRegistry`] and selected at runtime from config or the CLI.
//! Generation is a pure function of `(family, seed, knobs)`.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{
    check_script, GoldAnswer, SemanticScript, TaskType, TimedCaption, TimedEvent, VideoScript,
};
use crate::text::fnv1a64;

/// Built-in generator families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScriptFamily {
    /// Two videos sharing one functionally matching step; gold is the
    /// match's interval in video 2.
    AlignmentInterval,
    /// Several videos of which exactly the gold subset contains a target
    /// behavior; gold is the matching letter set.
    ChoiceBehavior,
}

impl ScriptFamily {
    pub fn name(&self) -> &'static str {
        match self {
            ScriptFamily::AlignmentInterval => "alignment_interval",
            ScriptFamily::ChoiceBehavior => "choice_behavior",
        }
    }
}

/// Generator configuration. `video_count: None` uses the family default.
#[derive(Debug, Clone)]
pub struct GeneratorKnobs {
    pub video_count: Option<u32>,
    /// Inclusive duration bounds in seconds.
    pub duration_range: (f64, f64),
    pub events_per_video: u32,
}

impl Default for GeneratorKnobs {
    fn default() -> Self {
        Self {
            video_count: None,
            duration_range: (60.0, 150.0),
            events_per_video: 6,
        }
    }
}

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("knobs inconsistent: {0}")]
    Inconsistent(String),
    #[error("unknown generator family `{0}`")]
    UnknownFamily(String),
}

/// One interchangeable generation strategy.
pub trait ScriptGenerator: Sync {
    fn family(&self) -> &'static str;
    fn generate(&self, seed: u64, knobs: &GeneratorKnobs)
        -> Result<SemanticScript, GeneratorError>;
}

/// Name-keyed registry of generator strategies.
pub struct GeneratorRegistry {
    entries: Vec<&'static dyn ScriptGenerator>,
}

impl GeneratorRegistry {
    pub fn with_builtins() -> Self {
        static ALIGNMENT: AlignmentIntervalGenerator = AlignmentIntervalGenerator;
        static CHOICE: ChoiceBehaviorGenerator = ChoiceBehaviorGenerator;
        Self {
            entries: vec![&ALIGNMENT, &CHOICE],
        }
    }

    pub fn register(&mut self, generator: &'static dyn ScriptGenerator) {
        self.entries.push(generator);
    }

    pub fn get(&self, family: &str) -> Option<&dyn ScriptGenerator> {
        self.entries.iter().copied().find(|g| g.family() == family)
    }

    pub fn families(&self) -> Vec<&'static str> {
        self.entries.iter().map(|g| g.family()).collect()
    }

    pub fn generate(
        &self,
        family: &str,
        seed: u64,
        knobs: &GeneratorKnobs,
    ) -> Result<SemanticScript, GeneratorError> {
        self.get(family)
            .ok_or_else(|| GeneratorError::UnknownFamily(family.to_string()))?
            .generate(seed, knobs)
    }
}

/// Deterministic generation for a built-in family.
pub fn generate_template_script(
    family: ScriptFamily,
    seed: u64,
    knobs: &GeneratorKnobs,
) -> Result<SemanticScript, GeneratorError> {
    GeneratorRegistry::with_builtins().generate(family.name(), seed, knobs)
}

fn rng_for(family: &str, seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(fnv1a64(format!("{family}:{seed}").as_bytes()))
}

fn ms(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

const STEP_MIN_S: f64 = 4.0;
const STEP_MAX_S: f64 = 12.0;
const GAP_MIN_S: f64 = 1.0;
const GAP_MAX_S: f64 = 5.0;

/// Lays out `n` sequential (start, end) spans with random gaps.
fn layout_spans(rng: &mut ChaCha8Rng, n: u32) -> Vec<(f64, f64)> {
    let mut spans = Vec::with_capacity(n as usize);
    let mut cursor = ms(rng.random_range(0.5..3.0));
    for _ in 0..n {
        let len = ms(rng.random_range(STEP_MIN_S..STEP_MAX_S));
        spans.push((cursor, ms(cursor + len)));
        cursor = ms(cursor + len + rng.random_range(GAP_MIN_S..GAP_MAX_S));
    }
    spans
}

fn check_density(knobs: &GeneratorKnobs) -> Result<(), GeneratorError> {
    let worst = 3.0 + knobs.events_per_video as f64 * (STEP_MAX_S + GAP_MAX_S);
    if knobs.events_per_video == 0 {
        return Err(GeneratorError::Inconsistent(
            "events_per_video must be positive".into(),
        ));
    }
    if knobs.duration_range.0 > knobs.duration_range.1 || knobs.duration_range.0 <= 0.0 {
        return Err(GeneratorError::Inconsistent(format!(
            "bad duration range {:?}",
            knobs.duration_range
        )));
    }
    if worst > knobs.duration_range.1 {
        return Err(GeneratorError::Inconsistent(format!(
            "duration range too small for event density: {} events need up to {worst}s, max is {}s",
            knobs.events_per_video, knobs.duration_range.1
        )));
    }
    Ok(())
}

fn draw_duration(rng: &mut ChaCha8Rng, knobs: &GeneratorKnobs, layout_end: f64) -> f64 {
    let lo = layout_end.max(knobs.duration_range.0);
    let hi = knobs.duration_range.1.max(lo);
    if hi > lo {
        ms(rng.random_range(lo..hi))
    } else {
        ms(lo)
    }
}

fn sample_distinct<'a, T: ?Sized>(rng: &mut ChaCha8Rng, pool: &[&'a T], n: usize) -> Vec<&'a T> {
    let mut indices: Vec<usize> = (0..pool.len()).collect();
    // Partial Fisher-Yates: the first n slots end up uniformly sampled.
    for i in 0..n.min(pool.len()) {
        let j = rng.random_range(i..pool.len());
        indices.swap(i, j);
    }
    indices.into_iter().take(n).map(|i| pool[i]).collect()
}

const LETTERS: &[char] = &['A', 'B', 'C', 'D', 'E', 'F', 'G', 'H'];
const NUMBER_WORDS: &[&str] = &[
    "one", "two", "three", "four", "five", "six", "seven", "eight",
];

// ---------------------------------------------------------------------------
// alignment_interval
// ---------------------------------------------------------------------------

const PROCEDURE_STEPS: &[&str] = &[
    "rinse the rice under cold running water",
    "dice the onion into small even cubes",
    "whisk the eggs with a pinch of salt",
    "heat a thin film of oil in the wide pan",
    "peel the cooked shrimp and cut them in half",
    "shred the poached chicken into strands",
    "toast the sesame seeds until they turn golden",
    "fold the batter gently from the edges inward",
    "strain the stock through a fine sieve",
    "press the excess water out with a clean cloth",
    "grate fresh ginger over the mixing bowl",
    "simmer the sauce until it visibly thickens",
    "crush the garlic cloves with the flat of the knife",
    "knead the dough until the surface is smooth",
    "blanch the greens briefly in boiling water",
    "season the fillet on both sides with pepper",
    "slice the cucumber into paper-thin rounds",
    "melt the butter over the lowest heat",
    "spread the paste evenly across the sheet",
    "skim the foam off the simmering pot",
];

struct AlignmentIntervalGenerator;

impl ScriptGenerator for AlignmentIntervalGenerator {
    fn family(&self) -> &'static str {
        "alignment_interval"
    }

    fn generate(
        &self,
        seed: u64,
        knobs: &GeneratorKnobs,
    ) -> Result<SemanticScript, GeneratorError> {
        check_density(knobs)?;
        let video_count = knobs.video_count.unwrap_or(2);
        if video_count != 2 {
            return Err(GeneratorError::Inconsistent(format!(
                "alignment_interval requires exactly 2 videos, got {video_count}"
            )));
        }
        let k = knobs.events_per_video as usize;
        if 2 * k - 1 > PROCEDURE_STEPS.len() {
            return Err(GeneratorError::Inconsistent(format!(
                "events_per_video {k} exceeds the distinct step vocabulary"
            )));
        }

        let mut rng = rng_for(self.family(), seed);
        let picked = sample_distinct(&mut rng, PROCEDURE_STEPS, 2 * k - 1);
        let shared = picked[0];
        let rest_a = &picked[1..k];
        let rest_b = &picked[k..];

        let mut videos = Vec::with_capacity(2);
        let mut match_spans = [(0.0, 0.0); 2];
        for (vi, rest) in [rest_a, rest_b].into_iter().enumerate() {
            let spans = layout_spans(&mut rng, k as u32);
            let shared_slot = rng.random_range(0..k);
            match_spans[vi] = spans[shared_slot];
            let mut phrases: Vec<&str> = Vec::with_capacity(k);
            let mut rest_iter = rest.iter();
            for slot in 0..k {
                if slot == shared_slot {
                    phrases.push(shared);
                } else {
                    phrases.push(rest_iter.next().expect("enough rest phrases"));
                }
            }
            let duration = draw_duration(&mut rng, knobs, spans[k - 1].1 + 2.0);
            let events = spans
                .iter()
                .zip(&phrases)
                .map(|(&(s, e), p)| TimedEvent {
                    start_s: s,
                    end_s: e,
                    visual: format!("Close-up: {p}."),
                })
                .collect();
            let captions = spans
                .iter()
                .zip(&phrases)
                .map(|(&(s, e), p)| TimedCaption {
                    start_s: s,
                    end_s: e,
                    text: format!("Now {p}."),
                })
                .collect();
            videos.push(VideoScript {
                video_index: vi as u32 + 1,
                duration_s: duration,
                events,
                captions,
            });
        }

        let (ref_start, ref_end) = match_spans[0];
        let (gold_start, gold_end) = match_spans[1];
        let script = SemanticScript {
            script_id: format!("fsa-{seed:06}"),
            task_type: TaskType::Interval,
            question: format!(
                "Two procedure videos show the same dish being prepared. Which time segment \
                 in Video 2 serves the same purpose as the segment between {ref_start}s and \
                 {ref_end}s in Video 1?"
            ),
            options: None,
            gold: GoldAnswer::Interval {
                start_s: gold_start,
                end_s: gold_end,
            },
            videos,
        };
        debug_assert!(check_script(&script).is_ok());
        Ok(script)
    }
}

// ---------------------------------------------------------------------------
// choice_behavior
// ---------------------------------------------------------------------------

const SUBJECTS: &[&str] = &[
    "a walrus",
    "a marsh crab",
    "a grey heron",
    "a wild boar",
    "an iguana",
    "a red fox",
    "a river otter",
    "a mountain goat",
];

const FILLER_BEHAVIORS: &[&str] = &[
    "wanders across the open clearing",
    "sniffs the muddy ground near the bank",
    "preens slowly at the water's edge",
    "forages between the loose rocks",
    "stretches and shifts its stance",
    "drinks from the shallow stream",
    "circles the same patch of grass",
    "rests in the broken shade",
    "paces along the fallen log",
    "digs idly at the soft soil",
];

const TARGET_BEHAVIORS: &[&str] = &[
    "freezes flat against the bark until its outline disappears",
    "kicks loose sand backward to bury itself out of sight",
    "slips beneath a ledge and holds completely still",
    "flattens into the reeds so only its eyes stay visible",
    "presses its body into a rock crevice and stops moving",
];

struct ChoiceBehaviorGenerator;

impl ScriptGenerator for ChoiceBehaviorGenerator {
    fn family(&self) -> &'static str {
        "choice_behavior"
    }

    fn generate(
        &self,
        seed: u64,
        knobs: &GeneratorKnobs,
    ) -> Result<SemanticScript, GeneratorError> {
        check_density(knobs)?;
        let n = knobs.video_count.unwrap_or(4) as usize;
        if !(2..=LETTERS.len()).contains(&n) {
            return Err(GeneratorError::Inconsistent(format!(
                "choice_behavior supports 2..={} videos, got {n}",
                LETTERS.len()
            )));
        }
        let k = knobs.events_per_video as usize;

        let mut rng = rng_for(self.family(), seed);
        let target = TARGET_BEHAVIORS[rng.random_range(0..TARGET_BEHAVIORS.len())];
        let gold_size = rng.random_range(1..=3.min(n - 1));
        let mut gold_videos: Vec<usize> = sample_distinct(
            &mut rng,
            &(0..n).collect::<Vec<_>>().iter().collect::<Vec<_>>(),
            gold_size,
        )
        .into_iter()
        .copied()
        .collect();
        gold_videos.sort_unstable();

        let subjects = sample_distinct(&mut rng, SUBJECTS, n);
        let mut videos = Vec::with_capacity(n);
        for (vi, subject) in subjects.iter().enumerate() {
            let spans = layout_spans(&mut rng, k as u32);
            let target_slot = if gold_videos.contains(&vi) {
                Some(rng.random_range(0..k))
            } else {
                None
            };
            let events = spans
                .iter()
                .enumerate()
                .map(|(slot, &(s, e))| {
                    let behavior = if target_slot == Some(slot) {
                        target
                    } else {
                        FILLER_BEHAVIORS[rng.random_range(0..FILLER_BEHAVIORS.len())]
                    };
                    TimedEvent {
                        start_s: s,
                        end_s: e,
                        visual: format!("In video {}, {subject} {behavior}.", vi + 1),
                    }
                })
                .collect();
            let duration = draw_duration(&mut rng, knobs, spans[k - 1].1 + 2.0);
            let captions = vec![TimedCaption {
                start_s: 0.0,
                end_s: ms(duration.min(6.0)),
                text: format!("Observation log: {subject} in view."),
            }];
            videos.push(VideoScript {
                video_index: vi as u32 + 1,
                duration_s: duration,
                events,
                captions,
            });
        }

        let letters: String = gold_videos.iter().map(|&i| LETTERS[i]).collect();
        let options: BTreeMap<String, String> = (0..n)
            .map(|i| {
                (
                    LETTERS[i].to_string(),
                    format!("Video {}.", NUMBER_WORDS[i]),
                )
            })
            .collect();
        let script = SemanticScript {
            script_id: format!("bu-{seed:06}"),
            task_type: TaskType::MultiSelect,
            question: format!(
                "Which videos show an animal that \"{target}\"? Select every matching option."
            ),
            options: Some(options),
            gold: GoldAnswer::LetterSet(letters),
            videos,
        };
        debug_assert!(check_script(&script).is_ok());
        Ok(script)
    }
}
