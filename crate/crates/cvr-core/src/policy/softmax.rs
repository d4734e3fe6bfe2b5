//! The trainable tabular-softmax policy.

use std::sync::Arc;

use rand::{Rng, RngCore};

use super::{ConcurrencyCapability, Policy, PolicyError, TurnContext};
use crate::grpo::templates::{fallback_action, instantiate, ScriptView, TemplateSet};
use crate::grpo::{ChoiceStep, LastActionKind, PolicyParams, StateKey, StateKeyConfig};
use crate::protocol::serialize_action;
use crate::script::SemanticScript;

/// Samples a template index from `softmax(logits[state_key])`, instantiates
/// it against the current script, and records the (key, choice, log-prob)
/// step for the optimizer.
pub struct SoftmaxPolicy {
    params: Arc<PolicyParams>,
    templates: TemplateSet,
    view: ScriptView,
    key_config: StateKeyConfig,
    records: Vec<ChoiceStep>,
    fallbacks: u32,
}

impl SoftmaxPolicy {
    pub fn new(
        params: Arc<PolicyParams>,
        script: &SemanticScript,
        key_config: StateKeyConfig,
    ) -> Self {
        let templates = TemplateSet::standard();
        debug_assert_eq!(params.k(), templates.len(), "params row width must match K");
        Self {
            params,
            templates,
            view: ScriptView::from_script(script),
            key_config,
            records: Vec::new(),
            fallbacks: 0,
        }
    }

    /// State featurization from the engine-supplied context.
    pub fn state_key(&self, ctx: &TurnContext) -> StateKey {
        let (last_action, last_obs) = match ctx.history.last() {
            None => (LastActionKind::None, None),
            Some(step) => {
                let kind = match step.action.as_ref().map(|a| a.kind_tag()) {
                    Some("observe") => LastActionKind::Observe,
                    Some("get_caption") => LastActionKind::GetCaption,
                    _ => LastActionKind::None,
                };
                (kind, Some(step.observation.text.as_str()))
            }
        };
        self.key_config.key(ctx.turn_index, last_action, last_obs)
    }

    /// Drains the per-turn choice records of the episode just run.
    pub fn take_records(&mut self) -> Vec<ChoiceStep> {
        std::mem::take(&mut self.records)
    }

    /// How many template instantiations fell back to the safe caption call.
    pub fn fallback_count(&self) -> u32 {
        self.fallbacks
    }

    fn sample_index(probs: &[f64], rng: &mut dyn RngCore) -> usize {
        let draw: f64 = rng.random();
        let mut cumulative = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            cumulative += p;
            if draw < cumulative {
                return i;
            }
        }
        probs.len() - 1
    }
}

impl Policy for SoftmaxPolicy {
    fn decide(&mut self, ctx: &TurnContext, rng: &mut dyn RngCore) -> Result<String, PolicyError> {
        let key = self.state_key(ctx);
        let probs = self.params.probs(&key);
        let choice = Self::sample_index(&probs, rng);
        let logp_old = self.params.log_probs(&key)[choice];
        self.records.push(ChoiceStep {
            key,
            choice,
            logp_old,
        });
        let action = match instantiate(self.templates.kinds()[choice], &self.view, ctx) {
            Ok(action) => action,
            Err(_) => {
                self.fallbacks += 1;
                fallback_action()
            }
        };
        Ok(serialize_action(&action))
    }

    fn concurrency(&self) -> ConcurrencyCapability {
        ConcurrencyCapability::ConcurrentOk
    }
}
