//! Group-relative policy optimization over a tabular softmax policy.
//!
//! The trainable policy is a categorical distribution over a small set of
//! action templates, keyed by a discrete featurization of the state. That
//! keeps every quantity of the objective exactly computable: trajectory
//! log-probs are sums of log-softmax terms, the KL to the reference policy
//! is the exact categorical KL, and the gradient is checkable against
//! finite differences.

pub mod templates;
pub mod train;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::fnv1a64;

/// Discrete state featurization: turn index (capped), the kind of the last
/// action, and a small hash bucket of the last observation text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateKey {
    pub turn_bucket: u8,
    pub last_action: LastActionKind,
    pub obs_bucket: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LastActionKind {
    None,
    Observe,
    GetCaption,
}

impl LastActionKind {
    fn as_str(&self) -> &'static str {
        match self {
            LastActionKind::None => "none",
            LastActionKind::Observe => "observe",
            LastActionKind::GetCaption => "get_caption",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(LastActionKind::None),
            "observe" => Some(LastActionKind::Observe),
            "get_caption" => Some(LastActionKind::GetCaption),
            _ => None,
        }
    }
}

impl fmt::Display for StateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "t{}.{}.b{}",
            self.turn_bucket,
            self.last_action.as_str(),
            self.obs_bucket
        )
    }
}

impl StateKey {
    pub fn parse(s: &str) -> Option<Self> {
        let mut parts = s.splitn(3, '.');
        let turn = parts.next()?.strip_prefix('t')?.parse().ok()?;
        let last = LastActionKind::parse(parts.next()?)?;
        let bucket = parts.next()?.strip_prefix('b')?.parse().ok()?;
        Some(StateKey {
            turn_bucket: turn,
            last_action: last,
            obs_bucket: bucket,
        })
    }
}

/// Bounds of the state-key space; keeps it finite and enumerable.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct StateKeyConfig {
    pub turn_cap: u8,
    pub obs_buckets: u16,
}

impl Default for StateKeyConfig {
    fn default() -> Self {
        Self {
            turn_cap: 6,
            obs_buckets: 8,
        }
    }
}

impl StateKeyConfig {
    pub fn key(
        &self,
        turn_index: usize,
        last_action: LastActionKind,
        last_obs: Option<&str>,
    ) -> StateKey {
        let obs_bucket = match last_obs {
            Some(text) => (fnv1a64(text.as_bytes()) % self.obs_buckets as u64) as u16,
            None => 0,
        };
        StateKey {
            turn_bucket: turn_index.min(self.turn_cap as usize) as u8,
            last_action,
            obs_bucket,
        }
    }
}

/// Trainable categorical-policy parameters: one row of K logits per visited
/// state key. Unseen keys read as uniform, so parameter sets of different
/// coverage stay comparable.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub template_names: Vec<String>,
    pub logits: HashMap<StateKey, Vec<f64>>,
}

impl PolicyParams {
    pub fn new_uniform(template_names: Vec<String>) -> Self {
        assert!(!template_names.is_empty(), "need at least one template");
        Self {
            template_names,
            logits: HashMap::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.template_names.len()
    }

    /// Logit row for a key; uniform zeros when unseen.
    pub fn row(&self, key: &StateKey) -> Vec<f64> {
        self.logits
            .get(key)
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.k()])
    }

    pub fn ensure_row(&mut self, key: StateKey) -> &mut Vec<f64> {
        let k = self.k();
        self.logits.entry(key).or_insert_with(|| vec![0.0; k])
    }

    pub fn probs(&self, key: &StateKey) -> Vec<f64> {
        softmax(&self.row(key))
    }

    pub fn log_probs(&self, key: &StateKey) -> Vec<f64> {
        log_softmax(&self.row(key))
    }

    pub fn entropy(&self, key: &StateKey) -> f64 {
        let probs = self.probs(key);
        -probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let logits: BTreeMap<String, &Vec<f64>> = self
            .logits
            .iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        serde_json::json!({
            "k": self.k(),
            "template_set": self.template_names,
            "logits": logits,
        })
    }

    pub fn save<W: io::Write>(&self, w: &mut W) -> io::Result<()> {
        let text = serde_json::to_string_pretty(&self.to_json()).expect("params are plain JSON");
        w.write_all(text.as_bytes())
    }

    pub fn load(value: &serde_json::Value) -> Result<Self, GrpoError> {
        let bad = |m: &str| GrpoError::BadParams(m.to_string());
        let names: Vec<String> = value
            .get("template_set")
            .and_then(|v| serde_json::from_value(v.clone()).ok())
            .ok_or_else(|| bad("missing template_set"))?;
        if names.is_empty() {
            return Err(bad("empty template_set"));
        }
        let mut params = PolicyParams::new_uniform(names);
        let rows = value
            .get("logits")
            .and_then(serde_json::Value::as_object)
            .ok_or_else(|| bad("missing logits map"))?;
        for (key_text, row) in rows {
            let key = StateKey::parse(key_text)
                .ok_or_else(|| bad(&format!("bad state key `{key_text}`")))?;
            let row: Vec<f64> = serde_json::from_value(row.clone())
                .map_err(|e| bad(&format!("bad logit row: {e}")))?;
            if row.len() != params.k() {
                return Err(bad(&format!(
                    "row for `{key_text}` has {} entries, expected {}",
                    row.len(),
                    params.k()
                )));
            }
            params.logits.insert(key, row);
        }
        Ok(params)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&l| l - log_sum).collect()
}

/// One recorded policy decision inside a sampled trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceStep {
    pub key: StateKey,
    pub choice: usize,
    /// log pi_old(choice | key), recorded at sampling time.
    pub logp_old: f64,
}

/// One rollout: the decision path plus its total reward.
#[derive(Debug, Clone)]
pub struct SampledTrajectory {
    pub steps: Vec<ChoiceStep>,
    pub reward: f64,
}

/// G trajectories sampled for one query, with group-normalized advantages.
#[derive(Debug, Clone)]
pub struct GroupBatch {
    pub script_id: String,
    pub trajectories: Vec<SampledTrajectory>,
    pub advantages: Vec<f64>,
}

impl GroupBatch {
    pub fn from_rollouts(
        script_id: impl Into<String>,
        trajectories: Vec<SampledTrajectory>,
        sigma_floor: f64,
    ) -> Result<Self, GrpoError> {
        let rewards: Vec<f64> = trajectories.iter().map(|t| t.reward).collect();
        let advantages = group_advantages(&rewards, sigma_floor)?;
        Ok(Self {
            script_id: script_id.into(),
            trajectories,
            advantages,
        })
    }

    /// Multiset of state keys visited across the batch.
    pub fn visited_keys(&self) -> Vec<StateKey> {
        self.trajectories
            .iter()
            .flat_map(|t| t.steps.iter().map(|s| s.key))
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    /// Trajectories sampled per query (G).
    pub group_size: usize,
    /// Clip range of the importance ratio.
    pub clip_eps: f64,
    /// Weight of the KL regularizer toward the reference policy.
    pub kl_beta: f64,
    pub learning_rate: f64,
    /// Below this reward std the whole group's advantages are zeroed.
    pub sigma_floor: f64,
    pub iterations: u32,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_eps: 0.2,
            kl_beta: 0.005,
            learning_rate: 0.5,
            sigma_floor: 1e-8,
            iterations: 300,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.group_size < 2 {
            return Err(GrpoError::GroupTooSmall(self.group_size));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(GrpoError::BadParams(format!(
                "clip_eps must be in (0, 1), got {}",
                self.clip_eps
            )));
        }
        if self.kl_beta < 0.0 {
            return Err(GrpoError::BadParams(format!(
                "kl_beta must be >= 0, got {}",
                self.kl_beta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("group size must be at least 2, got {0}")]
    GroupTooSmall(usize),
    #[error("bad policy parameters: {0}")]
    BadParams(String),
    #[error("training diverged: mean reward is NaN at iteration {0}")]
    Diverged(u32),
    #[error("{0}")]
    Incompatible(String),
}

/// Group-relative advantages: `(R_i - mean) / population_std`, all zeros
/// when the group's reward std falls below `sigma_floor`.
pub fn group_advantages(rewards: &[f64], sigma_floor: f64) -> Result<Vec<f64>, GrpoError> {
    let g = rewards.len();
    if g < 2 {
        return Err(GrpoError::GroupTooSmall(g));
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let variance = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g as f64;
    let sigma = variance.sqrt();
    if sigma < sigma_floor {
        return Ok(vec![0.0; g]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / sigma).collect())
}

/// Sum over turns of `log softmax(logits[key_t])[choice_t]`.
pub fn trajectory_log_prob(params: &PolicyParams, steps: &[ChoiceStep]) -> f64 {
    steps
        .iter()
        .map(|s| params.log_probs(&s.key)[s.choice])
        .sum()
}

/// `min(ratio * A, clamp(ratio, 1 - eps, 1 + eps) * A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    (ratio * advantage).min(clipped * advantage)
}

/// Mean over the visited-key multiset of the exact categorical KL
/// `KL(params || reference)`. Zero when nothing was visited.
pub fn kl_to_reference(
    params: &PolicyParams,
    reference: &PolicyParams,
    visited: &[StateKey],
) -> f64 {
    if visited.is_empty() {
        return 0.0;
    }
    let total: f64 = visited
        .iter()
        .map(|key| {
            let p = params.probs(key);
            let lp = params.log_probs(key);
            let lq = reference.log_probs(key);
            p.iter()
                .zip(lp.iter().zip(&lq))
                .map(|(&pi, (&lpi, &lqi))| if pi > 0.0 { pi * (lpi - lqi) } else { 0.0 })
                .sum::<f64>()
        })
        .sum();
    total / visited.len() as f64
}

/// The surrogate objective: group-mean clipped importance-weighted
/// advantages minus the KL penalty over the batch's visited keys.
pub fn grpo_objective(
    theta: &PolicyParams,
    theta_old: &PolicyParams,
    theta_ref: &PolicyParams,
    batch: &GroupBatch,
    config: &GrpoConfig,
) -> Result<f64, GrpoError> {
    check_batch(theta, batch)?;
    let g = batch.trajectories.len() as f64;
    let mut surrogate = 0.0;
    for (trajectory, &advantage) in batch.trajectories.iter().zip(&batch.advantages) {
        let logp_new = trajectory_log_prob(theta, &trajectory.steps);
        let logp_old = trajectory_log_prob(theta_old, &trajectory.steps);
        let ratio = (logp_new - logp_old).exp();
        surrogate += clipped_surrogate(ratio, advantage, config.clip_eps);
    }
    let kl = kl_to_reference(theta, theta_ref, &batch.visited_keys());
    Ok(surrogate / g - config.kl_beta * kl)
}

/// Exact gradient of [`grpo_objective`] with respect to every logit of the
/// visited keys. At a clip kink the unclipped branch's gradient is used when
/// the min selects it; the clipped-constant branch contributes zero.
pub fn grpo_gradient(
    theta: &PolicyParams,
    theta_old: &PolicyParams,
    theta_ref: &PolicyParams,
    batch: &GroupBatch,
    config: &GrpoConfig,
) -> Result<HashMap<StateKey, Vec<f64>>, GrpoError> {
    check_batch(theta, batch)?;
    let k = theta.k();
    let g = batch.trajectories.len() as f64;
    let mut grad: HashMap<StateKey, Vec<f64>> = HashMap::new();

    for (trajectory, &advantage) in batch.trajectories.iter().zip(&batch.advantages) {
        let logp_new = trajectory_log_prob(theta, &trajectory.steps);
        let logp_old = trajectory_log_prob(theta_old, &trajectory.steps);
        let ratio = (logp_new - logp_old).exp();
        let clipped = ratio.clamp(1.0 - config.clip_eps, 1.0 + config.clip_eps);
        // min(r*A, clip(r)*A): gradient flows only through the unclipped
        // branch, and only when the min selects it.
        let unclipped_selected = ratio * advantage <= clipped * advantage;
        if !unclipped_selected || advantage == 0.0 {
            continue;
        }
        let coef = advantage * ratio / g;
        for step in &trajectory.steps {
            let probs = theta.probs(&step.key);
            let row = grad.entry(step.key).or_insert_with(|| vec![0.0; k]);
            for (j, &pj) in probs.iter().enumerate() {
                let indicator = if j == step.choice { 1.0 } else { 0.0 };
                row[j] += coef * (indicator - pj);
            }
        }
    }

    // KL term: d/dlogit[s,k] mean_s KL(p||q) = p_k * ((log p_k - log q_k) - KL_s) / |V|.
    let visited = batch.visited_keys();
    if config.kl_beta > 0.0 && !visited.is_empty() {
        let weight = config.kl_beta / visited.len() as f64;
        for key in &visited {
            let p = theta.probs(key);
            let lp = theta.log_probs(key);
            let lq = theta_ref.log_probs(key);
            let kl: f64 = p
                .iter()
                .zip(lp.iter().zip(&lq))
                .map(|(&pi, (&lpi, &lqi))| if pi > 0.0 { pi * (lpi - lqi) } else { 0.0 })
                .sum();
            let row = grad.entry(*key).or_insert_with(|| vec![0.0; k]);
            for j in 0..k {
                row[j] -= weight * p[j] * ((lp[j] - lq[j]) - kl);
            }
        }
    }
    Ok(grad)
}

fn check_batch(theta: &PolicyParams, batch: &GroupBatch) -> Result<(), GrpoError> {
    if batch.trajectories.len() < 2 {
        return Err(GrpoError::GroupTooSmall(batch.trajectories.len()));
    }
    if batch.trajectories.len() != batch.advantages.len() {
        return Err(GrpoError::Incompatible(
            "advantages not computed for this batch".into(),
        ));
    }
    let k = theta.k();
    for t in &batch.trajectories {
        if t.steps.iter().any(|s| s.choice >= k) {
            return Err(GrpoError::Incompatible(format!(
                "choice index out of range for K={k}"
            )));
        }
    }
    Ok(())
}
