//! The end-to-end training loop: sample G rollouts per script against the
//! simulator under frozen parameters, score them, normalize advantages
//! within the group, and ascend the analytic gradient.

use std::collections::HashMap;
use std::io::{self, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::templates::TemplateSet;
use super::{
    grpo_gradient, kl_to_reference, GroupBatch, GrpoConfig, GrpoError, PolicyParams,
    SampledTrajectory, StateKey, StateKeyConfig,
};
use crate::episode::{run_episode, EpisodeConfig, EpisodeInputs, SimEnvironment};
use crate::policy::SoftmaxPolicy;
use crate::reward::{total_reward, RewardConfig, RewardError};
use crate::script::{SemanticScript, TaskType};

/// One iteration's worth of the training curves.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRow {
    pub iteration: u32,
    pub mean_r_total: f64,
    pub mean_r_ans: f64,
    pub mean_r_fmt: f64,
    /// Visit-weighted policy entropy over the keys touched this iteration.
    pub entropy: f64,
    pub kl_to_ref: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingHistory {
    pub rows: Vec<TrainRow>,
}

impl TrainingHistory {
    pub fn write_csv<W: Write>(&self, w: &mut W) -> io::Result<()> {
        writeln!(
            w,
            "iteration,mean_r_total,mean_r_ans,mean_r_fmt,entropy,kl_to_ref"
        )?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.iteration, r.mean_r_total, r.mean_r_ans, r.mean_r_fmt, r.entropy, r.kl_to_ref
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub seed: u64,
    /// Stop early once an iteration's mean total reward reaches this value.
    pub stop_at_mean_reward: Option<f64>,
    pub state_keys: StateKeyConfig,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("script {script_id} is not trainable: {reason}")]
    UntrainableScript { script_id: String, reason: String },
    #[error("episode errored during rollout on {script_id}: {message}")]
    EpisodeFailed { script_id: String, message: String },
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub history: TrainingHistory,
}

/// Trains the tabular softmax policy on a script corpus.
///
/// Each iteration freezes the sampling parameters, shuffles the corpus,
/// rolls out `G` trajectories per script in the deterministic simulator,
/// and takes one gradient-ascent step per script group.
pub fn train(
    corpus: &[SemanticScript],
    grpo: &GrpoConfig,
    episode: &EpisodeConfig,
    options: &TrainOptions,
) -> Result<TrainOutcome, TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::EmptyCorpus);
    }
    grpo.validate()?;
    for script in corpus {
        if script.task_type == TaskType::FreeForm {
            return Err(TrainError::UntrainableScript {
                script_id: script.script_id.clone(),
                reason: "free-form answers are not auto-scorable".into(),
            });
        }
    }

    let reward_config = RewardConfig::default();
    let mut theta = PolicyParams::new_uniform(TemplateSet::standard().names());
    let theta_ref = theta.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut history = TrainingHistory::default();

    for iteration in 0..grpo.iterations {
        let theta_old = Arc::new(theta.clone());
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut rng);

        let mut sum_total = 0.0;
        let mut sum_ans = 0.0;
        let mut sum_fmt = 0.0;
        let mut episodes = 0usize;
        let mut visited: Vec<StateKey> = Vec::new();

        for &script_index in &order {
            let script = &corpus[script_index];
            let inputs = EpisodeInputs::from_script(script, "");
            let environment = SimEnvironment { script };
            let mut rollouts = Vec::with_capacity(grpo.group_size);
            for _ in 0..grpo.group_size {
                let mut policy = SoftmaxPolicy::new(theta_old.clone(), script, options.state_keys);
                let mut episode_rng = ChaCha8Rng::seed_from_u64(rng.random());
                let trajectory = run_episode(
                    &inputs,
                    &mut policy,
                    &environment,
                    episode,
                    &mut episode_rng,
                );
                if let crate::episode::EpisodeOutcome::Errored(message) = &trajectory.outcome {
                    return Err(TrainError::EpisodeFailed {
                        script_id: script.script_id.clone(),
                        message: message.clone(),
                    });
                }
                let breakdown = total_reward(&trajectory, &script.gold, &reward_config)?;
                sum_total += breakdown.r_total;
                sum_ans += breakdown.r_ans;
                sum_fmt += breakdown.r_fmt;
                episodes += 1;
                rollouts.push(SampledTrajectory {
                    steps: policy.take_records(),
                    reward: breakdown.r_total,
                });
            }
            let batch =
                GroupBatch::from_rollouts(script.script_id.clone(), rollouts, grpo.sigma_floor)?;
            visited.extend(batch.visited_keys());
            let gradient = grpo_gradient(&theta, &theta_old, &theta_ref, &batch, grpo)?;
            apply_ascent(&mut theta, &gradient, grpo.learning_rate);
        }

        let mean_total = sum_total / episodes as f64;
        if mean_total.is_nan() {
            return Err(GrpoError::Diverged(iteration).into());
        }
        let entropy = visit_weighted_entropy(&theta, &visited);
        let kl = kl_to_reference(&theta, &theta_ref, &visited);
        history.rows.push(TrainRow {
            iteration,
            mean_r_total: mean_total,
            mean_r_ans: sum_ans / episodes as f64,
            mean_r_fmt: sum_fmt / episodes as f64,
            entropy,
            kl_to_ref: kl,
        });
        if options
            .stop_at_mean_reward
            .is_some_and(|threshold| mean_total >= threshold)
        {
            break;
        }
    }

    Ok(TrainOutcome {
        params: theta,
        history,
    })
}

fn apply_ascent(theta: &mut PolicyParams, gradient: &HashMap<StateKey, Vec<f64>>, lr: f64) {
    for (key, grad_row) in gradient {
        let row = theta.ensure_row(*key);
        for (w, g) in row.iter_mut().zip(grad_row) {
            *w += lr * g;
        }
    }
}

fn visit_weighted_entropy(theta: &PolicyParams, visited: &[StateKey]) -> f64 {
    if visited.is_empty() {
        return 0.0;
    }
    visited.iter().map(|k| theta.entropy(k)).sum::<f64>() / visited.len() as f64
}
