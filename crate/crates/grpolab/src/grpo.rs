//! Group-relative policy optimization.
//!
//! One update: snapshot the current policy, sample a group of rollouts per
//! prompt, score every rollout through the channel and reward head, normalize
//! rewards within each group into advantages, then take one ascent step per
//! group (repeated `inner_epochs` times) on
//!
//! ```text
//! J = (1/G) sum_i (1/|o_i|) sum_t [ ratio_{i,t} * A_i - beta * kl_{i,t} ]
//! ```
//!
//! with `ratio = exp(logp_current - logp_old)` and the per-token KL estimate
//! `kl = r - ln r - 1`, `r = exp(logp_ref - logp_current)`. The estimate is
//! computed as `expm1(d) - d` with `d = logp_ref - logp_current`, which is
//! exactly zero at `d = 0` and never negative in floating point. The gradient
//! flows only through `logp_current`; `logp_old` and `logp_ref` are data.
//!
//! Three policy snapshots are in play: `current` (updated in place), `old`
//! (refreshed at the start of every update; the sampling distribution), and
//! `reference` (frozen at construction; anchors the KL penalty). A hash audit
//! verifies the reference never moves across a training run.


use serde::{Deserialize, Serialize};

use crate::asr_sim::AsrChannelModel;
use crate::error::{Error, Result};
use crate::policy::{PolicyModel, Rollout};
use crate::reward::{score_rollout, RewardBreakdown, RewardConfig};
use crate::seqcore::{PromptCorpus, SeededRng, Split, TokenId, TokenSequence};

/// Per-token KL divergence estimate of the current policy from the reference,
/// from the two log-probabilities of the same sampled token.
pub fn kl_per_token(logp_ref: f64, logp_current: f64) -> f64 {
    let d = logp_ref - logp_current;
    d.exp_m1() - d
}

/// Group-relative advantages: rewards standardized by the group's own mean
/// and population standard deviation. A group whose rewards are effectively
/// constant (std at or below `std_epsilon`) gets all-zero advantages rather
/// than amplified noise.
pub fn compute_advantages(rewards: &[f64], std_epsilon: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::config(format!(
            "group of {} rewards cannot be standardized; need at least 2",
            rewards.len()
        )));
    }
    if !std_epsilon.is_finite() || std_epsilon <= 0.0 {
        return Err(Error::config(format!(
            "std_epsilon {std_epsilon} must be positive"
        )));
    }
    if let Some(bad) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(Error::usage(format!("non-finite reward {bad} in group")));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std <= std_epsilon {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// A flat gradient over the policy's parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub values: Vec<f64>,
}

impl GradientVector {
    pub fn zeros(len: usize) -> Self {
        GradientVector {
            values: vec![0.0; len],
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Objective value and its exact gradient for one rollout group, evaluated at
/// the model's current parameters. `logp_current` is recomputed here with a
/// fresh forward pass (the cached copies on the rollouts may be stale after
/// earlier group steps); `logp_old` and `logp_ref` are taken from the
/// rollouts as fixed data.
///
/// With `clip` set, each token's policy term is the pessimistic minimum of
/// the raw and ratio-clamped terms; tokens where the clamp binds contribute
/// no policy gradient.
pub fn objective_gradient(
    model: &PolicyModel,
    rollouts: &[Rollout],
    advantages: &[f64],
    beta: f64,
    clip: Option<f64>,
) -> Result<(f64, GradientVector)> {
    if rollouts.is_empty() {
        return Err(Error::config("objective over an empty rollout group"));
    }
    if rollouts.len() != advantages.len() {
        return Err(Error::usage(format!(
            "{} advantages for {} rollouts",
            advantages.len(),
            rollouts.len()
        )));
    }
    if !beta.is_finite() || beta < 0.0 {
        return Err(Error::config(format!("beta {beta} must be non-negative")));
    }
    if let Some(eps) = clip {
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::config(format!(
                "clip epsilon {eps} must lie in (0, 1)"
            )));
        }
    }

    let g = rollouts.len() as f64;
    let mut objective = 0.0;
    let mut grad = GradientVector::zeros(model.param_count());
    for (rollout, &adv) in rollouts.iter().zip(advantages) {
        let n = rollout.output.len();
        if n == 0 {
            continue;
        }
        if rollout.logp_old.len() != n || rollout.logp_ref.len() != n {
            return Err(Error::usage(format!(
                "rollout carries {} old / {} reference log-probs for {n} tokens",
                rollout.logp_old.len(),
                rollout.logp_ref.len()
            )));
        }
        let scale = 1.0 / (g * n as f64);
        let logp_old = &rollout.logp_old;
        let logp_ref = &rollout.logp_ref;
        let mut j_rollout = 0.0;
        model.grad_with_weights(
            &rollout.prompt,
            rollout.output.tokens(),
            |logps| {
                let mut weights = Vec::with_capacity(n);
                for t in 0..n {
                    let ratio = (logps[t] - logp_old[t]).exp();
                    let d = logp_ref[t] - logps[t];
                    let r_ref = d.exp();
                    let kl = d.exp_m1() - d;
                    let (term, coeff) = match clip {
                        None => (adv * ratio, adv * ratio),
                        Some(eps) => {
                            let unclipped = adv * ratio;
                            let clamped = adv * ratio.clamp(1.0 - eps, 1.0 + eps);
                            if unclipped <= clamped {
                                (unclipped, unclipped)
                            } else {
                                (clamped, 0.0)
                            }
                        }
                    };
                    j_rollout += scale * (term - beta * kl);
                    weights.push(scale * (coeff + beta * (r_ref - 1.0)));
                }
                weights
            },
            &mut grad.values,
        )?;
        objective += j_rollout;
    }
    Ok((objective, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::config(format!(
                "unknown optimizer '{other}' (expected sgd or adam)"
            ))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Ascent rule applied to the flat parameter vector. Adam keeps first and
/// second moment estimates across the whole run (they are not reset between
/// updates).
#[derive(Debug, Clone)]
pub struct Optimizer {
    learning_rate: f64,
    state: OptimizerState,
}

#[derive(Debug, Clone)]
enum OptimizerState {
    Sgd,
    Adam { m: Vec<f64>, v: Vec<f64>, t: u64 },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        let state = match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam => OptimizerState::Adam {
                m: Vec::new(),
                v: Vec::new(),
                t: 0,
            },
        };
        Optimizer {
            learning_rate,
            state,
        }
    }

    /// One maximization step along `grad`.
    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        match &mut self.state {
            OptimizerState::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p += self.learning_rate * g;
                }
            }
            OptimizerState::Adam { m, v, t } => {
                if m.is_empty() {
                    m.resize(params.len(), 0.0);
                    v.resize(params.len(), 0.0);
                }
                *t += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(*t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(*t as i32);
                for i in 0..params.len() {
                    m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
                    v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    params[i] += self.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

/// Training hyperparameters. `batch_size = 0` means the whole train split
/// every update; `checkpoint_every = 0` disables periodic checkpoints (the
/// final model is always returned).
#[derive(Debug, Clone, PartialEq)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub beta: f64,
    pub learning_rate: f64,
    pub updates: usize,
    /// Ascent sweeps over the sampled groups per update.
    pub inner_epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    /// Reward-std floor below which a group counts as degenerate.
    pub std_epsilon: f64,
    /// Ratio clipping half-width; `None` disables clipping.
    pub clip_epsilon: Option<f64>,
    pub optimizer: OptimizerKind,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 8,
            beta: 0.1,
            learning_rate: 1e-5,
            updates: 200,
            inner_epochs: 1,
            batch_size: 0,
            temperature: 1.0,
            std_epsilon: 1e-8,
            clip_epsilon: None,
            optimizer: OptimizerKind::Sgd,
            checkpoint_every: 0,
            seed: 17,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::config(format!(
                "group_size {} must be at least 2",
                self.group_size
            )));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::config(format!(
                "beta {} must be non-negative",
                self.beta
            )));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.inner_epochs == 0 {
            return Err(Error::config("inner_epochs must be at least 1"));
        }
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(Error::config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if !self.std_epsilon.is_finite() || self.std_epsilon <= 0.0 {
            return Err(Error::config(format!(
                "std_epsilon {} must be positive",
                self.std_epsilon
            )));
        }
        if let Some(eps) = self.clip_epsilon {
            if !(eps > 0.0 && eps < 1.0) {
                return Err(Error::config(format!(
                    "clip_epsilon {eps} must lie in (0, 1)"
                )));
            }
        }
        Ok(())
    }
}

/// One prompt's sampled group with everything derived from it.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub prompt_index: usize,
    pub rollouts: Vec<Rollout>,
    pub breakdowns: Vec<RewardBreakdown>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// The mutable state of a training run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub current: PolicyModel,
    pub reference: PolicyModel,
    pub old: PolicyModel,
    pub step: usize,
    pub optimizer: Optimizer,
}

impl TrainState {
    /// Freezes `initial` as both the reference and the first sampling
    /// snapshot.
    pub fn new(initial: PolicyModel, config: &GrpoConfig) -> Self {
        let reference = initial.clone();
        let old = initial.clone();
        TrainState {
            current: initial,
            reference,
            old,
            step: 0,
            optimizer: Optimizer::new(config.optimizer, config.learning_rate),
        }
    }
}

/// Scalar diagnostics of one update, measured on the freshly sampled batch
/// before any parameter movement (so `mean_kl` reflects the policy that did
/// the sampling). `objective` and `grad_norm` average over the update's
/// group steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_cer: f64,
    pub mean_nll: f64,
    pub mean_kl: f64,
    pub objective: f64,
    pub grad_norm: f64,
}

/// One rollout's scoring record, for the per-step detail log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutDetail {
    pub step: usize,
    pub prompt_id: usize,
    pub prompt_len: usize,
    pub output: Vec<TokenId>,
    pub cer: f64,
    pub nll_used: f64,
    pub r_cer: f64,
    pub r_nll: f64,
    pub r_combined: f64,
    pub advantage: f64,
}

/// Receives per-update artifacts during training. Implementations write logs
/// and checkpoints; training itself never touches the filesystem.
pub trait TrainSink {
    fn on_update(
        &mut self,
        metrics: &UpdateMetrics,
        details: &[RolloutDetail],
        model: &PolicyModel,
    ) -> Result<()>;

    fn on_checkpoint(&mut self, step: usize, model: &PolicyModel) -> Result<()>;
}

/// Discards everything.
pub struct NullSink;

impl TrainSink for NullSink {
    fn on_update(&mut self, _: &UpdateMetrics, _: &[RolloutDetail], _: &PolicyModel) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _: usize, _: &PolicyModel) -> Result<()> {
        Ok(())
    }
}

/// One full update over the given prompt batch: snapshot, sample, score,
/// standardize, then sequential ascent steps group by group (`inner_epochs`
/// sweeps). Returns the diagnostics and the per-rollout detail records.
///
/// A non-finite objective or gradient aborts the update before the offending
/// step is applied.
pub fn run_update(
    state: &mut TrainState,
    batch: &[(usize, &TokenSequence)],
    channel: &AsrChannelModel,
    reward_config: &RewardConfig,
    config: &GrpoConfig,
    rng: &mut SeededRng,
) -> Result<(UpdateMetrics, Vec<RolloutDetail>)> {
    config.validate()?;
    reward_config.validate()?;
    if batch.is_empty() {
        return Err(Error::config("update over an empty prompt batch"));
    }

    state.old = state.current.clone();
    let mut groups = Vec::with_capacity(batch.len());
    for &(prompt_index, prompt) in batch {
        let mut rollouts = Vec::with_capacity(config.group_size);
        for _ in 0..config.group_size {
            let mut rollout = state.current.sample(prompt, config.temperature, rng)?;
            rollout.rescore_ref(&state.reference)?;
            rollouts.push(rollout);
        }
        let mut breakdowns = Vec::with_capacity(rollouts.len());
        let mut rewards = Vec::with_capacity(rollouts.len());
        for rollout in &rollouts {
            let breakdown =
                score_rollout(reward_config, channel, prompt, &rollout.content_output())?;
            rewards.push(breakdown.r_combined);
            breakdowns.push(breakdown);
        }
        let advantages = compute_advantages(&rewards, config.std_epsilon)?;
        groups.push(RolloutGroup {
            prompt_index,
            rollouts,
            breakdowns,
            rewards,
            advantages,
        });
    }

    let step = state.step + 1;
    let mut details = Vec::new();
    let mut reward_sum = 0.0;
    let mut cer_sum = 0.0;
    let mut nll_sum = 0.0;
    let mut rollout_count = 0usize;
    let mut kl_sum = 0.0;
    let mut token_count = 0usize;
    for group in &groups {
        for (i, rollout) in group.rollouts.iter().enumerate() {
            let b = &group.breakdowns[i];
            reward_sum += b.r_combined;
            cer_sum += b.cer;
            nll_sum += b.nll_used;
            rollout_count += 1;
            for (lr, lc) in rollout.logp_ref.iter().zip(&rollout.logp_current) {
                kl_sum += kl_per_token(*lr, *lc);
                token_count += 1;
            }
            details.push(RolloutDetail {
                step,
                prompt_id: group.prompt_index,
                prompt_len: rollout.prompt.len(),
                output: rollout.output.tokens().to_vec(),
                cer: b.cer,
                nll_used: b.nll_used,
                r_cer: b.r_cer,
                r_nll: b.r_nll,
                r_combined: b.r_combined,
                advantage: group.advantages[i],
            });
        }
    }

    let mut objective_sum = 0.0;
    let mut grad_norm_sum = 0.0;
    let mut group_steps = 0usize;
    for _ in 0..config.inner_epochs {
        for group in &groups {
            let (objective, grad) = objective_gradient(
                &state.current,
                &group.rollouts,
                &group.advantages,
                config.beta,
                config.clip_epsilon,
            )?;
            if !objective.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    quantity: "objective".into(),
                });
            }
            if !grad.all_finite() {
                return Err(Error::NonFinite {
                    step,
                    quantity: "gradient".into(),
                });
            }
            state
                .optimizer
                .ascend(state.current.params_mut(), &grad.values);
            objective_sum += objective;
            grad_norm_sum += grad.l2_norm();
            group_steps += 1;
        }
    }

    state.step = step;
    let metrics = UpdateMetrics {
        step,
        mean_reward: reward_sum / rollout_count as f64,
        mean_cer: cer_sum / rollout_count as f64,
        mean_nll: nll_sum / rollout_count as f64,
        mean_kl: kl_sum / token_count.max(1) as f64,
        objective: objective_sum / group_steps as f64,
        grad_norm: grad_norm_sum / group_steps as f64,
    };
    Ok((metrics, details))
}

/// Runs the full training loop: per update, shuffle the train split, take the
/// leading `batch_size` prompts (the whole split when 0), and apply
/// `run_update`. The sink sees every update and any periodic checkpoints; the
/// final model is returned. Fails if the frozen reference was touched.
pub fn train(
    initial: PolicyModel,
    corpus: &PromptCorpus,
    channel: &AsrChannelModel,
    reward_config: &RewardConfig,
    config: &GrpoConfig,
    sink: &mut dyn TrainSink,
) -> Result<(PolicyModel, Vec<UpdateMetrics>)> {
    config.validate()?;
    reward_config.validate()?;
    let prompts: Vec<(usize, &TokenSequence)> = corpus.iter_split(Split::Train).collect();
    if prompts.is_empty() {
        return Err(Error::config("training needs a non-empty train split"));
    }
    let batch_size = if config.batch_size == 0 {
        prompts.len()
    } else {
        config.batch_size.min(prompts.len())
    };

    let mut rng = SeededRng::new(config.seed);
    let mut state = TrainState::new(initial, config);
    let reference_hash = state.reference.param_hash();
    let mut history = Vec::with_capacity(config.updates);

    let mut order: Vec<usize> = (0..prompts.len()).collect();
    for u in 0..config.updates {
        rng.shuffle(&mut order);
        let batch: Vec<(usize, &TokenSequence)> =
            order[..batch_size].iter().map(|&i| prompts[i]).collect();
        let (metrics, details) = run_update(
            &mut state,
            &batch,
            channel,
            reward_config,
            config,
            &mut rng,
        )?;
        sink.on_update(&metrics, &details, &state.current)?;
        history.push(metrics);
        let is_last = u + 1 == config.updates;
        if config.checkpoint_every > 0 && state.step.is_multiple_of(config.checkpoint_every) && !is_last
        {
            sink.on_checkpoint(state.step, &state.current)?;
        }
    }

    if state.reference.param_hash() != reference_hash {
        return Err(Error::Run(
            "reference policy changed during training; KL anchor is invalid".into(),
        ));
    }
    Ok((state.current, history))
}
