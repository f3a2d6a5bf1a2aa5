//! Deterministic gradient-descent loops over tabular policies.
//!
//! Each loop records the loss and gradient max-norm at every step, stops at
//! the step budget or when the gradient max-norm falls to `convergence_tol`,
//! and snapshots logits at a fixed interval.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::losses::{
    dpo_gradient, dpo_loss, online_dpo_gradient, online_dpo_loss, rlhf_gradient, rlhf_objective,
    sft_kl_gradient, sft_kl_loss, BetaParam, GradientTable, SupervisedSet,
};
use crate::matrix::Matrix;
use crate::preference::PreferencePairSet;
use crate::rng::{categorical, stream, StreamRng};
use crate::tabular::{require_prompts, CategoricalConditional, PromptSpace, RewardTable, TabularPolicy};

pub const DEFAULT_CONVERGENCE_TOL: f64 = 1e-8;
pub const DEFAULT_SNAPSHOT_EVERY: usize = 100;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    #[default]
    GradientDescent,
    Momentum { coefficient: f64 },
}

fn default_tol() -> f64 {
    DEFAULT_CONVERGENCE_TOL
}

fn default_snapshot_every() -> usize {
    DEFAULT_SNAPSHOT_EVERY
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub beta: BetaParam,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default = "default_tol")]
    pub convergence_tol: f64,
    #[serde(default)]
    pub seed: u64,
    /// Logit snapshot interval; 0 disables snapshots.
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: usize,
}

impl TrainConfig {
    pub fn new(learning_rate: f64, steps: usize, beta: f64) -> Result<Self> {
        let cfg = Self {
            learning_rate,
            steps,
            beta: BetaParam::new(beta)?,
            optimizer: Optimizer::GradientDescent,
            convergence_tol: DEFAULT_CONVERGENCE_TOL,
            seed: 0,
            snapshot_every: DEFAULT_SNAPSHOT_EVERY,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(invalid(format!("learning rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if self.steps == 0 {
            return Err(invalid("steps must be at least 1"));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(invalid("convergence_tol must be >= 0"));
        }
        if let Optimizer::Momentum { coefficient } = self.optimizer {
            if !(0.0..1.0).contains(&coefficient) {
                return Err(invalid(format!("momentum coefficient {coefficient} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    pub logits: Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    StepBudget,
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<StepRecord>,
    pub snapshots: Vec<Snapshot>,
    pub stop: StopReason,
}

impl TrainTrace {
    fn new() -> Self {
        Self {
            records: Vec::new(),
            snapshots: Vec::new(),
            stop: StopReason::StepBudget,
        }
    }

    pub fn last(&self) -> Option<&StepRecord> {
        self.records.last()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// `step,loss,grad_norm` rows with a header line.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "step,loss,grad_norm")?;
        for r in &self.records {
            writeln!(out, "{},{:e},{:e}", r.step, r.loss, r.grad_norm)?;
        }
        Ok(())
    }
}

/// Optimizer state carried across steps.
#[derive(Clone, Debug)]
pub struct Descent {
    learning_rate: f64,
    optimizer: Optimizer,
    velocity: Option<Matrix>,
}

impl Descent {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            learning_rate: config.learning_rate,
            optimizer: config.optimizer,
            velocity: None,
        }
    }

    pub fn step(&mut self, policy: &TabularPolicy, gradient: &GradientTable) -> Result<TabularPolicy> {
        policy.logits().require_shape(gradient.shape())?;
        if !gradient.all_finite() {
            return Err(Error::Diverged {
                step: 0,
                trace: Box::new(TrainTrace::new()),
            });
        }
        let direction = match self.optimizer {
            Optimizer::GradientDescent => gradient.clone(),
            Optimizer::Momentum { coefficient } => {
                let v = match &self.velocity {
                    Some(v) => v.zip_map(gradient, |v, g| coefficient * v + g)?,
                    None => gradient.clone(),
                };
                self.velocity = Some(v.clone());
                v
            }
        };
        let a = self.learning_rate;
        let logits = policy.logits().zip_map(&direction, |t, d| t - a * d)?;
        TabularPolicy::new(logits)
    }
}

/// `θ − α·g` (momentum starts from zero velocity, so one step is the same).
pub fn gd_step(policy: &TabularPolicy, gradient: &GradientTable, config: &TrainConfig) -> Result<TabularPolicy> {
    Descent::new(config).step(policy, gradient)
}

/// Runs the descent loop on an arbitrary `(loss, gradient)` oracle.
pub fn train_with(
    policy0: &TabularPolicy,
    config: &TrainConfig,
    mut objective: impl FnMut(&TabularPolicy, &mut StreamRng) -> Result<(f64, GradientTable)>,
) -> Result<(TabularPolicy, TrainTrace)> {
    config.validate()?;
    let mut rng = stream(config.seed, 0);
    let mut descent = Descent::new(config);
    let mut policy = policy0.clone();
    let mut trace = TrainTrace::new();
    for step in 0..config.steps {
        if config.snapshot_every > 0 && step % config.snapshot_every == 0 {
            trace.snapshots.push(Snapshot {
                step,
                logits: policy.logits().clone(),
            });
        }
        let (loss, grad) = objective(&policy, &mut rng)?;
        let grad_norm = grad.max_abs();
        if !loss.is_finite() || !grad.all_finite() {
            trace.stop = StopReason::Diverged;
            return Err(Error::Diverged {
                step,
                trace: Box::new(trace),
            });
        }
        trace.records.push(StepRecord { step, loss, grad_norm });
        if grad_norm <= config.convergence_tol {
            trace.stop = StopReason::Converged;
            return Ok((policy, trace));
        }
        policy = match descent.step(&policy, &grad) {
            Ok(p) => p,
            Err(_) => {
                trace.stop = StopReason::Diverged;
                return Err(Error::Diverged {
                    step,
                    trace: Box::new(trace),
                });
            }
        };
    }
    trace.stop = StopReason::StepBudget;
    Ok((policy, trace))
}

/// Offline DPO on a fixed pair set.
pub fn train_dpo(
    policy0: &TabularPolicy,
    reference: &CategoricalConditional,
    data: &PreferencePairSet,
    config: &TrainConfig,
) -> Result<(TabularPolicy, TrainTrace)> {
    let beta = config.beta;
    // surface support problems before the loop rather than as divergence
    dpo_loss(policy0, reference, data, beta)?;
    train_with(policy0, config, |p, _| {
        Ok((dpo_loss(p, reference, data, beta)?, dpo_gradient(p, reference, data, beta)?))
    })
}

/// Where the rejected response of an online pair comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RejectedSource {
    /// Sum over the current policy analytically.
    CurrentPolicy,
    /// Draw `batch` triples per step from `𝒟_x × π* × π_θ`.
    Sampled { batch: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlineSpec {
    pub chosen_marginal: CategoricalConditional,
    pub rejected_source: RejectedSource,
}

/// Online DPO: chosen from the fixed `π*`, rejected from the current policy.
pub fn train_online_dpo(
    policy0: &TabularPolicy,
    reference: &CategoricalConditional,
    online: &OnlineSpec,
    prompts: &PromptSpace,
    config: &TrainConfig,
) -> Result<(TabularPolicy, TrainTrace)> {
    let beta = config.beta;
    let chosen = &online.chosen_marginal;
    online_dpo_loss(policy0, reference, chosen, prompts, beta)?;
    match online.rejected_source {
        RejectedSource::CurrentPolicy => train_with(policy0, config, |p, _| {
            Ok((
                online_dpo_loss(p, reference, chosen, prompts, beta)?,
                online_dpo_gradient(p, reference, chosen, prompts, beta)?,
            ))
        }),
        RejectedSource::Sampled { batch } => {
            if batch == 0 {
                return Err(invalid("sampled online batch must be positive"));
            }
            train_with(policy0, config, |p, rng| {
                let probs = p.probs();
                let mut triples = Vec::with_capacity(batch);
                for _ in 0..batch {
                    let x = categorical(rng, prompts.weights());
                    let w = categorical(rng, chosen.row(x));
                    let l = categorical(rng, probs.row(x));
                    if w != l {
                        triples.push((x, w, l));
                    }
                }
                if triples.is_empty() {
                    // every draw collided: no pair carries signal this step
                    return Ok((std::f64::consts::LN_2, Matrix::zeros(p.prompts(), p.responses())));
                }
                let data = PreferencePairSet::from_triples(p.prompts(), p.responses(), &triples)?;
                Ok((dpo_loss(p, reference, &data, beta)?, dpo_gradient(p, reference, &data, beta)?))
            })
        }
    }
}

/// Descends `−𝔼_{π*}[log π_θ] + κ KL(π_θ‖π_ref)` with `κ = kl_weight`.
pub fn train_sft_kl(
    policy0: &TabularPolicy,
    reference: &CategoricalConditional,
    chosen_marginal: &CategoricalConditional,
    prompts: &PromptSpace,
    config: &TrainConfig,
    kl_weight: f64,
) -> Result<(TabularPolicy, TrainTrace)> {
    if !(kl_weight >= 0.0) || !kl_weight.is_finite() {
        return Err(invalid(format!("kl_weight must be finite and >= 0, got {kl_weight}")));
    }
    require_prompts(prompts, policy0.prompts())?;
    let target = SupervisedSet::from_conditional(prompts, chosen_marginal)?;
    reference.require_full_support()?;
    train_with(policy0, config, |p, _| {
        Ok((
            sft_kl_loss(p, &target, reference, prompts, kl_weight)?,
            sft_kl_gradient(p, &target, reference, prompts, kl_weight)?,
        ))
    })
}

/// Descends the KL-regularized reward objective with `β = config.beta`.
pub fn train_rlhf(
    policy0: &TabularPolicy,
    reward: &RewardTable,
    reference: &CategoricalConditional,
    prompts: &PromptSpace,
    config: &TrainConfig,
) -> Result<(TabularPolicy, TrainTrace)> {
    let beta = config.beta;
    rlhf_objective(policy0, reward, reference, prompts, beta)?;
    train_with(policy0, config, |p, _| {
        Ok((
            rlhf_objective(p, reward, reference, prompts, beta)?,
            rlhf_gradient(p, reward, reference, prompts, beta)?,
        ))
    })
}
