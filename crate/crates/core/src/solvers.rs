//! Closed-form optimal policies, computed in log space with per-row max
//! subtraction so large `1/β` exponents never overflow.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::BetaParam;
use crate::matrix::Matrix;
use crate::tabular::{CategoricalConditional, RewardTable, TabularPolicy};

/// Chosen and rejected marginals `(π_w, π_l)`, both with full support.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginalPair {
    pub chosen: CategoricalConditional,
    pub rejected: CategoricalConditional,
}

impl MarginalPair {
    pub fn new(chosen: CategoricalConditional, rejected: CategoricalConditional) -> Result<Self> {
        chosen.probs().require_shape(rejected.shape())?;
        chosen.require_full_support()?;
        rejected.require_full_support()?;
        Ok(Self { chosen, rejected })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.chosen.shape()
    }
}

fn softmax_rows(scores: Matrix) -> CategoricalConditional {
    let mut out = scores;
    for x in 0..out.rows() {
        let p = crate::numeric::softmax(out.row(x));
        out.row_mut(x).copy_from_slice(&p);
    }
    CategoricalConditional::from_normalized_unchecked(out)
}

/// `π(y|x) ∝ π_ref(y|x) exp(r(x, y)/β)`.
pub fn rlhf_optimal_policy(
    reward: &RewardTable,
    reference: &CategoricalConditional,
    beta: BetaParam,
) -> Result<CategoricalConditional> {
    reward.values().require_shape(reference.shape())?;
    reference.require_full_support()?;
    let b = beta.value();
    let scores = reference
        .log_probs()
        .zip_map(reward.values(), |lr, r| lr + r / b)?;
    Ok(softmax_rows(scores))
}

/// Logits `ln π_ref + r/β` of the tilted reference. Unlike the normalized
/// form these stay finite when some probabilities underflow.
pub fn rlhf_optimal_logits(
    reward: &RewardTable,
    reference: &CategoricalConditional,
    beta: BetaParam,
) -> Result<TabularPolicy> {
    reward.values().require_shape(reference.shape())?;
    reference.require_full_support()?;
    let b = beta.value();
    TabularPolicy::new(reference.log_probs().zip_map(reward.values(), |lr, r| lr + r / b)?)
}

/// `π(y|x) ∝ (π_w(y|x)/π_l(y|x))^{1/β} π_ref(y|x)`, the minimizer of the
/// DPO loss on independent `π_w × π_l` pairs.
pub fn dpo_optimal_policy(
    marginals: &MarginalPair,
    reference: &CategoricalConditional,
    beta: BetaParam,
) -> Result<CategoricalConditional> {
    let implied = implied_reward(marginals)?;
    rlhf_optimal_policy(&implied, reference, beta)
}

/// `r̃(x, y) = log(π_w(y|x)/π_l(y|x))`.
pub fn implied_reward(marginals: &MarginalPair) -> Result<RewardTable> {
    marginals.chosen.require_full_support()?;
    marginals.rejected.require_full_support()?;
    let r = marginals
        .chosen
        .log_probs()
        .zip_map(&marginals.rejected.log_probs(), |w, l| w - l)?;
    RewardTable::new(r)
}
