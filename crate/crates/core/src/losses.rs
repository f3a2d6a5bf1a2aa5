//! Exact objectives and logit gradients over finite spaces: SFT, RLHF, DPO,
//! online DPO, the reformulated DPO losses, the KL term, the functional
//! derivative `g_θ`, and the score-function identity.
//!
//! Every expectation is a deterministic serial sum over the finite support.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::matrix::Matrix;
use crate::numeric::{log_sigmoid, sigmoid};
use crate::preference::{
    symmetrized_pair_density, PairDistribution, PreferenceOracle, PreferencePairSet,
};
use crate::tabular::{
    kl_divergence, require_prompts, CategoricalConditional, PromptSpace, RewardTable,
    TabularPolicy, ROW_SUM_TOL,
};

/// Per-logit partial derivatives of a scalar loss.
pub type GradientTable = Matrix;

/// KL strength β; also the implicit-reward scale.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct BetaParam(f64);

impl BetaParam {
    pub fn new(value: f64) -> Result<Self> {
        if !(value > 0.0) || !value.is_finite() {
            return Err(invalid(format!("beta must be positive and finite, got {value}")));
        }
        if value > 1.0 {
            log::warn!("beta = {value} > 1: small-beta approximations degrade");
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for BetaParam {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        BetaParam::new(v)
    }
}

impl From<BetaParam> for f64 {
    fn from(b: BetaParam) -> f64 {
        b.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupervisedItem {
    pub prompt: usize,
    pub response: usize,
    pub weight: f64,
}

/// Weighted demonstration pairs `(x, y)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisedSet {
    prompts: usize,
    responses: usize,
    items: Vec<SupervisedItem>,
}

impl SupervisedSet {
    pub fn new(prompts: usize, responses: usize, items: Vec<SupervisedItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(invalid("supervised set is empty"));
        }
        let mut total = 0.0;
        for (i, it) in items.iter().enumerate() {
            if it.prompt >= prompts || it.response >= responses {
                return Err(invalid(format!("item {i} has an index out of range")));
            }
            if !it.weight.is_finite() || it.weight < 0.0 {
                return Err(invalid(format!("item {i} has weight {}", it.weight)));
            }
            total += it.weight;
        }
        if (total - 1.0).abs() > ROW_SUM_TOL {
            return Err(invalid(format!("supervised weights sum to {total}, not 1")));
        }
        Ok(Self {
            prompts,
            responses,
            items,
        })
    }

    /// Exact law `𝒟_x × target`: one item per cell with weight `w(x)·target(y|x)`.
    pub fn from_conditional(prompts: &PromptSpace, target: &CategoricalConditional) -> Result<Self> {
        require_prompts(prompts, target.prompts())?;
        let (n, m) = target.shape();
        let items = (0..n)
            .flat_map(|x| {
                (0..m).map(move |y| SupervisedItem {
                    prompt: x,
                    response: y,
                    weight: prompts.weight(x) * target.get(x, y),
                })
            })
            .filter(|it| it.weight > 0.0)
            .collect();
        Self::new(n, m, items)
    }

    /// Chosen responses of a preference set, keeping the item weights.
    pub fn chosen_of(pairs: &PreferencePairSet) -> Result<Self> {
        let items = pairs
            .items()
            .iter()
            .map(|it| SupervisedItem {
                prompt: it.prompt,
                response: it.chosen,
                weight: it.weight,
            })
            .collect();
        Self::new(pairs.prompts(), pairs.responses(), items)
    }

    pub fn items(&self) -> &[SupervisedItem] {
        &self.items
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.prompts, self.responses)
    }
}

fn require_policy_shape(policy: &TabularPolicy, shape: (usize, usize)) -> Result<()> {
    policy.logits().require_shape(shape)
}

/// `−Σ w log π_θ(y|x)`.
pub fn sft_loss(policy: &TabularPolicy, data: &SupervisedSet) -> Result<f64> {
    require_policy_shape(policy, data.shape())?;
    let logp = policy.log_probs();
    Ok(-data
        .items
        .iter()
        .map(|it| it.weight * logp.get(it.prompt, it.response))
        .sum::<f64>())
}

/// `Σ w (π_θ(·|x) − e_y)` at each datum's prompt.
pub fn sft_gradient(policy: &TabularPolicy, data: &SupervisedSet) -> Result<GradientTable> {
    require_policy_shape(policy, data.shape())?;
    let probs = policy.probs();
    let mut grad = Matrix::zeros(data.prompts, data.responses);
    for it in &data.items {
        let row = grad.row_mut(it.prompt);
        for (g, p) in row.iter_mut().zip(probs.row(it.prompt)) {
            *g += it.weight * p;
        }
        row[it.response] -= it.weight;
    }
    Ok(grad)
}

/// `r̂_θ(x, y) = β [log π_θ(y|x) − log π_ref(y|x)]`.
pub fn implicit_reward(
    policy: &TabularPolicy,
    reference: &CategoricalConditional,
    beta: BetaParam,
    x: usize,
    y: usize,
) -> Result<f64> {
    require_policy_shape(policy, reference.shape())?;
    if x >= policy.prompts() || y >= policy.responses() {
        return Err(invalid(format!("index ({x}, {y}) out of range")));
    }
    reference.require_support_where(|i, j| i == x && j == y)?;
    let logp = crate::numeric::log_softmax(policy.logits().row(x))[y];
    Ok(beta.value() * (logp - reference.get(x, y).ln()))
}

fn check_pair_inputs(
    policy: &TabularPolicy,
    reference: &CategoricalConditional,
    data: &PreferencePairSet,
) -> Result<()> {
    require_policy_shape(policy, data.shape())?;
    reference.probs().require_shape(data.shape())?;
    let covered = data.coverage();
    reference.require_support_where(|x, y| covered[x][y])
}

/// Implicit-reward margin `β((θ_w − θ_l) − (ln ref_w − ln ref_l))`; the
/// per-prompt log-partition cancels, so raw logits suffice.
fn dpo_margin(logits: &Matrix, log_ref: &Matrix, beta: f64, x: usize, w: usize, l: usize) -> f64 {
    beta * ((logits.get(x, w) - logits.get(x, l)) - (log_ref.get(x, w) - log_ref.get(x, l)))
}

/// `−Σ w log σ(r̂_θ(x, y_w) − r̂_θ(x, y_l))`.
pub fn dpo_loss(
    policy: &TabularPolicy,
    reference: &CategoricalConditional,
    data: &PreferencePairSet,
    beta: BetaParam,
) -> Result<f64> {
    check_pair_inputs(policy, reference, data)?;
    let log_ref = reference.log_probs();
    Ok(-data
        .items()
        .iter()
        .map(|it| {
            let m = dpo_margin(policy.logits(), &log_ref, beta.value(), it.prompt, it.chosen, it.rejected);
            it.weight * log_sigmoid(m)
        })
        .sum::<f64>())
}

/// Logit gradient of [`dpo_loss`]. Each item adds `−βwσ(−m)` at `y_w` and
/// `+βwσ(−m)` at `y_l`; logits of responses in no pair stay exactly 0.
pub fn dpo_gradient(
    policy: &TabularPolicy,
    reference: &CategoricalConditional,
    data: &PreferencePairSet,
    beta: BetaParam,
) -> Result<GradientTable> {
    check_pair_inputs(policy, reference, data)?;
    let log_ref = reference.log_probs();
    let b = beta.value();
    let mut grad = Matrix::zeros(data.prompts(), data.responses());
    for it in data.items() {
        let m = dpo_margin(policy.logits(), &log_ref, b, it.prompt, it.chosen, it.rejected);
        let c = b * it.weight * sigmoid(-m);
        grad.add_at(it.prompt, it.chosen, -c);
        grad.add_at(it.prompt, it.rejected, c);
    }
    Ok(grad)
}

fn check_online_inputs(
    policy: &TabularPolicy,
    reference: &CategoricalConditional,
    chosen: &CategoricalConditional,
    prompts: &PromptSpace,
) -> Result<()> {
    require_policy_shape(policy, reference.shape())?;
    chosen.probs().require_shape(reference.shape())?;
    require_prompts(prompts, reference.prompts())?;
    reference.require_full_support()
}

/// DPO loss on `𝒟_x × π*(y_w|x) × π_θ(y_l|x)` with the rejected law frozen
/// at the current policy. Pairs with `y_w = y_l` contribute `ln 2`.
pub fn online_dpo_loss(
    policy: &TabularPolicy,
    reference: &CategoricalConditional,
    chosen: &CategoricalConditional,
    prompts: &PromptSpace,
    beta: BetaParam,
) -> Result<f64> {
    check_online_inputs(policy, reference, chosen, prompts)?;
    let log_ref = reference.log_probs();
    let probs = policy.probs();
    let (n, m) = policy.shape();
    let mut total = 0.0;
    for x in 0..n {
        let mut acc = 0.0;
        for w in 0..m {
            for l in 0..m {
                let mass = chosen.get(x, w) * probs.get(x, l);
                let margin = dpo_margin(policy.logits(), &log_ref, beta.value(), x, w, l);
                acc -= mass * log_sigmoid(margin);
            }
        }
        total += prompts.weight(x) * acc;
    }
    Ok(total)
}

/// Gradient of [`online_dpo_loss`] with the rejected law held fixed as data.
pub fn online_dpo_gradient(
    policy: &TabularPolicy,
    reference: &CategoricalConditional,
    chosen: &CategoricalConditional,
    prompts: &PromptSpace,
    beta: BetaParam,
) -> Result<GradientTable> {
    check_online_inputs(policy, reference, chosen, prompts)?;
    let log_ref = reference.log_probs();
    let probs = policy.probs();
    let b = beta.value();
    let (n, m) = policy.shape();
    let mut grad = Matrix::zeros(n, m);
    for x in 0..n {
        for w in 0..m {
            for l in 0..m {
                if w == l {
                    continue;
                }
                let mass = prompts.weight(x) * chosen.get(x, w) * probs.get(x, l);
                let margin = dpo_margin(policy.logits(), &log_ref, b, x, w, l);
                let c = b * mass * sigmoid(-margin);
                grad.add_at(x, w, -c);
                grad.add_at(x, l, c);
            }
        }
    }
    Ok(grad)
}

/// `f_θ = log π_θ − log π_ref` (normalized policy).
pub fn relative_logit(policy: &TabularPolicy, reference: &CategoricalConditional) -> Result<Matrix> {
    require_policy_shape(policy, reference.shape())?;
    reference.require_full_support()?;
    policy.log_probs().zip_map(&reference.log_probs(), |a, b| a - b)
}

/// Direct softmax derivative of `KL(π_θ‖π_ref)`: `w(x) π_y (f_y − 𝔼_π f)`.
pub fn kl_gradient(
    policy: &TabularPolicy,
    reference: &CategoricalConditional,
    prompts: &PromptSpace,
) -> Result<GradientTable> {
    require_prompts(prompts, policy.prompts())?;
    let f = relative_logit(policy, reference)?;
    let probs = policy.probs();
    let (n, m) = policy.shape();
    let mut grad = Matrix::zeros(n, m);
    for x in 0..n {
        let p = probs.row(x);
        let mean_f: f64 = p.iter().zip(f.row(x)).map(|(a, b)| a * b).sum();
        for y in 0..m {
            grad.set(x, y, prompts.weight(x) * p[y] * (f.get(x, y) - mean_f));
        }
    }
    Ok(grad)
}

/// Score-weighted form `(1/β) 𝔼_{y∼π_θ}[r̂_θ(x, y) ∇ log π_θ(y|x)]`,
/// evaluated by exhaustive summation; equals [`kl_gradient`].
pub fn kl_gradient_score_form(
    policy: &TabularPolicy,
    reference: &CategoricalConditional,
    prompts: &PromptSpace,
    beta: BetaParam,
) -> Result<GradientTable> {
    require_prompts(prompts, policy.prompts())?;
    let f = relative_logit(policy, reference)?;
    let probs = policy.probs();
    let b = beta.value();
    let (n, m) = policy.shape();
    let mut grad = Matrix::zeros(n, m);
    for x in 0..n {
        let p = probs.row(x);
        for y in 0..m {
            let r_hat = b * f.get(x, y);
            let scale = prompts.weight(x) * p[y] * r_hat / b;
            // ∂ log π(y|x) / ∂θ(x, j) = δ_yj − π_j
            for j in 0..m {
                let score = if j == y { 1.0 } else { 0.0 } - p[j];
                grad.add_at(x, j, scale * score);
            }
        }
    }
    Ok(grad)
}

/// `−𝔼[r] + β KL(π_θ‖π_ref)`.
pub fn rlhf_objective(
    policy: &TabularPolicy,
    reward: &RewardTable,
    reference: &CategoricalConditional,
    prompts: &PromptSpace,
    beta: BetaParam,
) -> Result<f64> {
    require_policy_shape(policy, reward.shape())?;
    reference.require_full_support()?;
    let probs = policy.probs();
    let er = probs.expected_reward(reward, prompts)?;
    let kl = kl_divergence(&probs, reference, prompts)?;
    Ok(-er + beta.value() * kl.mean)
}

pub fn rlhf_gradient(
    policy: &TabularPolicy,
    reward: &RewardTable,
    reference: &CategoricalConditional,
    prompts: &PromptSpace,
    beta: BetaParam,
) -> Result<GradientTable> {
    require_policy_shape(policy, reward.shape())?;
    let mut grad = kl_gradient(policy, reference, prompts)?;
    let probs = policy.probs();
    let b = beta.value();
    for x in 0..policy.prompts() {
        let p = probs.row(x);
        let r = reward.row(x);
        let mean_r: f64 = p.iter().zip(r).map(|(a, c)| a * c).sum();
        for y in 0..policy.responses() {
            let g = b * grad.get(x, y) - prompts.weight(x) * p[y] * (r[y] - mean_r);
            grad.set(x, y, g);
        }
    }
    Ok(grad)
}

/// `−𝔼_{π*}[log π_θ] + κ KL(π_θ‖π_ref)`.
pub fn sft_kl_loss(
    policy: &TabularPolicy,
    target: &SupervisedSet,
    reference: &CategoricalConditional,
    prompts: &PromptSpace,
    kl_weight: f64,
) -> Result<f64> {
    let kl = kl_divergence(&policy.probs(), reference, prompts)?;
    Ok(sft_loss(policy, target)? + kl_weight * kl.mean)
}

pub fn sft_kl_gradient(
    policy: &TabularPolicy,
    target: &SupervisedSet,
    reference: &CategoricalConditional,
    prompts: &PromptSpace,
    kl_weight: f64,
) -> Result<GradientTable> {
    let sft = sft_gradient(policy, target)?;
    if kl_weight == 0.0 {
        return Ok(sft);
    }
    let kl = kl_gradient(policy, reference, prompts)?;
    sft.zip_map(&kl, |a, b| a + kl_weight * b)
}

/// Which algebraic form of the reformulated DPO loss to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TildeForm {
    /// `−𝔼_{π_θ}[log(π_w/π_l)] + β KL(π_θ‖π_ref)`.
    LogRatio,
    /// `KL(π_θ‖π_w) − KL(π_θ‖π_l) + β KL(π_θ‖π_ref)`.
    KlDifference,
}

pub fn tilde_dpo_loss(
    policy: &TabularPolicy,
    chosen: &CategoricalConditional,
    rejected: &CategoricalConditional,
    reference: &CategoricalConditional,
    prompts: &PromptSpace,
    beta: BetaParam,
    form: TildeForm,
) -> Result<f64> {
    for d in [chosen, rejected, reference] {
        require_policy_shape(policy, d.shape())?;
        d.require_full_support()?;
    }
    let probs = policy.probs();
    let kl_ref = kl_divergence(&probs, reference, prompts)?.mean;
    let head = match form {
        TildeForm::LogRatio => {
            let mut acc = 0.0;
            for x in 0..probs.prompts() {
                let inner: f64 = (0..probs.responses())
                    .map(|y| probs.get(x, y) * (chosen.get(x, y) / rejected.get(x, y)).ln())
                    .sum();
                acc -= prompts.weight(x) * inner;
            }
            acc
        }
        TildeForm::KlDifference => {
            kl_divergence(&probs, chosen, prompts)?.mean - kl_divergence(&probs, rejected, prompts)?.mean
        }
    };
    Ok(head + beta.value() * kl_ref)
}

fn check_functional_inputs(
    policy: &TabularPolicy,
    reference: &CategoricalConditional,
    du: &PairDistribution,
    oracle: &PreferenceOracle,
) -> Result<()> {
    let shape = (du.prompts(), du.responses());
    require_policy_shape(policy, shape)?;
    reference.probs().require_shape(shape)?;
    if oracle.shape() != shape {
        return Err(Error::ShapeMismatch {
            expected: shape,
            found: oracle.shape(),
        });
    }
    reference.require_full_support()
}

/// Averaged preference residual `ℙ̄(x, y) − ℙ̄^BT_θ(x, y)`, where both
/// averages run over `Y₂ ~ q(·|x, y)` and the model law is BT with reward
/// `β f_θ`. Cells with no pair mass get 0.
pub fn preference_residual(
    policy: &TabularPolicy,
    reference: &CategoricalConditional,
    du: &PairDistribution,
    oracle: &PreferenceOracle,
    beta: BetaParam,
) -> Result<Matrix> {
    check_functional_inputs(policy, reference, du, oracle)?;
    let (weighted, mass) = residual_parts(policy, reference, du, oracle, beta)?;
    Ok(Matrix::from_fn(du.prompts(), du.responses(), |x, y| {
        let s = mass.get(x, y);
        if s > 0.0 {
            weighted.get(x, y) / s
        } else {
            0.0
        }
    }))
}

/// Returns `Σ_{y2} q(y, y2)(P − P^BT)` and `Σ_{y2} q(y, y2)` per cell.
fn residual_parts(
    policy: &TabularPolicy,
    reference: &CategoricalConditional,
    du: &PairDistribution,
    oracle: &PreferenceOracle,
    beta: BetaParam,
) -> Result<(Matrix, Matrix)> {
    let f = relative_logit(policy, reference)?;
    let q = symmetrized_pair_density(du);
    let truth = oracle.to_tables();
    let (n, m) = (du.prompts(), du.responses());
    let mut weighted = Matrix::zeros(n, m);
    let mut mass = Matrix::zeros(n, m);
    for x in 0..n {
        for y in 0..m {
            let (mut acc, mut tot) = (0.0, 0.0);
            for y2 in 0..m {
                let w = q[x].get(y, y2);
                if w == 0.0 {
                    continue;
                }
                let model = sigmoid(beta.value() * (f.get(x, y) - f.get(x, y2)));
                acc += w * (truth[x].get(y, y2) - model);
                tot += w;
            }
            weighted.set(x, y, acc);
            mass.set(x, y, tot);
        }
    }
    Ok((weighted, mass))
}

/// `g_θ(x, y) = −β (ℙ̄ − ℙ̄^BT) · 2 p_{X,Y₁}(x, y)`, the derivative of the
/// population DPO loss with respect to `f_θ(x, y)`.
pub fn functional_derivative(
    policy: &TabularPolicy,
    reference: &CategoricalConditional,
    du: &PairDistribution,
    oracle: &PreferenceOracle,
    beta: BetaParam,
) -> Result<Matrix> {
    check_functional_inputs(policy, reference, du, oracle)?;
    let (weighted, _) = residual_parts(policy, reference, du, oracle, beta)?;
    // 2 p_{X,Y1}(x, y) · q(y2 | x, y) = 2 p_X(x) q(y, y2 | x)
    Ok(Matrix::from_fn(du.prompts(), du.responses(), |x, y| {
        -beta.value() * 2.0 * du.prompt_weights().weight(x) * weighted.get(x, y)
    }))
}

/// Max-norm of `𝔼_{x, y∼π_θ}[∇_θ log π_θ(y|x)]`, summed exactly.
pub fn score_identity_residual(policy: &TabularPolicy, prompts: &PromptSpace) -> Result<f64> {
    require_prompts(prompts, policy.prompts())?;
    let probs = policy.probs();
    let (n, m) = policy.shape();
    let mut expectation = Matrix::zeros(n, m);
    for x in 0..n {
        let p = probs.row(x);
        for y in 0..m {
            for j in 0..m {
                let score = if j == y { 1.0 } else { 0.0 } - p[j];
                expectation.add_at(x, j, prompts.weight(x) * p[y] * score);
            }
        }
    }
    Ok(expectation.max_abs())
}
