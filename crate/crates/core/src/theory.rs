//! Named numerical verifications of the structural results about DPO.
//!
//! Each check builds a seeded random instance, measures residuals against
//! fixed thresholds, and returns a [`VerificationReport`] whose pass flag is
//! the conjunction of its measurements.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    dpo_gradient, functional_derivative, kl_gradient, online_dpo_gradient,
    preference_residual, relative_logit, sft_gradient, tilde_dpo_loss, BetaParam, SupervisedSet,
    TildeForm,
};
use crate::matrix::Matrix;
use crate::numeric::log_sigmoid;
use crate::preference::{PairDistribution, PreferenceOracle, PreferencePairSet};
use crate::rng::{derive_seed, normal, stream, StreamRng};
use crate::solvers::{dpo_optimal_policy, implied_reward, MarginalPair};
use crate::tabular::{CategoricalConditional, PromptSpace, RewardTable, TabularPolicy};
use crate::trainer::{
    train_dpo, train_online_dpo, train_sft_kl, Descent, OnlineSpec, RejectedSource, TrainConfig,
};

/// Values with magnitude at or below this count as zero in sign comparisons.
pub const SIGN_ZERO_BAND: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sizes {
    pub prompts: usize,
    pub responses: usize,
}

impl Default for Sizes {
    fn default() -> Self {
        Self {
            prompts: 4,
            responses: 8,
        }
    }
}

/// Acceptance region for a measured quantity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Bound {
    AtMost { limit: f64 },
    AtLeast { limit: f64 },
    Above { limit: f64 },
    Below { limit: f64 },
    Within { low: f64, high: f64 },
}

impl Bound {
    pub fn admits(self, v: f64) -> bool {
        match self {
            Bound::AtMost { limit } => v <= limit,
            Bound::AtLeast { limit } => v >= limit,
            Bound::Above { limit } => v > limit,
            Bound::Below { limit } => v < limit,
            Bound::Within { low, high } => (low..=high).contains(&v),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub name: String,
    pub value: f64,
    pub bound: Bound,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceInfo {
    pub seed: u64,
    pub prompts: usize,
    pub responses: usize,
    pub beta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub check: String,
    pub instance: InstanceInfo,
    pub measurements: Vec<Measurement>,
    /// Quantities recorded for inspection but not asserted.
    pub info: BTreeMap<String, f64>,
    pub pass: bool,
}

impl VerificationReport {
    fn new(check: &str, seed: u64, sizes: Sizes, beta: Vec<f64>) -> Self {
        Self {
            check: check.to_string(),
            instance: InstanceInfo {
                seed,
                prompts: sizes.prompts,
                responses: sizes.responses,
                beta,
            },
            measurements: Vec::new(),
            info: BTreeMap::new(),
            pass: true,
        }
    }

    fn measure(&mut self, name: &str, value: f64, bound: Bound) {
        let pass = bound.admits(value);
        self.pass &= pass;
        self.measurements.push(Measurement {
            name: name.to_string(),
            value,
            bound,
            pass,
        });
    }

    fn note(&mut self, name: &str, value: f64) {
        self.info.insert(name.to_string(), value);
    }

    pub fn measurement(&self, name: &str) -> Option<&Measurement> {
        self.measurements.iter().find(|m| m.name == name)
    }

    pub fn recheck(&self) -> bool {
        self.measurements.iter().all(|m| m.bound.admits(m.value))
    }
}

fn rng_for(seed: u64, label: &str) -> StreamRng {
    stream(derive_seed(seed, label), 0)
}

fn normal_matrix(rng: &mut StreamRng, n: usize, m: usize, std: f64) -> Matrix {
    Matrix::from_fn(n, m, |_, _| normal(rng, 0.0, std))
}

/// Softmax of i.i.d. `N(0, std²)` logits.
pub fn random_conditional(seed: u64, label: &str, sizes: Sizes, std: f64) -> CategoricalConditional {
    let logits = normal_matrix(&mut rng_for(seed, label), sizes.prompts, sizes.responses, std);
    CategoricalConditional::from_logits(&logits).expect("normal logits are finite")
}

pub fn random_policy(seed: u64, label: &str, sizes: Sizes, std: f64) -> TabularPolicy {
    let logits = normal_matrix(&mut rng_for(seed, label), sizes.prompts, sizes.responses, std);
    TabularPolicy::new(logits).expect("normal logits are finite")
}

fn require_sizes(sizes: Sizes) -> Result<()> {
    if sizes.prompts == 0 || sizes.responses < 2 {
        return Err(Error::InvalidInstance(format!(
            "need >= 1 prompt and >= 2 responses, got {}x{}",
            sizes.prompts, sizes.responses
        )));
    }
    Ok(())
}

/// Unlabeled law and oracle whose labeled population is exactly
/// `π_w × π_l`: `p = π_w ⊗ π_l`, `P(a ≻ b) = J(a,b)/(J(a,b)+J(b,a))`.
pub fn labeled_law_of_independent(
    prompts: &PromptSpace,
    chosen: &CategoricalConditional,
    rejected: &CategoricalConditional,
) -> Result<(PairDistribution, PreferenceOracle)> {
    let du = PairDistribution::independent(prompts, chosen, rejected)?;
    let m = chosen.responses();
    let table = du
        .pair_density()
        .iter()
        .map(|j| {
            Matrix::from_fn(m, m, |a, b| {
                let s = j.get(a, b) + j.get(b, a);
                if a == b || s <= 0.0 {
                    0.5
                } else {
                    j.get(a, b) / s
                }
            })
        })
        .collect();
    Ok((du, PreferenceOracle::Explicit { table }))
}

/// Training settings used by the closed-form check. The loss curvature in
/// logits scales with β², so the step size scales with 1/β².
pub fn closed_form_train_config(beta: f64) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::new(5.0 / (beta * beta), 20_000, beta)?;
    cfg.convergence_tol = 1e-12;
    cfg.snapshot_every = 0;
    Ok(cfg)
}

// ---------------------------------------------------------------- coverage

/// Uncovered responses receive no gradient: their logits stay bitwise
/// constant and ratios among them stay fixed while covered responses train.
pub fn verify_coverage(
    seed: u64,
    sizes: Sizes,
    uncovered: usize,
    config: &TrainConfig,
) -> Result<VerificationReport> {
    require_sizes(sizes)?;
    if uncovered == 0 {
        return Err(Error::InvalidInstance(
            "every response is covered; the check needs at least one uncovered response per prompt".into(),
        ));
    }
    if uncovered + 2 > sizes.responses {
        return Err(Error::InvalidInstance(format!(
            "{uncovered} uncovered of {} responses leaves fewer than two covered",
            sizes.responses
        )));
    }
    let (n, m) = (sizes.prompts, sizes.responses);
    let mut rng = rng_for(seed, "coverage/split");
    let mut hidden = vec![vec![false; m]; n];
    for row in hidden.iter_mut() {
        let mut idx: Vec<usize> = (0..m).collect();
        idx.shuffle(&mut rng);
        for &y in &idx[..uncovered] {
            row[y] = true;
        }
    }
    let restrict = |c: CategoricalConditional| {
        let masked = Matrix::from_fn(n, m, |x, y| if hidden[x][y] { 0.0 } else { c.get(x, y) });
        CategoricalConditional::from_masses(masked)
    };
    let chosen = restrict(random_conditional(seed, "coverage/chosen", sizes, 1.0))?;
    let rejected = restrict(random_conditional(seed, "coverage/rejected", sizes, 1.0))?;
    let prompts = PromptSpace::uniform(n)?;
    let data = PreferencePairSet::independent(&prompts, &chosen, &rejected)?;
    let reference = random_conditional(seed, "coverage/reference", sizes, 1.0);
    let theta0 = random_policy(seed, "coverage/theta", sizes, 1.0);
    let p0 = theta0.probs();

    let mut logit_changes = 0usize;
    let mut ratio_dev: f64 = 0.0;
    let mut drift: f64 = 0.0;
    let mut descent = Descent::new(config);
    let mut policy = theta0.clone();
    for _ in 0..config.steps {
        let grad = dpo_gradient(&policy, &reference, &data, config.beta)?;
        policy = descent.step(&policy, &grad)?;
        let probs = policy.probs();
        for x in 0..n {
            let hid: Vec<usize> = (0..m).filter(|&y| hidden[x][y]).collect();
            for &y in &hid {
                if policy.logits().get(x, y).to_bits() != theta0.logits().get(x, y).to_bits() {
                    logit_changes += 1;
                }
                drift = drift.max((probs.get(x, y) - p0.get(x, y)).abs());
            }
            for (i, &a) in hid.iter().enumerate() {
                for &b in &hid[i + 1..] {
                    let before = p0.get(x, a) / p0.get(x, b);
                    let now = probs.get(x, a) / probs.get(x, b);
                    ratio_dev = ratio_dev.max(((now - before) / before).abs());
                }
            }
        }
    }
    let covered_move = (0..n)
        .flat_map(|x| (0..m).map(move |y| (x, y)))
        .filter(|&(x, y)| !hidden[x][y])
        .map(|(x, y)| (policy.logits().get(x, y) - theta0.logits().get(x, y)).abs())
        .fold(0.0, f64::max);

    let mut report = VerificationReport::new("coverage", seed, sizes, vec![config.beta.value()]);
    report.measure("uncovered_logit_changes", logit_changes as f64, Bound::AtMost { limit: 0.0 });
    report.measure("uncovered_ratio_rel_deviation", ratio_dev, Bound::AtMost { limit: 1e-12 });
    report.note("uncovered_prob_drift", drift);
    report.note("covered_logit_movement", covered_move);
    report.note("steps", config.steps as f64);
    report.note("uncovered_per_prompt", uncovered as f64);
    Ok(report)
}

// ---------------------------------------------------------- sign conditions

fn band_sign(v: f64) -> i8 {
    if v > SIGN_ZERO_BAND {
        1
    } else if v < -SIGN_ZERO_BAND {
        -1
    } else {
        0
    }
}

/// Random unlabeled law with a missing response per prompt and some
/// zeroed ordered pairs.
fn sparse_pair_law(seed: u64, sizes: Sizes) -> Result<PairDistribution> {
    let (n, m) = (sizes.prompts, sizes.responses);
    let mut rng = rng_for(seed, "sign/du");
    let mut dens = Vec::with_capacity(n);
    for _ in 0..n {
        let absent = if m > 2 { Some(rng.random_range(0..m)) } else { None };
        let mut p = Matrix::from_fn(m, m, |a, b| {
            let keep = rng.random::<f64>() > 0.3;
            if Some(a) == absent || Some(b) == absent || !keep {
                0.0
            } else {
                rng.random::<f64>()
            }
        });
        if p.sum() == 0.0 {
            let (a, b) = if absent == Some(0) { (1, 2) } else if absent == Some(1) { (0, 2) } else { (0, 1) };
            p.set(a, b, 1.0);
        }
        let total = p.sum();
        for v in p.data_mut() {
            *v /= total;
        }
        dens.push(p);
    }
    PairDistribution::new(PromptSpace::uniform(n)?, dens)
}

fn random_explicit_oracle(seed: u64, sizes: Sizes) -> Result<PreferenceOracle> {
    let mut rng = rng_for(seed, "sign/oracle");
    let m = sizes.responses;
    let table = (0..sizes.prompts)
        .map(|_| {
            let mut t = Matrix::filled(m, m, 0.5);
            for a in 0..m {
                for b in a + 1..m {
                    let p = rng.random_range(0.05..0.95);
                    t.set(a, b, p);
                    t.set(b, a, 1.0 - p);
                }
            }
            t
        })
        .collect();
    PreferenceOracle::explicit(table)
}

struct SignOutcome {
    residual: Matrix,
    derivative: Matrix,
    change: Matrix,
}

/// Residual, functional derivative and raw one-step logit change for the
/// population dataset labeled by `oracle`.
fn sign_outcome(
    policy: &TabularPolicy,
    reference: &CategoricalConditional,
    du: &PairDistribution,
    oracle: &PreferenceOracle,
    beta: BetaParam,
) -> Result<SignOutcome> {
    let residual = preference_residual(policy, reference, du, oracle, beta)?;
    let derivative = functional_derivative(policy, reference, du, oracle, beta)?;
    let data = PreferencePairSet::labeled(du, oracle)?;
    let cfg = TrainConfig::new(1.0, 1, beta.value())?;
    let next = Descent::new(&cfg).step(policy, &dpo_gradient(policy, reference, &data, beta)?)?;
    let change = next.logits().zip_map(policy.logits(), |a, b| a - b)?;
    Ok(SignOutcome {
        residual,
        derivative,
        change,
    })
}

/// Single-prompt, two-response instance at the uniform reference with the
/// true preference `P(y₀ ≻ y₁) = p`; returns the logit change of `y₀`.
pub fn two_response_logit_change(p: f64, beta: BetaParam) -> Result<f64> {
    let prompts = PromptSpace::uniform(1)?;
    let u = CategoricalConditional::uniform(1, 2)?;
    let du = PairDistribution::independent(&prompts, &u, &u)?;
    let t = Matrix::from_rows(vec![vec![0.5, p], vec![1.0 - p, 0.5]])?;
    let oracle = PreferenceOracle::explicit(vec![t])?;
    let out = sign_outcome(&TabularPolicy::uniform(1, 2)?, &u, &du, &oracle, beta)?;
    Ok(out.change.get(0, 0))
}

/// The averaged preference residual, the negated functional derivative and
/// the one-step raw logit change agree in sign on every cell.
pub fn verify_sign_conditions(seed: u64, sizes: Sizes, beta: BetaParam) -> Result<VerificationReport> {
    require_sizes(sizes)?;
    let reference = random_conditional(seed, "sign/reference", sizes, 1.0);
    let policy = random_policy(seed, "sign/theta", sizes, 1.0);
    let du = sparse_pair_law(seed, sizes)?;
    let oracle = random_explicit_oracle(seed, sizes)?;
    let out = sign_outcome(&policy, &reference, &du, &oracle, beta)?;

    let mut mismatches = 0usize;
    let mut zero_cells = 0usize;
    let mut cells = 0usize;
    for ((r, g), c) in out
        .residual
        .data()
        .iter()
        .zip(out.derivative.data())
        .zip(out.change.data())
    {
        let (a, b, d) = (band_sign(*r), band_sign(-*g), band_sign(*c));
        cells += 1;
        if a != b || a != d {
            mismatches += 1;
        }
        if a == 0 {
            zero_cells += 1;
        }
    }

    // zero case: the oracle is BT with reward β f_θ
    let f = relative_logit(&policy, &reference)?;
    let bt = PreferenceOracle::bradley_terry(RewardTable::new(f.map(|v| beta.value() * v))?);
    let zero = sign_outcome(&policy, &reference, &du, &bt, beta)?;
    let zero_max = zero
        .residual
        .max_abs()
        .max(zero.derivative.max_abs())
        .max(zero.change.max_abs());

    let mut report = VerificationReport::new("sign_conditions", seed, sizes, vec![beta.value()]);
    report.measure("sign_mismatches", mismatches as f64, Bound::AtMost { limit: 0.0 });
    report.measure("zero_case_max_abs", zero_max, Bound::AtMost { limit: SIGN_ZERO_BAND });
    report.measure(
        "case_increase_logit_change",
        two_response_logit_change(0.9, beta)?,
        Bound::Above { limit: 0.0 },
    );
    report.measure(
        "case_decrease_logit_change",
        two_response_logit_change(0.3, beta)?,
        Bound::Below { limit: 0.0 },
    );
    report.note("cells", cells as f64);
    report.note("zero_cells", zero_cells as f64);
    Ok(report)
}

// -------------------------------------------------------------- closed form

/// Per-prompt DPO loss of `probs` (a single row) for prompt `x` of `data`.
fn prompt_dpo_loss(row: &[f64], ref_row: &[f64], data: &PreferencePairSet, x: usize, beta: f64) -> f64 {
    let mut acc = 0.0;
    for it in data.items().iter().filter(|it| it.prompt == x) {
        let m = beta
            * ((row[it.chosen] / ref_row[it.chosen]).ln() - (row[it.rejected] / ref_row[it.rejected]).ln());
        acc -= it.weight * log_sigmoid(m);
    }
    acc
}

/// Largest per-prompt loss improvement a resolution-0.01 simplex grid finds
/// over `closed`, for three-response instances.
pub fn grid_improvement(
    closed: &CategoricalConditional,
    reference: &CategoricalConditional,
    data: &PreferencePairSet,
    beta: BetaParam,
) -> Result<f64> {
    if closed.responses() != 3 {
        return Err(Error::InvalidInstance("grid search needs exactly three responses".into()));
    }
    let b = beta.value();
    let mut worst = f64::NEG_INFINITY;
    for x in 0..closed.prompts() {
        let base = prompt_dpo_loss(closed.row(x), reference.row(x), data, x, b);
        let mut best = f64::INFINITY;
        for i in 1..100 {
            for j in 1..(100 - i) {
                let k = 100 - i - j;
                let row = [i as f64 / 100.0, j as f64 / 100.0, k as f64 / 100.0];
                best = best.min(prompt_dpo_loss(&row, reference.row(x), data, x, b));
            }
        }
        worst = worst.max(base - best);
    }
    Ok(worst)
}

struct ClosedFormInstance {
    prompts: PromptSpace,
    reference: CategoricalConditional,
    marginals: MarginalPair,
    data: PreferencePairSet,
}

fn closed_form_instance(seed: u64, sizes: Sizes, label: &str) -> Result<ClosedFormInstance> {
    let prompts = PromptSpace::uniform(sizes.prompts)?;
    let reference = random_conditional(seed, &format!("{label}/reference"), sizes, 1.0);
    let chosen = random_conditional(seed, &format!("{label}/chosen"), sizes, 1.0);
    let rejected = random_conditional(seed, &format!("{label}/rejected"), sizes, 1.0);
    let data = PreferencePairSet::independent(&prompts, &chosen, &rejected)?;
    Ok(ClosedFormInstance {
        prompts,
        reference,
        marginals: MarginalPair::new(chosen, rejected)?,
        data,
    })
}

/// Trained DPO policy matches the closed form, the functional derivative
/// vanishes there, and (for three responses) no grid point does better.
pub fn verify_closed_form(seed: u64, sizes: Sizes, beta: BetaParam) -> Result<VerificationReport> {
    require_sizes(sizes)?;
    let inst = closed_form_instance(seed, sizes, "closed")?;
    let closed = dpo_optimal_policy(&inst.marginals, &inst.reference, beta)?;
    let cfg = closed_form_train_config(beta.value())?;
    let start = TabularPolicy::from_conditional(&inst.reference)?;
    let mut report = VerificationReport::new("closed_form", seed, sizes, vec![beta.value()]);
    match train_dpo(&start, &inst.reference, &inst.data, &cfg) {
        Ok((trained, trace)) => {
            report.measure("train_tv_max", trained.probs().max_tv(&closed)?, Bound::AtMost { limit: 1e-3 });
            report.note("train_steps", trace.records.len() as f64);
            report.note("final_grad_norm", trace.last().map_or(f64::NAN, |r| r.grad_norm));
        }
        // non-convergence is a failed measurement, not an error
        Err(Error::Diverged { step, .. }) => {
            report.measure("train_tv_max", f64::INFINITY, Bound::AtMost { limit: 1e-3 });
            report.note("diverged_at", step as f64);
        }
        Err(e) => return Err(e),
    }

    let (du, oracle) =
        labeled_law_of_independent(&inst.prompts, &inst.marginals.chosen, &inst.marginals.rejected)?;
    let closed_policy = crate::solvers::rlhf_optimal_logits(&implied_reward(&inst.marginals)?, &inst.reference, beta)?;
    let g = functional_derivative(&closed_policy, &inst.reference, &du, &oracle, beta)?;
    report.measure("functional_derivative_max", g.max_abs(), Bound::AtMost { limit: 1e-8 });

    let grid_sizes = Sizes {
        prompts: sizes.prompts,
        responses: 3,
    };
    let grid = if sizes.responses == 3 {
        inst
    } else {
        closed_form_instance(seed, grid_sizes, "closed/grid")?
    };
    let grid_closed = dpo_optimal_policy(&grid.marginals, &grid.reference, beta)?;
    report.measure(
        "grid_improvement",
        grid_improvement(&grid_closed, &grid.reference, &grid.data, beta)?,
        Bound::AtMost { limit: 1e-6 },
    );
    Ok(report)
}

// ------------------------------------------------------------ loss identity

/// The log-ratio and KL-difference forms agree, and the tilted reference
/// under the implied reward beats random policies.
pub fn verify_loss_identity(seed: u64, sizes: Sizes, beta: BetaParam) -> Result<VerificationReport> {
    require_sizes(sizes)?;
    let prompts = PromptSpace::uniform(sizes.prompts)?;
    let reference = random_conditional(seed, "identity/reference", sizes, 1.0);
    let chosen = random_conditional(seed, "identity/chosen", sizes, 1.0);
    let rejected = random_conditional(seed, "identity/rejected", sizes, 1.0);
    let value = |p: &TabularPolicy, form| tilde_dpo_loss(p, &chosen, &rejected, &reference, &prompts, beta, form);

    let mut identity: f64 = 0.0;
    for i in 0..100 {
        let p = random_policy(seed, &format!("identity/policy/{i}"), sizes, 2.0);
        identity = identity.max((value(&p, TildeForm::LogRatio)? - value(&p, TildeForm::KlDifference)?).abs());
    }
    let marginals = MarginalPair::new(chosen.clone(), rejected.clone())?;
    let minimizer = crate::solvers::rlhf_optimal_logits(&implied_reward(&marginals)?, &reference, beta)?;
    let best = value(&minimizer, TildeForm::LogRatio)?;
    let mut margin = f64::INFINITY;
    for i in 0..1000 {
        let p = random_policy(seed, &format!("identity/search/{i}"), sizes, 2.0);
        margin = margin.min(value(&p, TildeForm::LogRatio)? - best);
    }
    let mut report = VerificationReport::new("loss_identity", seed, sizes, vec![beta.value()]);
    report.measure("form_difference_max", identity, Bound::AtMost { limit: 1e-12 });
    report.measure("random_search_margin", margin, Bound::AtLeast { limit: 0.0 });
    report.note("minimizer_value", best);
    Ok(report)
}

// ---------------------------------------------------------- online reduction

/// Gradient-level distance between online DPO and the SFT + KL surrogate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReductionResidual {
    /// `‖(2/β)∇L_DPO − ∇(L_SFT + (β/2) KL)‖∞ / ‖∇L_SFT‖∞`, or 0 when the
    /// SFT gradient vanishes.
    pub delta: f64,
    /// Least-squares coefficient `ε` in `(2/β)∇L_DPO ≈ (1 + 2ε)∇L_SFT + (β/2)∇KL`.
    pub epsilon: f64,
}

pub fn reduction_residual(
    policy: &TabularPolicy,
    reference: &CategoricalConditional,
    chosen: &CategoricalConditional,
    prompts: &PromptSpace,
    beta: BetaParam,
) -> Result<ReductionResidual> {
    let b = beta.value();
    let dpo = online_dpo_gradient(policy, reference, chosen, prompts, beta)?;
    let sft = sft_gradient(policy, &SupervisedSet::from_conditional(prompts, chosen)?)?;
    let kl = kl_gradient(policy, reference, prompts)?;
    let n = sft.max_abs();
    let residual = Matrix::from_fn(dpo.rows(), dpo.cols(), |x, y| {
        (2.0 / b) * dpo.get(x, y) - sft.get(x, y) - 0.5 * b * kl.get(x, y)
    });
    if n <= 1e-12 {
        return Ok(ReductionResidual { delta: 0.0, epsilon: 0.0 });
    }
    let sft_sq: f64 = sft.data().iter().map(|v| v * v).sum();
    let proj: f64 = residual.data().iter().zip(sft.data()).map(|(r, s)| r * s).sum();
    Ok(ReductionResidual {
        delta: residual.max_abs() / n,
        epsilon: proj / (2.0 * sft_sq),
    })
}

/// Slope of the least-squares line through `(ln x, ln y)`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let mx = crate::numeric::mean(&lx);
    let my = crate::numeric::mean(&ly);
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

/// Final online-DPO and SFT-KL policies on one seeded instance, trained with
/// matched effective step sizes (`α_online = 2 α_sft / β`, `κ = β/2`).
pub fn online_vs_sft(seed: u64, sizes: Sizes, beta: BetaParam) -> Result<(TabularPolicy, TabularPolicy)> {
    let prompts = PromptSpace::uniform(sizes.prompts)?;
    let reference = random_conditional(seed, "online/reference", sizes, 1.0);
    let target = random_conditional(seed, "online/target", sizes, 1.0);
    let start = TabularPolicy::from_conditional(&reference)?;
    let b = beta.value();
    let sft_lr = 2.0;
    let steps = 4000;
    let mut sft_cfg = TrainConfig::new(sft_lr, steps, b)?;
    sft_cfg.snapshot_every = 0;
    sft_cfg.convergence_tol = 1e-10;
    let mut online_cfg = sft_cfg.clone();
    online_cfg.learning_rate = 2.0 * sft_lr / b;
    online_cfg.convergence_tol = sft_cfg.convergence_tol * b / 2.0;
    let online = OnlineSpec {
        chosen_marginal: target.clone(),
        rejected_source: RejectedSource::CurrentPolicy,
    };
    let (p_online, _) = train_online_dpo(&start, &reference, &online, &prompts, &online_cfg)?;
    let (p_sft, _) = train_sft_kl(&start, &reference, &target, &prompts, &sft_cfg, b / 2.0)?;
    Ok((p_online, p_sft))
}

pub const REDUCTION_BETAS: [f64; 4] = [0.2, 0.1, 0.05, 0.025];

/// Online DPO with fixed chosen law reduces to SFT plus a KL term up to a
/// residual that shrinks linearly in β.
pub fn verify_online_reduction(seed: u64, sizes: Sizes, betas: &[f64]) -> Result<VerificationReport> {
    require_sizes(sizes)?;
    if betas.len() < 2 {
        return Err(Error::InvalidInstance("need at least two beta values".into()));
    }
    let prompts = PromptSpace::uniform(sizes.prompts)?;
    let reference = random_conditional(seed, "online/reference", sizes, 1.0);
    let target = random_conditional(seed, "online/target", sizes, 1.0);
    let policies: Vec<TabularPolicy> = (0..20)
        .map(|i| random_policy(seed, &format!("online/policy/{i}"), sizes, 1.0))
        .collect();
    let mut deltas = Vec::with_capacity(betas.len());
    let mut eps_positive = 0usize;
    let mut eps_total = 0usize;
    for &b in betas {
        let beta = BetaParam::new(b)?;
        let mut acc = 0.0;
        for p in &policies {
            let r = reduction_residual(p, &reference, &target, &prompts, beta)?;
            acc += r.delta;
            eps_total += 1;
            if r.epsilon > 0.0 {
                eps_positive += 1;
            }
        }
        deltas.push(acc / policies.len() as f64);
    }
    let mut order: Vec<usize> = (0..betas.len()).collect();
    order.sort_by(|&a, &b| betas[b].total_cmp(&betas[a]));
    let violations = order
        .windows(2)
        .filter(|w| deltas[w[1]] >= deltas[w[0]])
        .count();
    let slope = log_log_slope(betas, &deltas);

    let e2e_beta = BetaParam::new(0.05)?;
    let (p_online, p_sft) = online_vs_sft(seed, sizes, e2e_beta)?;
    let tv = p_online.probs().max_tv(&p_sft.probs())?;

    let mut report = VerificationReport::new("online_reduction", seed, sizes, betas.to_vec());
    report.measure("monotone_violations", violations as f64, Bound::AtMost { limit: 0.0 });
    report.measure("log_log_slope", slope, Bound::Within { low: 0.6, high: 1.4 });
    report.measure("online_vs_sft_tv", tv, Bound::AtMost { limit: 0.05 });
    for (b, d) in betas.iter().zip(&deltas) {
        report.note(&format!("delta@{b}"), *d);
    }
    report.note("epsilon_positive_fraction", eps_positive as f64 / eps_total as f64);
    Ok(report)
}

// ---------------------------------------------------------------- the suite

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    Coverage,
    SignConditions,
    ClosedForm,
    LossIdentity,
    OnlineReduction,
}

impl Check {
    pub const ALL: [Check; 5] = [
        Check::Coverage,
        Check::SignConditions,
        Check::ClosedForm,
        Check::LossIdentity,
        Check::OnlineReduction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Check::Coverage => "coverage",
            Check::SignConditions => "sign_conditions",
            Check::ClosedForm => "closed_form",
            Check::LossIdentity => "loss_identity",
            Check::OnlineReduction => "online_reduction",
        }
    }

    pub fn parse(s: &str) -> Option<Check> {
        Check::ALL.into_iter().find(|c| c.name() == s)
    }
}

/// Shared knobs for running checks from the CLI or tests.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteOptions {
    pub seed: u64,
    pub sizes: Sizes,
    pub beta: BetaParam,
    pub uncovered: usize,
}

impl SuiteOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            sizes: Sizes::default(),
            beta: BetaParam::new(0.1).expect("0.1 is a valid beta"),
            uncovered: 2,
        }
    }
}

pub fn run_check(check: Check, opts: &SuiteOptions) -> Result<VerificationReport> {
    match check {
        Check::Coverage => {
            let mut cfg = TrainConfig::new(0.5, 1000, opts.beta.value())?;
            cfg.convergence_tol = 0.0;
            cfg.snapshot_every = 0;
            verify_coverage(opts.seed, opts.sizes, opts.uncovered, &cfg)
        }
        Check::SignConditions => verify_sign_conditions(opts.seed, opts.sizes, opts.beta),
        Check::ClosedForm => verify_closed_form(opts.seed, opts.sizes, opts.beta),
        Check::LossIdentity => verify_loss_identity(opts.seed, opts.sizes, opts.beta),
        Check::OnlineReduction => verify_online_reduction(opts.seed, opts.sizes, &REDUCTION_BETAS),
    }
}
