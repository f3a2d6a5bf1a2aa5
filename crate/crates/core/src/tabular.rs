//! Finite prompt/response spaces, tabular softmax policies, conditional
//! distributions and reward tables.
//!
//! Every table is a `prompts × responses` [`Matrix`]. A [`TabularPolicy`]
//! holds raw logits; [`CategoricalConditional`] holds normalized rows.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::matrix::Matrix;
use crate::numeric::{log_softmax, softmax};

/// Row-sum tolerance for conditional distributions.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Probability floor below which a cell does not count as supported.
pub const SUPPORT_FLOOR: f64 = 1e-12;

/// Prompt distribution 𝒟_x.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PromptSpaceRepr", into = "PromptSpaceRepr")]
pub struct PromptSpace {
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptSpaceRepr {
    size: usize,
    weights: Vec<f64>,
}

impl TryFrom<PromptSpaceRepr> for PromptSpace {
    type Error = Error;

    fn try_from(r: PromptSpaceRepr) -> Result<Self> {
        if r.size != r.weights.len() {
            return Err(invalid(format!(
                "prompt space size {} disagrees with {} weights",
                r.size,
                r.weights.len()
            )));
        }
        PromptSpace::new(r.weights)
    }
}

impl From<PromptSpace> for PromptSpaceRepr {
    fn from(p: PromptSpace) -> Self {
        Self {
            size: p.weights.len(),
            weights: p.weights,
        }
    }
}

impl PromptSpace {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(invalid("prompt space needs at least one prompt"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("prompt weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > ROW_SUM_TOL {
            return Err(invalid(format!("prompt weights sum to {total}, not 1")));
        }
        Ok(Self { weights })
    }

    /// Normalizes arbitrary non-negative masses into a prompt distribution.
    pub fn from_masses(masses: &[f64]) -> Result<Self> {
        let total: f64 = masses.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(invalid("prompt masses must have a positive finite total"));
        }
        Self::new(masses.iter().map(|m| m / total).collect())
    }

    pub fn uniform(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(invalid("prompt space needs at least one prompt"));
        }
        Self::new(vec![1.0 / size as f64; size])
    }

    pub fn size(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, x: usize) -> f64 {
        self.weights[x]
    }
}

/// Response index domain, shared by every prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ResponseSpaceRepr", into = "ResponseSpaceRepr")]
pub struct ResponseSpace {
    size: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResponseSpaceRepr {
    size: usize,
}

impl TryFrom<ResponseSpaceRepr> for ResponseSpace {
    type Error = Error;
    fn try_from(r: ResponseSpaceRepr) -> Result<Self> {
        ResponseSpace::new(r.size)
    }
}

impl From<ResponseSpace> for ResponseSpaceRepr {
    fn from(r: ResponseSpace) -> Self {
        Self { size: r.size }
    }
}

impl ResponseSpace {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(invalid("pairwise preferences need at least two responses"));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }
}

/// Logit table θ defining π_θ(y|x) by a per-prompt softmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolicyRepr", into = "PolicyRepr")]
pub struct TabularPolicy {
    logits: Matrix,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyRepr {
    logits: Matrix,
}

impl TryFrom<PolicyRepr> for TabularPolicy {
    type Error = Error;
    fn try_from(r: PolicyRepr) -> Result<Self> {
        TabularPolicy::new(r.logits)
    }
}

impl From<TabularPolicy> for PolicyRepr {
    fn from(p: TabularPolicy) -> Self {
        Self { logits: p.logits }
    }
}

impl TabularPolicy {
    pub fn new(logits: Matrix) -> Result<Self> {
        if logits.rows() == 0 || logits.cols() < 2 {
            return Err(invalid(format!(
                "policy needs >= 1 prompt and >= 2 responses, got {:?}",
                logits.shape()
            )));
        }
        if !logits.all_finite() {
            return Err(invalid("policy logits must be finite"));
        }
        Ok(Self { logits })
    }

    pub fn uniform(prompts: usize, responses: usize) -> Result<Self> {
        Self::new(Matrix::zeros(prompts, responses))
    }

    /// Logits `ln p`; the distribution must have full support.
    pub fn from_conditional(dist: &CategoricalConditional) -> Result<Self> {
        dist.require_full_support()?;
        Self::new(dist.probs().map(f64::ln))
    }

    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    pub fn into_logits(self) -> Matrix {
        self.logits
    }

    pub fn prompts(&self) -> usize {
        self.logits.rows()
    }

    pub fn responses(&self) -> usize {
        self.logits.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.logits.shape()
    }

    pub fn probs(&self) -> CategoricalConditional {
        policy_probs(self)
    }

    pub fn log_probs(&self) -> Matrix {
        let mut out = Matrix::zeros(self.prompts(), self.responses());
        for x in 0..self.prompts() {
            out.row_mut(x).copy_from_slice(&log_softmax(self.logits.row(x)));
        }
        out
    }
}

/// Row-wise softmax of the logits.
pub fn policy_probs(policy: &TabularPolicy) -> CategoricalConditional {
    let (n, m) = policy.shape();
    let mut probs = Matrix::zeros(n, m);
    for x in 0..n {
        probs.row_mut(x).copy_from_slice(&softmax(policy.logits.row(x)));
    }
    CategoricalConditional::from_normalized_unchecked(probs)
}

/// Subtracts each row's mean, fixing the per-prompt additive gauge.
pub fn gauge_center(policy: &TabularPolicy) -> TabularPolicy {
    let mut logits = policy.logits.clone();
    for x in 0..logits.rows() {
        let row = logits.row_mut(x);
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        for v in row.iter_mut() {
            *v -= mean;
        }
    }
    TabularPolicy { logits }
}

/// Row-stochastic table: π_ref, π_w, π_l, π*, or a computed policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ConditionalRepr", into = "ConditionalRepr")]
pub struct CategoricalConditional {
    probs: Matrix,
    full_support: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConditionalRepr {
    probs: Matrix,
    #[serde(default)]
    full_support: bool,
}

impl TryFrom<ConditionalRepr> for CategoricalConditional {
    type Error = Error;
    fn try_from(r: ConditionalRepr) -> Result<Self> {
        let dist = CategoricalConditional::new(r.probs)?;
        if r.full_support {
            dist.require_full_support()?;
        }
        Ok(dist)
    }
}

impl From<CategoricalConditional> for ConditionalRepr {
    fn from(c: CategoricalConditional) -> Self {
        Self {
            probs: c.probs,
            full_support: c.full_support,
        }
    }
}

impl CategoricalConditional {
    pub fn new(probs: Matrix) -> Result<Self> {
        if probs.rows() == 0 || probs.cols() < 2 {
            return Err(invalid(format!(
                "conditional needs >= 1 prompt and >= 2 responses, got {:?}",
                probs.shape()
            )));
        }
        for (x, row) in probs.iter_rows().enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(invalid(format!("row {x} has entries outside [0, 1]")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > ROW_SUM_TOL {
                return Err(invalid(format!("row {x} sums to {total}, not 1")));
            }
        }
        Ok(Self::from_normalized_unchecked(probs))
    }

    /// Normalizes each row of non-negative masses.
    pub fn from_masses(masses: Matrix) -> Result<Self> {
        let mut probs = masses;
        for x in 0..probs.rows() {
            let row = probs.row_mut(x);
            if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(invalid(format!("row {x} has negative or non-finite mass")));
            }
            let total: f64 = row.iter().sum();
            if total <= 0.0 {
                return Err(invalid(format!("row {x} has zero total mass")));
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Self::new(probs)
    }

    /// Per-row softmax of arbitrary finite scores.
    pub fn from_logits(logits: &Matrix) -> Result<Self> {
        Ok(policy_probs(&TabularPolicy::new(logits.clone())?))
    }

    pub fn uniform(prompts: usize, responses: usize) -> Result<Self> {
        Self::new(Matrix::filled(prompts, responses, 1.0 / responses as f64))
    }

    pub(crate) fn from_normalized_unchecked(probs: Matrix) -> Self {
        let full_support = probs.data().iter().all(|&p| p >= SUPPORT_FLOOR);
        Self {
            probs,
            full_support,
        }
    }

    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn row(&self, x: usize) -> &[f64] {
        self.probs.row(x)
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.probs.get(x, y)
    }

    pub fn prompts(&self) -> usize {
        self.probs.rows()
    }

    pub fn responses(&self) -> usize {
        self.probs.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.probs.shape()
    }

    /// Whether every entry is at least [`SUPPORT_FLOOR`].
    pub fn is_full_support(&self) -> bool {
        self.full_support
    }

    pub fn require_full_support(&self) -> Result<()> {
        self.require_support_where(|_, _| true)
    }

    /// Checks the support floor on the cells selected by `needed`.
    pub fn require_support_where(&self, needed: impl Fn(usize, usize) -> bool) -> Result<()> {
        for x in 0..self.prompts() {
            for y in 0..self.responses() {
                let v = self.get(x, y);
                if needed(x, y) && v < SUPPORT_FLOOR {
                    return Err(Error::SupportViolation {
                        prompt: x,
                        response: y,
                        value: v,
                    });
                }
            }
        }
        Ok(())
    }

    /// Elementwise `ln p`; `-inf` where p = 0.
    pub fn log_probs(&self) -> Matrix {
        self.probs.map(f64::ln)
    }

    pub fn expected_reward(&self, reward: &RewardTable, prompts: &PromptSpace) -> Result<f64> {
        reward.values.require_shape(self.shape())?;
        require_prompts(prompts, self.prompts())?;
        Ok((0..self.prompts())
            .map(|x| {
                let r = reward.values.row(x);
                prompts.weight(x) * self.row(x).iter().zip(r).map(|(p, v)| p * v).sum::<f64>()
            })
            .sum())
    }

    /// Largest per-prompt total-variation distance to `other`.
    pub fn max_tv(&self, other: &Self) -> Result<f64> {
        self.probs.require_shape(other.shape())?;
        Ok((0..self.prompts())
            .map(|x| crate::numeric::total_variation(self.row(x), other.row(x)))
            .fold(0.0, f64::max))
    }
}

/// Ground-truth reward r*(x, y).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RewardRepr", into = "RewardRepr")]
pub struct RewardTable {
    values: Matrix,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RewardRepr {
    values: Matrix,
}

impl TryFrom<RewardRepr> for RewardTable {
    type Error = Error;
    fn try_from(r: RewardRepr) -> Result<Self> {
        RewardTable::new(r.values)
    }
}

impl From<RewardTable> for RewardRepr {
    fn from(r: RewardTable) -> Self {
        Self { values: r.values }
    }
}

impl RewardTable {
    pub fn new(values: Matrix) -> Result<Self> {
        if !values.all_finite() {
            return Err(invalid("reward entries must be finite"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values.get(x, y)
    }

    pub fn row(&self, x: usize) -> &[f64] {
        self.values.row(x)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }
}

/// Prompt-averaged KL divergence with its per-prompt components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlDivergence {
    pub mean: f64,
    pub per_prompt: Vec<f64>,
}

/// `Σ_x w(x) Σ_y p log(p/q)`, with `0·log 0 = 0`.
pub fn kl_divergence(
    p: &CategoricalConditional,
    q: &CategoricalConditional,
    prompts: &PromptSpace,
) -> Result<KlDivergence> {
    p.probs.require_shape(q.shape())?;
    require_prompts(prompts, p.prompts())?;
    let mut per_prompt = Vec::with_capacity(p.prompts());
    for x in 0..p.prompts() {
        let mut acc = 0.0;
        for y in 0..p.responses() {
            let (pv, qv) = (p.get(x, y), q.get(x, y));
            if pv == 0.0 {
                continue;
            }
            if qv == 0.0 {
                return Err(Error::SupportViolation {
                    prompt: x,
                    response: y,
                    value: qv,
                });
            }
            acc += pv * (pv / qv).ln();
        }
        // rounding can leave a tiny negative value when p == q
        per_prompt.push(acc.max(0.0));
    }
    let mean = per_prompt.iter().zip(prompts.weights()).map(|(k, w)| k * w).sum();
    Ok(KlDivergence { mean, per_prompt })
}

/// `Σ_x w(x) Σ_y π_θ(y|x) r(x, y)`.
pub fn expected_reward(
    policy: &TabularPolicy,
    reward: &RewardTable,
    prompts: &PromptSpace,
) -> Result<f64> {
    policy.probs().expected_reward(reward, prompts)
}

pub(crate) fn require_prompts(prompts: &PromptSpace, n: usize) -> Result<()> {
    if prompts.size() != n {
        return Err(invalid(format!(
            "prompt space has {} prompts, table has {n}",
            prompts.size()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn single(row: &[f64]) -> CategoricalConditional {
        CategoricalConditional::new(Matrix::from_rows(vec![row.to_vec()]).unwrap()).unwrap()
    }

    fn policy(rows: Vec<Vec<f64>>) -> TabularPolicy {
        TabularPolicy::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn policy_probs_examples() {
        let p = policy(vec![vec![0.0, 0.0], vec![3f64.ln(), 0.0], vec![-4.0, -4.0 + 2f64.ln()]]);
        let probs = policy_probs(&p);
        assert_eq!(probs.row(0), &[0.5, 0.5]);
        assert_relative_eq!(probs.get(1, 0), 0.75, epsilon = 1e-15);
        assert_relative_eq!(probs.get(1, 1), 0.25, epsilon = 1e-15);
        assert_relative_eq!(probs.get(2, 0), 1.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(probs.get(2, 1), 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn non_finite_logits_are_rejected() {
        let m = Matrix::from_rows(vec![vec![0.0, f64::NAN]]).unwrap();
        assert!(matches!(TabularPolicy::new(m), Err(Error::InvalidInput(_))));
        let m = Matrix::from_rows(vec![vec![0.0, f64::INFINITY]]).unwrap();
        assert!(TabularPolicy::new(m).is_err());
    }

    #[test]
    fn gauge_center_examples() {
        let p = policy(vec![vec![1.0, 3.0], vec![0.0, 0.0]]);
        let c = gauge_center(&p);
        assert_eq!(c.logits().row(0), &[-1.0, 1.0]);
        assert_eq!(c.logits().row(1), &[0.0, 0.0]);
        assert_eq!(gauge_center(&c), c);
    }

    #[test]
    fn kl_examples() {
        let prompts = PromptSpace::uniform(1).unwrap();
        let p = single(&[0.5, 0.5]);
        assert_eq!(kl_divergence(&p, &p, &prompts).unwrap().mean, 0.0);
        let q = single(&[0.25, 0.75]);
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert_relative_eq!(kl_divergence(&p, &q, &prompts).unwrap().mean, expected, epsilon = 1e-15);
        assert_relative_eq!(expected, 0.143841, epsilon = 1e-6);
        let point = single(&[1.0, 0.0]);
        assert_relative_eq!(
            kl_divergence(&point, &p, &prompts).unwrap().mean,
            2f64.ln(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn kl_reports_support_violation() {
        let prompts = PromptSpace::uniform(1).unwrap();
        let err = kl_divergence(&single(&[0.5, 0.5]), &single(&[1.0, 0.0]), &prompts).unwrap_err();
        assert!(matches!(err, Error::SupportViolation { prompt: 0, response: 1, .. }));
    }

    #[test]
    fn expected_reward_examples() {
        let prompts = PromptSpace::uniform(1).unwrap();
        let r = RewardTable::new(Matrix::from_rows(vec![vec![1.0, 3.0]]).unwrap()).unwrap();
        assert_eq!(expected_reward(&policy(vec![vec![0.0, 0.0]]), &r, &prompts).unwrap(), 2.0);
        assert_eq!(single(&[1.0, 0.0]).expected_reward(&r, &prompts).unwrap(), 1.0);
        let r = RewardTable::new(Matrix::from_rows(vec![vec![0.0, 4.0]]).unwrap()).unwrap();
        assert_relative_eq!(
            expected_reward(&policy(vec![vec![3f64.ln(), 0.0]]), &r, &prompts).unwrap(),
            1.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn expected_reward_rejects_shape_mismatch() {
        let prompts = PromptSpace::uniform(1).unwrap();
        let r = RewardTable::new(Matrix::zeros(1, 3)).unwrap();
        let err = expected_reward(&policy(vec![vec![0.0, 0.0]]), &r, &prompts).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn conditional_validation() {
        assert!(CategoricalConditional::new(Matrix::from_rows(vec![vec![0.6, 0.6]]).unwrap()).is_err());
        assert!(CategoricalConditional::new(Matrix::from_rows(vec![vec![1.2, -0.2]]).unwrap()).is_err());
        let c = single(&[1.0, 0.0]);
        assert!(!c.is_full_support());
        assert!(c.require_full_support().is_err());
        assert!(PromptSpace::new(vec![0.5, 0.6]).is_err());
        assert!(ResponseSpace::new(1).is_err());
    }

    #[test]
    fn serde_rejects_invalid_documents() {
        let bad = r#"{"probs": [[0.7, 0.7]], "full_support": false}"#;
        assert!(serde_json::from_str::<CategoricalConditional>(bad).is_err());
        let unknown = r#"{"logits": [[0.0, 1.0]], "extra": 1}"#;
        assert!(serde_json::from_str::<TabularPolicy>(unknown).is_err());
        let good = r#"{"size": 2, "weights": [0.25, 0.75]}"#;
        assert_eq!(serde_json::from_str::<PromptSpace>(good).unwrap().size(), 2);
    }

    fn logits_strategy() -> impl Strategy<Value = Matrix> {
        (1usize..4, 2usize..6).prop_flat_map(|(n, m)| {
            proptest::collection::vec(-5.0f64..5.0, n * m)
                .prop_map(move |d| Matrix::from_flat(n, m, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(logits in logits_strategy(), shifts in proptest::collection::vec(-20.0f64..20.0, 4)) {
            let p = TabularPolicy::new(logits.clone()).unwrap();
            let shifted = Matrix::from_fn(logits.rows(), logits.cols(), |i, j| logits.get(i, j) + shifts[i]);
            let q = TabularPolicy::new(shifted).unwrap();
            let (a, b) = (p.probs(), q.probs());
            for (u, v) in a.probs().data().iter().zip(b.probs().data()) {
                prop_assert!((u - v).abs() <= 1e-14);
            }
            for row in a.probs().iter_rows() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= ROW_SUM_TOL);
            }
        }

        #[test]
        fn gauge_center_is_idempotent_and_preserves_probs(logits in logits_strategy()) {
            let p = TabularPolicy::new(logits).unwrap();
            let c = gauge_center(&p);
            for row in c.logits().iter_rows() {
                prop_assert!(row.iter().sum::<f64>().abs() <= 1e-12);
            }
            let cc = gauge_center(&c);
            for (u, v) in c.logits().data().iter().zip(cc.logits().data()) {
                prop_assert!((u - v).abs() <= 1e-15);
            }
            for (u, v) in p.probs().probs().data().iter().zip(c.probs().probs().data()) {
                prop_assert!((u - v).abs() <= 1e-15);
            }
        }

        #[test]
        fn kl_is_nonnegative_and_zero_iff_equal(a in logits_strategy(), b_seed in -3.0f64..3.0) {
            let p = CategoricalConditional::from_logits(&a).unwrap();
            let q = CategoricalConditional::from_logits(&a.map(|v| v * 0.5 + b_seed)).unwrap();
            let prompts = PromptSpace::uniform(a.rows()).unwrap();
            let kl = kl_divergence(&p, &q, &prompts).unwrap();
            prop_assert!(kl.per_prompt.iter().all(|&k| k >= 0.0));
            prop_assert!(kl_divergence(&p, &p, &prompts).unwrap().mean.abs() <= 1e-12);
            if p.max_tv(&q).unwrap() > 1e-6 {
                prop_assert!(kl.mean > 0.0);
            }
        }
    }
}
