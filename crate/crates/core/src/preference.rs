//! Pairwise preference laws and preference datasets.
//!
//! A [`PreferencePairSet`] is either a sampled list of `(x, y_w, y_l)` items
//! or, in exact mode, a weighted enumeration of the full joint law.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::matrix::Matrix;
use crate::numeric::sigmoid;
use crate::tabular::{CategoricalConditional, PromptSpace, RewardTable, ROW_SUM_TOL};

/// Tolerance used when checking `P(a ≻ b) + P(b ≻ a) = 1`.
pub const COMPLEMENT_TOL: f64 = 1e-12;

/// Pairwise preference law `P(y1 ≻ y2 | x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum PreferenceOracle {
    /// Bradley–Terry law `σ(r(x, y1) − r(x, y2))`.
    BradleyTerry { reward: RewardTable },
    /// One `responses × responses` matrix per prompt.
    Explicit { table: Vec<Matrix> },
}

impl PreferenceOracle {
    pub fn bradley_terry(reward: RewardTable) -> Self {
        Self::BradleyTerry { reward }
    }

    pub fn explicit(table: Vec<Matrix>) -> Result<Self> {
        if table.is_empty() {
            return Err(invalid("explicit oracle needs at least one prompt"));
        }
        let m = table[0].rows();
        for (x, t) in table.iter().enumerate() {
            t.require_shape((m, m))?;
            for a in 0..m {
                if (t.get(a, a) - 0.5).abs() > COMPLEMENT_TOL {
                    return Err(invalid(format!("prompt {x}: diagonal entry ({a},{a}) is not 1/2")));
                }
                for b in 0..m {
                    let p = t.get(a, b);
                    if !(0.0..=1.0).contains(&p) {
                        return Err(invalid(format!("prompt {x}: entry ({a},{b}) = {p} outside [0, 1]")));
                    }
                    if (p + t.get(b, a) - 1.0).abs() > COMPLEMENT_TOL {
                        return Err(invalid(format!(
                            "prompt {x}: P({a}≻{b}) + P({b}≻{a}) != 1"
                        )));
                    }
                }
            }
        }
        Ok(Self::Explicit { table })
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Self::BradleyTerry { reward } => reward.shape(),
            Self::Explicit { table } => (table.len(), table[0].rows()),
        }
    }

    fn prob_unchecked(&self, x: usize, y1: usize, y2: usize) -> f64 {
        match self {
            Self::BradleyTerry { reward } => sigmoid(reward.get(x, y1) - reward.get(x, y2)),
            Self::Explicit { table } => table[x].get(y1, y2),
        }
    }

    /// Full per-prompt preference matrices.
    pub fn to_tables(&self) -> Vec<Matrix> {
        let (n, m) = self.shape();
        (0..n)
            .map(|x| Matrix::from_fn(m, m, |a, b| self.prob_unchecked(x, a, b)))
            .collect()
    }
}

/// `P(y1 ≻ y2 | x)` under the oracle.
pub fn oracle_preference(oracle: &PreferenceOracle, x: usize, y1: usize, y2: usize) -> Result<f64> {
    let (n, m) = oracle.shape();
    if x >= n || y1 >= m || y2 >= m {
        return Err(invalid(format!(
            "index ({x}, {y1}, {y2}) out of range for oracle of shape ({n}, {m})"
        )));
    }
    Ok(oracle.prob_unchecked(x, y1, y2))
}

/// Unlabeled pair-generating law 𝒟_u: prompt weights times per-prompt
/// densities over ordered response pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PairDistributionRepr", into = "PairDistributionRepr")]
pub struct PairDistribution {
    prompt_weights: PromptSpace,
    pair_density: Vec<Matrix>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairDistributionRepr {
    prompt_weights: PromptSpace,
    pair_density: Vec<Matrix>,
}

impl TryFrom<PairDistributionRepr> for PairDistribution {
    type Error = Error;
    fn try_from(r: PairDistributionRepr) -> Result<Self> {
        PairDistribution::new(r.prompt_weights, r.pair_density)
    }
}

impl From<PairDistribution> for PairDistributionRepr {
    fn from(d: PairDistribution) -> Self {
        Self {
            prompt_weights: d.prompt_weights,
            pair_density: d.pair_density,
        }
    }
}

impl PairDistribution {
    pub fn new(prompt_weights: PromptSpace, pair_density: Vec<Matrix>) -> Result<Self> {
        if pair_density.len() != prompt_weights.size() {
            return Err(invalid(format!(
                "{} pair densities for {} prompts",
                pair_density.len(),
                prompt_weights.size()
            )));
        }
        let m = pair_density[0].rows();
        if m < 2 {
            return Err(invalid("pair densities need at least two responses"));
        }
        for (x, p) in pair_density.iter().enumerate() {
            p.require_shape((m, m))?;
            if p.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(invalid(format!("prompt {x}: negative or non-finite pair mass")));
            }
            let total = p.sum();
            if (total - 1.0).abs() > ROW_SUM_TOL {
                return Err(invalid(format!("prompt {x}: pair density sums to {total}, not 1")));
            }
        }
        Ok(Self {
            prompt_weights,
            pair_density,
        })
    }

    /// `p(y1, y2 | x) = a(y1 | x) · b(y2 | x)`.
    pub fn independent(
        prompts: &PromptSpace,
        a: &CategoricalConditional,
        b: &CategoricalConditional,
    ) -> Result<Self> {
        a.probs().require_shape(b.shape())?;
        crate::tabular::require_prompts(prompts, a.prompts())?;
        let m = a.responses();
        let dens = (0..a.prompts())
            .map(|x| Matrix::from_fn(m, m, |i, j| a.get(x, i) * b.get(x, j)))
            .collect();
        Self::new(prompts.clone(), dens)
    }

    pub fn prompt_weights(&self) -> &PromptSpace {
        &self.prompt_weights
    }

    pub fn pair_density(&self) -> &[Matrix] {
        &self.pair_density
    }

    pub fn prompts(&self) -> usize {
        self.pair_density.len()
    }

    pub fn responses(&self) -> usize {
        self.pair_density[0].rows()
    }

    /// `p_{X,Y1}(x, y) = p_X(x) Σ_{y2} q(y, y2 | x)`.
    pub fn first_marginal(&self) -> Matrix {
        let q = symmetrized_pair_density(self);
        Matrix::from_fn(self.prompts(), self.responses(), |x, y| {
            self.prompt_weights.weight(x) * q[x].row(y).iter().sum::<f64>()
        })
    }
}

/// `q(y1, y2 | x) = (p(y1, y2 | x) + p(y2, y1 | x)) / 2`.
pub fn symmetrized_pair_density(du: &PairDistribution) -> Vec<Matrix> {
    du.pair_density
        .iter()
        .map(|p| {
            let m = p.rows();
            Matrix::from_fn(m, m, |i, j| 0.5 * (p.get(i, j) + p.get(j, i)))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    Sampled,
    Exact,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairItem {
    pub prompt: usize,
    pub chosen: usize,
    pub rejected: usize,
    pub weight: f64,
}

/// Dataset of preference triples with non-negative weights summing to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PairSetRepr", into = "PairSetRepr")]
pub struct PreferencePairSet {
    prompts: usize,
    responses: usize,
    mode: PairMode,
    items: Vec<PairItem>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PairSetRepr {
    prompts: usize,
    responses: usize,
    mode: PairMode,
    items: Vec<PairItem>,
}

impl TryFrom<PairSetRepr> for PreferencePairSet {
    type Error = Error;
    fn try_from(r: PairSetRepr) -> Result<Self> {
        PreferencePairSet::new(r.prompts, r.responses, r.mode, r.items)
    }
}

impl From<PreferencePairSet> for PairSetRepr {
    fn from(s: PreferencePairSet) -> Self {
        Self {
            prompts: s.prompts,
            responses: s.responses,
            mode: s.mode,
            items: s.items,
        }
    }
}

/// Mean chosen/rejected reward and mean gap of a pair set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub avg_chosen: f64,
    pub avg_rejected: f64,
    pub avg_gap: f64,
}

impl PreferencePairSet {
    pub fn new(prompts: usize, responses: usize, mode: PairMode, items: Vec<PairItem>) -> Result<Self> {
        if items.is_empty() {
            return Err(invalid("preference pair set is empty"));
        }
        let mut total = 0.0;
        for (i, it) in items.iter().enumerate() {
            if it.prompt >= prompts || it.chosen >= responses || it.rejected >= responses {
                return Err(invalid(format!("item {i} has an index out of range")));
            }
            if it.chosen == it.rejected {
                return Err(invalid(format!(
                    "item {i}: chosen and rejected are both response {}",
                    it.chosen
                )));
            }
            if !it.weight.is_finite() || it.weight < 0.0 {
                return Err(invalid(format!("item {i} has weight {}", it.weight)));
            }
            total += it.weight;
        }
        if (total - 1.0).abs() > ROW_SUM_TOL {
            return Err(invalid(format!("pair weights sum to {total}, not 1")));
        }
        Ok(Self {
            prompts,
            responses,
            mode,
            items,
        })
    }

    /// Sampled-mode set with equal weight `1/N` per triple.
    pub fn from_triples(
        prompts: usize,
        responses: usize,
        triples: &[(usize, usize, usize)],
    ) -> Result<Self> {
        let w = 1.0 / triples.len().max(1) as f64;
        let items = triples
            .iter()
            .map(|&(prompt, chosen, rejected)| PairItem {
                prompt,
                chosen,
                rejected,
                weight: w,
            })
            .collect();
        Self::new(prompts, responses, PairMode::Sampled, items)
    }

    /// Exact-mode set from unnormalized `(x, y_w, y_l, mass)` entries.
    /// Entries with `y_w = y_l` carry a constant loss and no gradient, so
    /// they are dropped and the remaining mass renormalized.
    pub fn from_masses(
        prompts: usize,
        responses: usize,
        entries: impl IntoIterator<Item = (usize, usize, usize, f64)>,
    ) -> Result<Self> {
        let mut items: Vec<PairItem> = entries
            .into_iter()
            .filter(|&(_, w, l, mass)| w != l && mass > 0.0)
            .map(|(prompt, chosen, rejected, weight)| PairItem {
                prompt,
                chosen,
                rejected,
                weight,
            })
            .collect();
        let total: f64 = items.iter().map(|it| it.weight).sum();
        if !(total > 0.0) {
            return Err(invalid("joint law puts no mass on distinct pairs"));
        }
        for it in &mut items {
            it.weight /= total;
        }
        Self::new(prompts, responses, PairMode::Exact, items)
    }

    /// Exact law `𝒟_x × π_w × π_l` with independent chosen and rejected draws.
    pub fn independent(
        prompts: &PromptSpace,
        chosen: &CategoricalConditional,
        rejected: &CategoricalConditional,
    ) -> Result<Self> {
        chosen.probs().require_shape(rejected.shape())?;
        crate::tabular::require_prompts(prompts, chosen.prompts())?;
        let (n, m) = chosen.shape();
        let entries = (0..n).flat_map(|x| {
            (0..m).flat_map(move |w| {
                (0..m).map(move |l| (x, w, l, prompts.weight(x) * chosen.get(x, w) * rejected.get(x, l)))
            })
        });
        Self::from_masses(n, m, entries)
    }

    /// Exact law from per-prompt joint matrices `J_x(y_w, y_l)` and prompt weights.
    pub fn from_joint(prompts: &PromptSpace, joint: &[Matrix]) -> Result<Self> {
        if joint.len() != prompts.size() || joint.is_empty() {
            return Err(invalid("one joint matrix per prompt required"));
        }
        let m = joint[0].rows();
        for j in joint {
            j.require_shape((m, m))?;
        }
        let entries = (0..joint.len()).flat_map(|x| {
            (0..m).flat_map(move |w| (0..m).map(move |l| (x, w, l, prompts.weight(x) * joint[x].get(w, l))))
        });
        Self::from_masses(joint.len(), m, entries)
    }

    /// Population dataset obtained by drawing `(y1, y2) ~ 𝒟_u` and labeling
    /// the winner with the oracle: mass `2 q(a, b) P(a ≻ b)` on `(a, b)`.
    pub fn labeled(du: &PairDistribution, oracle: &PreferenceOracle) -> Result<Self> {
        if oracle.shape() != (du.prompts(), du.responses()) {
            return Err(Error::ShapeMismatch {
                expected: (du.prompts(), du.responses()),
                found: oracle.shape(),
            });
        }
        let q = symmetrized_pair_density(du);
        let m = du.responses();
        let entries = (0..du.prompts()).flat_map(|x| {
            let q = &q[x];
            let px = du.prompt_weights().weight(x);
            (0..m).flat_map(move |a| {
                (0..m).map(move |b| (x, a, b, px * 2.0 * q.get(a, b) * oracle.prob_unchecked(x, a, b)))
            })
        })
        .collect::<Vec<_>>();
        Self::from_masses(du.prompts(), m, entries)
    }

    pub fn prompts(&self) -> usize {
        self.prompts
    }

    pub fn responses(&self) -> usize {
        self.responses
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.prompts, self.responses)
    }

    pub fn mode(&self) -> PairMode {
        self.mode
    }

    pub fn items(&self) -> &[PairItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total item weight per prompt.
    pub fn prompt_mass(&self) -> Vec<f64> {
        let mut mass = vec![0.0; self.prompts];
        for it in &self.items {
            mass[it.prompt] += it.weight;
        }
        mass
    }

    /// Per-prompt joint matrices `J_x(y_w, y_l)` normalized within each
    /// prompt; prompts without items get an all-zero matrix.
    pub fn joint(&self) -> Vec<Matrix> {
        let mut joint = vec![Matrix::zeros(self.responses, self.responses); self.prompts];
        for it in &self.items {
            joint[it.prompt].add_at(it.chosen, it.rejected, it.weight);
        }
        let mass = self.prompt_mass();
        for (x, j) in joint.iter_mut().enumerate() {
            if mass[x] > 0.0 {
                for v in j.data_mut() {
                    *v /= mass[x];
                }
            }
        }
        joint
    }

    /// Chosen and rejected marginals `(π_w, π_l)`; prompts without items get
    /// a uniform row.
    pub fn marginals(&self) -> (CategoricalConditional, CategoricalConditional) {
        let (n, m) = self.shape();
        let mut w = Matrix::zeros(n, m);
        let mut l = Matrix::zeros(n, m);
        for it in &self.items {
            w.add_at(it.prompt, it.chosen, it.weight);
            l.add_at(it.prompt, it.rejected, it.weight);
        }
        let normalize = |mut t: Matrix| {
            for x in 0..n {
                let row = t.row_mut(x);
                let total: f64 = row.iter().sum();
                for v in row.iter_mut() {
                    *v = if total > 0.0 { *v / total } else { 1.0 / m as f64 };
                }
            }
            CategoricalConditional::from_normalized_unchecked(t)
        };
        (normalize(w), normalize(l))
    }

    /// Whether response `y` appears in any item at prompt `x`.
    pub fn coverage(&self) -> Vec<Vec<bool>> {
        let mut covered = vec![vec![false; self.responses]; self.prompts];
        for it in &self.items {
            if it.weight > 0.0 {
                covered[it.prompt][it.chosen] = true;
                covered[it.prompt][it.rejected] = true;
            }
        }
        covered
    }

    /// Explicit oracle matching the labeling frequencies of this set:
    /// `P(a ≻ b) = J(a, b) / (J(a, b) + J(b, a))`, or 1/2 where no pair exists.
    pub fn empirical_oracle(&self) -> PreferenceOracle {
        let m = self.responses;
        let table = self
            .joint()
            .into_iter()
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
        PreferenceOracle::Explicit { table }
    }

    /// Unlabeled law of this set: prompt mass and the per-prompt joint.
    pub fn unlabeled(&self) -> Result<PairDistribution> {
        let mass = self.prompt_mass();
        let prompts = PromptSpace::new(mass)?;
        let mut joint = self.joint();
        // a prompt with no items still needs a valid density; its weight is 0
        for j in joint.iter_mut() {
            if j.sum() == 0.0 {
                j.set(0, 1, 1.0);
            }
        }
        PairDistribution::new(prompts, joint)
    }

    pub fn stats(&self, reward: &RewardTable) -> Result<PairStats> {
        reward.values().require_shape(self.shape())?;
        let (mut c, mut r) = (0.0, 0.0);
        for it in &self.items {
            c += it.weight * reward.get(it.prompt, it.chosen);
            r += it.weight * reward.get(it.prompt, it.rejected);
        }
        Ok(PairStats {
            avg_chosen: c,
            avg_rejected: r,
            avg_gap: c - r,
        })
    }
}
