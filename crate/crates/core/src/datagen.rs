//! Preference-dataset construction with controlled properties: quality
//! tiers, rejection-sampled pairs, oracle labeling, on-policy mixing, and
//! gap/quality counterfactual families.
//!
//! Random draws come from per-prompt (or per-item) counter streams, so the
//! output does not depend on evaluation order.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numeric::softmax;
use crate::preference::{oracle_preference, PairItem, PairMode, PreferenceOracle, PreferencePairSet};
use crate::rng::{categorical, stream};
use crate::tabular::{require_prompts, CategoricalConditional, PromptSpace, RewardTable};

/// Rank-based quality label; declaration order is best first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityTier {
    Best,
    High,
    Medium,
    Low,
    Worst,
}

impl QualityTier {
    pub const ALL: [QualityTier; 5] = [
        QualityTier::Best,
        QualityTier::High,
        QualityTier::Medium,
        QualityTier::Low,
        QualityTier::Worst,
    ];

    fn slot(self) -> usize {
        self as usize
    }

    /// Strictly better than `other`.
    pub fn above(self, other: QualityTier) -> bool {
        self.slot() < other.slot()
    }
}

impl fmt::Display for QualityTier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            QualityTier::Best => "best",
            QualityTier::High => "high",
            QualityTier::Medium => "medium",
            QualityTier::Low => "low",
            QualityTier::Worst => "worst",
        };
        f.write_str(s)
    }
}

/// Per-prompt tier → response map plus the full descending reward ranking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TierAssignment {
    /// 1-based ranks used for Best..Worst.
    pub ranks: [usize; 5],
    /// `ranking[x][r]` is the response at 0-based rank `r` for prompt `x`.
    pub ranking: Vec<Vec<usize>>,
}

impl TierAssignment {
    pub fn index(&self, x: usize, tier: QualityTier) -> usize {
        self.ranking[x][self.ranks[tier.slot()] - 1]
    }

    pub fn prompts(&self) -> usize {
        self.ranking.len()
    }

    pub fn responses(&self) -> usize {
        self.ranking.first().map_or(0, Vec::len)
    }

    /// 0-based rank of response `y` at prompt `x`.
    pub fn rank_of(&self, x: usize, y: usize) -> usize {
        self.ranking[x].iter().position(|&r| r == y).expect("response is ranked")
    }
}

/// Nearest-rank quantile positions `{1, ⌈n/4⌉, ⌈n/2⌉, ⌈3n/4⌉, n}`.
pub fn tier_ranks(n: usize) -> [usize; 5] {
    [1, n.div_ceil(4), n.div_ceil(2), (3 * n).div_ceil(4), n]
}

/// Ranks each prompt's responses by descending reward (ties: lowest index
/// first) and places the five tiers at nearest-rank quantiles.
pub fn assign_tiers(reward: &RewardTable) -> Result<TierAssignment> {
    let (n, m) = reward.shape();
    if m < 5 {
        return Err(invalid(format!("tier assignment needs >= 5 responses, got {m}")));
    }
    let ranking = (0..n)
        .map(|x| {
            let r = reward.row(x);
            let mut idx: Vec<usize> = (0..m).collect();
            idx.sort_by(|&a, &b| r[b].total_cmp(&r[a]).then(a.cmp(&b)));
            idx
        })
        .collect();
    Ok(TierAssignment {
        ranks: tier_ranks(m),
        ranking,
    })
}

/// One item per prompt pairing two tiers, weighted by prompt probability.
pub fn build_tier_pairs(
    tiers: &TierAssignment,
    chosen: QualityTier,
    rejected: QualityTier,
    prompts: &PromptSpace,
) -> Result<PreferencePairSet> {
    if !chosen.above(rejected) {
        return Err(Error::InvalidStrategy(format!(
            "chosen tier {chosen} must rank above rejected tier {rejected}"
        )));
    }
    require_prompts(prompts, tiers.prompts())?;
    let items = (0..tiers.prompts())
        .map(|x| PairItem {
            prompt: x,
            chosen: tiers.index(x, chosen),
            rejected: tiers.index(x, rejected),
            weight: prompts.weight(x),
        })
        .collect();
    PreferencePairSet::new(tiers.prompts(), tiers.responses(), PairMode::Exact, items)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionVariant {
    BestVsWorst,
    BestVsRandom,
}

const MAX_REDRAWS: usize = 10_000;

/// Reward argmax over the pool, ties to the lowest response index.
fn pool_best(pool: &[usize], r: &[f64]) -> usize {
    let mut best = pool[0];
    for &y in &pool[1..] {
        if r[y] > r[best] || (r[y] == r[best] && y < best) {
            best = y;
        }
    }
    best
}

fn draw_pair(
    rng: &mut impl Rng,
    gen: &[f64],
    r: &[f64],
    k: usize,
    variant: RejectionVariant,
) -> Option<(usize, usize)> {
    let mut pool: Vec<usize> = (0..k).map(|_| categorical(rng, gen)).collect();
    for _ in 0..MAX_REDRAWS {
        let chosen = pool_best(&pool, r);
        let chosen_pos = pool.iter().position(|&y| y == chosen).expect("best is in pool");
        let slot = match variant {
            RejectionVariant::BestVsWorst => {
                // lowest reward among draws distinct from the chosen response
                let mut slot: Option<usize> = None;
                for (i, &y) in pool.iter().enumerate() {
                    if y == chosen {
                        continue;
                    }
                    match slot {
                        Some(s) if r[y] > r[pool[s]] || (r[y] == r[pool[s]] && y >= pool[s]) => {}
                        _ => slot = Some(i),
                    }
                }
                slot.unwrap_or((chosen_pos + 1) % k)
            }
            RejectionVariant::BestVsRandom => {
                let j = if k == 2 { 0 } else { rng.random_range(0..k - 1) };
                if j >= chosen_pos {
                    j + 1
                } else {
                    j
                }
            }
        };
        if pool[slot] != chosen {
            return Some((chosen, pool[slot]));
        }
        pool[slot] = categorical(rng, gen);
    }
    None
}

/// Draws `k` responses per round from the generation law; the reward argmax
/// is chosen and the argmin (or a uniform other draw) is rejected. A
/// rejected draw equal to the chosen response is redrawn.
#[allow(clippy::too_many_arguments)]
pub fn rejection_sample_pairs(
    generation: &CategoricalConditional,
    reward: &RewardTable,
    k: usize,
    variant: RejectionVariant,
    seed: u64,
    prompts: &PromptSpace,
    rounds: usize,
) -> Result<PreferencePairSet> {
    if k < 2 {
        return Err(invalid(format!("rejection sampling needs k >= 2, got {k}")));
    }
    if rounds == 0 {
        return Err(invalid("rounds must be at least 1"));
    }
    generation.probs().require_shape(reward.shape())?;
    require_prompts(prompts, generation.prompts())?;
    let mut items = Vec::with_capacity(generation.prompts() * rounds);
    for x in 0..generation.prompts() {
        let mut rng = stream(seed, x as u64);
        for _ in 0..rounds {
            let (chosen, rejected) = draw_pair(&mut rng, generation.row(x), reward.row(x), k, variant)
                .ok_or_else(|| {
                    Error::Construction(format!(
                        "prompt {x}: generation law never produced two distinct responses"
                    ))
                })?;
            items.push(PairItem {
                prompt: x,
                chosen,
                rejected,
                weight: prompts.weight(x) / rounds as f64,
            });
        }
    }
    PreferencePairSet::new(generation.prompts(), generation.responses(), PairMode::Sampled, items)
}

/// Labels each `(x, y1, y2)` by a Bernoulli draw with the oracle's
/// probability that `y1` wins.
pub fn label_pairs_by_oracle(
    candidates: &[(usize, usize, usize)],
    oracle: &PreferenceOracle,
    seed: u64,
) -> Result<PreferencePairSet> {
    let (n, m) = oracle.shape();
    let mut rng = stream(seed, 0);
    let mut triples = Vec::with_capacity(candidates.len());
    for &(x, y1, y2) in candidates {
        if y1 == y2 {
            return Err(invalid(format!("candidate pair at prompt {x} repeats response {y1}")));
        }
        let p = oracle_preference(oracle, x, y1, y2)?;
        let u: f64 = rng.random();
        triples.push(if u < p { (x, y1, y2) } else { (x, y2, y1) });
    }
    PreferencePairSet::from_triples(n, m, &triples)
}

fn default_temperature() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixConfig {
    pub rho: f64,
    pub k: usize,
    pub seed: u64,
    /// Logit temperature applied to the generation law.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

impl MixConfig {
    pub fn new(rho: f64, k: usize, seed: u64) -> Result<Self> {
        let cfg = Self {
            rho,
            k,
            seed,
            temperature: 1.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(invalid(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        if self.k == 0 {
            return Err(invalid("k must be at least 1"));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(invalid("temperature must be positive and finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixOutcome {
    pub pairs: PreferencePairSet,
    /// Which input items were replaced.
    pub replaced: Vec<bool>,
}

impl MixOutcome {
    pub fn replaced_count(&self) -> usize {
        self.replaced.iter().filter(|&&r| r).count()
    }
}

/// On-policy mixing: `⌊ρN⌋` items, sampled without replacement, have one
/// side replaced by the best of `k` fresh generations. If the new response
/// outscores `y_w` it becomes chosen against `y_w`; otherwise it becomes the
/// rejected response under `y_w`. Draws equal to `y_w` or `y_l` are
/// discarded so every selected item changes.
pub fn on_policy_mix(
    offline: &PreferencePairSet,
    generation: &CategoricalConditional,
    reward: &RewardTable,
    mix: &MixConfig,
) -> Result<MixOutcome> {
    mix.validate()?;
    if offline.is_empty() {
        return Err(invalid("offline dataset is empty"));
    }
    generation.probs().require_shape(offline.shape())?;
    reward.values().require_shape(offline.shape())?;
    let n_items = offline.len();
    let count = (mix.rho * n_items as f64).floor() as usize;
    let mut pick_rng = stream(mix.seed, u64::MAX);
    let mut selected = sample(&mut pick_rng, n_items, count).into_vec();
    selected.sort_unstable();

    let mut items = offline.items().to_vec();
    let mut replaced = vec![false; n_items];
    for &i in &selected {
        let it = items[i];
        let gen = tempered(generation.row(it.prompt), mix.temperature);
        let r = reward.row(it.prompt);
        let mut rng = stream(mix.seed, i as u64);
        let mut best = None;
        for _ in 0..MAX_REDRAWS {
            let draws: Vec<usize> = (0..mix.k)
                .map(|_| categorical(&mut rng, &gen))
                .filter(|&y| y != it.chosen && y != it.rejected)
                .collect();
            if !draws.is_empty() {
                best = Some(pool_best(&draws, r));
                break;
            }
        }
        let y_new = best.ok_or_else(|| {
            Error::Construction(format!(
                "item {i}: generation law has no mass outside the original pair"
            ))
        })?;
        let (chosen, rejected) = if r[y_new] > r[it.chosen] {
            (y_new, it.chosen)
        } else {
            (it.chosen, y_new)
        };
        items[i] = PairItem {
            chosen,
            rejected,
            ..it
        };
        replaced[i] = true;
    }
    let pairs = PreferencePairSet::new(offline.prompts(), offline.responses(), offline.mode(), items)?;
    Ok(MixOutcome { pairs, replaced })
}

fn tempered(probs: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 1.0 {
        return probs.to_vec();
    }
    let logits: Vec<f64> = probs.iter().map(|p| p.ln() / temperature).collect();
    softmax(&logits)
}

/// The six datasets of the gap/quality decomposition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GapFamily {
    #[serde(rename = "LG-HQ")]
    LgHq,
    #[serde(rename = "LG-LQ")]
    LgLq,
    #[serde(rename = "SG-HQ")]
    SgHq,
    #[serde(rename = "SG-LQ")]
    SgLq,
    #[serde(rename = "LG-HQ-inv")]
    LgHqInv,
    #[serde(rename = "SG-HQ-inv")]
    SgHqInv,
}

impl GapFamily {
    pub const ALL: [GapFamily; 6] = [
        GapFamily::LgHq,
        GapFamily::LgLq,
        GapFamily::SgHq,
        GapFamily::SgLq,
        GapFamily::LgHqInv,
        GapFamily::SgHqInv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GapFamily::LgHq => "LG-HQ",
            GapFamily::LgLq => "LG-LQ",
            GapFamily::SgHq => "SG-HQ",
            GapFamily::SgLq => "SG-LQ",
            GapFamily::LgHqInv => "LG-HQ-inv",
            GapFamily::SgHqInv => "SG-HQ-inv",
        }
    }

    /// Chosen tier of the four base families.
    fn base_chosen(self) -> Option<QualityTier> {
        match self {
            GapFamily::LgHq => Some(QualityTier::Best),
            GapFamily::SgHq => Some(QualityTier::High),
            GapFamily::LgLq => Some(QualityTier::Medium),
            GapFamily::SgLq => Some(QualityTier::Low),
            _ => None,
        }
    }

    fn large_gap(self) -> bool {
        matches!(self, GapFamily::LgHq | GapFamily::LgLq)
    }
}

/// Construction strategy for a preference dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PairStrategy {
    TierPair { chosen: QualityTier, rejected: QualityTier },
    BestVsWorst { k: usize },
    BestVsRandom { k: usize },
    /// Chosen at a tier, rejected below it with gap closest to `gap`.
    GapControlled { chosen: QualityTier, gap: f64 },
    /// Chosen responses of `base`, rejected responses of `rejected_from`.
    Counterfactual { base: GapFamily, rejected_from: GapFamily },
}

/// Lower-ranked response whose gap to `chosen` is closest to `target`.
fn closest_gap_rejected(tiers: &TierAssignment, r: &[f64], x: usize, chosen: usize, target: f64) -> Option<usize> {
    let rank = tiers.rank_of(x, chosen);
    tiers.ranking[x][rank + 1..]
        .iter()
        .copied()
        .min_by(|&a, &b| {
            let da = ((r[chosen] - r[a]) - target).abs();
            let db = ((r[chosen] - r[b]) - target).abs();
            da.total_cmp(&db).then(a.cmp(&b))
        })
}

/// One item per prompt: chosen at `tier`, rejected below it at the gap
/// closest to `gap`.
pub fn build_gap_controlled(
    tiers: &TierAssignment,
    reward: &RewardTable,
    chosen: QualityTier,
    gap: f64,
    prompts: &PromptSpace,
) -> Result<PreferencePairSet> {
    require_prompts(prompts, tiers.prompts())?;
    let mut items = Vec::with_capacity(tiers.prompts());
    for x in 0..tiers.prompts() {
        let c = tiers.index(x, chosen);
        let rej = closest_gap_rejected(tiers, reward.row(x), x, c, gap).ok_or_else(|| {
            Error::InvalidStrategy(format!("tier {chosen} has no lower-ranked response at prompt {x}"))
        })?;
        items.push(PairItem {
            prompt: x,
            chosen: c,
            rejected: rej,
            weight: prompts.weight(x),
        });
    }
    PreferencePairSet::new(tiers.prompts(), tiers.responses(), PairMode::Exact, items)
}

/// Relative tolerance on hitting a family's target mean gap.
pub const GAP_TOLERANCE: f64 = 0.10;

/// Picks one rejected response per prompt below `chosen[x]` so that the
/// weighted mean gap lands within [`GAP_TOLERANCE`] of `target`: start from
/// the per-prompt closest gap, then apply the best single-prompt swap until
/// none moves the mean closer.
fn fit_family_gap(
    tiers: &TierAssignment,
    reward: &RewardTable,
    chosen: &[usize],
    target: f64,
    prompts: &PromptSpace,
) -> Option<Vec<usize>> {
    let n = tiers.prompts();
    let mut rejected = Vec::with_capacity(n);
    for x in 0..n {
        rejected.push(closest_gap_rejected(tiers, reward.row(x), x, chosen[x], target)?);
    }
    let gap_of = |x: usize, y: usize| reward.get(x, chosen[x]) - reward.get(x, y);
    let mut mean: f64 = (0..n).map(|x| prompts.weight(x) * gap_of(x, rejected[x])).sum();
    for _ in 0..(n * tiers.responses()) {
        let mut best: Option<(usize, usize, f64)> = None;
        for x in 0..n {
            let rank = tiers.rank_of(x, chosen[x]);
            for &y in &tiers.ranking[x][rank + 1..] {
                let cand = mean + prompts.weight(x) * (gap_of(x, y) - gap_of(x, rejected[x]));
                if best.is_none_or(|(_, _, b)| (cand - target).abs() < (b - target).abs()) {
                    best = Some((x, y, cand));
                }
            }
        }
        match best {
            Some((x, y, cand)) if (cand - target).abs() < (mean - target).abs() => {
                rejected[x] = y;
                mean = cand;
            }
            _ => break,
        }
    }
    ((mean - target).abs() <= GAP_TOLERANCE * target.abs()).then_some(rejected)
}

/// Named ordering checks on a constructed family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyOrderings {
    /// LG-HQ and LG-HQ-inv share chosen responses.
    pub lg_hq_inv_shares_chosen: bool,
    /// SG-HQ and SG-HQ-inv share chosen responses.
    pub sg_hq_inv_shares_chosen: bool,
    /// Every large-gap mean gap exceeds every small-gap mean gap.
    pub large_gap_exceeds_small_gap: bool,
    /// Every high-quality mean chosen reward exceeds every low-quality one.
    pub high_quality_exceeds_low_quality: bool,
    pub lg_hq_inv_gap_below_lg_hq: bool,
    pub sg_hq_inv_gap_above_sg_hq: bool,
}

impl FamilyOrderings {
    pub fn all(&self) -> bool {
        self.lg_hq_inv_shares_chosen
            && self.sg_hq_inv_shares_chosen
            && self.large_gap_exceeds_small_gap
            && self.high_quality_exceeds_low_quality
            && self.lg_hq_inv_gap_below_lg_hq
            && self.sg_hq_inv_gap_above_sg_hq
    }

    fn first_violation(&self) -> Option<&'static str> {
        [
            (self.lg_hq_inv_shares_chosen, "LG-HQ and LG-HQ-inv must share chosen responses"),
            (self.sg_hq_inv_shares_chosen, "SG-HQ and SG-HQ-inv must share chosen responses"),
            (self.large_gap_exceeds_small_gap, "mean gap of LG-* must exceed that of SG-*"),
            (self.high_quality_exceeds_low_quality, "mean chosen reward of *-HQ must exceed that of *-LQ"),
            (self.lg_hq_inv_gap_below_lg_hq, "gap of LG-HQ-inv must be below gap of LG-HQ"),
            (self.sg_hq_inv_gap_above_sg_hq, "gap of SG-HQ-inv must exceed gap of SG-HQ"),
        ]
        .into_iter()
        .find(|(ok, _)| !ok)
        .map(|(_, msg)| msg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapFamilySet {
    pub datasets: BTreeMap<GapFamily, PreferencePairSet>,
    pub target_large_gap: f64,
    pub target_small_gap: f64,
    pub orderings: FamilyOrderings,
}

impl GapFamilySet {
    pub fn get(&self, family: GapFamily) -> &PreferencePairSet {
        &self.datasets[&family]
    }
}

/// Weighted mean gap range reachable by rejecting below `chosen[x]`: from the
/// next-ranked response to the worst one.
fn feasible_gap_range(tiers: &TierAssignment, reward: &RewardTable, chosen: &[usize], prompts: &PromptSpace) -> (f64, f64) {
    let mut lo = 0.0;
    let mut hi = 0.0;
    for (x, &c) in chosen.iter().enumerate() {
        let rank = tiers.rank_of(x, c);
        let below = &tiers.ranking[x][rank + 1..];
        let (Some(&next), Some(&last)) = (below.first(), below.last()) else {
            continue;
        };
        lo += prompts.weight(x) * (reward.get(x, c) - reward.get(x, next));
        hi += prompts.weight(x) * (reward.get(x, c) - reward.get(x, last));
    }
    (lo, hi)
}

/// `preferred` first, then a grid over `[lo, hi]` ordered by distance to it.
fn target_candidates(preferred: f64, lo: f64, hi: f64) -> Vec<f64> {
    const GRID: usize = 16;
    let mut out = vec![preferred];
    if hi > lo {
        let mut grid: Vec<f64> = (0..=GRID).map(|i| lo + (hi - lo) * i as f64 / GRID as f64).collect();
        grid.sort_by(|a, b| (a - preferred).abs().total_cmp(&(b - preferred).abs()));
        out.extend(grid);
    }
    out
}

const BASE_FAMILIES: [GapFamily; 4] = [GapFamily::LgHq, GapFamily::LgLq, GapFamily::SgHq, GapFamily::SgLq];

fn family_chosen(tiers: &TierAssignment, fam: GapFamily) -> Vec<usize> {
    let tier = fam.base_chosen().expect("base family");
    (0..tiers.prompts()).map(|x| tiers.index(x, tier)).collect()
}

fn assemble_families(
    tiers: &TierAssignment,
    reward: &RewardTable,
    prompts: &PromptSpace,
    large: f64,
    small: f64,
) -> std::result::Result<GapFamilySet, String> {
    let (n, m) = reward.shape();
    let mut chosen: BTreeMap<GapFamily, Vec<usize>> = BTreeMap::new();
    let mut rejected: BTreeMap<GapFamily, Vec<usize>> = BTreeMap::new();
    for fam in BASE_FAMILIES {
        let c = family_chosen(tiers, fam);
        let (lo, hi) = feasible_gap_range(tiers, reward, &c, prompts);
        let target = if fam.large_gap() { large } else { small }.clamp(lo, hi);
        let r = fit_family_gap(tiers, reward, &c, target, prompts).ok_or_else(|| {
            format!(
                "{}: no rejected responses reach the target mean gap {target:.4} within {:.0}%",
                fam.name(),
                GAP_TOLERANCE * 100.0
            )
        })?;
        chosen.insert(fam, c);
        rejected.insert(fam, r);
    }
    chosen.insert(GapFamily::LgHqInv, chosen[&GapFamily::LgHq].clone());
    rejected.insert(GapFamily::LgHqInv, rejected[&GapFamily::SgHq].clone());
    chosen.insert(GapFamily::SgHqInv, chosen[&GapFamily::SgHq].clone());
    rejected.insert(GapFamily::SgHqInv, rejected[&GapFamily::SgLq].clone());

    let mut datasets = BTreeMap::new();
    for fam in GapFamily::ALL {
        let items = (0..n)
            .map(|x| PairItem {
                prompt: x,
                chosen: chosen[&fam][x],
                rejected: rejected[&fam][x],
                weight: prompts.weight(x),
            })
            .collect();
        let set = PreferencePairSet::new(n, m, PairMode::Exact, items).map_err(|e| format!("{}: {e}", fam.name()))?;
        datasets.insert(fam, set);
    }

    let stats = |f: GapFamily| datasets[&f].stats(reward).expect("shapes match");
    let gap = |f: GapFamily| stats(f).avg_gap;
    let chs = |f: GapFamily| stats(f).avg_chosen;
    let min_large = gap(GapFamily::LgHq).min(gap(GapFamily::LgLq));
    let max_small = gap(GapFamily::SgHq).max(gap(GapFamily::SgLq));
    let min_hq = chs(GapFamily::LgHq).min(chs(GapFamily::SgHq));
    let max_lq = chs(GapFamily::LgLq).max(chs(GapFamily::SgLq));
    let orderings = FamilyOrderings {
        lg_hq_inv_shares_chosen: chosen[&GapFamily::LgHq] == chosen[&GapFamily::LgHqInv],
        sg_hq_inv_shares_chosen: chosen[&GapFamily::SgHq] == chosen[&GapFamily::SgHqInv],
        large_gap_exceeds_small_gap: min_large > max_small,
        high_quality_exceeds_low_quality: min_hq > max_lq,
        lg_hq_inv_gap_below_lg_hq: gap(GapFamily::LgHqInv) < gap(GapFamily::LgHq),
        sg_hq_inv_gap_above_sg_hq: gap(GapFamily::SgHqInv) > gap(GapFamily::SgHq),
    };
    if let Some(msg) = orderings.first_violation() {
        return Err(format!("ordering violated: {msg}"));
    }
    Ok(GapFamilySet {
        datasets,
        target_large_gap: large,
        target_small_gap: small,
        orderings,
    })
}

/// Builds the six gap/quality datasets. High-quality families choose Best
/// (LG) and High (SG); low-quality ones Medium (LG) and Low (SG). The
/// inverses reuse chosen responses and borrow rejected ones: LG-HQ-inv takes
/// SG-HQ's, SG-HQ-inv takes SG-LQ's.
///
/// Large-gap families aim at the mean Medium−Worst gap and small-gap families
/// at a third of the large target, each clamped to the family's reachable
/// range. When the result breaks an ordering, the targets are moved across
/// the reachable range, nearest to the preferred values first.
pub fn gap_counterfactuals(
    tiers: &TierAssignment,
    reward: &RewardTable,
    prompts: &PromptSpace,
) -> Result<GapFamilySet> {
    let (n, m) = reward.shape();
    if m < 5 {
        return Err(invalid(format!("gap families need >= 5 responses, got {m}")));
    }
    if tiers.prompts() != n || tiers.responses() != m {
        return Err(Error::ShapeMismatch {
            expected: (n, m),
            found: (tiers.prompts(), tiers.responses()),
        });
    }
    require_prompts(prompts, n)?;
    let preferred_large: f64 = (0..n)
        .map(|x| {
            prompts.weight(x)
                * (reward.get(x, tiers.index(x, QualityTier::Medium)) - reward.get(x, tiers.index(x, QualityTier::Worst)))
        })
        .sum();
    if !(preferred_large > 0.0) {
        return Err(Error::Construction("rewards are constant; no preference gap exists".into()));
    }
    let range = |fams: [GapFamily; 2]| {
        let [a, b] = fams.map(|f| feasible_gap_range(tiers, reward, &family_chosen(tiers, f), prompts));
        (a.0.min(b.0), a.1.max(b.1))
    };
    let (large_lo, large_hi) = range([GapFamily::LgHq, GapFamily::LgLq]);
    let (small_lo, small_hi) = range([GapFamily::SgHq, GapFamily::SgLq]);

    let mut first_error = None;
    for large in target_candidates(preferred_large, large_lo, large_hi) {
        for small in target_candidates(large / 3.0, small_lo, small_hi) {
            match assemble_families(tiers, reward, prompts, large, small) {
                Ok(set) => return Ok(set),
                Err(e) => {
                    first_error.get_or_insert(e);
                }
            }
        }
    }
    Err(Error::Construction(first_error.expect("at least one attempt")))
}

/// Everything a strategy may need to build a dataset.
pub struct BuildContext<'a> {
    pub reward: &'a RewardTable,
    pub tiers: &'a TierAssignment,
    pub prompts: &'a PromptSpace,
    pub generation: &'a CategoricalConditional,
    pub seed: u64,
    pub rounds: usize,
}

pub fn build_pairs(strategy: &PairStrategy, ctx: &BuildContext<'_>) -> Result<PreferencePairSet> {
    match strategy {
        PairStrategy::TierPair { chosen, rejected } => build_tier_pairs(ctx.tiers, *chosen, *rejected, ctx.prompts),
        PairStrategy::BestVsWorst { k } => rejection_sample_pairs(
            ctx.generation,
            ctx.reward,
            *k,
            RejectionVariant::BestVsWorst,
            ctx.seed,
            ctx.prompts,
            ctx.rounds,
        ),
        PairStrategy::BestVsRandom { k } => rejection_sample_pairs(
            ctx.generation,
            ctx.reward,
            *k,
            RejectionVariant::BestVsRandom,
            ctx.seed,
            ctx.prompts,
            ctx.rounds,
        ),
        PairStrategy::GapControlled { chosen, gap } => {
            build_gap_controlled(ctx.tiers, ctx.reward, *chosen, *gap, ctx.prompts)
        }
        PairStrategy::Counterfactual { base, rejected_from } => {
            let fam = gap_counterfactuals(ctx.tiers, ctx.reward, ctx.prompts)?;
            let base_set = fam.get(*base);
            let rej_set = fam.get(*rejected_from);
            let items = base_set
                .items()
                .iter()
                .zip(rej_set.items())
                .map(|(b, r)| PairItem {
                    rejected: r.rejected,
                    ..*b
                })
                .collect();
            PreferencePairSet::new(base_set.prompts(), base_set.responses(), PairMode::Exact, items)
                .map_err(|e| Error::Construction(format!("counterfactual {} + {}: {e}", base.name(), rejected_from.name())))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;

    fn reward(rows: Vec<Vec<f64>>) -> RewardTable {
        RewardTable::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn tier_examples() {
        let t = assign_tiers(&reward(vec![vec![5.0, 4.0, 3.0, 2.0, 1.0]])).unwrap();
        let idx: Vec<usize> = QualityTier::ALL.iter().map(|&q| t.index(0, q)).collect();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
        assert_eq!(tier_ranks(8), [1, 2, 4, 6, 8]);
        let t = assign_tiers(&reward(vec![vec![8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0]])).unwrap();
        let idx: Vec<usize> = QualityTier::ALL.iter().map(|&q| t.index(0, q)).collect();
        assert_eq!(idx, vec![0, 1, 3, 5, 7]);
        // ties resolve to the lowest index
        let t = assign_tiers(&reward(vec![vec![1.0, 2.0, 2.0, 0.0, 0.0]])).unwrap();
        assert_eq!(t.index(0, QualityTier::Best), 1);
        assert_eq!(t.index(0, QualityTier::High), 2);
        assert_eq!(t.index(0, QualityTier::Low), 3);
        assert!(assign_tiers(&reward(vec![vec![1.0, 2.0, 3.0, 4.0]])).is_err());
    }

    #[test]
    fn tier_pair_examples() {
        let r = reward(vec![vec![5.0, 4.0, 3.0, 2.0, 1.0]]);
        let t = assign_tiers(&r).unwrap();
        let p = PromptSpace::uniform(1).unwrap();
        let bw = build_tier_pairs(&t, QualityTier::Best, QualityTier::Worst, &p).unwrap();
        assert_eq!((bw.items()[0].chosen, bw.items()[0].rejected), (0, 4));
        let hw = build_tier_pairs(&t, QualityTier::High, QualityTier::Worst, &p).unwrap();
        assert_eq!(hw.items()[0].rejected, bw.items()[0].rejected);
        assert_ne!(hw.items()[0].chosen, bw.items()[0].chosen);
        assert!(matches!(
            build_tier_pairs(&t, QualityTier::Low, QualityTier::High, &p),
            Err(Error::InvalidStrategy(_))
        ));
        assert!(build_tier_pairs(&t, QualityTier::Low, QualityTier::Low, &p).is_err());
    }

    #[test]
    fn mix_branches() {
        // y_w = 0 with score 1.5; generation puts all outside mass on response 2
        let gen = CategoricalConditional::new(Matrix::from_rows(vec![vec![0.0, 0.0, 1.0]]).unwrap()).unwrap();
        let offline = PreferencePairSet::from_triples(1, 3, &[(0, 0, 1)]).unwrap();
        let mix = MixConfig::new(1.0, 4, 3).unwrap();

        let higher = reward(vec![vec![1.5, 0.0, 2.0]]);
        let out = on_policy_mix(&offline, &gen, &higher, &mix).unwrap();
        let it = out.pairs.items()[0];
        assert_eq!((it.chosen, it.rejected), (2, 0));

        let lower = reward(vec![vec![1.5, 0.0, 1.0]]);
        let out = on_policy_mix(&offline, &gen, &lower, &mix).unwrap();
        let it = out.pairs.items()[0];
        assert_eq!((it.chosen, it.rejected), (0, 2));
    }

    #[test]
    fn mix_errors_without_fresh_mass() {
        let gen = CategoricalConditional::new(Matrix::from_rows(vec![vec![0.5, 0.5, 0.0]]).unwrap()).unwrap();
        let offline = PreferencePairSet::from_triples(1, 3, &[(0, 0, 1)]).unwrap();
        let r = reward(vec![vec![1.0, 0.0, 2.0]]);
        let err = on_policy_mix(&offline, &gen, &r, &MixConfig::new(1.0, 2, 0).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Construction(_)));
    }

    #[test]
    fn rejection_k2_variants_coincide() {
        let p = PromptSpace::uniform(3).unwrap();
        let gen = CategoricalConditional::uniform(3, 6).unwrap();
        let r = RewardTable::new(Matrix::from_fn(3, 6, |x, y| ((x * 7 + y * 3) % 5) as f64 + 0.1 * y as f64)).unwrap();
        let a = rejection_sample_pairs(&gen, &r, 2, RejectionVariant::BestVsWorst, 9, &p, 20).unwrap();
        let b = rejection_sample_pairs(&gen, &r, 2, RejectionVariant::BestVsRandom, 9, &p, 20).unwrap();
        assert_eq!(a, b);
        for it in a.items() {
            assert!(r.get(it.prompt, it.chosen) >= r.get(it.prompt, it.rejected));
        }
    }

    #[test]
    fn rejection_point_mass_errors() {
        let p = PromptSpace::uniform(1).unwrap();
        let gen = CategoricalConditional::new(Matrix::from_rows(vec![vec![1.0, 0.0, 0.0]]).unwrap()).unwrap();
        let r = reward(vec![vec![0.0, 1.0, 2.0]]);
        let err = rejection_sample_pairs(&gen, &r, 3, RejectionVariant::BestVsWorst, 1, &p, 1).unwrap_err();
        assert!(matches!(err, Error::Construction(_)));
        assert!(rejection_sample_pairs(&gen, &r, 1, RejectionVariant::BestVsWorst, 1, &p, 1).is_err());
    }
}
