//! Synthetic-world experiments: build a reward table and reference policy,
//! construct a dataset, train, and score the result against the true reward.
//! Named suites bundle the experiment families and reduce them to findings.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{
    assign_tiers, build_pairs, gap_counterfactuals, on_policy_mix, BuildContext, FamilyOrderings, GapFamily, MixConfig,
    PairStrategy, QualityTier,
};
use crate::error::{invalid, Error, Result};
use crate::matrix::Matrix;
use crate::numeric::{mean, sigmoid, std_dev};
use crate::preference::{PairStats, PreferencePairSet};
use crate::rng::{derive_seed, normal, stream};
use crate::tabular::{kl_divergence, CategoricalConditional, PromptSpace, RewardTable, TabularPolicy};
use crate::trainer::{train_dpo, train_online_dpo, train_sft_kl, OnlineSpec, RejectedSource, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardLaw {
    Normal { mean: f64, std: f64 },
    Table { values: Matrix },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceLaw {
    /// Softmax of i.i.d. normal logits.
    RandomLogits { std: f64 },
    /// `softmax((r + noise) / temperature)` with normal noise.
    NoisyReward { noise_std: f64, temperature: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub prompts: usize,
    pub responses: usize,
    pub reward: RewardLaw,
    pub reference: ReferenceLaw,
    #[serde(default)]
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            prompts: 8,
            responses: 16,
            reward: RewardLaw::Normal { mean: 0.0, std: 1.0 },
            reference: ReferenceLaw::NoisyReward {
                noise_std: 1.0,
                temperature: 2.0,
            },
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.prompts == 0 || self.responses < 2 {
            return Err(invalid(format!(
                "world needs >= 1 prompt and >= 2 responses, got {}x{}",
                self.prompts, self.responses
            )));
        }
        match &self.reward {
            RewardLaw::Normal { mean, std } => {
                if !mean.is_finite() || !(*std >= 0.0) || !std.is_finite() {
                    return Err(invalid("reward law needs a finite mean and a finite std >= 0"));
                }
            }
            RewardLaw::Table { values } => values.require_shape((self.prompts, self.responses))?,
        }
        match self.reference {
            ReferenceLaw::RandomLogits { std } => {
                if !(std >= 0.0) || !std.is_finite() {
                    return Err(invalid("reference logit std must be finite and >= 0"));
                }
            }
            ReferenceLaw::NoisyReward { noise_std, temperature } => {
                if !(noise_std >= 0.0) || !noise_std.is_finite() {
                    return Err(invalid("reference noise std must be finite and >= 0"));
                }
                if !(temperature > 0.0) || !temperature.is_finite() {
                    return Err(invalid("reference temperature must be finite and > 0"));
                }
            }
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub reward: RewardTable,
    pub reference: CategoricalConditional,
    pub prompts: PromptSpace,
}

fn normal_table(seed: u64, label: &str, rows: usize, cols: usize, mean: f64, std: f64) -> Matrix {
    let mut rng = stream(derive_seed(seed, label), 0);
    Matrix::from_fn(rows, cols, |_, _| normal(&mut rng, mean, std))
}

pub fn make_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let (n, m) = (spec.prompts, spec.responses);
    let reward = match &spec.reward {
        RewardLaw::Normal { mean, std } => normal_table(spec.seed, "world/reward", n, m, *mean, *std),
        RewardLaw::Table { values } => values.clone(),
    };
    let logits = match spec.reference {
        ReferenceLaw::RandomLogits { std } => normal_table(spec.seed, "world/reference", n, m, 0.0, std),
        ReferenceLaw::NoisyReward { noise_std, temperature } => {
            let noise = normal_table(spec.seed, "world/reference", n, m, 0.0, noise_std);
            reward.zip_map(&noise, |r, e| (r + e) / temperature)?
        }
    };
    Ok(World {
        reward: RewardTable::new(reward)?,
        reference: CategoricalConditional::from_logits(&logits)?,
        prompts: PromptSpace::uniform(n)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub expected_reward: f64,
    pub kl_to_reference: f64,
    /// `𝔼_{x, y∼π, y'∼π_ref} σ(r(x,y) − r(x,y'))`.
    pub win_rate: f64,
}

pub fn eval_policy(
    policy: &CategoricalConditional,
    reward: &RewardTable,
    reference: &CategoricalConditional,
    prompts: &PromptSpace,
) -> Result<Metrics> {
    policy.probs().require_shape(reference.shape())?;
    let expected_reward = policy.expected_reward(reward, prompts)?;
    let kl_to_reference = kl_divergence(policy, reference, prompts)?.mean;
    let mut win_rate = 0.0;
    for x in 0..policy.prompts() {
        let r = reward.row(x);
        let mut acc = 0.0;
        for (y, &p) in policy.row(x).iter().enumerate() {
            for (y2, &q) in reference.row(x).iter().enumerate() {
                acc += p * q * sigmoid(r[y] - r[y2]);
            }
        }
        win_rate += prompts.weight(x) * acc;
    }
    Ok(Metrics {
        expected_reward,
        kl_to_reference,
        win_rate,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChosenOnlyMethod {
    /// Online DPO: chosen from `π*`, rejected from the current policy.
    OnlineDpo,
    /// SFT on `π*` plus `(β/2)·KL(π‖π_ref)`.
    ContinualSft,
}

fn one() -> usize {
    1
}

fn unit_temperature() -> f64 {
    1.0
}

/// How a replicate's training data is produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Recipe {
    /// A datagen strategy; sampled strategies draw `rounds` pairs per prompt.
    Pairs {
        strategy: PairStrategy,
        #[serde(default = "one")]
        rounds: usize,
    },
    /// One member of the gap/quality family.
    GapFamily { family: GapFamily },
    /// `copies` repetitions of a base dataset as sampled items, then on-policy
    /// mixing with generations from the reference policy.
    OnPolicyMix {
        base: PairStrategy,
        copies: usize,
        rho: f64,
        k: usize,
        #[serde(default = "unit_temperature")]
        temperature: f64,
    },
    /// Train toward `π* = best_mass·δ_best + (1 − best_mass)·uniform`.
    ChosenOnly { best_mass: f64, method: ChosenOnlyMethod },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub world: WorldSpec,
    pub recipe: Recipe,
    pub train: TrainConfig,
    /// Replicate seeds; each replaces the world seed.
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(invalid(format!("experiment {}: at least one replicate seed is required", self.name)));
        }
        self.world.validate()?;
        self.train.validate()?;
        if let Recipe::ChosenOnly { best_mass, .. } = self.recipe {
            if !(0.0..=1.0).contains(&best_mass) {
                return Err(invalid(format!("best_mass must lie in [0, 1], got {best_mass}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ReplicateStatus {
    Ok,
    Diverged { step: usize },
    Failed { message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub seed: u64,
    #[serde(flatten)]
    pub status: ReplicateStatus,
    pub metrics: Option<Metrics>,
    pub dataset: Option<PairStats>,
    pub steps: usize,
    pub final_loss: Option<f64>,
    /// Final policy probabilities.
    pub policy: Option<Matrix>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(xs: &[f64]) -> Self {
        Self {
            mean: mean(xs),
            std: std_dev(xs),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub completed: usize,
    pub expected_reward: MeanStd,
    pub kl_to_reference: MeanStd,
    pub win_rate: MeanStd,
    pub avg_chosen: Option<MeanStd>,
    pub avg_rejected: Option<MeanStd>,
    pub avg_gap: Option<MeanStd>,
}

impl Aggregate {
    pub fn from_replicates(reps: &[ReplicateResult]) -> Self {
        let metrics: Vec<Metrics> = reps.iter().filter_map(|r| r.metrics).collect();
        let stats: Vec<PairStats> = reps.iter().filter_map(|r| r.dataset).collect();
        let of = |f: fn(&Metrics) -> f64| MeanStd::of(&metrics.iter().map(f).collect::<Vec<_>>());
        let of_stats = |f: fn(&PairStats) -> f64| {
            (!stats.is_empty()).then(|| MeanStd::of(&stats.iter().map(f).collect::<Vec<_>>()))
        };
        Self {
            completed: metrics.len(),
            expected_reward: of(|m| m.expected_reward),
            kl_to_reference: of(|m| m.kl_to_reference),
            win_rate: of(|m| m.win_rate),
            avg_chosen: of_stats(|s| s.avg_chosen),
            avg_rejected: of_stats(|s| s.avg_rejected),
            avg_gap: of_stats(|s| s.avg_gap),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub replicates: Vec<ReplicateResult>,
    pub aggregate: Aggregate,
}

impl RunReport {
    /// Recomputes the aggregate and compares it to the stored one.
    pub fn aggregates_consistent(&self, tol: f64) -> bool {
        let fresh = Aggregate::from_replicates(&self.replicates);
        let close = |a: MeanStd, b: MeanStd| {
            let eq = |x: f64, y: f64| (x.is_nan() && y.is_nan()) || (x - y).abs() <= tol;
            eq(a.mean, b.mean) && eq(a.std, b.std)
        };
        let close_opt = |a: Option<MeanStd>, b: Option<MeanStd>| match (a, b) {
            (Some(a), Some(b)) => close(a, b),
            (None, None) => true,
            _ => false,
        };
        let s = &self.aggregate;
        self.replicates.len() == self.config.seeds.len()
            && fresh.completed == s.completed
            && close(fresh.expected_reward, s.expected_reward)
            && close(fresh.kl_to_reference, s.kl_to_reference)
            && close(fresh.win_rate, s.win_rate)
            && close_opt(fresh.avg_chosen, s.avg_chosen)
            && close_opt(fresh.avg_rejected, s.avg_rejected)
            && close_opt(fresh.avg_gap, s.avg_gap)
    }

    pub fn mean_reward(&self) -> f64 {
        self.aggregate.expected_reward.mean
    }

    /// Per-seed expected reward, `None` where the replicate did not finish.
    pub fn rewards_by_seed(&self) -> Vec<Option<f64>> {
        self.replicates.iter().map(|r| r.metrics.map(|m| m.expected_reward)).collect()
    }

    /// Flat CSV, one row per replicate.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "experiment,seed,status,steps,final_loss,expected_reward,kl_to_reference,win_rate,avg_chosen,avg_rejected,avg_gap\n",
        );
        let num = |v: Option<f64>| v.map(|v| format!("{v:e}")).unwrap_or_default();
        for r in &self.replicates {
            let status = match &r.status {
                ReplicateStatus::Ok => "ok",
                ReplicateStatus::Diverged { .. } => "diverged",
                ReplicateStatus::Failed { .. } => "failed",
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                self.config.name,
                r.seed,
                status,
                r.steps,
                num(r.final_loss),
                num(r.metrics.map(|m| m.expected_reward)),
                num(r.metrics.map(|m| m.kl_to_reference)),
                num(r.metrics.map(|m| m.win_rate)),
                num(r.dataset.map(|s| s.avg_chosen)),
                num(r.dataset.map(|s| s.avg_rejected)),
                num(r.dataset.map(|s| s.avg_gap)),
            ));
        }
        out
    }
}

/// `π* = best_mass·δ_best + (1 − best_mass)·uniform` under the true reward.
pub fn smoothed_best(reward: &RewardTable, best_mass: f64) -> Result<CategoricalConditional> {
    let (n, m) = reward.shape();
    let mut probs = Matrix::filled(n, m, (1.0 - best_mass) / m as f64);
    for x in 0..n {
        let r = reward.row(x);
        let best = (0..m).fold(0, |b, y| if r[y] > r[b] { y } else { b });
        probs.add_at(x, best, best_mass);
    }
    CategoricalConditional::from_masses(probs)
}

/// A recipe's dataset plus what its construction reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuiltDataset {
    pub pairs: PreferencePairSet,
    pub tier_ranks: [usize; 5],
    /// On-policy mixing only.
    pub replaced: Option<usize>,
    /// Gap families only.
    pub orderings: Option<FamilyOrderings>,
}

/// Builds the dataset a recipe trains on in `world`; `seed` is the replicate
/// seed.
pub fn build_dataset(recipe: &Recipe, world: &World, seed: u64) -> Result<BuiltDataset> {
    let tiers = assign_tiers(&world.reward)?;
    let plain = |pairs| BuiltDataset {
        pairs,
        tier_ranks: tiers.ranks,
        replaced: None,
        orderings: None,
    };
    let ctx = |rounds| BuildContext {
        reward: &world.reward,
        tiers: &tiers,
        prompts: &world.prompts,
        generation: &world.reference,
        seed: derive_seed(seed, "dataset"),
        rounds,
    };
    match recipe {
        Recipe::Pairs { strategy, rounds } => Ok(plain(build_pairs(strategy, &ctx(*rounds))?)),
        Recipe::GapFamily { family } => {
            let fam = gap_counterfactuals(&tiers, &world.reward, &world.prompts)?;
            Ok(BuiltDataset {
                orderings: Some(fam.orderings.clone()),
                ..plain(fam.get(*family).clone())
            })
        }
        Recipe::OnPolicyMix {
            base,
            copies,
            rho,
            k,
            temperature,
        } => {
            if *copies == 0 {
                return Err(invalid("copies must be at least 1"));
            }
            let base_set = build_pairs(base, &ctx(1))?;
            let triples: Vec<(usize, usize, usize)> = base_set
                .items()
                .iter()
                .flat_map(|it| std::iter::repeat_n((it.prompt, it.chosen, it.rejected), *copies))
                .collect();
            let offline = PreferencePairSet::from_triples(base_set.prompts(), base_set.responses(), &triples)?;
            let mix = MixConfig {
                rho: *rho,
                k: *k,
                seed: derive_seed(seed, "mix"),
                temperature: *temperature,
            };
            let out = on_policy_mix(&offline, &world.reference, &world.reward, &mix)?;
            Ok(BuiltDataset {
                replaced: Some(out.replaced_count()),
                ..plain(out.pairs)
            })
        }
        Recipe::ChosenOnly { .. } => Err(invalid("chosen-only recipes have no pair dataset")),
    }
}

fn run_replicate(config: &ExperimentConfig, seed: u64) -> ReplicateResult {
    let failed = |message: String| ReplicateResult {
        seed,
        status: ReplicateStatus::Failed { message },
        metrics: None,
        dataset: None,
        steps: 0,
        final_loss: None,
        policy: None,
    };
    let world = match make_world(&config.world.with_seed(seed)) {
        Ok(w) => w,
        Err(e) => return failed(e.to_string()),
    };
    let start = match TabularPolicy::from_conditional(&world.reference) {
        Ok(p) => p,
        Err(e) => return failed(e.to_string()),
    };
    let mut train = config.train.clone();
    train.seed = derive_seed(seed, "train");
    train.snapshot_every = 0;

    let mut dataset = None;
    let outcome = match &config.recipe {
        Recipe::ChosenOnly { best_mass, method } => smoothed_best(&world.reward, *best_mass).and_then(|target| {
            match method {
                ChosenOnlyMethod::OnlineDpo => {
                    let online = OnlineSpec {
                        chosen_marginal: target,
                        rejected_source: RejectedSource::CurrentPolicy,
                    };
                    train_online_dpo(&start, &world.reference, &online, &world.prompts, &train)
                }
                ChosenOnlyMethod::ContinualSft => {
                    let kappa = train.beta.value() / 2.0;
                    train_sft_kl(&start, &world.reference, &target, &world.prompts, &train, kappa)
                }
            }
        }),
        recipe => match build_dataset(recipe, &world, seed) {
            Ok(BuiltDataset { pairs: data, .. }) => {
                dataset = match data.stats(&world.reward) {
                    Ok(s) => Some(s),
                    Err(e) => return failed(e.to_string()),
                };
                train_dpo(&start, &world.reference, &data, &train)
            }
            Err(e) => return failed(e.to_string()),
        },
    };
    match outcome {
        Ok((policy, trace)) => {
            let probs = policy.probs();
            match eval_policy(&probs, &world.reward, &world.reference, &world.prompts) {
                Ok(metrics) => ReplicateResult {
                    seed,
                    status: ReplicateStatus::Ok,
                    metrics: Some(metrics),
                    dataset,
                    steps: trace.records.len(),
                    final_loss: trace.last().map(|r| r.loss),
                    policy: Some(probs.probs().clone()),
                },
                Err(e) => failed(e.to_string()),
            }
        }
        Err(Error::Diverged { step, trace }) => ReplicateResult {
            seed,
            status: ReplicateStatus::Diverged { step },
            metrics: None,
            dataset,
            steps: trace.records.len(),
            final_loss: trace.last().map(|r| r.loss),
            policy: None,
        },
        Err(e) => failed(e.to_string()),
    }
}

/// Runs every replicate in parallel; results keep seed order.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    config.validate()?;
    let replicates: Vec<ReplicateResult> = config.seeds.par_iter().map(|&s| run_replicate(config, s)).collect();
    for r in &replicates {
        if let ReplicateStatus::Diverged { step } = r.status {
            log::warn!("{}: seed {} diverged at step {step}", config.name, r.seed);
        }
        if let ReplicateStatus::Failed { message } = &r.status {
            log::warn!("{}: seed {} failed: {message}", config.name, r.seed);
        }
    }
    let aggregate = Aggregate::from_replicates(&replicates);
    Ok(RunReport {
        config: config.clone(),
        replicates,
        aggregate,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Table1,
    Table2,
    Table3,
    Table4,
    Khaki,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Table1, Suite::Table2, Suite::Table3, Suite::Table4, Suite::Khaki];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Table1 => "table1",
            Suite::Table2 => "table2",
            Suite::Table3 => "table3",
            Suite::Table4 => "table4",
            Suite::Khaki => "khaki",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|suite| suite.name() == s)
            .ok_or_else(|| invalid(format!("unknown suite {s:?}; expected one of table1, table2, table3, table4, khaki")))
    }
}

pub const DEFAULT_REPLICATES: u64 = 20;
pub const DPO_BETA: f64 = 0.1;
pub const DPO_LEARNING_RATE: f64 = 2.0;
pub const DPO_STEPS: usize = 400;
pub const TABLE2_BETA: f64 = 0.05;
pub const TABLE2_SFT_LEARNING_RATE: f64 = 2.0;
pub const TABLE2_STEPS: usize = 4000;
pub const TABLE2_BEST_MASS: f64 = 0.9;
pub const KHAKI_K: usize = 4;
pub const KHAKI_ROUNDS: usize = 8;
pub const TABLE4_RATIOS: [f64; 3] = [0.0, 0.1, 0.2];
pub const TABLE4_COPIES: usize = 10;
pub const TABLE4_K: usize = 4;
/// Relative tolerance for online DPO vs continual SFT metric gains.
pub const TABLE2_METRIC_TOL: f64 = 0.10;
pub const TABLE2_TV_TOL: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteOptions {
    pub seeds: Vec<u64>,
    pub world: WorldSpec,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seeds: (0..DEFAULT_REPLICATES).collect(),
            world: WorldSpec::default(),
        }
    }
}

impl SuiteOptions {
    /// Replicate seeds `base, base + 1, …` of the default count.
    pub fn from_base_seed(base: u64) -> Self {
        Self {
            seeds: (base..base + DEFAULT_REPLICATES).collect(),
            ..Self::default()
        }
    }
}

fn dpo_train() -> TrainConfig {
    let mut t = TrainConfig::new(DPO_LEARNING_RATE, DPO_STEPS, DPO_BETA).expect("valid constants");
    t.convergence_tol = 0.0;
    t.snapshot_every = 0;
    t
}

fn tier_name(chosen: QualityTier, rejected: QualityTier) -> String {
    format!("{}/{}", title(chosen), title(rejected))
}

fn title(t: QualityTier) -> String {
    let s = t.to_string();
    let mut c = s.chars();
    c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
}

fn tier_experiment(opts: &SuiteOptions, chosen: QualityTier, rejected: QualityTier) -> ExperimentConfig {
    ExperimentConfig {
        name: tier_name(chosen, rejected),
        world: opts.world.clone(),
        recipe: Recipe::Pairs {
            strategy: PairStrategy::TierPair { chosen, rejected },
            rounds: 1,
        },
        train: dpo_train(),
        seeds: opts.seeds.clone(),
    }
}

pub const TABLE1_CHOSEN_SWEEP: [QualityTier; 4] = [QualityTier::Low, QualityTier::Medium, QualityTier::High, QualityTier::Best];
pub const TABLE1_REJECTED_SWEEP: [QualityTier; 4] = [QualityTier::Worst, QualityTier::Low, QualityTier::Medium, QualityTier::High];

fn table4_name(quality: &str, rho: f64) -> String {
    format!("{quality}/on-policy {:.0}%", rho * 100.0)
}

/// The experiment family of a named suite.
pub fn suite_configs(suite: Suite, opts: &SuiteOptions) -> Vec<ExperimentConfig> {
    match suite {
        Suite::Table1 => {
            let mut out: Vec<ExperimentConfig> = TABLE1_CHOSEN_SWEEP
                .iter()
                .map(|&c| tier_experiment(opts, c, QualityTier::Worst))
                .collect();
            out.extend(
                TABLE1_REJECTED_SWEEP[1..]
                    .iter()
                    .map(|&r| tier_experiment(opts, QualityTier::Best, r)),
            );
            out
        }
        Suite::Table2 => {
            let mut sft = TrainConfig::new(TABLE2_SFT_LEARNING_RATE, TABLE2_STEPS, TABLE2_BETA).expect("valid constants");
            sft.convergence_tol = 1e-10;
            sft.snapshot_every = 0;
            // the online gradient is the SFT gradient scaled by β/2
            let mut online = sft.clone();
            online.learning_rate = 2.0 * TABLE2_SFT_LEARNING_RATE / TABLE2_BETA;
            online.convergence_tol = sft.convergence_tol * TABLE2_BETA / 2.0;
            [
                ("Online-DPO", ChosenOnlyMethod::OnlineDpo, online),
                ("Continual SFT", ChosenOnlyMethod::ContinualSft, sft),
            ]
            .into_iter()
            .map(|(name, method, train)| ExperimentConfig {
                name: name.into(),
                world: opts.world.clone(),
                recipe: Recipe::ChosenOnly {
                    best_mass: TABLE2_BEST_MASS,
                    method,
                },
                train,
                seeds: opts.seeds.clone(),
            })
            .collect()
        }
        Suite::Table3 => GapFamily::ALL
            .iter()
            .map(|&family| ExperimentConfig {
                name: family.name().into(),
                world: opts.world.clone(),
                recipe: Recipe::GapFamily { family },
                train: dpo_train(),
                seeds: opts.seeds.clone(),
            })
            .collect(),
        Suite::Table4 => {
            let mut out = Vec::new();
            for (quality, chosen) in [("HQ", QualityTier::High), ("LQ", QualityTier::Low)] {
                for rho in TABLE4_RATIOS {
                    out.push(ExperimentConfig {
                        name: table4_name(quality, rho),
                        world: opts.world.clone(),
                        recipe: Recipe::OnPolicyMix {
                            base: PairStrategy::TierPair {
                                chosen,
                                rejected: QualityTier::Worst,
                            },
                            copies: TABLE4_COPIES,
                            rho,
                            k: TABLE4_K,
                            temperature: 1.0,
                        },
                        train: dpo_train(),
                        seeds: opts.seeds.clone(),
                    });
                }
            }
            out
        }
        Suite::Khaki => {
            let sampled = |name: &str, strategy| ExperimentConfig {
                name: name.into(),
                world: opts.world.clone(),
                recipe: Recipe::Pairs {
                    strategy,
                    rounds: KHAKI_ROUNDS,
                },
                train: dpo_train(),
                seeds: opts.seeds.clone(),
            };
            vec![
                sampled("Best-vs-worst", PairStrategy::BestVsWorst { k: KHAKI_K }),
                sampled("Best-vs-random", PairStrategy::BestVsRandom { k: KHAKI_K }),
                tier_experiment(opts, QualityTier::Best, QualityTier::Worst),
                tier_experiment(opts, QualityTier::Low, QualityTier::Worst),
            ]
        }
    }
}

/// A named boolean outcome; only asserted findings decide the suite verdict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub name: String,
    pub holds: bool,
    pub asserted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Findings {
    pub suite: Suite,
    pub effects: BTreeMap<String, f64>,
    pub findings: Vec<Finding>,
    /// Fraction of seeds on which an ordering holds, for information.
    pub per_seed_frequency: BTreeMap<String, f64>,
    pub pass: bool,
}

impl Findings {
    fn new(suite: Suite) -> Self {
        Self {
            suite,
            effects: BTreeMap::new(),
            findings: Vec::new(),
            per_seed_frequency: BTreeMap::new(),
            pass: true,
        }
    }

    fn effect(&mut self, name: &str, v: f64) {
        self.effects.insert(name.into(), v);
    }

    fn check(&mut self, name: &str, holds: bool, asserted: bool) {
        self.findings.push(Finding {
            name: name.into(),
            holds,
            asserted,
        });
        if asserted && !holds {
            self.pass = false;
        }
    }

    pub fn finding(&self, name: &str) -> Option<&Finding> {
        self.findings.iter().find(|f| f.name == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub reports: BTreeMap<String, RunReport>,
    pub findings: Findings,
}

fn report<'a>(reports: &'a BTreeMap<String, RunReport>, name: &str) -> Result<&'a RunReport> {
    reports
        .get(name)
        .ok_or_else(|| invalid(format!("suite report lacks experiment {name:?}")))
}

/// Fraction of seeds (finished in every listed report) where `pred` holds.
fn seed_frequency(reports: &[&RunReport], pred: impl Fn(&[f64]) -> bool) -> f64 {
    let columns: Vec<Vec<Option<f64>>> = reports.iter().map(|r| r.rewards_by_seed()).collect();
    let n = columns.first().map_or(0, Vec::len);
    let mut total = 0usize;
    let mut hits = 0usize;
    for i in 0..n {
        let vals: Option<Vec<f64>> = columns.iter().map(|c| c.get(i).copied().flatten()).collect();
        if let Some(v) = vals {
            total += 1;
            if pred(&v) {
                hits += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

fn strictly_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] > w[0])
}

fn spread(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

fn relative_difference(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Reduces raw per-replicate results to the suite's findings. Everything is
/// recomputed from the replicate records.
pub fn compute_findings(suite: Suite, reports: &BTreeMap<String, RunReport>) -> Result<Findings> {
    let mut f = Findings::new(suite);
    let fresh = |name: &str| -> Result<f64> {
        let r = report(reports, name)?;
        Ok(Aggregate::from_replicates(&r.replicates).expected_reward.mean)
    };
    match suite {
        Suite::Table1 => {
            let chosen_names: Vec<String> = TABLE1_CHOSEN_SWEEP
                .iter()
                .map(|&c| tier_name(c, QualityTier::Worst))
                .collect();
            let rejected_names: Vec<String> = TABLE1_REJECTED_SWEEP
                .iter()
                .map(|&r| tier_name(QualityTier::Best, r))
                .collect();
            let chosen: Vec<f64> = chosen_names.iter().map(|n| fresh(n)).collect::<Result<_>>()?;
            let rejected: Vec<f64> = rejected_names.iter().map(|n| fresh(n)).collect::<Result<_>>()?;
            let chosen_spread = spread(&chosen);
            let rejected_spread = spread(&rejected);
            for (n, v) in chosen_names.iter().zip(&chosen).chain(rejected_names.iter().zip(&rejected)) {
                f.effect(&format!("reward {n}"), *v);
            }
            f.effect("chosen_spread", chosen_spread);
            f.effect("rejected_spread", rejected_spread);
            let stats_increasing = chosen_names
                .iter()
                .map(|n| report(reports, n).map(|r| r.aggregate.avg_chosen.map(|s| s.mean)))
                .collect::<Result<Option<Vec<f64>>>>()?
                .is_some_and(|v| strictly_increasing(&v));
            f.check("dataset_avg_chosen_increasing", stats_increasing, true);
            f.check("chosen_sweep_strictly_increasing", strictly_increasing(&chosen), true);
            f.check("rejected_spread_below_half_chosen_spread", rejected_spread < 0.5 * chosen_spread, true);
            f.check("rejected_sweep_monotone", strictly_increasing(&rejected) || strictly_increasing(&rejected.iter().rev().copied().collect::<Vec<_>>()), false);
            let chosen_reports: Vec<&RunReport> = chosen_names.iter().map(|n| report(reports, n)).collect::<Result<_>>()?;
            f.per_seed_frequency.insert(
                "chosen_sweep_strictly_increasing".into(),
                seed_frequency(&chosen_reports, strictly_increasing),
            );
        }
        Suite::Table2 => {
            let online = report(reports, "Online-DPO")?;
            let sft = report(reports, "Continual SFT")?;
            let (a, b) = (
                Aggregate::from_replicates(&online.replicates),
                Aggregate::from_replicates(&sft.replicates),
            );
            // gains are measured over the reference policy, whose KL is 0 and
            // whose self win rate is 1/2
            let gain_reward = |r: &RunReport| -> Result<f64> {
                let mut gains = Vec::new();
                for rep in &r.replicates {
                    if let Some(m) = rep.metrics {
                        let world = make_world(&r.config.world.with_seed(rep.seed))?;
                        let base = world.reference.expected_reward(&world.reward, &world.prompts)?;
                        gains.push(m.expected_reward - base);
                    }
                }
                Ok(mean(&gains))
            };
            let reward_gain = (gain_reward(online)?, gain_reward(sft)?);
            let win_gain = (a.win_rate.mean - 0.5, b.win_rate.mean - 0.5);
            let kl = (a.kl_to_reference.mean, b.kl_to_reference.mean);
            f.effect("online_reward_gain", reward_gain.0);
            f.effect("sft_reward_gain", reward_gain.1);
            f.effect("online_win_rate", a.win_rate.mean);
            f.effect("sft_win_rate", b.win_rate.mean);
            f.effect("online_kl", kl.0);
            f.effect("sft_kl", kl.1);
            let rel_reward = relative_difference(reward_gain.0, reward_gain.1);
            let rel_win = relative_difference(win_gain.0, win_gain.1);
            let rel_kl = relative_difference(kl.0, kl.1);
            f.effect("reward_gain_relative_difference", rel_reward);
            f.effect("win_rate_gain_relative_difference", rel_win);
            f.effect("kl_relative_difference", rel_kl);
            let mut tv_max: f64 = 0.0;
            let mut compared = 0usize;
            for (p, q) in online.replicates.iter().zip(&sft.replicates) {
                if let (Some(p), Some(q)) = (&p.policy, &q.policy) {
                    let p = CategoricalConditional::new(p.clone())?;
                    let q = CategoricalConditional::new(q.clone())?;
                    tv_max = tv_max.max(p.max_tv(&q)?);
                    compared += 1;
                }
            }
            f.effect("final_policy_tv_max", tv_max);
            f.check("all_replicates_completed", compared == online.replicates.len(), true);
            f.check("final_policy_tv_within_tolerance", tv_max <= TABLE2_TV_TOL, true);
            f.check("reward_gain_within_10pct", rel_reward <= TABLE2_METRIC_TOL, true);
            f.check("win_rate_gain_within_10pct", rel_win <= TABLE2_METRIC_TOL, true);
            f.check("kl_within_10pct", rel_kl <= TABLE2_METRIC_TOL, true);
        }
        Suite::Table3 => {
            let r = |fam: GapFamily| fresh(fam.name());
            let quality = 0.5 * ((r(GapFamily::LgHq)? - r(GapFamily::LgLq)?) + (r(GapFamily::SgHq)? - r(GapFamily::SgLq)?));
            let gap = 0.5 * ((r(GapFamily::LgHq)? - r(GapFamily::SgHq)?) + (r(GapFamily::LgLq)? - r(GapFamily::SgLq)?));
            let counterfactual =
                0.5 * ((r(GapFamily::LgHq)? - r(GapFamily::LgHqInv)?) + (r(GapFamily::SgHqInv)? - r(GapFamily::SgHq)?));
            for fam in GapFamily::ALL {
                f.effect(&format!("reward {}", fam.name()), r(fam)?);
            }
            f.effect("quality_effect", quality);
            f.effect("gap_effect", gap);
            f.effect("counterfactual_effect", counterfactual);
            f.check("quality_exceeds_gap", quality > gap, true);
            f.check("gap_exceeds_counterfactual", gap > counterfactual, true);
            let fams: Vec<&RunReport> = GapFamily::ALL.iter().map(|fam| report(reports, fam.name())).collect::<Result<_>>()?;
            // columns follow GapFamily::ALL: LG-HQ, LG-LQ, SG-HQ, SG-LQ, LG-HQ-inv, SG-HQ-inv
            f.per_seed_frequency.insert(
                "quality_gt_gap_gt_counterfactual".into(),
                seed_frequency(&fams, |v| {
                    let q = 0.5 * ((v[0] - v[1]) + (v[2] - v[3]));
                    let g = 0.5 * ((v[0] - v[2]) + (v[1] - v[3]));
                    let c = 0.5 * ((v[0] - v[4]) + (v[5] - v[2]));
                    q > g && g > c
                }),
            );
        }
        Suite::Table4 => {
            let mut hq_above = true;
            for rho in TABLE4_RATIOS {
                let hq = fresh(&table4_name("HQ", rho))?;
                let lq = fresh(&table4_name("LQ", rho))?;
                f.effect(&table4_name("HQ", rho), hq);
                f.effect(&table4_name("LQ", rho), lq);
                hq_above &= hq > lq;
            }
            let last = TABLE4_RATIOS[TABLE4_RATIOS.len() - 1];
            let gain = |q: &str| -> Result<f64> { Ok(fresh(&table4_name(q, last))? - fresh(&table4_name(q, 0.0))?) };
            let (hq_gain, lq_gain) = (gain("HQ")?, gain("LQ")?);
            f.effect("hq_on_policy_gain", hq_gain);
            f.effect("lq_on_policy_gain", lq_gain);
            f.check("hq_exceeds_lq_at_every_ratio", hq_above, true);
            f.check("on_policy_gain_larger_for_hq", hq_gain > lq_gain, false);
        }
        Suite::Khaki => {
            let bw = fresh("Best-vs-worst")?;
            let br = fresh("Best-vs-random")?;
            let best_worst = fresh(&tier_name(QualityTier::Best, QualityTier::Worst))?;
            let low_worst = fresh(&tier_name(QualityTier::Low, QualityTier::Worst))?;
            let chosen_spread = best_worst - low_worst;
            f.effect("best_vs_worst", bw);
            f.effect("best_vs_random", br);
            f.effect("rejection_difference", (bw - br).abs());
            f.effect("chosen_quality_spread", chosen_spread);
            f.check("rejection_difference_below_chosen_spread", (bw - br).abs() < chosen_spread, true);
        }
    }
    Ok(f)
}

/// Builds, runs and reduces a named suite.
pub fn run_suite(suite: Suite, opts: &SuiteOptions) -> Result<SuiteReport> {
    let configs = suite_configs(suite, opts);
    let runs: Vec<RunReport> = configs.par_iter().map(run_experiment).collect::<Result<_>>()?;
    let reports: BTreeMap<String, RunReport> = runs.into_iter().map(|r| (r.config.name.clone(), r)).collect();
    let findings = compute_findings(suite, &reports)?;
    Ok(SuiteReport {
        suite,
        reports,
        findings,
    })
}
