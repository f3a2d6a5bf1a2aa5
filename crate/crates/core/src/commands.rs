//! Subcommand implementations.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use preflab::harness::{
    build_dataset, make_world, run_experiment, run_suite, smoothed_best, ExperimentConfig, Recipe, SuiteOptions,
    WorldSpec,
};
use preflab::io::{
    dataset_to_jsonl, write_atomic, write_versioned, DATASET_STATS_SCHEMA, FINDINGS_SCHEMA, POLICY_SCHEMA,
    RUN_REPORT_SCHEMA, SUITE_REPORT_SCHEMA, VERIFICATION_SCHEMA,
};
use preflab::losses::BetaParam;
use preflab::preference::{PairStats, PreferencePairSet};
use preflab::solvers::{dpo_optimal_policy, rlhf_optimal_policy, MarginalPair};
use preflab::tabular::{CategoricalConditional, TabularPolicy};
use preflab::theory::{run_check, Check, Sizes};
use preflab::trainer::{
    train_dpo, train_online_dpo, train_rlhf, train_sft_kl, OnlineSpec, RejectedSource, TrainConfig, TrainTrace,
};
use preflab::{Error, Matrix};

use crate::{ConfigArgs, ExperimentArgs, VerifyArgs};

pub fn parse_check(s: &str) -> std::result::Result<Check, String> {
    Check::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Check::ALL.iter().map(|c| c.name()).collect();
        format!("unknown check {s:?}; expected one of {}", names.join(", "))
    })
}

/// 2 for bad input of any kind, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::InvalidInput(_)
                | Error::InvalidInstance(_)
                | Error::InvalidStrategy(_)
                | Error::ShapeMismatch { .. }
                | Error::SupportViolation { .. }
                | Error::Schema { .. } => 2,
                _ => 1,
            };
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<std::io::Error>() {
            if e.kind() == std::io::ErrorKind::NotFound {
                return 2;
            }
        }
    }
    1
}

fn load_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let cfg = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    Ok(cfg)
}

fn echo_config<T: Serialize>(out: &Path, cfg: &T) -> Result<()> {
    let text = toml::to_string(cfg).context("serializing resolved config")?;
    write_atomic(&out.join("resolved-config.toml"), text.as_bytes())?;
    Ok(())
}

pub fn verify(args: &VerifyArgs) -> Result<bool> {
    let checks: Vec<Check> = if args.all { Check::ALL.to_vec() } else { args.check.clone() };
    let opts = preflab::theory::SuiteOptions {
        seed: args.seed,
        sizes: Sizes {
            prompts: args.prompts,
            responses: args.responses,
        },
        beta: BetaParam::new(args.beta)?,
        uncovered: args.uncovered,
    };
    let mut all_pass = true;
    for check in checks {
        let report = run_check(check, &opts).with_context(|| format!("check {}", check.name()))?;
        let path = args.out.out.join(format!("verify-{}.json", check.name()));
        write_versioned(&path, VERIFICATION_SCHEMA, &report)?;
        println!("{}: {}", check.name(), if report.pass { "PASS" } else { "FAIL" });
        for m in &report.measurements {
            println!("  {} = {:e} ({})", m.name, m.value, if m.pass { "ok" } else { "violated" });
        }
        all_pass &= report.pass;
    }
    Ok(all_pass)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Objective {
    Dpo,
    OnlineDpo,
    SftKl,
    Rlhf,
}

/// A per-prompt response law.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum LawSpec {
    Reference,
    Uniform,
    SmoothedBest { best_mass: f64 },
    Probs { probs: Matrix },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum DataSpec {
    /// Exact pairs from independent chosen and rejected laws.
    Marginals { chosen: LawSpec, rejected: LawSpec },
    Recipe { recipe: Recipe },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    #[serde(default)]
    seed: u64,
    objective: Objective,
    #[serde(default)]
    compare_closed_form: bool,
    /// SFT-KL weight; defaults to β/2.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kl_weight: Option<f64>,
    #[serde(default)]
    world: WorldSpec,
    train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    data: Option<DataSpec>,
}

fn resolve_law(spec: &LawSpec, world: &preflab::harness::World) -> Result<CategoricalConditional> {
    let (n, m) = world.reward.shape();
    Ok(match spec {
        LawSpec::Reference => world.reference.clone(),
        LawSpec::Uniform => CategoricalConditional::uniform(n, m)?,
        LawSpec::SmoothedBest { best_mass } => smoothed_best(&world.reward, *best_mass)?,
        LawSpec::Probs { probs } => CategoricalConditional::new(probs.clone())?,
    })
}

#[derive(Serialize)]
struct PolicyDoc<'a> {
    logits: &'a Matrix,
    probs: &'a Matrix,
}

#[derive(Serialize)]
struct TrainSummary {
    objective: Objective,
    steps: usize,
    stop: preflab::trainer::StopReason,
    final_loss: Option<f64>,
    final_grad_norm: Option<f64>,
    tv_to_closed_form: Option<f64>,
}

fn write_trace(out: &Path, trace: &TrainTrace) -> Result<()> {
    let mut buf = Vec::new();
    trace.write_csv(&mut buf)?;
    write_atomic(&out.join("trace.csv"), &buf)?;
    Ok(())
}

pub fn train(args: &ConfigArgs) -> Result<bool> {
    let mut cfg: TrainFile = load_toml(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.world.seed = cfg.seed;
    cfg.train.seed = cfg.seed;
    let out = &args.out.out;
    echo_config(out, &cfg)?;

    let world = make_world(&cfg.world)?;
    let start = TabularPolicy::from_conditional(&world.reference)?;
    let beta = cfg.train.beta;
    let marginals = |need: &str| -> Result<(CategoricalConditional, CategoricalConditional)> {
        match &cfg.data {
            Some(DataSpec::Marginals { chosen, rejected }) => {
                Ok((resolve_law(chosen, &world)?, resolve_law(rejected, &world)?))
            }
            _ => bail!(Error::InvalidInput(format!("objective {need} needs [data] with kind = \"marginals\""))),
        }
    };

    let mut closed_form: Option<CategoricalConditional> = None;
    let outcome = match cfg.objective {
        Objective::Dpo => {
            let data = match &cfg.data {
                Some(DataSpec::Marginals { chosen, rejected }) => {
                    let (w, l) = (resolve_law(chosen, &world)?, resolve_law(rejected, &world)?);
                    if cfg.compare_closed_form {
                        closed_form = Some(dpo_optimal_policy(&MarginalPair::new(w.clone(), l.clone())?, &world.reference, beta)?);
                    }
                    PreferencePairSet::independent(&world.prompts, &w, &l)?
                }
                Some(DataSpec::Recipe { recipe }) => build_dataset(recipe, &world, cfg.seed)?.pairs,
                None => bail!(Error::InvalidInput("objective dpo needs a [data] table".into())),
            };
            train_dpo(&start, &world.reference, &data, &cfg.train)
        }
        Objective::OnlineDpo => {
            let (chosen, _) = marginals("online_dpo")?;
            let online = OnlineSpec {
                chosen_marginal: chosen,
                rejected_source: RejectedSource::CurrentPolicy,
            };
            train_online_dpo(&start, &world.reference, &online, &world.prompts, &cfg.train)
        }
        Objective::SftKl => {
            let (chosen, _) = marginals("sft_kl")?;
            let kappa = cfg.kl_weight.unwrap_or(beta.value() / 2.0);
            train_sft_kl(&start, &world.reference, &chosen, &world.prompts, &cfg.train, kappa)
        }
        Objective::Rlhf => {
            if cfg.compare_closed_form {
                closed_form = Some(rlhf_optimal_policy(&world.reward, &world.reference, beta)?);
            }
            train_rlhf(&start, &world.reward, &world.reference, &world.prompts, &cfg.train)
        }
    };
    if cfg.compare_closed_form && closed_form.is_none() {
        log::warn!("no closed form is available for objective {:?}", cfg.objective);
    }

    let (policy, trace) = match outcome {
        Ok(v) => v,
        Err(Error::Diverged { step, trace }) => {
            write_trace(out, &trace)?;
            eprintln!("training diverged at step {step}; trace written to {}", out.join("trace.csv").display());
            return Ok(false);
        }
        Err(e) => return Err(e.into()),
    };
    write_trace(out, &trace)?;
    let probs = policy.probs();
    write_versioned(
        &out.join("policy.json"),
        POLICY_SCHEMA,
        &PolicyDoc {
            logits: policy.logits(),
            probs: probs.probs(),
        },
    )?;
    let tv = closed_form.as_ref().map(|c| probs.max_tv(c)).transpose()?;
    let last = trace.last();
    let summary = TrainSummary {
        objective: cfg.objective,
        steps: trace.records.len(),
        stop: trace.stop,
        final_loss: last.map(|r| r.loss),
        final_grad_norm: last.map(|r| r.grad_norm),
        tv_to_closed_form: tv,
    };
    write_atomic(&out.join("summary.json"), (serde_json::to_string_pretty(&summary)? + "\n").as_bytes())?;
    println!(
        "steps={} stop={:?} final_loss={:e} grad_norm={:e}",
        summary.steps,
        summary.stop,
        summary.final_loss.unwrap_or(f64::NAN),
        summary.final_grad_norm.unwrap_or(f64::NAN)
    );
    if let Some(tv) = tv {
        println!("tv_to_closed_form={tv:e}");
    }
    Ok(true)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatagenFile {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    world: WorldSpec,
    recipe: Recipe,
}

#[derive(Serialize)]
struct DatasetStatsDoc {
    items: usize,
    stats: PairStats,
    replaced: Option<usize>,
    orderings: Option<preflab::datagen::FamilyOrderings>,
}

pub fn datagen(args: &ConfigArgs) -> Result<bool> {
    let mut cfg: DatagenFile = load_toml(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.world.seed = cfg.seed;
    let out = &args.out.out;
    echo_config(out, &cfg)?;

    let world = make_world(&cfg.world)?;
    let built = build_dataset(&cfg.recipe, &world, cfg.seed)?;
    let stats = built.pairs.stats(&world.reward)?;
    let strategy = serde_json::to_value(&cfg.recipe)?;
    let text = dataset_to_jsonl(&built.pairs, strategy, cfg.seed, Some(built.tier_ranks))?;
    write_atomic(&out.join("dataset.jsonl"), text.as_bytes())?;
    let doc = DatasetStatsDoc {
        items: built.pairs.len(),
        stats,
        replaced: built.replaced,
        orderings: built.orderings.clone(),
    };
    write_versioned(&out.join("dataset-stats.json"), DATASET_STATS_SCHEMA, &doc)?;

    println!("items={}", doc.items);
    println!(
        "Avg.Chs={:.6} Avg.Rej={:.6} Avg.Diff={:.6}",
        stats.avg_chosen, stats.avg_rejected, stats.avg_gap
    );
    if let Some(r) = built.replaced {
        println!("replaced={r}");
    }
    if let Some(o) = &built.orderings {
        println!("ordering lg_hq_inv_shares_chosen={}", o.lg_hq_inv_shares_chosen);
        println!("ordering sg_hq_inv_shares_chosen={}", o.sg_hq_inv_shares_chosen);
        println!("ordering large_gap_exceeds_small_gap={}", o.large_gap_exceeds_small_gap);
        println!("ordering high_quality_exceeds_low_quality={}", o.high_quality_exceeds_low_quality);
    }
    Ok(true)
}

pub fn experiment(args: &ExperimentArgs) -> Result<bool> {
    let out = &args.out.out;
    if let Some(suite) = args.suite {
        let opts = SuiteOptions::from_base_seed(args.seed.unwrap_or(0));
        let report = run_suite(suite, &opts)?;
        let name = suite.name();
        write_versioned(&out.join(format!("{name}-report.json")), SUITE_REPORT_SCHEMA, &report)?;
        write_versioned(&out.join(format!("{name}-findings.json")), FINDINGS_SCHEMA, &report.findings)?;
        let csv: String = report
            .reports
            .values()
            .enumerate()
            .map(|(i, r)| {
                let body = r.to_csv();
                if i == 0 {
                    body
                } else {
                    body.split_once('\n').map(|(_, rest)| rest.to_string()).unwrap_or_default()
                }
            })
            .collect();
        write_atomic(&out.join(format!("{name}-replicates.csv")), csv.as_bytes())?;

        println!("suite {name}: {}", if report.findings.pass { "PASS" } else { "FAIL" });
        for (k, v) in &report.findings.effects {
            println!("  {k} = {v:.6}");
        }
        for f in &report.findings.findings {
            println!(
                "  {} {}{}",
                f.name,
                f.holds,
                if f.asserted { "" } else { " (reported only)" }
            );
        }
        return Ok(report.findings.pass);
    }
    let path = args.config.as_ref().expect("clap enforces suite or config");
    let mut cfg: ExperimentConfig = load_toml(path)?;
    if let Some(seed) = args.seed {
        let n = cfg.seeds.len() as u64;
        cfg.seeds = (seed..seed + n).collect();
    }
    echo_config(out, &cfg)?;
    let report = run_experiment(&cfg)?;
    write_versioned(&out.join("experiment-report.json"), RUN_REPORT_SCHEMA, &report)?;
    write_atomic(&out.join("experiment-replicates.csv"), report.to_csv().as_bytes())?;
    let a = &report.aggregate;
    println!(
        "{}: completed={}/{} expected_reward={:.6}±{:.6} kl={:.6} win_rate={:.6}",
        cfg.name,
        a.completed,
        cfg.seeds.len(),
        a.expected_reward.mean,
        a.expected_reward.std,
        a.kl_to_reference.mean,
        a.win_rate.mean
    );
    Ok(true)
}
