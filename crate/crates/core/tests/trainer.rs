mod common;

use common::*;
use preflab::losses::{online_dpo_gradient, rlhf_objective, sft_kl_gradient, BetaParam, SupervisedSet};
use preflab::preference::PreferencePairSet;
use preflab::tabular::{PromptSpace, TabularPolicy};
use preflab::trainer::{
    train_dpo, train_online_dpo, train_rlhf, train_sft_kl, OnlineSpec, RejectedSource, StopReason, TrainConfig,
};
use preflab::Matrix;

fn config(lr: f64, steps: usize, beta: f64, tol: f64) -> TrainConfig {
    let mut c = TrainConfig::new(lr, steps, beta).unwrap();
    c.convergence_tol = tol;
    c.snapshot_every = 0;
    c
}

#[test]
fn dpo_training_reaches_closed_form() {
    for seed in 0..5 {
        let mut r = rng(seed);
        let prompts = PromptSpace::uniform(2).unwrap();
        let reference = random_conditional(&mut r, 2, 4);
        let chosen = random_conditional(&mut r, 2, 4);
        let rejected = random_conditional(&mut r, 2, 4);
        let data = PreferencePairSet::independent(&prompts, &chosen, &rejected).unwrap();
        let start = TabularPolicy::from_conditional(&reference).unwrap();
        let (trained, trace) = train_dpo(&start, &reference, &data, &config(0.5, 20_000, 0.5, 0.0)).unwrap();
        let want = dpo_closed_form(reference.probs(), chosen.probs(), rejected.probs(), 0.5);
        let tv = max_tv(trained.probs().probs(), &want);
        assert!(tv <= 1e-3, "seed {seed}: tv {tv}");
        assert!((trace.records[0].loss - 2f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn dpo_without_signal_stays_at_reference() {
    let mut r = rng(10);
    let prompts = PromptSpace::uniform(3).unwrap();
    let reference = random_conditional(&mut r, 3, 5);
    let marginal = random_conditional(&mut r, 3, 5);
    let data = PreferencePairSet::independent(&prompts, &marginal, &marginal).unwrap();
    let start = TabularPolicy::from_conditional(&reference).unwrap();
    let (trained, trace) = train_dpo(&start, &reference, &data, &config(1.0, 500, 0.1, 0.0)).unwrap();
    assert!(trace.records[0].grad_norm <= 1e-12);
    assert!(trained.probs().max_tv(&reference).unwrap() <= 1e-3);
}

#[test]
fn online_dpo_gradient_vanishes_on_symmetric_start() {
    let mut r = rng(11);
    let prompts = PromptSpace::uniform(3).unwrap();
    let reference = random_conditional(&mut r, 3, 5);
    let start = TabularPolicy::from_conditional(&reference).unwrap();
    let g = online_dpo_gradient(&start, &reference, &reference, &prompts, BetaParam::new(0.1).unwrap()).unwrap();
    assert!(g.max_abs() <= 1e-12);
}

#[test]
fn online_dpo_tracks_sft_kl_at_small_beta() {
    let b = 0.05;
    for seed in 0..3 {
        let mut r = rng(20 + seed);
        let prompts = PromptSpace::uniform(4).unwrap();
        let reference = random_conditional(&mut r, 4, 8);
        let target = random_conditional(&mut r, 4, 8);
        let start = TabularPolicy::from_conditional(&reference).unwrap();
        let sft_cfg = config(2.0, 4000, b, 0.0);
        let online_cfg = config(2.0 * 2.0 / b, 4000, b, 0.0);
        let spec = OnlineSpec {
            chosen_marginal: target.clone(),
            rejected_source: RejectedSource::CurrentPolicy,
        };
        let (online, _) = train_online_dpo(&start, &reference, &spec, &prompts, &online_cfg).unwrap();
        let (sft, _) = train_sft_kl(&start, &reference, &target, &prompts, &sft_cfg, b / 2.0).unwrap();
        let tv = online.probs().max_tv(&sft.probs()).unwrap();
        assert!(tv <= 0.05, "seed {seed}: tv {tv}");
    }
}

#[test]
fn online_dpo_losses_stay_finite() {
    for b in [0.03, 0.1] {
        for seed in 0..3 {
            let mut r = rng(30 + seed);
            let prompts = PromptSpace::uniform(4).unwrap();
            let reference = random_conditional(&mut r, 4, 8);
            let spec = OnlineSpec {
                chosen_marginal: random_conditional(&mut r, 4, 8),
                rejected_source: RejectedSource::Sampled { batch: 16 },
            };
            let start = random_policy(&mut r, 4, 8);
            let (_, trace) = train_online_dpo(&start, &reference, &spec, &prompts, &config(1.0, 300, b, 0.0)).unwrap();
            assert!(trace.losses().iter().all(|l| l.is_finite()));
        }
    }
}

#[test]
fn sft_kl_limits() {
    let mut r = rng(40);
    let prompts = PromptSpace::uniform(3).unwrap();
    let reference = random_conditional(&mut r, 3, 5);
    let target = random_conditional(&mut r, 3, 5);
    let start = random_policy(&mut r, 3, 5);

    // κ = 1e3: KL dominates. The curvature scales with κ, so the step does too.
    let (p, _) = train_sft_kl(&start, &reference, &target, &prompts, &config(1e-3, 20_000, 0.1, 1e-12), 1e3).unwrap();
    assert!(p.probs().max_tv(&reference).unwrap() <= 0.01);

    let (p, _) = train_sft_kl(&start, &reference, &target, &prompts, &config(3.0, 20_000, 0.1, 1e-12), 0.0).unwrap();
    assert!(p.probs().max_tv(&target).unwrap() <= 1e-3);
}

#[test]
fn sft_kl_converges_to_stationary_point_not_geometric_mixture() {
    for (seed, kappa) in [(50, 0.5), (51, 1.0), (52, 2.0), (53, 0.025)] {
        let mut r = rng(seed);
        let prompts = PromptSpace::uniform(3).unwrap();
        let reference = random_conditional(&mut r, 3, 5);
        let target = random_conditional(&mut r, 3, 5);
        let start = TabularPolicy::from_conditional(&reference).unwrap();
        let (p, _) = train_sft_kl(&start, &reference, &target, &prompts, &config(2.0, 50_000, 0.1, 1e-13), kappa).unwrap();
        let oracle = sft_kl_minimizer(target.probs(), reference.probs(), kappa);
        let tv = max_tv(p.probs().probs(), &oracle);
        assert!(tv <= 1e-3, "kappa {kappa}: tv {tv}");

        // the oracle is a stationary point of the loss
        let oracle_policy = TabularPolicy::new(oracle.map(f64::ln)).unwrap();
        let data = SupervisedSet::from_conditional(&prompts, &target).unwrap();
        let g = sft_kl_gradient(&oracle_policy, &data, &reference, &prompts, kappa).unwrap();
        assert!(g.max_abs() <= 1e-10, "kappa {kappa}: {}", g.max_abs());

        // the weighted geometric mean ref^{κ/(1+κ)} π*^{1/(1+κ)} is not; the
        // two coincide to first order in κ, so only look at moderate κ
        if kappa < 0.5 {
            continue;
        }
        let geo = softmax(&Matrix::from_fn(3, 5, |x, y| {
            (kappa * reference.get(x, y).ln() + target.get(x, y).ln()) / (1.0 + kappa)
        }));
        let geo_policy = TabularPolicy::new(geo.map(f64::ln)).unwrap();
        let g = sft_kl_gradient(&geo_policy, &data, &reference, &prompts, kappa).unwrap();
        assert!(g.max_abs() > 1e-4, "kappa {kappa}: {}", g.max_abs());
    }
}

#[test]
fn rlhf_training() {
    let mut r = rng(60);
    let prompts = PromptSpace::uniform(3).unwrap();
    let reference = random_conditional(&mut r, 3, 5);
    let start = random_policy(&mut r, 3, 5);

    let zero = reward_table(Matrix::zeros(3, 5));
    let (p, _) = train_rlhf(&start, &zero, &reference, &prompts, &config(20.0, 20_000, 0.5, 1e-12)).unwrap();
    assert!(p.probs().max_tv(&reference).unwrap() <= 1e-3);

    let reward = normal_matrix(&mut r, 3, 5, 1.0);
    let (p, trace) =
        train_rlhf(&start, &reward_table(reward.clone()), &reference, &prompts, &config(20.0, 20_000, 0.5, 1e-12)).unwrap();
    assert_eq!(trace.stop, StopReason::Converged);
    assert!(max_tv(p.probs().probs(), &rlhf_closed_form(reference.probs(), &reward, 0.5)) <= 1e-3);

    let (_, trace) = train_rlhf(&start, &reward_table(reward.clone()), &reference, &prompts, &config(0.1, 2000, 0.5, 0.0)).unwrap();
    let losses = trace.losses();
    assert!(losses.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    let beta = BetaParam::new(0.5).unwrap();
    let first = rlhf_objective(&start, &reward_table(reward), &reference, &prompts, beta).unwrap();
    assert!((losses[0] - first).abs() < 1e-12);
}
