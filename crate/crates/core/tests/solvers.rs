mod common;

use common::*;
use preflab::losses::{rlhf_objective, BetaParam};
use preflab::solvers::{dpo_optimal_policy, implied_reward, rlhf_optimal_policy, MarginalPair};
use preflab::tabular::{CategoricalConditional, TabularPolicy};
use preflab::Matrix;
use proptest::prelude::*;

fn beta(v: f64) -> BetaParam {
    BetaParam::new(v).unwrap()
}

fn cond(rows: Vec<Vec<f64>>) -> CategoricalConditional {
    CategoricalConditional::new(Matrix::from_rows(rows).unwrap()).unwrap()
}

#[test]
fn rlhf_optimum_matches_tilted_reference() {
    for seed in 0..50 {
        let mut r = rng(seed);
        let reference = random_conditional(&mut r, 4, 8);
        let reward = normal_matrix(&mut r, 4, 8, 2.0);
        for b in [0.05, 0.3, 1.0, 4.0] {
            let got = rlhf_optimal_policy(&reward_table(reward.clone()), &reference, beta(b)).unwrap();
            let want = rlhf_closed_form(reference.probs(), &reward, b);
            assert!(max_tv(got.probs(), &want) <= 1e-12, "seed {seed} beta {b}");
        }
    }
}

#[test]
fn rlhf_hand_example() {
    let reward = reward_table(Matrix::from_rows(vec![vec![4f64.ln(), 0.0]]).unwrap());
    let p = rlhf_optimal_policy(&reward, &CategoricalConditional::uniform(1, 2).unwrap(), beta(1.0)).unwrap();
    assert!((p.get(0, 0) - 0.8).abs() < 1e-12 && (p.get(0, 1) - 0.2).abs() < 1e-12);
}

#[test]
fn rlhf_optimum_beats_random_policies() {
    for seed in 0..10 {
        let mut r = rng(100 + seed);
        let reference = random_conditional(&mut r, 4, 8);
        let prompts = random_prompts(&mut r, 4);
        let reward = reward_table(normal_matrix(&mut r, 4, 8, 1.0));
        let b = beta(0.5);
        let opt = TabularPolicy::from_conditional(&rlhf_optimal_policy(&reward, &reference, b).unwrap()).unwrap();
        let best = rlhf_objective(&opt, &reward, &reference, &prompts, b).unwrap();
        for _ in 0..100 {
            let p = random_policy(&mut r, 4, 8);
            assert!(best <= rlhf_objective(&p, &reward, &reference, &prompts, b).unwrap());
        }
    }
}

#[test]
fn dpo_optimum_matches_ratio_tilt() {
    for seed in 0..50 {
        let mut r = rng(200 + seed);
        let reference = random_conditional(&mut r, 4, 8);
        let chosen = random_conditional(&mut r, 4, 8);
        let rejected = random_conditional(&mut r, 4, 8);
        let pair = MarginalPair::new(chosen.clone(), rejected.clone()).unwrap();
        for b in [0.1, 0.5, 1.0, 3.0] {
            let got = dpo_optimal_policy(&pair, &reference, beta(b)).unwrap();
            let want = dpo_closed_form(reference.probs(), chosen.probs(), rejected.probs(), b);
            assert!(max_tv(got.probs(), &want) <= 1e-12, "seed {seed} beta {b}");
        }
        // composing the implied reward with the RLHF solver gives the same policy
        let b = beta(0.7);
        let via = rlhf_optimal_policy(&implied_reward(&pair).unwrap(), &reference, b).unwrap();
        let direct = dpo_optimal_policy(&pair, &reference, b).unwrap();
        assert!(via.max_tv(&direct).unwrap() <= 1e-12);
    }
}

#[test]
fn dpo_optimum_hand_examples() {
    let u = CategoricalConditional::uniform(1, 2).unwrap();
    let pair = MarginalPair::new(cond(vec![vec![0.8, 0.2]]), cond(vec![vec![0.2, 0.8]])).unwrap();
    let p = dpo_optimal_policy(&pair, &u, beta(1.0)).unwrap();
    assert!((p.get(0, 0) - 16.0 / 17.0).abs() < 1e-12);
    assert!((p.get(0, 1) - 1.0 / 17.0).abs() < 1e-12);

    // β = 1 and π_l = π_ref gives π_w back
    let mut r = rng(300);
    let reference = random_conditional(&mut r, 3, 5);
    let chosen = random_conditional(&mut r, 3, 5);
    let pair = MarginalPair::new(chosen.clone(), reference.clone()).unwrap();
    let p = dpo_optimal_policy(&pair, &reference, beta(1.0)).unwrap();
    assert!(p.max_tv(&chosen).unwrap() <= 1e-12);

    // no signal when π_w = π_l
    let pair = MarginalPair::new(chosen.clone(), chosen).unwrap();
    let p = dpo_optimal_policy(&pair, &reference, beta(0.3)).unwrap();
    assert!(p.max_tv(&reference).unwrap() <= 1e-12);
}

#[test]
fn implied_reward_examples() {
    let e = std::f64::consts::E;
    let pair = MarginalPair::new(
        cond(vec![vec![e / (e + 1.0), 1.0 / (e + 1.0)]]),
        cond(vec![vec![1.0 / (e + 1.0), e / (e + 1.0)]]),
    )
    .unwrap();
    let r = implied_reward(&pair).unwrap();
    assert!((r.get(0, 0) - 1.0).abs() < 1e-12);
    assert!((r.get(0, 1) + 1.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn rlhf_optimum_moves_toward_reference_as_beta_grows(
        r0 in -3.0f64..3.0, r1 in -3.0f64..3.0, q in 0.05f64..0.95, b in 0.05f64..5.0,
    ) {
        let reward = reward_table(Matrix::from_rows(vec![vec![r0, r1]]).unwrap());
        let reference = cond(vec![vec![q, 1.0 - q]]);
        let lo = rlhf_optimal_policy(&reward, &reference, beta(b)).unwrap();
        let hi = rlhf_optimal_policy(&reward, &reference, beta(2.0 * b)).unwrap();
        prop_assert!(hi.max_tv(&reference).unwrap() <= lo.max_tv(&reference).unwrap() + 1e-15);
    }
}
