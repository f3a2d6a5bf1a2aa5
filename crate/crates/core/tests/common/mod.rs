//! Reference implementations written straight from the defining formulas,
//! sharing no code with the library beyond its data types.

#![allow(dead_code)]

use preflab::preference::PreferencePairSet;
use preflab::tabular::{CategoricalConditional, PromptSpace, RewardTable, TabularPolicy};
use preflab::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

pub type TestRng = ChaCha20Rng;

pub fn rng(seed: u64) -> TestRng {
    ChaCha20Rng::seed_from_u64(seed ^ 0x7e57_0000_0000_0000)
}

pub fn normal_matrix(rng: &mut TestRng, n: usize, m: usize, std: f64) -> Matrix {
    Matrix::from_fn(n, m, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

pub fn random_policy(rng: &mut TestRng, n: usize, m: usize) -> TabularPolicy {
    TabularPolicy::new(normal_matrix(rng, n, m, 1.0)).unwrap()
}

pub fn random_conditional(rng: &mut TestRng, n: usize, m: usize) -> CategoricalConditional {
    CategoricalConditional::new(softmax(&normal_matrix(rng, n, m, 1.0))).unwrap()
}

pub fn random_prompts(rng: &mut TestRng, n: usize) -> PromptSpace {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    PromptSpace::from_masses(&w).unwrap()
}

/// Row-wise softmax, shifted by the row maximum.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for x in 0..logits.rows() {
        let row = logits.row(x);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = e.iter().sum();
        for (y, v) in e.iter().enumerate() {
            out.set(x, y, v / z);
        }
    }
    out
}

pub fn sigma(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn kl(p: &Matrix, q: &Matrix, prompts: &PromptSpace) -> f64 {
    let mut total = 0.0;
    for x in 0..p.rows() {
        let mut acc = 0.0;
        for y in 0..p.cols() {
            let a = p.get(x, y);
            if a > 0.0 {
                acc += a * (a / q.get(x, y)).ln();
            }
        }
        total += prompts.weight(x) * acc;
    }
    total
}

pub fn sft_loss(logits: &Matrix, target: &Matrix, prompts: &PromptSpace) -> f64 {
    let p = softmax(logits);
    let mut total = 0.0;
    for x in 0..p.rows() {
        for y in 0..p.cols() {
            total -= prompts.weight(x) * target.get(x, y) * p.get(x, y).ln();
        }
    }
    total
}

pub fn dpo_loss(logits: &Matrix, reference: &Matrix, data: &PreferencePairSet, beta: f64) -> f64 {
    let p = softmax(logits);
    data.items()
        .iter()
        .map(|it| {
            let x = it.prompt;
            let m = beta
                * ((p.get(x, it.chosen) / reference.get(x, it.chosen)).ln()
                    - (p.get(x, it.rejected) / reference.get(x, it.rejected)).ln());
            -it.weight * sigma(m).ln()
        })
        .sum()
}

pub fn rlhf_objective(logits: &Matrix, reward: &Matrix, reference: &Matrix, prompts: &PromptSpace, beta: f64) -> f64 {
    let p = softmax(logits);
    let mut er = 0.0;
    for x in 0..p.rows() {
        for y in 0..p.cols() {
            er += prompts.weight(x) * p.get(x, y) * reward.get(x, y);
        }
    }
    -er + beta * kl(&p, reference, prompts)
}

/// Online DPO with the rejected law frozen at `frozen`.
pub fn online_dpo_frozen(
    logits: &Matrix,
    frozen: &Matrix,
    reference: &Matrix,
    chosen: &Matrix,
    prompts: &PromptSpace,
    beta: f64,
) -> f64 {
    let p = softmax(logits);
    let mut total = 0.0;
    for x in 0..p.rows() {
        for w in 0..p.cols() {
            for l in 0..p.cols() {
                if w == l {
                    continue;
                }
                let m = beta
                    * ((p.get(x, w) / reference.get(x, w)).ln() - (p.get(x, l) / reference.get(x, l)).ln());
                total -= prompts.weight(x) * chosen.get(x, w) * frozen.get(x, l) * sigma(m).ln();
            }
        }
    }
    total
}

/// Central differences of `f` over every logit.
pub fn fd_gradient(logits: &Matrix, h: f64, f: impl Fn(&Matrix) -> f64) -> Matrix {
    let mut g = Matrix::zeros(logits.rows(), logits.cols());
    for x in 0..logits.rows() {
        for y in 0..logits.cols() {
            let mut plus = logits.clone();
            plus.add_at(x, y, h);
            let mut minus = logits.clone();
            minus.add_at(x, y, -h);
            g.set(x, y, (f(&plus) - f(&minus)) / (2.0 * h));
        }
    }
    g
}

/// `‖a − b‖₂ / ‖b‖₂`.
pub fn rel_l2(a: &Matrix, b: &Matrix) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(u, v)| (u - v) * (u - v)).sum();
    let norm: f64 = b.data().iter().map(|v| v * v).sum();
    (diff / norm.max(1e-300)).sqrt()
}

pub fn max_tv(a: &Matrix, b: &Matrix) -> f64 {
    (0..a.rows())
        .map(|x| 0.5 * a.row(x).iter().zip(b.row(x)).map(|(u, v)| (u - v).abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `π_ref (π_w/π_l)^{1/β}`, normalized per prompt, computed in log space.
pub fn dpo_closed_form(reference: &Matrix, chosen: &Matrix, rejected: &Matrix, beta: f64) -> Matrix {
    let logits = Matrix::from_fn(reference.rows(), reference.cols(), |x, y| {
        reference.get(x, y).ln() + (chosen.get(x, y).ln() - rejected.get(x, y).ln()) / beta
    });
    softmax(&logits)
}

/// `π_ref exp(r/β)`, normalized per prompt.
pub fn rlhf_closed_form(reference: &Matrix, reward: &Matrix, beta: f64) -> Matrix {
    let logits = Matrix::from_fn(reference.rows(), reference.cols(), |x, y| {
        reference.get(x, y).ln() + reward.get(x, y) / beta
    });
    softmax(&logits)
}

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    // f(lo) < 0 < f(hi)
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Minimizer of `−Σ π* ln π + κ KL(π‖π_ref)` for one prompt, from the
/// stationarity condition `π_y (1 + κ (ln(π_y/ref_y) − c)) = π*_y` where
/// `c = 𝔼_π ln(π/ref)`. For fixed `c` each `π_y` solves a scalar monotone
/// equation; `c` is then chosen so the row sums to one.
pub fn sft_kl_minimizer_row(target: &[f64], reference: &[f64], kappa: f64) -> Vec<f64> {
    let row_for = |c: f64| -> Vec<f64> {
        target
            .iter()
            .zip(reference)
            .map(|(&t, &r)| {
                let g = |p: f64| p * (1.0 + kappa * ((p / r).ln() - c)) - t;
                // g is increasing above this point and negative below it
                let lo = r * (c - 1.0 / kappa - 1.0).exp();
                let mut hi = lo.max(1e-300) * 2.0;
                while g(hi) < 0.0 {
                    hi *= 2.0;
                }
                bisect(lo, hi, g)
            })
            .collect()
    };
    let mass = |c: f64| row_for(c).iter().sum::<f64>() - 1.0;
    let (mut lo, mut hi) = (-1.0, 1.0);
    while mass(lo) > 0.0 {
        lo *= 2.0;
    }
    while mass(hi) < 0.0 {
        hi *= 2.0;
    }
    row_for(bisect(lo, hi, mass))
}

pub fn sft_kl_minimizer(target: &Matrix, reference: &Matrix, kappa: f64) -> Matrix {
    let rows = (0..target.rows())
        .map(|x| sft_kl_minimizer_row(target.row(x), reference.row(x), kappa))
        .collect();
    Matrix::from_rows(rows).unwrap()
}

pub fn reward_table(m: Matrix) -> RewardTable {
    RewardTable::new(m).unwrap()
}

/// Population DPO loss as a function of the relative logit `f`, for pairs
/// drawn from `density[x](a, b)` with prompt weights `pw` and labels from
/// the preference tables `truth`.
pub fn population_loss(f: &Matrix, pw: &[f64], density: &[Matrix], truth: &[Matrix], beta: f64) -> f64 {
    let mut total = 0.0;
    for x in 0..f.rows() {
        for a in 0..f.cols() {
            for b in 0..f.cols() {
                let p = density[x].get(a, b);
                if p == 0.0 || a == b {
                    continue;
                }
                let d = beta * (f.get(x, a) - f.get(x, b));
                let pab = truth[x].get(a, b);
                total -= pw[x] * p * (pab * sigma(d).ln() + (1.0 - pab) * sigma(-d).ln());
            }
        }
    }
    total
}

/// Closed-form derivative of [`population_loss`] in `f`.
pub fn population_derivative(f: &Matrix, pw: &[f64], density: &[Matrix], truth: &[Matrix], beta: f64) -> Matrix {
    Matrix::from_fn(f.rows(), f.cols(), |x, y| {
        let mut acc = 0.0;
        for b in 0..f.cols() {
            if b == y {
                continue;
            }
            let q = density[x].get(y, b) + density[x].get(b, y);
            acc += q * (sigma(beta * (f.get(x, y) - f.get(x, b))) - truth[x].get(y, b));
        }
        pw[x] * beta * acc
    })
}

/// Pair-mass-weighted average of `P(y ≻ ·) − σ(β(f_y − f_·))`; 0 on cells
/// without pair mass.
pub fn averaged_residual(f: &Matrix, density: &[Matrix], truth: &[Matrix], beta: f64) -> Matrix {
    Matrix::from_fn(f.rows(), f.cols(), |x, y| {
        let (mut acc, mut tot) = (0.0, 0.0);
        for b in 0..f.cols() {
            if b == y {
                continue;
            }
            let q = density[x].get(y, b) + density[x].get(b, y);
            acc += q * (truth[x].get(y, b) - sigma(beta * (f.get(x, y) - f.get(x, b))));
            tot += q;
        }
        if tot > 0.0 {
            acc / tot
        } else {
            0.0
        }
    })
}

/// Per-prompt DPO loss of one probability row against `data`.
pub fn prompt_loss(row: &[f64], ref_row: &[f64], data: &PreferencePairSet, x: usize, beta: f64) -> f64 {
    data.items()
        .iter()
        .filter(|it| it.prompt == x)
        .map(|it| {
            let m = beta
                * ((row[it.chosen] / ref_row[it.chosen]).ln() - (row[it.rejected] / ref_row[it.rejected]).ln());
            -it.weight * sigma(m).ln()
        })
        .sum()
}

/// Largest per-prompt loss decrease any point of the interior simplex grid
/// with the given resolution achieves over `candidate` (three responses).
pub fn simplex_grid_gain(candidate: &Matrix, reference: &Matrix, data: &PreferencePairSet, beta: f64, steps: usize) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for x in 0..candidate.rows() {
        let base = prompt_loss(candidate.row(x), reference.row(x), data, x, beta);
        let mut best = f64::INFINITY;
        for i in 1..steps {
            for j in 1..steps - i {
                let row = [i as f64, j as f64, (steps - i - j) as f64].map(|v| v / steps as f64);
                best = best.min(prompt_loss(&row, reference.row(x), data, x, beta));
            }
        }
        worst = worst.max(base - best);
    }
    worst
}

/// Random unlabeled pair law with one absent response per prompt and some
/// zeroed ordered pairs.
pub fn sparse_density(r: &mut TestRng, n: usize, m: usize) -> Vec<Matrix> {
    (0..n)
        .map(|_| {
            let absent = r.random_range(0..m);
            let mut p = Matrix::from_fn(m, m, |a, b| {
                if a == b || a == absent || b == absent || r.random::<f64>() < 0.3 {
                    0.0
                } else {
                    r.random::<f64>()
                }
            });
            let s = p.sum();
            p.data_mut().iter_mut().for_each(|v| *v /= s);
            p
        })
        .collect()
}

/// Antisymmetric random preference tables; generally not Bradley-Terry.
pub fn random_tables(r: &mut TestRng, n: usize, m: usize) -> Vec<Matrix> {
    (0..n)
        .map(|_| {
            let mut t = Matrix::filled(m, m, 0.5);
            for a in 0..m {
                for b in a + 1..m {
                    let p = r.random_range(0.05..0.95);
                    t.set(a, b, p);
                    t.set(b, a, 1.0 - p);
                }
            }
            t
        })
        .collect()
}
