//! Scalar and per-row numerics shared by every module.

/// Logistic function, evaluated on the branch that avoids overflow.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(z)`, accurate for large |z|.
#[inline]
pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Softmax with max subtraction. Entries at `-inf` map to exactly 0.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(xs);
    xs.iter().map(|&x| x - lse).collect()
}

/// Total-variation distance `½ Σ |p − q|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1 denominator); 0 for fewer than two values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_by<T>(items: &[T], key: impl Fn(&T) -> f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, item) in items.iter().enumerate() {
        let k = key(item);
        match best {
            Some((_, b)) if k <= b => {}
            _ => best = Some((i, k)),
        }
    }
    best.map(|(i, _)| i)
}

/// Index of the smallest value; ties go to the lowest index.
pub fn argmin_by<T>(items: &[T], key: impl Fn(&T) -> f64) -> Option<usize> {
    argmax_by(items, |t| -key(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sigmoid_of_ln3_is_three_quarters() {
        assert_relative_eq!(sigmoid(3f64.ln()), 0.75, epsilon = 1e-15);
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn sigmoid_is_complementary() {
        for &z in &[-40.0, -3.2, -1e-9, 0.0, 0.7, 12.0, 700.0] {
            assert!((sigmoid(z) + sigmoid(-z) - 1.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn log_sigmoid_matches_naive_in_safe_range() {
        for &z in &[-5.0, -0.3, 0.0, 0.4, 6.0] {
            assert_relative_eq!(log_sigmoid(z), sigmoid(z).ln(), epsilon = 1e-14);
        }
        assert!(log_sigmoid(-800.0).is_finite());
        assert_eq!(log_sigmoid(800.0), 0.0);
    }

    #[test]
    fn softmax_handles_large_logits() {
        // 1000 + ln 2 is only representable to ~1e-13
        let p = softmax(&[1000.0, 1000.0 + 2f64.ln()]);
        assert_relative_eq!(p[0], 1.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(p[1], 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn argmax_ties_to_lowest_index() {
        assert_eq!(argmax_by(&[1.0, 3.0, 3.0], |&x| x), Some(1));
        assert_eq!(argmin_by(&[2.0, 1.0, 1.0], |&x| x), Some(1));
        assert_eq!(argmax_by::<f64>(&[], |&x| x), None);
    }
}
