//! Small numerically careful scalar helpers.

/// Logistic function, evaluated without overflow for large `|x|`.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Share `wins / total` computed so that the two complementary shares of the
/// same total always add up to exactly one: the smaller share is divided
/// directly and the larger one is taken as its complement.
#[inline]
pub fn complementary_share(wins: u64, total: u64) -> f64 {
    debug_assert!(wins <= total && total > 0);
    if 2 * wins <= total {
        wins as f64 / total as f64
    } else {
        1.0 - (total - wins) as f64 / total as f64
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_is_symmetric_and_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(sigmoid(800.0), 1.0);
        assert_eq!(sigmoid(-800.0), 0.0);
        for x in [0.1, 1.0, 5.0, 30.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn log_sigmoid_matches_naive() {
        for x in [-20.0, -2.0, 0.0, 0.5, 3.0, 20.0] {
            assert!((log_sigmoid(x) - sigmoid(x).ln()).abs() < 1e-12);
        }
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
    }

    #[test]
    fn complementary_shares_sum_to_one() {
        for total in 1..60u64 {
            for wins in 0..=total {
                let sum = complementary_share(wins, total) + complementary_share(total - wins, total);
                assert_eq!(sum, 1.0, "{wins}/{total}");
            }
        }
    }
}
