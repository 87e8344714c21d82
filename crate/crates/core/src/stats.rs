//! Two-sample significance tests used to compare account groups.

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("group {group} has {n} values, need at least {min}")]
    TooFewValues { group: char, n: usize, min: usize },
    #[error("group {group}: {count} successes out of {trials} trials is invalid")]
    BadProportion { group: char, count: u64, trials: u64 },
}

/// Difference of group statistics (A minus B) and its two-sided p-value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestResult {
    pub difference: f64,
    pub statistic: f64,
    pub p_value: f64,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch's unequal-variance t-test on the means of `a` and `b`.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<TestResult, StatsError> {
    for (group, xs) in [('A', a), ('B', b)] {
        if xs.len() < 2 {
            return Err(StatsError::TooFewValues {
                group,
                n: xs.len(),
                min: 2,
            });
        }
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let difference = ma - mb;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if se2 == 0.0 {
        let p_value = if difference == 0.0 { 1.0 } else { 0.0 };
        let statistic = if difference == 0.0 { 0.0 } else { difference.signum() * f64::INFINITY };
        return Ok(TestResult { difference, statistic, p_value });
    }
    let t = difference / se2.sqrt();
    if t == 0.0 {
        return Ok(TestResult { difference, statistic: 0.0, p_value: 1.0 });
    }
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    let p_value = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TestResult { difference, statistic: t, p_value })
}

/// Pooled two-proportion z-test for `xa/na` versus `xb/nb`.
pub fn two_proportion_z_test(xa: u64, na: u64, xb: u64, nb: u64) -> Result<TestResult, StatsError> {
    for (group, x, n) in [('A', xa, na), ('B', xb, nb)] {
        if n == 0 || x > n {
            return Err(StatsError::BadProportion { group, count: x, trials: n });
        }
    }
    let (pa, pb) = (xa as f64 / na as f64, xb as f64 / nb as f64);
    let difference = pa - pb;
    let pooled = (xa + xb) as f64 / (na + nb) as f64;
    let se = (pooled * (1.0 - pooled) * (1.0 / na as f64 + 1.0 / nb as f64)).sqrt();
    if difference == 0.0 {
        return Ok(TestResult { difference, statistic: 0.0, p_value: 1.0 });
    }
    if se == 0.0 {
        return Ok(TestResult {
            difference,
            statistic: difference.signum() * f64::INFINITY,
            p_value: 0.0,
        });
    }
    let z = difference / se;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(TestResult {
        difference,
        statistic: z,
        p_value: (2.0 * normal.sf(z.abs())).min(1.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_groups() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let r = welch_t_test(&a, &a).unwrap();
        assert_eq!((r.difference, r.p_value), (0.0, 1.0));
        let r = two_proportion_z_test(10, 100, 10, 100).unwrap();
        assert_eq!((r.difference, r.p_value), (0.0, 1.0));
    }

    #[test]
    fn constant_groups() {
        let r = welch_t_test(&[2.0, 2.0], &[2.0, 2.0, 2.0]).unwrap();
        assert_eq!(r.p_value, 1.0);
        let r = welch_t_test(&[1.0, 1.0], &[2.0, 2.0]).unwrap();
        assert_eq!(r.p_value, 0.0);
    }

    #[test]
    fn too_small_groups_rejected() {
        assert!(welch_t_test(&[1.0], &[1.0, 2.0]).is_err());
        assert!(two_proportion_z_test(1, 0, 1, 2).is_err());
        assert!(two_proportion_z_test(3, 2, 1, 2).is_err());
    }

    #[test]
    fn known_welch_value() {
        // Reference values from scipy.stats.ttest_ind(equal_var=False).
        let a = [19.8, 20.4, 19.6, 17.8, 18.5, 18.9, 18.3, 18.9, 19.5, 22.0];
        let b = [28.2, 26.6, 20.1, 23.3, 25.2, 22.1, 17.7, 27.6, 20.6, 13.7];
        let r = welch_t_test(&a, &b).unwrap();
        assert!((r.statistic - (-2.074_014_626_678_365)).abs() < 1e-9, "t = {}", r.statistic);
        assert!((r.p_value - 0.064_279_997_724_584_66).abs() < 1e-9, "p = {}", r.p_value);
    }

    #[test]
    fn separated_groups_agree_with_permutation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a: Vec<f64> = (0..50).map(|_| rng.random_range(-1e-3..1e-3)).collect();
        let b: Vec<f64> = (0..50).map(|_| 1.0 + rng.random_range(-1e-3..1e-3)).collect();
        let r = welch_t_test(&a, &b).unwrap();
        assert!(r.p_value < 1e-6);

        // Permutation oracle: shuffled labels essentially never reach the observed gap.
        let observed = r.difference.abs();
        let mut pooled: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
        let shuffles = 100_000;
        let mut extreme = 0usize;
        for _ in 0..shuffles {
            pooled.shuffle(&mut rng);
            let ma = pooled[..50].iter().sum::<f64>() / 50.0;
            let mb = pooled[50..].iter().sum::<f64>() / 50.0;
            if (ma - mb).abs() >= observed {
                extreme += 1;
            }
        }
        let perm_p = (extreme + 1) as f64 / (shuffles + 1) as f64;
        assert_eq!(extreme, 0);
        assert!(r.p_value <= perm_p);
    }

    #[test]
    fn proportion_gap_detected() {
        let r = two_proportion_z_test(100, 1000, 10, 1000).unwrap();
        assert!(r.p_value < 1e-6);
        assert!(r.difference > 0.0);
    }
}
