//! Correlations and t-tests used by the evaluation suite.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation (`n - 1` denominator); 0 for fewer than 2 values.
pub fn std_dev(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

fn paired(x: &[f64], y: &[f64], what: &str) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{what}: {} vs {} values", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::Validation(format!("{what}: need at least 2 pairs")));
    }
    Ok(())
}

/// Pearson correlation; `None` when either input is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` when either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&ranks(x), &ranks(y))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub statistic: f64,
    pub dof: f64,
    /// Two-sided.
    pub p_value: f64,
}

fn two_sided(t: f64, dof: f64) -> Result<f64> {
    if t.is_infinite() {
        return Ok(0.0);
    }
    let dist = StudentsT::new(0.0, 1.0, dof).map_err(|e| Error::Validation(e.to_string()))?;
    Ok((2.0 * dist.cdf(-t.abs())).min(1.0))
}

/// Dependent-samples t-test on `x - y`.
pub fn paired_t_test(x: &[f64], y: &[f64]) -> Result<TTest> {
    paired(x, y, "paired t-test")?;
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let n = d.len() as f64;
    let (m, s) = (mean(&d), std_dev(&d));
    if s == 0.0 {
        if m == 0.0 {
            return Err(Error::Validation("paired t-test: all differences are zero".into()));
        }
        return Ok(TTest {
            statistic: m.signum() * f64::INFINITY,
            dof: n - 1.0,
            p_value: 0.0,
        });
    }
    let t = m / (s / n.sqrt());
    Ok(TTest {
        statistic: t,
        dof: n - 1.0,
        p_value: two_sided(t, n - 1.0)?,
    })
}

/// Welch's unequal-variance two-sample t-test.
pub fn welch_t_test(x: &[f64], y: &[f64]) -> Result<TTest> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::Validation("two-sample t-test: need at least 2 values per group".into()));
    }
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    let (vx, vy) = (std_dev(x).powi(2) / nx, std_dev(y).powi(2) / ny);
    let se = (vx + vy).sqrt();
    let diff = mean(x) - mean(y);
    if se == 0.0 {
        if diff == 0.0 {
            return Err(Error::Validation("two-sample t-test: both groups constant and equal".into()));
        }
        return Ok(TTest {
            statistic: diff.signum() * f64::INFINITY,
            dof: nx + ny - 2.0,
            p_value: 0.0,
        });
    }
    let dof = (vx + vy).powi(2) / (vx * vx / (nx - 1.0) + vy * vy / (ny - 1.0));
    let t = diff / se;
    Ok(TTest {
        statistic: t,
        dof,
        p_value: two_sided(t, dof)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn correlation_values() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [2.0, 1.0, 4.0, 3.0, 5.0];
        assert!((pearson(&x, &y).unwrap() - 0.8).abs() < 1e-12);
        assert!((spearman(&x, &[1.0, 4.0, 9.0, 16.0, 25.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(pearson(&x, &[1.0; 5]).is_none());
    }

    // reference values from scipy.stats.ttest_rel / ttest_ind(equal_var=False)
    #[test]
    fn t_tests_match_reference() {
        let a = [5.1, 4.9, 5.6, 5.8, 6.0, 5.3];
        let b = [4.8, 4.7, 5.1, 5.9, 5.2, 5.0];
        let p = paired_t_test(&a, &b).unwrap();
        assert!((p.statistic - PAIRED_T).abs() < 1e-9);
        assert!((p.p_value - PAIRED_P).abs() < 1e-7);
        let w = welch_t_test(&a, &[4.0, 4.4, 4.1, 4.9]).unwrap();
        assert!((w.statistic - WELCH_T).abs() < 1e-9);
        assert!((w.p_value - WELCH_P).abs() < 1e-7);
    }

    const PAIRED_T: f64 = 2.711_630_722_733_2;
    const PAIRED_P: f64 = 0.042_193_996_705_524_5;
    const WELCH_T: f64 = 4.137_951_366_248_03;
    const WELCH_P: f64 = 0.004_635_828_107_111_362;

    proptest! {
        #[test]
        fn correlations_bounded(v in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..30)) {
            let (x, y): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            if let Some(r) = pearson(&x, &y) {
                prop_assert!((-1.0..=1.0).contains(&r));
            }
            if let Some(r) = spearman(&x, &y) {
                prop_assert!((-1.0..=1.0).contains(&r));
            }
        }
    }
}
