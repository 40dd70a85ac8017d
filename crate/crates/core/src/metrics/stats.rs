use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectSize {
    VerySmall,
    Small,
    Medium,
    Large,
}

impl EffectSize {
    /// Classified on `|d|`: < 0.2, < 0.5, < 0.8, otherwise large.
    pub fn classify(d: f64) -> Self {
        match d.abs() {
            a if a < 0.2 => EffectSize::VerySmall,
            a if a < 0.5 => EffectSize::Small,
            a if a < 0.8 => EffectSize::Medium,
            _ => EffectSize::Large,
        }
    }
}

/// `(M2 - M1) / sqrt((SD1^2 + SD2^2) / 2)`.
pub fn cohens_d(mean1: f64, sd1: f64, mean2: f64, sd2: f64) -> Result<f64> {
    if sd1 < 0.0 || sd2 < 0.0 || !sd1.is_finite() || !sd2.is_finite() {
        return Err(Error::Metric(format!("invalid standard deviations {sd1}, {sd2}")));
    }
    if sd1 == 0.0 && sd2 == 0.0 {
        return Err(Error::Metric("effect size undefined when both sds are 0".into()));
    }
    Ok((mean2 - mean1) / ((sd1 * sd1 + sd2 * sd2) / 2.0).sqrt())
}

pub fn bonferroni_alpha(alpha: f64, comparisons: usize) -> Result<f64> {
    if comparisons == 0 || !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Metric(format!("alpha {alpha} over {comparisons} comparisons")));
    }
    Ok(alpha / comparisons as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTTest {
    pub mean_diff: f64,
    pub t: f64,
    pub df: usize,
    pub p: f64,
    pub alpha: f64,
    pub comparisons: usize,
    pub alpha_adjusted: f64,
    pub significant: bool,
}

/// Two-sided paired t-test on `b - a`.
pub fn paired_t_test(a: &[f64], b: &[f64], alpha: f64, comparisons: usize) -> Result<PairedTTest> {
    if a.len() != b.len() {
        return Err(Error::Metric(format!(
            "paired samples of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Metric(format!("paired t-test needs n >= 2, got {n}")));
    }
    let alpha_adjusted = bonferroni_alpha(alpha, comparisons)?;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    let (t, p) = if var == 0.0 {
        if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY.copysign(mean), 0.0)
        }
    } else {
        let t = mean / (var.sqrt() / (n as f64).sqrt());
        let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::Metric(e.to_string()))?;
        (t, (2.0 * dist.cdf(-t.abs())).min(1.0))
    };
    Ok(PairedTTest {
        mean_diff: mean,
        t,
        df,
        p,
        alpha,
        comparisons,
        alpha_adjusted,
        significant: p < alpha_adjusted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Two-sided tail mass of Student's t by composite Simpson integration
    /// of the density over `[0, |t|]`.
    fn simpson_two_sided_p(t: f64, df: f64) -> f64 {
        let ln_c = ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0) - 0.5 * (df * std::f64::consts::PI).ln();
        let pdf = |x: f64| (ln_c - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
        let n = 20_000;
        let h = t.abs() / n as f64;
        let mut s = pdf(0.0) + pdf(t.abs());
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(i as f64 * h);
        }
        1.0 - 2.0 * s * h / 3.0
    }

    fn ln_gamma(x: f64) -> f64 {
        // Lanczos, g = 7
        const C: [f64; 9] = [
            0.999_999_999_999_809_9,
            676.520_368_121_885_1,
            -1_259.139_216_722_402_8,
            771.323_428_777_653_1,
            -176.615_029_162_140_6,
            12.507_343_278_686_905,
            -0.138_571_095_265_720_12,
            9.984_369_578_019_572e-6,
            1.505_632_735_149_311_6e-7,
        ];
        let x = x - 1.0;
        let mut a = C[0];
        let t = x + 7.5;
        for (i, c) in C.iter().enumerate().skip(1) {
            a += c / (x + i as f64);
        }
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
    }

    #[test]
    fn worked_example_against_integration() {
        let r = paired_t_test(&[1.0, 2.0, 3.0, 4.0], &[2.0, 3.0, 4.0, 6.0], 0.05, 1).unwrap();
        assert!((r.mean_diff - 1.25).abs() < 1e-12);
        assert!((r.t - 5.0).abs() < 1e-12);
        assert_eq!(r.df, 3);
        let oracle = simpson_two_sided_p(5.0, 3.0);
        assert!((r.p - oracle).abs() < 1e-8, "{} vs {oracle}", r.p);
        assert!((r.p - 0.0154).abs() < 5e-4);
        assert!(r.significant);
    }

    #[test]
    fn identical_samples() {
        let r = paired_t_test(&[0.3, 0.5, 0.9], &[0.3, 0.5, 0.9], 0.05, 3).unwrap();
        assert_eq!((r.t, r.p), (0.0, 1.0));
        assert!(paired_t_test(&[1.0], &[2.0], 0.05, 1).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[2.0], 0.05, 1).is_err());
    }

    #[test]
    fn paper_effect_sizes() {
        assert!((cohens_d(0.7691, 0.17, 0.7966, 0.14).unwrap() - 0.177).abs() < 0.002);
        assert!((cohens_d(0.7691, 0.17, 0.7744, 0.17).unwrap() - 0.031).abs() < 0.002);
        assert_eq!(cohens_d(0.5, 0.1, 0.5, 0.2).unwrap(), 0.0);
        assert!(cohens_d(0.5, 0.0, 0.6, 0.0).is_err());
        assert_eq!(EffectSize::classify(0.177), EffectSize::VerySmall);
        assert_eq!(EffectSize::classify(0.5), EffectSize::Medium);
        assert_eq!(EffectSize::classify(-0.9), EffectSize::Large);
    }

    #[test]
    fn bonferroni_values() {
        assert_eq!(bonferroni_alpha(0.05, 5).unwrap(), 0.01);
        assert_eq!(bonferroni_alpha(0.05, 7).unwrap(), 0.05 / 7.0);
        assert_eq!(bonferroni_alpha(0.05, 1).unwrap(), 0.05);
        assert!(bonferroni_alpha(0.05, 0).is_err());
    }

    proptest! {
        #[test]
        fn d_antisymmetric(m1 in -1.0f64..1.0, s1 in 0.01f64..1.0, m2 in -1.0f64..1.0, s2 in 0.01f64..1.0) {
            prop_assert_eq!(cohens_d(m1, s1, m2, s2).unwrap(), -cohens_d(m2, s2, m1, s1).unwrap());
        }

        #[test]
        fn swap_negates_t(a in proptest::collection::vec(0.0f64..1.0, 3..12), shift in proptest::collection::vec(-0.2f64..0.3, 12)) {
            let b: Vec<f64> = a.iter().zip(&shift).map(|(x, s)| x + s).collect();
            let ab = paired_t_test(&a, &b, 0.05, 2).unwrap();
            let ba = paired_t_test(&b, &a, 0.05, 2).unwrap();
            prop_assert!((ab.t + ba.t).abs() < 1e-9 * (1.0 + ab.t.abs()));
            prop_assert!((ab.p - ba.p).abs() < 1e-12);
        }
    }
}
