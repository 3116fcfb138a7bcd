//! Paired two-tailed t-test and Bonferroni correction.
//!
//! The t distribution tail uses the regularized incomplete beta function
//! `P(|T| > t) = I_{ν/(ν+t²)}(ν/2, 1/2)`, evaluated by a modified Lentz
//! continued fraction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative spread of the differences, against the input magnitude, below
/// which the test is reported as degenerate.
pub const ZERO_VARIANCE_RTOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("paired samples differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("all {n} paired differences equal {mean_diff}; t statistic undefined")]
    ZeroVariance { n: usize, mean_diff: f64 },
    #[error("non-finite input value")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub comparison_id: String,
    pub t_stat: f64,
    pub df: u64,
    pub p_two_tailed: f64,
    pub p_adjusted: f64,
    pub n_pairs: usize,
    /// Mean of `x - y`.
    pub mean_diff: f64,
}

impl TestResult {
    pub fn with_bonferroni(mut self, m: usize) -> Self {
        self.p_adjusted = bonferroni(self.p_two_tailed, m);
        self
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.comparison_id = id.into();
        self
    }
}

/// Paired t-test on `d = x - y`, df = n - 1.
pub fn paired_ttest(x: &[f64], y: &[f64]) -> Result<TestResult, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 2 {
        return Err(StatsError::TooFewPairs(n));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let ss: f64 = d.iter().map(|v| (v - mean).powi(2)).sum();
    let var = ss / (n - 1) as f64;
    // Differences that agree up to rounding of the inputs (e.g. a constant
    // shift added in floating point) count as zero variance.
    let scale = x.iter().chain(y).fold(0.0f64, |m, v| m.max(v.abs()));
    if var.sqrt() <= ZERO_VARIANCE_RTOL * scale || var == 0.0 {
        return Err(StatsError::ZeroVariance { n, mean_diff: mean });
    }
    let se = (var / n as f64).sqrt();
    let t = mean / se;
    let df = (n - 1) as u64;
    let p = student_t_two_tailed(t, df as f64);
    Ok(TestResult {
        comparison_id: String::new(),
        t_stat: t,
        df,
        p_two_tailed: p,
        p_adjusted: p,
        n_pairs: n,
        mean_diff: mean,
    })
}

/// `min(1, p·m)`.
pub fn bonferroni(p: f64, m: usize) -> f64 {
    (p * m.max(1) as f64).min(1.0)
}

/// Two-sided tail probability `P(|T| ≥ |t|)` for Student's t with `df`
/// degrees of freedom.
pub fn student_t_two_tailed(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(x, df / 2.0, 0.5).clamp(0.0, 1.0)
}

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
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
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta `I_x(a, b)` for `a, b > 0`, `0 ≤ x ≤ 1`.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // the continued fraction converges fast for x < (a+1)/(a+b+2)
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const MAX_ITER: usize = 10_000;
    const EPS: f64 = 1e-16;
    const TINY: f64 = 1e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn d_one_to_five() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [0.0; 5];
        let r = paired_ttest(&x, &y).unwrap();
        assert!((r.t_stat - 18f64.sqrt()).abs() < 1e-12);
        assert_eq!(r.df, 4);
        assert!((r.p_two_tailed - 0.013_235_6).abs() < 1e-6, "{}", r.p_two_tailed);
        assert_eq!(r.n_pairs, 5);
    }

    #[test]
    fn identical_samples_are_degenerate() {
        let x = [0.3, 0.9, 0.5];
        assert!(matches!(paired_ttest(&x, &x), Err(StatsError::ZeroVariance { n: 3, .. })));
        let a = [0.71, 0.2, 0.93, 0.55, 0.38];
        let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        match paired_ttest(&b, &a) {
            Err(StatsError::ZeroVariance { mean_diff, .. }) => assert!((mean_diff - 0.1).abs() < 1e-15),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn input_errors() {
        assert_eq!(paired_ttest(&[1.0], &[2.0]), Err(StatsError::TooFewPairs(1)));
        assert_eq!(paired_ttest(&[1.0, 2.0], &[2.0]), Err(StatsError::LengthMismatch(2, 1)));
        assert_eq!(paired_ttest(&[1.0, f64::NAN], &[2.0, 1.0]), Err(StatsError::NonFinite));
    }

    #[test]
    fn bonferroni_examples() {
        assert_eq!(bonferroni(0.01, 1), 0.01);
        assert!((bonferroni(0.01, 4) - 0.04).abs() < 1e-15);
        assert_eq!(bonferroni(0.5, 4), 1.0);
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!(ln_gamma(1.0).abs() < 1e-14);
        assert!(ln_gamma(2.0).abs() < 1e-14);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
        assert!((ln_gamma(10.0) - 362_880f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn t_tail_closed_forms() {
        // df = 1 is Cauchy: P(|T| > t) = 1 - 2 atan(t) / π
        for t in [0.1, 1.0, 3.0, 25.0] {
            let exact = 1.0 - 2.0 * f64::atan(t) / std::f64::consts::PI;
            assert!((student_t_two_tailed(t, 1.0) - exact).abs() < 1e-13);
        }
        // df = 2: P(|T| > t) = 1 - t / sqrt(2 + t²)
        for t in [0.2f64, 1.5, 7.0] {
            let exact = 1.0 - t / (2.0 + t * t).sqrt();
            assert!((student_t_two_tailed(t, 2.0) - exact).abs() < 1e-13);
        }
        assert_eq!(student_t_two_tailed(0.0, 5.0), 1.0);
    }
}
