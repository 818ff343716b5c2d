//! Paired two-sided t-test. The Student-t tail probability is evaluated via
//! the regularized incomplete beta function (Lentz continued fraction with
//! a Lanczos log-gamma), targeting absolute error below 1e-10; the test
//! suite pins it against an independent implementation.

use crate::error::{Error, Result};

/// Lanczos g=7, n=9 coefficients.
const LANCZOS: [f64; 9] = [
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
];

/// Natural log of the gamma function.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection: Γ(x) Γ(1-x) = π / sin(πx)
        let pi = std::f64::consts::PI;
        pi.ln() - (pi * x).sin().abs().ln() - ln_gamma(1.0 - x)
    } else {
        let x = x - 1.0;
        let mut acc = LANCZOS[0];
        for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
            acc += c / (x + i as f64);
        }
        let t = x + 7.5;
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
    }
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn betacf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const FPMIN: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
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

/// Regularized incomplete beta function I_x(a, b).
pub fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_bt = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let bt = ln_bt.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        bt * betacf(a, b, x) / a
    } else {
        1.0 - bt * betacf(b, a, 1.0 - x) / b
    }
}

/// Two-sided p-value of a Student-t statistic with `df` degrees of freedom:
/// `I_{df/(df+t^2)}(df/2, 1/2)`.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    inc_beta(df / 2.0, 0.5, df / (df + t * t))
}

/// Paired two-sided t-test on equal-length samples. Returns `(t, p)` with
/// `t = mean(d) * sqrt(n) / sd(d)` (sample standard deviation).
pub fn paired_ttest(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    let n = xs.len();
    if n < 2 {
        return Err(Error::TooFewSamples(n));
    }
    let diffs: Vec<f64> = xs.iter().zip(ys.iter()).map(|(a, b)| a - b).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
    if var <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    let t = mean * (n as f64).sqrt() / var.sqrt();
    let p = student_t_two_sided_p(t, (n - 1) as f64);
    Ok((t, p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_differences_give_t_zero_p_one() {
        let xs = [1.0, 2.0, 3.0];
        let ys = [2.0, 2.0, 2.0];
        let (t, p) = paired_ttest(&xs, &ys).unwrap();
        assert_eq!(t, 0.0);
        assert_eq!(p, 1.0);
    }

    #[test]
    fn textbook_case_differences_one_two_three() {
        // d = [1,2,3]: t = 2*sqrt(3)/1, df = 2.
        let xs = [2.0, 4.0, 6.0];
        let ys = [1.0, 2.0, 3.0];
        let (t, p) = paired_ttest(&xs, &ys).unwrap();
        assert!((t - 3.4641016151377544).abs() < 1e-12);
        // Closed form for df=2: p = 1 - t/sqrt(2 + t^2).
        let closed = 1.0 - t / (2.0 + t * t).sqrt();
        assert!((p - closed).abs() < 1e-12, "p {p} vs closed {closed}");
        assert!((p - 0.0742).abs() < 1e-3);
    }

    #[test]
    fn zero_variance_and_too_few_samples() {
        assert!(matches!(
            paired_ttest(&[2.0, 3.0, 4.0], &[1.0, 2.0, 3.0]),
            Err(Error::ZeroVariance)
        ));
        assert!(matches!(
            paired_ttest(&[1.0], &[0.0]),
            Err(Error::TooFewSamples(1))
        ));
        assert!(matches!(
            paired_ttest(&[1.0, 2.0], &[0.0]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn antisymmetry_in_t_same_p() {
        let xs = [0.3, 1.2, -0.5, 2.0, 0.9];
        let ys = [0.1, 0.7, 0.2, 1.1, 1.4];
        let (t1, p1) = paired_ttest(&xs, &ys).unwrap();
        let (t2, p2) = paired_ttest(&ys, &xs).unwrap();
        assert!((t1 + t2).abs() < 1e-12);
        assert!((p1 - p2).abs() < 1e-12);
    }

    #[test]
    fn p_values_match_statrs_within_1e10() {
        use statrs::distribution::{ContinuousCDF, StudentsT};
        for df in [1.0f64, 2.0, 3.0, 5.0, 10.0, 30.0, 100.0] {
            let dist = StudentsT::new(0.0, 1.0, df).unwrap();
            for t in [0.0f64, 0.1, 0.5, 1.0, 2.0, 3.4641, 5.0, 10.0] {
                let want = 2.0 * (1.0 - dist.cdf(t));
                let got = student_t_two_sided_p(t, df);
                assert!(
                    (got - want).abs() < 1e-10,
                    "df {df}, t {t}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn ln_gamma_spot_values() {
        assert!((ln_gamma(1.0)).abs() < 1e-12);
        assert!((ln_gamma(2.0)).abs() < 1e-12);
        assert!((ln_gamma(5.0) - 24.0f64.ln()).abs() < 1e-10);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-12);
    }
}
