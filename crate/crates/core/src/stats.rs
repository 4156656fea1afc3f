//! Proportion of variance explained, t-tests with exact Student-t p-values,
//! Benjamini-Hochberg-Yekutieli FDR control, and Pearson correlation.
//! Pure functions, safe under arbitrary parallel invocation.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StatsError {
    #[error("variance must be positive, got {0}")]
    ZeroVariance(f64),
    #[error("degenerate sample: {0}")]
    Degenerate(String),
    #[error("p-value out of [0,1]: {0}")]
    BadPValue(f64),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

pub type Result<T> = std::result::Result<T, StatsError>;

/// 1 - mse/variance; negative means worse than the mean predictor.
pub fn pove(mse: f64, variance: f64) -> Result<f64> {
    if variance <= 0.0 {
        return Err(StatsError::ZeroVariance(variance));
    }
    Ok(1.0 - mse / variance)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tail {
    TwoSided,
    Less,
    Greater,
}

/// ln Gamma via the Lanczos approximation (g = 7, n = 9).
fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
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
    if x < 0.5 {
        // reflection
        return std::f64::consts::PI.ln() - (std::f64::consts::PI * x).sin().ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (Lentz's method).
fn betacf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 3e-16;
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

/// Regularized incomplete beta I_x(a, b).
fn betai(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let bt = (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        bt * betacf(a, b, x) / a
    } else {
        1.0 - bt * betacf(b, a, 1.0 - x) / b
    }
}

/// P(T_df > t) for the Student t distribution.
fn student_t_sf(t: f64, df: f64) -> f64 {
    let p_two = betai(df / 2.0, 0.5, df / (df + t * t));
    if t >= 0.0 {
        p_two / 2.0
    } else {
        1.0 - p_two / 2.0
    }
}

/// p-value of a t statistic under the Student t distribution.
pub fn student_t_pvalue(t: f64, df: f64, tail: Tail) -> f64 {
    match tail {
        Tail::TwoSided => betai(df / 2.0, 0.5, df / (df + t * t)),
        Tail::Greater => student_t_sf(t, df),
        Tail::Less => 1.0 - student_t_sf(t, df),
    }
}

fn mean_and_sample_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One-sample t-test of mean against mu0: t = (mean - mu0)/(s/sqrt(n)),
/// p from Student-t with n-1 degrees of freedom.
pub fn one_sample_ttest_tailed(values: &[f64], mu0: f64, tail: Tail) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(StatsError::Degenerate(format!("n = {} < 2", values.len())));
    }
    let (mean, std) = mean_and_sample_std(values);
    if std == 0.0 {
        return Err(StatsError::Degenerate("zero sample standard deviation".into()));
    }
    let n = values.len() as f64;
    let t = (mean - mu0) / (std / n.sqrt());
    Ok((t, student_t_pvalue(t, n - 1.0, tail)))
}

pub fn one_sample_ttest(values: &[f64], mu0: f64) -> Result<(f64, f64)> {
    one_sample_ttest_tailed(values, mu0, Tail::TwoSided)
}

/// Values aligned per run index; paired by construction.
#[derive(Clone, Debug)]
pub struct PairedSample {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl PairedSample {
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != b.len() {
            return Err(StatsError::LengthMismatch(a.len(), b.len()));
        }
        Ok(PairedSample { a, b })
    }

    pub fn differences(&self) -> Vec<f64> {
        self.a.iter().zip(&self.b).map(|(x, y)| x - y).collect()
    }
}

/// Outcome of a paired comparison. Zero-variance differences cannot support
/// a t statistic; a constant nonzero difference is reported as a flag.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum PairedOutcome {
    Test { t: f64, p: f64 },
    DeterministicallyDifferent { mean_diff: f64 },
}

/// Paired t-test: the one-sample test applied to the per-run differences.
pub fn paired_ttest_tailed(sample: &PairedSample, tail: Tail) -> Result<PairedOutcome> {
    let diffs = sample.differences();
    if diffs.len() < 2 {
        return Err(StatsError::Degenerate(format!("n = {} < 2", diffs.len())));
    }
    let all_same = diffs.windows(2).all(|w| w[0] == w[1]);
    if all_same {
        if diffs[0] == 0.0 {
            return Err(StatsError::Degenerate("samples are identical".into()));
        }
        return Ok(PairedOutcome::DeterministicallyDifferent { mean_diff: diffs[0] });
    }
    let (t, p) = one_sample_ttest_tailed(&diffs, 0.0, tail)?;
    Ok(PairedOutcome::Test { t, p })
}

pub fn paired_ttest(sample: &PairedSample) -> Result<PairedOutcome> {
    paired_ttest_tailed(sample, Tail::TwoSided)
}

/// Benjamini-Hochberg-Yekutieli step-up procedure, valid under arbitrary
/// dependence: reject the k smallest p-values where k is the largest i with
/// p_(i) <= i*q / (m * c(m)), c(m) the m-th harmonic number. Returns
/// rejection flags in input order.
pub fn bhy_adjust(pvalues: &[f64], q: f64) -> Result<Vec<bool>> {
    for &p in pvalues {
        if !(0.0..=1.0).contains(&p) || p.is_nan() {
            return Err(StatsError::BadPValue(p));
        }
    }
    let m = pvalues.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    let c_m: f64 = (1..=m).map(|i| 1.0 / i as f64).sum();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| pvalues[i].partial_cmp(&pvalues[j]).unwrap());
    let mut k = 0;
    for (rank, &idx) in order.iter().enumerate() {
        let i = rank + 1;
        if pvalues[idx] <= i as f64 * q / (m as f64 * c_m) {
            k = i;
        }
    }
    let mut reject = vec![false; m];
    for &idx in order.iter().take(k) {
        reject[idx] = true;
    }
    Ok(reject)
}

/// Sample Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(StatsError::Degenerate(format!("n = {} < 2", x.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::Degenerate("zero standard deviation".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}
