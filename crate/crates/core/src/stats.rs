// SPDX-License-Identifier: MIT OR Apache-2.0

//! Summary statistics and Welch's unequal-variance t-test.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

/// Direction of the alternative hypothesis, stated for `a` relative to `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    /// mean(a) > mean(b)
    Greater,
    /// mean(a) < mean(b)
    Less,
    TwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for a single value.
    pub sd: f64,
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sum_sq_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum()
}

/// Sample variance; 0 for fewer than two values.
pub fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    sum_sq_dev(xs) / (xs.len() - 1) as f64
}

pub fn population_sd(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    (sum_sq_dev(xs) / xs.len() as f64).sqrt()
}

pub fn summarize(xs: &[f64]) -> Summary {
    Summary {
        n: xs.len(),
        mean: mean(xs),
        sd: sample_variance(xs).sqrt(),
    }
}

/// CDF of Student's t with `df` degrees of freedom, through the regularized
/// incomplete beta function.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return if t > 0.0 { 1.0 } else { 0.0 };
    }
    let x = df / (df + t * t);
    let tail = 0.5 * beta_reg(df / 2.0, 0.5, x);
    if t > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Upper tail `P(T >= t)`, computed without cancellation for large `t`.
fn student_t_sf(t: f64, df: f64) -> f64 {
    student_t_cdf(-t, df)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub a: Summary,
    pub b: Summary,
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
    pub alternative: Alternative,
}

/// Welch's two-sample t-test. Each group needs at least two samples.
///
/// When both groups have zero variance, `t` is 0 for equal means (one-sided
/// p = 0.5, two-sided p = 1) and infinite otherwise.
pub fn welch_t_test(a: &[f64], b: &[f64], alternative: Alternative) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "Welch test needs >= 2 samples per group, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("t-test sample".into()));
    }
    let (sa, sb) = (summarize(a), summarize(b));
    let va = sample_variance(a) / a.len() as f64;
    let vb = sample_variance(b) / b.len() as f64;
    let se2 = va + vb;
    let diff = sa.mean - sb.mean;
    let (t, df) = if se2 > 0.0 {
        let df = se2 * se2 / (va * va / (a.len() - 1) as f64 + vb * vb / (b.len() - 1) as f64);
        (diff / se2.sqrt(), df)
    } else {
        let df = (a.len() + b.len() - 2) as f64;
        let t = if diff == 0.0 { 0.0 } else { diff.signum() * f64::INFINITY };
        (t, df)
    };
    let p_value = match alternative {
        Alternative::Greater => student_t_sf(t, df),
        Alternative::Less => student_t_cdf(t, df),
        Alternative::TwoSided => (2.0 * student_t_sf(t.abs(), df)).min(1.0),
    };
    Ok(WelchResult {
        a: sa,
        b: sb,
        t,
        df,
        p_value,
        alternative,
    })
}
