//! Exact p-values for both schemes, Fisher combination and the two-sample
//! Kolmogorov-Smirnov test.
//!
//! Every tail is produced in natural-log space first; `p_value` is only the
//! exponential of it, so reports keep meaningful `log10_p` values far below
//! the `f64` underflow threshold.

mod ks;
mod special;

pub use ks::{kolmogorov_survival, ks_two_sample, ks_uniform, KsResult};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schemes::Scheme;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("sample is empty")]
    EmptySample,
}

fn domain<T>(msg: impl Into<String>) -> Result<T, StatsError> {
    Err(StatsError::Domain(msg.into()))
}

/// `ln P(S >= s)` for `S ~ Binomial(n, gamma)`.
pub fn binomial_ln_pvalue(s: u64, n: u64, gamma: f64) -> Result<f64, StatsError> {
    if s > n {
        return domain(format!("score {s} exceeds the number of trials {n}"));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return domain(format!("gamma must lie in (0, 1), got {gamma}"));
    }
    if s == 0 {
        return Ok(0.0);
    }
    Ok(special::ln_binomial_upper(s, n, gamma))
}

/// `P(S >= s)` for `S ~ Binomial(n, gamma)`, i.e. `I_gamma(s, n - s + 1)`.
pub fn binomial_pvalue(s: u64, n: u64, gamma: f64) -> Result<f64, StatsError> {
    binomial_ln_pvalue(s, n, gamma).map(f64::exp)
}

/// `ln(Gamma(n, score) / Gamma(n))`.
pub fn gamma_ln_pvalue(score: f64, n: u64) -> Result<f64, StatsError> {
    if n == 0 {
        return domain("gamma tail needs at least one observation");
    }
    if !(score >= 0.0) || !score.is_finite() {
        return domain(format!("score must be finite and non-negative, got {score}"));
    }
    if score == 0.0 {
        return Ok(0.0);
    }
    Ok(special::ln_gamma_upper(n, score))
}

/// `P(S >= score)` for `S ~ Gamma(n, 1)`.
pub fn gamma_pvalue(score: f64, n: u64) -> Result<f64, StatsError> {
    gamma_ln_pvalue(score, n).map(f64::exp)
}

/// Fisher's method on natural-log p-values: `X = -2 sum ln p_i` against a
/// chi-square with `2m` degrees of freedom, whose survival at `X` is
/// `Q(m, X / 2)`.
pub fn fisher_combine_ln(ln_ps: &[f64]) -> Result<f64, StatsError> {
    if ln_ps.is_empty() {
        return domain("nothing to combine");
    }
    if ln_ps.iter().any(|&l| l.is_nan() || l > 0.0 || l == f64::NEG_INFINITY) {
        return domain("every p-value must lie in (0, 1]");
    }
    let half_x: f64 = -ln_ps.iter().sum::<f64>();
    gamma_ln_pvalue(half_x, ln_ps.len() as u64)
}

pub fn fisher_combine(p_values: &[f64]) -> Result<f64, StatsError> {
    if p_values.iter().any(|&p| !(p > 0.0 && p <= 1.0)) {
        return domain("every p-value must lie in (0, 1]; clamp zeros to the smallest positive value first");
    }
    let ln_ps: Vec<f64> = p_values.iter().map(|p| p.ln()).collect();
    fisher_combine_ln(&ln_ps).map(f64::exp)
}

/// Outcome of one detection test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub scheme: Scheme,
    pub score: f64,
    pub n_scored: u64,
    pub p_value: f64,
    pub log10_p: f64,
}

impl TestResult {
    fn from_ln(scheme: Scheme, score: f64, n_scored: u64, ln_p: f64) -> Self {
        TestResult {
            scheme,
            score,
            n_scored,
            p_value: ln_p.exp(),
            log10_p: ln_p / std::f64::consts::LN_10,
        }
    }

    /// Greenlist test. `n = 0` yields the inconclusive `p = 1`.
    pub fn kgw(greens: u64, n: u64, gamma: f64) -> Result<Self, StatsError> {
        let ln_p = if n == 0 { 0.0 } else { binomial_ln_pvalue(greens, n, gamma)? };
        Ok(Self::from_ln(Scheme::Kgw, greens as f64, n, ln_p))
    }

    /// Exponential-minimum test. `n = 0` yields the inconclusive `p = 1`.
    pub fn aaronson(score: f64, n: u64) -> Result<Self, StatsError> {
        let ln_p = if n == 0 { 0.0 } else { gamma_ln_pvalue(score, n)? };
        Ok(Self::from_ln(Scheme::Aaronson, score, n, ln_p))
    }

    /// Test of an accumulated score for `scheme`; `gamma` is required for
    /// the greenlist scheme.
    pub fn for_scheme(
        scheme: Scheme,
        score: f64,
        n: u64,
        gamma: Option<f64>,
    ) -> Result<Self, StatsError> {
        match scheme {
            Scheme::Kgw => {
                let gamma = gamma.ok_or_else(|| StatsError::Domain("missing gamma".into()))?;
                if score.fract() != 0.0 || score < 0.0 {
                    return domain(format!("greenlist score must be a count, got {score}"));
                }
                Self::kgw(score as u64, n, gamma)
            }
            Scheme::Aaronson => Self::aaronson(score, n),
            Scheme::Mpac => domain("the multi-bit scheme has no zero-bit p-value"),
        }
    }

    pub fn ln_p(&self) -> f64 {
        self.log10_p * std::f64::consts::LN_10
    }
}
