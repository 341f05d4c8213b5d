//! Special functions behind the exact tails.
//!
//! Both tails are written as `pmf * continued fraction` (or `1 - pmf * series`)
//! where the pmf prefactor is evaluated with Loader's saddle-point form
//! (`stirlerr` + `bd0`). Going through `ln Gamma` instead would lose about
//! eight digits at `N = 10^7` to cancellation.

use std::f64::consts::PI;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const TINY: f64 = 1e-300;
const EPS: f64 = 1e-16;

/// `ln(n!) - [(n + 1/2) ln n - n + ln sqrt(2 pi)]` for integer `n >= 0`.
pub(crate) fn stirlerr(n: f64) -> f64 {
    const S0: f64 = 1.0 / 12.0;
    const S1: f64 = 1.0 / 360.0;
    const S2: f64 = 1.0 / 1260.0;
    const S3: f64 = 1.0 / 1680.0;
    const S4: f64 = 1.0 / 1188.0;
    if n <= 0.0 {
        return 0.0;
    }
    if n <= 15.0 {
        let mut fact = 1.0f64;
        for i in 2..=(n as u64) {
            fact *= i as f64;
        }
        return fact.ln() - (n + 0.5) * n.ln() + n - LN_SQRT_2PI;
    }
    let nn = n * n;
    if n > 500.0 {
        (S0 - S1 / nn) / n
    } else if n > 80.0 {
        (S0 - (S1 - S2 / nn) / nn) / n
    } else if n > 35.0 {
        (S0 - (S1 - (S2 - S3 / nn) / nn) / nn) / n
    } else {
        (S0 - (S1 - (S2 - (S3 - S4 / nn) / nn) / nn) / nn) / n
    }
}

/// Deviance term `x ln(x / np) + np - x`, evaluated without cancellation
/// when `x` is close to `np`.
pub(crate) fn bd0(x: f64, np: f64) -> f64 {
    if (x - np).abs() < 0.1 * (x + np) {
        let mut v = (x - np) / (x + np);
        let mut s = (x - np) * v;
        let mut ej = 2.0 * x * v;
        v *= v;
        for j in 1..1000 {
            ej *= v;
            let s1 = s + ej / (2 * j + 1) as f64;
            if s1 == s {
                return s1;
            }
            s = s1;
        }
        s
    } else {
        x * (x / np).ln() + np - x
    }
}

/// `ln P(X = x)` for `X ~ Binomial(n, p)`, with `q = 1 - p`.
pub(crate) fn ln_dbinom(x: f64, n: f64, p: f64, q: f64) -> f64 {
    if x == 0.0 {
        return n * q.ln();
    }
    if x == n {
        return n * p.ln();
    }
    let lc = stirlerr(n) - stirlerr(x) - stirlerr(n - x) - bd0(x, n * p) - bd0(n - x, n * q);
    let lf = (2.0 * PI).ln() + x.ln() + (-x / n).ln_1p();
    lc - 0.5 * lf
}

/// `ln(e^{-lambda} lambda^x / x!)` for integer `x >= 0`.
pub(crate) fn ln_dpois(x: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return if x == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    if x == 0.0 {
        return -lambda;
    }
    -stirlerr(x) - bd0(x, lambda) - 0.5 * (2.0 * PI * x).ln()
}

/// Continued fraction of the incomplete beta function (modified Lentz),
/// such that `I_x(a, b) = x^a (1-x)^b / (a B(a, b)) * betacf(a, b, x)`.
pub(crate) fn betacf(a: f64, b: f64, x: f64) -> f64 {
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let clamp = |v: f64| if v.abs() < TINY { TINY } else { v };
    let mut c = 1.0;
    let mut d = 1.0 / clamp(1.0 - qab * x / qap);
    let mut h = d;
    let max_iter = 10_000 + 20 * (a.max(b).sqrt() as usize);
    for m in 1..=max_iter {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 / clamp(1.0 + aa * d);
        c = clamp(1.0 + aa / c);
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 / clamp(1.0 + aa * d);
        c = clamp(1.0 + aa / c);
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            return h;
        }
    }
    log::warn!("incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})");
    h
}

/// `ln P(S >= s)` for `S ~ Binomial(n, gamma)`; requires `1 <= s <= n`.
pub(crate) fn ln_binomial_upper(s: u64, n: u64, gamma: f64) -> f64 {
    let (sf, nf) = (s as f64, n as f64);
    let q = 1.0 - gamma;
    // P(S >= s) = I_gamma(s, n - s + 1)
    let (a, b) = (sf, nf - sf + 1.0);
    if gamma < (a + 1.0) / (a + b + 2.0) {
        ln_dbinom(sf, nf, gamma, q) + q.ln() + betacf(a, b, gamma).ln()
    } else {
        // 1 - I_{1-gamma}(b, a), the complement is P(S <= s - 1)
        let lower = (ln_dbinom(sf - 1.0, nf, gamma, q) + gamma.ln()).exp() * betacf(b, a, q);
        (-lower.min(1.0)).ln_1p()
    }
}

/// `ln Q(a, x)`, the regularized upper incomplete gamma function, for
/// integer `a >= 1` and `x > 0`.
pub(crate) fn ln_gamma_upper(a: u64, x: f64) -> f64 {
    let af = a as f64;
    if x < af + 1.0 {
        // P(a, x) = e^{-x} x^a / Gamma(a + 1) * sum_n x^n / ((a+1)...(a+n))
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut denom = af;
        let max_iter = 10_000 + 20 * (af.sqrt() as usize);
        for _ in 0..max_iter {
            denom += 1.0;
            term *= x / denom;
            sum += term;
            if term < sum * EPS {
                break;
            }
        }
        let lower = (ln_dpois(af, x)).exp() * sum;
        (-lower.min(1.0)).ln_1p()
    } else {
        // Q(a, x) = e^{-x} x^a / Gamma(a) * CF, with e^{-x} x^a / Gamma(a) = a * dpois(a; x)
        let clamp = |v: f64| if v.abs() < TINY { TINY } else { v };
        let mut b = x + 1.0 - af;
        let mut c = 1.0 / TINY;
        let mut d = 1.0 / b;
        let mut h = d;
        let max_iter = 10_000 + 20 * (af.sqrt() as usize);
        for i in 1..=max_iter {
            let an = -(i as f64) * (i as f64 - af);
            b += 2.0;
            d = 1.0 / clamp(an * d + b);
            c = clamp(b + an / c);
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < EPS {
                break;
            }
        }
        af.ln() + ln_dpois(af, x) + h.ln()
    }
}
