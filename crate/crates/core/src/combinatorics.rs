//! Binomial coefficients and probabilities.
//!
//! Coefficients are exact products up to `n = 30` and go through `ln Γ`
//! above that so large groups never overflow.

use statrs::function::factorial::ln_binomial;

const EXACT_LIMIT: u64 = 30;

/// `C(n, k)` as a float; zero when `k > n`.
pub fn binomial(n: u64, k: u64) -> f64 {
    if k > n {
        return 0.0;
    }
    if n <= EXACT_LIMIT {
        let k = k.min(n - k);
        let mut acc: u64 = 1;
        for i in 0..k {
            // acc * (n - i) is divisible by (i + 1) at every step.
            acc = acc * (n - i) / (i + 1);
        }
        acc as f64
    } else {
        ln_binomial(n, k).exp()
    }
}

/// `p^a (1-p)^b` with the convention `0^0 = 1`.
pub fn bernoulli_power(p: f64, successes: u64, failures: u64) -> f64 {
    if successes + failures <= 2 * EXACT_LIMIT {
        p.powi(successes as i32) * (1.0 - p).powi(failures as i32)
    } else {
        let ln = |x: f64, e: u64| if e == 0 { 0.0 } else { e as f64 * x.ln() };
        (ln(p, successes) + ln(1.0 - p, failures)).exp()
    }
}

/// `C(n, k) p^a (1-p)^b`, evaluated in log space once the coefficient is large.
pub fn weighted_binomial(n: u64, k: u64, p: f64, successes: u64, failures: u64) -> f64 {
    if k > n {
        return 0.0;
    }
    if n <= EXACT_LIMIT {
        return binomial(n, k) * bernoulli_power(p, successes, failures);
    }
    if (p == 0.0 && successes > 0) || (p == 1.0 && failures > 0) {
        return 0.0;
    }
    let ln = |x: f64, e: u64| if e == 0 { 0.0 } else { e as f64 * x.ln() };
    (ln_binomial(n, k) + ln(p, successes) + ln(1.0 - p, failures)).exp()
}

/// Binomial(n, p) probability mass at `k`.
pub fn binomial_pmf(n: u64, k: u64, p: f64) -> f64 {
    if k > n {
        return 0.0;
    }
    weighted_binomial(n, k, p, k, n - k)
}

pub fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}
