//! How many samples make the order statistic `x̂_p` an upper bound for the
//! true `p`-th percentile with probability at least `δ`.
//!
//! With `x̂_p` the `⌈(p+ε)n⌉`-th smallest of `n` i.i.d. draws,
//! `P(x̂_p ≥ x_p) = F_Binom(⌈(p+ε)n⌉ − 1; n, p)`. The Chernoff bound gives
//! `P ≥ 1 − exp(−n·KL(Bern(p+ε) ‖ Bern(p)))`, and Hoeffding's inequality the
//! looser `P ≥ 1 − exp(−2nε²)`.
//!
//! The samples are assumed independent. Pairs built by crossing `n` clean
//! inputs with `m` corrupted inputs are not; treating such a run as `n`
//! independent samples understates the guarantee.

use std::fmt;
use std::str::FromStr;

use statrs::function::gamma::ln_gamma;

use super::divergence::bernoulli_kl;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoundMethod {
    Exact,
    Chernoff,
    Hoeffding,
}

impl BoundMethod {
    pub const ALL: [BoundMethod; 3] = [
        BoundMethod::Exact,
        BoundMethod::Chernoff,
        BoundMethod::Hoeffding,
    ];
}

impl fmt::Display for BoundMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoundMethod::Exact => "exact",
            BoundMethod::Chernoff => "chernoff",
            BoundMethod::Hoeffding => "hoeffding",
        })
    }
}

impl FromStr for BoundMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(BoundMethod::Exact),
            "chernoff" => Ok(BoundMethod::Chernoff),
            "hoeffding" => Ok(BoundMethod::Hoeffding),
            other => Err(Error::Range(format!("unknown bound method `{other}`"))),
        }
    }
}

/// A percentile-bound question: level `p`, margin `epsilon`, and either a
/// sample count (probability queries) or a target confidence `delta`
/// (sample-size queries).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundQuery {
    pub p: f64,
    pub epsilon: f64,
    pub delta: f64,
}

impl BoundQuery {
    pub fn new(p: f64, delta: f64, epsilon: f64) -> Result<Self> {
        check_margin(p, epsilon)?;
        check_open_unit("delta", delta)?;
        Ok(BoundQuery { p, epsilon, delta })
    }

    pub fn min_samples(&self, method: BoundMethod) -> Result<u64> {
        min_samples(self.p, self.delta, self.epsilon, method)
    }
}

fn check_open_unit(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::Range(format!("{name} = {v} must lie in (0, 1)")))
    }
}

fn check_margin(p: f64, epsilon: f64) -> Result<()> {
    check_open_unit("p", p)?;
    if !(epsilon > 0.0) || !(p + epsilon < 1.0) {
        return Err(Error::Range(format!(
            "need epsilon > 0 and p + epsilon < 1 (p = {p}, epsilon = {epsilon})"
        )));
    }
    Ok(())
}

/// 1-indexed rank `⌈(p+ε)n⌉` of the order statistic used as `x̂_p`.
fn rank(n: u64, p: f64, epsilon: f64) -> u64 {
    ((p + epsilon) * n as f64).ceil() as u64
}

fn ln_choose(n: u64, k: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

fn ln_pmf(k: u64, n: u64, p: f64) -> f64 {
    ln_choose(n, k) + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()
}

/// Binomial CDF `P(X ≤ k)` for `X ~ Binom(n, p)`.
///
/// Sums the smaller tail in log space: the lower tail when `k ≤ np`, the
/// complementary upper tail otherwise. Terms are generated by the pmf ratio
/// walking away from `k`, where they decrease monotonically, and the walk
/// stops once they fall below `e^-60` of the first term.
pub fn binomial_cdf(k: i64, n: u64, p: f64) -> f64 {
    if k < 0 {
        return 0.0;
    }
    let k = k as u64;
    if k >= n {
        return 1.0;
    }
    if p <= 0.0 {
        return 1.0;
    }
    if p >= 1.0 {
        return 0.0;
    }
    let log_odds = (p / (1.0 - p)).ln();
    const CUTOFF: f64 = 60.0;
    if (k as f64) <= n as f64 * p {
        // Lower tail: i = k, k-1, ..., 0.
        let first = ln_pmf(k, n, p);
        let (mut term, mut acc) = (first, 0.0f64);
        let mut i = k;
        loop {
            acc += (term - first).exp();
            if i == 0 || term < first - CUTOFF {
                break;
            }
            // pmf(i-1)/pmf(i) = i / (n-i+1) · (1-p)/p
            term += (i as f64 / (n - i + 1) as f64).ln() - log_odds;
            i -= 1;
        }
        (first + acc.ln()).exp().min(1.0)
    } else {
        // Upper tail: i = k+1, ..., n.
        let start = k + 1;
        let first = ln_pmf(start, n, p);
        let (mut term, mut acc) = (first, 0.0f64);
        let mut i = start;
        loop {
            acc += (term - first).exp();
            if i == n || term < first - CUTOFF {
                break;
            }
            // pmf(i+1)/pmf(i) = (n-i) / (i+1) · p/(1-p)
            term += ((n - i) as f64 / (i + 1) as f64).ln() + log_odds;
            i += 1;
        }
        (-(first + acc.ln()).exp_m1()).clamp(0.0, 1.0)
    }
}

/// `P(x̂_p ≥ x_p) = F_Binom(⌈(p+ε)n⌉ − 1; n, p)`.
pub fn exact_bound_probability(n: u64, p: f64, epsilon: f64) -> Result<f64> {
    check_margin(p, epsilon)?;
    Ok(binomial_cdf(rank(n, p, epsilon) as i64 - 1, n, p))
}

/// Chernoff lower bound `1 − exp(−n·KL(Bern(p+ε) ‖ Bern(p)))`.
pub fn chernoff_bound_probability(n: u64, p: f64, epsilon: f64) -> Result<f64> {
    check_margin(p, epsilon)?;
    let kl = bernoulli_kl(p + epsilon, p)?;
    Ok(-(-(n as f64) * kl).exp_m1())
}

/// Hoeffding lower bound `1 − exp(−2nε²)`.
pub fn hoeffding_bound_probability(n: u64, p: f64, epsilon: f64) -> Result<f64> {
    check_margin(p, epsilon)?;
    Ok(-(-2.0 * n as f64 * epsilon * epsilon).exp_m1())
}

pub fn bound_probability(method: BoundMethod, n: u64, p: f64, epsilon: f64) -> Result<f64> {
    match method {
        BoundMethod::Exact => exact_bound_probability(n, p, epsilon),
        BoundMethod::Chernoff => chernoff_bound_probability(n, p, epsilon),
        BoundMethod::Hoeffding => hoeffding_bound_probability(n, p, epsilon),
    }
}

/// Sample count needed for `method`'s probability to reach `delta`.
///
/// Chernoff and Hoeffding are monotone in `n`; their closed-form solutions
/// `⌈ln(1/(1−δ)) / KL(p+ε ‖ p)⌉` and `⌈ln(1/(1−δ)) / (2ε²)⌉` are then
/// nudged by ±1 against the probability itself so floating-point rounding of
/// the quotient cannot shift the answer.
///
/// The exact probability is not monotone in `n` (the rank is a ceiling), so
/// "the" crossing depends on the search. This solver doubles `n` from 1
/// until the target is met and then bisects the bracket `[n/2, n]` as if
/// the probability were monotone there; the result always meets the target
/// while its predecessor does not. The first `n` at which the target is
/// ever met can be smaller; [`first_sufficient_samples`] returns that one.
pub fn min_samples(p: f64, delta: f64, epsilon: f64, method: BoundMethod) -> Result<u64> {
    let q = BoundQuery::new(p, delta, epsilon)?;
    let target = (1.0 / (1.0 - q.delta)).ln();
    let closed = |rate: f64| -> Result<u64> {
        let mut n = (target / rate).ceil().max(0.0) as u64;
        let prob = |n| bound_probability(method, n, p, epsilon);
        while prob(n)? < delta {
            n += 1;
        }
        while n > 0 && prob(n - 1)? >= delta {
            n -= 1;
        }
        Ok(n)
    };
    match method {
        BoundMethod::Hoeffding => closed(2.0 * epsilon * epsilon),
        BoundMethod::Chernoff => closed(bernoulli_kl(p + epsilon, p)?),
        BoundMethod::Exact => Ok(bracketed_crossing(|n| {
            binomial_cdf(rank(n, p, epsilon) as i64 - 1, n, p) >= delta
        })),
    }
}

/// Doubles `hi` from 1 until `ok(hi)`, then bisects `[hi/2, hi]` for the
/// lowest point where `ok` holds, assuming `ok` is monotone in the bracket.
fn bracketed_crossing(ok: impl Fn(u64) -> bool) -> u64 {
    let mut hi = 1u64;
    while !ok(hi) {
        hi *= 2;
    }
    let mut lo = hi / 2;
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    lo.max(1)
}

/// Smallest `n` at which the exact probability first reaches `delta`.
///
/// Scans `n = 1, 2, ...` carrying `F(k; n, p)` and the pmf at `k` through
/// the recurrences `F(k; n+1) = F(k; n) − p·pmf(k; n)` and
/// `F(k+1; n) = F(k; n) + pmf(k+1; n)`. The running values are re-anchored
/// from [`binomial_cdf`] every 1024 steps, and any `n` whose running value
/// lies within 1e-9 of `delta` is decided by a direct evaluation. The scan
/// is capped at the Chernoff sample size, where the target is guaranteed.
pub fn first_sufficient_samples(p: f64, delta: f64, epsilon: f64) -> Result<u64> {
    BoundQuery::new(p, delta, epsilon)?;
    let cap = min_samples(p, delta, epsilon, BoundMethod::Chernoff)?;
    let exact = |n: u64| binomial_cdf(rank(n, p, epsilon) as i64 - 1, n, p);

    let anchor = |n: u64| {
        let k = rank(n, p, epsilon) - 1;
        (k, exact(n), ln_pmf(k, n, p).exp())
    };
    let (mut k, mut cdf, mut pmf) = anchor(1);
    let mut n = 1u64;
    loop {
        let hit = if (cdf - delta).abs() < 1e-9 {
            exact(n) >= delta
        } else {
            cdf >= delta
        };
        if hit || n >= cap {
            return Ok(n);
        }
        // n -> n + 1 at fixed k.
        cdf -= p * pmf;
        pmf *= (n + 1) as f64 / (n + 1 - k) as f64 * (1.0 - p);
        n += 1;
        let next_k = rank(n, p, epsilon) - 1;
        if next_k > k {
            pmf *= (n - k) as f64 / (k + 1) as f64 * p / (1.0 - p);
            cdf += pmf;
            k = next_k;
        }
        if n.is_multiple_of(1024) {
            (k, cdf, pmf) = anchor(n);
        }
    }
}

/// The `⌈n(p+ε)⌉`-th smallest sample (1-indexed).
///
/// Unlike the bound functions this does not require `p + ε < 1`: a margin
/// that pushes the rank past the sample size is reported as
/// [`Error::InsufficientSamples`].
pub fn order_statistic_percentile(samples: &[f64], p: f64, epsilon: f64) -> Result<f64> {
    check_open_unit("p", p)?;
    if !(epsilon > 0.0) {
        return Err(Error::Range(format!(
            "epsilon = {epsilon} must be positive"
        )));
    }
    let n = samples.len();
    if n == 0 {
        return Err(Error::InsufficientSamples { rank: 1, n: 0 });
    }
    let r = rank(n as u64, p, epsilon) as usize;
    if r > n {
        return Err(Error::InsufficientSamples { rank: r, n });
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[r.max(1) - 1])
}
