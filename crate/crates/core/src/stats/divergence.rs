use crate::error::{Error, Result};
use crate::model::Distribution;

/// `KL(p ‖ q)` in nats, with `0 · ln 0 = 0`.
pub fn kl_divergence(p: &Distribution, q: &Distribution) -> Result<f64> {
    kl_divergence_slices(p.probabilities(), q.probabilities())
}

pub(crate) fn kl_divergence_slices(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Distribution(format!(
            "support sizes differ ({} vs {})",
            p.len(),
            q.len()
        )));
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi == 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return Err(Error::Distribution("q is zero where p is positive".into()));
        }
        total += pi * (pi / qi).ln();
    }
    // Rounding can leave a tiny negative remainder when p ≈ q.
    Ok(total.max(0.0))
}

/// `KL(Bernoulli(a) ‖ Bernoulli(p))` in nats.
pub fn bernoulli_kl(a: f64, p: f64) -> Result<f64> {
    for (name, v) in [("a", a), ("p", p)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::Range(format!("{name} = {v} must lie in (0, 1)")));
        }
    }
    let value = a * (a / p).ln() + (1.0 - a) * ((1.0 - a) / (1.0 - p)).ln();
    Ok(value.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dist(v: Vec<f64>) -> Distribution {
        Distribution::new(v).unwrap()
    }

    fn random_dist(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / total).collect()
    }

    /// Sum of `p ln p - p ln q` terms with Neumaier compensation, terms
    /// added smallest magnitude first.
    fn compensated_kl(p: &[f64], q: &[f64]) -> f64 {
        let mut terms: Vec<f64> = p
            .iter()
            .zip(q)
            .flat_map(|(&a, &b)| [a * a.ln(), -a * b.ln()])
            .collect();
        terms.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for t in terms {
            let s = sum + t;
            if sum.abs() >= t.abs() {
                comp += (sum - s) + t;
            } else {
                comp += (t - s) + sum;
            }
            sum = s;
        }
        sum + comp
    }

    #[test]
    fn analytic_cases() {
        let u = dist(vec![0.25; 4]);
        assert_eq!(kl_divergence(&u, &u).unwrap(), 0.0);
        let one_hot = dist(vec![1.0, 0.0, 0.0, 0.0]);
        let v = kl_divergence(&one_hot, &u).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-15);
        assert!((v - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn error_cases() {
        let a = dist(vec![0.5, 0.5]);
        let b = dist(vec![1.0 / 3.0; 3]);
        assert!(kl_divergence(&a, &b).is_err());
        let z = dist(vec![1.0, 0.0]);
        assert!(kl_divergence(&a, &z).is_err());
        // Zero in q where p is zero is fine.
        assert!(kl_divergence(&z, &z).is_ok());
    }

    #[test]
    fn matches_compensated_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let p = random_dist(&mut rng, 50);
            let q = random_dist(&mut rng, 50);
            let got = kl_divergence_slices(&p, &q).unwrap();
            let oracle = compensated_kl(&p, &q);
            assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
        }
    }

    #[test]
    fn zero_iff_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let p = random_dist(&mut rng, 20);
            let q = random_dist(&mut rng, 20);
            assert_eq!(kl_divergence_slices(&p, &p).unwrap(), 0.0);
            assert!(kl_divergence_slices(&p, &q).unwrap() > 1e-12);
        }
    }

    #[test]
    fn bernoulli_values() {
        assert_eq!(bernoulli_kl(0.3, 0.3).unwrap(), 0.0);
        // 0.96 ln(0.96/0.95) + 0.04 ln(0.8) evaluated at 30 digits.
        let v = bernoulli_kl(0.96, 0.95).unwrap();
        assert!((v - 1.126_705_820_035_197e-3).abs() < 1e-15, "{v}");
        assert!(bernoulli_kl(0.0, 0.5).is_err());
        assert!(bernoulli_kl(0.5, 1.0).is_err());
    }

    #[test]
    fn pinsker_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..1000 {
            let a: f64 = rng.random_range(1e-6..1.0 - 1e-6);
            let p: f64 = rng.random_range(1e-6..1.0 - 1e-6);
            let kl = bernoulli_kl(a, p).unwrap();
            assert!(kl >= 2.0 * (a - p).powi(2) - 1e-15, "a={a} p={p}");
        }
    }

    proptest! {
        #[test]
        fn kl_nonnegative(seed in any::<u64>(), n in 2usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_dist(&mut rng, n);
            let q = random_dist(&mut rng, n);
            let v = kl_divergence_slices(&p, &q).unwrap();
            prop_assert!(v.is_finite() && v >= 0.0);
        }
    }
}
