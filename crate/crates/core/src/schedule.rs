//! Time handling: the adjacent-time gap `Δt`, its `r` curriculum, and the
//! training-time distributions.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};

/// Per-sample retry budget of the truncated sampler.
pub const MAX_RETRIES: usize = 10_000;

/// How `r` evolves with the iteration count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RProfile {
    /// `min(1 − base^−⌈i/period⌉, cap)`.
    Doubling { base: f64, period: u64, cap: f64 },
    /// Fixed `r` (second stage starts at the cap and stays there).
    Constant(f64),
}

impl RProfile {
    pub fn doubling(period: u64) -> Self {
        RProfile::Doubling {
            base: 2.0,
            period,
            cap: 0.999,
        }
    }

    /// `r` at a 1-based iteration; iteration 0 is treated as 1.
    pub fn r_at(&self, iteration: u64) -> f64 {
        match *self {
            RProfile::Doubling { base, period, cap } => {
                let k = iteration.max(1).div_ceil(period.max(1));
                // base^-k underflows to 0 long before k overflows i32.
                let k = k.min(i32::MAX as u64) as i32;
                (1.0 - base.powi(-k)).min(cap)
            }
            RProfile::Constant(r) => r,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        match *self {
            RProfile::Doubling { base, period, cap } => {
                if !(base > 1.0 && base.is_finite()) {
                    errs.push(format!("schedule.base: must exceed 1, got {base}"));
                }
                if period == 0 {
                    errs.push("schedule.period: must be positive".to_string());
                }
                if !(0.0..1.0).contains(&cap) {
                    errs.push(format!("schedule.r_cap: must lie in [0, 1), got {cap}"));
                }
            }
            RProfile::Constant(r) => {
                if !(0.0..1.0).contains(&r) {
                    errs.push(format!("schedule.r_cap: must lie in [0, 1), got {r}"));
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// `Δt = min((1 + 8·sigmoid(−t))(1 − r)t, t − t_min)`.
///
/// The clamp keeps the teacher time at or above `t_min`; it only binds at small
/// `r` or small `t`.
pub fn delta_t(t: f64, r: f64, t_min: f64) -> f64 {
    let raw = (1.0 + 8.0 * sigmoid(-t)) * (1.0 - r) * t;
    let mut dt = raw.min(t - t_min);
    // `t − (t − t_min)` can round to just below `t_min`; step down an ulp at a time.
    while dt > 0.0 && t - dt < t_min {
        dt = f64::from_bits(dt.to_bits() - 1);
    }
    dt
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeltaSchedule {
    pub profile: RProfile,
    pub t_min: f64,
}

impl DeltaSchedule {
    pub fn r_at(&self, iteration: u64) -> f64 {
        self.profile.r_at(iteration)
    }

    pub fn delta_t(&self, t: f64, iteration: u64) -> f64 {
        delta_t(t, self.r_at(iteration), self.t_min)
    }
}

/// `exp(μ + σz)` clamped into `[lo, hi]`.
pub fn sample_lognormal(
    mu: f64,
    sigma: f64,
    n: usize,
    lo: f64,
    hi: f64,
    rng: &mut impl Rng,
) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            (mu + sigma * z).exp().clamp(lo, hi)
        })
        .collect()
}

/// `ln t ~ μ + σ·Student-t(ν)` truncated to `(ln t', ln T]`, by rejection.
/// `ν = ∞` gives the truncated log-normal.
pub fn sample_log_student_t(
    mu: f64,
    sigma: f64,
    nu: f64,
    t_prime: f64,
    t_max: f64,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && nu > 0.0 && t_prime > 0.0 && t_prime < t_max) {
        return Err(Error::Contract(format!(
            "log-Student-t needs σ > 0, ν > 0, 0 < t' < T (σ={sigma}, ν={nu}, t'={t_prime}, T={t_max})"
        )));
    }
    // ν = ∞ is the log-normal limit.
    let dist = if nu.is_infinite() {
        None
    } else {
        Some(StudentT::new(nu).map_err(|e| Error::Contract(format!("Student-t(ν={nu}): {e}")))?)
    };
    let (lo, hi) = (t_prime.ln(), t_max.ln());
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut accepted = None;
        for _ in 0..MAX_RETRIES {
            let z = match &dist {
                Some(d) => d.sample(rng),
                None => rng.sample(StandardNormal),
            };
            let u = mu + sigma * z;
            if u > lo && u <= hi {
                accepted = Some(u.exp().min(t_max));
                break;
            }
        }
        match accepted {
            Some(t) if t > t_prime => out.push(t),
            _ => {
                return Err(Error::Sampling(format!(
                "no log-Student-t(μ={mu}, σ={sigma}, ν={nu}) draw landed in ({t_prime}, {t_max}] \
                     after {MAX_RETRIES} tries"
            )))
            }
        }
    }
    Ok(out)
}

/// `(N_B, B − N_B)` with `N_B = ⌊Bρ⌋`.
pub fn split_batch(batch: usize, rho: f64) -> Result<(usize, usize)> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Config(vec![format!(
            "loss.rho: must lie in (0, 1), got {rho}"
        )]));
    }
    let nb = (batch as f64 * rho).floor() as usize;
    if nb == 0 || nb >= batch {
        return Err(Error::Config(vec![format!(
            "loss.rho: batch {batch} with ρ={rho} gives {nb} boundary samples; need between 1 and {}",
            batch.saturating_sub(1)
        )]));
    }
    Ok((nb, batch - nb))
}

/// A training-time distribution.
#[derive(Clone, Debug, PartialEq)]
pub enum TimeSampler {
    LogNormal {
        mu: f64,
        sigma: f64,
    },
    /// Support `(t_prime, T]`.
    LogStudentT {
        mu: f64,
        sigma: f64,
        nu: f64,
        t_prime: f64,
    },
    /// `t'` with probability `lambda_b`, otherwise a draw from `inner`.
    DiracMixture {
        t_prime: f64,
        lambda_b: f64,
        inner: Box<TimeSampler>,
    },
}

impl TimeSampler {
    /// `n` times in `[lo, hi]`; the truncated kinds additionally stay above `t'`.
    pub fn sample(&self, n: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
        match self {
            TimeSampler::LogNormal { mu, sigma } => {
                Ok(sample_lognormal(*mu, *sigma, n, lo, hi, rng))
            }
            TimeSampler::LogStudentT {
                mu,
                sigma,
                nu,
                t_prime,
            } => {
                let t = sample_log_student_t(*mu, *sigma, *nu, *t_prime, hi, n, rng)?;
                Ok(t.into_iter().map(|v| v.max(lo)).collect())
            }
            TimeSampler::DiracMixture {
                t_prime,
                lambda_b,
                inner,
            } => {
                let mut out = Vec::with_capacity(n);
                for _ in 0..n {
                    if rng.random::<f64>() < *lambda_b {
                        out.push(*t_prime);
                    } else {
                        out.extend(inner.sample(1, lo, hi, rng)?);
                    }
                }
                Ok(out)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn delta_t_examples() {
        let d = delta_t(80.0, 0.999, 0.002);
        assert!((d - 0.08).abs() < 1e-12, "{d}");
        let raw = (1.0 + 8.0 / (1.0 + 1f64.exp())) * 0.5;
        assert!((raw - 1.5757).abs() < 1e-4);
        assert!((delta_t(1.0, 0.5, 0.002) - 0.998).abs() < 1e-15);
        assert_eq!(delta_t(3.0, 1.0, 0.002), 0.0);
    }

    #[test]
    fn delta_t_clamp_invariant() {
        let mut r = rng::stream(1, "test", 0);
        for _ in 0..100_000 {
            let t = 0.002 + r.random::<f64>() * 80.0 + 1e-9;
            let rr: f64 = r.random::<f64>() * 0.9999;
            let d = delta_t(t, rr, 0.002);
            assert!(d > 0.0 && t - d >= 0.002, "t={t} r={rr} d={d}");
        }
    }

    #[test]
    fn r_curriculum() {
        let p = RProfile::doubling(25_000);
        assert_eq!(p.r_at(1), 0.5);
        assert_eq!(p.r_at(25_000), 0.5);
        assert_eq!(p.r_at(25_001), 0.75);
        assert_eq!(p.r_at(250_001), 0.999);
        assert_eq!(p.r_at(u64::MAX), 0.999);
        let mut prev = 0.0;
        for i in (1..400_000).step_by(997) {
            let r = p.r_at(i);
            assert!(r >= prev && r <= 0.999);
            prev = r;
        }
        assert_eq!(RProfile::Constant(0.999).r_at(17), 0.999);
    }

    #[test]
    fn lognormal_median_and_range() {
        let mut r = rng::stream(2, "test", 0);
        let mut t = sample_lognormal(-1.1, 2.0, 100_000, 0.002, 80.0, &mut r);
        assert!(t.iter().all(|&v| (0.002..=80.0).contains(&v)));
        t.sort_by(f64::total_cmp);
        let med = t[50_000];
        assert!((med / (-1.1f64).exp() - 1.0).abs() < 0.02, "{med}");
        let t = sample_lognormal(-1.1, 0.0, 10, 0.002, 80.0, &mut r);
        assert!(t.iter().all(|&v| v == (-1.1f64).exp()));
    }

    #[test]
    fn student_t_large_nu_matches_truncated_lognormal() {
        use statrs::distribution::{ContinuousCDF, Normal};
        let (mu, sigma, tp, tmax) = (0.0, 0.5, 1.0, 80.0);
        let mut r = rng::stream(3, "test", 0);
        let mut t = sample_log_student_t(mu, sigma, 1e6, tp, tmax, 100_000, &mut r).unwrap();
        t.sort_by(f64::total_cmp);
        let norm = Normal::new(mu, sigma).unwrap();
        let (a, b) = (norm.cdf(f64::ln(tp)), norm.cdf(f64::ln(tmax)));
        let n = t.len() as f64;
        let ks = t
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let f = (norm.cdf(v.ln()) - a) / (b - a);
                (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.01, "KS {ks}");
    }

    #[test]
    fn student_t_truncation_and_concentration() {
        let mut r = rng::stream(4, "test", 0);
        let t = sample_log_student_t(0.0, 0.2, 0.01, 1.0, 80.0, 20_000, &mut r).unwrap();
        assert!(t.iter().all(|&v| v > 1.0 && v <= 80.0));
        let near = t.iter().filter(|&&v| v <= 2.0).count();
        let far = t.iter().filter(|&&v| v > 40.0).count();
        assert!(near > far, "near {near} far {far}");
    }

    #[test]
    fn student_t_bin_ratio_matches_density() {
        // ν = 2 has a closed-form CDF: F(z) = 1/2 + z / (2√(2 + z²)).
        let cdf = |z: f64| 0.5 + z / (2.0 * (2.0 + z * z).sqrt());
        let (mu, sigma, tp) = (0.0, 0.5, 1.0);
        let mut r = rng::stream(5, "test", 0);
        let t = sample_log_student_t(mu, sigma, 2.0, tp, 80.0, 1_000_000, &mut r).unwrap();
        assert_eq!(t.iter().filter(|&&v| v <= tp).count(), 0);
        let bin = |a: f64, b: f64| t.iter().filter(|&&v| v > a && v <= b).count() as f64;
        let mass = |a: f64, b: f64| cdf((f64::ln(b) - mu) / sigma) - cdf((f64::ln(a) - mu) / sigma);
        let empirical = bin(1.0, 1.5) / bin(2.0, 3.0);
        let analytic = mass(1.0, 1.5) / mass(2.0, 3.0);
        assert!(
            (empirical / analytic - 1.0).abs() < 0.05,
            "{empirical} vs {analytic}"
        );
    }

    #[test]
    fn student_t_pathological_window_errors() {
        let mut r = rng::stream(6, "test", 0);
        let e = sample_log_student_t(-30.0, 0.01, 1e6, 1.0, 80.0, 1, &mut r).unwrap_err();
        assert!(
            matches!(e, Error::Sampling(ref m) if m.contains("ν=1000000")),
            "{e}"
        );
        assert!(sample_log_student_t(0.0, 0.2, 0.01, 80.0, 80.0, 1, &mut r).is_err());
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_batch(512, 0.25).unwrap(), (128, 384));
        assert_eq!(split_batch(128, 0.25).unwrap(), (32, 96));
        assert!(matches!(split_batch(4, 0.1), Err(Error::Config(_))));
        assert!(split_batch(4, 1.0).is_err());
    }

    #[test]
    fn dirac_mixture_hits_boundary() {
        let s = TimeSampler::DiracMixture {
            t_prime: 1.0,
            lambda_b: 0.3,
            inner: Box::new(TimeSampler::LogStudentT {
                mu: 0.0,
                sigma: 0.2,
                nu: 0.01,
                t_prime: 1.0,
            }),
        };
        let mut r = rng::stream(7, "test", 0);
        let t = s.sample(20_000, 0.002, 80.0, &mut r).unwrap();
        let at = t.iter().filter(|&&v| v == 1.0).count() as f64 / 20_000.0;
        assert!((at - 0.3).abs() < 0.02, "{at}");
        assert!(t.iter().all(|&v| v >= 1.0));
    }
}
