//! Exact Polya-Gamma PG(1, z) random variates.
//!
//! The sampler is the exact alternating-series acceptance scheme for shape 1:
//! a mixture of a truncated inverse-Gaussian proposal below the crossover
//! point and a shifted exponential above it, accepted by evaluating partial
//! sums of the tilted Jacobi-theta series until the alternating bound decides.
//! PG(1, z) is symmetric in z; only |z| matters.

use crate::error::{NhmmError, Result};
use crate::stats::norm_cdf;
use rand::Rng;
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal};
use std::f64::consts::PI;

/// Proposal crossover point for the shape-1 sampler.
const CROSSOVER: f64 = 0.64;

/// Alternating partial sums that fail to decide within this many terms abort
/// the attempt and retry with a fresh proposal.
const MAX_SERIES_TERMS: usize = 200;

/// A single Polya-Gamma draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PGDraw {
    pub value: f64,
}

/// Mean of PG(1, z): tanh(z/2) / (2 z), with limit 1/4 at z = 0.
pub fn pg1_mean(z: f64) -> f64 {
    if z.abs() < 1e-8 {
        0.25
    } else {
        (z / 2.0).tanh() / (2.0 * z)
    }
}

/// Exact draw from PG(1, |tilt|).
pub fn draw_pg1<R: Rng + ?Sized>(tilt: f64, rng: &mut R) -> Result<PGDraw> {
    if !tilt.is_finite() {
        return Err(NhmmError::InvalidInput(format!(
            "non-finite PG tilt: {tilt}"
        )));
    }
    // PG(1, z) = J*(1, z/2) / 4 where J* is the tilted Jacobi variable.
    let z = tilt.abs() / 2.0;
    let value = draw_jacobi_tilted(z, rng) / 4.0;
    Ok(PGDraw { value })
}

/// Draw from the tilted Jacobi distribution J*(1, z).
fn draw_jacobi_tilted<R: Rng + ?Sized>(z: f64, rng: &mut R) -> f64 {
    let t = CROSSOVER;
    let rate = PI * PI / 8.0 + z * z / 2.0;
    let p_expon = exponential_branch_probability(z);
    loop {
        let x = if rng.gen::<f64>() < p_expon {
            let e: f64 = Exp1.sample(rng);
            t + e / rate
        } else {
            truncated_inverse_gaussian(z, t, rng)
        };
        // Alternating-series accept/reject (squeeze on the Jacobi density).
        let s0 = series_coef(0, x);
        let y = rng.gen::<f64>() * s0;
        let mut s = s0;
        let mut decided = None;
        for n in 1..=MAX_SERIES_TERMS {
            if n % 2 == 1 {
                s -= series_coef(n, x);
                if y <= s {
                    decided = Some(true);
                    break;
                }
            } else {
                s += series_coef(n, x);
                if y > s {
                    decided = Some(false);
                    break;
                }
            }
        }
        match decided {
            Some(true) => return x,
            // Rejection or an undecided (stalled) series: retry.
            _ => continue,
        }
    }
}

/// Probability that the proposal mixture draws from the exponential branch.
fn exponential_branch_probability(z: f64) -> f64 {
    let t = CROSSOVER;
    let rate = PI * PI / 8.0 + z * z / 2.0;
    let b = (1.0 / t).sqrt() * (t * z - 1.0);
    let a = -(1.0 / t).sqrt() * (t * z + 1.0);
    let x0 = rate.ln() + rate * t;
    let xb = x0 - z + norm_cdf(b).ln();
    let xa = x0 + z + norm_cdf(a).ln();
    let q_div_p = 4.0 / PI * (xb.exp() + xa.exp());
    1.0 / (1.0 + q_div_p)
}

/// Coefficient a_n(x) of the alternating Jacobi series, piecewise in x.
fn series_coef(n: usize, x: f64) -> f64 {
    let np = n as f64 + 0.5;
    if x > CROSSOVER {
        PI * np * (-np * np * PI * PI * x / 2.0).exp()
    } else {
        PI * np * (2.0 / (PI * x)).powf(1.5) * (-2.0 * np * np / x).exp()
    }
}

/// Inverse-Gaussian IG(1/z, 1) truncated to (0, t].
fn truncated_inverse_gaussian<R: Rng + ?Sized>(z: f64, t: f64, rng: &mut R) -> f64 {
    if z < 1.0 / t {
        // Large mean: rejection via the chi-square representation at z = 0,
        // thinned by the tilt factor.
        loop {
            let x = loop {
                let e1: f64 = Exp1.sample(rng);
                let e2: f64 = Exp1.sample(rng);
                if e1 * e1 <= 2.0 * e2 / t {
                    break t / (1.0 + t * e1).powi(2);
                }
            };
            if rng.gen::<f64>() <= (-0.5 * z * z * x).exp() {
                return x;
            }
        }
    } else {
        // Small mean: draw IG(mu, 1) until it lands below t.
        let mu = 1.0 / z;
        loop {
            let n: f64 = StandardNormal.sample(rng);
            let y = n * n;
            let mut x = mu + 0.5 * mu * mu * y - 0.5 * mu * (4.0 * mu * y + (mu * y).powi(2)).sqrt();
            if rng.gen::<f64>() > mu / (mu + x) {
                x = mu * mu / x;
            }
            if x <= t {
                return x;
            }
        }
    }
}

/// Approximate PG(b, tilt) draw from the truncated infinite gamma sum:
/// (1 / 2 pi^2) * sum_k g_k / ((k - 1/2)^2 + tilt^2 / (4 pi^2)),
/// g_k ~ Gamma(b, 1) independent, k = 1..terms.
///
/// Test oracle, independent of the exact sampler.
pub fn pg_oracle_draw<R: Rng + ?Sized>(
    b: f64,
    tilt: f64,
    terms: usize,
    rng: &mut R,
) -> Result<PGDraw> {
    if !(b > 0.0) || !tilt.is_finite() {
        return Err(NhmmError::InvalidInput(format!(
            "invalid oracle parameters b={b}, tilt={tilt}"
        )));
    }
    if terms < 100 {
        return Err(NhmmError::Config(format!(
            "oracle needs >= 100 series terms, got {terms}"
        )));
    }
    let gamma = Gamma::new(b, 1.0).map_err(|e| NhmmError::InvalidInput(e.to_string()))?;
    let c2 = tilt * tilt / (4.0 * PI * PI);
    let mut sum = 0.0;
    for k in 1..=terms {
        let d = (k as f64 - 0.5).powi(2) + c2;
        let g: f64 = gamma.sample(rng);
        sum += g / d;
    }
    Ok(PGDraw {
        value: sum / (2.0 * PI * PI),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn sample_mean(tilt: f64, n: usize, seed: u64) -> (f64, f64) {
        let mut rng = substream(seed, 0);
        let draws: Vec<f64> = (0..n)
            .map(|_| draw_pg1(tilt, &mut rng).unwrap().value)
            .collect();
        crate::stats::mean_var(&draws)
    }

    #[test]
    fn rejects_non_finite_tilt() {
        let mut rng = substream(0, 0);
        assert!(draw_pg1(f64::NAN, &mut rng).is_err());
        assert!(draw_pg1(f64::INFINITY, &mut rng).is_err());
    }

    #[test]
    fn draws_positive() {
        let mut rng = substream(1, 0);
        for &z in &[0.0, 0.1, 1.0, 10.0, 50.0] {
            for _ in 0..200 {
                assert!(draw_pg1(z, &mut rng).unwrap().value > 0.0);
            }
        }
    }

    #[test]
    fn mean_at_zero_tilt() {
        let n = 100_000;
        let (m, v) = sample_mean(0.0, n, 11);
        let se = (v / n as f64).sqrt();
        assert!((m - 0.25).abs() < 3.0 * se, "mean {m}, se {se}");
    }

    #[test]
    fn mean_at_tilt_two() {
        let n = 100_000;
        let (m, v) = sample_mean(2.0, n, 12);
        let se = (v / n as f64).sqrt();
        let expect = 1.0f64.tanh() / 4.0;
        assert!((m - expect).abs() < 3.0 * se, "mean {m}, expect {expect}");
    }

    #[test]
    fn symmetric_in_tilt_sign() {
        let mut rng = substream(13, 0);
        let a: Vec<f64> = (0..20_000)
            .map(|_| draw_pg1(2.0, &mut rng).unwrap().value)
            .collect();
        let b: Vec<f64> = (0..20_000)
            .map(|_| draw_pg1(-2.0, &mut rng).unwrap().value)
            .collect();
        let d = crate::stats::ks_two_sample_statistic(&a, &b);
        let p = crate::stats::ks_two_sample_pvalue(d, a.len(), b.len());
        assert!(p > 0.01, "KS p = {p}");
    }

    #[test]
    fn determinism_same_seed() {
        let mut a = substream(5, 9);
        let mut b = substream(5, 9);
        for _ in 0..100 {
            assert_eq!(
                draw_pg1(1.3, &mut a).unwrap().value,
                draw_pg1(1.3, &mut b).unwrap().value
            );
        }
    }

    #[test]
    fn oracle_rejects_few_terms() {
        let mut rng = substream(2, 0);
        assert!(pg_oracle_draw(1.0, 0.0, 99, &mut rng).is_err());
    }

    #[test]
    fn oracle_mean_at_zero() {
        // Oracle self-consistency against the analytic limit 0.25.
        let mut rng = substream(3, 0);
        let n = 100_000;
        let m = (0..n)
            .map(|_| pg_oracle_draw(1.0, 0.0, 10_000, &mut rng).unwrap().value)
            .sum::<f64>()
            / n as f64;
        assert!((m - 0.25).abs() < 1e-3, "oracle mean {m}");
    }

    #[test]
    fn oracle_additive_in_shape() {
        let mut rng = substream(4, 0);
        let n = 20_000;
        let m = (0..n)
            .map(|_| pg_oracle_draw(2.0, 0.0, 1_000, &mut rng).unwrap().value)
            .sum::<f64>()
            / n as f64;
        assert!((m - 0.5).abs() < 5e-3, "b=2 oracle mean {m}");
    }

    #[test]
    fn oracle_matches_exact_sampler() {
        let mut rng = substream(6, 0);
        let a: Vec<f64> = (0..10_000)
            .map(|_| draw_pg1(1.0, &mut rng).unwrap().value)
            .collect();
        let b: Vec<f64> = (0..10_000)
            .map(|_| pg_oracle_draw(1.0, 1.0, 10_000, &mut rng).unwrap().value)
            .collect();
        let d = crate::stats::ks_two_sample_statistic(&a, &b);
        let p = crate::stats::ks_two_sample_pvalue(d, a.len(), b.len());
        assert!(p > 0.01, "KS p = {p}");
    }
}
