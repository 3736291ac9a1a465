//! Shared numerical helpers: log-space reductions, normal CDF wrappers,
//! Kolmogorov-Smirnov tests, and rank statistics.

use statrs::distribution::{ContinuousCDF, Normal};

/// log(sum(exp(v))) with max subtraction.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).unwrap();
    n.cdf(x)
}

/// Standard normal quantile function.
pub fn norm_inv_cdf(p: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).unwrap();
    n.inverse_cdf(p)
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_two_sample_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (n, m) = (sa.len(), sb.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let x = sa[i].min(sb[j]);
        while i < n && sa[i] <= x {
            i += 1;
        }
        while j < m && sb[j] <= x {
            j += 1;
        }
        let fa = i as f64 / n as f64;
        let fb = j as f64 / m as f64;
        d = d.max((fa - fb).abs());
    }
    d
}

/// Asymptotic p-value for the two-sample KS statistic.
pub fn ks_two_sample_pvalue(d: f64, n: usize, m: usize) -> f64 {
    let en = ((n * m) as f64 / (n + m) as f64).sqrt();
    kolmogorov_sf(d * (en + 0.12 + 0.11 / en))
}

/// One-sample KS distance of `sample` against a CDF, allowing atoms
/// (sup over both sides of each jump of the empirical CDF).
pub fn ks_distance_cdf<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> f64 {
    let mut s = sample.to_vec();
    s.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    let mut i = 0;
    while i < s.len() {
        let x = s[i];
        let mut j = i;
        while j < s.len() && s[j] == x {
            j += 1;
        }
        // Tied block [i, j): the empirical CDF jumps from i/n to j/n here.
        // Compare the upper side against F(x) and the lower side against the
        // left limit F(x-), so an atom of the target at x is not counted as
        // discrepancy.
        d = d.max((cdf(x) - j as f64 / n).abs());
        d = d.max((cdf(x.next_down()) - i as f64 / n).abs());
        i = j;
    }
    d
}

/// Survival function of the Kolmogorov distribution,
/// Q(x) = 2 sum_{k>=1} (-1)^{k-1} exp(-2 k^2 x^2).
pub fn kolmogorov_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = (-2.0 * (k as f64).powi(2) * x * x).exp();
        sum += sign * term;
        sign = -sign;
        if term < 1e-12 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Average ranks (1-based), ties get the mean of their rank range.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average-rank ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    pearson(&ra, &rb)
}

/// Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        da += (x - ma).powi(2);
        db += (y - mb).powi(2);
    }
    num / (da.sqrt() * db.sqrt())
}

/// Sample mean and variance (unbiased).
pub fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var)
}

/// Equal-tailed empirical quantile, type-7 linear interpolation.
pub fn quantile_type7(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n as f64 - 1.0) * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}
