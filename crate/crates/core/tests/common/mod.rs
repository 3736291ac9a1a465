//! Shared helpers for the integration and acceptance suites: fixed covariate
//! generation, data generation under known parameters, and the moment
//! accounting used by the Geweke joint-distribution checks.
#![allow(dead_code)]

use ndarray::{Array2, Array3};
use nhmm_core::{CovariateSet, EmissionParams, StateChain, TransitionCoefficients};
use nhmm_core::emission::mixing_weights;
use nhmm_core::rng::substream;
use nhmm_core::simulate::draw_emission_value;
use nhmm_core::transition::compute_transition_matrix;
use rand::Rng;
use rand_distr::Distribution;

/// Standardized random covariates of the given shape, fixed by seed.
pub fn gen_covariates(t: usize, s: usize, a: usize, b: usize, seed: u64) -> CovariateSet {
    let mut rng = substream(seed, 0xC0);
    let raw_x = Array2::from_shape_fn((t, b), |_| rand_distr::StandardNormal.sample(&mut rng));
    let raw_w = Array3::from_shape_fn((t, s, a), |_| {
        rand_distr::StandardNormal.sample(&mut rng)
    });
    CovariateSet::standardize(
        raw_x,
        raw_w,
        (0..b).map(|i| format!("x{}", i + 1)).collect(),
        (0..a).map(|i| format!("w{}", i + 1)).collect(),
    )
    .unwrap()
}

/// Generate a fully observed panel and its state chain from the model at
/// fixed covariates (day one pinned to state 0).
pub fn gen_data_given<R: Rng + ?Sized>(
    trans: &TransitionCoefficients,
    emis: &EmissionParams,
    covs: &CovariateSet,
    rng: &mut R,
) -> (Array2<f64>, StateChain) {
    let t_len = covs.n_days();
    let s_len = covs.w.dim().1;
    let k = trans.n_states();
    let mut z = vec![0usize; t_len];
    let mut values = Array2::zeros((t_len, s_len));
    for t in 0..t_len {
        if t > 0 {
            let x_t: Vec<f64> = covs.x.row(t).to_vec();
            let q = compute_transition_matrix(trans, &x_t).unwrap();
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            z[t] = k - 1;
            for j in 0..k {
                acc += q.q[(z[t - 1], j)];
                if u <= acc {
                    z[t] = j;
                    break;
                }
            }
        }
        for s in 0..s_len {
            let mu = emis.probit_mean(z[t], t, s, &covs.w);
            let weights = mixing_weights(mu, emis.gamma[s]);
            values[(t, s)] = draw_emission_value(
                &weights,
                emis.lambda[(0, z[t], s)],
                emis.lambda[(1, z[t], s)],
                rng,
            );
        }
    }
    (values, StateChain { z })
}

/// Marginal log-likelihood by exhaustive enumeration over all state
/// sequences with day one pinned to state 0 (oracle for the forward
/// recursion).
pub fn brute_force_log_likelihood(
    panel: &nhmm_core::ObservationPanel,
    covs: &CovariateSet,
    trans: &TransitionCoefficients,
    emis: &EmissionParams,
) -> f64 {
    use nhmm_core::emission::log_emission_density;
    use nhmm_core::stats::log_sum_exp;
    let t_len = panel.n_days();
    let k = trans.n_states();
    let qs: Vec<_> = (0..t_len)
        .map(|t| {
            let x_t: Vec<f64> = covs.x.row(t).to_vec();
            compute_transition_matrix(trans, &x_t).unwrap()
        })
        .collect();
    let mut log_f = Array2::zeros((t_len, k));
    for t in 0..t_len {
        for kk in 0..k {
            let mut acc = 0.0;
            for s in 0..panel.n_stations() {
                if !panel.mask[(t, s)] {
                    continue;
                }
                let mu = emis.probit_mean(kk, t, s, &covs.w);
                let weights = mixing_weights(mu, emis.gamma[s]);
                acc += log_emission_density(
                    panel.values[(t, s)],
                    &weights,
                    emis.lambda[(0, kk, s)],
                    emis.lambda[(1, kk, s)],
                );
            }
            log_f[(t, kk)] = acc;
        }
    }
    let n_seq = k.pow((t_len - 1) as u32);
    let mut terms = Vec::with_capacity(n_seq);
    for idx in 0..n_seq {
        let mut rem = idx;
        let mut z = vec![0usize; t_len];
        for t in 1..t_len {
            z[t] = rem % k;
            rem /= k;
        }
        let mut lp = log_f[(0, 0)];
        for t in 1..t_len {
            lp += qs[t].q[(z[t - 1], z[t])].ln() + log_f[(t, z[t])];
        }
        terms.push(lp);
    }
    log_sum_exp(&terms)
}

/// Running first/second moments of a fixed set of scalar statistics, with a
/// batch-means standard error that remains valid for autocorrelated draws.
pub struct MomentTracker {
    pub names: Vec<String>,
    n: usize,
    sums: Vec<f64>,
    sq_sums: Vec<f64>,
    batch_size: usize,
    batch_acc: Vec<f64>,
    batch_sq_acc: Vec<f64>,
    batch_in: usize,
    batch_means: Vec<Vec<f64>>,
    batch_sq_means: Vec<Vec<f64>>,
}

impl MomentTracker {
    pub fn new(names: Vec<String>, batch_size: usize) -> Self {
        let d = names.len();
        Self {
            names,
            n: 0,
            sums: vec![0.0; d],
            sq_sums: vec![0.0; d],
            batch_size,
            batch_acc: vec![0.0; d],
            batch_sq_acc: vec![0.0; d],
            batch_in: 0,
            batch_means: Vec::new(),
            batch_sq_means: Vec::new(),
        }
    }

    pub fn push(&mut self, stats: &[f64]) {
        assert_eq!(stats.len(), self.sums.len());
        self.n += 1;
        self.batch_in += 1;
        for (i, &v) in stats.iter().enumerate() {
            self.sums[i] += v;
            self.sq_sums[i] += v * v;
            self.batch_acc[i] += v;
            self.batch_sq_acc[i] += v * v;
        }
        if self.batch_in == self.batch_size {
            let bs = self.batch_size as f64;
            self.batch_means
                .push(self.batch_acc.iter().map(|v| v / bs).collect());
            self.batch_sq_means
                .push(self.batch_sq_acc.iter().map(|v| v / bs).collect());
            self.batch_acc.iter_mut().for_each(|v| *v = 0.0);
            self.batch_sq_acc.iter_mut().for_each(|v| *v = 0.0);
            self.batch_in = 0;
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        self.sums[i] / self.n as f64
    }

    pub fn sq_mean(&self, i: usize) -> f64 {
        self.sq_sums[i] / self.n as f64
    }

    fn batch_se(series: &[Vec<f64>], i: usize) -> f64 {
        let m = series.len() as f64;
        let mean = series.iter().map(|b| b[i]).sum::<f64>() / m;
        let var = series.iter().map(|b| (b[i] - mean).powi(2)).sum::<f64>() / (m - 1.0);
        (var / m).sqrt()
    }

    /// Batch-means SE of the first-moment estimate of statistic i.
    pub fn se_mean(&self, i: usize) -> f64 {
        Self::batch_se(&self.batch_means, i)
    }

    /// Batch-means SE of the second-moment estimate of statistic i.
    pub fn se_sq_mean(&self, i: usize) -> f64 {
        Self::batch_se(&self.batch_sq_means, i)
    }
}

/// One Geweke moment comparison line; |z| = |m1 - m2| / sqrt(se1^2 + se2^2).
pub struct MomentComparison {
    pub name: String,
    pub z_mean: f64,
    pub z_sq: f64,
}

pub fn compare_trackers(a: &MomentTracker, b: &MomentTracker) -> Vec<MomentComparison> {
    assert_eq!(a.names, b.names);
    (0..a.names.len())
        .map(|i| {
            let se_m = (a.se_mean(i).powi(2) + b.se_mean(i).powi(2)).sqrt();
            let se_s = (a.se_sq_mean(i).powi(2) + b.se_sq_mean(i).powi(2)).sqrt();
            MomentComparison {
                name: a.names[i].clone(),
                z_mean: (a.mean(i) - b.mean(i)).abs() / se_m,
                z_sq: (a.sq_mean(i) - b.sq_mean(i)).abs() / se_s,
            }
        })
        .collect()
}
