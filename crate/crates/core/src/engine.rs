//! Full Gibbs sweep orchestration: missing-data imputation, emission and
//! transition updates, hidden-state sampling, burn-in/retention bookkeeping,
//! and posterior persistence.
//!
//! Sweep order (fixed for reproducibility): impute missing y, then the
//! emission block (L/M, cutpoints, betas, rates), then the hidden states,
//! then the transition block (Polya-Gamma latents and zeta). The state
//! update marginalizes the per-cell latents, which are refreshed before
//! their next use, so the composition is a valid partially-collapsed Gibbs
//! scan.

use crate::data::{ColumnTransform, CovariateSet, ObservationPanel};
use crate::emission::{
    self, mixing_weights, EmissionParams, ProbitLatents,
};
use crate::error::{NhmmError, Result};
use crate::rng::substream;
use crate::states::{self, StateChain};
use crate::stats::quantile_type7;
use crate::transition::{
    build_design, compute_transition_matrix, sample_zeta, PGAugmentationState,
    TransitionCoefficients, TransitionMatrix, ZetaPrior,
};
use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// MCMC run settings. `iterations` counts retained sweeps; burn-in sweeps
/// are added on top as a fraction of `iterations`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub iterations: usize,
    pub burn_in_fraction: f64,
    pub seed: u64,
    pub k: usize,
    pub thinning: usize,
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(NhmmError::Config("iterations must be >= 1".into()));
        }
        if self.thinning < 1 {
            return Err(NhmmError::Config("thinning must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            return Err(NhmmError::Config("burn-in fraction must be in [0, 1)".into()));
        }
        if self.k < 1 {
            return Err(NhmmError::Config("K must be >= 1".into()));
        }
        Ok(())
    }

    pub fn burn_in_sweeps(&self) -> usize {
        (self.iterations as f64 * self.burn_in_fraction).ceil() as usize
    }
}

/// Prior settings for all sampled blocks. Defaults follow the
/// noninformative choices used for the rainfall application: flat zeta and
/// beta priors and low-weight Gamma(1, 1) priors on the rates.
#[derive(Debug, Clone, PartialEq)]
pub struct Priors {
    /// Shared normal prior on every zeta coefficient; `None` variance is
    /// the noninformative limit.
    pub zeta: ZetaPrior,
    /// Optional per-coefficient override, K x (K+B).
    pub zeta_per_coefficient: Option<Array2<ZetaPrior>>,
    /// Prior precision on the emission regression coefficients (0 = flat).
    pub beta_precision: f64,
    pub lambda_shape: f64,
    pub lambda_rate: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Self {
            zeta: ZetaPrior::default(),
            zeta_per_coefficient: None,
            beta_precision: 0.0,
            lambda_shape: 1.0,
            lambda_rate: 1.0,
        }
    }
}

impl Priors {
    pub fn zeta_matrix(&self, k: usize, d: usize) -> Result<Array2<ZetaPrior>> {
        match &self.zeta_per_coefficient {
            Some(m) => {
                if m.dim() != (k, d) {
                    return Err(NhmmError::Dimension(format!(
                        "zeta prior matrix {:?}, expected ({k}, {d})",
                        m.dim()
                    )));
                }
                Ok(m.clone())
            }
            None => Ok(Array2::from_elem((k, d), self.zeta.clone())),
        }
    }
}

/// Counters for the rare degenerate update paths.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub degenerate_gamma_intervals: usize,
    pub beta_ridge_events: usize,
    /// Accepted label-permutation Metropolis moves (mode hops).
    #[serde(default)]
    pub label_permutation_accepts: usize,
}

/// One MCMC chain: data, configuration, and the current model state.
pub struct Sampler {
    pub panel: ObservationPanel,
    pub covs: CovariateSet,
    pub config: McmcConfig,
    pub priors: Priors,
    /// Working observations with the current imputations filled in.
    pub y: Array2<f64>,
    pub chain: StateChain,
    pub trans: TransitionCoefficients,
    pub emis: EmissionParams,
    pub latents: ProbitLatents,
    pub aug: PGAugmentationState,
    pub diagnostics: Diagnostics,
    zeta_prior: Array2<ZetaPrior>,
    missing_cells: Vec<(usize, usize)>,
    q_cache: Vec<TransitionMatrix>,
}

impl Sampler {
    pub fn new(
        panel: ObservationPanel,
        covs: CovariateSet,
        config: McmcConfig,
        priors: Priors,
    ) -> Result<Self> {
        config.validate()?;
        let t = panel.n_days();
        let s = panel.n_stations();
        if covs.n_days() != t || covs.w.dim().0 != t || covs.w.dim().1 != s {
            return Err(NhmmError::Dimension(format!(
                "covariates ({} days x, {:?} w) do not match the {t}x{s} panel",
                covs.n_days(),
                covs.w.dim()
            )));
        }
        if covs.x.iter().any(|v| !v.is_finite()) || covs.w.iter().any(|v| !v.is_finite()) {
            return Err(NhmmError::InvalidInput("non-finite covariates".into()));
        }
        let k = config.k;
        let b = covs.b_dim();
        let a = covs.a_dim();
        let mut init_rng = substream(config.seed, 0xA11);
        let chain = StateChain::init_uniform(t, k, &mut init_rng);
        let trans = TransitionCoefficients::zeros(k, b);
        let emis = EmissionParams::init(k, s, a);
        let latents = ProbitLatents::new(t, s);
        let aug = PGAugmentationState::new(t, k);
        let zeta_prior = priors.zeta_matrix(k, k + b)?;
        let missing_cells: Vec<(usize, usize)> = panel
            .mask
            .indexed_iter()
            .filter(|(_, &obs)| !obs)
            .map(|((i, j), _)| (i, j))
            .collect();
        let y = panel.values.clone();
        let mut sampler = Self {
            panel,
            covs,
            config,
            priors,
            y,
            chain,
            trans,
            emis,
            latents,
            aug,
            diagnostics: Diagnostics::default(),
            zeta_prior,
            missing_cells,
            q_cache: Vec::new(),
        };
        sampler.refresh_transition_cache()?;
        Ok(sampler)
    }

    pub fn missing_cells(&self) -> &[(usize, usize)] {
        &self.missing_cells
    }

    /// Recompute the per-day transition matrices from the current zeta.
    pub fn refresh_transition_cache(&mut self) -> Result<()> {
        let t = self.panel.n_days();
        let mut cache = Vec::with_capacity(t);
        for day in 0..t {
            let x_t: Vec<f64> = self.covs.x.row(day).to_vec();
            cache.push(compute_transition_matrix(&self.trans, &x_t)?);
        }
        self.q_cache = cache;
        Ok(())
    }

    /// Draw every missing cell from the emission mixture at its current
    /// state.
    pub fn impute_missing<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for idx in 0..self.missing_cells.len() {
            let (t, s) = self.missing_cells[idx];
            let zt = self.chain.z[t];
            let mu = self.emis.probit_mean(zt, t, s, &self.covs.w);
            let weights = mixing_weights(mu, self.emis.gamma[s]);
            let u: f64 = rng.gen();
            self.y[(t, s)] = if u < weights.p0 {
                0.0
            } else {
                let rate = if u < weights.p0 + weights.p1 {
                    self.emis.lambda[(0, zt, s)]
                } else {
                    self.emis.lambda[(1, zt, s)]
                };
                let e: f64 = Exp1.sample(rng);
                e / rate
            };
        }
    }

    /// Summed per-state emission log-densities at day t over observed and
    /// imputed cells alike (the latents condition on the imputations).
    fn emission_log_f(&self, t: usize, out: &mut [f64]) {
        let s_len = self.panel.n_stations();
        for (k, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for s in 0..s_len {
                if !self.panel.mask[(t, s)] {
                    // Missing cells are marginalized out of the state weights.
                    continue;
                }
                let mu = self.emis.probit_mean(k, t, s, &self.covs.w);
                let weights = mixing_weights(mu, self.emis.gamma[s]);
                acc += emission::log_emission_density(
                    self.y[(t, s)],
                    &weights,
                    self.emis.lambda[(0, k, s)],
                    self.emis.lambda[(1, k, s)],
                );
            }
            *o = acc;
        }
    }

    /// One full Gibbs sweep.
    pub fn sweep<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        // 1. Imputation.
        self.impute_missing(rng);
        // 2. Emission block. The cutpoints first get a collapsed update
        // (L, M marginalized; both are redrawn just below before anything
        // reads them) — the interval-uniform conditional alone mixes too
        // slowly to traverse the posterior at panel-sized station counts.
        emission::sample_gamma_collapsed(
            &self.y,
            &self.chain.z,
            &self.covs.w,
            &mut self.emis,
            emission::GAMMA_CAP,
            rng,
        );
        let degen = emission::sweep_latents(
            &self.y,
            &self.chain.z,
            &self.covs.w,
            &mut self.emis,
            &mut self.latents,
            rng,
        )?;
        self.diagnostics.degenerate_gamma_intervals += degen;
        let ridge = emission::sample_betas(
            &self.latents,
            &self.chain.z,
            &self.covs.w,
            &mut self.emis,
            self.priors.beta_precision,
            rng,
        )?;
        self.diagnostics.beta_ridge_events += ridge;
        emission::sample_lambdas(
            &self.y,
            &self.latents,
            &self.chain.z,
            &mut self.emis,
            self.priors.lambda_shape,
            self.priors.lambda_rate,
            rng,
        );
        // 3. Hidden states.
        let q_cache = std::mem::take(&mut self.q_cache);
        let res = {
            let mut chain = std::mem::replace(&mut self.chain, StateChain { z: vec![0] });
            let r = states::sweep_states(
                &mut chain,
                self.config.k,
                |t| q_cache[t].clone(),
                |t, buf| self.emission_log_f(t, buf),
                rng,
            );
            self.chain = chain;
            r
        };
        self.q_cache = q_cache;
        res?;
        // 3b. Label-permutation Metropolis move. The logistic-PG and probit
        // updates are single-mode moves; if the chain initializes in a
        // relabeled mode they can never reach the day-one-anchored labeling.
        // This exact MH hop restores irreducibility across relabelings.
        self.label_permutation_move(rng)?;
        // 4. Transition block.
        let design = build_design(&self.chain.z, &self.covs.x, self.config.k)?;
        sample_zeta(&design, &mut self.trans, &mut self.aug, &self.zeta_prior, rng)?;
        self.refresh_transition_cache()?;
        Ok(())
    }

    /// Complete-data log-likelihood at the current draw (emission terms at
    /// observed cells plus transition terms along the sampled chain).
    pub fn complete_data_log_likelihood(&self) -> f64 {
        self.complete_data_ll_with(&self.chain.z, &self.emis, &self.q_cache)
    }

    fn complete_data_ll_with(
        &self,
        z: &[usize],
        emis: &EmissionParams,
        q_cache: &[TransitionMatrix],
    ) -> f64 {
        let t_len = self.panel.n_days();
        let s_len = self.panel.n_stations();
        let mut total = 0.0;
        for t in 0..t_len {
            let zt = z[t];
            for s in 0..s_len {
                if !self.panel.mask[(t, s)] {
                    continue;
                }
                let mu = emis.probit_mean(zt, t, s, &self.covs.w);
                let weights = mixing_weights(mu, emis.gamma[s]);
                total += emission::log_emission_density(
                    self.y[(t, s)],
                    &weights,
                    emis.lambda[(0, zt, s)],
                    emis.lambda[(1, zt, s)],
                );
            }
            if t > 0 {
                total += q_cache[t].q[(z[t - 1], zt)].ln();
            }
        }
        total
    }

    /// Log prior density of the free zeta coefficients, up to an additive
    /// constant shared by all zeta values.
    fn zeta_log_prior(&self, zeta: &Array2<f64>) -> f64 {
        let pinned = self.trans.pinned;
        let mut acc = 0.0;
        for ((j, c), prior) in self.zeta_prior.indexed_iter() {
            if j == pinned {
                continue;
            }
            let prec = prior.precision();
            if prec > 0.0 {
                let d = zeta[(j, c)] - prior.mean;
                acc -= 0.5 * prec * d * d;
            }
        }
        acc
    }

    /// The configuration with state labels a and b transposed: states
    /// relabel (day one held at 0), emission rows swap, and zeta rows
    /// permute and re-pin (new row j = old row sigma(j) minus old row
    /// sigma(pinned), intercept columns permuted), which maps every per-day
    /// transition matrix to Q'(i, j) = Q(sigma(i), sigma(j)).
    fn transposed_configuration(
        &self,
        a: usize,
        b: usize,
    ) -> Result<(TransitionCoefficients, EmissionParams, Vec<usize>)> {
        let k = self.config.k;
        let sigma = |j: usize| {
            if j == a {
                b
            } else if j == b {
                a
            } else {
                j
            }
        };
        let pinned = self.trans.pinned;
        let cols = self.trans.zeta.ncols();
        let mut zeta_new = Array2::zeros((k, cols));
        for j in 0..k {
            for c in 0..cols {
                let src = if c < k { sigma(c) } else { c };
                zeta_new[(j, c)] =
                    self.trans.zeta[(sigma(j), src)] - self.trans.zeta[(sigma(pinned), src)];
            }
        }
        // Clear rounding residue so the pinned row stays exactly zero.
        for c in 0..cols {
            zeta_new[(pinned, c)] = 0.0;
        }
        let trans_new = TransitionCoefficients::new(zeta_new, pinned)?;
        let mut emis_new = self.emis.clone();
        for s in 0..self.panel.n_stations() {
            emis_new.beta0[(a, s)] = self.emis.beta0[(b, s)];
            emis_new.beta0[(b, s)] = self.emis.beta0[(a, s)];
            for comp in 0..2 {
                emis_new.lambda[(comp, a, s)] = self.emis.lambda[(comp, b, s)];
                emis_new.lambda[(comp, b, s)] = self.emis.lambda[(comp, a, s)];
            }
        }
        let mut z_new = self.chain.z.clone();
        for zt in z_new.iter_mut().skip(1) {
            *zt = sigma(*zt);
        }
        Ok((trans_new, emis_new, z_new))
    }

    /// Metropolis move proposing a transposition of two state labels across
    /// (z, zeta, beta0, lambda), with day one held at state 0.
    ///
    /// The proposal is a deterministic involution: states relabel, emission
    /// rows swap, and zeta rows permute and re-pin (new row j = old row
    /// sigma(j) minus old row sigma(pinned), intercept columns permuted),
    /// which leaves every per-day transition matrix equal up to the
    /// relabeling. All coordinate maps are linear with unit Jacobian, so the
    /// acceptance ratio is the posterior ratio — which differs from 1 only
    /// through the day-one emission and first transition terms plus the zeta
    /// prior. The posterior is invariant under this kernel; its purpose is
    /// to let the chain hop out of a relabeled mode, which the single-block
    /// conjugate updates cannot leave, so the retained draws settle in the
    /// day-one-anchored labeling that dominates the posterior.
    pub fn label_permutation_move<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let k = self.config.k;
        if k < 2 {
            return Ok(());
        }
        let a = rng.gen_range(0..k);
        let b = (a + rng.gen_range(1..k)) % k;
        let (trans_new, emis_new, z_new) = self.transposed_configuration(a, b)?;
        let mut q_new = Vec::with_capacity(self.panel.n_days());
        for day in 0..self.panel.n_days() {
            let x_t: Vec<f64> = self.covs.x.row(day).to_vec();
            q_new.push(compute_transition_matrix(&trans_new, &x_t)?);
        }
        let current = self.complete_data_log_likelihood() + self.zeta_log_prior(&self.trans.zeta);
        let proposed = self.complete_data_ll_with(&z_new, &emis_new, &q_new)
            + self.zeta_log_prior(&trans_new.zeta);
        let u: f64 = rng.gen();
        if u.ln() < proposed - current {
            self.trans = trans_new;
            self.emis = emis_new;
            self.chain.z = z_new;
            self.q_cache = q_new;
            self.diagnostics.label_permutation_accepts += 1;
        }
        Ok(())
    }

    /// Run burn-in plus retained sweeps, collecting the posterior store.
    pub fn run(&mut self) -> Result<PosteriorStore> {
        let mut rng = substream(self.config.seed, 0);
        let burn = self.config.burn_in_sweeps();
        let retained = self.config.iterations;
        let mut store = PosteriorStore::empty(self);
        for _ in 0..burn {
            self.sweep(&mut rng)?;
        }
        for i in 0..retained {
            self.sweep(&mut rng)?;
            if (i + 1) % self.config.thinning == 0 {
                store.push(self);
            }
        }
        store.diagnostics = self.diagnostics;
        Ok(store)
    }
}

/// Validate inputs, build a [`Sampler`], and run the chain.
pub fn run_chain(
    panel: ObservationPanel,
    covs: CovariateSet,
    config: McmcConfig,
    priors: Priors,
) -> Result<PosteriorStore> {
    Sampler::new(panel, covs, config, priors)?.run()
}

/// Retained MCMC draws of all parameter blocks, imputations, and per-draw
/// log-likelihoods, with everything needed to resume simulation/forecasting.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorStore {
    pub config: McmcConfig,
    pub n_days: usize,
    pub stations: Vec<String>,
    pub x_names: Vec<String>,
    pub w_names: Vec<String>,
    pub x_transforms: Vec<ColumnTransform>,
    pub w_transforms: Vec<ColumnTransform>,
    pub pinned: usize,
    pub missing_cells: Vec<(usize, usize)>,
    pub zeta: Vec<Array2<f64>>,
    pub lambda: Vec<Array3<f64>>,
    pub beta0: Vec<Array2<f64>>,
    pub beta1: Vec<Array2<f64>>,
    pub gamma: Vec<Array1<f64>>,
    pub states: Vec<StateChain>,
    pub imputed: Vec<Vec<f64>>,
    pub log_likelihood: Vec<f64>,
    pub diagnostics: Diagnostics,
}

impl PosteriorStore {
    fn empty(sampler: &Sampler) -> Self {
        Self {
            config: sampler.config,
            n_days: sampler.panel.n_days(),
            stations: sampler.panel.stations.clone(),
            x_names: sampler.covs.x_names.clone(),
            w_names: sampler.covs.w_names.clone(),
            x_transforms: sampler.covs.x_transforms.clone(),
            w_transforms: sampler.covs.w_transforms.clone(),
            pinned: sampler.trans.pinned,
            missing_cells: sampler.missing_cells.clone(),
            zeta: Vec::new(),
            lambda: Vec::new(),
            beta0: Vec::new(),
            beta1: Vec::new(),
            gamma: Vec::new(),
            states: Vec::new(),
            imputed: Vec::new(),
            log_likelihood: Vec::new(),
            diagnostics: Diagnostics::default(),
        }
    }

    fn push(&mut self, sampler: &Sampler) {
        self.zeta.push(sampler.trans.zeta.clone());
        self.lambda.push(sampler.emis.lambda.clone());
        self.beta0.push(sampler.emis.beta0.clone());
        self.beta1.push(sampler.emis.beta1.clone());
        self.gamma.push(sampler.emis.gamma.clone());
        self.states.push(sampler.chain.clone());
        self.imputed.push(
            sampler
                .missing_cells
                .iter()
                .map(|&(t, s)| sampler.y[(t, s)])
                .collect(),
        );
        self.log_likelihood
            .push(sampler.complete_data_log_likelihood());
    }

    pub fn n_draws(&self) -> usize {
        self.zeta.len()
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn n_stations(&self) -> usize {
        self.stations.len()
    }

    pub fn a_dim(&self) -> usize {
        self.w_names.len()
    }

    pub fn b_dim(&self) -> usize {
        self.x_names.len()
    }

    /// Parameters of one retained draw.
    pub fn draw_params(&self, i: usize) -> (TransitionCoefficients, EmissionParams) {
        (
            TransitionCoefficients {
                zeta: self.zeta[i].clone(),
                pinned: self.pinned,
            },
            EmissionParams {
                lambda: self.lambda[i].clone(),
                beta0: self.beta0[i].clone(),
                beta1: self.beta1[i].clone(),
                gamma: self.gamma[i].clone(),
            },
        )
    }

    /// Posterior-mean plug-in parameters (used for the BIC evaluation).
    pub fn posterior_mean_params(&self) -> (TransitionCoefficients, EmissionParams) {
        let n = self.n_draws() as f64;
        let mut zeta = self.zeta[0].clone();
        zeta.fill(0.0);
        for d in &self.zeta {
            zeta += d;
        }
        zeta /= n;
        let mut lambda = self.lambda[0].clone();
        lambda.fill(0.0);
        for d in &self.lambda {
            lambda += d;
        }
        lambda /= n;
        let mut beta0 = self.beta0[0].clone();
        beta0.fill(0.0);
        for d in &self.beta0 {
            beta0 += d;
        }
        beta0 /= n;
        let mut beta1 = self.beta1[0].clone();
        beta1.fill(0.0);
        for d in &self.beta1 {
            beta1 += d;
        }
        beta1 /= n;
        let mut gamma = self.gamma[0].clone();
        gamma.fill(0.0);
        for d in &self.gamma {
            gamma += d;
        }
        gamma /= n;
        (
            TransitionCoefficients {
                zeta,
                pinned: self.pinned,
            },
            EmissionParams {
                lambda,
                beta0,
                beta1,
                gamma,
            },
        )
    }
}

/// Posterior summary of one scalar parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub family: String,
    pub index: Vec<usize>,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
    /// Credible interval excludes zero.
    pub significant: bool,
}

/// Per-scalar posterior means and equal-tailed credible intervals at the
/// given level (type-7 empirical quantiles).
pub fn summarize(store: &PosteriorStore, credibility: f64) -> Result<Vec<ParameterSummary>> {
    if store.n_draws() < 2 {
        return Err(NhmmError::InvalidInput(
            "need at least 2 retained draws to summarize".into(),
        ));
    }
    let mut out = Vec::new();
    let lo_p = (1.0 - credibility) / 2.0;
    let hi_p = 1.0 - lo_p;
    let mut emit = |family: &str, index: Vec<usize>, draws: Vec<f64>| {
        let mut sorted = draws.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let lower = quantile_type7(&sorted, lo_p);
        let upper = quantile_type7(&sorted, hi_p);
        out.push(ParameterSummary {
            family: family.to_string(),
            index,
            mean,
            lower,
            upper,
            significant: lower > 0.0 || upper < 0.0,
        });
    };
    let k = store.k();
    let d = store.zeta[0].ncols();
    for kk in 0..k {
        for h in 0..d {
            emit(
                "zeta",
                vec![kk, h],
                store.zeta.iter().map(|m| m[(kk, h)]).collect(),
            );
        }
    }
    let s_len = store.n_stations();
    for j in 0..2 {
        for kk in 0..k {
            for s in 0..s_len {
                emit(
                    "lambda",
                    vec![j, kk, s],
                    store.lambda.iter().map(|m| m[(j, kk, s)]).collect(),
                );
            }
        }
    }
    for kk in 0..k {
        for s in 0..s_len {
            emit(
                "beta0",
                vec![kk, s],
                store.beta0.iter().map(|m| m[(kk, s)]).collect(),
            );
        }
    }
    for a in 0..store.a_dim() {
        for s in 0..s_len {
            emit(
                "beta1",
                vec![a, s],
                store.beta1.iter().map(|m| m[(a, s)]).collect(),
            );
        }
    }
    for s in 0..s_len {
        emit(
            "gamma",
            vec![s],
            store.gamma.iter().map(|m| m[s]).collect(),
        );
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: McmcConfig,
    n_days: usize,
    stations: Vec<String>,
    x_names: Vec<String>,
    w_names: Vec<String>,
    x_transforms: Vec<ColumnTransform>,
    w_transforms: Vec<ColumnTransform>,
    pinned: usize,
    missing_cells: Vec<(usize, usize)>,
    n_draws: usize,
    diagnostics: Diagnostics,
}

fn write_family<P: AsRef<Path>>(path: P, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    writeln!(f, "{header}")?;
    for row in rows {
        writeln!(f, "{row}")?;
    }
    Ok(())
}

impl PosteriorStore {
    /// Persist the store: one CSV per parameter family plus a JSON manifest.
    pub fn save<P: AsRef<Path>>(&self, dir: P) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let manifest = Manifest {
            config: self.config,
            n_days: self.n_days,
            stations: self.stations.clone(),
            x_names: self.x_names.clone(),
            w_names: self.w_names.clone(),
            x_transforms: self.x_transforms.clone(),
            w_transforms: self.w_transforms.clone(),
            pinned: self.pinned,
            missing_cells: self.missing_cells.clone(),
            n_draws: self.n_draws(),
            diagnostics: self.diagnostics,
        };
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        write_family(
            dir.join("zeta.csv"),
            "draw,state,coef,value",
            self.zeta.iter().enumerate().flat_map(|(n, m)| {
                m.indexed_iter()
                    .map(move |((k, h), v)| format!("{n},{k},{h},{v}"))
            }),
        )?;
        write_family(
            dir.join("lambda.csv"),
            "draw,component,state,station,value",
            self.lambda.iter().enumerate().flat_map(|(n, m)| {
                m.indexed_iter()
                    .map(move |((j, k, s), v)| format!("{n},{j},{k},{s},{v}"))
            }),
        )?;
        write_family(
            dir.join("beta0.csv"),
            "draw,state,station,value",
            self.beta0.iter().enumerate().flat_map(|(n, m)| {
                m.indexed_iter()
                    .map(move |((k, s), v)| format!("{n},{k},{s},{v}"))
            }),
        )?;
        write_family(
            dir.join("beta1.csv"),
            "draw,covariate,station,value",
            self.beta1.iter().enumerate().flat_map(|(n, m)| {
                m.indexed_iter()
                    .map(move |((a, s), v)| format!("{n},{a},{s},{v}"))
            }),
        )?;
        write_family(
            dir.join("gamma.csv"),
            "draw,station,value",
            self.gamma.iter().enumerate().flat_map(|(n, m)| {
                m.indexed_iter().map(move |(s, v)| format!("{n},{s},{v}"))
            }),
        )?;
        write_family(
            dir.join("states.csv"),
            "draw,day,value",
            self.states.iter().enumerate().flat_map(|(n, c)| {
                c.z.iter()
                    .enumerate()
                    .map(move |(t, z)| format!("{n},{t},{z}"))
            }),
        )?;
        write_family(
            dir.join("imputed.csv"),
            "draw,day,station,value",
            self.imputed.iter().enumerate().flat_map(|(n, vals)| {
                let cells = &self.missing_cells;
                vals.iter()
                    .zip(cells.iter())
                    .map(move |(v, &(t, s))| format!("{n},{t},{s},{v}"))
            }),
        )?;
        write_family(
            dir.join("loglik.csv"),
            "draw,value",
            self.log_likelihood
                .iter()
                .enumerate()
                .map(|(n, v)| format!("{n},{v}")),
        )?;
        Ok(())
    }

    /// Reload a persisted store.
    pub fn load<P: AsRef<Path>>(dir: P) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let n = manifest.n_draws;
        let k = manifest.config.k;
        let s_len = manifest.stations.len();
        let a = manifest.w_names.len();
        let b = manifest.x_names.len();
        let mut store = Self {
            config: manifest.config,
            n_days: manifest.n_days,
            stations: manifest.stations,
            x_names: manifest.x_names,
            w_names: manifest.w_names,
            x_transforms: manifest.x_transforms,
            w_transforms: manifest.w_transforms,
            pinned: manifest.pinned,
            missing_cells: manifest.missing_cells,
            zeta: vec![Array2::zeros((k, k + b)); n],
            lambda: vec![Array3::zeros((2, k, s_len)); n],
            beta0: vec![Array2::zeros((k, s_len)); n],
            beta1: vec![Array2::zeros((a, s_len)); n],
            gamma: vec![Array1::zeros(s_len); n],
            states: vec![
                StateChain {
                    z: vec![0; manifest.n_days]
                };
                n
            ],
            imputed: Vec::new(),
            log_likelihood: vec![0.0; n],
            diagnostics: manifest.diagnostics,
        };
        store.imputed = vec![vec![0.0; store.missing_cells.len()]; n];
        let read = |name: &str| -> Result<Vec<Vec<String>>> {
            let mut rdr = csv::ReaderBuilder::new()
                .has_headers(true)
                .from_path(dir.join(name))?;
            let mut rows = Vec::new();
            for rec in rdr.records() {
                rows.push(rec?.iter().map(|c| c.to_string()).collect());
            }
            Ok(rows)
        };
        let pf = |v: &str| -> Result<f64> {
            v.parse()
                .map_err(|_| NhmmError::InvalidInput(format!("bad float {v:?} in store")))
        };
        let pu = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| NhmmError::InvalidInput(format!("bad index {v:?} in store")))
        };
        for r in read("zeta.csv")? {
            store.zeta[pu(&r[0])?][(pu(&r[1])?, pu(&r[2])?)] = pf(&r[3])?;
        }
        for r in read("lambda.csv")? {
            store.lambda[pu(&r[0])?][(pu(&r[1])?, pu(&r[2])?, pu(&r[3])?)] = pf(&r[4])?;
        }
        for r in read("beta0.csv")? {
            store.beta0[pu(&r[0])?][(pu(&r[1])?, pu(&r[2])?)] = pf(&r[3])?;
        }
        for r in read("beta1.csv")? {
            store.beta1[pu(&r[0])?][(pu(&r[1])?, pu(&r[2])?)] = pf(&r[3])?;
        }
        for r in read("gamma.csv")? {
            store.gamma[pu(&r[0])?][pu(&r[1])?] = pf(&r[2])?;
        }
        for r in read("states.csv")? {
            store.states[pu(&r[0])?].z[pu(&r[1])?] = pu(&r[2])?;
        }
        let cell_index: std::collections::HashMap<(usize, usize), usize> = store
            .missing_cells
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i))
            .collect();
        for r in read("imputed.csv")? {
            let cell = (pu(&r[1])?, pu(&r[2])?);
            let idx = *cell_index.get(&cell).ok_or_else(|| {
                NhmmError::InvalidInput(format!("imputed cell {cell:?} not in manifest"))
            })?;
            store.imputed[pu(&r[0])?][idx] = pf(&r[3])?;
        }
        for r in read("loglik.csv")? {
            store.log_likelihood[pu(&r[0])?] = pf(&r[1])?;
        }
        Ok(store)
    }
}
