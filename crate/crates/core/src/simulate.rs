//! Predictive simulation: conditional chain generation over new covariates,
//! posterior forecasting, scenario sweeps, and the synthetic-data generator
//! used by the recovery tests.

use crate::data::{CovariateSet, ObservationPanel};
use crate::emission::{mixing_weights, EmissionParams, MixingWeights};
use crate::engine::PosteriorStore;
use crate::error::{NhmmError, Result};
use crate::rng::substream;
use crate::states::StateChain;
use crate::transition::{compute_transition_matrix, TransitionCoefficients, TransitionMatrix};
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;

/// One simulated predictive path over R forecast steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastDraw {
    /// Per-step transition matrix built from the new exogenous covariates.
    pub q_star: Vec<TransitionMatrix>,
    pub z_star: Vec<usize>,
    /// R x S simulated observations.
    pub y_star: Array2<f64>,
}

/// One draw from the zero-inflated two-exponential mixture.
pub fn draw_emission_value<R: Rng + ?Sized>(
    weights: &MixingWeights,
    lambda1: f64,
    lambda2: f64,
    rng: &mut R,
) -> f64 {
    let u: f64 = rng.gen();
    if u < weights.p0 {
        0.0
    } else {
        let rate = if u < weights.p0 + weights.p1 {
            lambda1
        } else {
            lambda2
        };
        let e: f64 = Exp1.sample(rng);
        e / rate
    }
}

/// Simulate one predictive chain under fixed parameters: per step build Q
/// from the new x, step the state, and draw observations from the emission
/// mixture at the new w.
pub fn simulate_chain<R: Rng + ?Sized>(
    trans: &TransitionCoefficients,
    emis: &EmissionParams,
    x_new: &Array2<f64>,
    w_new: &Array3<f64>,
    init_state: usize,
    rng: &mut R,
) -> Result<ForecastDraw> {
    let r_steps = x_new.nrows();
    let k = trans.n_states();
    let s_len = emis.n_stations();
    if r_steps == 0 {
        return Err(NhmmError::InvalidInput("no forecast steps".into()));
    }
    if x_new.ncols() != trans.b_dim() {
        return Err(NhmmError::Dimension(format!(
            "x has {} columns, transition coefficients expect {}",
            x_new.ncols(),
            trans.b_dim()
        )));
    }
    if w_new.dim() != (r_steps, s_len, emis.a_dim()) {
        return Err(NhmmError::Dimension(format!(
            "w is {:?}, expected ({r_steps}, {s_len}, {})",
            w_new.dim(),
            emis.a_dim()
        )));
    }
    if emis.n_states() != k {
        return Err(NhmmError::Dimension(format!(
            "transition has {k} states, emission {}",
            emis.n_states()
        )));
    }
    if init_state >= k {
        return Err(NhmmError::InvalidInput(format!(
            "initial state {init_state} outside 0..{k}"
        )));
    }
    let mut q_star = Vec::with_capacity(r_steps);
    let mut z_star = Vec::with_capacity(r_steps);
    let mut y_star = Array2::zeros((r_steps, s_len));
    let mut prev = init_state;
    for r in 0..r_steps {
        let x_r: Vec<f64> = x_new.row(r).to_vec();
        let q = compute_transition_matrix(trans, &x_r)?;
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut z = k - 1;
        for j in 0..k {
            acc += q.q[(prev, j)];
            if u <= acc {
                z = j;
                break;
            }
        }
        for s in 0..s_len {
            let mu = emis.probit_mean(z, r, s, w_new);
            let weights = mixing_weights(mu, emis.gamma[s]);
            y_star[(r, s)] = draw_emission_value(
                &weights,
                emis.lambda[(0, z, s)],
                emis.lambda[(1, z, s)],
                rng,
            );
        }
        q_star.push(q);
        z_star.push(z);
        prev = z;
    }
    Ok(ForecastDraw {
        q_star,
        z_star,
        y_star,
    })
}

/// Simulate one predictive chain per retained posterior draw. Each chain
/// starts from that draw's final training-period state unless overridden,
/// and runs on its own seed-derived stream so the result is independent of
/// scheduling.
pub fn forecast(
    store: &PosteriorStore,
    x_new: &Array2<f64>,
    w_new: &Array3<f64>,
    init_override: Option<usize>,
    seed: u64,
) -> Result<Vec<ForecastDraw>> {
    (0..store.n_draws())
        .into_par_iter()
        .map(|i| {
            let (trans, emis) = store.draw_params(i);
            let init = match init_override {
                Some(z) => z,
                None => *store.states[i].z.last().unwrap(),
            };
            let mut rng = substream(seed, i as u64);
            simulate_chain(&trans, &emis, x_new, w_new, init, &mut rng)
        })
        .collect()
}

/// Generate a dataset from the exact model with known truth: random
/// standardized covariates, a chain started in state 0, mixture emissions,
/// and a uniform missingness mask. Returns the panel, the covariates, and
/// the ground-truth chain.
pub fn generate_synthetic(
    trans: &TransitionCoefficients,
    emis: &EmissionParams,
    t_days: usize,
    missing_fraction: f64,
    seed: u64,
) -> Result<(ObservationPanel, CovariateSet, StateChain)> {
    if t_days < 2 {
        return Err(NhmmError::InvalidInput("need at least 2 days".into()));
    }
    if !(0.0..1.0).contains(&missing_fraction) {
        return Err(NhmmError::InvalidInput(
            "missing fraction must be in [0, 1)".into(),
        ));
    }
    if trans.n_states() != emis.n_states() {
        return Err(NhmmError::Dimension(format!(
            "transition has {} states, emission {}",
            trans.n_states(),
            emis.n_states()
        )));
    }
    let k = trans.n_states();
    let b = trans.b_dim();
    let s_len = emis.n_stations();
    let a = emis.a_dim();
    let mut rng = substream(seed, 0x5E7);
    let raw_x = Array2::from_shape_fn((t_days, b.max(1)), |_| {
        rand_distr::StandardNormal.sample(&mut rng)
    });
    let raw_w = Array3::from_shape_fn((t_days, s_len, a.max(1)), |_| {
        rand_distr::StandardNormal.sample(&mut rng)
    });
    let covs = CovariateSet::standardize(
        raw_x.slice(ndarray::s![.., ..b]).to_owned(),
        raw_w.slice(ndarray::s![.., .., ..a]).to_owned(),
        (0..b).map(|i| format!("x{}", i + 1)).collect(),
        (0..a).map(|i| format!("w{}", i + 1)).collect(),
    )?;
    let mut z = vec![0usize; t_days];
    let mut values = Array2::zeros((t_days, s_len));
    let mut mask = Array2::from_elem((t_days, s_len), true);
    for t in 0..t_days {
        if t > 0 {
            let x_t: Vec<f64> = covs.x.row(t).to_vec();
            let q = compute_transition_matrix(trans, &x_t)?;
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
                &mut rng,
            );
            if rng.gen::<f64>() < missing_fraction {
                mask[(t, s)] = false;
                values[(t, s)] = 0.0;
            }
        }
    }
    let stations = (0..s_len).map(|i| format!("s{}", i + 1)).collect();
    let panel = ObservationPanel::new(values, mask, stations)?;
    let chain = StateChain { z };
    Ok((panel, covs, chain))
}

/// Which covariate column a scenario sweep pins.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovariateIndex {
    X(usize),
    W(usize),
}

/// Pinning level, taken over the supplied (standardized) covariate values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioLevel {
    Min,
    Max,
    Mean,
}

fn column_level(values: impl Iterator<Item = f64>, level: ScenarioLevel) -> f64 {
    let vals: Vec<f64> = values.collect();
    match level {
        ScenarioLevel::Min => vals.iter().cloned().fold(f64::INFINITY, f64::min),
        ScenarioLevel::Max => vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        ScenarioLevel::Mean => vals.iter().sum::<f64>() / vals.len() as f64,
    }
}

/// Response to pinning one covariate: every column is held at its mean
/// except the chosen one, which is pinned to its min/max/mean on the
/// standardized scale. Simulates one chain per posterior draw and returns
/// the per-day-of-year mean panel (period x S).
pub fn covariate_scenario_sweep(
    store: &PosteriorStore,
    index: CovariateIndex,
    level: ScenarioLevel,
    x_new: &Array2<f64>,
    w_new: &Array3<f64>,
    period: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    if period == 0 {
        return Err(NhmmError::InvalidInput("period must be >= 1".into()));
    }
    match index {
        CovariateIndex::X(j) if j >= x_new.ncols() => {
            return Err(NhmmError::InvalidInput(format!(
                "x covariate index {j} out of range"
            )))
        }
        CovariateIndex::W(j) if j >= w_new.dim().2 => {
            return Err(NhmmError::InvalidInput(format!(
                "w covariate index {j} out of range"
            )))
        }
        _ => {}
    }
    let mut x = x_new.clone();
    let mut w = w_new.clone();
    for j in 0..x.ncols() {
        let target = match index {
            CovariateIndex::X(jj) if jj == j => level,
            _ => ScenarioLevel::Mean,
        };
        let v = column_level(x_new.column(j).iter().cloned(), target);
        x.column_mut(j).fill(v);
    }
    for j in 0..w.dim().2 {
        let target = match index {
            CovariateIndex::W(jj) if jj == j => level,
            _ => ScenarioLevel::Mean,
        };
        let v = column_level(
            w_new.slice(ndarray::s![.., .., j]).iter().cloned(),
            ScenarioLevel::Mean,
        );
        let v = if matches!(target, ScenarioLevel::Mean) {
            v
        } else {
            column_level(w_new.slice(ndarray::s![.., .., j]).iter().cloned(), target)
        };
        w.slice_mut(ndarray::s![.., .., j]).fill(v);
    }
    let draws = forecast(store, &x, &w, None, seed)?;
    let s_len = w.dim().1;
    let mut sums = Array2::zeros((period, s_len));
    let mut counts = vec![0usize; period];
    for d in &draws {
        for r in 0..d.y_star.nrows() {
            let bin = r % period;
            counts[bin] += 1;
            for s in 0..s_len {
                sums[(bin, s)] += d.y_star[(r, s)];
            }
        }
    }
    for bin in 0..period {
        if counts[bin] > 0 {
            for s in 0..s_len {
                sums[(bin, s)] /= counts[bin] as f64;
            }
        }
    }
    Ok(sums)
}
