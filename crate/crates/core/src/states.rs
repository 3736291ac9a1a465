//! Direct Gibbs sampling of the hidden state chain and the per-day
//! posterior-mode summary.

use crate::error::{NhmmError, Result};
use crate::stats::log_sum_exp;
use crate::transition::TransitionMatrix;
use rand::Rng;

/// Hidden state chain, 0-based states in 0..K. Day one is always pinned to
/// state 0 (the paper's "state 1"), so state 0 is whichever regime covers
/// the first day of the series.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateChain {
    pub z: Vec<usize>,
}

impl StateChain {
    pub fn new(z: Vec<usize>, k: usize) -> Result<Self> {
        if z.is_empty() {
            return Err(NhmmError::InvalidInput("empty state chain".into()));
        }
        if z[0] != 0 {
            return Err(NhmmError::InvalidInput(
                "first hidden state must be state 0".into(),
            ));
        }
        if let Some(&bad) = z.iter().find(|&&s| s >= k) {
            return Err(NhmmError::InvalidInput(format!(
                "state value {bad} outside 0..{k}"
            )));
        }
        Ok(Self { z })
    }

    /// Uniform random initialization with the first day pinned.
    pub fn init_uniform<R: Rng + ?Sized>(t: usize, k: usize, rng: &mut R) -> Self {
        let mut z = vec![0usize; t];
        for zt in z.iter_mut().skip(1) {
            *zt = rng.gen_range(0..k);
        }
        Self { z }
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

/// Draw z_t from its full conditional. `q_prev` is the transition matrix into
/// day t, `q_next` the one into day t+1 (None at the right boundary), and
/// `log_f[k]` the summed per-state emission log-density at day t.
pub fn sample_state_at<R: Rng + ?Sized>(
    t: usize,
    chain: &StateChain,
    q_prev: &TransitionMatrix,
    q_next: Option<&TransitionMatrix>,
    log_f: &[f64],
    rng: &mut R,
) -> Result<usize> {
    let k = log_f.len();
    let z_prev = chain.z[t - 1];
    let mut logw = vec![0.0; k];
    for (j, lw) in logw.iter_mut().enumerate() {
        let mut v = q_prev.q[(z_prev, j)].ln() + log_f[j];
        if let Some(qn) = q_next {
            v += qn.q[(j, chain.z[t + 1])].ln();
        }
        *lw = v;
    }
    let norm = log_sum_exp(&logw);
    if !norm.is_finite() {
        return Err(NhmmError::Numerical(format!(
            "all state weights vanish at day {}",
            t + 1
        )));
    }
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (j, lw) in logw.iter().enumerate() {
        acc += (lw - norm).exp();
        if u <= acc {
            return Ok(j);
        }
    }
    Ok(k - 1)
}

/// One full left-to-right pass of the direct Gibbs state update.
///
/// `transition_at(t)` yields the transition matrix into day t and
/// `emission_log_f(t, buf)` fills per-state emission log-densities for day t.
pub fn sweep_states<R, FQ, FE>(
    chain: &mut StateChain,
    k: usize,
    mut transition_at: FQ,
    mut emission_log_f: FE,
    rng: &mut R,
) -> Result<()>
where
    R: Rng + ?Sized,
    FQ: FnMut(usize) -> TransitionMatrix,
    FE: FnMut(usize, &mut [f64]),
{
    let t_len = chain.len();
    if k == 1 || t_len == 1 {
        return Ok(());
    }
    let mut log_f = vec![0.0; k];
    let mut q_prev = transition_at(1);
    for t in 1..t_len {
        emission_log_f(t, &mut log_f);
        let q_next = if t + 1 < t_len {
            Some(transition_at(t + 1))
        } else {
            None
        };
        chain.z[t] = sample_state_at(t, chain, &q_prev, q_next.as_ref(), &log_f, rng)?;
        if let Some(qn) = q_next {
            q_prev = qn;
        }
    }
    Ok(())
}

/// Per-day mode across retained draws, ties broken by the smallest state
/// index.
pub fn most_probable_states(draws: &[StateChain], k: usize) -> Result<StateChain> {
    let first = draws
        .first()
        .ok_or_else(|| NhmmError::InvalidInput("no retained state draws".into()))?;
    let t_len = first.len();
    let mut z = Vec::with_capacity(t_len);
    let mut counts = vec![0usize; k];
    for t in 0..t_len {
        counts.iter_mut().for_each(|c| *c = 0);
        for d in draws {
            counts[d.z[t]] += 1;
        }
        let best = counts
            .iter()
            .enumerate()
            .max_by(|(ia, ca), (ib, cb)| ca.cmp(cb).then(ib.cmp(ia)))
            .map(|(i, _)| i)
            .unwrap();
        z.push(best);
    }
    Ok(StateChain { z })
}
