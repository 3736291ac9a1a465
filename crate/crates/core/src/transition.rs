//! Covariate-dependent transition structure: the multinomial-logistic link
//! and the Polya-Gamma Gibbs update of the logistic coefficients.
//!
//! Coefficients live in a K x (K+B) matrix `zeta`; row k holds the
//! coefficients of destination category k, with the first K columns the
//! Markov intercepts (dependence on the previous state) and the last B the
//! covariate weights. One full row is pinned to zero for identifiability;
//! by convention the last category.

use crate::error::{NhmmError, Result};
use crate::pg::draw_pg1;
use crate::stats::log_sum_exp;
use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Logistic coefficients zeta with one pinned (all-zero) category row.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionCoefficients {
    /// K x (K+B).
    pub zeta: Array2<f64>,
    /// Index of the identifiability-pinned category row.
    pub pinned: usize,
}

impl TransitionCoefficients {
    /// All-zero coefficients with the last category pinned.
    pub fn zeros(k: usize, b: usize) -> Self {
        Self {
            zeta: Array2::zeros((k, k + b)),
            pinned: k - 1,
        }
    }

    pub fn new(zeta: Array2<f64>, pinned: usize) -> Result<Self> {
        let k = zeta.nrows();
        if pinned >= k {
            return Err(NhmmError::InvalidInput(format!(
                "pinned category {pinned} outside 0..{k}"
            )));
        }
        if zeta.row(pinned).iter().any(|&v| v != 0.0) {
            return Err(NhmmError::InvalidInput(
                "pinned category row must be exactly zero".into(),
            ));
        }
        if zeta.iter().any(|v| !v.is_finite()) {
            return Err(NhmmError::InvalidInput("non-finite zeta entry".into()));
        }
        Ok(Self { zeta, pinned })
    }

    pub fn n_states(&self) -> usize {
        self.zeta.nrows()
    }

    pub fn b_dim(&self) -> usize {
        self.zeta.ncols() - self.zeta.nrows()
    }
}

/// One day's K x K transition matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    pub q: Array2<f64>,
}

/// Design matrices for the coefficient update. Row t of `x` one-hot encodes
/// the state at t-1 followed by the day-t covariates; `z` one-hot encodes
/// the state at t. Row 0 is excluded from coefficient updates (the initial
/// state is fixed and contributes no transition term).
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrices {
    /// T x (K+B).
    pub x: Array2<f64>,
    /// T x K.
    pub z: Array2<f64>,
}

/// Polya-Gamma augmentation buffers for the coefficient update, T x K.
#[derive(Debug, Clone)]
pub struct PGAugmentationState {
    pub omega: Array2<f64>,
    pub eta: Array2<f64>,
    /// Log-sum-exp holdouts C_tk = log sum_{i != k} exp(X_t . zeta_i).
    pub c: Array2<f64>,
}

impl PGAugmentationState {
    pub fn new(t: usize, k: usize) -> Self {
        Self {
            omega: Array2::ones((t, k)),
            eta: Array2::zeros((t, k)),
            c: Array2::zeros((t, k)),
        }
    }
}

/// Per-coefficient normal prior (mean, variance); `None` variance means the
/// noninformative limit (zero precision).
#[derive(Debug, Clone, PartialEq)]
pub struct ZetaPrior {
    pub mean: f64,
    pub variance: Option<f64>,
}

impl Default for ZetaPrior {
    fn default() -> Self {
        Self {
            mean: 0.0,
            variance: None,
        }
    }
}

impl ZetaPrior {
    pub fn precision(&self) -> f64 {
        match self.variance {
            Some(v) => 1.0 / v,
            None => 0.0,
        }
    }
}

/// Evaluate the day-t transition matrix from coefficients and covariates,
/// in log-space with max subtraction.
pub fn compute_transition_matrix(
    coeffs: &TransitionCoefficients,
    x_t: &[f64],
) -> Result<TransitionMatrix> {
    if x_t.len() != coeffs.b_dim() {
        return Err(NhmmError::Dimension(format!(
            "x_t has {} entries, expected {}",
            x_t.len(),
            coeffs.b_dim()
        )));
    }
    if x_t.iter().any(|v| !v.is_finite()) {
        return Err(NhmmError::InvalidInput("non-finite covariate".into()));
    }
    let k = coeffs.n_states();
    let mut q = Array2::zeros((k, k));
    let mut logits = vec![0.0; k];
    for i in 0..k {
        for (j, l) in logits.iter_mut().enumerate() {
            let mut v = coeffs.zeta[(j, i)];
            for (b, &xb) in x_t.iter().enumerate() {
                v += xb * coeffs.zeta[(j, k + b)];
            }
            *l = v;
        }
        let norm = log_sum_exp(&logits);
        for j in 0..k {
            q[(i, j)] = (logits[j] - norm).exp();
        }
        // Renormalize away the residual rounding of the exp sum.
        let row_sum: f64 = (0..k).map(|j| q[(i, j)]).sum();
        for j in 0..k {
            q[(i, j)] /= row_sum;
        }
    }
    Ok(TransitionMatrix { q })
}

/// Build the design matrices from the current chain and the x covariates.
pub fn build_design(states: &[usize], x: &Array2<f64>, k: usize) -> Result<DesignMatrices> {
    let t_len = states.len();
    let b = x.ncols();
    if x.nrows() != t_len {
        return Err(NhmmError::Dimension(format!(
            "covariate rows {} vs chain length {t_len}",
            x.nrows()
        )));
    }
    if let Some(&bad) = states.iter().find(|&&s| s >= k) {
        return Err(NhmmError::InvalidInput(format!(
            "state value {bad} outside 0..{k}"
        )));
    }
    let mut xm = Array2::zeros((t_len, k + b));
    let mut zm = Array2::zeros((t_len, k));
    for t in 0..t_len {
        let prev = if t == 0 { states[0] } else { states[t - 1] };
        xm[(t, prev)] = 1.0;
        for bb in 0..b {
            xm[(t, k + bb)] = x[(t, bb)];
        }
        zm[(t, states[t])] = 1.0;
    }
    Ok(DesignMatrices { x: xm, z: zm })
}

/// Fallback prior precision used when the flat-prior normal equations are
/// singular (an origin state absent from the chain); corresponds to a weak
/// N(0, 100) prior on the dataless directions.
pub const ZETA_RIDGE: f64 = 0.01;

/// One Gibbs update of all non-pinned coefficient rows.
///
/// For each category k the holdout C is refreshed against the current
/// coefficients, the Polya-Gamma latents are redrawn at the implied tilts,
/// and the whole coefficient vector of category k is drawn from its
/// conditionally-Gaussian posterior. Day 0 contributes no term.
pub fn sample_zeta<R: Rng + ?Sized>(
    design: &DesignMatrices,
    coeffs: &mut TransitionCoefficients,
    aug: &mut PGAugmentationState,
    prior: &Array2<ZetaPrior>,
    rng: &mut R,
) -> Result<()> {
    let t_len = design.x.nrows();
    let k = coeffs.n_states();
    let d = design.x.ncols();
    if prior.dim() != (k, d) {
        return Err(NhmmError::Dimension(format!(
            "prior shape {:?}, expected ({k}, {d})",
            prior.dim()
        )));
    }
    let mut logits = vec![0.0; k];
    for cat in 0..k {
        if cat == coeffs.pinned {
            continue;
        }
        for t in 1..t_len {
            let xrow = design.x.row(t);
            for (i, l) in logits.iter_mut().enumerate() {
                *l = xrow
                    .iter()
                    .zip(coeffs.zeta.row(i))
                    .map(|(xv, zv)| xv * zv)
                    .sum();
            }
            let own = logits[cat];
            let saved = std::mem::replace(&mut logits[cat], f64::NEG_INFINITY);
            let c = log_sum_exp(&logits);
            logits[cat] = saved;
            let eta = own - c;
            aug.c[(t, cat)] = c;
            aug.eta[(t, cat)] = eta;
            aug.omega[(t, cat)] = draw_pg1(eta, rng)?.value;
        }
        let (mut prec, rhs) = normal_equations(design, cat, aug, prior);
        let chol = match nalgebra::Cholesky::new(prec.clone()) {
            Some(c) => c,
            None => {
                // Under the noninformative prior the precision is singular
                // whenever some origin state is absent from the current
                // chain (its intercept column is all zero). Fall back to a
                // weak proper ridge on such sweeps; the affected directions
                // carry no data, and the chain recovers as soon as the
                // state reappears.
                for h in 0..d {
                    prec[(h, h)] += ZETA_RIDGE;
                }
                nalgebra::Cholesky::new(prec).ok_or_else(|| {
                    NhmmError::Numerical(format!(
                        "singular posterior precision for category {cat}"
                    ))
                })?
            }
        };
        let mean = chol.solve(&rhs);
        let eps = DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(rng)));
        let noise = chol
            .l()
            .transpose()
            .solve_upper_triangular(&eps)
            .ok_or_else(|| {
                NhmmError::Numerical(format!("triangular solve failed for category {cat}"))
            })?;
        for h in 0..d {
            coeffs.zeta[(cat, h)] = mean[h] + noise[h];
        }
    }
    Ok(())
}

/// Posterior normal equations for one category: precision
/// X' Omega X + B^-1 and right-hand side X'((Z - 1/2) - Omega C) + B^-1 a,
/// over the update rows t >= 1.
pub fn normal_equations(
    design: &DesignMatrices,
    cat: usize,
    aug: &PGAugmentationState,
    prior: &Array2<ZetaPrior>,
) -> (DMatrix<f64>, DVector<f64>) {
    let t_len = design.x.nrows();
    let d = design.x.ncols();
    let mut prec = DMatrix::zeros(d, d);
    let mut rhs = DVector::zeros(d);
    for t in 1..t_len {
        let xrow = design.x.row(t);
        let omega = aug.omega[(t, cat)];
        let resid = (design.z[(t, cat)] - 0.5) - omega * aug.c[(t, cat)];
        for (a, &xa) in xrow.iter().enumerate() {
            rhs[a] += xa * resid;
            for (bb, &xb) in xrow.iter().enumerate() {
                prec[(a, bb)] += omega * xa * xb;
            }
        }
    }
    for h in 0..d {
        let p = &prior[(cat, h)];
        prec[(h, h)] += p.precision();
        rhs[h] += p.precision() * p.mean;
    }
    (prec, rhs)
}

/// Bernoulli log-likelihood of the augmented representation at the current
/// coefficients (finite-ness is a sanity invariant on retained draws).
pub fn conditional_log_likelihood(design: &DesignMatrices, coeffs: &TransitionCoefficients) -> f64 {
    let t_len = design.x.nrows();
    let k = coeffs.n_states();
    let mut logits = vec![0.0; k];
    let mut total = 0.0;
    for t in 1..t_len {
        let xrow = design.x.row(t);
        for (i, l) in logits.iter_mut().enumerate() {
            *l = xrow
                .iter()
                .zip(coeffs.zeta.row(i))
                .map(|(xv, zv)| xv * zv)
                .sum();
        }
        let norm = log_sum_exp(&logits);
        for cat in 0..k {
            if design.z[(t, cat)] == 1.0 {
                total += logits[cat] - norm;
            }
        }
    }
    total
}
