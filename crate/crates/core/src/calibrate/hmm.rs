//! Scaled forward/backward recursions over per-step observation log-weights.
//!
//! Row `t` of a weight matrix holds, for each hidden state `h`, the log
//! probability of the observations of step `t + 1` given `Θ_t = h`.
//! `alpha[t]` and `beta[t]` are the normalized forward and backward vectors
//! attached to `Θ_t`; the matching log-scale accumulators recover the
//! unscaled values.

use serde::{Deserialize, Serialize};

use crate::discrete::log_weights;
use crate::error::{Error, Result};
use crate::model::{HiddenFactorSpec, Matrix, MigrationLaw, Mode};
use crate::panel::MigrationPanel;

/// How the first step's likelihood treats the entities' starting ratings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialRatings {
    /// Starting ratings are observed: the first step is an ordinary step.
    #[default]
    Observed,
    /// Starting ratings are unknown and drawn from the empirical rating
    /// proportions; the first step only sees where entities end up.
    Unknown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub alpha: Vec<Vec<f64>>,
    /// `log Σ_j α_{t+1}(j)` before normalization.
    pub log_scale: Vec<f64>,
    pub loglik: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardPass {
    pub beta: Vec<Vec<f64>>,
    pub log_scale: Vec<f64>,
}

/// Smoothed marginals `ǔ_t = P(Θ_t | all)` for `t = 0..Γ−1` and pairwise laws
/// `v̌_t(k, j) = P(Θ_{t−1} = k, Θ_t = j | all)` for `t = 1..Γ−1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Posteriors {
    pub state: Vec<Vec<f64>>,
    pub pair: Vec<Matrix>,
}

/// Per-step log-weights of a panel under `law`.
pub fn observation_log_weights(
    panel: &MigrationPanel,
    law: &MigrationLaw,
    initial: InitialRatings,
) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = panel.counts.iter().map(|c| log_weights(c, law)).collect();
    if initial == InitialRatings::Unknown && panel.steps() > 0 {
        out[0] = unknown_start_log_weights(panel, law);
    }
    out
}

/// First-step weights when starting ratings are unknown:
/// `Π_k (Σ_j π_j L^{h,jk})^{n_k}`, `π` the starting proportions and `n_k` the
/// number of entities ending the step in `k`.
fn unknown_start_log_weights(panel: &MigrationPanel, law: &MigrationLaw) -> Vec<f64> {
    let p = panel.p();
    let y = &panel.exposures[0];
    let total: u64 = y.iter().sum();
    let ends: Vec<u64> = (0..p)
        .map(|k| (0..p).map(|j| panel.counts[0][j][k]).sum())
        .collect();
    law.per_state
        .iter()
        .map(|l| {
            let mut w = 0.0;
            for k in 0..p {
                if ends[k] == 0 {
                    continue;
                }
                let q: f64 = (0..p).map(|j| y[j] as f64 / total as f64 * l[j][k]).sum();
                w += ends[k] as f64 * q.ln();
            }
            w
        })
        .collect()
}

fn check(factor: &HiddenFactorSpec, law: &MigrationLaw, panel: &MigrationPanel) -> Result<()> {
    factor.mode.expect(Mode::Discrete)?;
    law.mode.expect(Mode::Discrete)?;
    if law.m() != factor.m() {
        return Err(Error::Dimension(format!(
            "law has {} states, factor has {}",
            law.m(),
            factor.m()
        )));
    }
    if panel.steps() > 0 && panel.p() != law.p() {
        return Err(Error::Dimension(format!(
            "panel has p={}, law has p={}",
            panel.p(),
            law.p()
        )));
    }
    Ok(())
}

pub fn forward_pass(
    panel: &MigrationPanel,
    factor: &HiddenFactorSpec,
    law: &MigrationLaw,
) -> Result<ForwardPass> {
    check(factor, law, panel)?;
    forward(
        &observation_log_weights(panel, law, InitialRatings::Observed),
        &factor.pi,
        &factor.trans,
    )
}

pub fn backward_pass(
    panel: &MigrationPanel,
    factor: &HiddenFactorSpec,
    law: &MigrationLaw,
) -> Result<BackwardPass> {
    check(factor, law, panel)?;
    backward(
        &observation_log_weights(panel, law, InitialRatings::Observed),
        &factor.trans,
    )
}

pub fn posteriors(
    fwd: &ForwardPass,
    bwd: &BackwardPass,
    panel: &MigrationPanel,
    factor: &HiddenFactorSpec,
    law: &MigrationLaw,
) -> Result<Posteriors> {
    check(factor, law, panel)?;
    let logw = observation_log_weights(panel, law, InitialRatings::Observed);
    Ok(smooth(fwd, bwd, &logw, &factor.trans))
}

/// Multiplies `weights` by `exp(logw)` after shifting by the largest finite
/// log-weight among entries with positive mass; returns the shift.
fn apply_log_weights(weights: &mut [f64], logw: &[f64]) -> f64 {
    let shift = weights
        .iter()
        .zip(logw)
        .filter(|(&w, _)| w > 0.0)
        .map(|(_, &l)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    if shift.is_finite() {
        for (w, &l) in weights.iter_mut().zip(logw) {
            *w = if *w > 0.0 {
                *w * (l - shift).exp()
            } else {
                0.0
            };
        }
    } else {
        weights.iter_mut().for_each(|w| *w = 0.0);
    }
    shift
}

fn normalize(v: &mut [f64]) -> f64 {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    }
    s
}

pub(crate) fn forward(logw: &[Vec<f64>], pi: &[f64], trans: &Matrix) -> Result<ForwardPass> {
    let m = pi.len();
    let steps = logw.len();
    let mut alpha = Vec::with_capacity(steps);
    let mut log_scale = Vec::with_capacity(steps);
    let mut acc = 0.0;
    let mut prev: Vec<f64> = pi.to_vec();
    for (t, w) in logw.iter().enumerate() {
        let mut cur = if t == 0 {
            prev.clone()
        } else {
            let mut v = vec![0.0; m];
            for (k, &a) in prev.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (vj, &kj) in v.iter_mut().zip(&trans[k]) {
                    *vj += a * kj;
                }
            }
            v
        };
        let shift = apply_log_weights(&mut cur, w);
        let s = normalize(&mut cur);
        if !(s > 0.0) || !shift.is_finite() {
            return Err(Error::ImpossibleObservation { step: t + 1 });
        }
        acc += shift + s.ln();
        alpha.push(cur.clone());
        log_scale.push(acc);
        prev = cur;
    }
    Ok(ForwardPass {
        alpha,
        log_scale,
        loglik: if steps == 0 { 0.0 } else { acc },
    })
}

pub(crate) fn backward(logw: &[Vec<f64>], trans: &Matrix) -> Result<BackwardPass> {
    let steps = logw.len();
    let m = trans.len();
    let mut beta = vec![Vec::new(); steps];
    let mut log_scale = vec![0.0; steps];
    if steps == 0 {
        return Ok(BackwardPass { beta, log_scale });
    }
    beta[steps - 1] = vec![1.0 / m as f64; m];
    log_scale[steps - 1] = (m as f64).ln();
    for t in (0..steps - 1).rev() {
        let mut next = beta[t + 1].clone();
        let shift = apply_log_weights(&mut next, &logw[t + 1]);
        let mut cur: Vec<f64> = trans
            .iter()
            .map(|row| row.iter().zip(&next).map(|(k, b)| k * b).sum())
            .collect();
        let s = normalize(&mut cur);
        if !(s > 0.0) || !shift.is_finite() {
            return Err(Error::ImpossibleObservation { step: t + 2 });
        }
        log_scale[t] = log_scale[t + 1] + shift + s.ln();
        beta[t] = cur;
    }
    Ok(BackwardPass { beta, log_scale })
}

pub(crate) fn smooth(
    fwd: &ForwardPass,
    bwd: &BackwardPass,
    logw: &[Vec<f64>],
    trans: &Matrix,
) -> Posteriors {
    let steps = logw.len();
    let state = (0..steps).map(|t| state_marginal(fwd, bwd, t)).collect();
    let pair = (1..steps)
        .map(|t| pair_marginal(fwd, bwd, logw, trans, t))
        .collect();
    Posteriors { state, pair }
}

pub(crate) fn state_marginal(fwd: &ForwardPass, bwd: &BackwardPass, t: usize) -> Vec<f64> {
    let mut u: Vec<f64> = fwd.alpha[t]
        .iter()
        .zip(&bwd.beta[t])
        .map(|(a, b)| a * b)
        .collect();
    normalize(&mut u);
    u
}

/// `P(Θ_{t−1} = k, Θ_t = j | all)` for `t ≥ 1`.
pub(crate) fn pair_marginal(
    fwd: &ForwardPass,
    bwd: &BackwardPass,
    logw: &[Vec<f64>],
    trans: &Matrix,
    t: usize,
) -> Matrix {
    let mut right = bwd.beta[t].clone();
    apply_log_weights(&mut right, &logw[t]);
    let mut v: Matrix = fwd.alpha[t - 1]
        .iter()
        .zip(trans)
        .map(|(&a, row)| row.iter().zip(&right).map(|(k, r)| a * k * r).collect())
        .collect();
    let s: f64 = v.iter().flatten().sum();
    if s > 0.0 {
        v.iter_mut().flatten().for_each(|x| *x /= s);
    }
    v
}

/// Log-likelihood, smoothed marginals and summed pairwise posteriors, without
/// materializing every pairwise matrix.
pub(crate) struct Expectations {
    pub loglik: f64,
    pub state: Vec<Vec<f64>>,
    pub pair_sum: Matrix,
}

pub(crate) fn expectations(logw: &[Vec<f64>], pi: &[f64], trans: &Matrix) -> Result<Expectations> {
    match flat_expectations(logw, pi, trans) {
        Some(exp) => Ok(exp),
        None => reference_expectations(logw, pi, trans),
    }
}

/// Straightforward version built from the forward and backward passes.
fn reference_expectations(logw: &[Vec<f64>], pi: &[f64], trans: &Matrix) -> Result<Expectations> {
    let fwd = forward(logw, pi, trans)?;
    let bwd = backward(logw, trans)?;
    let m = pi.len();
    let state = (0..logw.len())
        .map(|t| state_marginal(&fwd, &bwd, t))
        .collect();
    let mut pair_sum = vec![vec![0.0; m]; m];
    for t in 1..logw.len() {
        let v = pair_marginal(&fwd, &bwd, logw, trans, t);
        for (arow, vrow) in pair_sum.iter_mut().zip(&v) {
            for (a, x) in arow.iter_mut().zip(vrow) {
                *a += x;
            }
        }
    }
    Ok(Expectations {
        loglik: fwd.loglik,
        state,
        pair_sum,
    })
}

/// Same quantities on flat buffers, exponentiating each weight row once
/// (shifted by its maximum). Returns `None` when a step underflows or is
/// impossible, leaving those cases to the reference version.
fn flat_expectations(logw: &[Vec<f64>], pi: &[f64], trans: &Matrix) -> Option<Expectations> {
    let m = pi.len();
    let steps = logw.len();
    let mut ew = vec![0.0; steps * m];
    let mut loglik = 0.0;
    for (t, row) in logw.iter().enumerate() {
        let shift = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !shift.is_finite() {
            return None;
        }
        for (e, &l) in ew[t * m..(t + 1) * m].iter_mut().zip(row) {
            *e = (l - shift).exp();
        }
        loglik += shift;
    }

    let mut alpha = vec![0.0; steps * m];
    for t in 0..steps {
        let (done, rest) = alpha.split_at_mut(t * m);
        let cur = &mut rest[..m];
        if t == 0 {
            cur.copy_from_slice(pi);
        } else {
            let prev = &done[(t - 1) * m..];
            for (k, &a) in prev.iter().enumerate() {
                for (c, &kj) in cur.iter_mut().zip(&trans[k]) {
                    *c += a * kj;
                }
            }
        }
        let mut s = 0.0;
        for (c, &e) in cur.iter_mut().zip(&ew[t * m..(t + 1) * m]) {
            *c *= e;
            s += *c;
        }
        if !(s > 0.0) || !s.is_finite() {
            return None;
        }
        cur.iter_mut().for_each(|c| *c /= s);
        loglik += s.ln();
    }

    let mut beta = vec![0.0; steps * m];
    let mut right = vec![0.0; m];
    if steps > 0 {
        beta[(steps - 1) * m..].fill(1.0);
    }
    for t in (0..steps.saturating_sub(1)).rev() {
        for (j, r) in right.iter_mut().enumerate() {
            *r = beta[(t + 1) * m + j] * ew[(t + 1) * m + j];
        }
        let cur = &mut beta[t * m..(t + 1) * m];
        let mut s = 0.0;
        for (c, row) in cur.iter_mut().zip(trans) {
            *c = row.iter().zip(&right).map(|(k, r)| k * r).sum();
            s += *c;
        }
        if !(s > 0.0) || !s.is_finite() {
            return None;
        }
        cur.iter_mut().for_each(|c| *c /= s);
    }

    let mut state = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut u: Vec<f64> = alpha[t * m..(t + 1) * m]
            .iter()
            .zip(&beta[t * m..(t + 1) * m])
            .map(|(a, b)| a * b)
            .collect();
        if !(normalize(&mut u) > 0.0) {
            return None;
        }
        state.push(u);
    }

    let mut pair_sum = vec![vec![0.0; m]; m];
    let mut v = vec![0.0; m * m];
    for t in 1..steps {
        for (j, r) in right.iter_mut().enumerate() {
            *r = beta[t * m + j] * ew[t * m + j];
        }
        let mut s = 0.0;
        for (k, &a) in alpha[(t - 1) * m..t * m].iter().enumerate() {
            for j in 0..m {
                let x = a * trans[k][j] * right[j];
                v[k * m + j] = x;
                s += x;
            }
        }
        if !(s > 0.0) {
            return None;
        }
        for (k, row) in pair_sum.iter_mut().enumerate() {
            for (j, acc) in row.iter_mut().enumerate() {
                *acc += v[k * m + j] / s;
            }
        }
    }
    Some(Expectations {
        loglik,
        state,
        pair_sum,
    })
}
