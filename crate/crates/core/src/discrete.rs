//! Causal discrete-time filters over panel observations.
//!
//! Timing: migrations observed during step `t` are driven by the hidden state
//! at the start of the step, `Θ_{t−1}`. After assimilating step `t` the filter
//! holds `P(Θ_t | steps 1..t)`, and the forecast issued before step `t` is the
//! mixture of the `L^h` under the filtered law of `Θ_{t−1}`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    mixture, renormalize, FilterState, HiddenFactorSpec, Matrix, MigrationLaw, Mode,
};
use crate::panel::MigrationPanel;

/// Filtered states with the forecasts issued before each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterTrajectory {
    /// `states[0]` is the initial law; `states[t]` follows step `t`.
    pub states: Vec<FilterState>,
    /// `predicted[t − 1]`: forecast transition matrix for step `t`.
    pub predicted: Vec<Matrix>,
    pub loglik: f64,
}

impl FilterTrajectory {
    pub fn steps(&self) -> usize {
        self.predicted.len()
    }

    /// Writes `t,I_1..I_m,nu_1_1..nu_p_p`; the initial row has empty forecast
    /// cells.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let m = self.states.first().map_or(0, |s| s.probs.len());
        let p = self.predicted.first().map_or(0, |n| n.len());
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string()];
        header.extend((1..=m).map(|h| format!("I_{h}")));
        for j in 1..=p {
            header.extend((1..=p).map(|k| format!("nu_{j}_{k}")));
        }
        w.write_record(&header)?;
        for (t, s) in self.states.iter().enumerate() {
            let mut rec = vec![s.time.to_string()];
            rec.extend(s.probs.iter().map(|x| x.to_string()));
            match t.checked_sub(1).and_then(|i| self.predicted.get(i)) {
                Some(nu) => rec.extend(nu.iter().flatten().map(|x| x.to_string())),
                None => rec.extend(std::iter::repeat_n(String::new(), p * p)),
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the layout written by [`FilterTrajectory::write_csv`]. The
    /// log-likelihood is not stored and comes back as zero.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let m = header.iter().filter(|h| h.starts_with("I_")).count();
        let nu_cols = header.iter().filter(|h| h.starts_with("nu_")).count();
        let p = (nu_cols as f64).sqrt().round() as usize;
        if m == 0 || p * p != nu_cols || header.len() != 1 + m + nu_cols {
            return Err(Error::Malformed {
                line: 1,
                message: "expected t,I_1..I_m,nu_1_1..nu_p_p".into(),
            });
        }
        let mut states = Vec::new();
        let mut predicted = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let line = i + 2;
            let rec = rec?;
            let num = |s: &str| -> Result<f64> {
                s.trim().parse::<f64>().map_err(|_| Error::Malformed {
                    line,
                    message: format!("bad number {s:?}"),
                })
            };
            let time = num(&rec[0])?;
            let probs = (1..=m).map(|c| num(&rec[c])).collect::<Result<Vec<_>>>()?;
            states.push(FilterState::new(probs, time));
            if i > 0 {
                let flat = (1 + m..1 + m + nu_cols)
                    .map(|c| num(&rec[c]))
                    .collect::<Result<Vec<_>>>()?;
                predicted.push(flat.chunks(p.max(1)).map(|c| c.to_vec()).collect());
            }
        }
        if states.is_empty() {
            return Err(Error::Empty("trajectory has no rows".into()));
        }
        Ok(Self {
            states,
            predicted,
            loglik: 0.0,
        })
    }
}

/// Per-state log-likelihood `Σ_{jk} ΔN^{jk} log L^{h,jk}` of one step's counts.
/// Zero counts contribute nothing even where `L` is zero.
pub(crate) fn log_weights(dn: &[Vec<u64>], law: &MigrationLaw) -> Vec<f64> {
    law.per_state
        .iter()
        .map(|l| {
            let mut w = 0.0;
            for (drow, lrow) in dn.iter().zip(l) {
                for (&n, &x) in drow.iter().zip(lrow) {
                    if n > 0 {
                        w += n as f64 * x.ln();
                    }
                }
            }
            w
        })
        .collect()
}

/// Bayes update followed by one `Kᵀ` propagation, from log-weights.
///
/// Returns the new law and `log Σ_i Î_i e^{ω_i}`, the log predictive
/// probability of the observation.
fn assimilate(
    probs: &[f64],
    logw: &[f64],
    factor: &HiddenFactorSpec,
    step: usize,
) -> Result<(Vec<f64>, f64)> {
    let max = probs
        .iter()
        .zip(logw)
        .filter(|(&p, _)| p > 0.0)
        .map(|(_, &w)| w)
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::ImpossibleObservation { step });
    }
    let mut posterior: Vec<f64> = probs
        .iter()
        .zip(logw)
        .map(|(&p, &w)| if p > 0.0 { p * (w - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = posterior.iter().sum();
    posterior.iter_mut().for_each(|x| *x /= z);
    let m = factor.m();
    let mut next = vec![0.0; m];
    for (i, &w) in posterior.iter().enumerate() {
        for h in 0..m {
            next[h] += factor.trans[i][h] * w;
        }
    }
    renormalize(&mut next);
    Ok((next, max + z.ln()))
}

fn check_state(state: &FilterState, factor: &HiddenFactorSpec) -> Result<()> {
    factor.mode.expect(Mode::Discrete)?;
    if state.probs.len() != factor.m() {
        return Err(Error::Dimension(format!(
            "state has {} entries, factor has m={}",
            state.probs.len(),
            factor.m()
        )));
    }
    Ok(())
}

/// Binomial filter for a single transition type: `dn` of `y` exposed
/// entities jumped, with per-state jump probabilities `jump_probs`.
pub fn filter_step_univariate(
    state: &FilterState,
    dn: u64,
    y: u64,
    factor: &HiddenFactorSpec,
    jump_probs: &[f64],
) -> Result<FilterState> {
    check_state(state, factor)?;
    if jump_probs.len() != factor.m() {
        return Err(Error::Dimension(format!(
            "{} jump probabilities for m={}",
            jump_probs.len(),
            factor.m()
        )));
    }
    if dn > y {
        return Err(Error::InvalidData(format!("{dn} jumps out of {y} exposed")));
    }
    let stay = y - dn;
    let logw: Vec<f64> = jump_probs
        .iter()
        .map(|&l| {
            let mut w = 0.0;
            if dn > 0 {
                w += dn as f64 * l.ln();
            }
            if stay > 0 {
                w += stay as f64 * (1.0 - l).ln();
            }
            w
        })
        .collect();
    let step = state.time as usize + 1;
    let (probs, _) = assimilate(&state.probs, &logw, factor, step)?;
    Ok(FilterState::new(probs, state.time + 1.0))
}

/// Multinomial filter over the full count matrix of one step.
pub fn filter_step_multivariate(
    state: &FilterState,
    dn: &[Vec<u64>],
    y: &[u64],
    factor: &HiddenFactorSpec,
    law: &MigrationLaw,
) -> Result<FilterState> {
    let (next, _) = step_with_loglik(state, dn, y, factor, law)?;
    Ok(next)
}

fn step_with_loglik(
    state: &FilterState,
    dn: &[Vec<u64>],
    y: &[u64],
    factor: &HiddenFactorSpec,
    law: &MigrationLaw,
) -> Result<(FilterState, f64)> {
    check_state(state, factor)?;
    law.mode.expect(Mode::Discrete)?;
    let p = law.p();
    if law.m() != factor.m() || y.len() != p || dn.len() != p || dn.iter().any(|r| r.len() != p) {
        return Err(Error::Dimension(
            "counts, exposures and law disagree in shape".into(),
        ));
    }
    for (j, (row, &yj)) in dn.iter().zip(y).enumerate() {
        let s: u64 = row.iter().sum();
        if s != yj {
            return Err(Error::InvalidData(format!(
                "rating {}: counts sum to {s} but exposure is {yj}",
                j + 1
            )));
        }
    }
    let logw = log_weights(dn, law);
    let step = state.time as usize + 1;
    let (probs, ll) = assimilate(&state.probs, &logw, factor, step)?;
    Ok((FilterState::new(probs, state.time + 1.0), ll))
}

/// Runs the multivariate filter over a whole panel, starting from `init` or
/// from the factor's initial law.
pub fn run_filter(
    panel: &MigrationPanel,
    factor: &HiddenFactorSpec,
    law: &MigrationLaw,
    init: Option<&FilterState>,
) -> Result<FilterTrajectory> {
    law.mode.expect(Mode::Discrete)?;
    let mut state = init
        .cloned()
        .unwrap_or_else(|| FilterState::new(factor.pi.clone(), 0.0));
    check_state(&state, factor)?;
    let mut states = Vec::with_capacity(panel.steps() + 1);
    let mut predicted = Vec::with_capacity(panel.steps());
    let mut loglik = 0.0;
    states.push(state.clone());
    for t in 0..panel.steps() {
        predicted.push(mixture(&law.per_state, &state.probs)?);
        let (next, ll) =
            step_with_loglik(&state, &panel.counts[t], &panel.exposures[t], factor, law)?;
        loglik += ll;
        state = next;
        states.push(state.clone());
    }
    Ok(FilterTrajectory {
        states,
        predicted,
        loglik,
    })
}
