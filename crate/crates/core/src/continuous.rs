//! Continuous-time filter over event streams, and the spreading step that
//! turns step panels into streams without simultaneous jumps.
//!
//! Between migrations the filter follows
//!
//! ```text
//! dÎ^h = Σ_i k^{ih} Î^i dt − Î^h (λ^h − Σ_i λ^i Î^i) dt,   λ^h = Σ_{j≠k} Y^j ℓ^{h,jk}
//! ```
//!
//! integrated by explicit Euler; at a migration `j → k` it reweights by
//! `ℓ^{h,jk}`.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::discrete::FilterTrajectory;
use crate::error::{Error, Result};
use crate::model::{
    mixture, renormalize, transpose_apply, Conversion, FilterState, HiddenFactorSpec, MigrationLaw,
    Mode,
};
use crate::panel::{Event, EventStream, ExposureReset, MigrationPanel, StreamItem};

/// Largest Euler increment allowed relative to the fastest rate.
const MAX_RATE_STEP: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpreadConfig {
    /// Slots per panel step; must exceed the largest per-step jump count.
    pub subintervals_per_step: usize,
    pub seed: u64,
}

/// Places each step's off-diagonal migrations on distinct, uniformly chosen
/// slots of the step, at slot midpoints, in random order. Exposures are reset
/// to the panel's values at each step start where they differ from the
/// running count.
pub fn spread_jumps(panel: &MigrationPanel, cfg: &SpreadConfig) -> Result<EventStream> {
    panel.check()?;
    let slots = cfg.subintervals_per_step;
    for t in 0..panel.steps() {
        let jumps = panel.jumps_in_step(t);
        if jumps as usize >= slots {
            return Err(Error::TooFewSubintervals {
                step: t + 1,
                jumps,
                slots,
            });
        }
    }
    let d = panel.step_length_days as f64;
    let p = panel.p();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let initial = panel.exposures.first().cloned().unwrap_or_default();
    let mut y = initial.clone();
    let mut events = Vec::new();
    let mut resets = Vec::new();
    for t in 0..panel.steps() {
        let start = t as f64 * d;
        if panel.exposures[t] != y {
            y = panel.exposures[t].clone();
            resets.push(ExposureReset {
                time: start,
                exposures: y.clone(),
            });
        }
        let mut labels = Vec::new();
        for j in 0..p {
            for k in 0..p {
                if j != k {
                    labels.extend(std::iter::repeat_n((j, k), panel.counts[t][j][k] as usize));
                }
            }
        }
        if labels.is_empty() {
            continue;
        }
        labels.shuffle(&mut rng);
        let mut chosen = sample(&mut rng, slots, labels.len()).into_vec();
        chosen.sort_unstable();
        for (slot, (j, k)) in chosen.into_iter().zip(labels) {
            events.push(Event {
                time: start + (slot as f64 + 0.5) * d / slots as f64,
                from: j,
                to: k,
                exposures: y.clone(),
            });
            y[j] -= 1;
            y[k] += 1;
        }
    }
    Ok(EventStream {
        horizon: panel.steps() as f64 * d,
        initial_exposures: initial,
        events,
        resets,
    })
}

fn check_continuous(factor: &HiddenFactorSpec, law: &MigrationLaw) -> Result<()> {
    factor.mode.expect(Mode::Continuous)?;
    law.mode.expect(Mode::Continuous)?;
    if law.m() != factor.m() {
        return Err(Error::Dimension(format!(
            "law has {} states, factor has {}",
            law.m(),
            factor.m()
        )));
    }
    Ok(())
}

/// Total migration intensity `λ^h` per hidden state at exposures `y`.
fn total_intensities(law: &MigrationLaw, y: &[u64]) -> Vec<f64> {
    law.per_state
        .iter()
        .map(|l| {
            let mut s = 0.0;
            for (j, row) in l.iter().enumerate() {
                let off: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|&(k, _)| k != j)
                    .map(|(_, x)| x)
                    .sum();
                s += y[j] as f64 * off;
            }
            s
        })
        .collect()
}

/// Euler substep count keeping every increment well inside the simplex.
fn substeps(dt: f64, factor: &HiddenFactorSpec, lambda: &[f64]) -> usize {
    let gen_rate = (0..factor.m())
        .map(|h| -factor.trans[h][h])
        .fold(0.0, f64::max);
    let jump_rate = lambda.iter().copied().fold(0.0, f64::max);
    ((dt * (gen_rate + jump_rate) / MAX_RATE_STEP).ceil() as usize).max(1)
}

/// Contributions accumulated while integrating the drift.
#[derive(Debug, Clone, Default)]
struct DriftTally {
    prediction: Vec<f64>,
    correction: Vec<f64>,
    compensator: f64,
}

impl DriftTally {
    fn new(m: usize) -> Self {
        Self {
            prediction: vec![0.0; m],
            correction: vec![0.0; m],
            compensator: 0.0,
        }
    }
}

fn euler_drift(
    probs: &mut [f64],
    dt: f64,
    factor: &HiddenFactorSpec,
    lambda: &[f64],
    tally: &mut DriftTally,
) {
    let n = substeps(dt, factor, lambda);
    let h = dt / n as f64;
    for _ in 0..n {
        let mean: f64 = probs.iter().zip(lambda).map(|(p, l)| p * l).sum();
        let pred = transpose_apply(&factor.trans, probs);
        for s in 0..probs.len() {
            let a = pred[s] * h;
            let b = -probs[s] * (lambda[s] - mean) * h;
            tally.prediction[s] += a;
            tally.correction[s] += b;
            probs[s] += a + b;
        }
        tally.compensator += mean * h;
        renormalize(probs);
    }
}

/// Integrates the no-jump dynamics over `dt` with exposures `y` held fixed.
pub fn continuous_drift_step(
    state: &FilterState,
    dt: f64,
    factor: &HiddenFactorSpec,
    law: &MigrationLaw,
    y: &[u64],
) -> Result<FilterState> {
    check_continuous(factor, law)?;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidTimeStep(dt));
    }
    if y.len() != law.p() || state.probs.len() != factor.m() {
        return Err(Error::Dimension(
            "state or exposures do not match the model".into(),
        ));
    }
    let lambda = total_intensities(law, y);
    let mut probs = state.probs.clone();
    euler_drift(
        &mut probs,
        dt,
        factor,
        &lambda,
        &mut DriftTally::new(factor.m()),
    );
    Ok(FilterState::new(probs, state.time + dt))
}

/// Bayes reweighting at an observed migration `from → to`.
pub fn continuous_jump_update(
    state: &FilterState,
    from: usize,
    to: usize,
    law: &MigrationLaw,
) -> Result<FilterState> {
    law.mode.expect(Mode::Continuous)?;
    let (probs, _) = jump_reweight(&state.probs, from, to, law, state.time)?;
    Ok(FilterState::new(probs, state.time))
}

/// Returns the reweighted law and `Σ_r ℓ^{r,jk} Î^r`.
fn jump_reweight(
    probs: &[f64],
    from: usize,
    to: usize,
    law: &MigrationLaw,
    time: f64,
) -> Result<(Vec<f64>, f64)> {
    let p = law.p();
    if from >= p || to >= p || from == to || probs.len() != law.m() {
        return Err(Error::Dimension(format!(
            "invalid migration {}→{}",
            from + 1,
            to + 1
        )));
    }
    let rates: Vec<f64> = law.per_state.iter().map(|l| l[from][to]).collect();
    let norm: f64 = probs.iter().zip(&rates).map(|(p, r)| p * r).sum();
    if !(norm > 0.0) {
        return Err(Error::ImpossibleJump {
            time,
            from: from + 1,
            to: to + 1,
        });
    }
    let mut out: Vec<f64> = probs
        .iter()
        .zip(&rates)
        .map(|(p, r)| p * r / norm)
        .collect();
    renormalize(&mut out);
    Ok((out, norm))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuousOptions {
    /// Largest drift step in days.
    pub grid_dt: f64,
    /// Reporting interval in days; forecasts cover one interval.
    pub report_step: f64,
    pub conversion: Conversion,
}

/// Filter output on the reporting grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousTrajectory {
    /// States at `0, R, 2R, ...`, the forecast for each interval issued from
    /// the state at its start, and the stream log-likelihood.
    pub trajectory: FilterTrajectory,
    /// Accumulated hidden-chain drift `kᵀÎ dt` per interval.
    pub prediction: Vec<Vec<f64>>,
    /// Accumulated observation-driven change per interval (compensator and
    /// jump updates).
    pub correction: Vec<Vec<f64>>,
}

/// Runs the filter over a stream. A state falling exactly on a reporting
/// time is recorded before any migration at that time.
pub fn run_continuous_filter(
    events: &EventStream,
    factor: &HiddenFactorSpec,
    law: &MigrationLaw,
    init: Option<&FilterState>,
    opts: &ContinuousOptions,
) -> Result<ContinuousTrajectory> {
    check_continuous(factor, law)?;
    if !(opts.grid_dt > 0.0) || !opts.grid_dt.is_finite() {
        return Err(Error::InvalidTimeStep(opts.grid_dt));
    }
    if !(opts.report_step > 0.0) || !opts.report_step.is_finite() {
        return Err(Error::InvalidTimeStep(opts.report_step));
    }
    if events.p() != law.p() {
        return Err(Error::Dimension(format!(
            "stream has p={}, law has p={}",
            events.p(),
            law.p()
        )));
    }
    events.check()?;
    let m = factor.m();
    let step_law = law.to_probabilities(opts.report_step, opts.conversion)?;
    let mut probs = init.map_or_else(|| factor.pi.clone(), |s| s.probs.clone());
    if probs.len() != m {
        return Err(Error::Dimension(format!(
            "initial state has {} entries, m={m}",
            probs.len()
        )));
    }

    let intervals = (events.horizon / opts.report_step + 1e-9).floor() as usize;
    let end = intervals as f64 * opts.report_step;
    let items = events.items();
    let mut next_item = 0;
    let mut y = events.initial_exposures.clone();
    let mut lambda = total_intensities(law, &y);
    let mut t = 0.0;
    let mut loglik = 0.0;

    let mut states = vec![FilterState::new(probs.clone(), 0.0)];
    let mut predicted = Vec::with_capacity(intervals);
    let mut prediction = Vec::with_capacity(intervals);
    let mut correction = Vec::with_capacity(intervals);
    if intervals > 0 {
        predicted.push(mixture(&step_law.per_state, &probs)?);
    }
    let mut tally = DriftTally::new(m);
    let mut report = 1;

    while report <= intervals {
        let report_time = report as f64 * opts.report_step;
        let item_time = items.get(next_item).map_or(f64::INFINITY, |i| i.time());
        let target = report_time.min(item_time).min(end);
        if target > t {
            let span = target - t;
            let chunks = ((span / opts.grid_dt) - 1e-9).ceil().max(1.0) as usize;
            let h = span / chunks as f64;
            for _ in 0..chunks {
                euler_drift(&mut probs, h, factor, &lambda, &mut tally);
            }
            t = target;
        }
        if target >= report_time {
            states.push(FilterState::new(probs.clone(), report_time));
            loglik -= tally.compensator;
            prediction.push(std::mem::take(&mut tally.prediction));
            correction.push(std::mem::take(&mut tally.correction));
            tally = DriftTally::new(m);
            if report < intervals {
                predicted.push(mixture(&step_law.per_state, &probs)?);
            }
            report += 1;
            continue;
        }
        match items[next_item] {
            StreamItem::Reset(r) => {
                y.clone_from(&r.exposures);
                lambda = total_intensities(law, &y);
            }
            StreamItem::Jump(e) => {
                let before = probs.clone();
                let (after, norm) = jump_reweight(&probs, e.from, e.to, law, e.time)?;
                loglik += (y[e.from] as f64 * norm).ln();
                for s in 0..m {
                    tally.correction[s] += after[s] - before[s];
                }
                probs = after;
                y[e.from] -= 1;
                y[e.to] += 1;
                lambda = total_intensities(law, &y);
            }
        }
        next_item += 1;
    }

    Ok(ContinuousTrajectory {
        trajectory: FilterTrajectory {
            states,
            predicted,
            loglik,
        },
        prediction,
        correction,
    })
}
