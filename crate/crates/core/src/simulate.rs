//! Synthetic hidden-factor paths, migration panels and event streams.
//!
//! Every simulation is a pure function of its inputs and seed. The hidden
//! path and the migrations draw from separate streams of the same seed, so
//! the path returned alongside a panel equals [`simulate_hidden_path`] for
//! the same configuration.

use std::io::Write;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HiddenFactorSpec, Matrix, MigrationLaw, Mode};
use crate::panel::{Event, EventStream, MigrationPanel};

const PATH_STREAM: u64 = 0;
const MIGRATION_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub mode: Mode,
    /// Initial population per rating; the cohort is closed.
    pub entities_per_rating: Vec<u64>,
    /// Number of steps (discrete, integral) or horizon in days (continuous).
    pub horizon: f64,
    pub seed: u64,
    /// Step length recorded on simulated panels.
    #[serde(default = "default_step_days")]
    pub step_length_days: u32,
}

fn default_step_days() -> u32 {
    1
}

impl SimulationConfig {
    pub fn check(&self) -> Result<()> {
        if self.entities_per_rating.iter().all(|&n| n == 0) {
            return Err(Error::InvalidData("no entities to simulate".into()));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::InvalidData(format!(
                "horizon {} must be positive",
                self.horizon
            )));
        }
        if self.mode == Mode::Discrete && self.horizon.fract() != 0.0 {
            return Err(Error::InvalidData(format!(
                "discrete horizon {} must be a whole number of steps",
                self.horizon
            )));
        }
        if self.step_length_days == 0 {
            return Err(Error::InvalidData(
                "step length must be at least one day".into(),
            ));
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Piecewise-constant hidden path: `states[i]` holds on `[times[i], times[i+1])`.
///
/// A discrete path records every step `0..=Γ`; a continuous path records the
/// initial state and each jump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenPath {
    pub times: Vec<f64>,
    pub states: Vec<usize>,
}

impl HiddenPath {
    pub fn state_at(&self, t: f64) -> usize {
        let idx = self.times.partition_point(|&s| s <= t);
        self.states[idx.saturating_sub(1)]
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["time", "state"])?;
        for (t, s) in self.times.iter().zip(&self.states) {
            w.write_record([t.to_string(), (s + 1).to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn simulate_hidden_path(
    factor: &HiddenFactorSpec,
    config: &SimulationConfig,
) -> Result<HiddenPath> {
    config.check()?;
    factor.mode.expect(config.mode)?;
    draw_path(factor, config, &mut config.rng(PATH_STREAM))
}

fn draw_path(
    factor: &HiddenFactorSpec,
    config: &SimulationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<HiddenPath> {
    let start = WeightedIndex::new(&factor.pi)
        .map_err(|e| Error::InvalidModel(format!("initial law: {e}")))?
        .sample(rng);
    match factor.mode {
        Mode::Discrete => {
            let rows = row_samplers(&factor.trans)?;
            let steps = config.horizon as usize;
            let mut states = Vec::with_capacity(steps + 1);
            states.push(start);
            for _ in 0..steps {
                let cur = *states.last().unwrap();
                states.push(rows[cur].sample(rng));
            }
            let times = (0..=steps).map(|t| t as f64).collect();
            Ok(HiddenPath { times, states })
        }
        Mode::Continuous => {
            let mut times = vec![0.0];
            let mut states = vec![start];
            let mut t = 0.0;
            let mut cur = start;
            loop {
                let rate = -factor.trans[cur][cur];
                if rate <= 0.0 {
                    break;
                }
                t += Exp::new(rate).unwrap().sample(rng);
                if t >= config.horizon {
                    break;
                }
                let weights: Vec<f64> = (0..factor.m())
                    .map(|i| if i == cur { 0.0 } else { factor.trans[cur][i] })
                    .collect();
                cur = WeightedIndex::new(&weights)
                    .map_err(|e| Error::InvalidModel(format!("generator row {}: {e}", cur + 1)))?
                    .sample(rng);
                times.push(t);
                states.push(cur);
            }
            Ok(HiddenPath { times, states })
        }
    }
}

fn row_samplers(mat: &Matrix) -> Result<Vec<WeightedIndex<f64>>> {
    mat.iter()
        .enumerate()
        .map(|(i, row)| {
            WeightedIndex::new(row).map_err(|e| Error::InvalidModel(format!("row {}: {e}", i + 1)))
        })
        .collect()
}

/// Closed-cohort panel: during step `t` each entity moves according to the
/// row of `L^{θ_{t−1}}` for its current rating.
pub fn simulate_panel_discrete(
    factor: &HiddenFactorSpec,
    law: &MigrationLaw,
    config: &SimulationConfig,
) -> Result<(MigrationPanel, HiddenPath)> {
    config.check()?;
    factor.mode.expect(Mode::Discrete)?;
    law.mode.expect(Mode::Discrete)?;
    config.mode.expect(Mode::Discrete)?;
    check_dims(factor, law, config)?;
    let path = draw_path(factor, config, &mut config.rng(PATH_STREAM))?;
    let mut rng = config.rng(MIGRATION_STREAM);
    let samplers = law
        .per_state
        .iter()
        .map(row_samplers)
        .collect::<Result<Vec<_>>>()?;
    let p = law.p();
    let steps = config.horizon as usize;
    let mut y = config.entities_per_rating.clone();
    let mut counts = Vec::with_capacity(steps);
    for t in 0..steps {
        let h = path.states[t];
        let mut c = vec![vec![0u64; p]; p];
        for j in 0..p {
            for _ in 0..y[j] {
                c[j][samplers[h][j].sample(&mut rng)] += 1;
            }
        }
        y = (0..p).map(|k| (0..p).map(|j| c[j][k]).sum()).collect();
        counts.push(c);
    }
    let panel = MigrationPanel::new(counts, config.step_length_days)?;
    Ok((panel, path))
}

/// Exact event simulation: between hidden jumps the total migration rate is
/// constant, so competing exponential clocks are sampled directly.
pub fn simulate_events_continuous(
    factor: &HiddenFactorSpec,
    law: &MigrationLaw,
    config: &SimulationConfig,
) -> Result<(EventStream, HiddenPath)> {
    config.check()?;
    factor.mode.expect(Mode::Continuous)?;
    law.mode.expect(Mode::Continuous)?;
    config.mode.expect(Mode::Continuous)?;
    check_dims(factor, law, config)?;
    let path = draw_path(factor, config, &mut config.rng(PATH_STREAM))?;
    let mut rng = config.rng(MIGRATION_STREAM);
    let p = law.p();
    let mut y = config.entities_per_rating.clone();
    let mut events = Vec::new();
    for (seg, &h) in path.states.iter().enumerate() {
        let mut t = path.times[seg];
        let end = path.times.get(seg + 1).copied().unwrap_or(config.horizon);
        let rates = &law.per_state[h];
        loop {
            let mut weights = Vec::with_capacity(p * p);
            for j in 0..p {
                for k in 0..p {
                    weights.push(if j == k {
                        0.0
                    } else {
                        y[j] as f64 * rates[j][k]
                    });
                }
            }
            let total: f64 = weights.iter().sum();
            if total <= 0.0 {
                break;
            }
            t += Exp::new(total).unwrap().sample(&mut rng);
            if t >= end {
                break;
            }
            let pick = WeightedIndex::new(&weights).unwrap().sample(&mut rng);
            let (j, k) = (pick / p, pick % p);
            events.push(Event {
                time: t,
                from: j,
                to: k,
                exposures: y.clone(),
            });
            y[j] -= 1;
            y[k] += 1;
        }
    }
    let stream = EventStream {
        horizon: config.horizon,
        initial_exposures: config.entities_per_rating.clone(),
        events,
        resets: Vec::new(),
    };
    Ok((stream, path))
}

fn check_dims(
    factor: &HiddenFactorSpec,
    law: &MigrationLaw,
    config: &SimulationConfig,
) -> Result<()> {
    if law.m() != factor.m() {
        return Err(Error::Dimension(format!(
            "law has {} states, factor has {}",
            law.m(),
            factor.m()
        )));
    }
    if config.entities_per_rating.len() != law.p() {
        return Err(Error::Dimension(format!(
            "{} initial populations for p={}",
            config.entities_per_rating.len(),
            law.p()
        )));
    }
    Ok(())
}

/// Uniform draw on the probability simplex (flat Dirichlet).
pub(crate) fn uniform_simplex<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let exp = Exp::new(1.0).unwrap();
    let mut v: Vec<f64> = (0..n).map(|_| exp.sample(rng)).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}
