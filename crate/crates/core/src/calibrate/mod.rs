//! Baum-Welch calibration of the hidden factor and the migration law.
//!
//! Discrete panels use closed-form M-steps. Spread event data use the picker
//! likelihood of [`picker`] on a fine grid, with a numerical M-step for the
//! law; the fitted fine-grid model converts to generators afterwards.

pub mod hmm;
pub mod mstep;
pub mod picker;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    probabilities_to_generator, HiddenFactorSpec, Matrix, MigrationLaw, Mode, Model, ModelDocument,
};
use crate::panel::MigrationPanel;
use crate::simulate::uniform_simplex;

pub use hmm::{
    backward_pass, forward_pass, observation_log_weights, posteriors, BackwardPass, ForwardPass,
    InitialRatings, Posteriors,
};
pub use mstep::m_step;
pub use picker::{picker_weights, FineGrid, StayerFactor};

use hmm::{expectations, Expectations};
use mstep::{factor_m_step, floor_row, law_m_step};
use picker::{picker_log_weights, GridGroups};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub restarts: usize,
    pub max_iters: usize,
    /// Stop once the relative log-likelihood improvement drops below this.
    pub tol: f64,
    pub seed: u64,
    /// Smallest probability entry kept after each M-step.
    pub floor: f64,
    pub initial_ratings: InitialRatings,
    pub stayer: StayerFactor,
    /// Keep the migration law fixed and fit only the hidden chain.
    pub fix_law: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iters: 500,
            tol: 1e-8,
            seed: 0,
            floor: 1e-12,
            initial_ratings: InitialRatings::Observed,
            stayer: StayerFactor::PickedOnly,
            fix_law: false,
        }
    }
}

impl EmConfig {
    pub fn check(&self, m: usize, p: usize) -> Result<()> {
        if self.restarts == 0 {
            return Err(Error::InvalidModel(
                "at least one restart is required".into(),
            ));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidModel(format!(
                "tolerance {} must be positive",
                self.tol
            )));
        }
        let cap = 1.0 / m.max(p).max(1) as f64;
        if !(self.floor >= 0.0 && self.floor < cap) {
            return Err(Error::InvalidModel(format!(
                "floor {} must lie in [0, {cap})",
                self.floor
            )));
        }
        if m == 0 {
            return Err(Error::InvalidModel("need at least one hidden state".into()));
        }
        Ok(())
    }
}

/// One EM run from a fixed starting point.
#[derive(Debug, Clone, PartialEq)]
pub struct EmRun {
    pub model: Model,
    /// Log-likelihood of each successive model, starting with the initial one.
    pub trace: Vec<f64>,
    pub converged: bool,
}

impl EmRun {
    pub fn loglik(&self) -> f64 {
        *self.trace.last().unwrap_or(&f64::NEG_INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartSummary {
    pub index: usize,
    /// RNG stream of the restart under the configured seed.
    pub stream: u64,
    pub loglik: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub error: Option<String>,
}

/// Fine-grid metadata needed to turn fitted probabilities into generators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FineGridInfo {
    pub interval_length: f64,
    pub n_bar: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    /// Best model, states sorted by increasing risk score.
    pub model: Model,
    pub loglik_trace: Vec<f64>,
    pub best_restart: usize,
    pub converged: bool,
    pub restarts: Vec<RestartSummary>,
    pub fine_grid: Option<FineGridInfo>,
}

#[derive(Serialize, Deserialize)]
struct Diagnostics {
    loglik: f64,
    loglik_trace: Vec<f64>,
    best_restart: usize,
    converged: bool,
    restarts: Vec<RestartSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fine_grid: Option<FineGridInfo>,
}

#[derive(Serialize)]
struct ResultDocument {
    #[serde(flatten)]
    model: ModelDocument,
    diagnostics: Diagnostics,
}

impl CalibrationResult {
    pub fn loglik(&self) -> f64 {
        *self.loglik_trace.last().unwrap_or(&f64::NEG_INFINITY)
    }

    /// Continuous-time model from a fine-grid fit: `k = (K − I)/Δ` and
    /// `ℓ = (L − I)/(n̄Δ)`, since a picked entity is one of `n̄` slots.
    /// Discrete fits are returned unchanged.
    pub fn generator_model(&self) -> Result<Model> {
        let Some(info) = self.fine_grid else {
            return Ok(self.model.clone());
        };
        let factor = self.model.factor.to_generator(info.interval_length)?;
        let entity_step = info.interval_length * info.n_bar as f64;
        let per_state = self
            .model
            .law
            .per_state
            .iter()
            .map(|l| probabilities_to_generator(l, entity_step))
            .collect::<Result<_>>()?;
        Ok(Model::new(
            factor,
            MigrationLaw::new(Mode::Continuous, per_state),
        ))
    }

    /// Model document (generators for fine-grid fits) plus a diagnostics
    /// block; readable back with [`Model::from_json`].
    pub fn to_json(&self) -> Result<String> {
        let doc = ResultDocument {
            model: self.generator_model()?.to_document(),
            diagnostics: Diagnostics {
                loglik: self.loglik(),
                loglik_trace: self.loglik_trace.clone(),
                best_restart: self.best_restart,
                converged: self.converged,
                restarts: self.restarts.clone(),
                fine_grid: self.fine_grid,
            },
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }
}

/// Draws `Π`, the rows of `K` and the rows of every `L^h` uniformly on their
/// simplices.
pub fn random_model(m: usize, p: usize, floor: f64, rng: &mut ChaCha8Rng) -> Model {
    let mut row = |n: usize| {
        let mut r = uniform_simplex(rng, n);
        floor_row(&mut r, floor);
        r
    };
    let pi = row(m);
    let trans: Matrix = (0..m).map(|_| row(m)).collect();
    let per_state = (0..m).map(|_| (0..p).map(|_| row(p)).collect()).collect();
    Model::new(
        HiddenFactorSpec::new(Mode::Discrete, pi, trans),
        MigrationLaw::new(Mode::Discrete, per_state),
    )
}

fn restart_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Alternates E- and M-steps until the relative improvement drops below
/// `tol` or `max_iters` M-steps have run.
fn iterate<W, M>(init: &Model, cfg: &EmConfig, weights: W, maximize: M) -> Result<EmRun>
where
    W: Fn(&Model) -> Result<Vec<Vec<f64>>>,
    M: Fn(&Expectations, &Model) -> Model,
{
    let mut model = init.clone();
    let mut trace = Vec::new();
    let mut exp = expectations(&weights(&model)?, &model.factor.pi, &model.factor.trans)?;
    trace.push(exp.loglik);
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        let next = maximize(&exp, &model);
        let next_exp = expectations(&weights(&next)?, &next.factor.pi, &next.factor.trans)?;
        let prev_ll = exp.loglik;
        if !next_exp.loglik.is_finite() {
            return Err(Error::Numerical("log-likelihood became non-finite".into()));
        }
        model = next;
        exp = next_exp;
        trace.push(exp.loglik);
        let gain = (exp.loglik - prev_ll) / prev_ll.abs().max(f64::MIN_POSITIVE);
        if gain < cfg.tol {
            converged = true;
            break;
        }
    }
    Ok(EmRun {
        model,
        trace,
        converged,
    })
}

fn check_discrete(panel: &MigrationPanel, init: &Model) -> Result<()> {
    init.factor.mode.expect(Mode::Discrete)?;
    init.law.mode.expect(Mode::Discrete)?;
    if panel.steps() == 0 {
        return Err(Error::Empty("panel has no steps".into()));
    }
    if panel.p() != init.p() {
        return Err(Error::Dimension(format!(
            "panel has p={}, model has p={}",
            panel.p(),
            init.p()
        )));
    }
    Ok(())
}

/// Single discrete EM run from `init`.
pub fn em_run(panel: &MigrationPanel, init: &Model, cfg: &EmConfig) -> Result<EmRun> {
    check_discrete(panel, init)?;
    cfg.check(init.m(), init.p())?;
    let skip = usize::from(cfg.initial_ratings == InitialRatings::Unknown);
    iterate(
        init,
        cfg,
        |model| {
            Ok(observation_log_weights(
                panel,
                &model.law,
                cfg.initial_ratings,
            ))
        },
        |exp, prev| {
            let factor = factor_m_step(&exp.state[0], &exp.pair_sum, &prev.factor, cfg.floor);
            let law = if cfg.fix_law {
                prev.law.clone()
            } else {
                law_m_step(&exp.state, panel, &prev.law, cfg.floor, skip)
            };
            Model::new(factor, law)
        },
    )
}

/// Single fine-grid EM run from `init`, whose law holds fine-interval picker
/// probabilities.
pub fn em_run_continuous(grid: &FineGrid, init: &Model, cfg: &EmConfig) -> Result<EmRun> {
    init.factor.mode.expect(Mode::Discrete)?;
    init.law.mode.expect(Mode::Discrete)?;
    if grid.is_empty() {
        return Err(Error::Empty("fine grid has no intervals".into()));
    }
    cfg.check(init.m(), init.p())?;
    let groups = GridGroups::new(grid);
    iterate(
        init,
        cfg,
        |model| picker_log_weights(grid, &model.law, cfg.stayer),
        |exp, prev| {
            let factor = factor_m_step(&exp.state[0], &exp.pair_sum, &prev.factor, cfg.floor);
            let law = if cfg.fix_law {
                prev.law.clone()
            } else {
                picker::law_m_step(grid, &groups, &exp.state, &prev.law, cfg.stayer, cfg.floor)
            };
            Model::new(factor, law)
        },
    )
}

fn best_of(runs: Vec<Result<EmRun>>, fine_grid: Option<FineGridInfo>) -> Result<CalibrationResult> {
    let restarts: Vec<RestartSummary> = runs
        .iter()
        .enumerate()
        .map(|(i, r)| match r {
            Ok(run) => RestartSummary {
                index: i,
                stream: i as u64,
                loglik: Some(run.loglik()),
                iterations: run.trace.len() - 1,
                converged: run.converged,
                error: None,
            },
            Err(e) => RestartSummary {
                index: i,
                stream: i as u64,
                loglik: None,
                iterations: 0,
                converged: false,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let mut best: Option<(usize, &EmRun)> = None;
    for (i, r) in runs.iter().enumerate() {
        if let Ok(run) = r {
            if best.is_none_or(|(_, b)| run.loglik() > b.loglik()) {
                best = Some((i, run));
            }
        }
    }
    let Some((idx, run)) = best else {
        let first = runs.into_iter().find_map(|r| r.err());
        return Err(first.unwrap_or_else(|| Error::Numerical("no restart ran".into())));
    };
    Ok(CalibrationResult {
        model: run.model.sorted_by_risk(),
        loglik_trace: run.trace.clone(),
        best_restart: idx,
        converged: run.converged,
        restarts,
        fine_grid,
    })
}

/// Multi-start discrete EM; restarts run in parallel and the best final
/// log-likelihood wins.
pub fn em_fit(panel: &MigrationPanel, m: usize, cfg: &EmConfig) -> Result<CalibrationResult> {
    if panel.steps() == 0 {
        return Err(Error::Empty("panel has no steps".into()));
    }
    cfg.check(m, panel.p())?;
    let p = panel.p();
    let runs: Vec<Result<EmRun>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let init = random_model(m, p, cfg.floor, &mut restart_rng(cfg.seed, r as u64));
            em_run(panel, &init, cfg)
        })
        .collect();
    best_of(runs, None)
}

/// Multi-start fine-grid EM over spread data.
pub fn em_fit_continuous(grid: &FineGrid, m: usize, cfg: &EmConfig) -> Result<CalibrationResult> {
    if grid.is_empty() {
        return Err(Error::Empty("fine grid has no intervals".into()));
    }
    cfg.check(m, grid.p())?;
    let p = grid.p();
    let runs: Vec<Result<EmRun>> = (0..cfg.restarts)
        .into_par_iter()
        .map(|r| {
            let init = random_model(m, p, cfg.floor, &mut restart_rng(cfg.seed, r as u64));
            em_run_continuous(grid, &init, cfg)
        })
        .collect();
    best_of(
        runs,
        Some(FineGridInfo {
            interval_length: grid.interval_length,
            n_bar: grid.n_bar,
        }),
    )
}
