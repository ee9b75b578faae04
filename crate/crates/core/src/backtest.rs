//! Rolling recalibration: fit on every step before a cut, forecast the next
//! block out of sample, move the cut forward by one block.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibrate::{em_fit, EmConfig};
use crate::discrete::run_filter;
use crate::error::{Error, Result};
use crate::evaluate::{evaluate, EvaluationReport};
use crate::model::Matrix;
use crate::panel::MigrationPanel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestConfig {
    pub states: usize,
    /// Steps in the first training window.
    pub train_steps: usize,
    /// Steps forecast before each refit.
    pub refit_steps: usize,
    pub em: EmConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fold {
    /// Training covers steps `1..=cut`; forecasts cover `cut+1..=end`.
    pub cut: usize,
    pub end: usize,
    pub loglik: f64,
    pub predicted: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestReport {
    pub folds: Vec<Fold>,
    /// Out-of-sample evaluation over steps `train_steps+1..=Γ`.
    pub evaluation: EvaluationReport,
}

pub fn backtest(panel: &MigrationPanel, cfg: &BacktestConfig) -> Result<BacktestReport> {
    if cfg.refit_steps == 0 {
        return Err(Error::InvalidData(
            "refit interval must be at least one step".into(),
        ));
    }
    if cfg.train_steps == 0 || cfg.train_steps >= panel.steps() {
        return Err(Error::InvalidData(format!(
            "training window of {} steps leaves nothing to forecast in {} steps",
            cfg.train_steps,
            panel.steps()
        )));
    }
    let cuts: Vec<usize> = (cfg.train_steps..panel.steps())
        .step_by(cfg.refit_steps)
        .collect();
    let folds = cuts
        .into_par_iter()
        .map(|cut| {
            let end = (cut + cfg.refit_steps).min(panel.steps());
            let fit = em_fit(&panel.slice(0..cut), cfg.states, &cfg.em)?;
            let traj = run_filter(
                &panel.slice(0..end),
                &fit.model.factor,
                &fit.model.law,
                None,
            )?;
            Ok(Fold {
                cut,
                end,
                loglik: fit.loglik(),
                predicted: traj.predicted[cut..end].to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let predicted: Vec<Matrix> = folds.iter().flat_map(|f| f.predicted.clone()).collect();
    let evaluation = evaluate(&predicted, &panel.slice(cfg.train_steps..panel.steps()))?;
    Ok(BacktestReport { folds, evaluation })
}
