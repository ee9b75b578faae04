//! Forecast evaluation against realized migration ratios.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Matrix;
use crate::panel::MigrationPanel;

/// `1 − SSE/SST` with `SST` taken about the mean of `realized`.
pub fn r_squared(predicted: &[f64], realized: &[f64]) -> Result<f64> {
    if predicted.len() != realized.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} realizations",
            predicted.len(),
            realized.len()
        )));
    }
    if realized.len() < 2 {
        return Err(Error::InvalidData(
            "R² needs at least two observations".into(),
        ));
    }
    let mean = realized.iter().sum::<f64>() / realized.len() as f64;
    let sst: f64 = realized.iter().map(|r| (r - mean).powi(2)).sum();
    if sst == 0.0 {
        return Err(Error::InvalidData("realized series is constant".into()));
    }
    let sse: f64 = predicted
        .iter()
        .zip(realized)
        .map(|(p, r)| (p - r).powi(2))
        .sum();
    Ok(1.0 - sse / sst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionReport {
    /// 1-based ratings.
    pub from: usize,
    pub to: usize,
    /// `None` when fewer than two steps had exposure or the realized ratio
    /// never moved.
    pub r_squared: Option<f64>,
    /// 1-based steps with nonzero exposure in the origin rating.
    pub steps: Vec<usize>,
    pub predicted: Vec<f64>,
    pub realized: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub steps: usize,
    pub step_length_days: u32,
    pub transitions: Vec<TransitionReport>,
}

impl EvaluationReport {
    pub fn get(&self, from: usize, to: usize) -> Option<&TransitionReport> {
        self.transitions
            .iter()
            .find(|t| t.from == from + 1 && t.to == to + 1)
    }
}

/// Compares per-step forecast matrices with the realized ratios
/// `ΔN^{jk}_t / Y^j_t` for every off-diagonal transition.
pub fn evaluate(predicted: &[Matrix], panel: &MigrationPanel) -> Result<EvaluationReport> {
    if predicted.len() != panel.steps() {
        return Err(Error::Dimension(format!(
            "{} forecasts for {} panel steps",
            predicted.len(),
            panel.steps()
        )));
    }
    let p = panel.p();
    if predicted
        .iter()
        .any(|m| m.len() != p || m.iter().any(|r| r.len() != p))
    {
        return Err(Error::Dimension(format!("forecasts are not {p}×{p}")));
    }
    let mut transitions = Vec::new();
    for j in 0..p {
        for k in (0..p).filter(|&k| k != j) {
            let mut steps = Vec::new();
            let mut pred = Vec::new();
            let mut real = Vec::new();
            for t in 0..panel.steps() {
                if let Some(r) = panel.realized_ratio(t, j, k) {
                    steps.push(t + 1);
                    pred.push(predicted[t][j][k]);
                    real.push(r);
                }
            }
            transitions.push(TransitionReport {
                from: j + 1,
                to: k + 1,
                r_squared: r_squared(&pred, &real).ok(),
                steps,
                predicted: pred,
                realized: real,
            });
        }
    }
    Ok(EvaluationReport {
        steps: panel.steps(),
        step_length_days: panel.step_length_days,
        transitions,
    })
}

/// Pooled empirical transition frequencies, the single-regime law.
pub fn empirical_law(panel: &MigrationPanel) -> Matrix {
    let p = panel.p();
    let mut num = vec![vec![0.0; p]; p];
    for c in &panel.counts {
        for (nrow, crow) in num.iter_mut().zip(c) {
            for (n, &x) in nrow.iter_mut().zip(crow) {
                *n += x as f64;
            }
        }
    }
    for (j, row) in num.iter_mut().enumerate() {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|x| *x /= s);
        } else {
            row[j] = 1.0;
        }
    }
    num
}

/// Forecasts of the constant (single-regime) model for every step.
pub fn constant_forecasts(panel: &MigrationPanel) -> Vec<Matrix> {
    vec![empirical_law(panel); panel.steps()]
}
