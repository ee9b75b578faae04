//! Closed-form maximization steps.

use crate::calibrate::hmm::Posteriors;
use crate::model::{HiddenFactorSpec, Matrix, MigrationLaw, Mode, Model};
use crate::panel::MigrationPanel;

/// Raises entries below `floor` to `floor` and rescales to unit sum.
pub(crate) fn floor_row(row: &mut [f64], floor: f64) {
    if floor > 0.0 {
        row.iter_mut().for_each(|x| *x = x.max(floor));
    }
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|x| *x /= s);
}

/// Row-normalizes `num`, keeping the previous row where the row total is
/// below `floor` (or zero).
pub(crate) fn normalize_rows(num: &Matrix, prev: &Matrix, floor: f64) -> Matrix {
    num.iter()
        .zip(prev)
        .map(|(row, old)| {
            let s: f64 = row.iter().sum();
            if s > floor.max(0.0) && s > 0.0 {
                let mut r: Vec<f64> = row.iter().map(|x| x / s).collect();
                floor_row(&mut r, floor);
                r
            } else {
                old.clone()
            }
        })
        .collect()
}

/// `Π = ǔ_0` and `K` from the summed pairwise posteriors.
pub(crate) fn factor_m_step(
    first: &[f64],
    pair_sum: &Matrix,
    prev: &HiddenFactorSpec,
    floor: f64,
) -> HiddenFactorSpec {
    let mut pi = first.to_vec();
    floor_row(&mut pi, floor);
    HiddenFactorSpec::new(
        Mode::Discrete,
        pi,
        normalize_rows(pair_sum, &prev.trans, floor),
    )
}

/// `L^{i,kr} = Σ_t ǔ_{t−1}(i) ΔN^{kr}_t / Σ_t ǔ_{t−1}(i) Y^k_t` over steps
/// `from..Γ`.
pub(crate) fn law_m_step(
    state: &[Vec<f64>],
    panel: &MigrationPanel,
    prev: &MigrationLaw,
    floor: f64,
    from: usize,
) -> MigrationLaw {
    let p = prev.p();
    let per_state = prev
        .per_state
        .iter()
        .enumerate()
        .map(|(i, old)| {
            let mut num = vec![vec![0.0; p]; p];
            for t in from..panel.steps() {
                let u = state[t][i];
                if u == 0.0 {
                    continue;
                }
                for (nrow, crow) in num.iter_mut().zip(&panel.counts[t]) {
                    for (n, &c) in nrow.iter_mut().zip(crow) {
                        *n += u * c as f64;
                    }
                }
            }
            normalize_rows(&num, old, floor)
        })
        .collect();
    MigrationLaw::new(Mode::Discrete, per_state)
}

pub(crate) fn sum_pairs(pair: &[Matrix], m: usize) -> Matrix {
    let mut acc = vec![vec![0.0; m]; m];
    for v in pair {
        for (arow, vrow) in acc.iter_mut().zip(v) {
            for (a, x) in arow.iter_mut().zip(vrow) {
                *a += x;
            }
        }
    }
    acc
}

/// Full discrete M-step from smoothed posteriors. Rows whose expected
/// exposure falls below `floor` keep their values from `prev`.
pub fn m_step(post: &Posteriors, panel: &MigrationPanel, prev: &Model, floor: f64) -> Model {
    let m = prev.m();
    let first = post
        .state
        .first()
        .cloned()
        .unwrap_or_else(|| prev.factor.pi.clone());
    let factor = factor_m_step(&first, &sum_pairs(&post.pair, m), &prev.factor, floor);
    let law = law_m_step(&post.state, panel, &prev.law, floor, 0);
    Model::new(factor, law)
}
