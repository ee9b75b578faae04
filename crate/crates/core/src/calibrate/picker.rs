//! Fine-grid likelihood for spread event data.
//!
//! Each fine interval carries at most one migration. A picker selects one
//! entity uniformly among `n̄` slots (`n̄` the largest population seen); with
//! probability `1 − n_t/n̄` nobody is picked. A picked entity in rating `j`
//! moves to `k` with probability `L^{h,jk}`. The interval likelihood under
//! hidden state `h` is
//!
//! ```text
//! no migration:   W^h = (1 − n_t/n̄) + (1/n̄) Σ_j Y^j L^{h,jj}
//! migration j→k:  W^h = (1/n̄) L^{h,jk}
//! ```

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::calibrate::mstep::floor_row;
use crate::continuous::{spread_jumps, SpreadConfig};
use crate::error::{Error, Result};
use crate::model::{Matrix, MigrationLaw, Mode};
use crate::panel::{EventStream, MigrationPanel, StreamItem};

/// Treatment of the non-picked entities in a migration interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StayerFactor {
    /// Only the picked entity contributes a factor.
    #[default]
    PickedOnly,
    /// Every other exposed entity also contributes its `L^{h,jj}`.
    AllStayers,
}

/// Equal-length intervals with exposures at each interval start and at most
/// one migration inside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineGrid {
    pub interval_length: f64,
    pub exposures: Vec<Vec<u64>>,
    pub jumps: Vec<Option<(usize, usize)>>,
    pub n_bar: u64,
}

impl FineGrid {
    pub fn len(&self) -> usize {
        self.jumps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.jumps.is_empty()
    }

    pub fn p(&self) -> usize {
        self.exposures.first().map_or(0, |y| y.len())
    }

    /// Bins a stream into intervals of `interval_length`; fails if an interval
    /// holds two migrations.
    pub fn from_stream(stream: &EventStream, interval_length: f64) -> Result<Self> {
        if !(interval_length > 0.0) || !interval_length.is_finite() {
            return Err(Error::InvalidTimeStep(interval_length));
        }
        stream.check()?;
        let n = (stream.horizon / interval_length - 1e-9).ceil().max(0.0) as usize;
        let items = stream.items();
        let mut idx = 0;
        let mut y = stream.initial_exposures.clone();
        let mut exposures = Vec::with_capacity(n);
        let mut jumps = Vec::with_capacity(n);
        for i in 0..n {
            let start = i as f64 * interval_length;
            let end = start + interval_length;
            while let Some(StreamItem::Reset(r)) = items.get(idx) {
                if r.time > start {
                    break;
                }
                y.clone_from(&r.exposures);
                idx += 1;
            }
            exposures.push(y.clone());
            let mut jump = None;
            while idx < items.len() && items[idx].time() < end {
                match items[idx] {
                    StreamItem::Jump(e) => {
                        if jump.is_some() {
                            return Err(Error::InvalidData(format!(
                                "fine interval {} starting at {start} holds more than one migration",
                                i + 1
                            )));
                        }
                        jump = Some((e.from, e.to));
                        y[e.from] -= 1;
                        y[e.to] += 1;
                    }
                    StreamItem::Reset(r) => {
                        return Err(Error::InvalidData(format!(
                            "exposure reset at {} falls inside fine interval {}",
                            r.time,
                            i + 1
                        )));
                    }
                }
                idx += 1;
            }
            jumps.push(jump);
        }
        let n_bar = exposures
            .iter()
            .map(|y| y.iter().sum::<u64>())
            .max()
            .unwrap_or(0);
        if n_bar == 0 {
            return Err(Error::Empty("no exposed entities on the fine grid".into()));
        }
        Ok(Self {
            interval_length,
            exposures,
            jumps,
            n_bar,
        })
    }

    /// Spreads a panel over `subintervals` slots per step and bins it.
    pub fn from_panel(panel: &MigrationPanel, cfg: &SpreadConfig) -> Result<Self> {
        let stream = spread_jumps(panel, cfg)?;
        Self::from_stream(
            &stream,
            panel.step_length_days as f64 / cfg.subintervals_per_step as f64,
        )
    }
}

fn check_law(grid: &FineGrid, law: &MigrationLaw) -> Result<()> {
    law.mode.expect(Mode::Discrete)?;
    if grid.p() != law.p() {
        return Err(Error::Dimension(format!(
            "grid has p={}, law has p={}",
            grid.p(),
            law.p()
        )));
    }
    Ok(())
}

/// Interval likelihoods `W^h_t` (rows: intervals, columns: hidden states).
pub fn picker_weights(grid: &FineGrid, law: &MigrationLaw, stayer: StayerFactor) -> Result<Matrix> {
    Ok(picker_log_weights(grid, law, stayer)?
        .into_iter()
        .map(|row| row.into_iter().map(f64::exp).collect())
        .collect())
}

pub(crate) fn picker_log_weights(
    grid: &FineGrid,
    law: &MigrationLaw,
    stayer: StayerFactor,
) -> Result<Matrix> {
    check_law(grid, law)?;
    let nb = grid.n_bar as f64;
    let p = law.p();
    let log_diag: Vec<Vec<f64>> = law
        .per_state
        .iter()
        .map(|l| (0..p).map(|j| l[j][j].ln()).collect())
        .collect();
    Ok(grid
        .exposures
        .iter()
        .zip(&grid.jumps)
        .map(|(y, jump)| {
            let n: u64 = y.iter().sum();
            law.per_state
                .iter()
                .enumerate()
                .map(|(h, l)| match *jump {
                    None => {
                        let stay: f64 = (0..p).map(|j| y[j] as f64 * l[j][j]).sum();
                        ((1.0 - n as f64 / nb) + stay / nb).ln()
                    }
                    Some((j, k)) => {
                        let mut w = (l[j][k] / nb).ln();
                        if stayer == StayerFactor::AllStayers {
                            for r in 0..p {
                                let others = y[r] - u64::from(r == j);
                                if others > 0 {
                                    w += others as f64 * log_diag[h][r];
                                }
                            }
                        }
                        w
                    }
                })
                .collect()
        })
        .collect())
}

/// Sufficient statistics of the fine grid for the law maximization:
/// distinct exposure vectors of migration-free intervals.
#[derive(Debug, Clone)]
pub(crate) struct GridGroups {
    keys: Vec<Vec<u64>>,
    group_of: Vec<Option<usize>>,
}

impl GridGroups {
    pub(crate) fn new(grid: &FineGrid) -> Self {
        let mut index: BTreeMap<&[u64], usize> = BTreeMap::new();
        let mut keys = Vec::new();
        let group_of = grid
            .exposures
            .iter()
            .zip(&grid.jumps)
            .map(|(y, jump)| {
                jump.is_none().then(|| {
                    *index.entry(y.as_slice()).or_insert_with(|| {
                        keys.push(y.clone());
                        keys.len() - 1
                    })
                })
            })
            .collect();
        Self { keys, group_of }
    }
}

/// Gradient-norm threshold on the normalized objective.
const GRAD_TOL: f64 = 1e-8;
const MAX_NEWTON: usize = 200;

/// Maximizes `Σ_t ǔ_t(h) log W^h_t` over row-stochastic `L^h` for each state.
///
/// Given the diagonal `d_j = L^{jj}`, the optimal off-diagonal entries are
/// `(1 − d_j) A_jk / Σ_{k'≠j} A_jk'` with `A` the posterior-weighted migration
/// counts, so the search runs over the diagonal alone. The reduced objective
/// is concave and is maximized by projected Newton steps.
pub(crate) fn law_m_step(
    grid: &FineGrid,
    groups: &GridGroups,
    state: &[Vec<f64>],
    prev: &MigrationLaw,
    stayer: StayerFactor,
    floor: f64,
) -> MigrationLaw {
    let p = prev.p();
    let per_state = (0..prev.m())
        .map(|h| {
            let mut group_w = vec![0.0; groups.keys.len()];
            let mut a = vec![vec![0.0; p]; p];
            for (t, u) in state.iter().enumerate() {
                let u = u[h];
                if u == 0.0 {
                    continue;
                }
                match (groups.group_of[t], grid.jumps[t]) {
                    (Some(g), _) => group_w[g] += u,
                    (None, Some((j, k))) => {
                        a[j][k] += u;
                        if stayer == StayerFactor::AllStayers {
                            let y = &grid.exposures[t];
                            for r in 0..p {
                                a[r][r] += u * (y[r] - u64::from(r == j)) as f64;
                            }
                        }
                    }
                    (None, None) => unreachable!(),
                }
            }
            maximize_state(
                &groups.keys,
                &group_w,
                &a,
                grid.n_bar as f64,
                &prev.per_state[h],
                floor,
            )
        })
        .collect();
    MigrationLaw::new(Mode::Discrete, per_state)
}

struct Reduced<'a> {
    keys: &'a [Vec<u64>],
    weights: &'a [f64],
    stay: Vec<f64>,
    leave: Vec<f64>,
    n_bar: f64,
    free: Vec<usize>,
}

impl Reduced<'_> {
    fn value(&self, d: &[f64]) -> f64 {
        let mut f = 0.0;
        for &j in &self.free {
            if self.stay[j] > 0.0 {
                f += self.stay[j] * d[j].ln();
            }
            f += self.leave[j] * (1.0 - d[j]).ln();
        }
        for (y, &w) in self.keys.iter().zip(self.weights) {
            if w > 0.0 {
                f += w * self.level(y, d).ln();
            }
        }
        if f.is_nan() {
            f64::NEG_INFINITY
        } else {
            f
        }
    }

    fn level(&self, y: &[u64], d: &[f64]) -> f64 {
        let n: u64 = y.iter().sum();
        let stay: f64 = y.iter().zip(d).map(|(&c, &x)| c as f64 * x).sum();
        1.0 - n as f64 / self.n_bar + stay / self.n_bar
    }

    /// Gradient and Hessian restricted to the free coordinates.
    fn derivatives(&self, d: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let nf = self.free.len();
        let mut g = vec![0.0; nf];
        let mut hess = vec![vec![0.0; nf]; nf];
        for (a, &j) in self.free.iter().enumerate() {
            if self.stay[j] > 0.0 {
                g[a] += self.stay[j] / d[j];
                hess[a][a] -= self.stay[j] / (d[j] * d[j]);
            }
            g[a] -= self.leave[j] / (1.0 - d[j]);
            hess[a][a] -= self.leave[j] / ((1.0 - d[j]) * (1.0 - d[j]));
        }
        for (y, &w) in self.keys.iter().zip(self.weights) {
            if w == 0.0 {
                continue;
            }
            let s = self.level(y, d);
            let yf: Vec<f64> = self
                .free
                .iter()
                .map(|&j| y[j] as f64 / self.n_bar)
                .collect();
            for a in 0..nf {
                if yf[a] == 0.0 {
                    continue;
                }
                g[a] += w * yf[a] / s;
                for b in 0..nf {
                    hess[a][b] -= w * yf[a] * yf[b] / (s * s);
                }
            }
        }
        (g, hess)
    }
}

fn maximize_state(
    keys: &[Vec<u64>],
    weights: &[f64],
    a: &Matrix,
    n_bar: f64,
    prev: &Matrix,
    floor: f64,
) -> Matrix {
    let p = prev.len();
    let stay: Vec<f64> = (0..p).map(|j| a[j][j]).collect();
    let leave: Vec<f64> = (0..p)
        .map(|j| (0..p).filter(|&k| k != j).map(|k| a[j][k]).sum())
        .collect();
    let exposure: Vec<f64> = (0..p)
        .map(|j| {
            keys.iter()
                .zip(weights)
                .map(|(y, w)| w * y[j] as f64)
                .sum::<f64>()
                + stay[j]
                + leave[j]
        })
        .collect();
    let informed: Vec<bool> = exposure
        .iter()
        .map(|&e| e > floor.max(0.0) && e > 0.0)
        .collect();

    // rows never left keep diagonal one; uninformed rows keep their values
    let mut d: Vec<f64> = (0..p)
        .map(|j| {
            if !informed[j] {
                prev[j][j]
            } else if leave[j] == 0.0 {
                1.0
            } else {
                prev[j][j].clamp(1e-6, 1.0 - 1e-6)
            }
        })
        .collect();
    let free: Vec<usize> = (0..p).filter(|&j| informed[j] && leave[j] > 0.0).collect();
    let total: f64 = weights.iter().sum::<f64>() + a.iter().flatten().sum::<f64>();
    let problem = Reduced {
        keys,
        weights,
        stay: stay.clone(),
        leave: leave.clone(),
        n_bar,
        free: free.clone(),
    };
    if !free.is_empty() && total > 0.0 {
        newton(&problem, &mut d, total);
    }

    (0..p)
        .map(|j| {
            if !informed[j] {
                return prev[j].clone();
            }
            let mut row: Vec<f64> = (0..p)
                .map(|k| {
                    if k == j {
                        d[j]
                    } else if leave[j] > 0.0 {
                        (1.0 - d[j]) * a[j][k] / leave[j]
                    } else {
                        0.0
                    }
                })
                .collect();
            floor_row(&mut row, floor);
            row
        })
        .collect()
}

fn newton(problem: &Reduced<'_>, d: &mut [f64], total: f64) {
    let free = &problem.free;
    let mut f = problem.value(d);
    for _ in 0..MAX_NEWTON {
        let (g, hess) = problem.derivatives(d);
        // coordinates pinned at zero with the gradient pushing outward
        let active: Vec<bool> = free
            .iter()
            .enumerate()
            .map(|(a, &j)| d[j] <= 0.0 && g[a] <= 0.0)
            .collect();
        let idx: Vec<usize> = (0..free.len()).filter(|&a| !active[a]).collect();
        let gnorm = idx.iter().map(|&a| g[a].abs()).fold(0.0, f64::max) / total;
        if gnorm < GRAD_TOL || idx.is_empty() {
            break;
        }
        let n = idx.len();
        let neg_h = DMatrix::from_fn(n, n, |r, c| -hess[idx[r]][idx[c]]);
        let rhs = DVector::from_fn(n, |r, _| g[idx[r]]);
        let step = match neg_h.cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => rhs.clone(),
        };
        let mut dir = vec![0.0; free.len()];
        for (r, &a) in idx.iter().enumerate() {
            dir[a] = step[r];
        }
        // stay strictly below one, and strictly above zero where the
        // objective has a log barrier there
        let mut alpha: f64 = 1.0;
        for (a, &j) in free.iter().enumerate() {
            if dir[a] > 0.0 {
                alpha = alpha.min(0.99 * (1.0 - d[j]) / dir[a]);
            } else if dir[a] < 0.0 && problem.stay[j] > 0.0 {
                alpha = alpha.min(0.99 * d[j] / -dir[a]);
            }
        }
        let slope: f64 = g.iter().zip(&dir).map(|(x, y)| x * y).sum();
        let mut accepted = false;
        for _ in 0..60 {
            let mut trial = d.to_vec();
            for (a, &j) in free.iter().enumerate() {
                trial[j] = (d[j] + alpha * dir[a]).max(0.0);
            }
            let ft = problem.value(&trial);
            if ft >= f + 1e-4 * alpha * slope.max(0.0) {
                // a step that no longer moves the objective means rounding
                // has taken over
                accepted = ft > f;
                d.copy_from_slice(&trial);
                f = ft;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }
}
