//! Test-only oracles and instance generators.
#![allow(dead_code)]

use migfilter::{HiddenFactorSpec, Matrix, MigrationLaw, MigrationPanel, Mode, Model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Strictly positive random probability vector.
pub fn simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

pub fn stochastic(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    (0..n).map(|_| simplex(rng, n)).collect()
}

pub fn random_discrete_model(rng: &mut ChaCha8Rng, m: usize, p: usize) -> Model {
    Model::new(
        HiddenFactorSpec::new(Mode::Discrete, simplex(rng, m), stochastic(rng, m)),
        MigrationLaw::new(Mode::Discrete, (0..m).map(|_| stochastic(rng, p)).collect()),
    )
}

/// Entity-level rating histories `ratings[d][t]` for `t = 0..=Γ`.
pub struct EntityData {
    pub ratings: Vec<Vec<usize>>,
    pub p: usize,
}

impl EntityData {
    pub fn random(rng: &mut ChaCha8Rng, entities: usize, p: usize, steps: usize) -> Self {
        let ratings = (0..entities)
            .map(|_| (0..=steps).map(|_| rng.random_range(0..p)).collect())
            .collect();
        Self { ratings, p }
    }

    pub fn steps(&self) -> usize {
        self.ratings[0].len() - 1
    }

    pub fn panel(&self) -> MigrationPanel {
        let p = self.p;
        let counts = (0..self.steps())
            .map(|t| {
                let mut c = vec![vec![0u64; p]; p];
                for z in &self.ratings {
                    c[z[t]][z[t + 1]] += 1;
                }
                c
            })
            .collect();
        MigrationPanel::new(counts, 1).unwrap()
    }
}

/// Brute force over every hidden path `θ_0..θ_Γ`.
pub struct Enumeration {
    /// `filtered[t][h] = P(Θ_t = h | steps 1..t)` for `t = 0..=Γ`.
    pub filtered: Vec<Vec<f64>>,
    /// `smoothed[t][h] = P(Θ_t = h | all)` for `t = 0..Γ−1`.
    pub smoothed: Vec<Vec<f64>>,
    /// `pairs[t−1][k][j] = P(Θ_{t−1} = k, Θ_t = j | all)` for `t = 1..Γ−1`.
    pub pairs: Vec<Matrix>,
    pub loglik: f64,
}

fn paths(m: usize, len: usize) -> impl Iterator<Item = Vec<usize>> {
    let total = m.pow(len as u32);
    (0..total).map(move |mut code| {
        let mut path = vec![0; len];
        for slot in path.iter_mut() {
            *slot = code % m;
            code /= m;
        }
        path
    })
}

/// Probability of the hidden path and of the entity moves of steps `1..=upto`.
fn path_weight(model: &Model, data: &EntityData, path: &[usize], upto: usize) -> f64 {
    let mut w = model.factor.pi[path[0]];
    for t in 1..path.len() {
        w *= model.factor.trans[path[t - 1]][path[t]];
    }
    for t in 1..=upto {
        let l = &model.law.per_state[path[t - 1]];
        for z in &data.ratings {
            w *= l[z[t - 1]][z[t]];
        }
    }
    w
}

pub fn enumerate(model: &Model, data: &EntityData) -> Enumeration {
    let m = model.m();
    let steps = data.steps();
    let all: Vec<Vec<usize>> = paths(m, steps + 1).collect();

    let filtered = (0..=steps)
        .map(|t| {
            let mut acc = vec![0.0; m];
            for path in &all {
                acc[path[t]] += path_weight(model, data, path, t);
            }
            let s: f64 = acc.iter().sum();
            acc.iter().map(|x| x / s).collect()
        })
        .collect();

    let weights: Vec<f64> = all
        .iter()
        .map(|p| path_weight(model, data, p, steps))
        .collect();
    let total: f64 = weights.iter().sum();
    let smoothed = (0..steps)
        .map(|t| {
            let mut acc = vec![0.0; m];
            for (path, w) in all.iter().zip(&weights) {
                acc[path[t]] += w / total;
            }
            acc
        })
        .collect();
    let pairs = (1..steps)
        .map(|t| {
            let mut acc = vec![vec![0.0; m]; m];
            for (path, w) in all.iter().zip(&weights) {
                acc[path[t - 1]][path[t]] += w / total;
            }
            acc
        })
        .collect();
    Enumeration {
        filtered,
        smoothed,
        pairs,
        loglik: total.ln(),
    }
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max)
}

pub fn sup_norm(a: &Matrix, b: &Matrix) -> f64 {
    max_abs_diff(a, b)
}

/// `exp(A)` by Taylor series with scaling and squaring.
pub fn expm_series(a: &Matrix) -> Matrix {
    let n = a.len();
    let norm = a
        .iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let squarings = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scale = 2f64.powi(squarings as i32);
    let scaled: Matrix = a
        .iter()
        .map(|r| r.iter().map(|x| x / scale).collect())
        .collect();
    let mut result: Matrix = (0..n)
        .map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect())
        .collect();
    let mut term = result.clone();
    for k in 1..30 {
        term = matmul(&term, &scaled);
        term.iter_mut().flatten().for_each(|x| *x /= k as f64);
        for (r, t) in result.iter_mut().zip(&term) {
            for (x, y) in r.iter_mut().zip(t) {
                *x += y;
            }
        }
    }
    for _ in 0..squarings {
        result = matmul(&result, &result);
    }
    result
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let n = a.len();
    let q = b[0].len();
    (0..n)
        .map(|i| {
            (0..q)
                .map(|j| (0..b.len()).map(|k| a[i][k] * b[k][j]).sum())
                .collect()
        })
        .collect()
}

/// All permutations of `0..n`.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for rest in permutations(n - 1) {
        for pos in 0..=rest.len() {
            let mut p = rest.clone();
            p.insert(pos, n - 1);
            out.push(p);
        }
    }
    out
}
