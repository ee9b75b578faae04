//! Shared model types: the hidden economic factor, the per-state migration
//! law, filtered state vectors and the JSON parameter document.
//!
//! A model is either `discrete` (row-stochastic matrices per reference step)
//! or `continuous` (generators with rows summing to zero, rates per day).
//! Hidden states and rating categories are 0-based internally; all file
//! formats use 1-based labels.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
pub type Matrix = Vec<Vec<f64>>;

/// Tolerance on row sums and probability-vector sums of model parameters.
pub const PARAM_TOL: f64 = 1e-12;

/// Renormalization is applied once a probability vector drifts this far.
pub const DRIFT_TOL: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Discrete,
    Continuous,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Discrete => "discrete",
            Mode::Continuous => "continuous",
        }
    }

    pub(crate) fn expect(self, expected: Mode) -> Result<()> {
        if self == expected {
            Ok(())
        } else {
            Err(Error::ModeMismatch {
                expected: expected.name(),
                found: self.name(),
            })
        }
    }
}

/// Generator to transition-probability conversion over a fixed horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conversion {
    /// `P = I + Q·Δ`; fails if a diagonal entry goes negative.
    #[default]
    Linear,
    /// `P = exp(Q·Δ)`.
    Exact,
}

/// The latent Markov chain driving all migration probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenFactorSpec {
    pub mode: Mode,
    /// Initial law of the hidden state.
    pub pi: Vec<f64>,
    /// Transition matrix (discrete) or generator (continuous), m×m.
    pub trans: Matrix,
}

impl HiddenFactorSpec {
    pub fn new(mode: Mode, pi: Vec<f64>, trans: Matrix) -> Self {
        Self { mode, pi, trans }
    }

    pub fn m(&self) -> usize {
        self.pi.len()
    }

    /// Converts a continuous generator into a transition matrix over `delta`.
    pub fn to_probabilities(&self, delta: f64, conversion: Conversion) -> Result<Self> {
        self.mode.expect(Mode::Continuous)?;
        Ok(Self {
            mode: Mode::Discrete,
            pi: self.pi.clone(),
            trans: generator_to_probabilities(&self.trans, delta, conversion)?,
        })
    }

    /// Converts a transition matrix over `delta` into a generator `(K - I)/Δ`.
    pub fn to_generator(&self, delta: f64) -> Result<Self> {
        self.mode.expect(Mode::Discrete)?;
        Ok(Self {
            mode: Mode::Continuous,
            pi: self.pi.clone(),
            trans: probabilities_to_generator(&self.trans, delta)?,
        })
    }
}

/// Conditional rating migration matrices, one per hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct MigrationLaw {
    pub mode: Mode,
    pub per_state: Vec<Matrix>,
}

impl MigrationLaw {
    pub fn new(mode: Mode, per_state: Vec<Matrix>) -> Self {
        Self { mode, per_state }
    }

    pub fn m(&self) -> usize {
        self.per_state.len()
    }

    pub fn p(&self) -> usize {
        self.per_state.first().map_or(0, |l| l.len())
    }

    pub fn to_probabilities(&self, delta: f64, conversion: Conversion) -> Result<Self> {
        self.mode.expect(Mode::Continuous)?;
        let per_state = self
            .per_state
            .iter()
            .map(|g| generator_to_probabilities(g, delta, conversion))
            .collect::<Result<_>>()?;
        Ok(Self {
            mode: Mode::Discrete,
            per_state,
        })
    }

    pub fn to_generator(&self, delta: f64) -> Result<Self> {
        self.mode.expect(Mode::Discrete)?;
        let per_state = self
            .per_state
            .iter()
            .map(|l| probabilities_to_generator(l, delta))
            .collect::<Result<_>>()?;
        Ok(Self {
            mode: Mode::Continuous,
            per_state,
        })
    }

    /// Mean probability (or rate) of moving to a worse rating, averaged over
    /// the non-terminal starting ratings.
    pub fn risk_score(&self, state: usize) -> f64 {
        let l = &self.per_state[state];
        let p = l.len();
        if p < 2 {
            return 0.0;
        }
        let total: f64 = (0..p - 1)
            .map(|j| ((j + 1)..p).map(|k| l[j][k]).sum::<f64>())
            .sum();
        total / (p - 1) as f64
    }
}

/// Hidden factor and migration law together.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub factor: HiddenFactorSpec,
    pub law: MigrationLaw,
}

impl Model {
    pub fn new(factor: HiddenFactorSpec, law: MigrationLaw) -> Self {
        Self { factor, law }
    }

    pub fn mode(&self) -> Mode {
        self.factor.mode
    }

    pub fn m(&self) -> usize {
        self.factor.m()
    }

    pub fn p(&self) -> usize {
        self.law.p()
    }

    /// Fails with [`Error::InvalidModel`] listing every violation.
    pub fn validate(&self) -> Result<()> {
        let v = validate_model(&self.factor, &self.law);
        if v.is_empty() {
            Ok(())
        } else {
            let msg = v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
            Err(Error::InvalidModel(msg.join("; ")))
        }
    }

    /// Relabels hidden states: new state `s` is old state `perm[s]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let pi = perm.iter().map(|&i| self.factor.pi[i]).collect();
        let trans = perm
            .iter()
            .map(|&i| perm.iter().map(|&j| self.factor.trans[i][j]).collect())
            .collect();
        let per_state = perm
            .iter()
            .map(|&i| self.law.per_state[i].clone())
            .collect();
        Self {
            factor: HiddenFactorSpec::new(self.factor.mode, pi, trans),
            law: MigrationLaw::new(self.law.mode, per_state),
        }
    }

    /// Permutation ordering states by ascending risk score (ties keep order).
    pub fn risk_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.m()).collect();
        order.sort_by(|&a, &b| {
            self.law
                .risk_score(a)
                .partial_cmp(&self.law.risk_score(b))
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        order
    }

    /// States relabeled so that state 1 is the least risky.
    pub fn sorted_by_risk(&self) -> Self {
        self.permuted(&self.risk_order())
    }

    pub fn to_document(&self) -> ModelDocument {
        ModelDocument {
            mode: self.mode(),
            m: self.m(),
            p: self.p(),
            pi: self.factor.pi.clone(),
            trans: self.factor.trans.clone(),
            law: self.law.per_state.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(s)?;
        doc.into_model()
    }
}

/// On-disk parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub mode: Mode,
    pub m: usize,
    pub p: usize,
    pub pi: Vec<f64>,
    pub trans: Matrix,
    pub law: Vec<Matrix>,
}

impl ModelDocument {
    pub fn into_model(self) -> Result<Model> {
        if self.pi.len() != self.m || self.law.len() != self.m {
            return Err(Error::Dimension(format!(
                "declared m={} but pi has {} entries and law has {} matrices",
                self.m,
                self.pi.len(),
                self.law.len()
            )));
        }
        if self.law.iter().any(|l| l.len() != self.p) {
            return Err(Error::Dimension(format!(
                "declared p={} but a law matrix has a different row count",
                self.p
            )));
        }
        let model = Model::new(
            HiddenFactorSpec::new(self.mode, self.pi, self.trans),
            MigrationLaw::new(self.mode, self.law),
        );
        model.validate()?;
        Ok(model)
    }
}

/// One broken invariant, with where it was found.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub location: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

fn violation(location: impl Into<String>, message: impl Into<String>) -> Violation {
    Violation {
        location: location.into(),
        message: message.into(),
    }
}

fn check_square(name: &str, mat: &Matrix, n: usize, out: &mut Vec<Violation>) -> bool {
    if mat.len() != n || mat.iter().any(|r| r.len() != n) {
        out.push(violation(name, format!("expected a {n}x{n} matrix")));
        return false;
    }
    true
}

fn check_rows(name: &str, mat: &Matrix, mode: Mode, out: &mut Vec<Violation>) {
    for (i, row) in mat.iter().enumerate() {
        let loc = format!("{name} row {}", i + 1);
        for (j, &x) in row.iter().enumerate() {
            if !x.is_finite() {
                out.push(violation(&loc, format!("entry {} is not finite", j + 1)));
            } else if mode == Mode::Discrete && x < 0.0 {
                out.push(violation(
                    &loc,
                    format!("entry {} is negative ({x})", j + 1),
                ));
            } else if mode == Mode::Continuous && i != j && x < 0.0 {
                out.push(violation(
                    &loc,
                    format!("off-diagonal entry {} is negative ({x})", j + 1),
                ));
            }
        }
        let sum: f64 = row.iter().sum();
        match mode {
            Mode::Discrete if (sum - 1.0).abs() > PARAM_TOL => {
                out.push(violation(&loc, format!("row sum {sum} ≠ 1")));
            }
            Mode::Continuous if sum.abs() > PARAM_TOL => {
                out.push(violation(&loc, format!("row sum {sum} ≠ 0")));
            }
            _ => {}
        }
    }
}

/// Lists every invariant violation of a (factor, law) pair; empty means valid.
pub fn validate_model(factor: &HiddenFactorSpec, law: &MigrationLaw) -> Vec<Violation> {
    let mut out = Vec::new();
    let m = factor.m();
    if m == 0 {
        out.push(violation("Π", "no hidden states"));
    }
    if factor.mode != law.mode {
        out.push(violation(
            "mode",
            format!(
                "factor is {} but law is {}",
                factor.mode.name(),
                law.mode.name()
            ),
        ));
    }
    for (i, &x) in factor.pi.iter().enumerate() {
        if !(x >= 0.0) || !x.is_finite() {
            out.push(violation("Π", format!("entry {} is invalid ({x})", i + 1)));
        }
    }
    let sum: f64 = factor.pi.iter().sum();
    if (sum - 1.0).abs() > PARAM_TOL {
        out.push(violation("Π", format!("Π sums to {sum}")));
    }
    if check_square("K", &factor.trans, m, &mut out) {
        check_rows("K", &factor.trans, factor.mode, &mut out);
    }
    if law.m() != m {
        out.push(violation(
            "law",
            format!("{} state matrices for m={m}", law.m()),
        ));
    }
    let p = law.p();
    if p == 0 {
        out.push(violation("law", "no rating categories"));
    }
    for (h, l) in law.per_state.iter().enumerate() {
        let name = format!("L^{}", h + 1);
        if check_square(&name, l, p, &mut out) {
            check_rows(&name, l, law.mode, &mut out);
        }
    }
    out
}

/// Filtered law of the hidden state at one time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterState {
    pub probs: Vec<f64>,
    /// Step index (discrete) or time in days (continuous).
    pub time: f64,
}

impl FilterState {
    pub fn new(probs: Vec<f64>, time: f64) -> Self {
        Self { probs, time }
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// Clamps float-noise negatives and rescales to unit sum once drift exceeds
/// [`DRIFT_TOL`].
pub(crate) fn renormalize(v: &mut [f64]) {
    for x in v.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    let s: f64 = v.iter().sum();
    if s > 0.0 && (s - 1.0).abs() > DRIFT_TOL {
        v.iter_mut().for_each(|x| *x /= s);
    }
}

/// One-step (discrete) or one-`dt` (continuous, Euler) prior propagation.
///
/// Discrete mode applies `Kᵀ` `dt` times; `dt` must be a positive integer.
/// Continuous mode computes `Î + kᵀÎ·dt` and requires `dt·max|k^{hh}| < 1`.
pub fn evolve_prior(
    state: &FilterState,
    factor: &HiddenFactorSpec,
    dt: f64,
) -> Result<FilterState> {
    if state.probs.len() != factor.m() {
        return Err(Error::Dimension(format!(
            "state has {} entries, factor has m={}",
            state.probs.len(),
            factor.m()
        )));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidTimeStep(dt));
    }
    let m = factor.m();
    let mut probs = state.probs.clone();
    match factor.mode {
        Mode::Discrete => {
            if dt.fract() != 0.0 {
                return Err(Error::InvalidTimeStep(dt));
            }
            for _ in 0..dt as usize {
                probs = transpose_apply(&factor.trans, &probs);
                renormalize(&mut probs);
            }
        }
        Mode::Continuous => {
            let max_rate = (0..m).map(|h| -factor.trans[h][h]).fold(0.0, f64::max);
            if dt * max_rate >= 1.0 {
                return Err(Error::InvalidTimeStep(dt));
            }
            let drift = transpose_apply(&factor.trans, &probs);
            for (p, d) in probs.iter_mut().zip(drift) {
                *p += d * dt;
            }
            renormalize(&mut probs);
        }
    }
    Ok(FilterState::new(probs, state.time + dt))
}

/// `Mᵀ v`.
pub(crate) fn transpose_apply(mat: &Matrix, v: &[f64]) -> Vec<f64> {
    let n = mat.first().map_or(0, |r| r.len());
    let mut out = vec![0.0; n];
    for (row, &w) in mat.iter().zip(v) {
        if w == 0.0 {
            continue;
        }
        for (o, &x) in out.iter_mut().zip(row) {
            *o += w * x;
        }
    }
    out
}

/// Mixture `Σ_h Î^h L^h` of the per-state migration matrices.
pub fn predict_transition_probs(law: &MigrationLaw, state: &FilterState) -> Result<Matrix> {
    law.mode.expect(Mode::Discrete)?;
    mixture(&law.per_state, &state.probs)
}

pub(crate) fn mixture(mats: &[Matrix], weights: &[f64]) -> Result<Matrix> {
    if mats.len() != weights.len() {
        return Err(Error::Dimension(format!(
            "{} weights for {} matrices",
            weights.len(),
            mats.len()
        )));
    }
    let p = mats.first().map_or(0, |l| l.len());
    let mut out = vec![vec![0.0; p]; p];
    for (l, &w) in mats.iter().zip(weights) {
        for (orow, lrow) in out.iter_mut().zip(l) {
            for (o, &x) in orow.iter_mut().zip(lrow) {
                *o += w * x;
            }
        }
    }
    Ok(out)
}

pub(crate) fn generator_to_probabilities(
    gen: &Matrix,
    delta: f64,
    conversion: Conversion,
) -> Result<Matrix> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::InvalidTimeStep(delta));
    }
    let n = gen.len();
    match conversion {
        Conversion::Linear => {
            let mut out = gen.clone();
            for (i, row) in out.iter_mut().enumerate() {
                for x in row.iter_mut() {
                    *x *= delta;
                }
                row[i] += 1.0;
                if row[i] < 0.0 {
                    return Err(Error::InvalidModel(format!(
                        "linearized step {delta} too long: diagonal {} of row {} is negative",
                        row[i],
                        i + 1
                    )));
                }
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|x| *x /= s);
            }
            Ok(out)
        }
        Conversion::Exact => {
            let q = DMatrix::from_fn(n, n, |i, j| gen[i][j] * delta);
            let e = q.exp();
            let mut out: Matrix = (0..n)
                .map(|i| (0..n).map(|j| e[(i, j)].max(0.0)).collect())
                .collect();
            for row in out.iter_mut() {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|x| *x /= s);
            }
            Ok(out)
        }
    }
}

pub fn probabilities_to_generator(probs: &Matrix, delta: f64) -> Result<Matrix> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::InvalidTimeStep(delta));
    }
    let mut out = probs.clone();
    for (i, row) in out.iter_mut().enumerate() {
        for (j, x) in row.iter_mut().enumerate() {
            if i != j {
                *x /= delta;
            }
        }
        let off: f64 = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, x)| x)
            .sum();
        row[i] = -off;
    }
    Ok(out)
}
