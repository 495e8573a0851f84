//! Penalized empirical risk minimization over a dictionary.
//!
//! A dictionary `h_1..h_N` of functions into `[−1, 1]` spans the linear model
//! `f_λ = Σ_j λ_j h_j`. The empirical and population problems are
//!
//! ```text
//! λ̂^ε = argmin_λ P_n ℓ(y, f_λ) + ε pen(λ)
//! λ^ε = argmin_λ P   ℓ(y, f_λ) + ε pen(λ)
//! ```
//!
//! with `pen` the support size (ℓ0), `‖λ‖_1`, or `‖λ‖_p^p` with
//! `p = 1 + 1/ln N`. The convex problems are solved by monotone accelerated
//! proximal gradient with backtracking; ℓ0 is solved exactly by support
//! enumeration for `N ≤ 15`.
//!
//! The sparsity function `γ_d(λ)` is the ℓ1 mass outside the `d`
//! largest-magnitude coordinates.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::core_model::{self, FiniteSupportDistribution, Sample};
use crate::error::{invalid, Error, Result};
use crate::rng;

/// Largest dictionary accepted by the exact ℓ0 path.
pub const MAX_L0_ATOMS: usize = 15;

/// Smallest singular value below which a support is treated as degenerate.
pub const INDEPENDENCE_THRESHOLD: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    population: DMatrix<f64>,
    sample: DMatrix<f64>,
}

fn table_to_matrix(name: &str, rows: &[Vec<f64>], atoms: usize) -> Result<DMatrix<f64>> {
    for (r, row) in rows.iter().enumerate() {
        if row.len() != atoms {
            return Err(Error::DimensionMismatch(format!(
                "{name} row {r} has {} atoms, expected {atoms}",
                row.len()
            )));
        }
        if let Some(v) = row.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(invalid("atoms", format!("{name} row {r} has value {v} outside [-1, 1]")));
        }
    }
    Ok(DMatrix::from_fn(rows.len(), atoms, |i, j| rows[i][j]))
}

impl Dictionary {
    pub fn new(population: &[Vec<f64>], sample: &[Vec<f64>]) -> Result<Self> {
        let atoms = population.first().or(sample.first()).map_or(0, Vec::len);
        if atoms == 0 {
            return Err(invalid("atoms", "dictionary has no atoms"));
        }
        Ok(Self {
            population: table_to_matrix("population", population, atoms)?,
            sample: table_to_matrix("sample", sample, atoms)?,
        })
    }

    pub fn from_population(population: &[Vec<f64>], sample: &Sample) -> Result<Self> {
        let rows: Vec<Vec<f64>> = sample
            .draws()
            .iter()
            .map(|&k| {
                population.get(k).cloned().ok_or(Error::IndexOutOfRange {
                    index: k,
                    len: population.len(),
                })
            })
            .collect::<Result<_>>()?;
        Self::new(population, &rows)
    }

    pub fn atoms(&self) -> usize {
        self.population.ncols()
    }

    pub fn population(&self) -> &DMatrix<f64> {
        &self.population
    }

    pub fn sample(&self) -> &DMatrix<f64> {
        &self.sample
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Table {
    Population,
    Sample,
}

/// `f_λ` at one row of the population or sample table.
pub fn f_eval(dict: &Dictionary, lambda: &[f64], point: usize, table: Table) -> Result<f64> {
    let m = match table {
        Table::Population => &dict.population,
        Table::Sample => &dict.sample,
    };
    if lambda.len() != m.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "λ has {} entries, dictionary has {} atoms",
            lambda.len(),
            m.ncols()
        )));
    }
    if point >= m.nrows() {
        return Err(Error::IndexOutOfRange {
            index: point,
            len: m.nrows(),
        });
    }
    Ok(m.row(point).iter().zip(lambda).map(|(h, l)| h * l).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `(y − u)²`.
    Quadratic,
    /// `ln(1 + exp(−y u))` with `y = ±1`.
    Logistic,
}

impl LossKind {
    pub fn value(self, y: f64, u: f64) -> f64 {
        match self {
            LossKind::Quadratic => (y - u) * (y - u),
            LossKind::Logistic => softplus(-y * u),
        }
    }

    /// Derivative in the prediction `u`.
    pub fn derivative(self, y: f64, u: f64) -> f64 {
        match self {
            LossKind::Quadratic => 2.0 * (u - y),
            LossKind::Logistic => -y * sigmoid(-y * u),
        }
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `softplus(b) − softplus(a) = ln(1 + σ(a)·(e^{b−a} − 1))`.
fn softplus_change(a: f64, b: f64) -> f64 {
    let gap = b - a;
    if gap.abs() > 1.0 {
        softplus(b) - softplus(a)
    } else {
        (sigmoid(a) * gap.exp_m1()).ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// A loss with labels on the support points and on the sample draws.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    kind: LossKind,
    population_labels: Vec<f64>,
    sample_labels: Vec<f64>,
}

impl LossSpec {
    pub fn new(kind: LossKind, population_labels: Vec<f64>, sample_labels: Vec<f64>) -> Result<Self> {
        for y in population_labels.iter().chain(&sample_labels) {
            let ok = match kind {
                LossKind::Quadratic => y.is_finite(),
                LossKind::Logistic => *y == 1.0 || *y == -1.0,
            };
            if !ok {
                return Err(invalid("labels", format!("label {y} not valid for {kind:?} loss")));
            }
        }
        Ok(Self {
            kind,
            population_labels,
            sample_labels,
        })
    }

    pub fn from_population(kind: LossKind, population_labels: Vec<f64>, sample: &Sample) -> Result<Self> {
        let sample_labels = sample
            .draws()
            .iter()
            .map(|&k| {
                population_labels.get(k).copied().ok_or(Error::IndexOutOfRange {
                    index: k,
                    len: population_labels.len(),
                })
            })
            .collect::<Result<_>>()?;
        Self::new(kind, population_labels, sample_labels)
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn population_labels(&self) -> &[f64] {
        &self.population_labels
    }

    pub fn sample_labels(&self) -> &[f64] {
        &self.sample_labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PenaltyKind {
    /// Number of nonzero coefficients.
    L0,
    /// `‖λ‖_1`.
    L1,
    /// `‖λ‖_p^p`, `p > 1`.
    Lp { p: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub kind: PenaltyKind,
    /// Regularization weight; zero gives the unpenalized problem.
    pub epsilon: f64,
}

impl PenaltySpec {
    pub fn new(kind: PenaltyKind, epsilon: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon >= 0.0) {
            return Err(invalid("epsilon", format!("must be finite and nonnegative, got {epsilon}")));
        }
        if let PenaltyKind::Lp { p } = kind {
            if !(p.is_finite() && p > 1.0) {
                return Err(invalid("p", format!("must exceed 1, got {p}")));
            }
        }
        Ok(Self { kind, epsilon })
    }

    pub fn value(&self, lambda: &[f64]) -> f64 {
        let pen = match self.kind {
            PenaltyKind::L0 => lambda.iter().filter(|&&l| l != 0.0).count() as f64,
            PenaltyKind::L1 => l1_norm(lambda),
            PenaltyKind::Lp { p } => lambda.iter().map(|l| l.abs().powf(p)).sum(),
        };
        self.epsilon * pen
    }
}

/// `1 + 1/ln N`.
pub fn p_default(atoms: usize) -> Result<f64> {
    if atoms < 2 {
        return Err(invalid("N", format!("need at least 2 atoms, got {atoms}")));
    }
    Ok(1.0 + 1.0 / (atoms as f64).ln())
}

pub fn l1_norm(lambda: &[f64]) -> f64 {
    lambda.iter().map(|l| l.abs()).sum()
}

/// Scaled by the largest magnitude, so a single nonzero entry comes back
/// exactly and `‖λ‖_p ≤ ‖λ‖_1` survives rounding.
pub fn lp_norm(lambda: &[f64], p: f64) -> f64 {
    let top = lambda.iter().fold(0.0f64, |m, l| m.max(l.abs()));
    if top == 0.0 || !top.is_finite() {
        return top;
    }
    top * lambda.iter().map(|l| (l.abs() / top).powf(p)).sum::<f64>().powf(1.0 / p)
}

/// ℓ1 mass beyond the `d` largest-magnitude coordinates.
pub fn gamma_d(lambda: &[f64], d: usize) -> Result<f64> {
    if d > lambda.len() {
        return Err(Error::IndexOutOfRange {
            index: d,
            len: lambda.len(),
        });
    }
    let mut mags: Vec<f64> = lambda.iter().map(|l| l.abs()).collect();
    mags.sort_by(|a, b| b.total_cmp(a));
    Ok(mags[d..].iter().sum())
}

/// Coordinates with nonzero value.
pub fn support(lambda: &[f64]) -> Vec<usize> {
    lambda
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != 0.0)
        .map(|(j, _)| j)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Bound on the sup-norm of the proximal gradient mapping at the final iterate.
    pub tol: f64,
    pub max_iters: usize,
    /// Starting point; zero when absent.
    pub init: Option<Vec<f64>>,
    /// Keep the objective value of every iterate.
    pub record_trace: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iters: 100_000,
            init: None,
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub lambda: Vec<f64>,
    pub objective: f64,
    pub residual: f64,
    pub iterations: usize,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub trace: Vec<f64>,
}

/// Weighted design: rows `x_k`, labels `y_k`, weights `w_k`.
struct Design<'a> {
    x: &'a DMatrix<f64>,
    y: DVector<f64>,
    w: DVector<f64>,
}

trait SmoothRisk {
    fn value(&self, lambda: &DVector<f64>) -> f64;
    fn gradient(&self, lambda: &DVector<f64>) -> DVector<f64>;
    /// `f(z) − f(x)`, computed without cancelling two nearly equal values.
    fn change(&self, x: &DVector<f64>, z: &DVector<f64>) -> f64;
    /// `f(z) − f(y) − ⟨∇f(y), z − y⟩`.
    fn bregman(&self, y: &DVector<f64>, z: &DVector<f64>, gy: &DVector<f64>) -> f64 {
        self.change(y, z) - gy.dot(&(z - y))
    }
}

/// `λᵀGλ − 2bᵀλ + c` with `G = Xᵀ W X`, `b = Xᵀ W y`, `c = Σ w y²`.
struct QuadraticRisk {
    gram: DMatrix<f64>,
    b: DVector<f64>,
    c: f64,
}

impl QuadraticRisk {
    fn new(d: &Design<'_>) -> Self {
        let weighted = DMatrix::from_fn(d.x.nrows(), d.x.ncols(), |i, j| d.w[i] * d.x[(i, j)]);
        let gram = d.x.transpose() * &weighted;
        let b = weighted.transpose() * &d.y;
        let c = d.y.iter().zip(d.w.iter()).map(|(y, w)| w * y * y).sum();
        Self { gram, b, c }
    }
}

impl SmoothRisk for QuadraticRisk {
    fn value(&self, lambda: &DVector<f64>) -> f64 {
        lambda.dot(&(&self.gram * lambda)) - 2.0 * self.b.dot(lambda) + self.c
    }

    fn gradient(&self, lambda: &DVector<f64>) -> DVector<f64> {
        (&self.gram * lambda - &self.b) * 2.0
    }

    fn change(&self, x: &DVector<f64>, z: &DVector<f64>) -> f64 {
        let d = z - x;
        d.dot(&(&self.gram * &d)) + d.dot(&self.gradient(x))
    }

    fn bregman(&self, y: &DVector<f64>, z: &DVector<f64>, _gy: &DVector<f64>) -> f64 {
        let step = z - y;
        step.dot(&(&self.gram * &step))
    }
}

struct LogisticRisk<'a> {
    design: Design<'a>,
}

impl SmoothRisk for LogisticRisk<'_> {
    fn value(&self, lambda: &DVector<f64>) -> f64 {
        let u = self.design.x * lambda;
        u.iter()
            .zip(self.design.y.iter())
            .zip(self.design.w.iter())
            .map(|((u, y), w)| w * LossKind::Logistic.value(*y, *u))
            .sum()
    }

    fn change(&self, x: &DVector<f64>, z: &DVector<f64>) -> f64 {
        let ux = self.design.x * x;
        let uz = self.design.x * z;
        (0..ux.len())
            .map(|i| {
                let y = self.design.y[i];
                self.design.w[i] * softplus_change(-y * ux[i], -y * uz[i])
            })
            .sum()
    }

    fn gradient(&self, lambda: &DVector<f64>) -> DVector<f64> {
        let u = self.design.x * lambda;
        let r = DVector::from_fn(u.len(), |i, _| {
            self.design.w[i] * LossKind::Logistic.derivative(self.design.y[i], u[i])
        });
        self.design.x.transpose() * r
    }
}

fn smooth_risk<'a>(kind: LossKind, design: Design<'a>) -> Box<dyn SmoothRisk + Send + Sync + 'a> {
    match kind {
        LossKind::Quadratic => Box::new(QuadraticRisk::new(&design)),
        LossKind::Logistic => Box::new(LogisticRisk { design }),
    }
}

#[derive(Debug, Clone, Copy)]
enum ProxKind {
    None,
    L1,
    Lp(f64),
}

/// Proximal map of `ε·pen` restricted to the active coordinates (inactive
/// ones are pinned to zero).
struct Prox<'a> {
    kind: ProxKind,
    epsilon: f64,
    active: Option<&'a [bool]>,
}

impl Prox<'_> {
    fn apply(&self, v: &DVector<f64>, step: f64) -> DVector<f64> {
        let tau = step * self.epsilon;
        DVector::from_fn(v.len(), |j, _| {
            if self.active.is_some_and(|a| !a[j]) {
                return 0.0;
            }
            match self.kind {
                ProxKind::None => v[j],
                ProxKind::L1 => v[j].signum() * (v[j].abs() - tau).max(0.0),
                ProxKind::Lp(p) => lp_prox(v[j], tau, p),
            }
        })
    }

    fn change(&self, x: &DVector<f64>, z: &DVector<f64>) -> f64 {
        let per = |a: f64, b: f64| match self.kind {
            ProxKind::None => 0.0,
            ProxKind::L1 => b.abs() - a.abs(),
            ProxKind::Lp(p) => b.abs().powf(p) - a.abs().powf(p),
        };
        self.epsilon * x.iter().zip(z.iter()).map(|(&a, &b)| per(a, b)).sum::<f64>()
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        let pen: f64 = match self.kind {
            ProxKind::None => 0.0,
            ProxKind::L1 => x.iter().map(|v| v.abs()).sum(),
            ProxKind::Lp(p) => x.iter().map(|v| v.abs().powf(p)).sum(),
        };
        self.epsilon * pen
    }
}

/// `argmin_x (x − v)²/2 + τ|x|^p` for `p > 1`.
///
/// The magnitude `s ∈ [0, |v|]` solves `s + τ p s^{p−1} = |v|`. The left side
/// is increasing and concave, so Newton from below climbs monotonically;
/// iterates leaving the bracket fall back to bisection.
pub(crate) fn lp_prox(v: f64, tau: f64, p: f64) -> f64 {
    let target = v.abs();
    if target == 0.0 || tau == 0.0 {
        return v;
    }
    let h = |s: f64| s + tau * p * s.powf(p - 1.0) - target;
    let (mut lo, mut hi) = (0.0f64, target);
    let mut s = 0.5 * target;
    for _ in 0..200 {
        let hs = h(s);
        if hs == 0.0 {
            break;
        }
        if hs < 0.0 {
            lo = s;
        } else {
            hi = s;
        }
        let slope = 1.0 + tau * p * (p - 1.0) * s.powf(p - 2.0);
        let mut next = s - hs / slope;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - s).abs() <= 1e-12 * target || hi - lo <= 1e-15 * target {
            s = next;
            break;
        }
        s = next;
    }
    v.signum() * s
}

/// Monotone FISTA with backtracking and restart. The accepted iterate never
/// increases the objective.
fn minimize(risk: &dyn SmoothRisk, prox: &Prox<'_>, x0: DVector<f64>, config: &SolverConfig) -> Result<Solution> {
    let objective = |x: &DVector<f64>| risk.value(x) + prox.value(x);
    let residual_at = |x: &DVector<f64>, step: f64| {
        let g = risk.gradient(x);
        let moved = prox.apply(&(x - &g * step), step);
        (x - moved).amax() / step
    };

    let mut x = prox.apply(&x0, 0.0);
    let mut fx = objective(&x);
    let mut y = x.clone();
    let mut theta = 1.0f64;
    let mut step = 1.0f64;
    let mut trace = Vec::new();
    if config.record_trace {
        trace.push(fx);
    }
    if !fx.is_finite() {
        return Err(Error::NonFinite("objective at the starting point".into()));
    }

    let mut residual = residual_at(&x, step);
    let mut iterations = 0;
    while residual > config.tol && iterations < config.max_iters {
        iterations += 1;
        let gy = risk.gradient(&y);
        let z = loop {
            let z = prox.apply(&(&y - &gy * step), step);
            let dist2 = (&z - &y).norm_squared();
            if risk.bregman(&y, &z, &gy) <= dist2 / (2.0 * step) || dist2 == 0.0 {
                break z;
            }
            step *= 0.5;
            if step < 1e-300 {
                return Err(Error::NonFinite("backtracking step underflow".into()));
            }
        };
        // Accept only on descent, measured as a difference so that progress
        // below the resolution of the objective itself is still seen.
        let gain = risk.change(&x, &z) + prox.change(&x, &z);
        let prev = x.clone();
        let improved = gain <= 0.0;
        if improved {
            x = z.clone();
            fx += gain;
        }
        let next_theta = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
        // Restart momentum when the prox step fails to descend or points
        // against the previous displacement.
        let against = (&y - &z).dot(&(&z - &prev)) > 0.0;
        if !improved || against {
            theta = 1.0;
            y = x.clone();
        } else {
            y = &x + (&z - &x) * (theta / next_theta) + (&x - &prev) * ((theta - 1.0) / next_theta);
            theta = next_theta;
        }
        if config.record_trace {
            trace.push(fx);
        }
        residual = residual_at(&x, step);
    }

    if residual > config.tol {
        return Err(Error::NotConverged {
            iterations,
            residual,
            lambda: x.iter().copied().collect(),
        });
    }
    Ok(Solution {
        lambda: x.iter().copied().collect(),
        objective: objective(&x),
        residual,
        iterations,
        trace,
    })
}

fn start_point(config: &SolverConfig, atoms: usize) -> Result<DVector<f64>> {
    match &config.init {
        Some(v) if v.len() != atoms => Err(Error::DimensionMismatch(format!(
            "initial point has {} entries, dictionary has {atoms} atoms",
            v.len()
        ))),
        Some(v) => Ok(DVector::from_column_slice(v)),
        None => Ok(DVector::zeros(atoms)),
    }
}

fn solve(design: Design<'_>, kind: LossKind, penalty: &PenaltySpec, config: &SolverConfig) -> Result<Solution> {
    let atoms = design.x.ncols();
    let risk = smooth_risk(kind, design);
    match penalty.kind {
        PenaltyKind::L1 | PenaltyKind::Lp { .. } => {
            let prox = Prox {
                kind: match penalty.kind {
                    PenaltyKind::L1 => ProxKind::L1,
                    PenaltyKind::Lp { p } => ProxKind::Lp(p),
                    PenaltyKind::L0 => unreachable!(),
                },
                epsilon: penalty.epsilon,
                active: None,
            };
            minimize(risk.as_ref(), &prox, start_point(config, atoms)?, config)
        }
        PenaltyKind::L0 => solve_l0(risk.as_ref(), atoms, penalty.epsilon, config),
    }
}

/// Exact ℓ0 solution: every support, each fitted without penalty.
fn solve_l0(risk: &(dyn SmoothRisk + Send + Sync), atoms: usize, epsilon: f64, config: &SolverConfig) -> Result<Solution> {
    if atoms > MAX_L0_ATOMS {
        return Err(invalid(
            "penalty",
            format!("ℓ0 enumeration supports at most {MAX_L0_ATOMS} atoms, got {atoms}"),
        ));
    }
    let fits: Vec<Result<(u32, Solution)>> = (0u32..(1 << atoms))
        .into_par_iter()
        .map(|mask| {
            let active: Vec<bool> = (0..atoms).map(|j| mask >> j & 1 == 1).collect();
            let prox = Prox {
                kind: ProxKind::None,
                epsilon: 0.0,
                active: Some(&active),
            };
            let mut sol = minimize(risk, &prox, DVector::zeros(atoms), config)?;
            sol.objective += epsilon * mask.count_ones() as f64;
            Ok((mask, sol))
        })
        .collect();
    let mut best: Option<(u32, Solution)> = None;
    for fit in fits {
        let (mask, sol) = fit?;
        if best.as_ref().map_or(true, |(_, b)| sol.objective < b.objective) {
            best = Some((mask, sol));
        }
    }
    let (_, sol) = best.expect("at least the empty support");
    Ok(sol)
}

/// Solves the empirical problem on the sample table.
pub fn penalized_erm(dict: &Dictionary, loss: &LossSpec, penalty: &PenaltySpec, config: &SolverConfig) -> Result<Solution> {
    let n = dict.sample.nrows();
    if loss.sample_labels.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} sample labels for {n} sample rows",
            loss.sample_labels.len()
        )));
    }
    let design = Design {
        x: &dict.sample,
        y: DVector::from_column_slice(&loss.sample_labels),
        w: DVector::from_element(n, 1.0 / n as f64),
    };
    solve(design, loss.kind, penalty, config)
}

/// Solves the population problem under `dist`.
pub fn population_erm(
    dict: &Dictionary,
    loss: &LossSpec,
    penalty: &PenaltySpec,
    dist: &FiniteSupportDistribution,
    config: &SolverConfig,
) -> Result<Solution> {
    let design = population_design(dict, loss, dist)?;
    solve(design, loss.kind, penalty, config)
}

fn population_design<'a>(dict: &'a Dictionary, loss: &LossSpec, dist: &FiniteSupportDistribution) -> Result<Design<'a>> {
    let m = dict.population.nrows();
    if dist.len() != m || loss.population_labels.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "population has {m} rows, distribution {} points, {} labels",
            dist.len(),
            loss.population_labels.len()
        )));
    }
    Ok(Design {
        x: &dict.population,
        y: DVector::from_column_slice(&loss.population_labels),
        w: DVector::from_column_slice(dist.probs()),
    })
}

/// `P ℓ(y, f_λ)`.
pub fn population_risk(dict: &Dictionary, loss: &LossSpec, dist: &FiniteSupportDistribution, lambda: &[f64]) -> Result<f64> {
    let design = population_design(dict, loss, dist)?;
    if lambda.len() != dict.atoms() {
        return Err(Error::DimensionMismatch("coefficient length".into()));
    }
    let u = design.x * DVector::from_column_slice(lambda);
    Ok(u.iter()
        .zip(design.y.iter())
        .zip(design.w.iter())
        .map(|((u, y), w)| w * loss.kind.value(*y, *u))
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RecoveryMetrics {
    /// `P ℓ(f_λ̂) − P ℓ(f_λ⁰)`.
    pub excess: f64,
    /// `‖λ̂ − λ⁰‖_1`.
    pub l1_dist: f64,
    /// Support size of the population solution `λ^ε`.
    pub d_star: usize,
    /// Smallest singular value of the population design restricted to that
    /// support (weighted by `sqrt(probs)`).
    pub min_singular_value: f64,
    pub independent: bool,
    /// `d*/n`.
    pub excess_scale: f64,
    /// `sqrt(d*/n)`.
    pub l1_scale: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn recovery_metrics(
    dict: &Dictionary,
    loss: &LossSpec,
    dist: &FiniteSupportDistribution,
    lambda_hat: &[f64],
    lambda_zero: &[f64],
    lambda_eps: &[f64],
    n: usize,
) -> Result<RecoveryMetrics> {
    let excess = population_risk(dict, loss, dist, lambda_hat)? - population_risk(dict, loss, dist, lambda_zero)?;
    let l1_dist = lambda_hat.iter().zip(lambda_zero).map(|(a, b)| (a - b).abs()).sum();
    let j_star = support(lambda_eps);
    let min_singular_value = restricted_min_singular_value(dict, dist, &j_star);
    let d_star = j_star.len();
    let ratio = d_star as f64 / n as f64;
    Ok(RecoveryMetrics {
        excess,
        l1_dist,
        d_star,
        min_singular_value,
        independent: d_star == 0 || min_singular_value > INDEPENDENCE_THRESHOLD,
        excess_scale: ratio,
        l1_scale: ratio.sqrt(),
    })
}

fn restricted_min_singular_value(dict: &Dictionary, dist: &FiniteSupportDistribution, cols: &[usize]) -> f64 {
    if cols.is_empty() {
        return 0.0;
    }
    let x = &dict.population;
    let gram = DMatrix::from_fn(cols.len(), cols.len(), |a, b| {
        (0..x.nrows())
            .map(|k| dist.probs()[k] * x[(k, cols[a])] * x[(k, cols[b])])
            .sum::<f64>()
    });
    let eig = nalgebra::SymmetricEigen::new(gram);
    eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min).max(0.0).sqrt()
}

/// A synthetic problem: uniform population over `m` points, a random
/// dictionary, planted sparse coefficients and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseProblem {
    pub dist: FiniteSupportDistribution,
    pub atoms: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
    pub loss: LossKind,
    pub planted: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemParams {
    pub points: usize,
    pub atoms: usize,
    pub planted_support: usize,
    pub loss: LossKind,
    /// Half-width of the uniform label noise (quadratic) or label flip
    /// probability (logistic).
    pub noise: f64,
}

impl Default for ProblemParams {
    fn default() -> Self {
        Self {
            points: 200,
            atoms: 50,
            planted_support: 3,
            loss: LossKind::Quadratic,
            noise: 0.5,
        }
    }
}

impl ProblemParams {
    pub fn validate(&self) -> Result<()> {
        if !(50..=200).contains(&self.points) {
            return Err(invalid("points", format!("must lie in [50, 200], got {}", self.points)));
        }
        if self.atoms < 2 {
            return Err(invalid("atoms", "need at least 2 atoms"));
        }
        if self.atoms >= self.points {
            return Err(invalid("atoms", "need fewer atoms than support points"));
        }
        if !(1..=5).contains(&self.planted_support) || self.planted_support > self.atoms {
            return Err(invalid("planted_support", format!("must lie in [1, 5], got {}", self.planted_support)));
        }
        let noise_ok = match self.loss {
            LossKind::Quadratic => self.noise >= 0.0 && self.noise.is_finite(),
            LossKind::Logistic => (0.0..0.5).contains(&self.noise),
        };
        if !noise_ok {
            return Err(invalid("noise", format!("{} not valid for {:?} loss", self.noise, self.loss)));
        }
        Ok(())
    }
}

/// Generates a problem from stream 0 of `seed`.
///
/// Atoms are i.i.d. uniform on `[−1, 1]`; the planted vector has
/// `planted_support` nonzeros of magnitude uniform on `[0.5, 1]` with random
/// signs. Quadratic labels are `f_planted + ξ` with `ξ` uniform noise
/// projected onto the population-orthogonal complement of the atoms, so the
/// unpenalized population minimizer is exactly the planted vector. Logistic
/// labels are `sign(f_planted)` flipped with probability `noise`.
pub fn generate_problem(params: &ProblemParams, seed: u64) -> Result<SparseProblem> {
    params.validate()?;
    let mut r = rng::stream(seed, 0);
    let (m, big_n) = (params.points, params.atoms);
    let atoms: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..big_n).map(|_| r.gen_range(-1.0..=1.0)).collect())
        .collect();
    let mut planted = vec![0.0; big_n];
    for j in rand::seq::index::sample(&mut r, big_n, params.planted_support) {
        let sign = if r.gen::<bool>() { 1.0 } else { -1.0 };
        planted[j] = sign * r.gen_range(0.5..=1.0);
    }
    let x = DMatrix::from_fn(m, big_n, |i, j| atoms[i][j]);
    let signal = &x * DVector::from_column_slice(&planted);
    let labels: Vec<f64> = match params.loss {
        LossKind::Quadratic => {
            let noise = DVector::from_fn(m, |_, _| params.noise * r.gen_range(-1.0..=1.0));
            let xt = x.transpose();
            let coef = (&xt * &x)
                .lu()
                .solve(&(&xt * &noise))
                .ok_or_else(|| Error::NonFinite("singular population design".into()))?;
            let residual = noise - &x * coef;
            (signal + residual).iter().copied().collect()
        }
        LossKind::Logistic => signal
            .iter()
            .map(|&s| {
                let y = if s >= 0.0 { 1.0 } else { -1.0 };
                if r.gen::<f64>() < params.noise {
                    -y
                } else {
                    y
                }
            })
            .collect(),
    };
    Ok(SparseProblem {
        dist: FiniteSupportDistribution::uniform(m)?,
        atoms,
        labels,
        loss: params.loss,
        planted,
    })
}

impl SparseProblem {
    pub fn num_atoms(&self) -> usize {
        self.atoms.first().map_or(0, Vec::len)
    }

    /// Dictionary and loss for a sample drawn from the population.
    pub fn restrict_to(&self, sample: &Sample) -> Result<(Dictionary, LossSpec)> {
        Ok((
            Dictionary::from_population(&self.atoms, sample)?,
            LossSpec::from_population(self.loss, self.labels.clone(), sample)?,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EpsilonRule {
    /// `ε = scale · sqrt((d + A ln N)/n)`.
    Base { scale: f64 },
    /// `ε = scale · ln N · sqrt((d + A ln N)/n)`.
    LogScaled { scale: f64 },
}

impl EpsilonRule {
    pub fn epsilon(&self, d: usize, a: f64, atoms: usize, n: usize) -> f64 {
        let base = sparsity_rate(d, a, atoms, n);
        match *self {
            EpsilonRule::Base { scale } => scale * base,
            EpsilonRule::LogScaled { scale } => scale * (atoms as f64).ln() * base,
        }
    }

    fn scale(&self) -> f64 {
        match *self {
            EpsilonRule::Base { scale } | EpsilonRule::LogScaled { scale } => scale,
        }
    }
}

/// `sqrt((d + A ln N)/n)`.
pub fn sparsity_rate(d: usize, a: f64, atoms: usize, n: usize) -> f64 {
    ((d as f64 + a * (atoms as f64).ln()) / n as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditPenalty {
    L1,
    /// ℓp with `p = 1 + 1/ln N`.
    Lp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditParams {
    pub d: usize,
    pub a: f64,
    pub epsilon_rule: EpsilonRule,
    pub penalty: AuditPenalty,
    pub sample_sizes: Vec<usize>,
    pub reps: u32,
    /// Solver for the sample problems.
    pub solver: SolverConfig,
    /// Solver for `λ⁰` and `λ^ε`; a failure here aborts the audit.
    pub population_solver: SolverConfig,
}

impl Default for AuditParams {
    fn default() -> Self {
        Self {
            d: 3,
            a: 1.0,
            epsilon_rule: EpsilonRule::Base { scale: 0.15 },
            penalty: AuditPenalty::L1,
            sample_sizes: vec![200, 800, 3200],
            reps: 50,
            solver: SolverConfig::default(),
            population_solver: SolverConfig::default(),
        }
    }
}

impl AuditParams {
    pub fn validate(&self, atoms: usize) -> Result<()> {
        if self.d > atoms {
            return Err(invalid("d", format!("{} exceeds the {atoms} atoms", self.d)));
        }
        if !(self.a.is_finite() && self.a >= 1.0) {
            return Err(invalid("a", format!("must be at least 1, got {}", self.a)));
        }
        let scale = self.epsilon_rule.scale();
        if !(scale.is_finite() && scale > 0.0) {
            return Err(invalid("epsilon_rule", format!("scale must be positive, got {scale}")));
        }
        if self.sample_sizes.is_empty() || self.sample_sizes.contains(&0) {
            return Err(invalid("sample_sizes", "need at least one positive sample size"));
        }
        if self.reps == 0 {
            return Err(invalid("reps", "need at least one replication"));
        }
        Ok(())
    }

    fn penalty_kind(&self, atoms: usize) -> Result<PenaltyKind> {
        Ok(match self.penalty {
            AuditPenalty::L1 => PenaltyKind::L1,
            AuditPenalty::Lp => PenaltyKind::Lp { p: p_default(atoms)? },
        })
    }
}

/// One `(n, rep)` row of a sparsity audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SparsityReport {
    pub n: usize,
    pub rep: u32,
    pub d: usize,
    pub a: f64,
    pub epsilon_used: f64,
    /// `γ_d(λ^ε)`.
    pub gamma_true: f64,
    pub gamma_true_zero: bool,
    /// `γ_d(λ̂^ε)`; NaN when the solver failed.
    pub gamma_hat: f64,
    /// `sqrt((d + A ln N)/n)`.
    pub bound: f64,
    pub ratio: f64,
    pub excess: f64,
    pub l1_dist: f64,
    pub d_star: usize,
    pub converged: bool,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SampleSizeSummary {
    pub n: usize,
    pub epsilon_used: f64,
    pub gamma_true: f64,
    pub bound: f64,
    pub median_gamma_hat: f64,
    /// `1 − N^{−A}`.
    pub quantile_level: f64,
    /// Empirical quantile of `γ_d(λ̂^ε)/bound` at `quantile_level`.
    pub ratio_quantile: f64,
    pub median_excess: f64,
    pub median_l1_dist: f64,
    pub failures: usize,
}

/// Smallest constants making both two-sided relations hold on every row
/// with `C̃ = 1`: `γ̂ ≤ γ + K̃_up·bound` and `γ ≤ γ̂ + K̃_down·bound`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TwoSidedFit {
    pub c: f64,
    pub k_up: f64,
    pub k_down: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SparsityAudit {
    pub atoms: usize,
    pub penalty: PenaltyKind,
    pub rows: Vec<SparsityReport>,
    pub summaries: Vec<SampleSizeSummary>,
    pub fit: TwoSidedFit,
    /// Least-squares slope of ln(median γ̂) on ln n, over sizes with a
    /// positive median; absent with fewer than two such sizes.
    pub slope: Option<f64>,
}

impl SparsityAudit {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.converged).count()
    }
}

/// Population solution at `ε` paired with `λ⁰`.
struct PopulationSide {
    epsilon: f64,
    lambda_eps: Vec<f64>,
    gamma_true: f64,
}

/// Sparsity audit over `sample_sizes × reps`.
///
/// Sample size index `i`, replication `r` draws its sample with
/// `draw_sample(dist, n, seed')` where `seed'` is the first output of stream
/// `(i << 32) | r` of `seed`. Rows come back sorted by `(n index, rep)`.
pub fn sparsity_audit(problem: &SparseProblem, params: &AuditParams, seed: u64) -> Result<SparsityAudit> {
    let atoms = problem.num_atoms();
    params.validate(atoms)?;
    let kind = params.penalty_kind(atoms)?;
    let full = Sample::from_draws((0..problem.dist.len()).collect(), problem.dist.len(), 0)?;
    let (pop_dict, pop_loss) = problem.restrict_to(&full)?;

    let zero = PenaltySpec::new(kind, 0.0)?;
    let lambda_zero = population_erm(&pop_dict, &pop_loss, &zero, &problem.dist, &params.population_solver)?.lambda;

    let pops: Vec<PopulationSide> = params
        .sample_sizes
        .iter()
        .map(|&n| {
            let epsilon = params.epsilon_rule.epsilon(params.d, params.a, atoms, n);
            let spec = PenaltySpec::new(kind, epsilon)?;
            let lambda_eps = population_erm(&pop_dict, &pop_loss, &spec, &problem.dist, &params.population_solver)?.lambda;
            let gamma_true = gamma_d(&lambda_eps, params.d)?;
            Ok(PopulationSide {
                epsilon,
                lambda_eps,
                gamma_true,
            })
        })
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, u32)> = (0..params.sample_sizes.len())
        .flat_map(|i| (0..params.reps).map(move |r| (i, r)))
        .collect();
    let rows: Vec<SparsityReport> = jobs
        .par_iter()
        .map(|&(i, rep)| {
            let n = params.sample_sizes[i];
            let pop = &pops[i];
            let sample_seed = rand::RngCore::next_u64(&mut rng::stream2(seed, i as u32, rep));
            let sample = core_model::draw_sample(&problem.dist, n, sample_seed)?;
            let (dict, loss) = problem.restrict_to(&sample)?;
            let spec = PenaltySpec::new(kind, pop.epsilon)?;
            let bound = sparsity_rate(params.d, params.a, atoms, n);
            let d_star = support(&pop.lambda_eps).len();
            let base = SparsityReport {
                n,
                rep,
                d: params.d,
                a: params.a,
                epsilon_used: pop.epsilon,
                gamma_true: pop.gamma_true,
                gamma_true_zero: pop.gamma_true == 0.0,
                gamma_hat: f64::NAN,
                bound,
                ratio: f64::NAN,
                excess: f64::NAN,
                l1_dist: f64::NAN,
                d_star,
                converged: false,
                residual: f64::NAN,
            };
            match penalized_erm(&dict, &loss, &spec, &params.solver) {
                Ok(sol) => {
                    let gamma_hat = gamma_d(&sol.lambda, params.d)?;
                    let m = recovery_metrics(&pop_dict, &pop_loss, &problem.dist, &sol.lambda, &lambda_zero, &pop.lambda_eps, n)?;
                    Ok(SparsityReport {
                        gamma_hat,
                        ratio: gamma_hat / bound,
                        excess: m.excess,
                        l1_dist: m.l1_dist,
                        converged: true,
                        residual: sol.residual,
                        ..base
                    })
                }
                Err(Error::NotConverged { residual, .. }) => Ok(SparsityReport { residual, ..base }),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;

    let level = 1.0 - (atoms as f64).powf(-params.a);
    let summaries: Vec<SampleSizeSummary> = params
        .sample_sizes
        .iter()
        .zip(&pops)
        .map(|(&n, pop)| {
            let ok: Vec<&SparsityReport> = rows.iter().filter(|r| r.n == n && r.converged).collect();
            let col = |f: fn(&SparsityReport) -> f64| ok.iter().map(|r| f(r)).collect::<Vec<f64>>();
            SampleSizeSummary {
                n,
                epsilon_used: pop.epsilon,
                gamma_true: pop.gamma_true,
                bound: sparsity_rate(params.d, params.a, atoms, n),
                median_gamma_hat: quantile(col(|r| r.gamma_hat), 0.5),
                quantile_level: level,
                ratio_quantile: quantile(col(|r| r.ratio), level),
                median_excess: quantile(col(|r| r.excess), 0.5),
                median_l1_dist: quantile(col(|r| r.l1_dist), 0.5),
                failures: rows.iter().filter(|r| r.n == n && !r.converged).count(),
            }
        })
        .collect();

    let converged = rows.iter().filter(|r| r.converged);
    let fit = TwoSidedFit {
        c: 1.0,
        k_up: converged
            .clone()
            .map(|r| ((r.gamma_hat - r.gamma_true) / r.bound).max(0.0))
            .fold(0.0, f64::max),
        k_down: converged
            .map(|r| ((r.gamma_true - r.gamma_hat) / r.bound).max(0.0))
            .fold(0.0, f64::max),
    };

    let points: Vec<(f64, f64)> = summaries
        .iter()
        .filter(|s| s.median_gamma_hat > 0.0)
        .map(|s| ((s.n as f64).ln(), s.median_gamma_hat.ln()))
        .collect();

    Ok(SparsityAudit {
        atoms,
        penalty: kind,
        rows,
        summaries,
        fit,
        slope: log_log_slope(&points),
    })
}

/// Ordinary least-squares slope; `None` for fewer than two distinct x values.
pub fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let k = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / k;
    let my = points.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Some(sxy / sxx)
}

/// Order-statistic quantile (type 1: smallest value with empirical CDF ≥ q).
/// NaN for no data.
pub fn quantile(mut values: Vec<f64>, q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let idx = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len()) - 1;
    values[idx]
}

/// CSV with one row per `(n, rep)`.
pub fn write_sparsity_csv<W: Write>(rows: &[SparsityReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "n",
        "rep",
        "d",
        "A",
        "epsilon",
        "gammaTrue",
        "gammaTrueZero",
        "gammaHat",
        "bound",
        "ratio",
        "excess",
        "l1Dist",
        "dStar",
        "converged",
        "residual",
    ])?;
    for r in rows {
        w.write_record([
            r.n.to_string(),
            r.rep.to_string(),
            r.d.to_string(),
            r.a.to_string(),
            r.epsilon_used.to_string(),
            r.gamma_true.to_string(),
            r.gamma_true_zero.to_string(),
            r.gamma_hat.to_string(),
            r.bound.to_string(),
            r.ratio.to_string(),
            r.excess.to_string(),
            r.l1_dist.to_string(),
            r.d_star.to_string(),
            r.converged.to_string(),
            r.residual.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
