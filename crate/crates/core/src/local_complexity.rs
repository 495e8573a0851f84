//! Localized Rademacher complexities and the fixed-point excess-risk bound.
//!
//! For a sample `X_1..X_n` and a level δ, the localized Rademacher average is
//!
//! ```text
//! φ̂_n(δ) = E_σ max_{f,g ∈ F̂(δ)} | n⁻¹ Σ_i σ_i (f(X_i) − g(X_i)) |
//! ```
//!
//! where `F̂(δ)` is the δ-minimal set (empirical by default). It is combined
//! with the empirical L2 diameter `D̂(δ)` into the three-term bound
//!
//! ```text
//! Ū(δ) = K1·φ̂(δ) + K2·D̂(δ)·sqrt(t/n) + K3·t/n
//! ```
//!
//! and the excess-risk bound is its fixed point
//! `δ_n = inf{δ ∈ (0, δ_max] : Ū(δ) ≤ δ}`.

use std::io::Write;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::core_model::{self, EvaluatedClass, Measure, Sample};
use crate::error::{invalid, Error, Result};
use crate::rng;

/// Largest sample size for which sign vectors may be enumerated exhaustively.
pub const MAX_EXHAUSTIVE_N: usize = 20;

/// Geometric grid used to locate the first crossing before bisection.
const SCAN_POINTS: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComplexityConfig {
    pub t: f64,
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub rademacher_draws: usize,
    pub fixed_point_tol: f64,
    pub delta_max: f64,
    /// Average over all `2ⁿ` sign vectors instead of sampling them. Only
    /// honoured when `n ≤ MAX_EXHAUSTIVE_N`.
    pub exhaustive: bool,
}

impl Default for ComplexityConfig {
    fn default() -> Self {
        Self {
            t: 1.0,
            k1: 2.0,
            k2: 1.0,
            k3: 1.0,
            rademacher_draws: 1000,
            fixed_point_tol: 1e-9,
            delta_max: 1.0,
            exhaustive: false,
        }
    }
}

impl ComplexityConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(invalid(name, format!("must be positive and finite, got {v}")))
            }
        };
        positive("t", self.t)?;
        positive("k1", self.k1)?;
        positive("k2", self.k2)?;
        positive("k3", self.k3)?;
        positive("fixed_point_tol", self.fixed_point_tol)?;
        positive("delta_max", self.delta_max)?;
        if self.rademacher_draws == 0 {
            return Err(invalid("rademacher_draws", "must be at least 1"));
        }
        if self.fixed_point_tol >= self.delta_max {
            return Err(invalid("fixed_point_tol", "must be smaller than delta_max"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RademacherEstimate {
    pub value: f64,
    /// Monte Carlo standard error; zero in exhaustive mode.
    pub stderr: f64,
    pub exhaustive: bool,
}

/// Sign vectors shared by every δ level of one call (common random numbers),
/// which keeps φ̂ monotone in δ.
enum SignSource {
    Exhaustive { n: usize },
    Sampled { n: usize, words: Vec<Vec<u64>> },
}

impl SignSource {
    fn new(n: usize, config: &ComplexityConfig, seed: u64) -> Self {
        if config.exhaustive && n <= MAX_EXHAUSTIVE_N {
            return SignSource::Exhaustive { n };
        }
        let per_draw = n.div_ceil(64);
        let mut rng = rng::stream(seed, 0);
        let words = (0..config.rademacher_draws)
            .map(|_| (0..per_draw).map(|_| rng.next_u64()).collect())
            .collect();
        SignSource::Sampled { n, words }
    }

    fn is_exhaustive(&self) -> bool {
        matches!(self, SignSource::Exhaustive { .. })
    }

    /// Calls `visit` with every sign vector (bit `i` set ⇒ σ_i = +1). In
    /// exhaustive mode σ_0 is pinned to +1: negating σ leaves the pair
    /// supremum unchanged, so half the cube gives the same average.
    fn for_each(&self, mut visit: impl FnMut(&[u64])) {
        match self {
            SignSource::Exhaustive { n } => {
                let free = n.saturating_sub(1);
                for mask in 0u64..(1u64 << free) {
                    visit(&[(mask << 1) | 1]);
                }
            }
            SignSource::Sampled { words, .. } => {
                for w in words {
                    visit(w);
                }
            }
        }
    }

    fn n(&self) -> usize {
        match self {
            SignSource::Exhaustive { n } | SignSource::Sampled { n, .. } => *n,
        }
    }
}

fn sign(words: &[u64], i: usize) -> f64 {
    if (words[i / 64] >> (i % 64)) & 1 == 1 {
        1.0
    } else {
        -1.0
    }
}

/// Per-level suprema for nested member sets. `order` lists function indices by
/// increasing excess risk and `level_sizes[l]` is the size of level `l`.
fn nested_suprema(
    sample_rows: &[Vec<f64>],
    order: &[usize],
    level_sizes: &[usize],
    signs: &SignSource,
) -> Vec<RademacherEstimate> {
    let n = signs.n();
    let mut sums = vec![0.0; level_sizes.len()];
    let mut squares = vec![0.0; level_sizes.len()];
    let mut count = 0usize;
    let mut process = vec![0.0; order.len()];
    signs.for_each(|words| {
        process.iter_mut().for_each(|p| *p = 0.0);
        for (i, row) in sample_rows.iter().enumerate() {
            let s = sign(words, i);
            for (p, &j) in process.iter_mut().zip(order) {
                *p += s * row[j];
            }
        }
        let mut hi = f64::NEG_INFINITY;
        let mut lo = f64::INFINITY;
        let mut seen = 0;
        for (l, &size) in level_sizes.iter().enumerate() {
            while seen < size {
                hi = hi.max(process[seen]);
                lo = lo.min(process[seen]);
                seen += 1;
            }
            let v = (hi - lo) / n as f64;
            sums[l] += v;
            squares[l] += v * v;
        }
        count += 1;
    });
    let c = count as f64;
    sums.iter()
        .zip(&squares)
        .map(|(&s, &q)| {
            let mean = s / c;
            let stderr = if signs.is_exhaustive() || count < 2 {
                0.0
            } else {
                ((q - c * mean * mean).max(0.0) / (c - 1.0) / c).sqrt()
            };
            RademacherEstimate {
                value: mean,
                stderr,
                exhaustive: signs.is_exhaustive(),
            }
        })
        .collect()
}

/// Localized Rademacher average with the δ-minimal set taken under the
/// empirical measure.
pub fn local_rademacher(
    class: &EvaluatedClass,
    sample: &Sample,
    delta: f64,
    config: &ComplexityConfig,
    seed: u64,
) -> Result<f64> {
    Ok(local_rademacher_estimate(class, sample, Measure::Empirical(sample), delta, config, seed)?.value)
}

/// Localized Rademacher average with an explicit localizing measure (the
/// distribution gives the distribution-dependent variant used in audits).
pub fn local_rademacher_estimate(
    class: &EvaluatedClass,
    sample: &Sample,
    localizer: Measure<'_>,
    delta: f64,
    config: &ComplexityConfig,
    seed: u64,
) -> Result<RademacherEstimate> {
    config.validate()?;
    check_sample(class, sample)?;
    let members = core_model::delta_minimal_set(localizer, class, delta)?;
    let signs = SignSource::new(sample.len(), config, seed);
    Ok(nested_suprema(class.sample_values(), &members, &[members.len()], &signs)[0])
}

fn check_sample(class: &EvaluatedClass, sample: &Sample) -> Result<()> {
    if class.sample_values().len() != sample.len() {
        return Err(Error::DimensionMismatch(format!(
            "class has {} sample rows, sample has {} draws",
            class.sample_values().len(),
            sample.len()
        )));
    }
    Ok(())
}

/// `K1·φ + K2·D·sqrt(t/n) + K3·t/n`.
pub fn u_bar(phi: f64, diam: f64, n: usize, config: &ComplexityConfig) -> f64 {
    let ratio = config.t / n as f64;
    config.k1 * phi + config.k2 * diam * ratio.sqrt() + config.k3 * ratio
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub delta: f64,
    /// False when `Ū(δ_max) > δ_max`; `delta` is then `δ_max`.
    pub crossed: bool,
}

/// Smallest `δ ∈ (0, δ_max]` with `Ū(δ) ≤ δ`.
///
/// The first crossing is bracketed on a geometric grid between
/// `fixed_point_tol` and `delta_max`, then refined by bisection until the
/// bracket is narrower than `fixed_point_tol`. The returned δ always satisfies
/// `Ū(δ) ≤ δ` when `crossed` is set.
pub fn sharp_transform(curve: impl Fn(f64) -> f64, config: &ComplexityConfig) -> Result<FixedPoint> {
    config.validate()?;
    let eval = |d: f64| {
        let u = curve(d);
        if u.is_finite() {
            Ok(u)
        } else {
            Err(Error::NonFinite(format!("complexity curve is {u} at δ = {d}")))
        }
    };
    let lo0 = config.fixed_point_tol;
    let hi0 = config.delta_max;
    let ratio = (hi0 / lo0).powf(1.0 / (SCAN_POINTS - 1) as f64);
    let mut prev: Option<f64> = None;
    for g in 0..SCAN_POINTS {
        let d = if g == SCAN_POINTS - 1 { hi0 } else { lo0 * ratio.powi(g as i32) };
        if eval(d)? <= d {
            let Some(mut lo) = prev else {
                return Ok(FixedPoint { delta: d, crossed: true });
            };
            let mut hi = d;
            while hi - lo > config.fixed_point_tol {
                let mid = 0.5 * (lo + hi);
                if eval(mid)? <= mid {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Ok(FixedPoint { delta: hi, crossed: true });
        }
        prev = Some(d);
    }
    Ok(FixedPoint {
        delta: hi0,
        crossed: false,
    })
}

/// φ̂, D̂ and Ū tabulated at the δ levels where the δ-minimal set changes.
/// Between consecutive levels all three are constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalComplexityCurve {
    pub deltas: Vec<f64>,
    pub phi_hat: Vec<f64>,
    pub d_hat: Vec<f64>,
    pub u_bar: Vec<f64>,
}

impl LocalComplexityCurve {
    /// Step-function value of Ū at `delta` (the last level not above it).
    pub fn evaluate(&self, delta: f64) -> f64 {
        let idx = self.deltas.partition_point(|&d| d <= delta);
        self.u_bar[idx.saturating_sub(1)]
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }

    /// CSV with header `delta,phiHat,dHat,uBar`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["delta", "phiHat", "dHat", "uBar"])?;
        for i in 0..self.len() {
            w.write_record([
                self.deltas[i].to_string(),
                self.phi_hat[i].to_string(),
                self.d_hat[i].to_string(),
                self.u_bar[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Tabulates the empirical complexity curve at the breakpoints of the
/// empirical excess risks.
pub fn complexity_curve(
    class: &EvaluatedClass,
    sample: &Sample,
    config: &ComplexityConfig,
    seed: u64,
) -> Result<LocalComplexityCurve> {
    complexity_curve_with(class, sample, Measure::Empirical(sample), config, seed)
}

pub fn complexity_curve_with(
    class: &EvaluatedClass,
    sample: &Sample,
    localizer: Measure<'_>,
    config: &ComplexityConfig,
    seed: u64,
) -> Result<LocalComplexityCurve> {
    config.validate()?;
    check_sample(class, sample)?;
    let excess = core_model::excess_risks(localizer, class)?;
    let mut order: Vec<usize> = (0..excess.len()).collect();
    order.sort_by(|&a, &b| excess[a].total_cmp(&excess[b]).then(a.cmp(&b)));

    let mut deltas = Vec::new();
    let mut sizes = Vec::new();
    for (pos, &j) in order.iter().enumerate() {
        let e = excess[j];
        let last_of_level = order.get(pos + 1).map_or(true, |&next| excess[next] != e);
        if last_of_level {
            deltas.push(e);
            sizes.push(pos + 1);
        }
    }

    let signs = SignSource::new(sample.len(), config, seed);
    let phi_hat: Vec<f64> = nested_suprema(class.sample_values(), &order, &sizes, &signs)
        .into_iter()
        .map(|e| e.value)
        .collect();

    let weights = core_model::sample_weights(sample.len());
    let d_hat: Vec<f64> = sizes
        .iter()
        .map(|&s| core_model::diameter_of(&weights, class.sample_values(), &order[..s]))
        .collect();

    let u_bar = phi_hat
        .iter()
        .zip(&d_hat)
        .map(|(&p, &d)| u_bar(p, d, sample.len(), config))
        .collect();

    Ok(LocalComplexityCurve {
        deltas,
        phi_hat,
        d_hat,
        u_bar,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcessRiskBound {
    pub fixed_point: FixedPoint,
    pub curve: LocalComplexityCurve,
}

/// Data-dependent excess-risk bound δ_n(t): the fixed point of the empirical
/// complexity curve.
pub fn excess_risk_bound(class: &EvaluatedClass, sample: &Sample, config: &ComplexityConfig, seed: u64) -> Result<f64> {
    Ok(excess_risk_bound_detailed(class, sample, config, seed)?.fixed_point.delta)
}

pub fn excess_risk_bound_detailed(
    class: &EvaluatedClass,
    sample: &Sample,
    config: &ComplexityConfig,
    seed: u64,
) -> Result<ExcessRiskBound> {
    let curve = complexity_curve(class, sample, config, seed)?;
    let fixed_point = sharp_transform(|d| curve.evaluate(d), config)?;
    Ok(ExcessRiskBound { fixed_point, curve })
}

/// Closed-form complexity rates for common model types.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PenaltyPreset {
    /// `sqrt(ln N / n)` for a class of `N` functions.
    Finite { functions: usize },
    /// `d / n` for a `d`-dimensional linear model.
    LinearDim { d: f64 },
    /// `V / n` for VC dimension `V`.
    Vc { v: f64 },
    /// `V / (n h)` for classification with margin parameter `h`.
    Margin { v: f64, h: f64 },
}

pub fn penalty_preset(kind: PenaltyPreset, n: usize, scale: f64) -> Result<f64> {
    if n == 0 {
        return Err(invalid("n", "sample size must be at least 1"));
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(invalid("scale", format!("must be positive, got {scale}")));
    }
    let pos = |name: &'static str, v: f64| {
        if v.is_finite() && v > 0.0 {
            Ok(v)
        } else {
            Err(invalid(name, format!("must be positive, got {v}")))
        }
    };
    let n = n as f64;
    let rate = match kind {
        PenaltyPreset::Finite { functions } => {
            if functions < 2 {
                return Err(invalid("functions", "need at least 2 functions"));
            }
            ((functions as f64).ln() / n).sqrt()
        }
        PenaltyPreset::LinearDim { d } => pos("d", d)? / n,
        PenaltyPreset::Vc { v } => pos("v", v)? / n,
        PenaltyPreset::Margin { v, h } => pos("v", v)? / (n * pos("h", h)?),
    };
    Ok(scale * rate)
}
