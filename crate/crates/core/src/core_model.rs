//! Exact and empirical risks over finite function classes.
//!
//! A class is stored as two evaluation tables: `population[k][j] = f_j(s_k)`
//! over the support points of a [`FiniteSupportDistribution`], and
//! `sample[i][j] = f_j(X_i)` over the draws of a [`Sample`]. All values lie in
//! `[0, 1]`.
//!
//! Threshold comparisons (`excess ≤ δ`) are exact; ties among minimizers are
//! broken toward the smallest index wherever a single index is returned.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng;

const PROB_SUM_TOL: f64 = 1e-12;

/// One support point. The index in the distribution is its identity; features
/// and label are optional payload used by dictionary-based problems.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SupportPoint {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub features: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteSupportDistribution {
    points: Vec<SupportPoint>,
    probs: Vec<f64>,
}

impl FiniteSupportDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let points = vec![SupportPoint::default(); probs.len()];
        Self::with_points(points, probs)
    }

    pub fn with_points(points: Vec<SupportPoint>, probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty support".into()));
        }
        if points.len() != probs.len() {
            return Err(Error::InvalidDistribution(format!(
                "{} points but {} probabilities",
                points.len(),
                probs.len()
            )));
        }
        if let Some(k) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "probability {k} is {} (must be finite and nonnegative)",
                probs[k]
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidDistribution(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(Self { points, probs })
    }

    pub fn uniform(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidDistribution("empty support".into()));
        }
        Self::new(vec![1.0 / m as f64; m])
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn points(&self) -> &[SupportPoint] {
        &self.points
    }
}

/// `n` draws (support indices) from a distribution together with the seed
/// that produced them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    draws: Vec<usize>,
    seed: u64,
}

impl Sample {
    pub fn from_draws(draws: Vec<usize>, support_size: usize, seed: u64) -> Result<Self> {
        if draws.is_empty() {
            return Err(Error::InvalidSample("a sample needs at least one draw".into()));
        }
        if let Some(&bad) = draws.iter().find(|&&k| k >= support_size) {
            return Err(Error::InvalidSample(format!(
                "draw {bad} outside support of size {support_size}"
            )));
        }
        Ok(Self { draws, seed })
    }

    /// Deterministic sample listing support point `k` exactly
    /// `multiplicities[k]` times. With multiplicities proportional to the
    /// probabilities, the empirical measure equals the distribution.
    pub fn enumerate_support(multiplicities: &[usize]) -> Result<Self> {
        let draws = multiplicities
            .iter()
            .enumerate()
            .flat_map(|(k, &c)| std::iter::repeat(k).take(c))
            .collect();
        Self::from_draws(draws, multiplicities.len(), 0)
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn draws(&self) -> &[usize] {
        &self.draws
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of times each support point was drawn.
    pub fn counts(&self, support_size: usize) -> Vec<usize> {
        let mut counts = vec![0; support_size];
        for &k in &self.draws {
            counts[k] += 1;
        }
        counts
    }
}

/// `n` i.i.d. categorical draws by inverse CDF on ChaCha8 uniforms (stream 0
/// of `seed`). Identical arguments give bit-identical samples.
pub fn draw_sample(dist: &FiniteSupportDistribution, n: usize, seed: u64) -> Result<Sample> {
    if n == 0 {
        return Err(invalid("n", "sample size must be at least 1"));
    }
    let mut rng = rng::stream(seed, 0);
    Ok(Sample {
        draws: draw_indices(dist, n, &mut rng),
        seed,
    })
}

pub(crate) fn draw_indices(dist: &FiniteSupportDistribution, n: usize, rng: &mut rng::Rng) -> Vec<usize> {
    let mut cdf = Vec::with_capacity(dist.len());
    let mut acc = 0.0;
    for &p in dist.probs() {
        acc += p;
        cdf.push(acc);
    }
    // Rounding can leave the last cumulative value just under 1.
    let last_positive = dist.probs().iter().rposition(|&p| p > 0.0).unwrap_or(0);
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen();
            cdf.iter()
                .position(|&c| u < c)
                .map_or(last_positive, |k| k.min(last_positive))
        })
        .collect()
}

/// A finite class `{f_0, …, f_{M-1}}` evaluated on the support and on the sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluatedClass {
    population: Vec<Vec<f64>>,
    sample: Vec<Vec<f64>>,
    functions: usize,
}

impl EvaluatedClass {
    pub fn new(population: Vec<Vec<f64>>, sample: Vec<Vec<f64>>) -> Result<Self> {
        let functions = population
            .first()
            .or(sample.first())
            .map_or(0, Vec::len);
        if functions == 0 {
            return Err(Error::InvalidClass("class has no functions".into()));
        }
        for (name, table) in [("population", &population), ("sample", &sample)] {
            for (r, row) in table.iter().enumerate() {
                if row.len() != functions {
                    return Err(Error::InvalidClass(format!(
                        "{name} row {r} has {} entries, expected {functions}",
                        row.len()
                    )));
                }
                if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(Error::InvalidClass(format!(
                        "{name} row {r} has value {v} outside [0, 1]"
                    )));
                }
            }
        }
        Ok(Self {
            population,
            sample,
            functions,
        })
    }

    /// Builds the sample table by looking up each draw in the population table.
    pub fn from_population(population: Vec<Vec<f64>>, sample: &Sample) -> Result<Self> {
        let mut rows = Vec::with_capacity(sample.len());
        for &k in sample.draws() {
            let row = population.get(k).ok_or(Error::IndexOutOfRange {
                index: k,
                len: population.len(),
            })?;
            rows.push(row.clone());
        }
        Self::new(population, rows)
    }

    pub fn num_functions(&self) -> usize {
        self.functions
    }

    pub fn population_values(&self) -> &[Vec<f64>] {
        &self.population
    }

    pub fn sample_values(&self) -> &[Vec<f64>] {
        &self.sample
    }

    /// The subclass made of the first `k` functions.
    pub fn prefix(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.functions {
            return Err(Error::IndexOutOfRange {
                index: k,
                len: self.functions,
            });
        }
        let cut = |t: &[Vec<f64>]| t.iter().map(|r| r[..k].to_vec()).collect();
        Ok(Self {
            population: cut(&self.population),
            sample: cut(&self.sample),
            functions: k,
        })
    }

    fn check_index(&self, j: usize) -> Result<()> {
        if j < self.functions {
            Ok(())
        } else {
            Err(Error::IndexOutOfRange {
                index: j,
                len: self.functions,
            })
        }
    }
}

/// Which measure a risk is taken under.
#[derive(Debug, Clone, Copy)]
pub enum Measure<'a> {
    Population(&'a FiniteSupportDistribution),
    Empirical(&'a Sample),
}

impl Measure<'_> {
    /// Row weights and the matching table of `class`.
    fn weighted_rows<'c>(&self, class: &'c EvaluatedClass) -> Result<(Vec<f64>, &'c [Vec<f64>])> {
        match self {
            Measure::Population(dist) => {
                if class.population.len() != dist.len() {
                    return Err(Error::DimensionMismatch(format!(
                        "class has {} population rows, distribution has {} points",
                        class.population.len(),
                        dist.len()
                    )));
                }
                Ok((dist.probs().to_vec(), &class.population))
            }
            Measure::Empirical(sample) => {
                if class.sample.len() != sample.len() {
                    return Err(Error::DimensionMismatch(format!(
                        "class has {} sample rows, sample has {} draws",
                        class.sample.len(),
                        sample.len()
                    )));
                }
                Ok((vec![1.0 / sample.len() as f64; sample.len()], &class.sample))
            }
        }
    }
}

/// `P f_j = Σ_k probs[k] · f_j(s_k)`.
pub fn true_risk(dist: &FiniteSupportDistribution, class: &EvaluatedClass, j: usize) -> Result<f64> {
    class.check_index(j)?;
    Ok(risks(Measure::Population(dist), class)?[j])
}

/// `P_n f_j = n⁻¹ Σ_i f_j(X_i)`.
pub fn empirical_risk(sample: &Sample, class: &EvaluatedClass, j: usize) -> Result<f64> {
    class.check_index(j)?;
    Ok(risks(Measure::Empirical(sample), class)?[j])
}

/// Risks of every function under `measure`.
pub fn risks(measure: Measure<'_>, class: &EvaluatedClass) -> Result<Vec<f64>> {
    match measure {
        Measure::Population(_) => {
            let (w, rows) = measure.weighted_rows(class)?;
            let mut out = vec![0.0; class.functions];
            for (wk, row) in w.iter().zip(rows) {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += wk * v;
                }
            }
            Ok(out)
        }
        Measure::Empirical(sample) => {
            measure.weighted_rows(class)?;
            let mut out = vec![0.0; class.functions];
            for row in &class.sample {
                for (o, v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            let n = sample.len() as f64;
            out.iter_mut().for_each(|o| *o /= n);
            Ok(out)
        }
    }
}

/// Index of the smallest value, ties toward the smallest index.
pub fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = j;
        }
    }
    best
}

pub(crate) fn min_value(values: &[f64]) -> f64 {
    values.iter().copied().fold(f64::INFINITY, f64::min)
}

/// `risk(f_j) − min_g risk(g)`.
pub fn excess_risk(measure: Measure<'_>, class: &EvaluatedClass, j: usize) -> Result<f64> {
    class.check_index(j)?;
    Ok(excess_risks(measure, class)?[j])
}

pub fn excess_risks(measure: Measure<'_>, class: &EvaluatedClass) -> Result<Vec<f64>> {
    let r = risks(measure, class)?;
    let best = min_value(&r);
    Ok(r.into_iter().map(|v| v - best).collect())
}

/// Indices whose excess risk is at most `delta`.
pub fn delta_minimal_set(measure: Measure<'_>, class: &EvaluatedClass, delta: f64) -> Result<Vec<usize>> {
    check_delta(delta)?;
    let excess = excess_risks(measure, class)?;
    Ok(minimal_set_from_excess(&excess, delta))
}

pub(crate) fn minimal_set_from_excess(excess: &[f64], delta: f64) -> Vec<usize> {
    excess
        .iter()
        .enumerate()
        .filter(|(_, &e)| e <= delta)
        .map(|(j, _)| j)
        .collect()
}

fn check_delta(delta: f64) -> Result<()> {
    if delta.is_nan() || delta < 0.0 {
        Err(invalid("delta", format!("must be nonnegative, got {delta}")))
    } else {
        Ok(())
    }
}

/// `sqrt(E (f_i − f_j)²)` under `measure`.
pub fn l2_distance(measure: Measure<'_>, class: &EvaluatedClass, i: usize, j: usize) -> Result<f64> {
    class.check_index(i)?;
    class.check_index(j)?;
    let (w, rows) = measure.weighted_rows(class)?;
    Ok(weighted_distance(&w, rows, i, j))
}

fn weighted_distance(w: &[f64], rows: &[Vec<f64>], i: usize, j: usize) -> f64 {
    w.iter()
        .zip(rows)
        .map(|(wk, row)| {
            let d = row[i] - row[j];
            wk * d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Largest L2 distance between two members of the δ-minimal set (0 for a
/// singleton).
pub fn l2_diameter(measure: Measure<'_>, class: &EvaluatedClass, delta: f64) -> Result<f64> {
    let members = delta_minimal_set(measure, class, delta)?;
    let (w, rows) = measure.weighted_rows(class)?;
    Ok(diameter_of(&w, rows, &members))
}

pub(crate) fn diameter_of(w: &[f64], rows: &[Vec<f64>], members: &[usize]) -> f64 {
    let mut best = 0.0f64;
    for (a, &i) in members.iter().enumerate() {
        for &j in &members[a + 1..] {
            best = best.max(weighted_distance(w, rows, i, j));
        }
    }
    best
}

pub(crate) fn sample_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}
