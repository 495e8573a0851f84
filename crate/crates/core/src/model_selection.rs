//! Penalized model selection over nested classes and its oracle inequality.
//!
//! Given nested classes `F_1 ⊆ F_2 ⊆ … ⊆ F_J` and penalties `δ_n(k)`, the
//! selected model is
//!
//! ```text
//! k̂ = argmin_k [ min_{f ∈ F_k} P_n f + 4 δ_n(k) ],   f̂ = empirical minimizer in F_k̂.
//! ```
//!
//! On the event where, for every `j` and every `f ∈ F_j`,
//!
//! ```text
//! (2.1)  E_P(F_j; f)  ≤ 2 E_Pn(F_j; f) + δ_n(j)
//! (2.2)  E_Pn(F_j; f) ≤ 2 E_P(F_j; f)  + δ_n(j)
//! ```
//!
//! and the penalties are nondecreasing in `j`, the selected function obeys
//!
//! ```text
//! E_P(F; f̂) ≤ min_j [ min_{F_j} P f − min_F P f + 9 δ_n(j) ].
//! ```
//!
//! The event is checked exhaustively per instance rather than bounded in
//! probability. The union `F` is the largest supplied class.
//!
//! Penalties are never monotonized behind the caller's back: nested classes
//! can have excess-risk bounds that decrease in `j`, and raising them changes
//! the selection. [`monotonize`] is opt-in.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::core_model::{self, draw_sample, EvaluatedClass, FiniteSupportDistribution, Measure, Sample};
use crate::error::{invalid, Error, Result};
use crate::rng;

const SELECTION_WEIGHT: f64 = 4.0;
const ORACLE_WEIGHT: f64 = 9.0;

/// Nested prefixes of one function pool: class `k` is the first `sizes[k]`
/// functions.
#[derive(Debug, Clone, PartialEq)]
pub struct NestedFamily {
    pool: EvaluatedClass,
    sizes: Vec<usize>,
}

impl NestedFamily {
    pub fn new(pool: EvaluatedClass, sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::InvalidClass("nested family needs at least one class".into()));
        }
        let m = pool.num_functions();
        if sizes[0] == 0 || sizes.iter().any(|&s| s > m) {
            return Err(Error::InvalidClass(format!(
                "class sizes must lie in 1..={m}, got {sizes:?}"
            )));
        }
        if sizes.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidClass(format!("class sizes must be nondecreasing, got {sizes:?}")));
        }
        Ok(Self { pool, sizes })
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn pool(&self) -> &EvaluatedClass {
        &self.pool
    }

    pub fn class(&self, k: usize) -> Result<EvaluatedClass> {
        let size = *self.sizes.get(k).ok_or(Error::IndexOutOfRange {
            index: k,
            len: self.sizes.len(),
        })?;
        self.pool.prefix(size)
    }

    /// Same classes without the last one.
    pub fn truncated(&self, classes: usize) -> Result<Self> {
        if classes == 0 || classes > self.len() {
            return Err(Error::IndexOutOfRange {
                index: classes,
                len: self.len(),
            });
        }
        Ok(Self {
            pool: self.pool.clone(),
            sizes: self.sizes[..classes].to_vec(),
        })
    }

    fn union_size(&self) -> usize {
        *self.sizes.last().expect("nonempty family")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<f64>", try_from = "Vec<f64>")]
pub struct PenaltySchedule {
    deltas: Vec<f64>,
    monotone: bool,
}

impl PenaltySchedule {
    pub fn new(deltas: Vec<f64>) -> Result<Self> {
        if deltas.is_empty() {
            return Err(invalid("deltas", "schedule is empty"));
        }
        if let Some(d) = deltas.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
            return Err(invalid("deltas", format!("penalties must be positive and finite, got {d}")));
        }
        let monotone = deltas.windows(2).all(|w| w[0] <= w[1]);
        Ok(Self { deltas, monotone })
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    pub fn is_monotone(&self) -> bool {
        self.monotone
    }

    pub fn len(&self) -> usize {
        self.deltas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.deltas.is_empty()
    }
}

impl From<PenaltySchedule> for Vec<f64> {
    fn from(s: PenaltySchedule) -> Self {
        s.deltas
    }
}

impl TryFrom<Vec<f64>> for PenaltySchedule {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

/// Running maximum of the penalties.
pub fn monotonize(schedule: &PenaltySchedule) -> PenaltySchedule {
    let mut out = schedule.deltas.clone();
    for k in 1..out.len() {
        out[k] = out[k].max(out[k - 1]);
    }
    PenaltySchedule {
        deltas: out,
        monotone: true,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SelectionResult {
    pub k_hat: usize,
    pub f_hat: usize,
    pub scores: Vec<f64>,
}

/// Minimum and first minimizer of each prefix of `values`.
fn prefix_minima(values: &[f64], sizes: &[usize]) -> Vec<(f64, usize)> {
    sizes
        .iter()
        .map(|&s| {
            let j = core_model::argmin(&values[..s]);
            (values[j], j)
        })
        .collect()
}

fn check_lengths(family: &NestedFamily, schedule: &PenaltySchedule) -> Result<()> {
    if family.len() != schedule.len() {
        return Err(Error::DimensionMismatch(format!(
            "family has {} classes, schedule has {} penalties",
            family.len(),
            schedule.len()
        )));
    }
    Ok(())
}

pub fn select_model(family: &NestedFamily, sample: &Sample, schedule: &PenaltySchedule) -> Result<SelectionResult> {
    check_lengths(family, schedule)?;
    let emp = core_model::risks(Measure::Empirical(sample), &family.pool)?;
    Ok(select_from_risks(&emp, family.sizes(), schedule.deltas()))
}

fn select_from_risks(emp: &[f64], sizes: &[usize], deltas: &[f64]) -> SelectionResult {
    let minima = prefix_minima(emp, sizes);
    let scores: Vec<f64> = minima
        .iter()
        .zip(deltas)
        .map(|(&(m, _), &d)| m + SELECTION_WEIGHT * d)
        .collect();
    let k_hat = core_model::argmin(&scores);
    SelectionResult {
        k_hat,
        f_hat: minima[k_hat].1,
        scores,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Condition {
    /// `E_P ≤ 2 E_Pn + δ`.
    TrueBelowEmpirical,
    /// `E_Pn ≤ 2 E_P + δ`.
    EmpiricalBelowTrue,
}

/// The tightest instance of either condition. Negative slack is a violation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ConditionSlack {
    pub model: usize,
    pub function: usize,
    pub condition: Condition,
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ConditionCheck {
    pub holds: bool,
    pub true_below_empirical: bool,
    pub empirical_below_true: bool,
    pub worst: ConditionSlack,
}

struct Risks {
    pop: Vec<f64>,
    emp: Vec<f64>,
}

impl Risks {
    fn new(family: &NestedFamily, sample: &Sample, dist: &FiniteSupportDistribution) -> Result<Self> {
        Ok(Self {
            pop: core_model::risks(Measure::Population(dist), &family.pool)?,
            emp: core_model::risks(Measure::Empirical(sample), &family.pool)?,
        })
    }
}

pub fn check_conditions(
    family: &NestedFamily,
    sample: &Sample,
    dist: &FiniteSupportDistribution,
    schedule: &PenaltySchedule,
) -> Result<ConditionCheck> {
    check_lengths(family, schedule)?;
    let risks = Risks::new(family, sample, dist)?;
    Ok(conditions_from_risks(&risks, family.sizes(), schedule.deltas()))
}

fn conditions_from_risks(risks: &Risks, sizes: &[usize], deltas: &[f64]) -> ConditionCheck {
    let pop_min = prefix_minima(&risks.pop, sizes);
    let emp_min = prefix_minima(&risks.emp, sizes);
    let mut worst: Option<ConditionSlack> = None;
    let mut first_ok = true;
    let mut second_ok = true;
    for (k, (&size, &delta)) in sizes.iter().zip(deltas).enumerate() {
        for f in 0..size {
            let ep = risks.pop[f] - pop_min[k].0;
            let en = risks.emp[f] - emp_min[k].0;
            let candidates = [
                (Condition::TrueBelowEmpirical, 2.0 * en + delta - ep),
                (Condition::EmpiricalBelowTrue, 2.0 * ep + delta - en),
            ];
            for (condition, slack) in candidates {
                if slack < 0.0 {
                    match condition {
                        Condition::TrueBelowEmpirical => first_ok = false,
                        Condition::EmpiricalBelowTrue => second_ok = false,
                    }
                }
                if worst.map_or(true, |w| slack < w.slack) {
                    worst = Some(ConditionSlack {
                        model: k,
                        function: f,
                        condition,
                        slack,
                    });
                }
            }
        }
    }
    ConditionCheck {
        holds: first_ok && second_ok,
        true_below_empirical: first_ok,
        empirical_below_true: second_ok,
        worst: worst.expect("every class has at least one function"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AuditReport {
    pub conditions_hold: bool,
    pub conditions: ConditionCheck,
    pub selection: SelectionResult,
    /// `E_P(F; f̂)`.
    pub lhs: f64,
    /// `min_j [min_{F_j} P − min_F P + 9 δ_n(j)]`.
    pub rhs: f64,
    /// The `j` attaining `rhs`.
    pub rhs_model: usize,
    pub oracle_holds: bool,
    /// `E_P(F_j; f̂_j)` for each model, where `f̂_j` is the empirical
    /// minimizer over `F_j`.
    pub single_class_excess: Vec<f64>,
    /// `E_P(F_j; f̂_j) ≤ δ_n(j)` for every `j`.
    pub single_class_holds: bool,
}

pub fn audit_oracle(
    family: &NestedFamily,
    sample: &Sample,
    dist: &FiniteSupportDistribution,
    schedule: &PenaltySchedule,
) -> Result<AuditReport> {
    check_lengths(family, schedule)?;
    if !schedule.is_monotone() {
        let index = schedule.deltas.windows(2).position(|w| w[0] > w[1]).unwrap_or(0) + 1;
        return Err(Error::NonMonotoneSchedule { index });
    }
    let risks = Risks::new(family, sample, dist)?;
    let sizes = family.sizes();
    let deltas = schedule.deltas();

    let conditions = conditions_from_risks(&risks, sizes, deltas);
    let selection = select_from_risks(&risks.emp, sizes, deltas);

    let union_min = core_model::min_value(&risks.pop[..family.union_size()]);
    let lhs = risks.pop[selection.f_hat] - union_min;

    let pop_min = prefix_minima(&risks.pop, sizes);
    let terms: Vec<f64> = pop_min
        .iter()
        .zip(deltas)
        .map(|(&(m, _), &d)| m - union_min + ORACLE_WEIGHT * d)
        .collect();
    let rhs_model = core_model::argmin(&terms);
    let rhs = terms[rhs_model];

    let emp_min = prefix_minima(&risks.emp, sizes);
    let single_class_excess: Vec<f64> = emp_min
        .iter()
        .zip(&pop_min)
        .map(|(&(_, f), &(m, _))| risks.pop[f] - m)
        .collect();
    let single_class_holds = single_class_excess.iter().zip(deltas).all(|(e, d)| e <= d);

    Ok(AuditReport {
        conditions_hold: conditions.holds,
        conditions,
        selection,
        lhs,
        rhs,
        rhs_model,
        oracle_holds: lhs <= rhs,
        single_class_excess,
        single_class_holds,
    })
}

/// A randomly generated audit problem.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditInstance {
    pub dist: FiniteSupportDistribution,
    pub sample: Sample,
    pub family: NestedFamily,
    pub schedule: PenaltySchedule,
}

/// Random nested instance drawn from stream `instance` of `base_seed`.
///
/// * support of `m ∈ [3, 10]` points with probabilities `E_k / Σ E` for
///   i.i.d. unit exponentials (a flat Dirichlet draw);
/// * a pool of `M ∈ [4, 30]` functions with i.i.d. uniform `[0, 1]` values;
/// * `J ∈ [1, min(M, 6)]` classes whose sizes are distinct random prefix
///   lengths;
/// * a sample of `n ∈ [5, 60]` draws;
/// * sorted penalties `scale · (U + 10⁻³)` with `scale` log-uniform on
///   `[10⁻³, 1]`, so both outcomes of the conditions occur.
pub fn random_instance(base_seed: u64, instance: u64) -> Result<AuditInstance> {
    let mut r = rng::stream(base_seed, instance);
    let m = r.gen_range(3..=10);
    let raw: Vec<f64> = (0..m).map(|_| -(1.0 - r.gen::<f64>()).ln()).collect();
    let total: f64 = raw.iter().sum();
    let dist = FiniteSupportDistribution::new(raw.iter().map(|v| v / total).collect())?;

    let pool_size = r.gen_range(4..=30);
    let population: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..pool_size).map(|_| r.gen::<f64>()).collect())
        .collect();

    let classes = r.gen_range(1..=pool_size.min(6));
    let mut sizes = rand::seq::index::sample(&mut r, pool_size, classes)
        .into_iter()
        .map(|s| s + 1)
        .collect::<Vec<_>>();
    sizes.sort_unstable();

    let n = r.gen_range(5..=60);
    let sample = draw_sample(&dist, n, r.gen())?;
    let pool = EvaluatedClass::from_population(population, &sample)?;
    let family = NestedFamily::new(pool, sizes)?;

    let scale = 10f64.powf(r.gen_range(-3.0..=0.0));
    let mut deltas: Vec<f64> = (0..classes).map(|_| scale * (r.gen::<f64>() + 1e-3)).collect();
    deltas.sort_by(f64::total_cmp);
    let schedule = PenaltySchedule::new(deltas)?;

    Ok(AuditInstance {
        dist,
        sample,
        family,
        schedule,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AuditRecord {
    pub instance: u64,
    pub report: AuditReport,
}

/// Audits `instances` generated instances; results are ordered by instance id.
pub fn audit_sweep(base_seed: u64, instances: u64) -> Result<Vec<AuditRecord>> {
    (0..instances)
        .into_par_iter()
        .map(|i| {
            let inst = random_instance(base_seed, i)?;
            let report = audit_oracle(&inst.family, &inst.sample, &inst.dist, &inst.schedule)?;
            Ok(AuditRecord { instance: i, report })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AuditSummary {
    pub instances: usize,
    pub conditions_hold: usize,
    pub oracle_holds: usize,
    /// Instances with the conditions satisfied but the inequality broken.
    pub implication_failures: usize,
    /// Instances where (2.1) held but some `E_P(F_j; f̂_j) > δ_n(j)`.
    pub single_class_failures: usize,
}

pub fn summarize(records: &[AuditRecord]) -> AuditSummary {
    let count = |p: &dyn Fn(&AuditReport) -> bool| records.iter().filter(|r| p(&r.report)).count();
    AuditSummary {
        instances: records.len(),
        conditions_hold: count(&|r| r.conditions_hold),
        oracle_holds: count(&|r| r.oracle_holds),
        implication_failures: count(&|r| r.conditions_hold && !r.oracle_holds),
        single_class_failures: count(&|r| r.conditions.true_below_empirical && !r.single_class_holds),
    }
}

/// CSV with header `instance,conditionsHold,lhs,rhs,oracleHolds`.
pub fn write_audit_csv<W: std::io::Write>(records: &[AuditRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["instance", "conditionsHold", "lhs", "rhs", "oracleHolds"])?;
    for r in records {
        w.write_record([
            r.instance.to_string(),
            r.report.conditions_hold.to_string(),
            r.report.lhs.to_string(),
            r.report.rhs.to_string(),
            r.report.oracle_holds.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
