//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use riskmin::aggregation_bounds::{self, build_instance, estimate_mean_excess, exact_mean_excess};
use riskmin::core_model::{draw_sample, EvaluatedClass, FiniteSupportDistribution, Measure, Sample};
use riskmin::experiment::{self, ExperimentConfig};
use riskmin::local_complexity::{local_rademacher_estimate, sharp_transform, ComplexityConfig};
use riskmin::model_selection::{audit_sweep, summarize};
use riskmin::rng;
use riskmin::sparse_erm::{
    self, generate_problem, l1_norm, lp_norm, p_default, penalized_erm, AuditParams, AuditPenalty, Dictionary,
    EpsilonRule, LossKind, LossSpec, PenaltyKind, PenaltySpec, ProblemParams, SolverConfig,
};
use serde_json::json;

const SEED: u64 = 20240611;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn oracle_implication() -> (Outcome, Outcome) {
    let records = audit_sweep(SEED, 1000).expect("audit sweep");
    let s = summarize(&records);
    (
        outcome(
            s.implication_failures == 0 && s.instances == 1000,
            format!(
                "{} instances, {} with conditions, {} implication failures",
                s.instances, s.conditions_hold, s.implication_failures
            ),
        ),
        outcome(
            s.single_class_failures == 0,
            format!("{} single-class failures", s.single_class_failures),
        ),
    )
}

fn aggregation_grid() -> (Outcome, Outcome) {
    let functions = [8, 16, 32];
    let sizes = [100, 400, 1600];
    let rows = aggregation_bounds::sweep(&functions, &sizes, 10_000, SEED).expect("sweep");
    let max_ratio = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    let upper = outcome(rows.iter().all(|r| r.ratio <= 0.25), format!("max ratio {max_ratio:.4}"));

    let floor = aggregation_bounds::empirical_floor(&rows);
    let mut worst_z = 0.0f64;
    for &big_n in &functions {
        let group: Vec<_> = rows.iter().filter(|r| r.functions == big_n).collect();
        for a in 0..group.len() {
            for b in a + 1..group.len() {
                let (ra, rb) = (group[a], group[b]);
                let se_a = ra.stderr / (ra.estimate / ra.ratio);
                let se_b = rb.stderr / (rb.estimate / rb.ratio);
                let z = (ra.ratio - rb.ratio).abs() / (se_a * se_a + se_b * se_b).sqrt();
                worst_z = worst_z.max(z);
            }
        }
    }
    let lower = outcome(
        floor > 0.01 && worst_z <= 5.0,
        format!("min ratio {floor:.4}, worst pairwise gap {worst_z:.2} combined stderr"),
    );
    (upper, lower)
}

fn enumeration_agreement() -> Outcome {
    let mut worst = 0.0f64;
    for (g, &(big_n, n)) in [(2, 2), (2, 4), (4, 2), (2, 8)].iter().enumerate() {
        let inst = build_instance(big_n, n).unwrap();
        let exact = exact_mean_excess(&inst).unwrap().value;
        let mc = estimate_mean_excess(&inst, 100_000, SEED + g as u64).unwrap();
        worst = worst.max((mc.estimate - exact).abs() / mc.stderr);
    }
    outcome(worst <= 4.0, format!("worst deviation {worst:.2} stderr"))
}

fn sharp_closed_forms() -> Outcome {
    let cfg = ComplexityConfig::default();
    let mut worst = 0.0f64;
    for a in [0.01, 0.1, 0.5] {
        let fp = sharp_transform(|d| (a * d).sqrt(), &cfg).unwrap();
        worst = worst.max((fp.delta - a).abs());
    }
    for c in [0.001, 0.05] {
        let fp = sharp_transform(|d| d / 2.0 + c, &cfg).unwrap();
        worst = worst.max((fp.delta - 2.0 * c).abs());
    }
    outcome(worst <= 1e-6, format!("worst error {worst:.2e}"))
}

fn rademacher_agreement() -> Outcome {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for (case, n) in [4usize, 6, 8, 10, 12].into_iter().enumerate() {
        let mut r = rng::stream(SEED, 100 + case as u64);
        let points = 15;
        let pop: Vec<Vec<f64>> = (0..points).map(|_| (0..6).map(|_| r.gen::<f64>()).collect()).collect();
        let dist = FiniteSupportDistribution::uniform(points).unwrap();
        let sample = draw_sample(&dist, n, r.gen()).unwrap();
        let class = EvaluatedClass::from_population(pop, &sample).unwrap();
        for delta in [0.05, 0.2, 1.0] {
            let exact_cfg = ComplexityConfig {
                exhaustive: true,
                ..Default::default()
            };
            let mc_cfg = ComplexityConfig {
                rademacher_draws: 10_000,
                ..Default::default()
            };
            let ex = local_rademacher_estimate(&class, &sample, Measure::Empirical(&sample), delta, &exact_cfg, 1).unwrap();
            let mc = local_rademacher_estimate(&class, &sample, Measure::Empirical(&sample), delta, &mc_cfg, 2).unwrap();
            assert!(ex.exhaustive && !mc.exhaustive);
            let z = if mc.stderr > 0.0 {
                (mc.value - ex.value).abs() / mc.stderr
            } else if (mc.value - ex.value).abs() < 1e-12 {
                0.0
            } else {
                f64::INFINITY
            };
            worst = worst.max(z);
            cases += 1;
        }
    }
    outcome(worst <= 4.0, format!("{cases} cases, worst deviation {worst:.2} sigma"))
}

fn norm_sandwich() -> Outcome {
    let mut violations = 0;
    let mut total = 0;
    let mut r = rng::stream(SEED, 200);
    for big_n in [3usize, 10, 100, 1000] {
        let p = p_default(big_n).unwrap();
        for _ in 0..2500 {
            let scale = 10f64.powf(r.gen_range(-3.0..3.0));
            let keep = r.gen_range(0.05..=1.0);
            let v: Vec<f64> = (0..big_n)
                .map(|_| if r.gen::<f64>() < keep { scale * r.gen_range(-1.0..1.0) } else { 0.0 })
                .collect();
            let (lp, l1) = (lp_norm(&v, p), l1_norm(&v));
            if !(lp <= l1 && l1 <= std::f64::consts::E * lp) {
                violations += 1;
            }
            total += 1;
        }
    }
    outcome(violations == 0, format!("{total} vectors, {violations} violations"))
}

/// Sylvester–Hadamard matrix of order `2^k`.
fn hadamard(k: u32) -> Vec<Vec<f64>> {
    let size = 1usize << k;
    (0..size)
        .map(|i| (0..size).map(|j| if (i & j).count_ones() % 2 == 0 { 1.0 } else { -1.0 }).collect())
        .collect()
}

fn solver_oracles() -> Outcome {
    let cfg = SolverConfig::default();
    let mut r = rng::stream(SEED, 300);

    // Soft thresholding: columns of a Hadamard matrix satisfy (1/n) XᵀX = I.
    let rows: Vec<Vec<f64>> = hadamard(3).into_iter().map(|row| row[..6].to_vec()).collect();
    let full = Sample::from_draws((0..8).collect(), 8, 0).unwrap();
    let dict = Dictionary::from_population(&rows, &full).unwrap();
    let labels: Vec<f64> = (0..8).map(|_| r.gen_range(-2.0..2.0)).collect();
    let loss = LossSpec::from_population(LossKind::Quadratic, labels.clone(), &full).unwrap();
    let mut soft_err = 0.0f64;
    for eps in [0.01, 0.2, 0.7] {
        let sol = penalized_erm(&dict, &loss, &PenaltySpec::new(PenaltyKind::L1, eps).unwrap(), &cfg).unwrap();
        for j in 0..6 {
            let b: f64 = (0..8).map(|i| rows[i][j] * labels[i]).sum::<f64>() / 8.0;
            let oracle = b.signum() * (b.abs() - eps / 2.0).max(0.0);
            soft_err = soft_err.max((sol.lambda[j] - oracle).abs());
        }
    }

    // ε → 0 against the normal equations.
    let n = 60;
    let atoms = 6;
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..atoms).map(|_| r.gen_range(-1.0..=1.0)).collect()).collect();
    let labels: Vec<f64> = rows.iter().map(|row| row[0] - 0.5 * row[3] + r.gen_range(-0.5..0.5)).collect();
    let full = Sample::from_draws((0..n).collect(), n, 0).unwrap();
    let dict = Dictionary::from_population(&rows, &full).unwrap();
    let loss = LossSpec::from_population(LossKind::Quadratic, labels.clone(), &full).unwrap();
    let x = DMatrix::from_fn(n, atoms, |i, j| rows[i][j]);
    let ls = (x.transpose() * &x).lu().solve(&(x.transpose() * DVector::from_column_slice(&labels))).unwrap();
    let mut ls_err = 0.0f64;
    for kind in [PenaltyKind::L1, PenaltyKind::Lp { p: p_default(atoms).unwrap() }] {
        let sol = penalized_erm(&dict, &loss, &PenaltySpec::new(kind, 1e-9).unwrap(), &cfg).unwrap();
        let err: f64 = sol.lambda.iter().zip(ls.iter()).map(|(a, b)| (a - b).abs()).sum();
        ls_err = ls_err.max(err);
    }

    // Two starting points for the strictly convex ℓp problem.
    let pen = PenaltySpec::new(PenaltyKind::Lp { p: p_default(atoms).unwrap() }, 0.05).unwrap();
    let a = penalized_erm(&dict, &loss, &pen, &cfg).unwrap();
    let start: Vec<f64> = (0..atoms).map(|_| r.gen_range(-3.0..3.0)).collect();
    let b = penalized_erm(
        &dict,
        &loss,
        &pen,
        &SolverConfig {
            init: Some(start),
            ..cfg.clone()
        },
    )
    .unwrap();
    let start_gap: f64 = a.lambda.iter().zip(&b.lambda).map(|(x, y)| (x - y).abs()).sum();

    outcome(
        soft_err <= 1e-6 && ls_err <= 1e-5 && start_gap <= 10.0 * cfg.tol,
        format!("soft-threshold {soft_err:.1e}, least squares {ls_err:.1e}, start gap {start_gap:.1e}"),
    )
}

fn sparsity_scaling() -> Outcome {
    let params = ProblemParams {
        points: 200,
        atoms: 50,
        planted_support: 3,
        loss: LossKind::Quadratic,
        noise: 0.5,
    };
    let problem = generate_problem(&params, SEED).unwrap();
    let audit = AuditParams {
        d: 3,
        a: 1.0,
        epsilon_rule: EpsilonRule::Base { scale: 0.15 },
        penalty: AuditPenalty::L1,
        sample_sizes: vec![200, 800, 3200],
        reps: 50,
        solver: SolverConfig::default(),
        population_solver: SolverConfig::default(),
    };
    let report = sparse_erm::sparsity_audit(&problem, &audit, SEED).unwrap();
    let all_zero = report.summaries.iter().all(|s| s.gamma_true == 0.0);
    let medians: Vec<String> = report
        .summaries
        .iter()
        .map(|s| format!("{}:{:.4}", s.n, s.median_gamma_hat))
        .collect();
    let slope = report.slope.unwrap_or(f64::NAN);
    outcome(
        all_zero && report.failures() == 0 && (-0.65..=-0.35).contains(&slope),
        format!(
            "slope {slope:.3}, medians [{}], gammaTrue zero {all_zero}, failures {}, fitted K up {:.3} down {:.3}",
            medians.join(" "),
            report.failures(),
            report.fit.k_up,
            report.fit.k_down
        ),
    )
}

fn cli_determinism() -> Outcome {
    let configs = [
        ("selection-oracle", json!({"instances": 200})),
        ("aggregation-lb", json!({"functions": [2, 8], "sample_sizes": [4, 100], "reps": 2000})),
        (
            "sparse-audit",
            json!({"problem": {"points": 60, "atoms": 8}, "audit": {"sample_sizes": [50, 200], "reps": 4}}),
        ),
        ("complexity-curve", json!({})),
    ];
    let mut mismatches = Vec::new();
    for (sub, params) in configs {
        for format in ["csv", "json"] {
            let mut outputs = Vec::new();
            for _ in 0..2 {
                let dir = tempfile::tempdir().unwrap();
                let path = dir.path().join(format!("out.{format}"));
                let value = json!({
                    "schemaVersion": 1,
                    "subcommand": sub,
                    "baseSeed": SEED,
                    "outputPath": path.to_str().unwrap(),
                    "format": format,
                    "parameters": params,
                });
                let cfg = ExperimentConfig::from_value(&value).expect("valid config");
                let run = experiment::run(&cfg).expect("run");
                let mut files: Vec<Vec<u8>> = run.outputs.iter().map(|p| std::fs::read(p).unwrap()).collect();
                // The manifest echoes the per-run path; compare it with the path blanked.
                let manifest = std::fs::read_to_string(&run.manifest).unwrap();
                files.push(manifest.replace(path.to_str().unwrap(), "<out>").into_bytes());
                outputs.push(files);
            }
            if outputs[0] != outputs[1] {
                mismatches.push(format!("{sub}/{format}"));
            }
        }
    }
    outcome(mismatches.is_empty(), format!("8 runs repeated, mismatches: {mismatches:?}"))
}

fn main() {
    let mut results: Vec<(u32, Outcome, f64)> = Vec::new();
    let mut timed = |id: u32, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        results.push((id, o, t.elapsed().as_secs_f64()));
    };

    let t = Instant::now();
    let (c1, c2) = oracle_implication();
    let secs = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let (c3, c4) = aggregation_grid();
    let grid_secs = t.elapsed().as_secs_f64();
    let mut pending = vec![(1, c1, secs), (2, c2, secs), (3, c3, grid_secs), (4, c4, grid_secs)];
    timed(5, &mut enumeration_agreement);
    timed(6, &mut sharp_closed_forms);
    timed(7, &mut rademacher_agreement);
    timed(8, &mut norm_sandwich);
    timed(9, &mut solver_oracles);
    timed(10, &mut sparsity_scaling);
    timed(11, &mut cli_determinism);
    pending.append(&mut results);

    let mut failed = 0;
    for (id, o, secs) in &pending {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2}: {tag}  {} ({secs:.1}s)", o.detail);
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
