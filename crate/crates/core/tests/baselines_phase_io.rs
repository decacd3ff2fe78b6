use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparsemep::baselines::{exhaustive_best_subset, omp};
use sparsemep::constraints::ConstraintSet;
use sparsemep::data::{generate_synthetic, SyntheticSpec};
use sparsemep::io;
use sparsemep::model::Problem;
use sparsemep::phase::{analyze, PerturbationBasis};
use sparsemep::solver::{anneal, AnnealConfig, AnnealTrace, TraceRecord};

fn random_problem(rng: &mut ChaCha8Rng, n: usize, d: usize, k: usize) -> Problem {
    let a = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
    let y = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    Problem::new(a, y, k).unwrap()
}

fn normal_equations_cost(p: &Problem, support: &[usize]) -> f64 {
    let sub = p.a().select_columns(support.iter());
    let coef = (sub.transpose() * &sub).cholesky().unwrap().solve(&(sub.transpose() * p.y()));
    (p.y() - sub * coef).norm_squared()
}

#[test]
fn oracle_beats_random_subsets() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_problem(&mut rng, 12, 9, 3);
        let best = exhaustive_best_subset(&p, &ConstraintSet::default()).unwrap();
        assert!((best.cost - normal_equations_cost(&p, &best.support)).abs() <= 1e-10);
        for _ in 0..1000 {
            let subset = sample(&mut rng, 9, 3).into_vec();
            assert!(best.cost <= normal_equations_cost(&p, &subset) + 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn reported_costs_match_an_independent_refit(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_problem(&mut rng, 10, 7, 3);
        let best = exhaustive_best_subset(&p, &ConstraintSet::default()).unwrap();
        prop_assert!((best.cost - normal_equations_cost(&p, &best.support)).abs() <= 1e-10);
        prop_assert!((p.residual_sq(&best.w(7)) - best.cost).abs() <= 1e-10);
        let greedy = omp(&p).unwrap();
        prop_assert_eq!(greedy.support.len(), 3);
        prop_assert!((greedy.cost - normal_equations_cost(&p, &greedy.support)).abs() <= 1e-10);
        prop_assert!(best.cost <= greedy.cost + 1e-12);
    }

    #[test]
    fn perturbation_basis_spans_zero_sum_directions(d in 2usize..40) {
        let basis = PerturbationBasis::new(d).unwrap();
        let scaled = &basis.c * d as f64;
        for col in scaled.column_iter() {
            prop_assert!(col.iter().all(|v| (v - v.round()).abs() < 1e-9));
            let integer_sum: i64 = col.iter().map(|v| v.round() as i64).sum();
            prop_assert_eq!(integer_sum, 0);
        }
        let gram = basis.c.transpose() * &basis.c;
        prop_assert!(gram.cholesky().is_some());
    }
}

#[test]
fn five_hundred_record_trace_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut trace = AnnealTrace::default();
    for n in 0..500 {
        trace.push(TraceRecord {
            t: 0.97f64.powi(n),
            q: DMatrix::from_fn(15, 5, |_, _| rng.random::<f64>()),
            x: DVector::from_fn(5, |_, _| rng.random_range(-3.0..3.0)),
            relaxed_cost: rng.random(),
            rounded_cost: rng.random(),
            k_d: 1 + n as usize / 100,
            stochasticity_residual: rng.random::<f64>() * 1e-9,
            inner_iterations: rng.random_range(1..2000),
            converged: rng.random(),
        });
    }
    let text = io::trace_to_json(&trace).unwrap();
    assert_eq!(io::trace_from_json(&text).unwrap(), trace);
    assert_eq!(trace.transitions, vec![100, 200, 300, 400]);
}

#[test]
fn solver_outputs_round_trip() {
    let inst = generate_synthetic(&SyntheticSpec { seed: 2, ..Default::default() }).unwrap();
    let p = &inst.problem;
    let (sol, trace) = anneal(p, &ConstraintSet::default(), &AnnealConfig::default()).unwrap();
    assert_eq!(io::problem_from_json(&io::problem_to_json(p).unwrap()).unwrap(), *p);
    assert_eq!(io::solution_from_json(&io::solution_to_json(&sol).unwrap()).unwrap(), sol);
    assert_eq!(io::trace_from_json(&io::trace_to_json(&trace).unwrap()).unwrap(), trace);
    let report = analyze(p, &trace, true);
    assert_eq!(io::report_from_json(&io::report_to_json(&report).unwrap()).unwrap(), report);
}
