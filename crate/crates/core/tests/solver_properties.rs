use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparsemep::baselines::exhaustive_best_subset;
use sparsemep::constraints::{at_least_one, at_most_one, group_tie, ConstraintSet};
use sparsemep::io;
use sparsemep::model::{free_energy, grad_q, Problem, RelaxedState};
use sparsemep::solver::{anneal, auto_tmax, inner_solve, AnnealConfig};

fn random_problem(rng: &mut ChaCha8Rng, n: usize, d: usize, k: usize) -> Problem {
    let a = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
    let y = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    Problem::new(a, y, k).unwrap()
}

/// Least squares through the normal equations, independent of the library's QR path.
fn normal_equations_cost(p: &Problem, support: &[usize]) -> f64 {
    let sub = p.a().select_columns(support.iter());
    let gram = sub.transpose() * &sub;
    let coef = gram.cholesky().expect("full column rank").solve(&(sub.transpose() * p.y()));
    (p.y() - sub * coef).norm_squared()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn solutions_respect_the_sparsity_contract(seed in any::<u64>(), d in 2usize..7, k in 1usize..4) {
        let k = k.min(d);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_problem(&mut rng, 8, d, k);
        let (sol, _) = anneal(&p, &ConstraintSet::default(), &AnnealConfig::default()).unwrap();
        prop_assert!(sol.effective_sparsity <= k);
        prop_assert_eq!(sol.v.shape(), (d, k));
        for col in sol.v.column_iter() {
            prop_assert!(col.iter().all(|&v| v == 0.0 || v == 1.0));
            prop_assert_eq!(col.sum(), 1.0);
        }
        prop_assert_eq!(&sol.w, &(&sol.v * &sol.x));
        prop_assert!(sol.support.len() <= k);
        prop_assert!((sol.cost - normal_equations_cost(&p, &sol.support)).abs() <= 1e-10);
    }

    #[test]
    fn constrained_runs_never_return_a_silent_violation(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_problem(&mut rng, 9, 6, 3);
        let cs = ConstraintSet::new(vec![
            at_most_one(&[0, 1, 2]).unwrap(),
            at_least_one(&[3, 4]).unwrap(),
            group_tie(&[2, 5]).unwrap(),
        ]);
        let (sol, _) = anneal(&p, &cs, &AnnealConfig::default()).unwrap();
        prop_assert_eq!(sol.diagnostics.constraints_satisfied.len(), 3);
        if sol.diagnostics.all_constraints_hold() {
            prop_assert!(cs.satisfaction(&sol.v).iter().all(|&ok| ok));
        } else {
            prop_assert!(sol.diagnostics.has_warnings());
        }
    }
}

#[test]
fn rounded_selections_satisfy_constraints() {
    let mut held = 0;
    for seed in 0..40 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_problem(&mut rng, 9, 6, 3);
        let cs = ConstraintSet::new(vec![at_most_one(&[0, 1]).unwrap(), at_least_one(&[4, 5]).unwrap()]);
        let (sol, _) = anneal(&p, &cs, &AnnealConfig::default()).unwrap();
        if sol.diagnostics.all_constraints_hold() {
            held += 1;
            assert!(cs.satisfaction(&sol.v).iter().all(|&ok| ok));
        }
    }
    assert_eq!(held, 40);
}

/// States from the inner loop at temperatures between `T_max / 100` and `T_max`.
fn converged_states(count: u64) -> Vec<(Problem, RelaxedState)> {
    let config = AnnealConfig::default();
    let mut out = Vec::new();
    let mut seed = 0;
    while (out.len() as u64) < count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        seed += 1;
        let p = random_problem(&mut rng, 8, 6, 3);
        let t = auto_tmax(&p).unwrap() * 10f64.powf(-rng.random_range(0.0..2.0));
        let mut s = RelaxedState::uniform(6, 3, t);
        s.q = DMatrix::from_fn(6, 3, |_, _| rng.random_range(0.1..0.3));
        for mut c in s.q.column_iter_mut() {
            let total = c.sum();
            c /= total;
        }
        let r = inner_solve(&p, &ConstraintSet::default(), s, &config).unwrap();
        if r.converged {
            out.push((p, r.state));
        }
    }
    out
}

#[test]
fn inner_solve_outputs_are_stationary() {
    let tol = 10.0 * AnnealConfig::default().inner_tol;
    let h = 1e-6;
    for (p, s) in converged_states(100) {
        let f = |s: &RelaxedState| free_energy(&p, s, 0.0).unwrap();
        let mut gx = 0.0f64;
        for j in 0..s.x.len() {
            let (mut up, mut dn) = (s.clone(), s.clone());
            up.x[j] += h;
            dn.x[j] -= h;
            gx += ((f(&up) - f(&dn)) / (2.0 * h)).powi(2);
        }
        assert!(gx.sqrt() <= 1e-6, "x gradient {}", gx.sqrt());

        let g = grad_q(&p, &ConstraintSet::default(), &s).unwrap();
        for (idx, &q) in s.q.iter().enumerate() {
            if q > 1e-3 && q < 1.0 - 1e-3 {
                let (mut up, mut dn) = (s.clone(), s.clone());
                let step = h * q.min(1.0 - q);
                up.q[idx] += step;
                dn.q[idx] -= step;
                let fd = (f(&up) - f(&dn)) / (2.0 * step);
                assert!(fd.abs() <= tol, "Q gradient {fd} at T = {}", s.t);
                assert!(g[idx].abs() <= tol);
            }
        }
    }
}

#[test]
fn anneal_never_beats_the_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..1000 {
        let d = rng.random_range(2..7);
        let k = rng.random_range(1..=d.min(3));
        let n = rng.random_range(3..9);
        let p = random_problem(&mut rng, n, d, k);
        let (sol, _) = anneal(&p, &ConstraintSet::default(), &AnnealConfig::default()).unwrap();
        let best = exhaustive_best_subset(&p, &ConstraintSet::default()).unwrap();
        assert!(sol.cost >= best.cost - 1e-9, "case {case}: {} < {}", sol.cost, best.cost);
    }
}

#[test]
fn identical_seeds_give_identical_bytes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = random_problem(&mut rng, 8, 10, 4);
    let config = AnnealConfig { seed: 42, ..Default::default() };
    let run = || {
        let (sol, trace) = anneal(&p, &ConstraintSet::default(), &config).unwrap();
        (io::solution_to_json(&sol).unwrap(), io::trace_to_json(&trace).unwrap())
    };
    let first = run();
    for _ in 0..3 {
        assert_eq!(run(), first);
    }
}

#[test]
fn trace_starts_with_one_distinct_column() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_problem(&mut rng, 8, 10, 4);
        let (_, trace) = anneal(&p, &ConstraintSet::default(), &AnnealConfig::default()).unwrap();
        assert_eq!(trace.records[0].k_d, 1);
        for &i in &trace.transitions {
            assert!(trace.records[i].k_d > trace.records[i - 1].k_d);
        }
    }
}
