use std::collections::BTreeSet;

use proptest::prelude::*;

use eqdisc::baseline::{bootstrap_discover, BaselineSettings};
use eqdisc::bayesnet::learn_structure;
use eqdisc::dataio::{load_csv, DataSet, DiffMethod, DiffSettings};
use eqdisc::ensemble::TermTable;
use eqdisc::evolution::{pareto_levels, Objectives};
use eqdisc::parallel::Execution;
use eqdisc::regression::lasso;
use eqdisc::solver::simulate_lotka_volterra;
use eqdisc::tokens::{Equation, Term, Token};

fn grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 * 0.1 + 0.01 * (i as f64).sin()).collect()
}

fn method() -> impl Strategy<Value = DiffMethod> {
    prop_oneof![Just(DiffMethod::Central), Just(DiffMethod::Smoothed), Just(DiffMethod::Spline)]
}

fn first_derivative(t: &[f64], x: Vec<f64>, method: DiffMethod) -> Vec<f64> {
    let settings = DiffSettings {
        method,
        window: 5,
        max_order: 2,
    };
    let data = DataSet::new("t", t.to_vec(), vec![("x".into(), x)]).unwrap();
    data.differentiate("x", 1, &settings).unwrap().derivative("x", 1).unwrap().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn differentiation_is_linear(
        method in method(),
        f in prop::collection::vec(-5.0..5.0f64, 12),
        g in prop::collection::vec(-5.0..5.0f64, 12),
        a in -3.0..3.0f64,
        b in -3.0..3.0f64,
    ) {
        let t = grid(12);
        let combo: Vec<f64> = f.iter().zip(&g).map(|(x, y)| a * x + b * y).collect();
        let lhs = first_derivative(&t, combo, method);
        let df = first_derivative(&t, f, method);
        let dg = first_derivative(&t, g, method);
        for i in 0..t.len() {
            let rhs = a * df[i] + b * dg[i];
            prop_assert!((lhs[i] - rhs).abs() <= 1e-8 * (1.0 + rhs.abs()), "row {i}: {} vs {rhs}", lhs[i]);
        }
    }

    #[test]
    fn csv_round_trip_is_exact(
        u in prop::collection::vec(-1e6..1e6f64, 3..20),
        seed in 0..1000u32,
    ) {
        let n = u.len();
        let t: Vec<f64> = (0..n).map(|i| i as f64 * 0.37 + seed as f64).collect();
        let v: Vec<f64> = u.iter().map(|x| x / 7.0).collect();
        let data = DataSet::new("time", t.clone(), vec![("u".into(), u.clone()), ("v".into(), v.clone())]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        data.write_csv(&path).unwrap();
        let back = load_csv(&path, "time", &["u", "v"]).unwrap();
        prop_assert_eq!(back.grid(), &t[..]);
        prop_assert_eq!(back.channel("u").unwrap(), &u[..]);
        prop_assert_eq!(back.channel("v").unwrap(), &v[..]);
    }

    #[test]
    fn lasso_shrinks_with_lambda(
        cols in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 20), 1..5),
        y in prop::collection::vec(-1.0..1.0f64, 20),
        l1 in 0.0..0.5f64,
        dl in 0.0..0.5f64,
    ) {
        let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        let weighted = |c: &[f64]| c.iter().zip(&norms).map(|(a, n)| a.abs() * n).sum::<f64>();
        let a = lasso(&cols, &y, l1, 20_000, 1e-12).unwrap();
        let b = lasso(&cols, &y, l1 + dl, 20_000, 1e-12).unwrap();
        prop_assert!(weighted(&b) <= weighted(&a) + 1e-6);
        // Above the largest scaled correlation everything is zero.
        let lmax = cols
            .iter()
            .zip(&norms)
            .map(|(c, n)| c.iter().zip(&y).map(|(p, q)| p * q).sum::<f64>().abs() / n)
            .fold(0.0, f64::max);
        let z = lasso(&cols, &y, lmax * 1.001 + 1e-9, 20_000, 1e-12).unwrap();
        prop_assert!(z.iter().all(|c| *c == 0.0));
    }

    #[test]
    fn pareto_levels_partition_and_order(
        raw in prop::collection::vec((0..12u32, 1..6usize), 1..40),
    ) {
        let objs: Vec<Objectives> = raw
            .iter()
            .map(|&(q, c)| Objectives { quality: q as f64, complexity: c })
            .collect();
        let levels = pareto_levels(&objs);
        let flat: BTreeSet<usize> = levels.iter().flatten().copied().collect();
        prop_assert_eq!(flat.len(), objs.len());
        prop_assert_eq!(levels.iter().map(Vec::len).sum::<usize>(), objs.len());
        for level in &levels {
            for &i in level {
                for &j in level {
                    prop_assert!(!objs[i].dominates(&objs[j]));
                }
            }
        }
        for w in levels.windows(2) {
            for &j in &w[1] {
                prop_assert!(w[0].iter().any(|&i| objs[i].dominates(&objs[j])));
            }
        }
    }

    #[test]
    fn learned_graphs_are_acyclic(
        rows in prop::collection::vec(prop::collection::vec(any::<bool>(), 5), 10..80),
        max_parents in 1..4usize,
    ) {
        let columns: Vec<String> = ["a_u", "b_u", "c_u", "d_v", "e_v"].iter().map(|s| s.to_string()).collect();
        let values = rows
            .iter()
            .map(|r| r.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect())
            .collect();
        let table = TermTable {
            columns,
            values,
            presence: rows.clone(),
            targets: vec!["d1_u".into(); rows.len()],
        };
        let dag = learn_structure(&table, max_parents).unwrap();
        prop_assert!(dag.topological_order().is_some());
        for node in 0..5 {
            let parents = dag.edges().iter().filter(|(_, to)| *to == node).count();
            prop_assert!(parents <= max_parents);
        }
    }

    #[test]
    fn retargeting_preserves_the_relation(
        c1 in 0.1..3.0f64,
        c2 in -3.0..-0.1f64,
        c3 in prop_oneof![-2.0..-0.05f64, 0.05..2.0f64],
    ) {
        let terms = vec![
            Term::from_key("d1_u", 1.0).unwrap(),
            Term::from_key("u", c1).unwrap(),
            Term::from_key("u*v", c2).unwrap(),
            Term::from_key("d1_u*v", c3).unwrap(),
        ];
        let eq = Equation::new(terms, 0).unwrap();
        let moved = eq.retarget(3).unwrap();
        prop_assert_eq!(moved.target().coefficient, 1.0);
        prop_assert_eq!(moved.keys().into_iter().collect::<BTreeSet<_>>(), eq.keys().into_iter().collect::<BTreeSet<_>>());
        let back = moved.retarget(0).unwrap();
        for key in eq.keys() {
            let (a, b) = (eq.coefficient(&key).unwrap(), back.coefficient(&key).unwrap());
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
        let json = serde_json::to_string(&eq).unwrap();
        prop_assert_eq!(serde_json::from_str::<Equation>(&json).unwrap(), eq);
    }

    #[test]
    fn term_keys_ignore_factor_order(perm in Just(vec![0usize, 1, 2]).prop_shuffle()) {
        let tokens = [Token::field("v"), Token::deriv("u", 1), Token::field("u")];
        let shuffled: Vec<Token> = perm.iter().map(|&i| tokens[i].clone()).collect();
        prop_assert_eq!(Term::of(shuffled).key(), Term::of(tokens.to_vec()).key());
    }
}

#[test]
fn equation_rejects_duplicates_and_derivative_free_targets() {
    let d = Term::from_key("d1_u", 1.0).unwrap();
    let u = Term::from_key("u", 2.0).unwrap();
    assert!(Equation::new(vec![d.clone(), u.clone(), u.clone()], 0).is_err());
    assert!(Equation::new(vec![d.clone(), u.clone()], 1).is_err());
    assert!(Equation::new(vec![u], 0).is_err());
    let eq = Equation::new(vec![Term::from_key("d1_u", 5.0).unwrap()], 0).unwrap();
    assert_eq!(eq.target().coefficient, 1.0);
}

#[test]
fn baseline_interval_shrinks_like_inverse_root_n() {
    let data = simulate_lotka_volterra((0.55, 0.028, 0.84, 0.026), (30.0, 4.0), (0.0, 20.0), 101).unwrap();
    let data = data.with_all_derivatives(&DiffSettings { max_order: 1, ..DiffSettings::default() }).unwrap();
    // Noise keeps the bootstrap spread away from zero.
    let noisy: Vec<f64> = data
        .derivative("u", 1)
        .unwrap()
        .iter()
        .enumerate()
        .map(|(i, x)| x + 0.5 * ((i * 7919) as f64).sin())
        .collect();
    let data = data.with_derivative("u", 1, noisy).unwrap();
    let vars = vec!["u".to_string(), "v".to_string()];
    let width = |n: usize| {
        let settings = BaselineSettings { n_boot: n, ..BaselineSettings::default() };
        let report = bootstrap_discover(&data, &vars, &settings, 9, Execution::Parallel).unwrap();
        report.equations[0].terms.iter().find(|t| t.key == "u").unwrap().half_width.unwrap()
    };
    let (w100, w400, w1600) = (width(100), width(400), width(1600));
    for (ratio, label) in [(w100 / w400, "100/400"), (w400 / w1600, "400/1600")] {
        assert!((2.0 / 1.5..=2.0 * 1.5).contains(&ratio), "{label}: ratio {ratio}");
    }
}

#[test]
fn sequential_and_parallel_baselines_agree() {
    let data = simulate_lotka_volterra((0.55, 0.028, 0.84, 0.026), (30.0, 4.0), (0.0, 20.0), 101).unwrap();
    let data = data.with_all_derivatives(&DiffSettings { max_order: 1, ..DiffSettings::default() }).unwrap();
    let vars = vec!["u".to_string(), "v".to_string()];
    let settings = BaselineSettings { n_boot: 50, ..BaselineSettings::default() };
    let a = bootstrap_discover(&data, &vars, &settings, 1, Execution::Sequential).unwrap();
    let b = bootstrap_discover(&data, &vars, &settings, 1, Execution::Parallel).unwrap();
    assert_eq!(a, b);
}
