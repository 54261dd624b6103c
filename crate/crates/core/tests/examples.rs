use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use eqdisc::bayesnet::{fit_parameters, learn_structure, sample_systems, summarize, Dag};
use eqdisc::dataio::{load_csv, DataSet, DiffMethod, DiffSettings};
use eqdisc::ensemble::{collect, TermTable};
use eqdisc::evolution::{crossover, evolve, mutate_traced, random_equation, EvoConfig, Individual, MutationKind};
use eqdisc::parallel::{stream_rng, Execution};
use eqdisc::regression::{fit_with_target, RegressionSettings};
use eqdisc::solver::{resolve_equations, simulate_lotka_volterra};
use eqdisc::tokens::{Equation, Term, TokenConfig};

fn lv(points: usize) -> DataSet {
    simulate_lotka_volterra((0.55, 0.028, 0.84, 0.026), (30.0, 4.0), (0.0, 20.0), points)
        .unwrap()
        .with_all_derivatives(&DiffSettings {
            max_order: 1,
            ..DiffSettings::default()
        })
        .unwrap()
}

fn eq(pairs: &[(&str, f64)]) -> Equation {
    Equation::new(pairs.iter().map(|(k, c)| Term::from_key(k, *c).unwrap()).collect(), 0).unwrap()
}

fn case_a_config() -> EvoConfig {
    EvoConfig::new(TokenConfig::new(vec!["u".into(), "v".into()], "t", 1))
}

#[test]
fn hudson_bay_file_loads_every_row() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/hudson-bay-lynx-hare.csv");
    let rows = std::fs::read_to_string(&path)
        .unwrap()
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .count();
    let data = load_csv(&path, "Year", &["Lynx", "Hare"]).unwrap();
    assert_eq!(data.variables().len(), 2);
    assert_eq!(data.len(), rows);
}

#[test]
fn central_derivative_of_sine() {
    let t: Vec<f64> = (0..=628).map(|i| i as f64 * 0.01).collect();
    let s: Vec<f64> = t.iter().map(|x| x.sin()).collect();
    let data = DataSet::new("t", t.clone(), vec![("u".into(), s)]).unwrap();
    let settings = DiffSettings {
        method: DiffMethod::Central,
        window: 5,
        max_order: 1,
    };
    let d = data.differentiate("u", 1, &settings).unwrap();
    let err = d
        .derivative("u", 1)
        .unwrap()
        .iter()
        .zip(&t)
        .map(|(a, x)| (a - x.cos()).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-3, "{err}");
}

#[test]
fn noiseless_lv_fit_recovers_growth_and_predation() {
    let data = lv(2001);
    let fit = fit_with_target(
        &eq(&[("d1_u", 1.0), ("u", 0.0), ("u*v", 0.0)]),
        &data,
        &RegressionSettings::default(),
        0,
    )
    .unwrap();
    let (a, b) = (fit.coefficients["u"], fit.coefficients["u*v"]);
    assert!((a / 0.55 - 1.0).abs() < 0.02, "{a}");
    assert!((b / -0.028 - 1.0).abs() < 0.02, "{b}");
}

#[test]
fn crossover_and_mutation_keep_equations_valid() {
    let cfg = case_a_config();
    let mut rng = stream_rng(21, 0);
    let valid = |e: &Equation| {
        let terms: Vec<Term> = e.terms().to_vec();
        Equation::new(terms, e.target_index()).is_ok()
            && e.target().has_derivative()
            && e.target().coefficient == 1.0
            && e.terms().iter().all(|t| cfg.tokens.validate_term(t).is_ok())
    };
    for _ in 0..1000 {
        let a = Individual::new(random_equation(&cfg, "u", &mut rng).unwrap());
        let b = Individual::new(random_equation(&cfg, "u", &mut rng).unwrap());
        let (c, d) = crossover(&a, &b, &mut rng);
        assert!(valid(&c.equation) && valid(&d.equation));

        let (m, kind) = mutate_traced(&a, &cfg, "u", &mut rng);
        assert!(valid(&m.equation));
        let before: Vec<String> = a.equation.keys();
        let after: Vec<String> = m.equation.keys();
        let lost = before.iter().filter(|k| !after.contains(k)).count();
        let gained = after.iter().filter(|k| !before.contains(k)).count();
        match kind {
            Some(MutationKind::ReplaceToken) => assert!(lost == 1 && gained == 1, "{before:?} -> {after:?}"),
            Some(MutationKind::AddTerm) => assert!(lost == 0 && gained == 1),
            Some(MutationKind::RemoveTerm) => assert!(lost == 1 && gained == 0),
            None => assert_eq!(before, after),
        }
    }
}

#[test]
fn exponential_decay_is_found() {
    let t: Vec<f64> = (0..=300).map(|i| i as f64 * 0.01).collect();
    let u: Vec<f64> = t.iter().map(|x| (-x).exp()).collect();
    let data = DataSet::new("t", t, vec![("u".into(), u)])
        .unwrap()
        .with_all_derivatives(&DiffSettings {
            max_order: 1,
            ..DiffSettings::default()
        })
        .unwrap();
    let mut cfg = EvoConfig::new(TokenConfig::for_data(&data, 1));
    cfg.population = 32;
    cfg.generations = 30;
    let front = evolve(&data, &cfg, "u").unwrap();
    let hit = front
        .first()
        .iter()
        .filter_map(|i| i.fitted.as_ref())
        .any(|e| e.coefficient("u").is_some_and(|c| (c + 1.0).abs() < 0.01));
    assert!(hit);
}

#[test]
fn most_synthetic_runs_find_the_predation_equation() {
    let data = lv(401);
    let mut cfg = case_a_config();
    cfg.seed = 5;
    let ens = collect(&data, 10, &cfg, "u").unwrap();
    let hits = ens
        .runs
        .iter()
        .filter(|r| {
            r.members.iter().any(|m| {
                let e = m.equation().unwrap();
                e.position("u").is_some() && e.position("u*v").is_some()
            })
        })
        .count();
    assert!(hits >= 8, "{hits}/10");
}

fn gaussian_table(n: usize, seed: u64) -> TermTable {
    let mut rng = stream_rng(seed, 0);
    let (a, b) = (Normal::new(1.0, 0.5).unwrap(), Normal::new(-2.0, 0.3).unwrap());
    let values: Vec<Vec<f64>> = (0..n).map(|_| vec![a.sample(&mut rng), b.sample(&mut rng)]).collect();
    TermTable {
        columns: vec!["a_u".into(), "b_u".into()],
        values,
        presence: vec![vec![true, true]; n],
        targets: vec!["d1_u".into(); n],
    }
}

#[test]
fn fitted_means_match_the_generating_gaussians() {
    let n = 400;
    let table = gaussian_table(n, 3);
    let bn = fit_parameters(&Dag::empty(table.columns.clone()), &table).unwrap();
    for (j, (mu, sd)) in [(1.0, 0.5), (-2.0, 0.3)].into_iter().enumerate() {
        let sample_mean = table.values.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let fitted = bn.nodes[j].marginal.mean;
        assert!((fitted - sample_mean).abs() < 1e-12);
        assert!((fitted - mu).abs() < 3.0 * sd / (n as f64).sqrt());
    }
}

fn presence_table(n: usize, seed: u64) -> TermTable {
    let mut rng = stream_rng(seed, 0);
    let mut presence = Vec::new();
    let mut values = Vec::new();
    for _ in 0..n {
        let a = rng.gen_bool(0.7);
        let b = if rng.gen_bool(0.9) { a } else { !a };
        let c = rng.gen_bool(0.4);
        let row = vec![a, b, c, true];
        let vals = vec![
            if a { 0.5 + 0.1 * rng.gen::<f64>() } else { 0.0 },
            if b { -0.03 + 0.01 * rng.gen::<f64>() } else { 0.0 },
            if c { 2.0 + rng.gen::<f64>() } else { 0.0 },
            1.0,
        ];
        presence.push(row);
        values.push(vals);
    }
    TermTable {
        columns: vec!["u_u".into(), "u*v_u".into(), "v_u".into(), "d1_u_u".into()],
        values,
        presence,
        targets: vec!["d1_u".into(); n],
    }
}

#[test]
fn refitting_on_sampled_rows_recovers_parameters() {
    let table = presence_table(1000, 8);
    let dag = learn_structure(&table, 3).unwrap();
    let bn = fit_parameters(&dag, &table).unwrap();
    let mut rng = stream_rng(9, 0);
    let draws: Vec<(Vec<bool>, Vec<f64>)> = (0..1000).map(|_| bn.draw(&mut rng)).collect();
    let resampled = TermTable {
        columns: table.columns.clone(),
        values: draws.iter().map(|d| d.1.clone()).collect(),
        presence: draws.iter().map(|d| d.0.clone()).collect(),
        targets: table.targets.clone(),
    };
    let refit = fit_parameters(&dag, &resampled).unwrap();
    for (a, b) in bn.nodes.iter().zip(&refit.nodes) {
        let (x, y) = (&a.marginal, &b.marginal);
        assert!((y.presence / x.presence - 1.0).abs() < 0.1, "{}: presence {} vs {}", a.name, x.presence, y.presence);
        assert!((y.mean / x.mean - 1.0).abs() < 0.1, "{}: mean {} vs {}", a.name, x.mean, y.mean);
    }
}

#[test]
fn summary_intervals_contain_the_sample_means() {
    let table = presence_table(500, 4);
    let bn = fit_parameters(&learn_structure(&table, 3).unwrap(), &table).unwrap();
    let anchors: BTreeMap<String, String> = [("u".to_string(), "d1_u".to_string())].into();
    let samples = sample_systems(&bn, &anchors, 50, 2, Execution::Parallel).unwrap();
    for s in summarize(&samples).unwrap() {
        let vals: Vec<f64> = samples
            .iter()
            .filter_map(|x| x.equations.get(&s.variable).and_then(|e| e.coefficient(&s.key)))
            .collect();
        assert_eq!(vals.len(), s.count);
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        if let (Some(m), Some(h)) = (s.mean, s.half_width) {
            assert!((mean - m).abs() <= h + 1e-12, "{}: {mean} vs {m} ± {h}", s.key);
        }
    }
}

/// Roots of `f` on [lo, hi] by scanning for sign changes and bisecting.
fn roots(f: impl Fn(f64) -> f64, lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    let h = (hi - lo) / steps as f64;
    let mut out = Vec::new();
    for i in 0..steps {
        let (mut a, mut b) = (lo + i as f64 * h, lo + (i + 1) as f64 * h);
        if f(a).signum() == f(b).signum() {
            continue;
        }
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if f(a).signum() == f(m).signum() {
                a = m;
            } else {
                b = m;
            }
        }
        out.push(0.5 * (a + b));
    }
    out
}

#[test]
fn implicit_case_a_system_matches_bisection() {
    let e1 = eq(&[
        ("d1_u", 1.0),
        ("u", 0.5598),
        ("u*v", -0.028),
        ("d1_v", 0.0941),
        ("d1_u*v", 0.0019),
        ("d1_u*d1_v", 0.0023),
        ("const", -0.1073),
    ]);
    let e2 = eq(&[
        ("d1_v", 1.0),
        ("v", -0.8278),
        ("u*v", 0.0256),
        ("d1_u", 0.0037),
        ("d1_u*d1_v", -0.0021),
        ("const", 0.0998),
    ]);
    let vars = vec!["u".to_string(), "v".to_string()];
    let sys = resolve_equations(&vars, &[e1, e2], "t").unwrap();
    let (u, v) = (30.0, 4.0);
    // The second equation is linear in v' once u' is fixed.
    let dv = |du: f64| (-0.8278 * v + 0.0256 * u * v + 0.0037 * du + 0.0998) / (1.0 + 0.0021 * du);
    let residual = |du: f64| {
        let w = dv(du);
        du - (0.5598 * u - 0.028 * u * v + 0.0941 * w + 0.0019 * du * v + 0.0023 * du * w - 0.1073)
    };
    let explicit_base = 0.5598 * u - 0.028 * u * v;
    let du = roots(residual, -400.0, 400.0, 80_000)
        .into_iter()
        .min_by(|a, b| (a - explicit_base).abs().total_cmp(&(b - explicit_base).abs()))
        .unwrap();
    let (rates, _) = sys.rates(0.0, &[u, v], &[explicit_base, 0.0]).unwrap();
    assert!((rates[0] - du).abs() < 1e-8, "{} vs {du}", rates[0]);
    assert!((rates[1] - dv(du)).abs() < 1e-8, "{} vs {}", rates[1], dv(du));
}
