//! Memetic multi-objective search over equation structures.
//!
//! Individuals are evaluated by sparse regression (the local optimisation
//! step) and ranked by non-dominated sorting on (quality, complexity),
//! where quality is the residual norm of the fit and complexity the
//! number of retained terms. An archive keeps the best equations for every
//! complexity value seen so far.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::DataSet;
use crate::error::{Error, Result};
use crate::parallel::{map_indexed, mix_seed, stream_rng, Execution};
use crate::regression::{fit_equation, FitResult, RegressionSettings};
use crate::tokens::{explicit_targets, Equation, Term, Token, TokenConfig};

const MAX_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvoConfig {
    pub population: usize,
    pub generations: usize,
    pub min_terms: usize,
    pub max_terms: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    /// Probabilities of token replacement, term addition and term removal.
    pub mutation_weights: [f64; 3],
    /// Archive size per complexity value.
    pub elite: usize,
    pub seed: u64,
    pub tokens: TokenConfig,
    pub regression: RegressionSettings,
    #[serde(skip)]
    pub execution: Execution,
}

impl EvoConfig {
    pub fn new(tokens: TokenConfig) -> EvoConfig {
        EvoConfig {
            population: 64,
            generations: 100,
            min_terms: 2,
            max_terms: 5,
            crossover_rate: 0.8,
            mutation_rate: 0.3,
            mutation_weights: [0.5, 0.25, 0.25],
            elite: 4,
            seed: 0,
            tokens,
            regression: RegressionSettings::default(),
            execution: Execution::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_terms < 2 || self.min_terms > self.max_terms {
            return Err(Error::Config(format!(
                "need 2 <= evo.min_terms <= evo.max_terms, got {}..{}",
                self.min_terms, self.max_terms
            )));
        }
        if self.population == 0 {
            return Err(Error::Config("evo.population must be positive".into()));
        }
        for (name, p) in [("crossover_rate", self.crossover_rate), ("mutation_rate", self.mutation_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("evo.{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.tokens.max_factors == 0 {
            return Err(Error::Config("tokens.max_factors must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objectives {
    pub quality: f64,
    pub complexity: usize,
}

impl Objectives {
    pub fn dominates(&self, other: &Objectives) -> bool {
        self.quality <= other.quality
            && self.complexity <= other.complexity
            && (self.quality < other.quality || self.complexity < other.complexity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Individual {
    pub equation: Equation,
    pub fit: Option<FitResult>,
    /// Retained terms with fitted coefficients.
    pub fitted: Option<Equation>,
    pub objectives: Option<Objectives>,
}

impl Individual {
    pub fn new(equation: Equation) -> Individual {
        Individual {
            equation,
            fit: None,
            fitted: None,
            objectives: None,
        }
    }

    fn cleared(&self) -> Individual {
        Individual::new(self.equation.clone())
    }

    /// Sorted term keys of the structure; used to detect duplicates.
    pub fn signature(&self) -> Vec<String> {
        let mut k = self.equation.keys();
        k.sort();
        k
    }

    fn fitted_signature(&self) -> (Vec<String>, String) {
        let eq = self.fitted.as_ref().unwrap_or(&self.equation);
        let mut k = eq.keys();
        k.sort();
        (k, eq.target().key())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParetoFront {
    pub levels: Vec<Vec<Individual>>,
}

impl ParetoFront {
    pub fn first(&self) -> &[Individual] {
        self.levels.first().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Non-dominated levels of a set of objective vectors, as index sets.
pub fn pareto_levels(objs: &[Objectives]) -> Vec<Vec<usize>> {
    let n = objs.len();
    let mut dominated_by = vec![0usize; n];
    let mut dominates: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            if objs[i].dominates(&objs[j]) {
                dominates[i].push(j);
                dominated_by[j] += 1;
            } else if objs[j].dominates(&objs[i]) {
                dominates[j].push(i);
                dominated_by[i] += 1;
            }
        }
    }
    let mut levels = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| dominated_by[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominates[i] {
                dominated_by[j] -= 1;
                if dominated_by[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        levels.push(current);
        current = next;
    }
    levels
}

/// Splits evaluated individuals into non-dominated levels. Within a level
/// members are ordered by (complexity, quality).
pub fn pareto_sort(population: Vec<Individual>) -> Result<ParetoFront> {
    let objs = population
        .iter()
        .map(|ind| {
            ind.objectives
                .ok_or_else(|| Error::Contract("pareto_sort needs evaluated individuals".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    let levels = pareto_levels(&objs);
    let mut slots: Vec<Option<Individual>> = population.into_iter().map(Some).collect();
    let levels = levels
        .into_iter()
        .map(|idx| {
            let mut level: Vec<Individual> = idx.into_iter().map(|i| slots[i].take().unwrap()).collect();
            level.sort_by(|a, b| {
                let (oa, ob) = (a.objectives.unwrap(), b.objectives.unwrap());
                oa.complexity
                    .cmp(&ob.complexity)
                    .then(oa.quality.total_cmp(&ob.quality))
            });
            level
        })
        .collect();
    Ok(ParetoFront { levels })
}

/// Crowding distance of each member of one level (both objectives scaled
/// to their range; boundary points get infinity).
pub fn crowding(objs: &[Objectives]) -> Vec<f64> {
    let n = objs.len();
    let mut dist = vec![0.0; n];
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    let keys: [fn(&Objectives) -> f64; 2] = [|o| o.quality, |o| o.complexity as f64];
    for key in keys {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| key(&objs[a]).total_cmp(&key(&objs[b])));
        let lo = key(&objs[idx[0]]);
        let hi = key(&objs[idx[n - 1]]);
        dist[idx[0]] = f64::INFINITY;
        dist[idx[n - 1]] = f64::INFINITY;
        let range = hi - lo;
        if !(range > 0.0) || !range.is_finite() {
            continue;
        }
        for w in 1..n - 1 {
            let gap = key(&objs[idx[w + 1]]) - key(&objs[idx[w - 1]]);
            dist[idx[w]] += gap / range;
        }
    }
    dist
}

fn random_term<R: Rng + ?Sized>(cfg: &TokenConfig, universe: &[Token], rng: &mut R) -> Term {
    loop {
        let n = rng.gen_range(1..=cfg.max_factors);
        let tokens: Vec<Token> = (0..n).map(|_| universe.choose(rng).unwrap().clone()).collect();
        let term = Term::of(tokens);
        if cfg.validate_term(&term).is_ok() {
            return term;
        }
    }
}

fn admissible_targets(terms: &[Term], variable: &str) -> Vec<usize> {
    explicit_targets(terms, variable)
}

/// Draws an equation with a uniform term count in `[min_terms, max_terms]`
/// that is explicit in a term carrying a derivative of `variable`.
pub fn random_equation<R: Rng + ?Sized>(cfg: &EvoConfig, variable: &str, rng: &mut R) -> Result<Equation> {
    let universe = cfg.tokens.universe();
    for _ in 0..MAX_ATTEMPTS {
        let count = rng.gen_range(cfg.min_terms..=cfg.max_terms);
        let mut keys = BTreeSet::new();
        let mut terms = Vec::with_capacity(count);
        let mut guard = 0;
        while terms.len() < count && guard < 50 * count {
            guard += 1;
            let t = random_term(&cfg.tokens, &universe, rng);
            if keys.insert(t.key()) {
                terms.push(t);
            }
        }
        if terms.len() < count {
            continue;
        }
        let targets = admissible_targets(&terms, variable);
        if targets.is_empty() {
            continue;
        }
        let target = *targets.choose(rng).unwrap();
        if let Ok(eq) = Equation::new(terms, target) {
            return Ok(eq);
        }
    }
    Err(Error::Config(format!(
        "could not build a valid equation for `{variable}` in {MAX_ATTEMPTS} attempts"
    )))
}

fn rebuild<R: Rng + ?Sized>(terms: Vec<Term>, target_key: &str, variable: &str, rng: &mut R) -> Option<Equation> {
    let admissible = admissible_targets(&terms, variable);
    let target = match terms.iter().position(|t| t.key() == target_key) {
        Some(i) if admissible.contains(&i) => i,
        _ => *admissible.choose(rng)?,
    };
    Equation::new(terms, target).ok()
}

/// Exchanges the non-target terms at `from_a` (of `a`) and `from_b` (of `b`)
/// pairwise. An incoming term whose key the receiver already holds is
/// dropped and the receiver keeps its own term in that slot.
pub fn exchange_terms(
    a: &Equation,
    b: &Equation,
    from_a: &[usize],
    from_b: &[usize],
) -> (Equation, Equation) {
    let child = |recv: &Equation, give: &Equation, out: &[usize], inc: &[usize]| -> Equation {
        let mut terms: Vec<Option<Term>> = recv.terms().iter().cloned().map(Some).collect();
        let mut keys: BTreeSet<String> = recv.keys().into_iter().collect();
        for (&o, &i) in out.iter().zip(inc) {
            let incoming = &give.terms()[i];
            let key = incoming.key();
            let outgoing = terms[o].as_ref().unwrap().key();
            if key == outgoing {
                continue;
            }
            if keys.contains(&key) {
                continue;
            }
            keys.remove(&outgoing);
            keys.insert(key);
            terms[o] = Some(Term::new(incoming.tokens().to_vec(), 1.0));
        }
        let target_key = recv.target().key();
        let terms: Vec<Term> = terms.into_iter().flatten().collect();
        let target = terms.iter().position(|t| t.key() == target_key).unwrap();
        Equation::new(terms, target).unwrap_or_else(|_| recv.clone())
    };
    (child(a, b, from_a, from_b), child(b, a, from_b, from_a))
}

/// Swaps a uniformly sized random subset of non-target terms.
pub fn crossover<R: Rng + ?Sized>(
    a: &Individual,
    b: &Individual,
    rng: &mut R,
) -> (Individual, Individual) {
    let na: Vec<usize> = (0..a.equation.complexity())
        .filter(|&i| i != a.equation.target_index())
        .collect();
    let nb: Vec<usize> = (0..b.equation.complexity())
        .filter(|&i| i != b.equation.target_index())
        .collect();
    let k = na.len().min(nb.len());
    if k == 0 {
        return (a.cleared(), b.cleared());
    }
    let swaps = rng.gen_range(0..=k);
    let from_a: Vec<usize> = na.choose_multiple(rng, swaps).copied().collect();
    let from_b: Vec<usize> = nb.choose_multiple(rng, swaps).copied().collect();
    let (ca, cb) = exchange_terms(&a.equation, &b.equation, &from_a, &from_b);
    (Individual::new(ca), Individual::new(cb))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MutationKind {
    ReplaceToken,
    AddTerm,
    RemoveTerm,
}

/// Applies one structural edit and clears the fit.
pub fn mutate<R: Rng + ?Sized>(ind: &Individual, cfg: &EvoConfig, variable: &str, rng: &mut R) -> Individual {
    mutate_traced(ind, cfg, variable, rng).0
}

pub fn mutate_traced<R: Rng + ?Sized>(
    ind: &Individual,
    cfg: &EvoConfig,
    variable: &str,
    rng: &mut R,
) -> (Individual, Option<MutationKind>) {
    let eq = &ind.equation;
    let n = eq.complexity();
    let kinds = [
        (MutationKind::ReplaceToken, cfg.mutation_weights[0], true),
        (MutationKind::AddTerm, cfg.mutation_weights[1], n < cfg.max_terms),
        (MutationKind::RemoveTerm, cfg.mutation_weights[2], n > cfg.min_terms && n > 1),
    ];
    let total: f64 = kinds.iter().filter(|k| k.2).map(|k| k.1).sum();
    let mut pick = rng.gen::<f64>() * total;
    let mut kind = MutationKind::ReplaceToken;
    for (k, w, ok) in kinds {
        if !ok {
            continue;
        }
        kind = k;
        if pick < w {
            break;
        }
        pick -= w;
    }
    let universe = cfg.tokens.universe();
    let target_key = eq.target().key();
    for _ in 0..MAX_ATTEMPTS {
        let mut terms: Vec<Term> = eq.terms().iter().map(|t| Term::new(t.tokens().to_vec(), 1.0)).collect();
        let keys: BTreeSet<String> = eq.keys().into_iter().collect();
        match kind {
            MutationKind::ReplaceToken => {
                let ti = rng.gen_range(0..n);
                let mut tokens = terms[ti].tokens().to_vec();
                let pos = rng.gen_range(0..tokens.len());
                tokens[pos] = universe.choose(rng).unwrap().clone();
                let new = Term::of(tokens);
                if cfg.tokens.validate_term(&new).is_err() || keys.contains(&new.key()) {
                    continue;
                }
                terms[ti] = new;
            }
            MutationKind::AddTerm => {
                let new = random_term(&cfg.tokens, &universe, rng);
                if keys.contains(&new.key()) {
                    continue;
                }
                terms.push(new);
            }
            MutationKind::RemoveTerm => {
                let choices: Vec<usize> = (0..n).filter(|&i| i != eq.target_index()).collect();
                let Some(&ri) = choices.choose(rng) else { break };
                terms.remove(ri);
            }
        }
        if let Some(new) = rebuild(terms, &target_key, variable, rng) {
            return (Individual::new(new), Some(kind));
        }
    }
    (ind.cleared(), None)
}

/// Progress record: best quality per complexity after each generation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub best_by_complexity: Vec<BTreeMap<usize, f64>>,
    pub evaluations: usize,
    pub failures: usize,
}

fn evaluate(
    pop: Vec<Individual>,
    data: &DataSet,
    cfg: &EvoConfig,
    variable: &str,
    stream: u64,
) -> Vec<Individual> {
    let settings = cfg.regression;
    map_indexed(pop.len(), cfg.execution, |i| {
        let ind = &pop[i];
        if ind.objectives.is_some() {
            return ind.clone();
        }
        let mut rng = stream_rng(stream, i as u64);
        match fit_equation(&ind.equation, data, &settings, Some(variable), &mut rng) {
            // Everything pruned: `du/dt = 0` is not an equation.
            Ok(fit) if fit.retained() < 2 => failed(ind),
            Ok(fit) => {
                let target = ind.equation.position(&fit.target).unwrap();
                let equation = Equation::new(ind.equation.terms().to_vec(), target).unwrap();
                match fit.equation(&equation) {
                    Ok(fitted) if fitted.common_factor().is_some() => failed(ind),
                    Ok(fitted) => Individual {
                        objectives: Some(Objectives {
                            quality: if fit.residual_norm.is_finite() {
                                fit.residual_norm
                            } else {
                                f64::INFINITY
                            },
                            complexity: fit.retained(),
                        }),
                        equation,
                        fitted: Some(fitted),
                        fit: Some(fit),
                    },
                    Err(_) => failed(ind),
                }
            }
            Err(_) => failed(ind),
        }
    })
}

fn failed(ind: &Individual) -> Individual {
    Individual {
        equation: ind.equation.clone(),
        fit: None,
        fitted: None,
        objectives: Some(Objectives {
            quality: f64::INFINITY,
            complexity: ind.equation.complexity(),
        }),
    }
}

/// Rank and crowding of every member, for tournament selection.
fn rank_and_crowding(pop: &[Individual]) -> (Vec<usize>, Vec<f64>) {
    let objs: Vec<Objectives> = pop.iter().map(|i| i.objectives.unwrap()).collect();
    let mut rank = vec![0; pop.len()];
    let mut crowd = vec![0.0; pop.len()];
    for (r, level) in pareto_levels(&objs).into_iter().enumerate() {
        let lo: Vec<Objectives> = level.iter().map(|&i| objs[i]).collect();
        for (&i, d) in level.iter().zip(crowding(&lo)) {
            rank[i] = r;
            crowd[i] = d;
        }
    }
    (rank, crowd)
}

fn tournament(rank: &[usize], crowd: &[f64], rng: &mut impl Rng) -> usize {
    let a = rng.gen_range(0..rank.len());
    let b = rng.gen_range(0..rank.len());
    if rank[b] < rank[a] || (rank[b] == rank[a] && crowd[b] > crowd[a]) {
        b
    } else {
        a
    }
}

/// Keeps `size` members: whole levels first, the last level by crowding.
/// Structural duplicates are used only when unique members run out.
fn environmental_selection(pool: Vec<Individual>, size: usize) -> Vec<Individual> {
    let mut seen = BTreeSet::new();
    let (unique, dups): (Vec<_>, Vec<_>) = pool
        .into_iter()
        .partition(|ind| seen.insert(ind.signature()));
    let mut out = truncate_by_rank(unique, size);
    if out.len() < size {
        let rest = truncate_by_rank(dups, size - out.len());
        out.extend(rest);
    }
    out
}

fn truncate_by_rank(pool: Vec<Individual>, size: usize) -> Vec<Individual> {
    if pool.len() <= size {
        return pool;
    }
    let objs: Vec<Objectives> = pool.iter().map(|i| i.objectives.unwrap()).collect();
    let mut chosen = Vec::with_capacity(size);
    for level in pareto_levels(&objs) {
        if chosen.len() + level.len() <= size {
            chosen.extend(level);
            continue;
        }
        let lo: Vec<Objectives> = level.iter().map(|&i| objs[i]).collect();
        let d = crowding(&lo);
        let mut order: Vec<usize> = (0..level.len()).collect();
        order.sort_by(|&a, &b| d[b].total_cmp(&d[a]).then(a.cmp(&b)));
        chosen.extend(order.into_iter().take(size - chosen.len()).map(|k| level[k]));
        break;
    }
    chosen.sort_unstable();
    let mut slots: Vec<Option<Individual>> = pool.into_iter().map(Some).collect();
    chosen.into_iter().map(|i| slots[i].take().unwrap()).collect()
}

#[derive(Debug, Default)]
struct Archive {
    by_complexity: BTreeMap<usize, Vec<Individual>>,
}

impl Archive {
    fn offer(&mut self, ind: &Individual, keep: usize) {
        let Some(o) = ind.objectives else { return };
        if !o.quality.is_finite() || keep == 0 {
            return;
        }
        let slot = self.by_complexity.entry(o.complexity).or_default();
        let sig = ind.fitted_signature();
        if slot.iter().any(|x| x.fitted_signature() == sig) {
            return;
        }
        slot.push(ind.clone());
        slot.sort_by(|a, b| {
            a.objectives
                .unwrap()
                .quality
                .total_cmp(&b.objectives.unwrap().quality)
        });
        slot.truncate(keep);
    }

    fn best(&self) -> BTreeMap<usize, f64> {
        self.by_complexity
            .iter()
            .filter_map(|(c, v)| v.first().map(|i| (*c, i.objectives.unwrap().quality)))
            .collect()
    }

    fn members(&self) -> impl Iterator<Item = &Individual> {
        self.by_complexity.values().flatten()
    }
}

/// Runs the search for the equation of `variable`.
pub fn evolve(data: &DataSet, cfg: &EvoConfig, variable: &str) -> Result<ParetoFront> {
    evolve_with_history(data, cfg, variable).map(|(f, _)| f)
}

pub fn evolve_with_history(data: &DataSet, cfg: &EvoConfig, variable: &str) -> Result<(ParetoFront, History)> {
    cfg.validate()?;
    if data.channel(variable).is_none() {
        return Err(Error::MissingChannel(variable.to_string()));
    }
    let var_tag = variable.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, var_tag]));
    let stream = |g: usize| mix_seed(&[cfg.seed, var_tag, g as u64 + 1]);

    let initial = (0..cfg.population)
        .map(|_| random_equation(cfg, variable, &mut rng).map(Individual::new))
        .collect::<Result<Vec<_>>>()?;
    let mut pop = evaluate(initial, data, cfg, variable, stream(0));
    let mut history = History {
        evaluations: pop.len(),
        ..History::default()
    };
    let mut archive = Archive::default();
    for ind in &pop {
        archive.offer(ind, cfg.elite);
    }
    history.failures += pop.iter().filter(|i| i.fit.is_none()).count();
    history.best_by_complexity.push(archive.best());

    for g in 1..=cfg.generations {
        let (rank, crowd) = rank_and_crowding(&pop);
        let mut offspring = Vec::with_capacity(cfg.population);
        while offspring.len() < cfg.population {
            let a = &pop[tournament(&rank, &crowd, &mut rng)];
            let b = &pop[tournament(&rank, &crowd, &mut rng)];
            let (mut c1, mut c2) = if rng.gen::<f64>() < cfg.crossover_rate {
                crossover(a, b, &mut rng)
            } else {
                (a.cleared(), b.cleared())
            };
            if rng.gen::<f64>() < cfg.mutation_rate {
                c1 = mutate(&c1, cfg, variable, &mut rng);
            }
            if rng.gen::<f64>() < cfg.mutation_rate {
                c2 = mutate(&c2, cfg, variable, &mut rng);
            }
            offspring.push(c1);
            if offspring.len() < cfg.population {
                offspring.push(c2);
            }
        }
        let offspring = evaluate(offspring, data, cfg, variable, stream(g));
        history.evaluations += offspring.len();
        history.failures += offspring.iter().filter(|i| i.fit.is_none()).count();
        for ind in &offspring {
            archive.offer(ind, cfg.elite);
        }
        history.best_by_complexity.push(archive.best());
        let mut pool = pop;
        pool.extend(offspring);
        pop = environmental_selection(pool, cfg.population);
    }

    let mut seen = BTreeSet::new();
    let mut members = Vec::new();
    for ind in archive.members().chain(pop.iter()) {
        if seen.insert(ind.fitted_signature()) {
            members.push(ind.clone());
        }
    }
    if members.is_empty() {
        // Every fit failed; report the population as is.
        members = pop;
    } else {
        members.retain(|i| i.fit.is_some());
    }
    Ok((pareto_sort(members)?, history))
}

/// One level-0 member in exported form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontMember {
    pub variable: String,
    pub target: String,
    pub terms: Vec<crate::tokens::KeyCoefficient>,
    pub text: String,
    pub quality: f64,
    pub complexity: usize,
}

pub fn front_to_json(front: &ParetoFront, variable: &str) -> Vec<FrontMember> {
    front
        .first()
        .iter()
        .filter_map(|ind| {
            let eq = ind.fitted.as_ref()?;
            let o = ind.objectives?;
            let j = eq.to_json(variable);
            Some(FrontMember {
                variable: variable.to_string(),
                target: j.target,
                terms: j.terms,
                text: j.text,
                quality: o.quality,
                complexity: o.complexity,
            })
        })
        .collect()
}

impl FrontMember {
    pub fn equation(&self) -> Result<Equation> {
        Equation::from_json(&crate::tokens::EquationJson {
            variable: self.variable.clone(),
            target: self.target.clone(),
            terms: self.terms.clone(),
            text: self.text.clone(),
        })
    }
}
