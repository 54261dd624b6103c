//! Bayesian network over term variables.
//!
//! Every node is a term of one equation of the system. Its state is a
//! presence flag plus, when present, a coefficient. The graph is learned on
//! the presence flags alone; each node then gets a Bernoulli presence model
//! and a Gaussian value model per configuration of its parents' presence.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ensemble::{split_pooled, TermTable};
use crate::error::{Error, Result};
use crate::parallel::{map_indexed, stream_rng, Execution};
use crate::tokens::{Equation, Term};

pub const VARIANCE_FLOOR: f64 = 1e-12;
pub const MIN_ROWS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dag {
    pub nodes: Vec<String>,
    /// Parent indices of every node, sorted.
    pub parents: Vec<Vec<usize>>,
}

impl Dag {
    pub fn empty(nodes: Vec<String>) -> Dag {
        let n = nodes.len();
        Dag {
            nodes,
            parents: vec![Vec::new(); n],
        }
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (child, ps) in self.parents.iter().enumerate() {
            for &p in ps {
                out.push((p, child));
            }
        }
        out.sort_unstable();
        out
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.parents[to].contains(&from)
    }

    /// Kahn's algorithm; `None` when the graph has a cycle. Ties resolve to
    /// the lowest index so the order is deterministic.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let n = self.nodes.len();
        let mut indeg: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let mut children = vec![Vec::new(); n];
        for (c, ps) in self.parents.iter().enumerate() {
            for &p in ps {
                children[p].push(c);
            }
        }
        let mut ready: std::collections::BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &c in &children[i] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        (order.len() == n).then_some(order)
    }

    /// Whether `to` is reachable from `from` along directed edges.
    fn reaches(&self, from: usize, to: usize) -> bool {
        let n = self.nodes.len();
        let mut children = vec![Vec::new(); n];
        for (c, ps) in self.parents.iter().enumerate() {
            for &p in ps {
                children[p].push(c);
            }
        }
        let mut seen = vec![false; n];
        let mut stack = vec![from];
        while let Some(i) = stack.pop() {
            if i == to {
                return true;
            }
            if std::mem::replace(&mut seen[i], true) {
                continue;
            }
            stack.extend(children[i].iter().copied());
        }
        false
    }

    /// Connected components of the undirected skeleton.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.nodes.len();
        let mut label: Vec<usize> = (0..n).collect();
        fn find(l: &mut [usize], i: usize) -> usize {
            if l[i] != i {
                let r = find(l, l[i]);
                l[i] = r;
            }
            l[i]
        }
        for (p, c) in self.edges() {
            let (a, b) = (find(&mut label, p), find(&mut label, c));
            label[a.max(b)] = a.min(b);
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for i in 0..n {
            let r = find(&mut label, i);
            groups.entry(r).or_default().push(i);
        }
        groups.into_values().collect()
    }

    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph terms {\n");
        for n in &self.nodes {
            let _ = writeln!(s, "  \"{n}\";");
        }
        for (p, c) in self.edges() {
            let _ = writeln!(s, "  \"{}\" -> \"{}\";", self.nodes[p], self.nodes[c]);
        }
        s.push_str("}\n");
        s
    }
}

/// Index of the presence configuration of `parents` in `row`.
fn config_index(parents: &[usize], row: &[bool]) -> usize {
    parents
        .iter()
        .enumerate()
        .fold(0, |acc, (b, &p)| acc | ((row[p] as usize) << b))
}

/// BIC contribution of one node given its parents.
fn family_score(node: usize, parents: &[usize], presence: &[Vec<bool>]) -> f64 {
    let q = 1usize << parents.len();
    let mut counts = vec![[0usize; 2]; q];
    for row in presence {
        counts[config_index(parents, row)][row[node] as usize] += 1;
    }
    let mut ll = 0.0;
    for c in &counts {
        let total = (c[0] + c[1]) as f64;
        for &k in c {
            if k > 0 {
                ll += k as f64 * (k as f64 / total).ln();
            }
        }
    }
    ll - 0.5 * (presence.len() as f64).ln() * q as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Move {
    Add(usize, usize),
    Remove(usize, usize),
    Reverse(usize, usize),
}

/// Greedy hill climbing on BIC over edge additions, removals and
/// reversals. The first best move in (parent, child) index order wins.
pub fn learn_structure(table: &TermTable, max_parents: usize) -> Result<Dag> {
    if table.rows() < MIN_ROWS {
        return Err(Error::InsufficientData(format!(
            "structure learning needs at least {MIN_ROWS} rows, got {}",
            table.rows()
        )));
    }
    if table.columns.len() < 2 {
        return Err(Error::InsufficientData("structure learning needs at least 2 columns".into()));
    }
    let n = table.columns.len();
    let fs = |node: usize, ps: &[usize]| family_score(node, ps, &table.presence);
    let mut dag = Dag::empty(table.columns.clone());
    let mut score: Vec<f64> = (0..n).map(|i| fs(i, &[])).collect();
    let with = |ps: &[usize], extra: usize| {
        let mut v = ps.to_vec();
        v.push(extra);
        v.sort_unstable();
        v
    };
    let without = |ps: &[usize], gone: usize| ps.iter().copied().filter(|&p| p != gone).collect::<Vec<_>>();
    loop {
        let mut best: Option<(f64, Move)> = None;
        let mut consider = |delta: f64, m: Move| {
            if delta > 1e-9 && best.is_none_or(|(d, _)| delta > d) {
                best = Some((delta, m));
            }
        };
        for p in 0..n {
            for c in 0..n {
                if p == c {
                    continue;
                }
                if dag.has_edge(p, c) {
                    let rest = without(&dag.parents[c], p);
                    consider(fs(c, &rest) - score[c], Move::Remove(p, c));
                    if dag.parents[p].len() < max_parents {
                        let mut trial = dag.clone();
                        trial.parents[c] = rest.clone();
                        if !trial.reaches(p, c) {
                            let np = with(&dag.parents[p], c);
                            let delta = fs(c, &rest) - score[c] + fs(p, &np) - score[p];
                            consider(delta, Move::Reverse(p, c));
                        }
                    }
                } else if !dag.has_edge(c, p) && dag.parents[c].len() < max_parents && !dag.reaches(c, p) {
                    let np = with(&dag.parents[c], p);
                    consider(fs(c, &np) - score[c], Move::Add(p, c));
                }
            }
        }
        let Some((_, m)) = best else { break };
        match m {
            Move::Add(p, c) => {
                dag.parents[c] = with(&dag.parents[c], p);
                score[c] = fs(c, &dag.parents[c]);
            }
            Move::Remove(p, c) => {
                dag.parents[c] = without(&dag.parents[c], p);
                score[c] = fs(c, &dag.parents[c]);
            }
            Move::Reverse(p, c) => {
                dag.parents[c] = without(&dag.parents[c], p);
                dag.parents[p] = with(&dag.parents[p], c);
                score[c] = fs(c, &dag.parents[c]);
                score[p] = fs(p, &dag.parents[p]);
            }
        }
    }
    Ok(dag)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalModel {
    /// Rows in this configuration.
    pub count: usize,
    /// Rows in this configuration where the node is present.
    pub present: usize,
    pub presence: f64,
    pub mean: f64,
    pub variance: f64,
}

impl LocalModel {
    fn fit(rows: impl Iterator<Item = (bool, f64)>) -> LocalModel {
        let mut count = 0;
        let mut vals = Vec::new();
        for (p, v) in rows {
            count += 1;
            if p {
                vals.push(v);
            }
        }
        let present = vals.len();
        let mean = if present > 0 { vals.iter().sum::<f64>() / present as f64 } else { 0.0 };
        let var = if present > 0 {
            vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / present as f64
        } else {
            0.0
        };
        LocalModel {
            count,
            present,
            presence: if count > 0 { present as f64 / count as f64 } else { 0.0 },
            mean,
            variance: var.max(VARIANCE_FLOOR),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeModel {
    pub name: String,
    pub parents: Vec<usize>,
    /// One entry per parent presence configuration (bit b = parent b).
    pub configs: Vec<LocalModel>,
    pub marginal: LocalModel,
    /// Value models keyed by the full presence pattern of the node's own
    /// equation; preferred over `configs` when the pattern was observed.
    pub patterns: Vec<PatternModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternModel {
    /// Present nodes of the equation, in node order.
    pub present: Vec<String>,
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
}

impl NodeModel {
    /// The model used for a configuration; unseen configurations use the
    /// marginal, and so does the value model when no present row was seen.
    pub fn local(&self, config: usize) -> (f64, f64, f64) {
        let c = &self.configs[config];
        let presence = if c.count > 0 { c.presence } else { self.marginal.presence };
        let (mean, var) = if c.present > 0 {
            (c.mean, c.variance)
        } else {
            (self.marginal.mean, self.marginal.variance)
        };
        (presence, mean, var)
    }

    fn pattern(&self, present: &[String]) -> Option<&PatternModel> {
        self.patterns.iter().find(|p| p.present == present)
    }
}

/// Indices of the nodes belonging to the same equation as each node.
fn siblings(nodes: &[String]) -> Vec<Vec<usize>> {
    let var = |n: &String| split_pooled(n).map(|(_, v)| v.to_string());
    nodes
        .iter()
        .map(|a| (0..nodes.len()).filter(|&j| var(&nodes[j]) == var(a)).collect())
        .collect()
}

fn present_names(nodes: &[String], group: &[usize], row: &[bool]) -> Vec<String> {
    group.iter().filter(|&&j| row[j]).map(|&j| nodes[j].clone()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesianNetwork {
    pub dag: Dag,
    pub nodes: Vec<NodeModel>,
}

/// Maximum-likelihood Bernoulli and Gaussian parameters per parent
/// configuration. Variances are floored at [`VARIANCE_FLOOR`].
pub fn fit_parameters(dag: &Dag, table: &TermTable) -> Result<BayesianNetwork> {
    if dag.nodes != table.columns {
        return Err(Error::Contract("graph nodes differ from table columns".into()));
    }
    if dag.topological_order().is_none() {
        return Err(Error::Contract("graph has a cycle".into()));
    }
    let groups = siblings(&dag.nodes);
    let nodes = (0..dag.nodes.len())
        .map(|j| {
            let parents = dag.parents[j].clone();
            let q = 1usize << parents.len();
            let configs = (0..q)
                .map(|cfg| {
                    LocalModel::fit(
                        table
                            .presence
                            .iter()
                            .zip(&table.values)
                            .filter(|(p, _)| config_index(&parents, p) == cfg)
                            .map(|(p, v)| (p[j], v[j])),
                    )
                })
                .collect();
            let marginal = LocalModel::fit(table.presence.iter().zip(&table.values).map(|(p, v)| (p[j], v[j])));
            let mut by_pattern: BTreeMap<Vec<String>, Vec<f64>> = BTreeMap::new();
            for (p, v) in table.presence.iter().zip(&table.values) {
                if p[j] {
                    by_pattern.entry(present_names(&dag.nodes, &groups[j], p)).or_default().push(v[j]);
                }
            }
            let patterns = by_pattern
                .into_iter()
                .map(|(present, vals)| {
                    let m = LocalModel::fit(vals.iter().map(|&x| (true, x)));
                    PatternModel {
                        present,
                        count: vals.len(),
                        mean: m.mean,
                        variance: m.variance,
                    }
                })
                .collect();
            NodeModel {
                name: dag.nodes[j].clone(),
                parents,
                configs,
                marginal,
                patterns,
            }
        })
        .collect();
    Ok(BayesianNetwork { dag: dag.clone(), nodes })
}

impl BayesianNetwork {
    pub fn node(&self, name: &str) -> Option<usize> {
        self.dag.nodes.iter().position(|n| n == name)
    }

    /// One joint draw of (presence, value) for every node: presence in
    /// topological order, then values given the drawn equation patterns.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<bool>, Vec<f64>) {
        let n = self.nodes.len();
        let order = self.dag.topological_order().expect("acyclic by construction");
        let mut present = vec![false; n];
        for &i in &order {
            let node = &self.nodes[i];
            let (p, _, _) = node.local(config_index(&node.parents, &present));
            present[i] = rng.gen::<f64>() < p;
        }
        let groups = siblings(&self.dag.nodes);
        let mut value = vec![0.0; n];
        for &i in &order {
            if !present[i] {
                continue;
            }
            let node = &self.nodes[i];
            let pattern = present_names(&self.dag.nodes, &groups[i], &present);
            let (mean, var) = match node.pattern(&pattern) {
                Some(m) => (m.mean, m.variance),
                None => {
                    let (_, m, v) = node.local(config_index(&node.parents, &present));
                    (m, v)
                }
            };
            value[i] = Normal::new(mean, var.sqrt()).map(|d| d.sample(rng)).unwrap_or(mean);
        }
        (present, value)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let edges: Vec<(String, String)> = self
            .dag
            .edges()
            .into_iter()
            .map(|(p, c)| (self.dag.nodes[p].clone(), self.dag.nodes[c].clone()))
            .collect();
        let doc = serde_json::json!({
            "nodes": self.dag.nodes,
            "edges": edges,
            "parameters": self.nodes,
        });
        let text = serde_json::to_string_pretty(&doc)? + "\n";
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<BayesianNetwork> {
        #[derive(Deserialize)]
        struct Doc {
            nodes: Vec<String>,
            parameters: Vec<NodeModel>,
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: Doc = serde_json::from_str(&text)?;
        if doc.nodes.len() != doc.parameters.len() {
            return Err(Error::Load(format!("{}: node and parameter counts differ", path.display())));
        }
        let dag = Dag {
            nodes: doc.nodes,
            parents: doc.parameters.iter().map(|m| m.parents.clone()).collect(),
        };
        if dag.topological_order().is_none() {
            return Err(Error::Load(format!("{}: graph has a cycle", path.display())));
        }
        Ok(BayesianNetwork {
            dag,
            nodes: doc.parameters,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledSystem {
    pub index: usize,
    /// Equation per state variable, keyed by variable name.
    pub equations: BTreeMap<String, Equation>,
    /// Anchor node per variable.
    pub anchors: BTreeMap<String, String>,
}

/// Draws `n` systems with every anchor present at coefficient 1. Draws that
/// lack an anchor or decode to an invalid equation are rejected; each sample
/// index has a budget of 100 attempts on its own random stream.
pub fn sample_systems(
    bn: &BayesianNetwork,
    anchors: &BTreeMap<String, String>,
    n: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<SampledSystem>> {
    if n == 0 {
        return Err(Error::Config("bn.samples must be at least 1".into()));
    }
    let mut anchor_idx = BTreeMap::new();
    for (var, key) in anchors {
        let name = crate::ensemble::pooled_name(key, var);
        let i = bn
            .node(&name)
            .ok_or_else(|| Error::Config(format!("anchor node `{name}` is not in the network")))?;
        anchor_idx.insert(var.clone(), i);
    }
    let decode = |present: &[bool], value: &[f64]| -> Option<BTreeMap<String, Equation>> {
        let mut out = BTreeMap::new();
        for (var, &ai) in &anchor_idx {
            if !present[ai] {
                return None;
            }
            let mut terms = Vec::new();
            let mut target = 0;
            for (i, name) in bn.dag.nodes.iter().enumerate() {
                let Some((key, v)) = split_pooled(name) else { continue };
                if v != var || !present[i] {
                    continue;
                }
                if i == ai {
                    target = terms.len();
                }
                terms.push(Term::from_key(key, if i == ai { 1.0 } else { value[i] }).ok()?);
            }
            if terms.len() < 2 {
                return None;
            }
            out.insert(var.clone(), Equation::new(terms, target).ok()?);
        }
        Some(out)
    };
    let results = map_indexed(n, exec, |s| {
        let mut rng = stream_rng(seed, s as u64);
        for _ in 0..100 {
            let (present, value) = bn.draw(&mut rng);
            if let Some(equations) = decode(&present, &value) {
                return Some(SampledSystem {
                    index: s,
                    equations,
                    anchors: anchors.clone(),
                });
            }
        }
        None
    });
    let failed = results.iter().filter(|r| r.is_none()).count();
    if failed > 0 {
        let rates: Vec<String> = anchor_idx
            .iter()
            .map(|(v, &i)| format!("{v}: anchor presence {:.3}", bn.nodes[i].marginal.presence))
            .collect();
        return Err(Error::SamplingInfeasible(format!(
            "{failed} of {n} samples exhausted 100 attempts ({})",
            rates.join(", ")
        )));
    }
    Ok(results.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermSummary {
    pub variable: String,
    pub key: String,
    pub presence: f64,
    pub count: usize,
    pub mean: Option<f64>,
    /// 1.96 sample standard deviations; needs two present samples.
    pub half_width: Option<f64>,
}

impl TermSummary {
    pub fn render(&self) -> String {
        match (self.mean, self.half_width) {
            (Some(m), Some(h)) => format!("({m:.4} ± {h:.4})"),
            (Some(m), None) => format!("{m:.4}"),
            _ => "absent".into(),
        }
    }
}

/// Mean and 95% interval of every term over the samples where it appears.
pub fn summarize(samples: &[SampledSystem]) -> Result<Vec<TermSummary>> {
    if samples.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "summary needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let eqs: Vec<(&String, &Equation)> = samples.iter().flat_map(|s| s.equations.iter()).collect();
    Ok(summarize_equations(&eqs, samples.len()))
}

fn summarize_equations(eqs: &[(&String, &Equation)], n: usize) -> Vec<TermSummary> {
    let mut seen: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for (var, eq) in eqs {
        for t in eq.terms() {
            seen.entry(((*var).clone(), t.key())).or_default().push(t.coefficient);
        }
    }
    seen.into_iter()
        .map(|((variable, key), vals)| {
            let k = vals.len();
            let mean = vals.iter().sum::<f64>() / k as f64;
            let half = (k >= 2).then(|| 1.96 * crate::dataio::sample_std(&vals));
            TermSummary {
                variable,
                key,
                presence: k as f64 / n as f64,
                count: k,
                mean: Some(mean),
                half_width: half,
            }
        })
        .collect()
}

/// Sampled equations of one variable sharing the same term set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Structure {
    pub variable: String,
    /// Sorted term keys, anchor included.
    pub keys: Vec<String>,
    pub count: usize,
    pub terms: Vec<TermSummary>,
}

impl Structure {
    pub fn mean(&self, key: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.key == key).and_then(|t| t.mean)
    }
}

/// Groups the sampled equations of every variable by term set, most
/// frequent first (ties by key list).
pub fn structures(samples: &[SampledSystem]) -> Vec<Structure> {
    let mut groups: BTreeMap<(String, Vec<String>), Vec<&Equation>> = BTreeMap::new();
    for s in samples {
        for (var, eq) in &s.equations {
            let mut keys = eq.keys();
            keys.sort();
            groups.entry((var.clone(), keys)).or_default().push(eq);
        }
    }
    let mut out: Vec<Structure> = groups
        .into_iter()
        .map(|((variable, keys), eqs)| {
            let pairs: Vec<(&String, &Equation)> = eqs.iter().map(|e| (&variable, *e)).collect();
            Structure {
                terms: summarize_equations(&pairs, eqs.len()),
                count: eqs.len(),
                variable: variable.clone(),
                keys,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        a.variable
            .cmp(&b.variable)
            .then(b.count.cmp(&a.count))
            .then(a.keys.cmp(&b.keys))
    });
    out
}

/// Summary rendered as one line per equation, terms in key order, e.g.
/// `du/dt = (0.5598 ± 0.0001)*u + ...`.
pub fn render_summary(summary: &[TermSummary], anchors: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (var, anchor) in anchors {
        let lhs = Term::from_key(anchor, 1.0).map(|t| t.display()).unwrap_or_else(|_| anchor.clone());
        let rhs: Vec<String> = summary
            .iter()
            .filter(|s| &s.variable == var && &s.key != anchor)
            .map(|s| {
                let name = Term::from_key(&s.key, 1.0).map(|t| t.display()).unwrap_or_else(|_| s.key.clone());
                format!("{}*{} [{:.0}%]", s.render(), name, 100.0 * s.presence)
            })
            .collect();
        let _ = writeln!(out, "{lhs} = {}", rhs.join(" + "));
    }
    out
}
