//! Aggregation of many discovery runs into term-aligned tables.
//!
//! A [`TermTable`] has one column per canonical term key and one row per
//! equation (or per system, for pooled tables). Absent terms hold an exact
//! zero and a false presence flag.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::DataSet;
use crate::error::{Error, Result};
use crate::evolution::{evolve, front_to_json, EvoConfig, FrontMember};
use crate::parallel::{map_indexed, mix_seed};
use crate::tokens::{Equation, Term, Token};

/// Level-0 members of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFront {
    pub run: usize,
    pub seed: u64,
    pub retried: bool,
    pub members: Vec<FrontMember>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquationEnsemble {
    pub variable: String,
    pub runs: Vec<RunFront>,
    pub skipped: Vec<usize>,
}

impl EquationEnsemble {
    pub fn equations(&self) -> Result<Vec<Equation>> {
        self.runs
            .iter()
            .flat_map(|r| r.members.iter())
            .map(FrontMember::equation)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.runs.iter().map(|r| r.members.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Re-expresses `eq` with the pure first derivative of `variable` as the
/// target when that term is present.
pub fn normalize_target(eq: &Equation, variable: &str) -> Equation {
    let pure = Term::of(vec![Token::deriv(variable, 1)]).key();
    match eq.position(&pure) {
        Some(i) => eq.retarget(i).unwrap_or_else(|_| eq.clone()),
        None => eq.clone(),
    }
}

/// Runs the search `n_runs` times with seeds `seed + k`. A run that fails or
/// yields an empty front is retried once with a derived seed, then skipped.
pub fn collect(data: &DataSet, n_runs: usize, cfg: &EvoConfig, variable: &str) -> Result<EquationEnsemble> {
    if n_runs == 0 {
        return Err(Error::Config("ensemble.runs must be at least 1".into()));
    }
    cfg.validate()?;
    let attempt = |seed: u64| -> Option<Vec<FrontMember>> {
        let mut c = cfg.clone();
        c.seed = seed;
        let front = evolve(data, &c, variable).ok()?;
        let members = front_to_json(&front, variable);
        (!members.is_empty()).then_some(members)
    };
    let results = map_indexed(n_runs, cfg.execution, |k| {
        let seed = cfg.seed.wrapping_add(k as u64);
        if let Some(m) = attempt(seed) {
            return Some(RunFront { run: k, seed, retried: false, members: m });
        }
        let retry = mix_seed(&[seed, 0x5eed]);
        attempt(retry).map(|m| RunFront { run: k, seed: retry, retried: true, members: m })
    });
    let mut runs = Vec::new();
    let mut skipped = Vec::new();
    for (k, r) in results.into_iter().enumerate() {
        match r {
            Some(run) => runs.push(run),
            None => skipped.push(k),
        }
    }
    if runs.is_empty() {
        return Err(Error::InsufficientData(format!(
            "all {n_runs} discovery runs for `{variable}` failed"
        )));
    }
    Ok(EquationEnsemble {
        variable: variable.to_string(),
        runs,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TermTable {
    pub columns: Vec<String>,
    pub values: Vec<Vec<f64>>,
    pub presence: Vec<Vec<bool>>,
    /// Target column of each row, for decoding.
    pub targets: Vec<String>,
}

impl TermTable {
    pub fn from_equations(equations: &[Equation]) -> TermTable {
        let columns: Vec<String> = equations
            .iter()
            .flat_map(|e| e.keys())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let index: BTreeMap<&str, usize> = columns.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
        let mut values = Vec::with_capacity(equations.len());
        let mut presence = Vec::with_capacity(equations.len());
        let mut targets = Vec::with_capacity(equations.len());
        for eq in equations {
            let mut v = vec![0.0; columns.len()];
            let mut p = vec![false; columns.len()];
            for t in eq.terms() {
                let j = index[t.key().as_str()];
                v[j] = t.coefficient;
                p[j] = true;
            }
            values.push(v);
            presence.push(p);
            targets.push(eq.target().key());
        }
        TermTable {
            columns,
            values,
            presence,
            targets,
        }
    }

    pub fn rows(&self) -> usize {
        self.values.len()
    }

    pub fn column(&self, key: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == key)
    }

    pub fn support(&self, j: usize) -> usize {
        self.presence.iter().filter(|p| p[j]).count()
    }

    /// Decodes row `i` back into an equation.
    pub fn row_equation(&self, i: usize) -> Result<Equation> {
        let mut terms = Vec::new();
        let mut target = None;
        for (j, key) in self.columns.iter().enumerate() {
            if !self.presence[i][j] {
                continue;
            }
            if *key == self.targets[i] {
                target = Some(terms.len());
            }
            terms.push(Term::from_key(key, self.values[i][j])?);
        }
        let target = target.ok_or_else(|| {
            Error::InvalidEquation(format!("row {i} lacks its target `{}`", self.targets[i]))
        })?;
        Equation::new(terms, target)
    }

    /// Drops columns present in fewer than `min_support` rows; returns the
    /// reduced table and the dropped keys.
    pub fn filter_support(&self, min_support: usize) -> (TermTable, Vec<String>) {
        let keep: Vec<usize> = (0..self.columns.len())
            .filter(|&j| self.support(j) >= min_support || self.targets.contains(&self.columns[j]))
            .collect();
        let dropped = (0..self.columns.len())
            .filter(|j| !keep.contains(j))
            .map(|j| self.columns[j].clone())
            .collect();
        let pick = |row: &Vec<f64>| keep.iter().map(|&j| row[j]).collect::<Vec<_>>();
        let table = TermTable {
            columns: keep.iter().map(|&j| self.columns[j].clone()).collect(),
            values: self.values.iter().map(pick).collect(),
            presence: self
                .presence
                .iter()
                .map(|row| keep.iter().map(|&j| row[j]).collect())
                .collect(),
            targets: self.targets.clone(),
        };
        (table, dropped)
    }

    /// Writes the value table to `path` and the presence table next to it
    /// with a `.presence.csv` suffix. Returns the presence path.
    pub fn write_csv(&self, path: &Path) -> Result<PathBuf> {
        let presence_path = presence_path(path);
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut header = self.columns.clone();
        header.push("target".into());
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for (row, target) in self.values.iter().zip(&self.targets) {
            let mut rec: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
            rec.push(target.clone());
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_path(&presence_path).map_err(|e| csv_err(&presence_path, e))?;
        w.write_record(&self.columns).map_err(|e| csv_err(&presence_path, e))?;
        for row in &self.presence {
            let rec: Vec<&str> = row.iter().map(|&p| if p { "1" } else { "0" }).collect();
            w.write_record(&rec).map_err(|e| csv_err(&presence_path, e))?;
        }
        w.flush().map_err(|e| Error::io(&presence_path, e))?;
        Ok(presence_path)
    }

    pub fn read_csv(path: &Path) -> Result<TermTable> {
        let presence_path = presence_path(path);
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let header: Vec<String> = r.headers().map_err(|e| csv_err(path, e))?.iter().map(String::from).collect();
        if header.last().map(String::as_str) != Some("target") {
            return Err(Error::Load(format!("{}: last column must be `target`", path.display())));
        }
        let columns = header[..header.len() - 1].to_vec();
        let mut values = Vec::new();
        let mut targets = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let mut row = Vec::with_capacity(columns.len());
            for (j, col) in columns.iter().enumerate() {
                let cell = rec.get(j).unwrap_or("");
                row.push(cell.trim().parse::<f64>().map_err(|_| Error::Parse {
                    row: i + 1,
                    column: col.clone(),
                    message: format!("`{cell}` is not a number"),
                })?);
            }
            values.push(row);
            targets.push(rec.get(columns.len()).unwrap_or("").to_string());
        }
        let mut r = csv::Reader::from_path(&presence_path).map_err(|e| csv_err(&presence_path, e))?;
        let pheader: Vec<String> = r.headers().map_err(|e| csv_err(&presence_path, e))?.iter().map(String::from).collect();
        if pheader != columns {
            return Err(Error::Load(format!(
                "{}: columns differ from {}",
                presence_path.display(),
                path.display()
            )));
        }
        let mut presence = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| csv_err(&presence_path, e))?;
            presence.push(rec.iter().map(|c| c.trim() == "1").collect::<Vec<_>>());
        }
        if presence.len() != values.len() {
            return Err(Error::Load("value and presence tables differ in length".into()));
        }
        Ok(TermTable {
            columns,
            values,
            presence,
            targets,
        })
    }
}

fn presence_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("table");
    path.with_file_name(format!("{stem}.presence.csv"))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Load(format!("{}: {e}", path.display()))
}

/// Term table of one ensemble, targets normalized to the pure derivative.
pub fn tabulate(ensemble: &EquationEnsemble) -> Result<TermTable> {
    if ensemble.is_empty() {
        return Err(Error::InsufficientData("empty ensemble".into()));
    }
    let eqs: Vec<Equation> = ensemble
        .equations()?
        .iter()
        .map(|e| normalize_target(e, &ensemble.variable))
        .collect();
    Ok(TermTable::from_equations(&eqs))
}

/// Node name of term `key` in the equation for `variable`.
pub fn pooled_name(key: &str, variable: &str) -> String {
    format!("{key}_{variable}")
}

/// Splits a pooled node name into (term key, variable).
pub fn split_pooled(name: &str) -> Option<(&str, &str)> {
    name.rsplit_once('_')
}

/// One table over whole systems: within each run every combination of the
/// variables' level-0 members forms a row, with keys suffixed by variable.
pub fn pool(ensembles: &[EquationEnsemble]) -> Result<TermTable> {
    if ensembles.is_empty() {
        return Err(Error::InsufficientData("nothing to pool".into()));
    }
    let by_run: Vec<BTreeMap<usize, Vec<Equation>>> = ensembles
        .iter()
        .map(|ens| {
            let mut m = BTreeMap::new();
            for run in &ens.runs {
                let eqs = run
                    .members
                    .iter()
                    .map(|fm| fm.equation().map(|e| normalize_target(&e, &ens.variable)))
                    .collect::<Result<Vec<_>>>()?;
                m.insert(run.run, eqs);
            }
            Ok(m)
        })
        .collect::<Result<_>>()?;
    let common: Vec<usize> = by_run[0]
        .keys()
        .copied()
        .filter(|k| by_run.iter().all(|m| m.contains_key(k)))
        .collect();
    // Rows as (pooled key -> coefficient), plus the pooled target names.
    let mut rows: Vec<(BTreeMap<String, f64>, Vec<String>)> = Vec::new();
    for k in common {
        let mut partial: Vec<(BTreeMap<String, f64>, Vec<String>)> = vec![(BTreeMap::new(), Vec::new())];
        for (ens, m) in ensembles.iter().zip(&by_run) {
            let mut next = Vec::new();
            for (row, tg) in &partial {
                for eq in &m[&k] {
                    let mut row = row.clone();
                    for t in eq.terms() {
                        row.insert(pooled_name(&t.key(), &ens.variable), t.coefficient);
                    }
                    let mut tg = tg.clone();
                    tg.push(pooled_name(&eq.target().key(), &ens.variable));
                    next.push((row, tg));
                }
            }
            partial = next;
        }
        rows.extend(partial);
    }
    if rows.is_empty() {
        return Err(Error::InsufficientData("no run produced equations for every variable".into()));
    }
    let columns: Vec<String> = rows
        .iter()
        .flat_map(|(r, _)| r.keys().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let values = rows
        .iter()
        .map(|(r, _)| columns.iter().map(|c| r.get(c).copied().unwrap_or(0.0)).collect())
        .collect();
    let presence = rows
        .iter()
        .map(|(r, _)| columns.iter().map(|c| r.contains_key(c)).collect())
        .collect();
    let targets = rows.into_iter().map(|(_, t)| t.join(";")).collect();
    Ok(TermTable {
        columns,
        values,
        presence,
        targets,
    })
}

pub fn write_ensemble(ensemble: &EquationEnsemble, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(ensemble)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_ensemble(path: &Path) -> Result<EquationEnsemble> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eq(pairs: &[(&str, f64)]) -> Equation {
        let terms = pairs
            .iter()
            .map(|(k, c)| Term::from_key(k, *c).unwrap())
            .collect();
        Equation::new(terms, 0).unwrap()
    }

    #[test]
    fn union_of_keys_with_zeros_off_support() {
        let t = TermTable::from_equations(&[eq(&[("d1_u", 1.0), ("u", 0.5)]), eq(&[("d1_u", 1.0), ("v", -0.2)])]);
        assert_eq!(t.columns, vec!["d1_u", "u", "v"]);
        assert_eq!(t.values, vec![vec![1.0, 0.5, 0.0], vec![1.0, 0.0, -0.2]]);
        assert_eq!(t.presence[1], vec![true, false, true]);
    }

    #[test]
    fn identical_equations_give_identical_rows() {
        let e = eq(&[("d1_u", 1.0), ("u", 0.5)]);
        let t = TermTable::from_equations(&[e.clone(), e]);
        assert_eq!(t.values[0], t.values[1]);
        assert_eq!(t.presence[0], t.presence[1]);
    }

    #[test]
    fn rows_decode_to_sources() {
        let src = vec![
            eq(&[("d1_u", 1.0), ("u", 0.5), ("u*v", -0.03)]),
            eq(&[("d1_u", 1.0), ("const", 2.0)]),
        ];
        let t = TermTable::from_equations(&src);
        for (i, e) in src.iter().enumerate() {
            let d = t.row_equation(i).unwrap();
            let mut a: Vec<_> = d.terms().iter().map(|t| (t.key(), t.coefficient)).collect();
            let mut b: Vec<_> = e.terms().iter().map(|t| (t.key(), t.coefficient)).collect();
            a.sort_by(|x, y| x.0.cmp(&y.0));
            b.sort_by(|x, y| x.0.cmp(&y.0));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn support_filter_keeps_targets() {
        let t = TermTable::from_equations(&[
            eq(&[("d1_u", 1.0), ("u", 0.5)]),
            eq(&[("d1_u", 1.0), ("u", 0.4), ("v", 1.0)]),
        ]);
        let (f, dropped) = t.filter_support(2);
        assert_eq!(f.columns, vec!["d1_u", "u"]);
        assert_eq!(dropped, vec!["v"]);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = TermTable::from_equations(&[
            eq(&[("d1_u", 1.0), ("u", 0.1 + 0.2)]),
            eq(&[("d1_u", 1.0), ("u*v", -1e-17)]),
        ]);
        let p = dir.path().join("table.csv");
        let pp = t.write_csv(&p).unwrap();
        assert!(pp.ends_with("table.presence.csv"));
        assert_eq!(TermTable::read_csv(&p).unwrap(), t);
    }

    #[test]
    fn pooled_names_split_on_last_underscore() {
        let n = pooled_name("d1_u*v", "v");
        assert_eq!(split_pooled(&n), Some(("d1_u*v", "v")));
    }

    #[test]
    fn pure_derivative_becomes_target() {
        let e = Equation::new(
            vec![
                Term::from_key("d1_u*v", 1.0).unwrap(),
                Term::from_key("d1_u", 2.0).unwrap(),
                Term::from_key("u", 4.0).unwrap(),
            ],
            0,
        )
        .unwrap();
        let n = normalize_target(&e, "u");
        assert_eq!(n.target().key(), "d1_u");
        assert_eq!(n.coefficient("d1_u*v"), Some(0.5));
        assert_eq!(n.coefficient("u"), Some(-2.0));
    }
}
