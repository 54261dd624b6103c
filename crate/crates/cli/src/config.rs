//! Flat `key = value` run configuration.
//!
//! Lines are `dotted.key = value`; `#` starts a comment. Unknown keys are
//! rejected. Every key has a default, so an empty file is a valid config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use eqdisc::baseline::BaselineSettings;
use eqdisc::compare::LvCoefficients;
use eqdisc::dataio::{DiffMethod, DiffSettings};
use eqdisc::evolution::EvoConfig;
use eqdisc::parallel::Execution;
use eqdisc::regression::{Lambda, RegressionSettings};
use eqdisc::solver::SolveSettings;
use eqdisc::tokens::TokenConfig;
use eqdisc::{Error, Result};

/// Keys with their default values, in resolved-file order.
const DEFAULTS: &[(&str, &str)] = &[
    ("run.seed", "0"),
    ("run.output_dir", "out"),
    ("run.case", "a"),
    ("run.parallel", "true"),
    ("data.path", "data/hudson-bay-lynx-hare.csv"),
    ("data.time_column", "Year"),
    ("data.columns", "Hare:u,Lynx:v"),
    ("data.normalize", "false"),
    ("diff.method", "spline"),
    ("diff.window", "5"),
    ("diff.max_order", "case"),
    ("tokens.max_factors", "2"),
    ("tokens.max_power", "2"),
    ("tokens.inverse_coordinate", "auto"),
    ("regression.lambda", "auto"),
    ("regression.epsilon", "1e-6"),
    ("regression.max_sweeps", "10000"),
    ("regression.tol", "1e-8"),
    ("evo.population", "64"),
    ("evo.generations", "100"),
    ("evo.min_terms", "2"),
    ("evo.max_terms", "5"),
    ("evo.crossover_rate", "0.8"),
    ("evo.mutation_rate", "0.3"),
    ("evo.elite", "4"),
    ("evo.seed", "run"),
    ("ensemble.runs", "20"),
    ("ensemble.min_support", "2"),
    ("bn.max_parents", "3"),
    ("bn.samples", "30"),
    ("solve.rtol", "1e-7"),
    ("solve.atol", "1e-9"),
    ("solve.max_steps", "1000000"),
    ("solve.report_points", "201"),
    ("solve.t_span", "data"),
    ("baseline.n_boot", "1000"),
    ("baseline.keep_fraction", "0.9"),
    ("baseline.threshold", "0.3"),
    ("baseline.inclusion", "0.5"),
    ("baseline.normalize", "true"),
    ("baseline.resample_rows", "true"),
    ("compare.reference", "0.55,-0.028,-0.84,0.026"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    /// `bn.anchor.<var>` entries.
    anchors: BTreeMap<String, String>,
    /// Directory of the config file, for relative data paths.
    base_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            anchors: BTreeMap::new(),
            base_dir: None,
        }
    }
}

fn bad(key: &str, value: &str, why: &str) -> Error {
    Error::Config(format!("{key} = {value}: {why}"))
}

impl RunConfig {
    /// Reads a config file; relative `data.path` values resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = RunConfig::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).filter(|p| !p.as_os_str().is_empty());
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some(var) = key.strip_prefix("bn.anchor.") {
            if var.is_empty() {
                return Err(Error::Config("bn.anchor needs a variable name".into()));
            }
            self.anchors.insert(var.to_string(), value.to_string());
            return Ok(());
        }
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key `{key}`"))),
        }
    }

    fn raw(&self, key: &str) -> &str {
        &self.values[key]
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.raw(key);
        v.parse().map_err(|_| bad(key, v, "cannot parse value"))
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.raw(key) {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            v => Err(bad(key, v, "expected true or false")),
        }
    }

    /// Validates every value once so commands fail early with exit code 2.
    fn check(&self) -> Result<()> {
        self.seed()?;
        self.max_order()?;
        self.columns()?;
        self.flag("data.normalize")?;
        self.flag("run.parallel")?;
        self.diff()?;
        self.evo_template()?.validate()?;
        self.ensemble_runs()?;
        self.min_support()?;
        self.max_parents()?;
        self.samples()?;
        self.solve()?;
        self.t_span()?;
        self.report_points()?;
        self.baseline()?.validate()?;
        self.reference()?;
        Ok(())
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("run.seed")
    }

    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("run.output_dir"))
    }

    pub fn execution(&self) -> Execution {
        if self.flag("run.parallel").unwrap_or(true) {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }

    pub fn max_order(&self) -> Result<usize> {
        let case = match self.raw("run.case") {
            "a" => 1,
            "b" => 2,
            v => return Err(bad("run.case", v, "expected a or b")),
        };
        match self.raw("diff.max_order") {
            "case" => Ok(case),
            v => {
                let k: usize = v.parse().map_err(|_| bad("diff.max_order", v, "expected an integer"))?;
                if k != case {
                    return Err(bad("diff.max_order", v, "conflicts with run.case"));
                }
                Ok(k)
            }
        }
    }

    pub fn data_path(&self) -> PathBuf {
        let p = PathBuf::from(self.raw("data.path"));
        match &self.base_dir {
            Some(base) if p.is_relative() => base.join(p),
            _ => p,
        }
    }

    pub fn time_column(&self) -> String {
        self.raw("data.time_column").to_string()
    }

    /// `(csv column, variable)` pairs.
    pub fn columns(&self) -> Result<Vec<(String, String)>> {
        let v = self.raw("data.columns");
        let pairs: Vec<(String, String)> = v
            .split(',')
            .map(|item| {
                let item = item.trim();
                match item.split_once(':') {
                    Some((c, n)) => (c.trim().to_string(), n.trim().to_string()),
                    None => (item.to_string(), item.to_string()),
                }
            })
            .collect();
        if pairs.iter().any(|(c, n)| c.is_empty() || !eqdisc::tokens::is_valid_name(n)) {
            return Err(bad("data.columns", v, "expected `Column:var` items"));
        }
        Ok(pairs)
    }

    pub fn variables(&self) -> Result<Vec<String>> {
        Ok(self.columns()?.into_iter().map(|(_, n)| n).collect())
    }

    pub fn normalize(&self) -> bool {
        self.flag("data.normalize").unwrap_or(false)
    }

    pub fn diff(&self) -> Result<DiffSettings> {
        let m = self.raw("diff.method");
        let method: DiffMethod = m.parse().map_err(|_| bad("diff.method", m, "expected central, smoothed or spline"))?;
        let window: usize = self.get("diff.window")?;
        if window < 3 || window.is_multiple_of(2) {
            return Err(bad("diff.window", self.raw("diff.window"), "expected an odd integer >= 3"));
        }
        Ok(DiffSettings {
            method,
            window,
            max_order: self.max_order()?,
        })
    }

    /// Token settings; the variable list and the inverse-coordinate default
    /// come from the data.
    pub fn tokens(&self, detected: TokenConfig) -> Result<TokenConfig> {
        let mut tc = detected;
        tc.max_factors = self.get("tokens.max_factors")?;
        tc.max_power = self.get("tokens.max_power")?;
        match self.raw("tokens.inverse_coordinate") {
            "auto" => {}
            v => {
                tc.inverse_coordinate = match v {
                    "true" => true,
                    "false" => false,
                    _ => return Err(bad("tokens.inverse_coordinate", v, "expected auto, true or false")),
                }
            }
        }
        Ok(tc)
    }

    pub fn regression(&self) -> Result<RegressionSettings> {
        let l = self.raw("regression.lambda");
        let lambda: Lambda = l.parse().map_err(|_| bad("regression.lambda", l, "expected auto or a number"))?;
        Ok(RegressionSettings {
            lambda,
            epsilon: self.get("regression.epsilon")?,
            max_sweeps: self.get("regression.max_sweeps")?,
            tol: self.get("regression.tol")?,
        })
    }

    fn evo_template(&self) -> Result<EvoConfig> {
        let vars = self.variables()?;
        self.evo(TokenConfig::new(vars, "t", self.max_order()?))
    }

    pub fn evo(&self, tokens: TokenConfig) -> Result<EvoConfig> {
        let mut cfg = EvoConfig::new(self.tokens(tokens)?);
        cfg.population = self.get("evo.population")?;
        cfg.generations = self.get("evo.generations")?;
        cfg.min_terms = self.get("evo.min_terms")?;
        cfg.max_terms = self.get("evo.max_terms")?;
        cfg.crossover_rate = self.get("evo.crossover_rate")?;
        cfg.mutation_rate = self.get("evo.mutation_rate")?;
        cfg.elite = self.get("evo.elite")?;
        cfg.seed = match self.raw("evo.seed") {
            "run" => self.seed()?,
            _ => self.get("evo.seed")?,
        };
        cfg.regression = self.regression()?;
        cfg.execution = self.execution();
        Ok(cfg)
    }

    pub fn ensemble_runs(&self) -> Result<usize> {
        let n: usize = self.get("ensemble.runs")?;
        if n == 0 {
            return Err(bad("ensemble.runs", "0", "must be positive"));
        }
        Ok(n)
    }

    pub fn min_support(&self) -> Result<usize> {
        self.get("ensemble.min_support")
    }

    pub fn max_parents(&self) -> Result<usize> {
        self.get("bn.max_parents")
    }

    pub fn samples(&self) -> Result<usize> {
        let n: usize = self.get("bn.samples")?;
        if n < 2 {
            return Err(bad("bn.samples", self.raw("bn.samples"), "need at least 2"));
        }
        Ok(n)
    }

    /// Anchor key per variable, defaulting to the pure first derivative.
    pub fn anchors(&self) -> Result<BTreeMap<String, String>> {
        let vars = self.variables()?;
        for v in self.anchors.keys() {
            if !vars.contains(v) {
                return Err(Error::Config(format!("bn.anchor.{v}: unknown variable `{v}`")));
            }
        }
        Ok(vars
            .iter()
            .map(|v| {
                let key = self.anchors.get(v).cloned().unwrap_or_else(|| format!("d1_{v}"));
                (v.clone(), key)
            })
            .collect())
    }

    pub fn solve(&self) -> Result<SolveSettings> {
        let s = SolveSettings {
            rtol: self.get("solve.rtol")?,
            atol: self.get("solve.atol")?,
            max_steps: self.get("solve.max_steps")?,
        };
        if !(s.rtol > 0.0 && s.atol > 0.0) {
            return Err(Error::Config("solve.rtol and solve.atol must be positive".into()));
        }
        Ok(s)
    }

    pub fn report_points(&self) -> Result<usize> {
        let n: usize = self.get("solve.report_points")?;
        if n < 2 {
            return Err(bad("solve.report_points", self.raw("solve.report_points"), "need at least 2"));
        }
        Ok(n)
    }

    /// `None` means the span of the data grid.
    pub fn t_span(&self) -> Result<Option<(f64, f64)>> {
        let v = self.raw("solve.t_span");
        if v == "data" {
            return Ok(None);
        }
        let parts: Vec<&str> = v.split(',').map(str::trim).collect();
        match parts.as_slice() {
            [a, b] => {
                let (a, b): (f64, f64) = (
                    a.parse().map_err(|_| bad("solve.t_span", v, "expected `t0,t1` or data"))?,
                    b.parse().map_err(|_| bad("solve.t_span", v, "expected `t0,t1` or data"))?,
                );
                if b.partial_cmp(&a) != Some(std::cmp::Ordering::Greater) {
                    return Err(bad("solve.t_span", v, "t1 must exceed t0"));
                }
                Ok(Some((a, b)))
            }
            _ => Err(bad("solve.t_span", v, "expected `t0,t1` or data")),
        }
    }

    pub fn baseline(&self) -> Result<BaselineSettings> {
        Ok(BaselineSettings {
            n_boot: self.get("baseline.n_boot")?,
            keep_fraction: self.get("baseline.keep_fraction")?,
            threshold: self.get("baseline.threshold")?,
            inclusion: self.get("baseline.inclusion")?,
            normalize: self.flag("baseline.normalize")?,
            resample_rows: self.flag("baseline.resample_rows")?,
        })
    }

    pub fn reference(&self) -> Result<LvCoefficients> {
        let v = self.raw("compare.reference");
        let xs: Vec<f64> = v
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("compare.reference", v, "expected four numbers"))?;
        match xs.as_slice() {
            &[growth, predation, death, conversion] if xs.iter().all(|x| *x != 0.0) => Ok(LvCoefficients {
                growth,
                predation,
                death,
                conversion,
            }),
            _ => Err(bad("compare.reference", v, "expected four nonzero numbers")),
        }
    }

    /// Every key with its effective value, one `key = value` line each.
    pub fn resolved(&self) -> String {
        let mut out = String::new();
        for (k, _) in DEFAULTS {
            let v = match *k {
                "diff.max_order" => self.max_order().map(|x| x.to_string()).unwrap_or_default(),
                "evo.seed" if self.raw(k) == "run" => self.raw("run.seed").to_string(),
                "data.path" => self.data_path().display().to_string(),
                _ => self.raw(k).to_string(),
            };
            out.push_str(&format!("{k} = {v}\n"));
        }
        if let Ok(anchors) = self.anchors() {
            for (v, key) in anchors {
                out.push_str(&format!("bn.anchor.{v} = {key}\n"));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        let c = RunConfig::parse("").unwrap();
        assert_eq!(c.max_order().unwrap(), 1);
        assert_eq!(c.variables().unwrap(), vec!["u", "v"]);
        assert_eq!(c.ensemble_runs().unwrap(), 20);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("evo.populaton = 3\n").unwrap_err();
        assert!(err.to_string().contains("evo.populaton"));
    }

    #[test]
    fn case_sets_order() {
        let c = RunConfig::parse("run.case = b # second order\n").unwrap();
        assert_eq!(c.diff().unwrap().max_order, 2);
        assert!(RunConfig::parse("run.case = b\ndiff.max_order = 1\n").is_err());
    }

    #[test]
    fn resolved_round_trips() {
        let c = RunConfig::parse("run.seed = 7\nbn.anchor.u = d1_u\nevo.population = 12\n").unwrap();
        let again = RunConfig::parse(&c.resolved()).unwrap();
        assert_eq!(again.resolved(), c.resolved());
        assert!(c.resolved().contains("evo.seed = 7\n"));
    }

    #[test]
    fn bad_values_are_rejected() {
        for text in [
            "diff.window = 4",
            "run.case = c",
            "baseline.keep_fraction = 0",
            "solve.t_span = 5,1",
            "data.columns = Hare:2u",
            "compare.reference = 1,2,3",
            "no equals sign",
        ] {
            assert!(RunConfig::parse(text).is_err(), "{text}");
        }
    }
}
