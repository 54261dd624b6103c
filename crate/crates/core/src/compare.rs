//! Percentage errors of fitted predator-prey coefficients against a
//! reference system.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::baseline::BaselineReport;
use crate::bayesnet::{Structure, TermSummary};
use crate::error::{Error, Result};
use crate::tokens::{Term, Token};

/// `u' = growth*u + predation*u*v`, `v' = death*v + conversion*u*v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LvCoefficients {
    pub growth: f64,
    pub predation: f64,
    pub death: f64,
    pub conversion: f64,
}

/// The textbook fit for the hare (u) and lynx (v) series.
pub const LV_REFERENCE: LvCoefficients = LvCoefficients {
    growth: 0.55,
    predation: -0.028,
    death: -0.84,
    conversion: 0.026,
};

impl LvCoefficients {
    pub fn as_array(&self) -> [f64; 4] {
        [self.growth, self.predation, self.death, self.conversion]
    }

    /// Pulls the four coefficients through `lookup(equation variable, key)`.
    pub fn extract(variables: &[String], lookup: impl Fn(&str, &str) -> Option<f64>) -> Result<Self> {
        if variables.len() != 2 {
            return Err(Error::Config(format!(
                "comparison needs exactly 2 state variables, got {}",
                variables.len()
            )));
        }
        let (u, v) = (&variables[0], &variables[1]);
        let key_u = Term::of(vec![Token::field(u)]).key();
        let key_v = Term::of(vec![Token::field(v)]).key();
        let key_uv = Term::of(vec![Token::field(u), Token::field(v)]).key();
        let get = |var: &str, key: &str| {
            lookup(var, key).ok_or_else(|| {
                Error::InsufficientData(format!("no coefficient for `{key}` in the {var} equation"))
            })
        };
        Ok(LvCoefficients {
            growth: get(u, &key_u)?,
            predation: get(u, &key_uv)?,
            death: get(v, &key_v)?,
            conversion: get(v, &key_uv)?,
        })
    }

    pub fn from_baseline(report: &BaselineReport, variables: &[String]) -> Result<Self> {
        Self::extract(variables, |var, key| {
            report
                .equations
                .iter()
                .find(|e| e.variable == var)
                .filter(|e| e.active.iter().any(|k| k == key))
                .and_then(|e| e.mean(key))
        })
    }

    /// Coefficients of the smallest sampled structure per variable that
    /// contains the reference terms; ties go to the more frequent one.
    pub fn from_structures(structures: &[Structure], variables: &[String]) -> Result<Self> {
        Self::extract(variables, |var, key| {
            let other = if var == variables[0] { &variables[1] } else { &variables[0] };
            let own = Term::of(vec![Token::field(var)]).key();
            let cross = Term::of(vec![Token::field(var), Token::field(other)]).key();
            structures
                .iter()
                .filter(|s| s.variable == var && s.keys.contains(&own) && s.keys.contains(&cross))
                .min_by(|a, b| a.keys.len().cmp(&b.keys.len()).then(b.count.cmp(&a.count)))
                .and_then(|s| s.mean(key))
        })
    }

    pub fn from_summary(summary: &[TermSummary], variables: &[String]) -> Result<Self> {
        Self::extract(variables, |var, key| {
            summary
                .iter()
                .find(|s| s.variable == var && s.key == key)
                .and_then(|s| s.mean)
        })
    }
}

/// Relative errors in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub source: String,
    pub u: f64,
    pub v: f64,
    pub uv: [f64; 2],
    pub mean_uv: f64,
    pub mean: f64,
}

fn pct(fit: f64, theory: f64) -> f64 {
    100.0 * (fit - theory).abs() / theory.abs()
}

pub fn coefficient_errors(source: &str, fitted: &LvCoefficients, theory: &LvCoefficients) -> ErrorRow {
    let u = pct(fitted.growth, theory.growth);
    let v = pct(fitted.death, theory.death);
    let uv = [
        pct(fitted.predation, theory.predation),
        pct(fitted.conversion, theory.conversion),
    ];
    let mean_uv = (uv[0] + uv[1]) / 2.0;
    ErrorRow {
        source: source.to_string(),
        u,
        v,
        uv,
        mean_uv,
        mean: (u + v + mean_uv) / 3.0,
    }
}

pub fn render_table(rows: &[ErrorRow]) -> String {
    let mut s = String::from("source,u,v,mean(uv),mean(error)\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.2},{:.2},{:.2},{:.2}", r.source, r.u, r.v, r.mean_uv, r.mean);
    }
    s
}
