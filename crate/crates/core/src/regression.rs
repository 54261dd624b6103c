//! LASSO coefficient fitting for candidate equations.
//!
//! A target term is balanced against the remaining terms by minimising
//! `0.5 * ||target - sum_j c_j a_j||^2 + lambda * ||w||_1`, where `w` are the
//! coefficients of the unit-norm rescaled columns. Small coefficients are
//! then pruned.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::DataSet;
use crate::error::{Error, Result};
use crate::tokens::{evaluate_term, explicit_targets, Equation, Term};

/// Penalty grid searched when the penalty is chosen automatically.
pub const LAMBDA_GRID: [f64; 5] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0];
pub const CV_FOLDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Lambda {
    Auto,
    Fixed(f64),
}

impl FromStr for Lambda {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "auto" {
            return Ok(Lambda::Auto);
        }
        match s.parse::<f64>() {
            Ok(v) if v >= 0.0 && v.is_finite() => Ok(Lambda::Fixed(v)),
            _ => Err(Error::Config(format!(
                "regression.lambda must be `auto` or a non-negative number, got `{s}`"
            ))),
        }
    }
}

impl fmt::Display for Lambda {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Lambda::Auto => f.write_str("auto"),
            Lambda::Fixed(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionSettings {
    pub lambda: Lambda,
    /// Pruning threshold relative to the largest fitted magnitude.
    pub epsilon: f64,
    pub max_sweeps: usize,
    pub tol: f64,
}

impl Default for RegressionSettings {
    fn default() -> Self {
        RegressionSettings {
            lambda: Lambda::Auto,
            epsilon: 1e-6,
            max_sweeps: 10_000,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub target: String,
    /// Retained terms, target included with coefficient 1.
    pub coefficients: BTreeMap<String, f64>,
    pub residual_norm: f64,
    /// `residual_norm / ||target||`, comparable across targets.
    pub relative_residual: f64,
    pub pruned: Vec<String>,
    pub lambda: f64,
}

impl FitResult {
    pub fn retained(&self) -> usize {
        self.coefficients.len()
    }

    /// The fitted equation: retained terms with their coefficients.
    pub fn equation(&self, source: &Equation) -> Result<Equation> {
        let mut terms = Vec::new();
        let mut target = 0;
        for t in source.terms() {
            let key = t.key();
            if let Some(c) = self.coefficients.get(&key) {
                if key == self.target {
                    target = terms.len();
                }
                terms.push(Term::new(t.tokens().to_vec(), *c));
            }
        }
        Equation::new(terms, target)
    }
}

/// Coordinate-descent LASSO on columns rescaled to unit norm.
///
/// Returns coefficients for the original columns. All-zero columns get 0.
pub fn lasso(
    design: &[Vec<f64>],
    response: &[f64],
    lambda: f64,
    max_sweeps: usize,
    tol: f64,
) -> Result<Vec<f64>> {
    let problem = ScaledProblem::new(design, response, None)?;
    let w = problem.solve(lambda, None, max_sweeps, tol)?;
    Ok(problem.unscale(&w))
}

/// Gram-form of a rescaled least-squares problem restricted to `rows`.
struct ScaledProblem {
    norms: Vec<f64>,
    gram: Vec<Vec<f64>>,
    corr: Vec<f64>,
}

impl ScaledProblem {
    fn new(design: &[Vec<f64>], response: &[f64], rows: Option<&[usize]>) -> Result<Self> {
        let n = response.len();
        if let Some(j) = design.iter().position(|c| c.len() != n) {
            return Err(Error::Numeric(format!(
                "design column {j} has {} rows, response has {n}",
                design[j].len()
            )));
        }
        if design.iter().flatten().chain(response).any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite entry in design or response".into()));
        }
        let all: Vec<usize>;
        let rows = match rows {
            Some(r) => r,
            None => {
                all = (0..n).collect();
                &all
            }
        };
        let k = design.len();
        let norms: Vec<f64> = design
            .iter()
            .map(|c| rows.iter().map(|&i| c[i] * c[i]).sum::<f64>().sqrt())
            .collect();
        let mut gram = vec![vec![0.0; k]; k];
        let mut corr = vec![0.0; k];
        for a in 0..k {
            if norms[a] == 0.0 {
                continue;
            }
            corr[a] = rows.iter().map(|&i| design[a][i] * response[i]).sum::<f64>() / norms[a];
            for b in a..k {
                if norms[b] == 0.0 {
                    continue;
                }
                let g = rows.iter().map(|&i| design[a][i] * design[b][i]).sum::<f64>()
                    / (norms[a] * norms[b]);
                gram[a][b] = g;
                gram[b][a] = g;
            }
        }
        Ok(ScaledProblem { norms, gram, corr })
    }

    fn solve(&self, lambda: f64, warm: Option<&[f64]>, max_sweeps: usize, tol: f64) -> Result<Vec<f64>> {
        let k = self.norms.len();
        let mut w = warm.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; k]);
        let mut last_change = f64::INFINITY;
        for _ in 0..max_sweeps {
            let mut max_change: f64 = 0.0;
            for j in 0..k {
                if self.norms[j] == 0.0 {
                    w[j] = 0.0;
                    continue;
                }
                let mut rho = self.corr[j];
                for (m, wm) in w.iter().enumerate() {
                    if m != j {
                        rho -= self.gram[j][m] * wm;
                    }
                }
                let new = soft_threshold(rho, lambda) / self.gram[j][j];
                max_change = max_change.max((new - w[j]).abs());
                w[j] = new;
            }
            last_change = max_change;
            let scale = w.iter().fold(1.0_f64, |a, x| a.max(x.abs()));
            if max_change < tol * scale {
                return Ok(w);
            }
        }
        Err(Error::NotConverged {
            sweeps: max_sweeps,
            last_change,
            last_iterate: self.unscale(&w),
        })
    }

    fn unscale(&self, w: &[f64]) -> Vec<f64> {
        w.iter()
            .zip(&self.norms)
            .map(|(w, n)| if *n == 0.0 { 0.0 } else { w / n })
            .collect()
    }
}

pub fn soft_threshold(x: f64, lambda: f64) -> f64 {
    if x > lambda {
        x - lambda
    } else if x < -lambda {
        x + lambda
    } else {
        0.0
    }
}

/// Picks the penalty from [`LAMBDA_GRID`] with the smallest blocked
/// cross-validated residual. Ties go to the larger penalty.
pub fn select_lambda(design: &[Vec<f64>], response: &[f64], max_sweeps: usize, tol: f64) -> Result<f64> {
    let n = response.len();
    let folds = CV_FOLDS.min(n);
    let mut errors = [0.0_f64; LAMBDA_GRID.len()];
    let mut failed = [false; LAMBDA_GRID.len()];
    for f in 0..folds {
        let lo = f * n / folds;
        let hi = (f + 1) * n / folds;
        let train: Vec<usize> = (0..n).filter(|i| *i < lo || *i >= hi).collect();
        let problem = ScaledProblem::new(design, response, Some(&train))?;
        let mut warm: Option<Vec<f64>> = None;
        // Largest penalty first so the path warm-starts from sparse solutions.
        for (li, &lambda) in LAMBDA_GRID.iter().enumerate().rev() {
            match problem.solve(lambda, warm.as_deref(), max_sweeps, tol) {
                Ok(w) => {
                    let c = problem.unscale(&w);
                    let sse: f64 = (lo..hi)
                        .map(|i| {
                            let pred: f64 = design.iter().zip(&c).map(|(col, c)| col[i] * c).sum();
                            (response[i] - pred).powi(2)
                        })
                        .sum();
                    errors[li] += sse;
                    warm = Some(w);
                }
                Err(_) => failed[li] = true,
            }
        }
    }
    let mut best: Option<(usize, f64)> = None;
    for (li, e) in errors.iter().enumerate() {
        if failed[li] {
            continue;
        }
        match best {
            Some((_, be)) if *e > be => {}
            _ => best = Some((li, *e)),
        }
    }
    best.map(|(li, _)| LAMBDA_GRID[li])
        .ok_or_else(|| Error::Numeric("no penalty on the grid converged".into()))
}

/// Fits `equation` on `data`, choosing the target uniformly among terms
/// that carry a derivative. With `variable` given, only terms the equation
/// is explicit in (see [`explicit_targets`]) qualify.
pub fn fit_equation<R: Rng + ?Sized>(
    equation: &Equation,
    data: &DataSet,
    settings: &RegressionSettings,
    variable: Option<&str>,
    rng: &mut R,
) -> Result<FitResult> {
    let terms = equation.terms();
    if terms.len() < 2 {
        return Err(Error::Degenerate(format!(
            "equation needs at least 2 terms, has {}",
            terms.len()
        )));
    }
    let candidates: Vec<usize> = match variable {
        Some(v) => explicit_targets(terms, v),
        None => (0..terms.len()).filter(|&i| terms[i].has_derivative()).collect(),
    };
    if candidates.is_empty() {
        return Err(Error::InvalidEquation("no admissible target term".into()));
    }
    let target = candidates[rng.gen_range(0..candidates.len())];
    fit_with_target(equation, data, settings, target)
}

/// Fits with a fixed target index.
pub fn fit_with_target(
    equation: &Equation,
    data: &DataSet,
    settings: &RegressionSettings,
    target: usize,
) -> Result<FitResult> {
    let terms = equation.terms();
    let response = evaluate_term(&terms[target], data)?;
    let target_norm = norm(&response);
    if target_norm == 0.0 {
        return Err(Error::Degenerate(format!(
            "target `{}` vanishes on the grid",
            terms[target].key()
        )));
    }
    let others: Vec<usize> = (0..terms.len()).filter(|i| *i != target).collect();
    let design = others
        .iter()
        .map(|&i| evaluate_term(&terms[i], data))
        .collect::<Result<Vec<_>>>()?;
    let lambda = match settings.lambda {
        Lambda::Fixed(l) => l,
        Lambda::Auto => select_lambda(&design, &response, settings.max_sweeps, settings.tol)?,
    };
    let coef = lasso(&design, &response, lambda, settings.max_sweeps, settings.tol)?;

    let largest = coef.iter().fold(0.0_f64, |a, c| a.max(c.abs()));
    let threshold = settings.epsilon * largest;
    let mut coefficients = BTreeMap::new();
    let mut pruned = Vec::new();
    let mut residual = response.clone();
    coefficients.insert(terms[target].key(), 1.0);
    for (j, &i) in others.iter().enumerate() {
        let c = coef[j];
        if c == 0.0 || c.abs() < threshold {
            pruned.push(terms[i].key());
            continue;
        }
        coefficients.insert(terms[i].key(), c);
        residual.iter_mut().zip(&design[j]).for_each(|(r, x)| *r -= c * x);
    }
    let residual_norm = norm(&residual);
    Ok(FitResult {
        target: terms[target].key(),
        coefficients,
        residual_norm,
        relative_residual: residual_norm / target_norm,
        pruned,
        lambda,
    })
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}
