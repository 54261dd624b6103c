//! Integration of sampled systems.
//!
//! A system is resolved for its derivative vector by damped Newton
//! iteration (equations may hold products such as `du/dt * v`), then
//! integrated with the Dormand–Prince 5(4) pair and Hairer's continuous
//! extension for output on a uniform grid.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bayesnet::SampledSystem;
use crate::dataio::DataSet;
use crate::error::{Error, Result};
use crate::parallel::{map_indexed, Execution};
use crate::tokens::{Equation, Token};

pub const NEWTON_TOL: f64 = 1e-10;
pub const NEWTON_MAX_ITER: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveSettings {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for SolveSettings {
    fn default() -> Self {
        SolveSettings {
            rtol: 1e-7,
            atol: 1e-9,
            max_steps: 1_000_000,
        }
    }
}

/// Where a token reads its value from.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Factor {
    State(usize),
    Rate(usize),
    InverseTime,
}

#[derive(Debug, Clone, PartialEq)]
struct CompiledTerm {
    coefficient: f64,
    factors: Vec<Factor>,
}

impl CompiledTerm {
    fn value(&self, t: f64, y: &[f64], d: &[f64]) -> f64 {
        self.factors.iter().fold(1.0, |acc, f| acc * factor_value(*f, t, y, d))
    }

    /// Partial derivative with respect to rate `k`.
    fn d_rate(&self, k: usize, t: f64, y: &[f64], d: &[f64]) -> f64 {
        let mut total = 0.0;
        for (i, f) in self.factors.iter().enumerate() {
            if *f != Factor::Rate(k) {
                continue;
            }
            let rest: f64 = self
                .factors
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, g)| factor_value(*g, t, y, d))
                .product();
            total += rest;
        }
        total
    }
}

fn factor_value(f: Factor, t: f64, y: &[f64], d: &[f64]) -> f64 {
    match f {
        Factor::State(i) => y[i],
        Factor::Rate(i) => d[i],
        Factor::InverseTime => 1.0 / t,
    }
}

/// A system in residual form `F(t, y, y') = 0`, one row per variable.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedSystem {
    variables: Vec<String>,
    /// Per equation: the target term (coefficient 1) and the right-hand side.
    rows: Vec<(CompiledTerm, Vec<CompiledTerm>)>,
}

/// Compiles one equation per variable. Each equation must contain the first
/// derivative of its variable; second and higher derivatives are rejected.
pub fn resolve_equations(variables: &[String], equations: &[Equation], axis: &str) -> Result<ResolvedSystem> {
    if variables.len() != equations.len() || variables.is_empty() {
        return Err(Error::InvalidEquation(format!(
            "need one equation per variable, got {} for {}",
            equations.len(),
            variables.len()
        )));
    }
    let index: BTreeMap<&str, usize> = variables.iter().enumerate().map(|(i, v)| (v.as_str(), i)).collect();
    let compile = |term: &crate::tokens::Term, coefficient: f64| -> Result<CompiledTerm> {
        let factors = term
            .tokens()
            .iter()
            .map(|tok| match tok {
                Token::Derivative { variable, order } => {
                    let i = *index.get(variable.as_str()).ok_or_else(|| {
                        Error::InvalidEquation(format!("term `{}` uses unknown variable `{variable}`", term.key()))
                    })?;
                    match order {
                        0 => Ok(Some(Factor::State(i))),
                        1 => Ok(Some(Factor::Rate(i))),
                        _ => Err(Error::InvalidEquation(format!(
                            "term `{}` has a derivative of order {order}; only first-order systems are integrated",
                            term.key()
                        ))),
                    }
                }
                Token::InverseCoordinate { axis: a } if a == axis => Ok(Some(Factor::InverseTime)),
                Token::InverseCoordinate { axis: a } => Err(Error::InvalidEquation(format!("unknown axis `{a}`"))),
                Token::Constant => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        Ok(CompiledTerm { coefficient, factors })
    };
    let mut rows = Vec::with_capacity(equations.len());
    for (var, eq) in variables.iter().zip(equations) {
        let own = Token::deriv(var, 1);
        if !eq.terms().iter().any(|t| t.tokens().contains(&own)) {
            return Err(Error::InvalidEquation(format!(
                "equation for `{var}` lacks d{var}/dt: {eq}"
            )));
        }
        let target = compile(eq.target(), 1.0)?;
        let rhs = eq
            .terms()
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != eq.target_index())
            .map(|(_, t)| compile(t, t.coefficient))
            .collect::<Result<Vec<_>>>()?;
        rows.push((target, rhs));
    }
    Ok(ResolvedSystem {
        variables: variables.to_vec(),
        rows,
    })
}

/// Resolves a sampled system, variables in name order.
pub fn resolve(system: &SampledSystem, axis: &str) -> Result<ResolvedSystem> {
    let vars: Vec<String> = system.equations.keys().cloned().collect();
    let eqs: Vec<Equation> = system.equations.values().cloned().collect();
    resolve_equations(&vars, &eqs, axis)
}

impl ResolvedSystem {
    pub fn variables(&self) -> &[String] {
        &self.variables
    }

    pub fn residual(&self, t: f64, y: &[f64], d: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|(target, rhs)| target.value(t, y, d) - rhs.iter().map(|c| c.coefficient * c.value(t, y, d)).sum::<f64>())
            .collect()
    }

    /// Magnitude of the largest summand in each row; scales the tolerance.
    fn row_scale(&self, t: f64, y: &[f64], d: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|(target, rhs)| {
                rhs.iter()
                    .map(|c| (c.coefficient * c.value(t, y, d)).abs())
                    .fold(target.value(t, y, d).abs(), f64::max)
            })
            .collect()
    }

    pub fn jacobian(&self, t: f64, y: &[f64], d: &[f64]) -> DMatrix<f64> {
        let m = self.variables.len();
        DMatrix::from_fn(m, m, |i, k| {
            let (target, rhs) = &self.rows[i];
            target.d_rate(k, t, y, d) - rhs.iter().map(|c| c.coefficient * c.d_rate(k, t, y, d)).sum::<f64>()
        })
    }

    /// Solves `F(t, y, d) = 0` for the rate vector `d` from `guess`.
    /// Returns the rates and the number of Newton steps taken.
    pub fn rates(&self, t: f64, y: &[f64], guess: &[f64]) -> Result<(Vec<f64>, usize)> {
        let mut d = guess.to_vec();
        let norm = |v: &[f64]| v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        let converged = |f: &[f64], d: &[f64]| {
            let scale = self.row_scale(t, y, d);
            f.iter().zip(&scale).all(|(r, s)| r.abs() <= NEWTON_TOL * s.max(1.0))
        };
        let mut f = self.residual(t, y, &d);
        if f.iter().any(|x| !x.is_finite()) {
            return Err(Error::Newton { t, message: "non-finite residual".into() });
        }
        for it in 0..NEWTON_MAX_ITER {
            if it > 0 && converged(&f, &d) {
                return Ok((d, it));
            }
            let j = self.jacobian(t, y, &d);
            let step = j
                .lu()
                .solve(&DVector::from_column_slice(&f))
                .ok_or_else(|| Error::Newton { t, message: "singular Jacobian".into() })?;
            let f0 = norm(&f);
            let mut lambda = 1.0;
            loop {
                let trial: Vec<f64> = d.iter().zip(step.iter()).map(|(a, s)| a - lambda * s).collect();
                let ft = self.residual(t, y, &trial);
                if ft.iter().all(|x| x.is_finite()) && (norm(&ft) < f0 || lambda < 1e-4) {
                    d = trial;
                    f = ft;
                    break;
                }
                lambda *= 0.5;
            }
            if norm(step.as_slice()) * lambda <= NEWTON_TOL * (1.0 + norm(&d)) && converged(&f, &d) {
                return Ok((d, it + 1));
            }
        }
        if converged(&f, &d) {
            return Ok((d, NEWTON_MAX_ITER));
        }
        Err(Error::Newton {
            t,
            message: format!("no convergence in {NEWTON_MAX_ITER} iterations (residual {:.3e})", norm(&f)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub variables: Vec<String>,
    pub t: Vec<f64>,
    /// State per report time.
    pub y: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn series(&self, k: usize) -> Vec<f64> {
        self.y.iter().map(|s| s[k]).collect()
    }

    pub fn to_dataset(&self, time_name: &str) -> Result<DataSet> {
        let channels = self
            .variables
            .iter()
            .enumerate()
            .map(|(k, v)| (v.clone(), self.series(k)))
            .collect();
        DataSet::new(time_name, self.t.clone(), channels)
    }

    pub fn write_csv(&self, path: &Path, time_name: &str) -> Result<()> {
        let mut s = String::new();
        s.push_str(time_name);
        for v in &self.variables {
            s.push(',');
            s.push_str(v);
        }
        s.push('\n');
        for (t, y) in self.t.iter().zip(&self.y) {
            let _ = write!(s, "{t:?}");
            for x in y {
                let _ = write!(s, ",{x:?}");
            }
            s.push('\n');
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

/// `n` uniform times covering `[t0, t1]`.
pub fn report_grid(t0: f64, t1: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![t1];
    }
    (0..n)
        .map(|i| if i + 1 == n { t1 } else { t0 + (t1 - t0) * i as f64 / (n - 1) as f64 })
        .collect()
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

/// Integrates `y' = f(t, y)` over `[t0, t1]`, reporting on `report_points`
/// uniform times.
pub fn integrate_fn<F>(
    mut f: F,
    y0: &[f64],
    t_span: (f64, f64),
    report_points: usize,
    settings: &SolveSettings,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let (t0, t1) = t_span;
    if !(t1 > t0) || !t0.is_finite() || !t1.is_finite() {
        return Err(Error::Config(format!("time span must satisfy t0 < t1, got ({t0}, {t1})")));
    }
    if report_points == 0 {
        return Err(Error::Config("solve.report_points must be positive".into()));
    }
    if y0.iter().any(|x| !x.is_finite()) {
        return Err(Error::Config("initial state must be finite".into()));
    }
    let n = y0.len();
    let span = t1 - t0;
    let grid = report_grid(t0, t1, report_points);
    let mut out = Vec::with_capacity(grid.len());
    let mut next = 0;
    while next < grid.len() && grid[next] <= t0 {
        out.push(y0.to_vec());
        next += 1;
    }

    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k: Vec<Vec<f64>> = vec![vec![0.0; n]; 7];
    k[0] = f(t, &y)?;
    check_finite(&k[0], t)?;
    let mut h = initial_step(&mut f, t, &y, &k[0], span, settings)?;
    let mut steps = 0;
    let mut rejected_last = false;
    let mut stage = vec![0.0; n];
    while t < t1 {
        if steps >= settings.max_steps {
            return Err(Error::Stiff { t, step: h });
        }
        if h < 1e-12 * span {
            return Err(Error::Stiff { t, step: h });
        }
        let last = t + h >= t1;
        if last {
            h = t1 - t;
        }
        let mut stage_failed = false;
        for s in 1..7 {
            for i in 0..n {
                stage[i] = y[i] + h * (0..s).map(|j| A[s][j] * k[j][i]).sum::<f64>();
            }
            match f(t + C[s] * h, &stage) {
                Ok(v) if v.iter().all(|x| x.is_finite()) => k[s] = v,
                _ => {
                    stage_failed = true;
                    break;
                }
            }
        }
        if stage_failed {
            // Treated like a rejected step with a sharp cut.
            h *= 0.25;
            rejected_last = true;
            steps += 1;
            continue;
        }
        let y_new: Vec<f64> = (0..n)
            .map(|i| y[i] + h * (0..6).map(|j| A[6][j] * k[j][i]).sum::<f64>())
            .collect();
        let mut err = 0.0;
        for i in 0..n {
            let e = h * (0..7).map(|j| E[j] * k[j][i]).sum::<f64>();
            let sc = settings.atol + settings.rtol * y[i].abs().max(y_new[i].abs());
            err += (e / sc).powi(2);
        }
        let err = (err / n as f64).sqrt();
        steps += 1;
        if !err.is_finite() {
            h *= 0.25;
            rejected_last = true;
            continue;
        }
        if err <= 1.0 {
            let k7 = f(t + h, &y_new)?;
            if k7.iter().any(|x| !x.is_finite()) || y_new.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence { last_good: t });
            }
            k[6] = k7;
            let t_new = if last { t1 } else { t + h };
            // Dense output on (t, t_new].
            while next < grid.len() && grid[next] <= t_new {
                let theta = (grid[next] - t) / h;
                out.push(dense(&y, &y_new, &k, h, theta));
                next += 1;
            }
            t = t_new;
            y = y_new;
            k[0] = k[6].clone();
            let fac = if err == 0.0 { 10.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 10.0) };
            h *= if rejected_last { fac.min(1.0) } else { fac };
            rejected_last = false;
        } else {
            h *= (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
            rejected_last = true;
        }
    }
    while out.len() < grid.len() {
        out.push(y.clone());
    }
    Ok((grid, out))
}

fn dense(y0: &[f64], y1: &[f64], k: &[Vec<f64>], h: f64, theta: f64) -> Vec<f64> {
    let t1 = 1.0 - theta;
    (0..y0.len())
        .map(|i| {
            let r2 = y1[i] - y0[i];
            let r3 = h * k[0][i] - r2;
            let r4 = r2 - h * k[6][i] - r3;
            let r5 = h * (0..7).map(|j| D[j] * k[j][i]).sum::<f64>();
            y0[i] + theta * (r2 + t1 * (r3 + theta * (r4 + t1 * r5)))
        })
        .collect()
}

fn check_finite(v: &[f64], t: f64) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence { last_good: t })
    }
}

/// Hairer's starting step heuristic.
fn initial_step<F>(f: &mut F, t: f64, y: &[f64], f0: &[f64], span: f64, s: &SolveSettings) -> Result<f64>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let n = y.len() as f64;
    let sc: Vec<f64> = y.iter().map(|x| s.atol + s.rtol * x.abs()).collect();
    let rms = |v: &[f64]| (v.iter().zip(&sc).map(|(a, c)| (a / c).powi(2)).sum::<f64>() / n).sqrt();
    let d0 = rms(y);
    let d1 = rms(f0);
    let mut h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h0 = h0.min(span);
    let y1: Vec<f64> = y.iter().zip(f0).map(|(a, b)| a + h0 * b).collect();
    let f1 = f(t + h0, &y1).unwrap_or_else(|_| f0.to_vec());
    let diff: Vec<f64> = f1.iter().zip(f0).map(|(a, b)| a - b).collect();
    let d2 = rms(&diff) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    Ok((100.0 * h0).min(h1).min(span).max(1e-12 * span * 10.0))
}

/// Integrates a resolved system. Newton is warm-started from the previous
/// evaluation's rates (zero at the start).
pub fn integrate(
    rs: &ResolvedSystem,
    y0: &[f64],
    t_span: (f64, f64),
    report_points: usize,
    settings: &SolveSettings,
) -> Result<Trajectory> {
    if y0.len() != rs.variables.len() {
        return Err(Error::Config(format!(
            "initial state has {} values for {} variables",
            y0.len(),
            rs.variables.len()
        )));
    }
    let mut guess = vec![0.0; y0.len()];
    let rhs = |t: f64, y: &[f64]| -> Result<Vec<f64>> {
        let (d, _) = rs.rates(t, y, &guess)?;
        guess.clone_from(&d);
        Ok(d)
    };
    let (t, y) = integrate_fn(rhs, y0, t_span, report_points, settings)?;
    Ok(Trajectory {
        variables: rs.variables.clone(),
        t,
        y,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub variables: Vec<String>,
    pub t: Vec<f64>,
    pub min: Vec<Vec<f64>>,
    pub max: Vec<Vec<f64>>,
    pub mean: Vec<Vec<f64>>,
    pub members: usize,
    pub excluded: usize,
}

/// Pointwise min, max and mean over trajectories on a shared grid.
pub fn envelope(trajectories: &[Trajectory], excluded: usize) -> Result<Envelope> {
    let first = trajectories
        .first()
        .ok_or_else(|| Error::Contract("envelope of an empty set".into()))?;
    if trajectories.iter().any(|tr| tr.t != first.t || tr.variables != first.variables) {
        return Err(Error::Contract("trajectories do not share a report grid".into()));
    }
    let m = first.variables.len();
    let count = trajectories.len() as f64;
    let mut min = first.y.clone();
    let mut max = first.y.clone();
    let mut mean = vec![vec![0.0; m]; first.t.len()];
    for tr in trajectories {
        for (i, y) in tr.y.iter().enumerate() {
            for k in 0..m {
                min[i][k] = min[i][k].min(y[k]);
                max[i][k] = max[i][k].max(y[k]);
                mean[i][k] += y[k] / count;
            }
        }
    }
    // Guard the ordering against rounding in the running mean.
    for i in 0..mean.len() {
        for k in 0..m {
            mean[i][k] = mean[i][k].clamp(min[i][k], max[i][k]);
        }
    }
    Ok(Envelope {
        variables: first.variables.clone(),
        t: first.t.clone(),
        min,
        max,
        mean,
        members: trajectories.len(),
        excluded,
    })
}

impl Envelope {
    pub fn write_csv(&self, path: &Path, time_name: &str) -> Result<()> {
        let mut s = String::from(time_name);
        for v in &self.variables {
            let _ = write!(s, ",{v}_min,{v}_mean,{v}_max");
        }
        s.push('\n');
        for i in 0..self.t.len() {
            let _ = write!(s, "{:?}", self.t[i]);
            for k in 0..self.variables.len() {
                let _ = write!(s, ",{:?},{:?},{:?}", self.min[i][k], self.mean[i][k], self.max[i][k]);
            }
            s.push('\n');
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    /// Fraction of observations inside the band, per variable.
    pub fn containment(&self, data: &DataSet) -> Vec<f64> {
        self.variables
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let Some(obs) = data.channel(v) else { return 0.0 };
                let mut inside = 0;
                for (tx, x) in data.grid().iter().zip(obs) {
                    let (lo, hi) = self.band_at(*tx, k);
                    if *x >= lo - 1e-9 && *x <= hi + 1e-9 {
                        inside += 1;
                    }
                }
                inside as f64 / obs.len() as f64
            })
            .collect()
    }

    fn band_at(&self, t: f64, k: usize) -> (f64, f64) {
        let i = self.t.partition_point(|x| *x < t).min(self.t.len() - 1);
        if i == 0 || (self.t[i] - t).abs() < 1e-12 {
            return (self.min[i][k], self.max[i][k]);
        }
        let w = (t - self.t[i - 1]) / (self.t[i] - self.t[i - 1]);
        let lerp = |a: f64, b: f64| a + w * (b - a);
        (lerp(self.min[i - 1][k], self.min[i][k]), lerp(self.max[i - 1][k], self.max[i][k]))
    }

    /// Band plot: shaded min/max, dashed mean, observations in red.
    pub fn to_svg(&self, data: Option<&DataSet>) -> String {
        let (w, h, pad) = (720.0, 260.0, 40.0);
        let panels = self.variables.len();
        let t0 = self.t[0];
        let t1 = *self.t.last().unwrap();
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{}" font-family="sans-serif" font-size="12">"#,
            h * panels as f64
        );
        for (k, var) in self.variables.iter().enumerate() {
            let obs = data.and_then(|d| d.channel(var).map(|c| (d.grid(), c)));
            let mut lo = self.min.iter().map(|r| r[k]).fold(f64::INFINITY, f64::min);
            let mut hi = self.max.iter().map(|r| r[k]).fold(f64::NEG_INFINITY, f64::max);
            if let Some((_, c)) = obs {
                lo = c.iter().copied().fold(lo, f64::min);
                hi = c.iter().copied().fold(hi, f64::max);
            }
            if !(hi > lo) {
                hi = lo + 1.0;
            }
            let oy = h * k as f64;
            let x = |t: f64| pad + (w - 2.0 * pad) * (t - t0) / (t1 - t0);
            let y = |v: f64| oy + h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo);
            let _ = writeln!(
                s,
                r#"<rect x="{pad}" y="{}" width="{}" height="{}" fill="none" stroke="black"/>"#,
                oy + pad,
                w - 2.0 * pad,
                h - 2.0 * pad
            );
            let _ = writeln!(s, r#"<text x="{}" y="{}">{var}</text>"#, pad, oy + pad - 8.0);
            let _ = writeln!(s, r#"<text x="{}" y="{}">{lo:.3}</text><text x="4" y="{}">{hi:.3}</text>"#, 4.0, oy + h - pad, oy + pad + 12.0);
            let mut band = String::new();
            for (i, t) in self.t.iter().enumerate() {
                let _ = write!(band, "{:.3},{:.3} ", x(*t), y(self.max[i][k]));
            }
            for (i, t) in self.t.iter().enumerate().rev() {
                let _ = write!(band, "{:.3},{:.3} ", x(*t), y(self.min[i][k]));
            }
            let _ = writeln!(s, r#"<polygon points="{}" fill="steelblue" fill-opacity="0.3" stroke="none"/>"#, band.trim_end());
            let mean: Vec<String> = self
                .t
                .iter()
                .enumerate()
                .map(|(i, t)| format!("{:.3},{:.3}", x(*t), y(self.mean[i][k])))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="black" stroke-dasharray="6,4"/>"#,
                mean.join(" ")
            );
            if let Some((g, c)) = obs {
                let pts: Vec<String> = g.iter().zip(c).map(|(t, v)| format!("{:.3},{:.3}", x(*t), y(*v))).collect();
                let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="red"/>"#, pts.join(" "));
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Outcome of solving a batch of sampled systems.
#[derive(Debug, Clone)]
pub struct BatchSolution {
    pub trajectories: Vec<(usize, Trajectory)>,
    /// Sample index and failure message.
    pub failures: Vec<(usize, String)>,
}

/// Resolves and integrates every sample; failures are collected, not raised.
pub fn solve_samples(
    samples: &[SampledSystem],
    axis: &str,
    y0: &[f64],
    t_span: (f64, f64),
    report_points: usize,
    settings: &SolveSettings,
    exec: Execution,
) -> BatchSolution {
    let results = map_indexed(samples.len(), exec, |i| {
        resolve(&samples[i], axis).and_then(|rs| integrate(&rs, y0, t_span, report_points, settings))
    });
    let mut out = BatchSolution {
        trajectories: Vec::new(),
        failures: Vec::new(),
    };
    for (s, r) in samples.iter().zip(results) {
        match r {
            Ok(tr) => out.trajectories.push((s.index, tr)),
            Err(e) => out.failures.push((s.index, e.to_string())),
        }
    }
    out
}

/// Lotka–Volterra system `u' = a u - b u v`, `v' = -c v + d u v`.
pub fn lotka_volterra(a: f64, b: f64, c: f64, d: f64) -> (Vec<String>, Vec<Equation>) {
    use crate::tokens::Term;
    let u = Equation::new(
        vec![
            Term::from_key("d1_u", 1.0).unwrap(),
            Term::from_key("u", a).unwrap(),
            Term::from_key("u*v", -b).unwrap(),
        ],
        0,
    )
    .unwrap();
    let v = Equation::new(
        vec![
            Term::from_key("d1_v", 1.0).unwrap(),
            Term::from_key("v", -c).unwrap(),
            Term::from_key("u*v", d).unwrap(),
        ],
        0,
    )
    .unwrap();
    (vec!["u".into(), "v".into()], vec![u, v])
}

/// Noise-free data from the Lotka–Volterra system, with exact derivative
/// fields attached.
pub fn simulate_lotka_volterra(
    params: (f64, f64, f64, f64),
    y0: (f64, f64),
    t_span: (f64, f64),
    points: usize,
) -> Result<DataSet> {
    let (a, b, c, d) = params;
    let (vars, eqs) = lotka_volterra(a, b, c, d);
    let rs = resolve_equations(&vars, &eqs, "t")?;
    let settings = SolveSettings {
        rtol: 1e-10,
        atol: 1e-12,
        ..SolveSettings::default()
    };
    let tr = integrate(&rs, &[y0.0, y0.1], t_span, points, &settings)?;
    let data = tr.to_dataset("t")?;
    let u = tr.series(0);
    let v = tr.series(1);
    let du = u.iter().zip(&v).map(|(u, v)| a * u - b * u * v).collect();
    let dv = u.iter().zip(&v).map(|(u, v)| -c * v + d * u * v).collect();
    data.with_derivative("u", 1, du)?.with_derivative("v", 1, dv)
}

/// First integral `d u - c ln u + b v - a ln v` of the Lotka–Volterra system.
pub fn lv_invariant(params: (f64, f64, f64, f64), u: f64, v: f64) -> f64 {
    let (a, b, c, d) = params;
    d * u - c * u.ln() + b * v - a * v.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::Term;

    fn single(eq: Equation) -> ResolvedSystem {
        resolve_equations(&["u".to_string()], &[eq], "t").unwrap()
    }

    fn eq(pairs: &[(&str, f64)]) -> Equation {
        Equation::new(pairs.iter().map(|(k, c)| Term::from_key(k, *c).unwrap()).collect(), 0).unwrap()
    }

    #[test]
    fn zero_rate_keeps_state() {
        // du/dt = 0 * u
        let rs = single(eq(&[("d1_u", 1.0), ("u", 0.0)]));
        let tr = integrate(&rs, &[5.0], (0.0, 2.0), 11, &SolveSettings::default()).unwrap();
        assert!(tr.y.iter().all(|s| s[0] == 5.0));
    }

    #[test]
    fn constant_rate() {
        let rs = single(eq(&[("d1_u", 1.0), ("const", 1.0)]));
        let (d, _) = rs.rates(0.3, &[2.0], &[0.0]).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn exponential_decay() {
        let rs = single(eq(&[("d1_u", 1.0), ("u", -1.0)]));
        let tr = integrate(&rs, &[1.0], (0.0, 1.0), 101, &SolveSettings::default()).unwrap();
        let err = tr
            .t
            .iter()
            .zip(&tr.y)
            .map(|(t, y)| (y[0] - (-t).exp()).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
        assert_eq!(tr.t.len(), 101);
        assert_eq!(*tr.t.last().unwrap(), 1.0);
    }

    #[test]
    fn explicit_system_takes_one_newton_step() {
        let (vars, eqs) = lotka_volterra(0.55, 0.028, 0.84, 0.026);
        let rs = resolve_equations(&vars, &eqs, "t").unwrap();
        let (d, iters) = rs.rates(0.0, &[30.0, 4.0], &[0.0, 0.0]).unwrap();
        assert_eq!(iters, 1);
        assert!((d[0] - (0.55 * 30.0 - 0.028 * 120.0)).abs() < 1e-12);
        assert!((d[1] - (-0.84 * 4.0 + 0.026 * 120.0)).abs() < 1e-12);
    }

    #[test]
    fn second_order_terms_are_rejected() {
        let e = eq(&[("d1_u", 1.0), ("d2_u", 0.5)]);
        assert!(matches!(
            resolve_equations(&["u".to_string()], &[e], "t"),
            Err(Error::InvalidEquation(_))
        ));
    }

    #[test]
    fn missing_own_derivative_is_rejected() {
        let e = eq(&[("d1_v", 1.0), ("u", 0.5)]);
        assert!(resolve_equations(&["u".to_string(), "v".to_string()], &[e.clone(), e], "t").is_err());
    }

    #[test]
    fn envelope_of_constants() {
        let mk = |c: f64| Trajectory {
            variables: vec!["u".into()],
            t: vec![0.0, 1.0],
            y: vec![vec![c], vec![c]],
        };
        let e = envelope(&[mk(1.0), mk(3.0)], 0).unwrap();
        assert!(e.min.iter().all(|r| r[0] == 1.0));
        assert!(e.max.iter().all(|r| r[0] == 3.0));
        assert!(e.mean.iter().all(|r| r[0] == 2.0));
        let one = envelope(&[mk(2.5)], 0).unwrap();
        assert_eq!(one.min, one.max);
        assert_eq!(one.mean, one.min);
        assert!(matches!(envelope(&[], 0), Err(Error::Contract(_))));
    }

    #[test]
    fn report_grid_hits_both_ends() {
        let g = report_grid(1900.0, 1920.0, 21);
        assert_eq!(g[0], 1900.0);
        assert_eq!(g[20], 1920.0);
        assert!((g[3] - 1903.0).abs() < 1e-12);
    }
}
