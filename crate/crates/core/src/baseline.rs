//! Fixed-library baseline: sequential thresholded least squares with
//! library bagging followed by row bagging.
//!
//! Phase one fits random subsets of the library on all rows and records how
//! often each term survives thresholding when it was offered. Terms kept in
//! at least `inclusion` of their trials form the reduced library. Phase two
//! fits the reduced library on bootstrap resamples of the rows; its
//! coefficients give the reported means and intervals.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{sample_std, DataSet};
use crate::error::{Error, Result};
use crate::parallel::{map_indexed, mix_seed, stream_rng, Execution};
use crate::tokens::{evaluate_term, Term, Token};

/// Library templates over the two state variables `x` and `y`, in
/// reporting order.
pub const LIBRARY: [&[usize]; 10] = [
    &[0],
    &[0, 1],
    &[1],
    &[0, 0],
    &[1, 1],
    &[],
    &[0, 1, 1],
    &[0, 0, 1],
    &[0, 0, 0],
    &[1, 1, 1],
];

#[derive(Debug, Clone, PartialEq)]
pub struct FixedLibrary {
    pub terms: Vec<Term>,
    pub columns: Vec<Vec<f64>>,
}

impl FixedLibrary {
    pub fn keys(&self) -> Vec<String> {
        self.terms.iter().map(Term::key).collect()
    }
}

/// The ten polynomial terms over `variables = [x, y]`.
pub fn build_library(data: &DataSet, variables: &[String]) -> Result<FixedLibrary> {
    if variables.len() != 2 {
        return Err(Error::Config(format!(
            "the fixed library needs exactly 2 state variables, got {}",
            variables.len()
        )));
    }
    let terms: Vec<Term> = LIBRARY
        .iter()
        .map(|tpl| {
            if tpl.is_empty() {
                Term::of(vec![Token::Constant])
            } else {
                Term::of(tpl.iter().map(|&i| Token::field(&variables[i])).collect())
            }
        })
        .collect();
    let columns = terms
        .iter()
        .map(|t| evaluate_term(t, data))
        .collect::<Result<Vec<_>>>()?;
    if columns.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("library evaluation is not finite".into()));
    }
    Ok(FixedLibrary { terms, columns })
}

fn least_squares(cols: &[&[f64]], y: &[f64]) -> Option<Vec<f64>> {
    let n = y.len();
    let p = cols.len();
    if p == 0 {
        return Some(Vec::new());
    }
    if n < p {
        return None;
    }
    let a = DMatrix::from_fn(n, p, |i, j| cols[j][i]);
    let b = DVector::from_column_slice(y);
    let svd = a.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > smax * 1e-12) {
        return None;
    }
    svd.solve(&b, 0.0).ok().map(|x| x.as_slice().to_vec())
}

/// Sequential thresholded least squares: refit on the terms whose
/// magnitude reaches `threshold` until the support stops changing.
/// Returns `None` when a reduced system is singular.
pub fn stlsq(columns: &[&[f64]], y: &[f64], threshold: f64) -> Option<Vec<f64>> {
    let p = columns.len();
    let mut active: Vec<bool> = vec![true; p];
    let mut coef = vec![0.0; p];
    for _ in 0..=p {
        let idx: Vec<usize> = (0..p).filter(|&j| active[j]).collect();
        let sub: Vec<&[f64]> = idx.iter().map(|&j| columns[j]).collect();
        let sol = least_squares(&sub, y)?;
        coef = vec![0.0; p];
        for (&j, c) in idx.iter().zip(sol) {
            coef[j] = c;
        }
        let next: Vec<bool> = (0..p).map(|j| active[j] && coef[j].abs() >= threshold).collect();
        if next == active {
            return Some(coef);
        }
        active = next;
    }
    Some(coef)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineSettings {
    pub n_boot: usize,
    pub keep_fraction: f64,
    pub threshold: f64,
    /// Minimum selection rate (when offered) for a term to enter phase two.
    pub inclusion: f64,
    /// Fit on variables scaled to unit sample deviation; coefficients are
    /// mapped back before reporting.
    pub normalize: bool,
    pub resample_rows: bool,
}

impl Default for BaselineSettings {
    fn default() -> Self {
        BaselineSettings {
            n_boot: 1000,
            keep_fraction: 0.9,
            threshold: 0.3,
            inclusion: 0.5,
            normalize: true,
            resample_rows: true,
        }
    }
}

impl BaselineSettings {
    pub fn validate(&self) -> Result<()> {
        if self.n_boot == 0 {
            return Err(Error::Config("baseline.n_boot must be positive".into()));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "baseline.keep_fraction must lie in (0, 1], got {}",
                self.keep_fraction
            )));
        }
        if !(self.threshold >= 0.0) {
            return Err(Error::Config("baseline.threshold must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermStat {
    pub key: String,
    /// Phase-one selection rate among trials that offered the term.
    pub inclusion: f64,
    /// Phase-two rate of nonzero coefficients.
    pub presence: f64,
    pub mean: Option<f64>,
    /// 95% interval half-width of the mean.
    pub half_width: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineEquation {
    pub variable: String,
    pub terms: Vec<TermStat>,
    /// Terms nonzero in at least half of the phase-two trials.
    pub active: Vec<String>,
    pub skipped: usize,
}

impl BaselineEquation {
    pub fn mean(&self, key: &str) -> Option<f64> {
        self.terms.iter().find(|t| t.key == key).and_then(|t| t.mean)
    }

    pub fn render(&self) -> String {
        let lhs = Term::of(vec![Token::deriv(&self.variable, 1)]).display();
        let rhs: Vec<String> = self
            .terms
            .iter()
            .filter(|t| self.active.contains(&t.key))
            .map(|t| {
                let name = Term::from_key(&t.key, 1.0).map(|x| x.display()).unwrap_or_else(|_| t.key.clone());
                match (t.mean, t.half_width) {
                    (Some(m), Some(h)) => format!("({m:.4} ± {h:.4})*{name}"),
                    (Some(m), None) => format!("{m:.4}*{name}"),
                    _ => name,
                }
            })
            .collect();
        format!("{lhs} = {}", if rhs.is_empty() { "0".into() } else { rhs.join(" + ") })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub settings: BaselineSettings,
    pub equations: Vec<BaselineEquation>,
}

impl BaselineReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for e in &self.equations {
            let _ = writeln!(s, "{}", e.render());
        }
        s
    }
}

/// Per-trial coefficient vectors (in fitting scale); `None` for skipped.
#[allow(clippy::too_many_arguments)]
fn trials(
    cols: &[&[f64]],
    y: &[f64],
    offered: &[bool],
    s: &BaselineSettings,
    resample: bool,
    library_bagging: bool,
    seed: u64,
    exec: Execution,
) -> Vec<Option<(Vec<bool>, Vec<f64>)>> {
    let n = y.len();
    let p = cols.len();
    map_indexed(s.n_boot, exec, |b| {
        let mut rng = stream_rng(seed, b as u64);
        let mut keep: Vec<bool> = (0..p)
            .map(|j| offered[j] && (!library_bagging || rng.gen::<f64>() < s.keep_fraction))
            .collect();
        if !keep.iter().any(|&k| k) {
            let pool: Vec<usize> = (0..p).filter(|&j| offered[j]).collect();
            if pool.is_empty() {
                return Some((keep, vec![0.0; p]));
            }
            keep[pool[rng.gen_range(0..pool.len())]] = true;
        }
        let rows: Vec<usize> = if resample {
            (0..n).map(|_| rng.gen_range(0..n)).collect()
        } else {
            (0..n).collect()
        };
        let idx: Vec<usize> = (0..p).filter(|&j| keep[j]).collect();
        let sub: Vec<Vec<f64>> = idx.iter().map(|&j| rows.iter().map(|&r| cols[j][r]).collect()).collect();
        let sub_ref: Vec<&[f64]> = sub.iter().map(Vec::as_slice).collect();
        let yr: Vec<f64> = rows.iter().map(|&r| y[r]).collect();
        let c = stlsq(&sub_ref, &yr, s.threshold)?;
        let mut full = vec![0.0; p];
        for (&j, v) in idx.iter().zip(c) {
            full[j] = v;
        }
        Some((keep, full))
    })
}

/// Runs both bagging phases for the first-derivative equation of every
/// variable.
pub fn bootstrap_discover(
    data: &DataSet,
    variables: &[String],
    settings: &BaselineSettings,
    seed: u64,
    exec: Execution,
) -> Result<BaselineReport> {
    settings.validate()?;
    let library = build_library(data, variables)?;
    let p = library.terms.len();
    let scale: Vec<f64> = variables
        .iter()
        .map(|v| {
            let s = sample_std(data.channel(v).unwrap());
            if settings.normalize && s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    // Scale of each library column: product of its factors' scales.
    let col_scale: Vec<f64> = LIBRARY
        .iter()
        .map(|tpl| tpl.iter().map(|&i| scale[i]).product())
        .collect();
    let cols: Vec<Vec<f64>> = library
        .columns
        .iter()
        .zip(&col_scale)
        .map(|(c, s)| c.iter().map(|x| x / s).collect())
        .collect();
    let cols_ref: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
    let mut equations = Vec::new();
    for (k, var) in variables.iter().enumerate() {
        let dy = data
            .derivative(var, 1)
            .ok_or_else(|| Error::MissingDerivative { variable: var.clone(), order: 1 })?;
        let y: Vec<f64> = dy.iter().map(|x| x / scale[k]).collect();

        let phase1 = trials(
            &cols_ref,
            &y,
            &vec![true; p],
            settings,
            false,
            true,
            mix_seed(&[seed, k as u64, 1]),
            exec,
        );
        let mut offered = vec![0usize; p];
        let mut chosen = vec![0usize; p];
        let mut skipped = 0;
        for t in &phase1 {
            match t {
                Some((keep, c)) => {
                    for j in 0..p {
                        offered[j] += keep[j] as usize;
                        chosen[j] += (c[j] != 0.0) as usize;
                    }
                }
                None => skipped += 1,
            }
        }
        let inclusion: Vec<f64> = (0..p)
            .map(|j| if offered[j] > 0 { chosen[j] as f64 / offered[j] as f64 } else { 0.0 })
            .collect();
        let reduced: Vec<bool> = inclusion.iter().map(|&r| r >= settings.inclusion && r > 0.0).collect();

        let phase2 = trials(
            &cols_ref,
            &y,
            &reduced,
            settings,
            settings.resample_rows,
            false,
            mix_seed(&[seed, k as u64, 2]),
            exec,
        );
        let fitted: Vec<Vec<f64>> = phase2.into_iter().flatten().map(|(_, c)| c).collect();
        skipped += settings.n_boot - fitted.len();
        let mut terms = Vec::with_capacity(p);
        let mut active = Vec::new();
        for j in 0..p {
            let back = scale[k] / col_scale[j];
            let vals: Vec<f64> = fitted.iter().map(|c| c[j]).filter(|&c| c != 0.0).map(|c| c * back).collect();
            let presence = if fitted.is_empty() { 0.0 } else { vals.len() as f64 / fitted.len() as f64 };
            let mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
            let half_width = (vals.len() >= 2).then(|| 1.96 * sample_std(&vals) / (vals.len() as f64).sqrt());
            let key = library.terms[j].key();
            if presence >= 0.5 {
                active.push(key.clone());
            }
            terms.push(TermStat {
                key,
                inclusion: inclusion[j],
                presence,
                mean,
                half_width,
            });
        }
        equations.push(BaselineEquation {
            variable: var.clone(),
            terms,
            active,
            skipped,
        });
    }
    Ok(BaselineReport {
        settings: *settings,
        equations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data() -> DataSet {
        let t: Vec<f64> = (0..30).map(|i| i as f64 * 0.1).collect();
        let u: Vec<f64> = t.iter().map(|x| 2.0 + x.sin()).collect();
        let v: Vec<f64> = t.iter().map(|x| 1.5 + (0.7 * x).cos()).collect();
        DataSet::new("t", t, vec![("u".into(), u), ("v".into(), v)]).unwrap()
    }

    fn vars() -> Vec<String> {
        vec!["u".into(), "v".into()]
    }

    #[test]
    fn library_order() {
        let lib = build_library(&data(), &vars()).unwrap();
        assert_eq!(
            lib.keys(),
            vec!["u", "u*v", "v", "u*u", "v*v", "const", "u*v*v", "u*u*v", "u*u*u", "v*v*v"]
        );
    }

    #[test]
    fn zero_threshold_is_least_squares() {
        let t: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let u: Vec<f64> = (0..30).map(|i| 0.5 + ((i * 37) % 29) as f64 / 20.0).collect();
        let v: Vec<f64> = (0..30).map(|i| 0.5 + ((i * 11 + 5) % 31) as f64 / 20.0).collect();
        let d = DataSet::new("t", t, vec![("u".into(), u), ("v".into(), v)]).unwrap();
        let lib = build_library(&d, &vars()).unwrap();
        let cols: Vec<&[f64]> = lib.columns.iter().map(Vec::as_slice).collect();
        let y: Vec<f64> = (0..30).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let c = stlsq(&cols, &y, 0.0).unwrap();
        // Normal equations oracle.
        let a = DMatrix::from_fn(30, 10, |i, j| cols[j][i]);
        let ata = a.transpose() * &a;
        let aty = a.transpose() * DVector::from_column_slice(&y);
        let x = ata.cholesky().unwrap().solve(&aty);
        let scale = x.amax().max(1.0);
        for j in 0..10 {
            assert!((c[j] - x[j]).abs() < 1e-8 * scale, "{j}: {} vs {}", c[j], x[j]);
        }
    }

    #[test]
    fn stlsq_is_a_fixpoint() {
        let lib = build_library(&data(), &vars()).unwrap();
        let cols: Vec<&[f64]> = lib.columns.iter().map(Vec::as_slice).collect();
        let y: Vec<f64> = lib.columns[0].iter().zip(&lib.columns[1]).map(|(a, b)| 0.8 * a - 0.3 * b).collect();
        let c = stlsq(&cols, &y, 0.05).unwrap();
        let kept: Vec<usize> = (0..10).filter(|&j| c[j] != 0.0).collect();
        let sub: Vec<&[f64]> = kept.iter().map(|&j| cols[j]).collect();
        let again = stlsq(&sub, &y, 0.05).unwrap();
        for (k, &j) in kept.iter().enumerate() {
            assert!((again[k] - c[j]).abs() < 1e-12);
        }
        assert!((c[0] - 0.8).abs() < 1e-8 && (c[1] + 0.3).abs() < 1e-8);
    }

    #[test]
    fn zero_response_gives_zero_coefficients() {
        let d = data()
            .with_derivative("u", 1, vec![0.0; 30])
            .unwrap()
            .with_derivative("v", 1, vec![0.0; 30])
            .unwrap();
        let s = BaselineSettings {
            n_boot: 20,
            ..BaselineSettings::default()
        };
        let r = bootstrap_discover(&d, &vars(), &s, 1, Execution::Sequential).unwrap();
        for e in &r.equations {
            assert!(e.active.is_empty());
            assert!(e.terms.iter().all(|t| t.mean.is_none()));
        }
    }

    #[test]
    fn no_resampling_collapses_to_a_point() {
        let d = data();
        let du: Vec<f64> = d.channel("u").unwrap().iter().zip(d.channel("v").unwrap()).map(|(u, v)| 0.5 * u - 0.2 * u * v).collect();
        let dv: Vec<f64> = d.channel("v").unwrap().iter().map(|v| -0.4 * v).collect();
        let d = d.with_derivative("u", 1, du).unwrap().with_derivative("v", 1, dv).unwrap();
        let s = BaselineSettings {
            n_boot: 30,
            keep_fraction: 1.0,
            threshold: 0.0,
            normalize: false,
            resample_rows: false,
            ..BaselineSettings::default()
        };
        let r = bootstrap_discover(&d, &vars(), &s, 1, Execution::Sequential).unwrap();
        for t in &r.equations[0].terms {
            if let Some(h) = t.half_width {
                assert!(h < 1e-9, "{}: {h}", t.key);
            }
        }
        assert!((r.equations[0].mean("u").unwrap() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn normalization_reports_original_scale() {
        let d = data();
        let du: Vec<f64> = d.channel("u").unwrap().iter().zip(d.channel("v").unwrap()).map(|(u, v)| 0.5 * u - 0.2 * u * v).collect();
        let dv: Vec<f64> = d.channel("v").unwrap().iter().map(|v| -0.4 * v).collect();
        let d = d.with_derivative("u", 1, du).unwrap().with_derivative("v", 1, dv).unwrap();
        let s = BaselineSettings {
            n_boot: 50,
            threshold: 0.01,
            ..BaselineSettings::default()
        };
        let r = bootstrap_discover(&d, &vars(), &s, 4, Execution::Sequential).unwrap();
        assert_eq!(r.equations[0].active, vec!["u", "u*v"]);
        assert!((r.equations[0].mean("u*v").unwrap() + 0.2).abs() < 1e-8);
        assert!((r.equations[1].mean("v").unwrap() + 0.4).abs() < 1e-8);
    }
}
