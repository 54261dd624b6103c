//! Observational data on a shared time grid, plus numerical derivatives.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named channels on a strictly increasing grid, together with the
/// derivative fields computed so far.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    time_name: String,
    grid: Vec<f64>,
    /// Variable names in load order.
    names: Vec<String>,
    channels: BTreeMap<String, Vec<f64>>,
    derivatives: BTreeMap<(String, usize), Vec<f64>>,
    scales: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiffMethod {
    /// Second-order finite differences, one-sided at the ends.
    Central,
    /// Local quadratic least squares over an odd window.
    Smoothed,
    /// Interpolating not-a-knot cubic spline.
    Spline,
}

impl FromStr for DiffMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "central" => Ok(DiffMethod::Central),
            "smoothed" => Ok(DiffMethod::Smoothed),
            "spline" => Ok(DiffMethod::Spline),
            other => Err(Error::Config(format!(
                "diff.method must be central, smoothed or spline, got `{other}`"
            ))),
        }
    }
}

impl fmt::Display for DiffMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DiffMethod::Central => "central",
            DiffMethod::Smoothed => "smoothed",
            DiffMethod::Spline => "spline",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffSettings {
    pub method: DiffMethod,
    pub window: usize,
    pub max_order: usize,
}

impl Default for DiffSettings {
    fn default() -> Self {
        DiffSettings {
            method: DiffMethod::Spline,
            window: 5,
            max_order: 2,
        }
    }
}

impl DataSet {
    /// Builds a data set, checking the grid and channel invariants.
    pub fn new(
        time_name: impl Into<String>,
        grid: Vec<f64>,
        channels: Vec<(String, Vec<f64>)>,
    ) -> Result<Self> {
        if grid.len() < 3 {
            return Err(Error::Validation(format!(
                "need at least 3 grid points, got {}",
                grid.len()
            )));
        }
        if let Some(i) = grid.iter().position(|x| !x.is_finite()) {
            return Err(Error::Validation(format!("non-finite time value at row {i}")));
        }
        if let Some(i) = grid.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Validation(format!(
                "time values must be strictly increasing (row {} -> {})",
                i,
                i + 1
            )));
        }
        let mut names = Vec::with_capacity(channels.len());
        let mut map = BTreeMap::new();
        for (name, values) in channels {
            if values.len() != grid.len() {
                return Err(Error::Validation(format!(
                    "channel `{name}` has {} values for {} grid points",
                    values.len(),
                    grid.len()
                )));
            }
            if let Some(i) = values.iter().position(|x| !x.is_finite()) {
                return Err(Error::Validation(format!(
                    "channel `{name}` has a non-finite value at row {i}"
                )));
            }
            if map.insert(name.clone(), values).is_some() {
                return Err(Error::Validation(format!("duplicate channel `{name}`")));
            }
            names.push(name);
        }
        Ok(DataSet {
            time_name: time_name.into(),
            grid,
            names,
            channels: map,
            derivatives: BTreeMap::new(),
            scales: BTreeMap::new(),
        })
    }

    pub fn time_name(&self) -> &str {
        &self.time_name
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn variables(&self) -> &[String] {
        &self.names
    }

    pub fn channel(&self, name: &str) -> Option<&[f64]> {
        self.channels.get(name).map(Vec::as_slice)
    }

    /// Derivative field; order 0 is the channel itself.
    pub fn derivative(&self, name: &str, order: usize) -> Option<&[f64]> {
        if order == 0 {
            return self.channel(name);
        }
        self.derivatives
            .get(&(name.to_string(), order))
            .map(Vec::as_slice)
    }

    pub fn max_available_order(&self, name: &str) -> usize {
        self.derivatives
            .keys()
            .filter(|(n, _)| n == name)
            .map(|(_, o)| *o)
            .max()
            .unwrap_or(0)
    }

    /// Rescaling factors applied by [`DataSet::normalize_dispersion`].
    pub fn scales(&self) -> &BTreeMap<String, f64> {
        &self.scales
    }

    /// Returns a copy with `(variable, order)` added.
    pub fn differentiate(
        &self,
        variable: &str,
        order: usize,
        settings: &DiffSettings,
    ) -> Result<DataSet> {
        if order == 0 {
            return Err(Error::Config("derivative order must be positive".into()));
        }
        if order > settings.max_order {
            return Err(Error::Config(format!(
                "derivative order {order} exceeds diff.max_order = {}",
                settings.max_order
            )));
        }
        let values = self
            .channel(variable)
            .ok_or_else(|| Error::MissingChannel(variable.to_string()))?;
        let d = derivative(&self.grid, values, order, settings)?;
        let mut out = self.clone();
        out.derivatives.insert((variable.to_string(), order), d);
        Ok(out)
    }

    /// Returns a copy with a known derivative field attached.
    pub fn with_derivative(&self, variable: &str, order: usize, values: Vec<f64>) -> Result<DataSet> {
        if order == 0 {
            return Err(Error::Config("derivative order must be positive".into()));
        }
        if self.channel(variable).is_none() {
            return Err(Error::MissingChannel(variable.to_string()));
        }
        if values.len() != self.len() || values.iter().any(|x| !x.is_finite()) {
            return Err(Error::Validation(format!(
                "derivative of `{variable}` must hold {} finite values",
                self.len()
            )));
        }
        let mut out = self.clone();
        out.derivatives.insert((variable.to_string(), order), values);
        Ok(out)
    }

    /// Adds every derivative of every channel up to `settings.max_order`.
    pub fn with_all_derivatives(&self, settings: &DiffSettings) -> Result<DataSet> {
        let mut out = self.clone();
        for name in self.names.clone() {
            for order in 1..=settings.max_order {
                out = out.differentiate(&name, order, settings)?;
            }
        }
        Ok(out)
    }

    /// Divides every channel (and derivative) by its sample standard
    /// deviation. The factors are kept in [`DataSet::scales`].
    pub fn normalize_dispersion(&self) -> Result<DataSet> {
        let mut out = self.clone();
        for name in &self.names {
            let sd = sample_std(&self.channels[name]);
            if !(sd > 0.0) {
                return Err(Error::Validation(format!(
                    "channel `{name}` has zero dispersion"
                )));
            }
            for x in out.channels.get_mut(name).unwrap() {
                *x /= sd;
            }
            for ((n, _), d) in out.derivatives.iter_mut() {
                if n == name {
                    d.iter_mut().for_each(|x| *x /= sd);
                }
            }
            out.scales.insert(name.clone(), sd);
        }
        Ok(out)
    }

    /// Writes the grid and channels as CSV with round-trip float formatting.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut s = String::new();
        s.push_str(&self.time_name);
        for n in &self.names {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        for i in 0..self.grid.len() {
            s.push_str(&format!("{:?}", self.grid[i]));
            for n in &self.names {
                s.push_str(&format!(",{:?}", self.channels[n][i]));
            }
            s.push('\n');
        }
        f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn sample_std(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Loads `time_column` and `value_columns` from a headed CSV file.
pub fn load_csv(path: &Path, time_column: &str, value_columns: &[&str]) -> Result<DataSet> {
    let pairs: Vec<(&str, &str)> = value_columns.iter().map(|c| (*c, *c)).collect();
    load_csv_as(path, time_column, &pairs)
}

/// Like [`load_csv`] but renames each `(column, variable)` pair.
pub fn load_csv_as(path: &Path, time_column: &str, columns: &[(&str, &str)]) -> Result<DataSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?
        .clone();
    let index_of = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Load(format!("column `{name}` not found in {}", path.display())))
    };
    let time_idx = index_of(time_column)?;
    let value_idx = columns
        .iter()
        .map(|(c, _)| index_of(c))
        .collect::<Result<Vec<_>>>()?;

    let mut grid = Vec::new();
    let mut values = vec![Vec::new(); columns.len()];
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Load(format!("row {row}: {e}")))?;
        let cell = |idx: usize, name: &str| -> Result<f64> {
            let raw = record.get(idx).unwrap_or("");
            raw.parse::<f64>().map_err(|_| Error::Parse {
                row,
                column: name.to_string(),
                message: format!("`{raw}` is not a number"),
            })
        };
        grid.push(cell(time_idx, time_column)?);
        for (k, (col, _)) in columns.iter().enumerate() {
            values[k].push(cell(value_idx[k], col)?);
        }
    }
    let channels = columns
        .iter()
        .zip(values)
        .map(|((_, var), v)| (var.to_string(), v))
        .collect();
    DataSet::new(time_column, grid, channels)
}

fn derivative(grid: &[f64], values: &[f64], order: usize, s: &DiffSettings) -> Result<Vec<f64>> {
    let n = grid.len();
    if n < 2 * order + 1 {
        return Err(Error::Stencil(format!(
            "order {order} needs at least {} grid points, got {n}",
            2 * order + 1
        )));
    }
    match s.method {
        DiffMethod::Central => Ok(central(grid, values, order)),
        DiffMethod::Smoothed => smoothed(grid, values, order, s.window),
        DiffMethod::Spline => {
            if order > 2 {
                return Err(Error::Config("spline derivatives support order <= 2".into()));
            }
            if n < 4 {
                // The not-a-knot spline through three points is their parabola.
                Ok(central(grid, values, order))
            } else {
                Ok(spline(grid, values, order))
            }
        }
    }
}

/// Finite-difference weights for the `order`-th derivative at `x0` over
/// `nodes` (Fornberg's recursion).
pub(crate) fn fd_weights(x0: f64, nodes: &[f64], order: usize) -> Vec<f64> {
    let n = nodes.len();
    let m = order;
    let mut c = vec![vec![0.0; m + 1]; n];
    let mut c1 = 1.0;
    let mut c4 = nodes[0] - x0;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(m);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = nodes[i] - x0;
        for j in 0..i {
            let c3 = nodes[i] - nodes[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c.into_iter().map(|row| row[m]).collect()
}

fn central(grid: &[f64], values: &[f64], order: usize) -> Vec<f64> {
    let n = grid.len();
    // Centred stencils have an odd width; one-sided ones need one extra
    // point to keep second-order accuracy.
    let half = order.div_ceil(2);
    let width = 2 * half + 1;
    let edge_width = (order + 2).min(n);
    (0..n)
        .map(|i| {
            let (lo, w) = if i >= half && i + half < n {
                (i - half, width)
            } else if i < half {
                (0, edge_width)
            } else {
                (n - edge_width, edge_width)
            };
            let nodes = &grid[lo..lo + w];
            let wts = fd_weights(grid[i], nodes, order);
            wts.iter().zip(&values[lo..lo + w]).map(|(a, b)| a * b).sum()
        })
        .collect()
}

fn smoothed(grid: &[f64], values: &[f64], order: usize, window: usize) -> Result<Vec<f64>> {
    if window.is_multiple_of(2) || window < 3 {
        return Err(Error::Config(format!(
            "diff.window must be an odd number >= 3, got {window}"
        )));
    }
    let n = grid.len();
    if window > n {
        return Err(Error::Stencil(format!(
            "window {window} is wider than the grid ({n} points)"
        )));
    }
    let degree = order.max(2);
    let half = window / 2;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let lo = i.saturating_sub(half).min(n - window);
        let x0 = grid[i];
        let a = nalgebra::DMatrix::from_fn(window, degree + 1, |r, c| (grid[lo + r] - x0).powi(c as i32));
        let b = nalgebra::DVector::from_column_slice(&values[lo..lo + window]);
        let ata = a.transpose() * &a;
        let atb = a.transpose() * b;
        let coef = ata
            .lu()
            .solve(&atb)
            .ok_or_else(|| Error::Numeric("singular local fit".into()))?;
        let factorial: f64 = (1..=order).map(|k| k as f64).product();
        out.push(coef[order] * factorial);
    }
    Ok(out)
}

/// Slopes of the not-a-knot cubic spline through `(x, y)` at the knots.
fn spline_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let dx: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let slope: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / dx[i]).collect();
    let mut lower = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut upper = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    for i in 1..n - 1 {
        lower[i] = dx[i];
        diag[i] = 2.0 * (dx[i - 1] + dx[i]);
        upper[i] = dx[i - 1];
        rhs[i] = 3.0 * (dx[i] * slope[i - 1] + dx[i - 1] * slope[i]);
    }
    let d = x[2] - x[0];
    diag[0] = dx[1];
    upper[0] = d;
    rhs[0] = ((dx[0] + 2.0 * d) * dx[1] * slope[0] + dx[0] * dx[0] * slope[1]) / d;
    let d = x[n - 1] - x[n - 3];
    diag[n - 1] = dx[n - 3];
    lower[n - 1] = d;
    rhs[n - 1] = (dx[n - 2] * dx[n - 2] * slope[n - 3] + (2.0 * d + dx[n - 2]) * dx[n - 3] * slope[n - 2]) / d;
    solve_tridiagonal(&lower, &diag, &upper, &rhs)
}

fn spline(x: &[f64], y: &[f64], order: usize) -> Vec<f64> {
    let s = spline_slopes(x, y);
    if order == 1 {
        return s;
    }
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n - 1 {
        let h = x[i + 1] - x[i];
        let m = (y[i + 1] - y[i]) / h;
        out.push((6.0 * m - 4.0 * s[i] - 2.0 * s[i + 1]) / h);
    }
    let h = x[n - 1] - x[n - 2];
    let m = (y[n - 1] - y[n - 2]) / h;
    out.push((-6.0 * m + 2.0 * s[n - 2] + 4.0 * s[n - 1]) / h);
    out
}

/// Thomas algorithm; `lower[0]` and `upper[n-1]` are ignored.
fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = upper[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - lower[i] * c[i - 1];
        c[i] = if i + 1 < n { upper[i] / m } else { 0.0 };
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(n: usize, h: f64) -> Vec<f64> {
        (0..n).map(|i| i as f64 * h).collect()
    }

    fn settings(method: DiffMethod) -> DiffSettings {
        DiffSettings {
            method,
            window: 5,
            max_order: 2,
        }
    }

    fn ds(grid: Vec<f64>, u: Vec<f64>) -> DataSet {
        DataSet::new("t", grid, vec![("u".into(), u)]).unwrap()
    }

    #[test]
    fn central_is_exact_for_quadratics() {
        let t = uniform(11, 0.3);
        let u: Vec<f64> = t.iter().map(|x| x * x).collect();
        let d = ds(t.clone(), u)
            .differentiate("u", 1, &settings(DiffMethod::Central))
            .unwrap();
        for (x, v) in t.iter().zip(d.derivative("u", 1).unwrap()) {
            assert!((v - 2.0 * x).abs() < 1e-12, "{x}: {v}");
        }
    }

    #[test]
    fn central_second_derivative_of_quadratic() {
        let t = uniform(9, 0.5);
        let u: Vec<f64> = t.iter().map(|x| 3.0 * x * x - x).collect();
        let d = ds(t, u)
            .differentiate("u", 2, &settings(DiffMethod::Central))
            .unwrap();
        for v in d.derivative("u", 2).unwrap() {
            assert!((v - 6.0).abs() < 1e-10);
        }
    }

    #[test]
    fn central_sine_within_tolerance() {
        let t = uniform(629, 0.01);
        let u: Vec<f64> = t.iter().map(|x| x.sin()).collect();
        let d = ds(t.clone(), u)
            .differentiate("u", 1, &settings(DiffMethod::Central))
            .unwrap();
        let err = t
            .iter()
            .zip(d.derivative("u", 1).unwrap())
            .map(|(x, v)| (v - x.cos()).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-3, "sup error {err}");
    }

    #[test]
    fn spline_is_exact_for_cubics() {
        let t = vec![0.0, 0.4, 1.0, 1.3, 2.0, 2.9, 3.5];
        let u: Vec<f64> = t.iter().map(|x| x * x * x - 2.0 * x).collect();
        let d = ds(t.clone(), u)
            .differentiate("u", 1, &settings(DiffMethod::Spline))
            .unwrap()
            .differentiate("u", 2, &settings(DiffMethod::Spline))
            .unwrap();
        for (i, x) in t.iter().enumerate() {
            assert!((d.derivative("u", 1).unwrap()[i] - (3.0 * x * x - 2.0)).abs() < 1e-9);
            assert!((d.derivative("u", 2).unwrap()[i] - 6.0 * x).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_channel_has_zero_derivative() {
        for m in [DiffMethod::Central, DiffMethod::Smoothed, DiffMethod::Spline] {
            let t = uniform(12, 1.0);
            let d = ds(t, vec![4.2; 12]).differentiate("u", 1, &settings(m)).unwrap();
            assert!(d.derivative("u", 1).unwrap().iter().all(|v| v.abs() < 1e-12), "{m}");
        }
    }

    #[test]
    fn order_zero_is_channel() {
        let d = ds(uniform(4, 1.0), vec![1.0, 2.0, 3.0, 5.0]);
        assert_eq!(d.derivative("u", 0), d.channel("u"));
    }

    #[test]
    fn rejects_bad_grids_and_orders() {
        assert!(matches!(
            DataSet::new("t", vec![0.0, 1.0, 1.0], vec![("u".into(), vec![0.0; 3])]),
            Err(Error::Validation(_))
        ));
        assert!(DataSet::new("t", vec![0.0, 1.0], vec![]).is_err());
        let d = ds(uniform(4, 1.0), vec![0.0; 4]);
        let s = DiffSettings { max_order: 1, ..settings(DiffMethod::Central) };
        assert!(matches!(d.differentiate("u", 2, &s), Err(Error::Config(_))));
        assert!(matches!(
            d.differentiate("u", 2, &settings(DiffMethod::Central)),
            Err(Error::Stencil(_))
        ));
        assert!(matches!(
            d.differentiate("w", 1, &s),
            Err(Error::MissingChannel(_))
        ));
    }

    #[test]
    fn fornberg_matches_textbook_weights() {
        let w = fd_weights(0.0, &[-1.0, 0.0, 1.0], 1);
        assert_eq!(w, vec![-0.5, 0.0, 0.5]);
        let w = fd_weights(0.0, &[0.0, 1.0, 2.0], 1);
        assert_eq!(w, vec![-1.5, 2.0, -0.5]);
        let w = fd_weights(0.0, &[-1.0, 0.0, 1.0], 2);
        assert_eq!(w, vec![1.0, -2.0, 1.0]);
    }
}
