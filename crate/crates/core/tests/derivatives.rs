use std::path::Path;

use nalgebra::{DMatrix, DVector};

use eqdisc::dataio::{load_csv, DiffMethod, DiffSettings};

/// Quadratic least squares over the five points nearest `i` (shifted
/// inward at the ends), fitted around the window mean and differentiated
/// analytically at `t[i]`.
fn brute_force(t: &[f64], y: &[f64], i: usize) -> f64 {
    let lo = i.saturating_sub(2).min(t.len() - 5);
    let ts = &t[lo..lo + 5];
    let m = ts.iter().sum::<f64>() / 5.0;
    let a = DMatrix::from_fn(5, 3, |r, c| (ts[r] - m).powi(c as i32));
    let b = DVector::from_column_slice(&y[lo..lo + 5]);
    let c = a.svd(true, true).solve(&b, 1e-14).unwrap();
    c[1] + 2.0 * c[2] * (t[i] - m)
}

#[test]
fn smoothed_lynx_derivative_matches_windowed_fits() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/hudson-bay-lynx-hare.csv");
    let data = load_csv(&path, "Year", &["Lynx"]).unwrap();
    let settings = DiffSettings {
        method: DiffMethod::Smoothed,
        window: 5,
        max_order: 1,
    };
    let got = data.differentiate("Lynx", 1, &settings).unwrap();
    let got = got.derivative("Lynx", 1).unwrap();
    let (t, y) = (data.grid(), data.channel("Lynx").unwrap());
    for i in 0..t.len() {
        let want = brute_force(t, y, i);
        assert!((got[i] - want).abs() < 1e-10, "row {i}: {} vs {want}", got[i]);
    }
    // Interior rows on the unit grid reduce to the (-2, -1, 0, 1, 2) / 10 stencil.
    for i in 2..t.len() - 2 {
        let sg = (-2.0 * y[i - 2] - y[i - 1] + y[i + 1] + 2.0 * y[i + 2]) / 10.0;
        assert!((got[i] - sg).abs() < 1e-10);
    }
}
