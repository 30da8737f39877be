//! Central finite differences, the independent oracle for every analytic
//! gradient in the workspace.

use crate::error::{Result, TensorError};

pub const MIN_STEP: f64 = 1e-7;
pub const MAX_STEP: f64 = 1e-3;

/// Estimates the gradient of `f` at `params` by `(f(x+h) - f(x-h)) / 2h` per coordinate.
pub fn finite_difference_grad<F>(mut f: F, params: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let coords: Vec<usize> = (0..params.len()).collect();
    finite_difference_coords(&mut f, params, step, &coords)
}

/// Like [`finite_difference_grad`] but only probes the listed coordinates;
/// the result is aligned with `coords`.
pub fn finite_difference_coords<F>(
    f: &mut F,
    params: &[f64],
    step: f64,
    coords: &[usize],
) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(MIN_STEP..=MAX_STEP).contains(&step) {
        return Err(TensorError::InvalidArgument(format!(
            "finite-difference step {step} outside [{MIN_STEP}, {MAX_STEP}]"
        )));
    }
    let mut x = params.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        if i >= x.len() {
            return Err(TensorError::IndexOutOfRange {
                op: "finite_difference",
                index: i,
                extent: x.len(),
            });
        }
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x);
        x[i] = orig - step;
        let minus = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(TensorError::NonFiniteProbe { coordinate: i });
        }
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// Scale floor below which gradient entries are compared absolutely.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, floor)`, maximized over entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_ERROR_FLOOR))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::sigmoid;

    #[test]
    fn square_at_three() {
        let g = finite_difference_grad(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let g = finite_difference_grad(|x| sigmoid(x[0]), &[0.0], 1e-5).unwrap();
        assert!((g[0] - 0.25).abs() < 1e-8);
    }

    #[test]
    fn step_range_enforced() {
        assert!(finite_difference_grad(|x| x[0], &[0.0], 1e-2).is_err());
        assert!(finite_difference_grad(|x| x[0], &[0.0], 1e-9).is_err());
    }

    #[test]
    fn non_finite_reports_coordinate() {
        let err = finite_difference_grad(
            |x| if x[1] > 0.5 { f64::NAN } else { 0.0 },
            &[0.0, 0.5],
            1e-5,
        )
        .unwrap_err();
        assert_eq!(err, TensorError::NonFiniteProbe { coordinate: 1 });
    }
}
