//! Central finite-difference gradient checking.

use crate::error::Result;

/// One evaluation of the function under test.
#[derive(Debug, Clone)]
pub struct Probe {
    pub value: f64,
    /// Piecewise-branch signature, see [`super::Graph::kink_signature`].
    pub signature: u64,
    /// Analytic gradient, requested only at the base point.
    pub grad: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct CheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Coordinates whose branch signature changes within `kink_factor * eps`
    /// are excluded.
    pub kink_factor: f64,
    /// Relative error denominator floor.
    pub abs_floor: f64,
    /// Subset of coordinates to check; all when `None`.
    pub coords: Option<Vec<usize>>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, tol: 1e-4, kink_factor: 10.0, abs_floor: 1e-6, coords: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// Coordinate of `max_rel_error`.
    pub worst_coord: Option<usize>,
    pub checked: usize,
    pub excluded: usize,
    /// Coordinates above tolerance.
    pub failures: Vec<usize>,
    pub passed: bool,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the analytic gradient of `f` at `x` with
/// `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps`.
///
/// `f(x, want_grad)` must return the analytic gradient when `want_grad` is set.
pub fn gradient_check<F>(f: F, x: &[f64], opts: &CheckOptions) -> Result<GradReport>
where
    F: Fn(&[f64], bool) -> Result<Probe>,
{
    let base = f(x, true)?;
    let analytic = base.grad.unwrap_or_else(|| vec![0.0; x.len()]);
    let coords: Vec<usize> = opts.coords.clone().unwrap_or_else(|| (0..x.len()).collect());
    let mut report = GradReport { max_rel_error: 0.0, worst_coord: None, checked: 0, excluded: 0, failures: Vec::new(), passed: true };
    let mut probe = x.to_vec();
    let mut eval_at = |i: usize, delta: f64| -> Result<Probe> {
        probe[i] = x[i] + delta;
        let p = f(&probe, false);
        probe[i] = x[i];
        p
    };
    for &i in &coords {
        let wide = opts.kink_factor * opts.eps;
        let far_plus = eval_at(i, wide)?;
        let far_minus = eval_at(i, -wide)?;
        if far_plus.signature != base.signature || far_minus.signature != base.signature {
            report.excluded += 1;
            continue;
        }
        let plus = eval_at(i, opts.eps)?;
        let minus = eval_at(i, -opts.eps)?;
        let numeric = (plus.value - minus.value) / (2.0 * opts.eps);
        let err = relative_error(analytic[i], numeric, opts.abs_floor);
        report.checked += 1;
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
            report.worst_coord = Some(i);
        }
        if !(err <= opts.tol) {
            report.failures.push(i);
        }
    }
    report.passed = report.failures.is_empty();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Graph, Tensor};

    fn sum_of_squares(x: &[f64], want: bool) -> Result<Probe> {
        let mut g = Graph::new();
        let v = g.param(Tensor::vector(x.to_vec()));
        let sq = g.mul(v, v)?;
        let loss = g.sum(sq);
        let value = g.item(loss);
        let signature = g.kink_signature();
        let grad = if want { Some(g.backward(loss)?.get_or_zeros(v, x.len())) } else { None };
        Ok(Probe { value, signature, grad })
    }

    #[test]
    fn quadratic_is_exact() {
        let x = [0.3, -1.2, 2.5, 0.0, 7.0];
        let r = gradient_check(sum_of_squares, &x, &CheckOptions::default()).unwrap();
        assert!(r.passed);
        assert_eq!(r.checked, 5);
        assert!(r.max_rel_error <= 1e-7, "{}", r.max_rel_error);
    }

    fn smooth_l1_probe(x: &[f64], want: bool) -> Result<Probe> {
        let mut g = Graph::new();
        let v = g.param(Tensor::vector(x.to_vec()));
        let s = g.smooth_l1(v);
        let loss = g.sum(s);
        let value = g.item(loss);
        let signature = g.kink_signature();
        let grad = if want { Some(g.backward(loss)?.get_or_zeros(v, x.len())) } else { None };
        Ok(Probe { value, signature, grad })
    }

    #[test]
    fn smooth_l1_pieces_and_kink_exclusion() {
        let r = gradient_check(smooth_l1_probe, &[0.5, 2.0, -3.0], &CheckOptions::default()).unwrap();
        assert!(r.passed && r.excluded == 0);
        let analytic = smooth_l1_probe(&[0.5, 2.0], true).unwrap().grad.unwrap();
        assert_eq!(analytic, vec![0.5, 1.0]);
        // within 10 eps of the |x| = 1 kink
        let r = gradient_check(smooth_l1_probe, &[1.0 + 5e-5, 0.2], &CheckOptions::default()).unwrap();
        assert_eq!((r.excluded, r.checked), (1, 1));
    }

    #[test]
    fn wrong_gradient_fails_with_coordinate() {
        let bad = |x: &[f64], want: bool| -> Result<Probe> {
            let mut p = sum_of_squares(x, want)?;
            if let Some(g) = p.grad.as_mut() {
                g[2] += 1.0;
            }
            Ok(p)
        };
        let r = gradient_check(bad, &[1.0, 2.0, 3.0], &CheckOptions::default()).unwrap();
        assert!(!r.passed);
        assert_eq!(r.failures, vec![2]);
        assert_eq!(r.worst_coord, Some(2));
    }
}
