//! Central finite-difference verification of analytic gradients.

/// Step used for central differences in `f64`.
pub const FD_EPSILON: f64 = 1e-5;

/// Largest accepted relative error between analytic and numeric gradients.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

/// Gradient components smaller than `RELATIVE_FLOOR · max(1, |f|)` are
/// compared in absolute terms: central differences carry a round-off error
/// of about `ε_mach·|f| / ε`, roughly 2e-11·|f| at the default step.
pub const RELATIVE_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradientReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Checks every coordinate of `f`'s gradient at `point`.
/// `f` returns the loss value and its analytic gradient.
pub fn check_gradients<F>(f: F, point: &[f64], epsilon: f64) -> GradientReport
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let all: Vec<usize> = (0..point.len()).collect();
    check_gradients_on(f, point, epsilon, &all)
}

/// Like [`check_gradients`], restricted to the coordinates in `indices`.
pub fn check_gradients_on<F>(f: F, point: &[f64], epsilon: f64, indices: &[usize]) -> GradientReport
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (value, analytic) = f(point);
    let floor = RELATIVE_FLOOR * value.abs().max(1.0);
    assert_eq!(analytic.len(), point.len(), "gradient length");
    let mut x = point.to_vec();
    let mut report = GradientReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: indices.len(),
    };
    for &i in indices {
        let orig = x[i];
        x[i] = orig + epsilon;
        let plus = f(&x).0;
        x[i] = orig - epsilon;
        let minus = f(&x).0;
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(floor);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error || rel.is_nan() {
            report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    report
}
