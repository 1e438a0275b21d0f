//! Central finite-difference gradient checking.
//!
//! The checker perturbs each input coordinate by ±eps, re-evaluates the
//! scalar function from scratch, and compares the quotient against the
//! analytic gradient. It never touches the tape internals, so it stays an
//! independent oracle for every backward rule.

/// Default perturbation for 64-bit central differences.
pub const FD_EPS: f64 = 1e-5;

/// Default per-coordinate relative error bound.
pub const FD_TOL: f64 = 1e-4;

/// Worst coordinate found by a gradient comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = f(&probe);
        probe[i] = orig - eps;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// Relative error with a floor that keeps near-zero coordinates meaningful:
/// `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares an analytic gradient against central finite differences of `f`.
pub fn compare_gradients(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    eps: f64,
) -> GradCheckReport {
    assert_eq!(
        x.len(),
        analytic.len(),
        "gradient length {} does not match input length {}",
        analytic.len(),
        x.len()
    );
    let numeric = numeric_gradient(f, x, eps);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic_at_worst: analytic.first().copied().unwrap_or(0.0),
        numeric_at_worst: numeric.first().copied().unwrap_or(0.0),
    };
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = relative_error(a, n);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
            report.analytic_at_worst = a;
            report.numeric_at_worst = n;
        }
    }
    report
}
