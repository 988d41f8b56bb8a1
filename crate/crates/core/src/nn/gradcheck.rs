/// Agreement between an analytic gradient and central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    /// Largest per-component relative error.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    pub components: usize,
}

impl GradReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compares `analytic` against `(f(x + h e_i) - f(x - h e_i)) / 2h`.
///
/// The relative error of component `i` is
/// `|a_i - n_i| / max(|a_i|, |n_i|, 1e-3 * max_j |a_j|)`: components three
/// orders of magnitude below the gradient's largest entry are judged against
/// that scale, where finite-difference round-off would otherwise dominate.
pub fn finite_diff_check(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64) -> GradReport {
    assert_eq!(x.len(), analytic.len(), "gradient length mismatch");
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(f64::MIN_POSITIVE);
    let mut probe = x.to_vec();
    let mut report = GradReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        components: x.len(),
    };
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        let abs = (numeric - analytic[i]).abs();
        let rel = abs / numeric.abs().max(analytic[i].abs()).max(floor);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    report
}
