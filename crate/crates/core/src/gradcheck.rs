//! Central-difference gradient verification. Everything here runs in 64-bit
//! and is deliberately independent of the analytic backward passes it checks:
//! it only ever evaluates forward closures at perturbed points.

use std::fmt;

/// Default perturbation step for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Tolerance for smooth operators (conv, fc, losses away from kinks).
pub const TOL_SMOOTH: f64 = 1e-5;
/// Tolerance for pipelines containing max pooling or ReLU; kink proximity
/// inflates finite-difference error.
pub const TOL_KINKED: f64 = 1e-4;
/// Floor in the relative-error denominator.
pub const REL_ERR_EPS: f64 = 1e-8;

/// Per-coordinate (f(x+h e_i) - f(x-h e_i)) / 2h. A non-finite evaluation
/// flags the coordinate as NaN, which no tolerance accepts.
pub fn central_difference<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut point = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + step;
        let up = f(&point);
        point[i] = orig - step;
        let down = f(&point);
        point[i] = orig;
        grad[i] = if up.is_finite() && down.is_finite() {
            (up - down) / (2.0 * step)
        } else {
            f64::NAN
        };
    }
    grad
}

/// Max over coordinates of |a - n| / max(|a|, |n|, eps). NaN anywhere is
/// reported as infinite error.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst: f64 = 0.0;
    for (&a, &n) in analytic.iter().zip(numeric) {
        if !a.is_finite() || !n.is_finite() {
            return f64::INFINITY;
        }
        let denom = a.abs().max(n.abs()).max(REL_ERR_EPS);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}

/// True when every value sits further than 10*step from zero, keeping
/// central differences of ReLU-like kinks valid.
pub fn away_from_kinks(values: &[f64], step: f64) -> bool {
    values.iter().all(|v| v.abs() > 10.0 * step)
}

/// True when, within every group, the top value beats the runner-up by more
/// than 10*step. Guards max-pooling argmax flips under perturbation.
pub fn max_margins_ok<I>(groups: I, step: f64) -> bool
where
    I: IntoIterator,
    I::Item: AsRef<[f64]>,
{
    for group in groups {
        let g = group.as_ref();
        if g.len() < 2 {
            continue;
        }
        let mut best = f64::NEG_INFINITY;
        let mut second = f64::NEG_INFINITY;
        for &v in g {
            if v > best {
                second = best;
                best = v;
            } else if v > second {
                second = v;
            }
        }
        if best - second <= 10.0 * step {
            return false;
        }
    }
    true
}

/// Outcome of checking one parameter tensor.
#[derive(Clone, Debug)]
pub struct GradEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// One operator's gradient comparison across all of its parameters.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub op: String,
    pub seed: u64,
    pub tolerance: f64,
    pub entries: Vec<GradEntry>,
}

impl GradReport {
    pub fn new(op: impl Into<String>, seed: u64, tolerance: f64) -> GradReport {
        GradReport {
            op: op.into(),
            seed,
            tolerance,
            entries: Vec::new(),
        }
    }

    pub fn record(&mut self, name: impl Into<String>, analytic: &[f64], numeric: &[f64]) {
        let err = max_relative_error(analytic, numeric);
        self.entries.push(GradEntry {
            name: name.into(),
            max_rel_err: err,
            pass: err < self.tolerance,
        });
    }

    pub fn pass(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn worst(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{} {} [{}] max_rel_err={:.3e} tol={:.0e} seed={}",
                if e.pass { "ok  " } else { "FAIL" },
                self.op,
                e.name,
                e.max_rel_err,
                self.tolerance,
                self.seed,
            )?;
        }
        Ok(())
    }
}

/// Render a batch of reports as the text consumed by the CLI gradcheck
/// command; the boolean is the overall verdict.
pub fn render_reports(reports: &[GradReport]) -> (String, bool) {
    let mut out = String::new();
    let mut all_pass = true;
    for r in reports {
        out.push_str(&r.to_string());
        all_pass &= r.pass();
    }
    (out, all_pass)
}

// The standard operator battery lives in `battery` and is appended to by the
// modules it exercises; see `crate::gradcheck::battery`.
pub use battery::{micro_pipeline_report, standard_battery};

mod battery;
