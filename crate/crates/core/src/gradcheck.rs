//! Finite-difference certification of analytic gradients.
//!
//! A check compares the analytic gradient of a scalar composite (usually a
//! fixed random projection of an operator's output) against central
//! differences with a per-element step `max(1e-5, 1e-4·|x|)`.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Result;
use crate::tensor::Tensor;

/// Denominator floor of the relative error, so components that are zero
/// analytically are measured against an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Elements compared.
    pub checked: usize,
    /// Elements skipped as sitting on a kink.
    pub skipped: usize,
    pub passed: bool,
    /// Why the check failed, when it did not fail on tolerance alone.
    pub failure: Option<String>,
}

impl core::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(
            f,
            "{}: {} (max abs {:.3e}, max rel {:.3e}, tol {:.1e}, {} checked, {} skipped)",
            self.op,
            if self.passed { "pass" } else { "FAIL" },
            self.max_abs_error,
            self.max_rel_error,
            self.tolerance,
            self.checked,
            self.skipped,
        )?;
        if let Some(why) = &self.failure {
            write!(f, " [{why}]")?;
        }
        Ok(())
    }
}

type SkipFn<'a> = Box<dyn Fn(usize, usize, f64, f64) -> bool + 'a>;

/// Builder for a single gradient check.
pub struct GradCheck<'a> {
    op: String,
    tolerance: f64,
    skip: Option<SkipFn<'a>>,
    detect_kinks: bool,
    rel_floor: f64,
}

/// Central-difference step for an element of value `x`.
pub fn fd_step(x: f64) -> f64 {
    (1e-4 * x.abs()).max(1e-5)
}

impl<'a> GradCheck<'a> {
    pub fn new(op: &str, tolerance: f64) -> Self {
        GradCheck { op: String::from(op), tolerance, skip: None, detect_kinks: false, rel_floor: REL_ERROR_FLOOR }
    }

    /// Excludes elements for which `skip(input_index, element_index, value, step)` holds,
    /// e.g. ReLU inputs within one step of zero.
    pub fn skip_if(mut self, skip: impl Fn(usize, usize, f64, f64) -> bool + 'a) -> Self {
        self.skip = Some(Box::new(skip));
        self
    }

    /// Skips elements whose one-sided slopes disagree sharply, which happens when
    /// a perturbation crosses a kink somewhere inside a composite.
    pub fn detect_kinks(mut self) -> Self {
        self.detect_kinks = true;
        self
    }

    /// Smallest denominator of the relative error (default [`REL_ERROR_FLOOR`]).
    pub fn rel_floor(mut self, floor: f64) -> Self {
        self.rel_floor = floor;
        self
    }

    /// `loss` evaluates the scalar composite; `grads` returns its analytic
    /// gradient with respect to every input, in order.
    pub fn run<L, G>(&self, inputs: &[Tensor<f64>], loss: L, grads: G) -> GradCheckReport
    where
        L: Fn(&[Tensor<f64>]) -> Result<f64>,
        G: Fn(&[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>,
    {
        let mut report = GradCheckReport {
            op: self.op.clone(),
            max_abs_error: 0.0,
            max_rel_error: 0.0,
            tolerance: self.tolerance,
            checked: 0,
            skipped: 0,
            passed: false,
            failure: None,
        };
        let fail = |mut r: GradCheckReport, why: String| {
            r.failure = Some(why);
            r.passed = false;
            r
        };
        if inputs.iter().any(|t| !t.is_finite()) {
            return fail(report, String::from("non-finite input"));
        }
        let analytic = match grads(inputs) {
            Ok(g) => g,
            Err(e) => return fail(report, format!("backward failed: {e}")),
        };
        if analytic.len() != inputs.len() {
            return fail(report, format!("{} gradients for {} inputs", analytic.len(), inputs.len()));
        }
        for (g, x) in analytic.iter().zip(inputs) {
            if g.shape() != x.shape() {
                return fail(report, format!("gradient shape {:?} vs input {:?}", g.shape(), x.shape()));
            }
            if !g.is_finite() {
                return fail(report, String::from("non-finite analytic gradient"));
            }
        }
        let base = if self.detect_kinks {
            match loss(inputs) {
                Ok(v) => Some(v),
                Err(e) => return fail(report, format!("forward failed: {e}")),
            }
        } else {
            None
        };

        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        for (ti, x) in inputs.iter().enumerate() {
            for ei in 0..x.numel() {
                let v = x.data()[ei];
                let eps = fd_step(v);
                if self.skip.as_ref().is_some_and(|s| s(ti, ei, v, eps)) {
                    report.skipped += 1;
                    continue;
                }
                work[ti].data_mut()[ei] = v + eps;
                let plus = loss(&work);
                work[ti].data_mut()[ei] = v - eps;
                let minus = loss(&work);
                work[ti].data_mut()[ei] = v;
                let (plus, minus) = match (plus, minus) {
                    (Ok(p), Ok(m)) => (p, m),
                    (Err(e), _) | (_, Err(e)) => return fail(report, format!("forward failed: {e}")),
                };
                let numeric = (plus - minus) / (2.0 * eps);
                if let Some(f0) = base {
                    let fwd = (plus - f0) / eps;
                    let bwd = (f0 - minus) / eps;
                    if (fwd - bwd).abs() > 0.1 * fwd.abs().max(bwd.abs()).max(1e-3) {
                        report.skipped += 1;
                        continue;
                    }
                    // a kink inside the step shows up as disagreement with the half step
                    work[ti].data_mut()[ei] = v + 0.5 * eps;
                    let plus = loss(&work);
                    work[ti].data_mut()[ei] = v - 0.5 * eps;
                    let minus = loss(&work);
                    work[ti].data_mut()[ei] = v;
                    let half = match (plus, minus) {
                        (Ok(p), Ok(m)) => (p - m) / eps,
                        (Err(e), _) | (_, Err(e)) => return fail(report, format!("forward failed: {e}")),
                    };
                    if (half - numeric).abs()
                        > 0.25 * self.tolerance * half.abs().max(numeric.abs()).max(self.rel_floor)
                    {
                        report.skipped += 1;
                        continue;
                    }
                }
                let a = analytic[ti].data()[ei];
                let abs = (a - numeric).abs();
                let rel = abs / a.abs().max(numeric.abs()).max(self.rel_floor);
                report.max_abs_error = report.max_abs_error.max(abs);
                report.max_rel_error = report.max_rel_error.max(rel);
                report.checked += 1;
            }
        }
        report.passed = report.max_rel_error <= self.tolerance;
        report
    }
}

/// One-call form of [`GradCheck::run`] without skipping.
pub fn grad_check<L, G>(op: &str, inputs: &[Tensor<f64>], loss: L, grads: G, tolerance: f64) -> GradCheckReport
where
    L: Fn(&[Tensor<f64>]) -> Result<f64>,
    G: Fn(&[Tensor<f64>]) -> Result<Vec<Tensor<f64>>>,
{
    GradCheck::new(op, tolerance).run(inputs, loss, grads)
}

/// `Σ weights ⊙ output`, the scalar composite used to probe an operator.
pub fn projected(output: &Tensor<f64>, weights: &Tensor<f64>) -> Result<f64> {
    Ok(output.zip_map(weights, |a, b| a * b)?.sum())
}
