//! Central-difference verification of reverse-mode gradients.

use super::matrix::Matrix;
use super::tape::{GradientTape, Var};

/// Denominator floor for relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error at this scale.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Location of one gradient coordinate: parameter index and flat offset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Coordinate {
    pub param: usize,
    pub index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub passed: bool,
    pub max_relative_error: f64,
    pub worst: Option<Coordinate>,
    pub failures: Vec<(Coordinate, f64)>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Runs `loss_fn` on a fresh tape with `params` bound as leaves, compares the
/// reverse-mode gradient against central differences with the given step.
pub fn finite_difference_check<F>(loss_fn: F, params: &[Matrix], step: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&mut GradientTape, &[Var]) -> Var,
{
    assert!(step > 0.0 && tol > 0.0, "step and tol must be positive");
    let mut tape = GradientTape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = loss_fn(&mut tape, &vars);
    let grads = tape.backward(loss).expect("scalar loss");
    let analytic: Vec<Matrix> = vars.iter().map(|v| grads.wrt(*v)).collect();
    let value = |ps: &[Matrix]| -> f64 {
        let mut t = GradientTape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.leaf(p.clone())).collect();
        let l = loss_fn(&mut t, &vs);
        t.value(l).item()
    };
    check_gradients(value, &analytic, params, step, tol)
}

/// Compares supplied analytic gradients against central differences of `value`.
pub fn check_gradients<F>(
    value: F,
    analytic: &[Matrix],
    params: &[Matrix],
    step: f64,
    tol: f64,
) -> GradCheckReport
where
    F: Fn(&[Matrix]) -> f64,
{
    assert_eq!(analytic.len(), params.len());
    let mut work: Vec<Matrix> = params.to_vec();
    let mut report = GradCheckReport {
        passed: true,
        max_relative_error: 0.0,
        worst: None,
        failures: Vec::new(),
        checked: 0,
    };
    for p in 0..params.len() {
        assert_eq!(analytic[p].shape(), params[p].shape(), "gradient shape");
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let plus = value(&work);
            work[p].data_mut()[i] = orig - step;
            let minus = value(&work);
            work[p].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic[p].data()[i], numeric);
            let coord = Coordinate { param: p, index: i };
            report.checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = err.max(report.max_relative_error);
                report.worst = Some(coord);
            }
            if !(err < tol) {
                report.passed = false;
                report.failures.push((coord, err));
            }
        }
    }
    report
}
