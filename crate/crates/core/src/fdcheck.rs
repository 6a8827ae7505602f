//! Central finite-difference helpers used to verify analytic gradients.

/// Central difference (f(x+h) - f(x-h)) / 2h of a scalar function of one
/// coordinate. The closure receives the perturbed coordinate value.
pub fn central_diff<F: FnMut(f64) -> f64>(mut f: F, x0: f64, h: f64) -> f64 {
    (f(x0 + h) - f(x0 - h)) / (2.0 * h)
}

/// Relative error with an absolute floor: values whose magnitudes both sit
/// below the floor are considered equal (finite differences bottom out
/// around 1e-10 with h = 1e-5).
pub fn grad_rel_err(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= abs_floor {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs())
}

/// True when `analytic` matches `numeric` within `rel_tol` (with the
/// standard absolute floor of 1e-7).
pub fn grads_match(analytic: f64, numeric: f64, rel_tol: f64) -> bool {
    grad_rel_err(analytic, numeric, 1e-7) <= rel_tol
}
