//! Exact loss values for the toy BSDE under the linear trial families.

/// `E|W_t|^{2k} = d(d+2)···(d+2k-2) t^k` for a `d`-dimensional Brownian motion.
pub fn brownian_moment(d: usize, k: u32, t: f64) -> f64 {
    (0..k).map(|i| (d + 2 * i as usize) as f64).product::<f64>() * t.powi(k as i32)
}

/// Loss of `y = θ1|W|²`, `z = θ2 W`.
pub fn toy_bml_closed_form_scheme1(theta1: f64, theta2: f64, d: usize, horizon: f64) -> f64 {
    let df = d as f64;
    let c = horizon.powi(3) / 3.0;
    c * (df + 2.0) * df * (theta1 - 1.0 / df).powi(2) + c * df * (theta2 - 2.0 / df).powi(2)
}

/// Gradient of [`toy_bml_closed_form_scheme1`].
pub fn toy_bml_closed_form_scheme1_grad(theta1: f64, theta2: f64, d: usize, horizon: f64) -> [f64; 2] {
    let df = d as f64;
    let c = horizon.powi(3) / 3.0;
    [
        2.0 * c * (df + 2.0) * df * (theta1 - 1.0 / df),
        2.0 * c * df * (theta2 - 2.0 / df),
    ]
}

/// `ℓ_y(θ1) = E∫ |θ1|W_t|⁴ - |W_t|²/d|² dt` as `[a, b, c]` with
/// `ℓ_y = a θ1² - b θ1 + c`.
fn scheme2_y_coefficients(d: usize, horizon: f64) -> [f64; 3] {
    let df = d as f64;
    let t = horizon;
    [
        df * (df + 2.0) * (df + 4.0) * (df + 6.0) * t.powi(5) / 5.0,
        2.0 * (df + 2.0) * (df + 4.0) * t.powi(4) / 4.0,
        (df + 2.0) * t.powi(3) / (3.0 * df),
    ]
}

/// `ℓ_z(θ2) = E∫ t |θ2|W_t|²W_t - 2W_t/d|² dt` in the same form.
fn scheme2_z_coefficients(d: usize, horizon: f64) -> [f64; 3] {
    let df = d as f64;
    let t = horizon;
    [
        df * (df + 2.0) * (df + 4.0) * t.powi(5) / 5.0,
        2.0 * 2.0 * (df + 2.0) * t.powi(4) / 4.0,
        4.0 * t.powi(3) / (3.0 * df),
    ]
}

fn quadratic([a, b, c]: [f64; 3], x: f64) -> f64 {
    a * x * x - b * x + c
}

/// Loss of `y = θ1|W|⁴`, `z = θ2|W|²W`.
pub fn toy_bml_closed_form_scheme2(theta1: f64, theta2: f64, d: usize, horizon: f64) -> f64 {
    quadratic(scheme2_y_coefficients(d, horizon), theta1) + quadratic(scheme2_z_coefficients(d, horizon), theta2)
}

/// `(5 / (4d(d+6)T), 5 / (2d(d+4)T))`.
pub fn toy_scheme2_minimizer(d: usize, horizon: f64) -> (f64, f64) {
    let df = d as f64;
    (
        5.0 / (4.0 * df * (df + 6.0) * horizon),
        5.0 / (2.0 * df * (df + 4.0) * horizon),
    )
}

pub fn toy_scheme2_minimum(d: usize, horizon: f64) -> f64 {
    let (a, b) = toy_scheme2_minimizer(d, horizon);
    toy_bml_closed_form_scheme2(a, b, d, horizon)
}
