#[derive(Clone, Copy, Debug)]
pub struct FiniteDiffConfig {
    pub h: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error of near-zero components.
    pub floor: f64,
}

impl Default for FiniteDiffConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
        }
    }
}

/// Central differences `(f(θ + h e_i) - f(θ - h e_i)) / 2h` per coordinate.
pub fn fd_gradient<F>(mut f: F, theta: &[f64], h: f64) -> Result<Vec<f64>, String>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut x = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x);
        x[i] = orig - h;
        let down = f(&x);
        x[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(format!("objective not finite at coordinate {i}"));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// `max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)`.
pub fn max_rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
